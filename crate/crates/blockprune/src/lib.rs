//! Block pruning toolkit.
//!
//! Structured pruning removes contiguous blocks of weights (channel tiles)
//! so that accelerator MAC cycles can be skipped wholesale. This crate
//! implements three pruners over a shared block partition:
//!
//! - `smart`: a differentiable top-k mask learner. Every block gets one
//!   learnable score; a sigmoid relaxation of the top-k indicator turns the
//!   discrete keep/drop decision into a soft multiplier whose temperature is
//!   annealed toward zero during a structural-search phase, after which the
//!   mask is hardened to exact binary form and the survivors are fine-tuned.
//! - `baselines::run_awg`: iterative pruning driven by an exponential moving
//!   average of |gradient x weight| block importances with quantile
//!   thresholding.
//! - `baselines::run_magnitude`: one-shot smallest-l1-norm block pruning.
//!
//! Supporting infrastructure: a minimal dense-tensor reverse-mode autodiff
//! engine (`tensor`), the differentiable top-k operator itself (`dtopk`),
//! block partitioning (`blocks`), desk-scale models/datasets/checkpoints
//! (`workbench`), config-driven run orchestration (`config`, `runner`), and
//! independent numerical oracles (`verify`).

pub mod baselines;
pub mod blocks;
pub mod config;
pub mod dtopk;
pub mod error;
pub mod rng;
pub mod runner;
pub mod smart;
pub mod tensor;
pub mod trainer;
pub mod verify;
pub mod workbench;

pub use error::{Error, Result};
