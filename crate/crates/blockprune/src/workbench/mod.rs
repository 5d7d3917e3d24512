//! Desk-scale experiment support: models, datasets, metrics, checkpoints.

mod checkpoint;
mod data;
mod metrics;
mod model;

pub use checkpoint::{Checkpoint, PartitionDesc, PrunerState, TensorEntry, CHECKPOINT_VERSION};
pub use data::{gen_blobs, load_idx, DataBundle, Dataset};
pub use metrics::{evaluate, EvalReport, Metrics};
pub use model::{ArchKind, ForwardOut, Model, ModelSpec, Param};
