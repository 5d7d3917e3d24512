//! Shared minibatch training plumbing used by every driver.

use crate::blocks::BlockPartition;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Sgd, Tensor};
use crate::workbench::{Dataset, Model};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Shuffled minibatch index order for one global epoch. A pure function of
/// `(seed, epoch)`, which is what makes mid-run checkpoint resume replay the
/// exact same data order without any persisted generator state.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u32) -> Vec<Vec<usize>> {
    let mut idxs: Vec<usize> = (0..n).collect();
    Rng::for_epoch_shuffle(seed, epoch).shuffle(&mut idxs);
    idxs.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> u64 {
    (n as u64).div_ceil(batch_size.max(1) as u64)
}

/// Model plus optimizer plus the global epoch counter. The counter runs
/// across phases (pretrain, search, fine-tune) so that shuffles stay aligned
/// between a full run and the same run split across checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub opt_w: Sgd,
    pub epoch: u32,
    pub seed: u64,
    pub batch_size: usize,
}

impl TrainState {
    pub fn new(model: Model, opt: &OptSettings, seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let opt_w = Sgd::new(opt.lr, opt.momentum, opt.weight_decay, &model.param_sizes())?;
        Ok(TrainState { model, opt_w, epoch: 0, seed, batch_size })
    }

    /// One SGD epoch over `data`; returns the sample-weighted mean loss.
    ///
    /// `mask` carries expanded binary multipliers for the prunable layers:
    /// the forward pass runs on `w .* mask`, gradients come back through the
    /// product, and masked-out elements are frozen entirely (no gradient, no
    /// momentum, no weight decay), so pruned blocks never move.
    pub fn train_epoch(&mut self, data: &Dataset, mask: Option<&[Tensor]>) -> Result<f64> {
        let batches = epoch_batches(data.len(), self.batch_size, self.seed, self.epoch);
        let mut loss_sum = 0.0;
        for idxs in &batches {
            let loss = self.train_batch(data, idxs, mask)?;
            loss_sum += loss * idxs.len() as f64;
        }
        self.epoch += 1;
        Ok(loss_sum / data.len() as f64)
    }

    pub fn train_batch(&mut self, data: &Dataset, idxs: &[usize], mask: Option<&[Tensor]>) -> Result<f64> {
        let input_shape = self.model.spec.input_shape.clone();
        let (x, y) = data.batch(idxs, &input_shape)?;
        let overrides = match mask {
            Some(mult) => {
                let masked: Result<Vec<Tensor>> = self
                    .model
                    .prunable_weights()
                    .iter()
                    .zip(mult)
                    .map(|(w, m)| w.hadamard(m))
                    .collect();
                Some(masked?)
            }
            None => None,
        };
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, &x, Some(&y), overrides.as_deref())?;
        let loss_node = out.loss.expect("labels were supplied");
        let loss = g.value(loss_node).item()?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at epoch {} (batch of {})",
                self.epoch,
                idxs.len()
            )));
        }
        g.backward(loss_node)?;

        let prunable: Vec<usize> = self.model.prunable_indices().to_vec();
        let names: Vec<String> = self.model.params().iter().map(|p| p.name.clone()).collect();
        for (pi, node) in out.param_nodes.iter().enumerate() {
            let mut grad = g.grad_or_zeros(*node);
            let keep = match (mask, prunable.iter().position(|&q| q == pi)) {
                (Some(mult), Some(pos)) => {
                    // d loss / d w = (d loss / d (w .* m)) .* m
                    for (gv, mv) in grad.iter_mut().zip(mult[pos].data()) {
                        *gv *= mv;
                    }
                    Some(mult[pos].data().to_vec())
                }
                _ => None,
            };
            self.opt_w.step_param(
                pi,
                &names[pi],
                self.model.param_data_mut(pi),
                &grad,
                keep.as_deref(),
            )?;
        }
        Ok(loss)
    }

    /// Plain training for a span of epochs (the pretraining phase).
    pub fn train_epochs(&mut self, data: &Dataset, epochs: u32) -> Result<Vec<f64>> {
        (0..epochs).map(|_| self.train_epoch(data, None)).collect()
    }
}

/// Write the binary mask into the stored weights (`w <- w .* mask`).
pub fn materialize_mask(
    model: &mut Model,
    partition: &BlockPartition,
    hard_mask: &[f64],
) -> Result<()> {
    let mult = partition.expand_mask(hard_mask)?;
    for (pos, &pi) in model.prunable_indices().to_vec().iter().enumerate() {
        let m = mult[pos].data().to_vec();
        let data = model.param_data_mut(pi);
        for (w, mv) in data.iter_mut().zip(&m) {
            *w *= mv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workbench::{gen_blobs, ArchKind, ModelSpec};

    fn small_mlp() -> Model {
        Model::init(
            ModelSpec {
                arch: ArchKind::Mlp,
                input_shape: vec![6],
                channels: vec![],
                conv_kernel: 1,
                hidden: vec![8],
                classes: 3,
                prune_classifier: false,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn epoch_batches_cover_everything_deterministically() {
        let a = epoch_batches(10, 3, 5, 0);
        let b = epoch_batches(10, 3, 5, 0);
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(a, epoch_batches(10, 3, 5, 1));
    }

    #[test]
    fn loss_decreases_on_blobs() {
        let data = gen_blobs(3, 6, 40, 2).unwrap();
        let opt = OptSettings { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 };
        let mut ts = TrainState::new(small_mlp(), &opt, 2, 16).unwrap();
        let losses = ts.train_epochs(&data.train, 8).unwrap();
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = gen_blobs(3, 6, 30, 4).unwrap();
        let opt = OptSettings { lr: 0.05, momentum: 0.9, weight_decay: 0.0 };
        let run = || {
            let mut ts = TrainState::new(small_mlp(), &opt, 4, 8).unwrap();
            ts.train_epochs(&data.train, 3).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
