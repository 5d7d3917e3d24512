//! Baseline pruners sharing the block partition: accumulated
//! weight-and-gradient (AWG) iterative pruning and one-shot magnitude
//! pruning.
//!
//! AWG tracks an exponential moving average of per-block
//! `|gradient x weight|` scores over one calibration epoch per step (weights
//! keep training under the frozen mask during tracking), then prunes up to
//! the scheduled quantile `r * step / S`, fine-tunes for `P` epochs, repeats
//! for `S` steps, and finishes with `Q` fine-tune epochs. The scale factor
//! `total_blocks / unpruned_blocks` of a block's layer boosts layers that
//! already lost many blocks.

use crate::blocks::BlockPartition;
use crate::dtopk;
use crate::error::{Error, Result};
use crate::smart::{EpochMetric, MonitorRecord};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{epoch_batches, materialize_mask, TrainState};
use crate::workbench::{evaluate, DataBundle, EvalReport};

#[derive(Debug, Clone, Copy)]
pub struct AwgConfig {
    /// Iterative pruning steps S.
    pub steps: u32,
    /// EMA decay gamma in [0,1).
    pub ema_decay: f64,
    /// Fine-tune epochs after each step (P).
    pub finetune_per_step: u32,
    /// Fine-tune epochs after the last step (Q).
    pub final_finetune: u32,
    pub target_sparsity: f64,
    /// Maximum block sparsity any single layer may reach, enforced as a
    /// post-threshold clamp (highest-importance pruned blocks are revived).
    pub max_sparsity_per_layer: Option<f64>,
}

impl AwgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("awg needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!(
                "ema decay must be in [0,1), got {}",
                self.ema_decay
            )));
        }
        if !(0.0..=1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target sparsity must be in [0,1], got {}",
                self.target_sparsity
            )));
        }
        if let Some(m) = self.max_sparsity_per_layer {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("mspl must be in [0,1], got {m}")));
            }
        }
        Ok(())
    }
}

/// EMA importance plus the current binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    pub imp: Vec<f64>,
    pub mask: Vec<f64>,
}

/// Scheduled zero count after `step_k` of `steps` at sparsity r, with slack
/// against the f64 representation of r (0.7 * 10 must floor to 7, not 6).
pub fn scheduled_zeros(r: f64, step_k: u32, steps: u32, n_w: usize) -> usize {
    let v = r * step_k as f64 / steps as f64 * n_w as f64;
    (((v + 1e-9).floor().max(0.0)) as usize).min(n_w)
}

/// Raw block importance `sum_block |grad .* w| * scale_layer` where
/// `scale_layer = total_blocks / unpruned_blocks` (clamped to total_blocks
/// when a layer is fully pruned). Gradients come from a forward/backward on
/// the masked model, so pruned blocks score zero.
pub fn awg_importance(
    partition: &BlockPartition,
    grads: &[Vec<f64>],
    weights: &[Tensor],
    mask: &[f64],
) -> Result<Vec<f64>> {
    if grads.len() != partition.n_layers() || weights.len() != partition.n_layers() {
        return Err(Error::InvalidArg(format!(
            "awg importance: partition has {} layers, got {} grads / {} weights",
            partition.n_layers(),
            grads.len(),
            weights.len()
        )));
    }
    if mask.len() != partition.n_blocks() {
        return Err(Error::InvalidArg(format!(
            "awg importance: expected {} mask entries, got {}",
            partition.n_blocks(),
            mask.len()
        )));
    }
    let scales: Vec<f64> = (0..partition.n_layers())
        .map(|layer| {
            let range = partition.layer_block_range(layer);
            let total = range.len() as f64;
            let unpruned = range.clone().filter(|&b| mask[b] != 0.0).count() as f64;
            if unpruned == 0.0 {
                total
            } else {
                total / unpruned
            }
        })
        .collect();
    let mut out = vec![0.0; partition.n_blocks()];
    for (b, slot) in out.iter_mut().enumerate() {
        let layer = partition.layer_of_block(b);
        let g = &grads[layer];
        let w = weights[layer].data();
        let mut acc = 0.0;
        partition.for_each_elem(b, |e| acc += (g[e] * w[e]).abs());
        *slot = acc * scales[layer];
    }
    Ok(out)
}

/// EMA step: the first mini-batch of a step replaces the score outright.
pub fn awg_ema_update(imp: &mut [f64], raw: &[f64], gamma: f64, first_batch: bool) {
    debug_assert_eq!(imp.len(), raw.len());
    for (i, &r) in imp.iter_mut().zip(raw) {
        *i = if first_batch { r } else { gamma * *i + (1.0 - gamma) * r };
    }
}

/// Recompute the whole mask from the importance ranking: exactly
/// `scheduled_zeros` blocks with the smallest scores go to zero, ties broken
/// by lower index pruned first.
pub fn awg_threshold(imp: &[f64], step_k: u32, steps: u32, r: f64) -> Vec<f64> {
    let z = scheduled_zeros(r, step_k, steps, imp.len());
    let mut idx: Vec<usize> = (0..imp.len()).collect();
    idx.sort_by(|&a, &b| imp[a].partial_cmp(&imp[b]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![1.0; imp.len()];
    for &i in &idx[..z] {
        mask[i] = 0.0;
    }
    mask
}

/// Revive the highest-importance pruned blocks of any layer whose sparsity
/// exceeds the cap.
fn clamp_layer_sparsity(
    partition: &BlockPartition,
    imp: &[f64],
    mask: &mut [f64],
    mspl: f64,
) {
    for layer in 0..partition.n_layers() {
        let range = partition.layer_block_range(layer);
        let allowed = (mspl * range.len() as f64 + 1e-9).floor() as usize;
        let mut pruned: Vec<usize> = range.filter(|&b| mask[b] == 0.0).collect();
        if pruned.len() <= allowed {
            continue;
        }
        pruned.sort_by(|&a, &b| imp[b].partial_cmp(&imp[a]).unwrap().then(a.cmp(&b)));
        for &b in &pruned[..pruned.len() - allowed] {
            mask[b] = 1.0;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub eval: EvalReport,
    pub hard_mask: Vec<f64>,
    pub records: Vec<MonitorRecord>,
    pub epoch_log: Vec<EpochMetric>,
    pub warnings: Vec<String>,
}

/// One masked forward/backward: returns the loss and dL/dw for each prunable
/// layer (already masked through the product rule), then applies the weight
/// update with pruned elements frozen.
fn masked_step_with_grads(
    ts: &mut TrainState,
    data: &DataBundle,
    idxs: &[usize],
    mult: &[Tensor],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let input_shape = ts.model.spec.input_shape.clone();
    let (x, y) = data.train.batch(idxs, &input_shape)?;
    let weights = ts.model.prunable_weights();
    let masked: Result<Vec<Tensor>> =
        weights.iter().zip(mult).map(|(w, m)| w.hadamard(m)).collect();
    let masked = masked?;
    let mut g = Graph::new();
    let out = ts.model.forward(&mut g, &x, Some(&y), Some(&masked))?;
    let loss_node = out.loss.expect("labels were supplied");
    let loss = g.value(loss_node).item()?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} during awg tracking (epoch {})",
            ts.epoch
        )));
    }
    g.backward(loss_node)?;

    let prunable = ts.model.prunable_indices().to_vec();
    let mut prunable_grads = Vec::with_capacity(prunable.len());
    let names: Vec<String> = ts.model.params().iter().map(|p| p.name.clone()).collect();
    for (pi, node) in out.param_nodes.iter().enumerate() {
        let mut grad = g.grad_or_zeros(*node);
        let keep = match prunable.iter().position(|&q| q == pi) {
            Some(pos) => {
                for (gv, mv) in grad.iter_mut().zip(mult[pos].data()) {
                    *gv *= mv;
                }
                prunable_grads.push(grad.clone());
                Some(mult[pos].data().to_vec())
            }
            None => None,
        };
        ts.opt_w.step_param(pi, &names[pi], ts.model.param_data_mut(pi), &grad, keep.as_deref())?;
    }
    Ok((loss, prunable_grads))
}

/// Iterative AWG pruning on a pretrained model.
pub fn run_awg(
    ts: &mut TrainState,
    partition: &BlockPartition,
    cfg: &AwgConfig,
    data: &DataBundle,
) -> Result<PruneReport> {
    cfg.validate()?;
    let n_w = partition.n_blocks();
    let mut state = ImportanceState { imp: vec![0.0; n_w], mask: vec![1.0; n_w] };
    let mut records = Vec::new();
    let mut epoch_log = Vec::new();
    let mut warnings = Vec::new();
    let mut iter: u64 = 0;
    let mut last_flips = 0.0;

    let log_epoch = |ts: &TrainState,
                         phase: &'static str,
                         train_loss: f64,
                         mask: &[f64],
                         epoch_log: &mut Vec<EpochMetric>|
     -> Result<()> {
        let rep = evaluate(&ts.model, &data.test, Some((partition, mask)))?;
        epoch_log.push(EpochMetric {
            epoch: ts.epoch,
            phase,
            train_loss,
            test_accuracy: rep.metrics.accuracy,
            test_loss: rep.metrics.loss,
        });
        Ok(())
    };

    for step in 1..=cfg.steps {
        // Tracking epoch: EMA importance under the pre-step mask, with
        // weight updates.
        let mult = partition.expand_mask(&state.mask)?;
        let weights_now = |ts: &TrainState| ts.model.prunable_weights();
        let batches = epoch_batches(data.train.len(), ts.batch_size, ts.seed, ts.epoch);
        let mut loss_sum = 0.0;
        for (bi, idxs) in batches.iter().enumerate() {
            let weights = weights_now(ts);
            let (loss, grads) = masked_step_with_grads(ts, data, idxs, &mult)?;
            let raw = awg_importance(partition, &grads, &weights, &state.mask)?;
            awg_ema_update(&mut state.imp, &raw, cfg.ema_decay, bi == 0);
            loss_sum += loss * idxs.len() as f64;
            iter += 1;
            let kept = state.mask.iter().filter(|&&v| v != 0.0).count() as f64 / n_w as f64;
            records.push(MonitorRecord {
                iter,
                tau: 0.0,
                t: 0.0,
                loss,
                drift: last_flips,
                satisfied_frac: kept,
            });
            last_flips = 0.0;
        }
        ts.epoch += 1;
        log_epoch(ts, "awg_track", loss_sum / data.train.len() as f64, &state.mask, &mut epoch_log)?;

        // Threshold update from the accumulated importance.
        let new_mask = {
            let mut m = awg_threshold(&state.imp, step, cfg.steps, cfg.target_sparsity);
            if let Some(mspl) = cfg.max_sparsity_per_layer {
                clamp_layer_sparsity(partition, &state.imp, &mut m, mspl);
            }
            m
        };
        last_flips = new_mask
            .iter()
            .zip(&state.mask)
            .filter(|(a, b)| a != b)
            .count() as f64;
        state.mask = new_mask;
        for layer in 0..partition.n_layers() {
            let range = partition.layer_block_range(layer);
            if range.clone().all(|b| state.mask[b] == 0.0) {
                warnings.push(format!(
                    "layer {} fully pruned after step {step}; importance scale clamped",
                    partition.layer_desc(layer).name
                ));
            }
        }

        // Per-step fine-tuning under the frozen mask.
        let mult = partition.expand_mask(&state.mask)?;
        for _ in 0..cfg.finetune_per_step {
            let loss = ts.train_epoch(&data.train, Some(&mult))?;
            log_epoch(ts, "awg_finetune", loss, &state.mask, &mut epoch_log)?;
        }
    }

    // Final fine-tuning.
    let mult = partition.expand_mask(&state.mask)?;
    for _ in 0..cfg.final_finetune {
        let loss = ts.train_epoch(&data.train, Some(&mult))?;
        log_epoch(ts, "awg_finetune", loss, &state.mask, &mut epoch_log)?;
    }

    materialize_mask(&mut ts.model, partition, &state.mask)?;
    let eval = evaluate(&ts.model, &data.test, Some((partition, &state.mask)))?;
    Ok(PruneReport { eval, hard_mask: state.mask, records, epoch_log, warnings })
}

/// One-shot magnitude pruning: drop the `r` fraction of blocks with the
/// smallest l1 norms (the kept set is exactly `hard_topk` of the norms),
/// then fine-tune under the frozen mask.
pub fn run_magnitude(
    ts: &mut TrainState,
    partition: &BlockPartition,
    r: f64,
    finetune_epochs: u32,
    data: &DataBundle,
) -> Result<PruneReport> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("target sparsity must be in [0,1], got {r}")));
    }
    let n_w = partition.n_blocks();
    let norms = partition.block_reduce(&ts.model.prunable_weights(), crate::blocks::Reduction::L1)?;
    let zeros = scheduled_zeros(r, 1, 1, n_w);
    let mask = dtopk::hard_topk(&norms, n_w - zeros)?;

    let mut epoch_log = Vec::new();
    let mult = partition.expand_mask(&mask)?;
    for _ in 0..finetune_epochs {
        let loss = ts.train_epoch(&data.train, Some(&mult))?;
        let rep = evaluate(&ts.model, &data.test, Some((partition, &mask)))?;
        epoch_log.push(EpochMetric {
            epoch: ts.epoch,
            phase: "finetune",
            train_loss: loss,
            test_accuracy: rep.metrics.accuracy,
            test_loss: rep.metrics.loss,
        });
    }
    materialize_mask(&mut ts.model, partition, &mask)?;
    let eval = evaluate(&ts.model, &data.test, Some((partition, &mask)))?;
    Ok(PruneReport { eval, hard_mask: mask, records: Vec::new(), epoch_log, warnings: Vec::new() })
}
