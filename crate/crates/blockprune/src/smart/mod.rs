//! The differentiable top-k block pruner.
//!
//! One learnable score per block. During structural search the forward pass
//! runs on `w .* expand(f)` where `f` is the soft top-k mask of the scores at
//! the current temperature; weights and scores are both updated by SGD while
//! the temperature anneals toward zero, sharpening the mask. The gradients
//! split cleanly:
//!
//! ```text
//! dL/dw = dL/dw_hat .* expand(f)
//! dL/dm = J_topk . g,   g_b = sum over block b of (dL/dw_hat .* w)
//! ```
//!
//! After search, the mask hardens to the exact binary top-k of the scores
//! and the surviving weights are fine-tuned with pruned blocks frozen.

mod schedule;

pub use schedule::{ScheduleFamily, TempSchedule};

use std::rc::Rc;

use crate::blocks::BlockPartition;
use crate::dtopk;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Sgd, Tensor};
use crate::trainer::{batches_per_epoch, epoch_batches, OptSettings, TrainState};
use crate::workbench::{
    evaluate, Checkpoint, DataBundle, EvalReport, PartitionDesc, PrunerState, TensorEntry,
};

/// Mask scores plus the operator state they were last solved with.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    pub m: Vec<f64>,
    pub tau: f64,
    /// Threshold offset from the most recent solve.
    pub t: f64,
    /// Search-iteration counter.
    pub iter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskInit {
    MeanAbs,
    L1,
    Ones,
}

impl MaskInit {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean_abs" => Ok(MaskInit::MeanAbs),
            "l1" => Ok(MaskInit::L1),
            "ones" => Ok(MaskInit::Ones),
            other => Err(Error::Config(format!(
                "unknown mask_init '{other}' (want mean_abs | l1 | ones)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MaskInit::MeanAbs => "mean_abs",
            MaskInit::L1 => "l1",
            MaskInit::Ones => "ones",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SmartConfig {
    /// Target block sparsity r in [0,1].
    pub target_sparsity: f64,
    /// Pretraining runs through global epoch s (exclusive).
    pub pretrain_epochs: u32,
    /// Structural search runs through global epoch l (exclusive).
    pub search_end_epoch: u32,
    pub finetune_epochs: u32,
    pub schedule: TempSchedule,
    pub mask_init: MaskInit,
    /// Freeze all network weights during search; only the scores move.
    pub weights_frozen: bool,
    pub mask_opt: OptSettings,
}

impl SmartConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.target_sparsity) {
            return Err(Error::Config(format!(
                "target sparsity must be in [0,1], got {}",
                self.target_sparsity
            )));
        }
        if self.pretrain_epochs > self.search_end_epoch {
            return Err(Error::Config(format!(
                "pretrain epochs s = {} must not exceed search end l = {}",
                self.pretrain_epochs, self.search_end_epoch
            )));
        }
        Ok(())
    }
}

/// Blocks kept at sparsity r: `ceil((1 - r) * n_w)`. The tiny slack keeps
/// values that are integral in real arithmetic (e.g. r = 0.93, n_w = 100)
/// from rounding up through the f64 representation error of r.
pub fn compute_k(r: f64, n_w: usize) -> usize {
    let v = (1.0 - r) * n_w as f64;
    (((v - 1e-9).ceil().max(0.0)) as usize).min(n_w)
}

/// Score initialization from the pretrained weights.
pub fn init_masks(
    partition: &BlockPartition,
    weights: &[Tensor],
    init: MaskInit,
    tau_start: f64,
) -> Result<MaskState> {
    let m = match init {
        MaskInit::MeanAbs => partition.block_reduce(weights, crate::blocks::Reduction::MeanAbs)?,
        MaskInit::L1 => partition.block_reduce(weights, crate::blocks::Reduction::L1)?,
        MaskInit::Ones => vec![1.0; partition.n_blocks()],
    };
    Ok(MaskState { m, tau: tau_start, t: 0.0, iter: 0 })
}

/// Binary mask with exactly k ones at the k largest scores, ties broken by
/// index. Equals the hard top-k of the soft mask: the relaxation preserves
/// score order, and ranking the scores directly also sidesteps the saturated
/// regime where many f values have collapsed to exactly 1.0.
pub fn harden(state: &MaskState, k: usize) -> Result<Vec<f64>> {
    dtopk::hard_topk(&state.m, k)
}

/// The two gradient identities assembled from the masked-weight gradient.
#[derive(Debug, Clone)]
pub struct Eq6Grads {
    /// dL/dw per prunable layer.
    pub weight_grads: Vec<Vec<f64>>,
    /// Per-block inner products g_b = <dL/dw_hat, w> restricted to block b.
    pub block_inner: Vec<f64>,
    /// dL/dm, the VJP of the top-k operator applied to g.
    pub mask_grad: Vec<f64>,
}

/// Assemble dL/dw and dL/dm from dL/dw_hat. Zero upstream gives exactly zero
/// outputs: both identities are linear in the upstream gradient.
pub fn eq6_gradients(
    partition: &BlockPartition,
    m: &[f64],
    k: usize,
    tau: f64,
    f: &[f64],
    weights: &[Tensor],
    upstream_masked: &[Vec<f64>],
) -> Result<Eq6Grads> {
    if upstream_masked.len() != partition.n_layers() || weights.len() != partition.n_layers() {
        return Err(Error::InvalidArg(format!(
            "eq6: partition has {} layers, got {} weights / {} upstream buffers",
            partition.n_layers(),
            weights.len(),
            upstream_masked.len()
        )));
    }
    let mut weight_grads: Vec<Vec<f64>> =
        upstream_masked.iter().map(|u| vec![0.0; u.len()]).collect();
    let mut block_inner = vec![0.0; partition.n_blocks()];
    for b in 0..partition.n_blocks() {
        let layer = partition.layer_of_block(b);
        let up = &upstream_masked[layer];
        let w = weights[layer].data();
        let wg = &mut weight_grads[layer];
        let fb = f[b];
        let mut inner = 0.0;
        partition.for_each_elem(b, |e| {
            wg[e] = up[e] * fb;
            inner += up[e] * w[e];
        });
        block_inner[b] = inner;
    }
    let mask_grad = dtopk::topk_vjp(m, k, tau, &block_inner)?;
    Ok(Eq6Grads { weight_grads, block_inner, mask_grad })
}

/// Expected masked-weight fluctuation per block if the temperature dropped
/// to zero right now: `||w_hat_b|| * min(1, |1 - 1/f_b|)`. Large entries mark
/// blocks stuck between kept and pruned.
pub fn fluctuation_diag(
    partition: &BlockPartition,
    weights: &[Tensor],
    f: &[f64],
) -> Result<Vec<f64>> {
    if f.len() != partition.n_blocks() {
        return Err(Error::InvalidArg(format!(
            "expected {} mask values, got {}",
            partition.n_blocks(),
            f.len()
        )));
    }
    let norms = partition.block_reduce(weights, crate::blocks::Reduction::L2)?;
    Ok(f.iter()
        .zip(&norms)
        .map(|(&fb, &wn)| {
            let masked_norm = fb * wn;
            let factor = if fb == 0.0 { 1.0 } else { (1.0 - 1.0 / fb).abs().min(1.0) };
            masked_norm * factor
        })
        .collect())
}

/// Fraction of score entries satisfying the decay condition
/// `tau <= min((m_i + l)^2, |(m_i + l)/s|)` with `l = t * tau` at iteration s.
pub fn monitor_satisfied_frac(m: &[f64], tau: f64, t: f64, s: u64) -> f64 {
    assert!(s >= 1, "monitor wants a 1-based iteration index");
    let l = t * tau;
    let sf = s as f64;
    let ok = m
        .iter()
        .filter(|&&mi| {
            let a = mi + l;
            tau <= (a * a).min((a / sf).abs())
        })
        .count();
    ok as f64 / m.len() as f64
}

/// One line of the per-iteration diagnostic log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorRecord {
    pub iter: u64,
    pub tau: f64,
    pub t: f64,
    pub loss: f64,
    /// Total score movement this iteration, sum_i |m_i' - m_i|.
    pub drift: f64,
    pub satisfied_frac: f64,
}

impl MonitorRecord {
    pub fn csv_header() -> &'static str {
        "iter,tau,t,loss,drift,monitor_satisfied_frac"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.tau, self.t, self.loss, self.drift, self.satisfied_frac
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Search,
    Finetune,
    Done,
}

impl Phase {
    pub fn as_u8(self) -> u8 {
        match self {
            Phase::Pretrain => 0,
            Phase::Search => 1,
            Phase::Finetune => 2,
            Phase::Done => 3,
        }
    }

    pub fn from_u8(v: u8) -> Result<Phase> {
        Ok(match v {
            0 => Phase::Pretrain,
            1 => Phase::Search,
            2 => Phase::Finetune,
            3 => Phase::Done,
            other => return Err(Error::Checkpoint(format!("unknown phase tag {other}"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Search => "search",
            Phase::Finetune => "finetune",
            Phase::Done => "done",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetric {
    pub epoch: u32,
    pub phase: &'static str,
    pub train_loss: f64,
    pub test_accuracy: f64,
    pub test_loss: f64,
}

#[derive(Debug, Clone)]
pub struct SmartReport {
    pub eval: EvalReport,
    pub hard_mask: Vec<f64>,
    pub records: Vec<MonitorRecord>,
    pub epoch_log: Vec<EpochMetric>,
}

pub enum RunStatus {
    Completed(Box<SmartReport>),
    /// Stopped at the requested search iteration; state is checkpointable.
    Halted(u64),
}

/// Three-phase training driver: pretrain, structural search, fine-tune.
#[derive(Debug)]
pub struct SmartRun {
    pub ts: TrainState,
    pub partition: Rc<BlockPartition>,
    pub cfg: SmartConfig,
    pub mask: Option<MaskState>,
    pub opt_m: Option<Sgd>,
    pub hard_mask: Option<Vec<f64>>,
    pub phase: Phase,
    pub records: Vec<MonitorRecord>,
    pub epoch_log: Vec<EpochMetric>,
}

impl SmartRun {
    pub fn new(ts: TrainState, partition: BlockPartition, cfg: SmartConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SmartRun {
            ts,
            partition: Rc::new(partition),
            cfg,
            mask: None,
            opt_m: None,
            hard_mask: None,
            phase: Phase::Pretrain,
            records: Vec::new(),
            epoch_log: Vec::new(),
        })
    }

    fn n_blocks(&self) -> usize {
        self.partition.n_blocks()
    }

    fn k(&self) -> usize {
        compute_k(self.cfg.target_sparsity, self.n_blocks())
    }

    fn log_epoch(&mut self, data: &DataBundle, train_loss: f64) -> Result<()> {
        let mask_view;
        let mask = match self.phase {
            Phase::Finetune | Phase::Done => {
                mask_view = self.hard_mask.clone().unwrap_or_default();
                Some((self.partition.as_ref(), mask_view.as_slice()))
            }
            _ => None,
        };
        let rep = evaluate(&self.ts.model, &data.test, mask)?;
        self.epoch_log.push(EpochMetric {
            epoch: self.ts.epoch,
            phase: self.phase.as_str(),
            train_loss,
            test_accuracy: rep.metrics.accuracy,
            test_loss: rep.metrics.loss,
        });
        Ok(())
    }

    /// Phase 1: plain training through global epoch s, then score init.
    pub fn pretrain(&mut self, data: &DataBundle) -> Result<()> {
        if self.phase != Phase::Pretrain {
            return Ok(());
        }
        while self.ts.epoch < self.cfg.pretrain_epochs {
            let loss = self.ts.train_epoch(&data.train, None)?;
            self.log_epoch(data, loss)?;
        }
        let weights = self.ts.model.prunable_weights();
        self.mask = Some(init_masks(
            &self.partition,
            &weights,
            self.cfg.mask_init,
            self.cfg.schedule.value(0),
        )?);
        self.opt_m = Some(Sgd::new(
            self.cfg.mask_opt.lr,
            self.cfg.mask_opt.momentum,
            self.cfg.mask_opt.weight_decay,
            &[self.n_blocks()],
        )?);
        self.phase = Phase::Search;
        Ok(())
    }

    /// Phase 2: structural search through global epoch l, then hardening.
    /// `halt_at_iter` stops just before that search iteration executes and
    /// leaves the state checkpointable mid-epoch.
    pub fn search(&mut self, data: &DataBundle, halt_at_iter: Option<u64>) -> Result<Option<u64>> {
        if self.phase != Phase::Search {
            return Ok(None);
        }
        let s = self.cfg.pretrain_epochs;
        let bpe = batches_per_epoch(data.train.len(), self.ts.batch_size);
        while self.ts.epoch < self.cfg.search_end_epoch {
            let batches =
                epoch_batches(data.train.len(), self.ts.batch_size, self.ts.seed, self.ts.epoch);
            let iter = self.mask.as_ref().unwrap().iter;
            let done_in_epoch = (iter - (self.ts.epoch - s) as u64 * bpe) as usize;
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            for idxs in &batches[done_in_epoch..] {
                if let Some(h) = halt_at_iter {
                    if self.mask.as_ref().unwrap().iter >= h {
                        return Ok(Some(h));
                    }
                }
                let loss = self.search_step(data, idxs)?;
                loss_sum += loss * idxs.len() as f64;
                seen += idxs.len();
            }
            self.ts.epoch += 1;
            let mean = if seen > 0 { loss_sum / seen as f64 } else { f64::NAN };
            self.log_epoch(data, mean)?;
        }
        let k = self.k();
        self.hard_mask = Some(harden(self.mask.as_ref().unwrap(), k)?);
        self.phase = Phase::Finetune;
        Ok(None)
    }

    /// One structural-search step on one minibatch: solve the soft mask,
    /// forward on masked weights, backprop, assemble the split gradients,
    /// update weights (unless frozen) and scores, advance the temperature.
    fn search_step(&mut self, data: &DataBundle, idxs: &[usize]) -> Result<f64> {
        let k = self.k();
        let st = self.mask.as_mut().unwrap();
        let sol = dtopk::topk_forward(&st.m, k, st.tau)?;
        st.t = sol.t;
        let (m_snapshot, tau_used, t_used, iter_before) = (st.m.clone(), st.tau, st.t, st.iter);

        let mult = self.partition.expand_mask(&sol.f)?;
        let weights = self.ts.model.prunable_weights();
        let masked: Result<Vec<Tensor>> =
            weights.iter().zip(&mult).map(|(w, m)| w.hadamard(m)).collect();
        let masked = masked?;

        let input_shape = self.ts.model.spec.input_shape.clone();
        let (x, y) = data.train.batch(idxs, &input_shape)?;
        let mut g = Graph::new();
        let out = self.ts.model.forward(&mut g, &x, Some(&y), Some(&masked))?;
        let loss_node = out.loss.expect("labels were supplied");
        let loss = g.value(loss_node).item()?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} during structural search (iter {iter_before}, tau {tau_used}, t {t_used})"
            )));
        }
        g.backward(loss_node)?;

        let prunable = self.ts.model.prunable_indices().to_vec();
        let upstream_masked: Vec<Vec<f64>> = prunable
            .iter()
            .map(|&pi| g.grad_or_zeros(out.param_nodes[pi]))
            .collect();
        let eq6 = eq6_gradients(
            &self.partition,
            &m_snapshot,
            k,
            tau_used,
            &sol.f,
            &weights,
            &upstream_masked,
        )?;

        if !self.cfg.weights_frozen {
            let names: Vec<String> =
                self.ts.model.params().iter().map(|p| p.name.clone()).collect();
            for (pi, node) in out.param_nodes.iter().enumerate() {
                let grad = match prunable.iter().position(|&q| q == pi) {
                    Some(pos) => eq6.weight_grads[pos].clone(),
                    None => g.grad_or_zeros(*node),
                };
                self.ts.opt_w.step_param(
                    pi,
                    &names[pi],
                    self.ts.model.param_data_mut(pi),
                    &grad,
                    None,
                )?;
            }
        }

        let st = self.mask.as_mut().unwrap();
        self.opt_m.as_mut().unwrap().step_param(0, "mask", &mut st.m, &eq6.mask_grad, None)?;

        let drift: f64 = st.m.iter().zip(&m_snapshot).map(|(a, b)| (a - b).abs()).sum();
        let s_index = iter_before + 1;
        let satisfied_frac = monitor_satisfied_frac(&m_snapshot, tau_used, t_used, s_index);
        self.records.push(MonitorRecord {
            iter: s_index,
            tau: tau_used,
            t: t_used,
            loss,
            drift,
            satisfied_frac,
        });
        st.iter += 1;
        st.tau = self.cfg.schedule.value(st.iter);
        Ok(loss)
    }

    /// Phase 3: fine-tune with the frozen binary mask, then materialize the
    /// pruned weights (`w <- w .* mask`).
    pub fn finetune(&mut self, data: &DataBundle) -> Result<()> {
        if self.phase != Phase::Finetune {
            return Ok(());
        }
        let hard = self.hard_mask.clone().unwrap();
        let mult = self.partition.expand_mask(&hard)?;
        let end = self.cfg.search_end_epoch + self.cfg.finetune_epochs;
        while self.ts.epoch < end {
            let loss = self.ts.train_epoch(&data.train, Some(&mult))?;
            self.log_epoch(data, loss)?;
        }
        crate::trainer::materialize_mask(&mut self.ts.model, &self.partition, &hard)?;
        self.phase = Phase::Done;
        Ok(())
    }

    pub fn final_report(&self, data: &DataBundle) -> Result<SmartReport> {
        let hard = self.hard_mask.clone().ok_or_else(|| {
            Error::State("final report requested before the mask was hardened".into())
        })?;
        let eval = evaluate(&self.ts.model, &data.test, Some((&self.partition, &hard)))?;
        Ok(SmartReport {
            eval,
            hard_mask: hard,
            records: self.records.clone(),
            epoch_log: self.epoch_log.clone(),
        })
    }

    /// Run all remaining phases. With `halt_at_iter` the driver stops at
    /// that search iteration and reports `Halted`.
    pub fn run(&mut self, data: &DataBundle, halt_at_iter: Option<u64>) -> Result<RunStatus> {
        self.pretrain(data)?;
        if let Some(h) = self.search(data, halt_at_iter)? {
            return Ok(RunStatus::Halted(h));
        }
        self.finetune(data)?;
        Ok(RunStatus::Completed(Box::new(self.final_report(data)?)))
    }

    /// Snapshot everything needed to resume bit-exactly: parameters,
    /// optimizer velocities, mask state, partition geometry.
    pub fn to_checkpoint(&self, config_hash: u64) -> Checkpoint {
        let mut tensors = Vec::new();
        for p in self.ts.model.params() {
            tensors.push(TensorEntry {
                name: format!("param.{}", p.name),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            });
        }
        for (p, v) in self.ts.model.params().iter().zip(self.ts.opt_w.velocities()) {
            tensors.push(TensorEntry {
                name: format!("vel.{}", p.name),
                shape: p.value.shape().to_vec(),
                data: v.clone(),
            });
        }
        if let Some(opt_m) = &self.opt_m {
            tensors.push(TensorEntry {
                name: "vel.mask".into(),
                shape: vec![self.n_blocks()],
                data: opt_m.velocities()[0].clone(),
            });
        }
        let mask = self.mask.clone().unwrap_or(MaskState {
            m: vec![],
            tau: 0.0,
            t: 0.0,
            iter: 0,
        });
        Checkpoint {
            config_hash,
            tensors,
            pruner: Some(PrunerState {
                m: mask.m,
                tau: mask.tau,
                t: mask.t,
                iter: mask.iter,
                phase: self.phase.as_u8(),
                epoch: self.ts.epoch,
                hard_mask: self.hard_mask.clone(),
            }),
            partition: Some(PartitionDesc::from_partition(&self.partition)),
        }
    }

    /// Rebuild a run mid-flight from a checkpoint. The fresh `TrainState`
    /// supplies the model architecture and optimizer settings; parameters,
    /// velocities and pruner state are restored from the snapshot.
    pub fn from_checkpoint(
        mut ts: TrainState,
        cfg: SmartConfig,
        ckpt: &Checkpoint,
    ) -> Result<SmartRun> {
        cfg.validate()?;
        let pd = ckpt
            .partition
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no partition descriptor in checkpoint".into()))?;
        let partition = pd.to_partition()?;
        let ps = ckpt
            .pruner
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("no pruner state in checkpoint".into()))?;

        restore_params(&mut ts, ckpt)?;
        ts.epoch = ps.epoch;

        let phase = Phase::from_u8(ps.phase)?;
        let n_blocks = partition.n_blocks();
        let (mask, opt_m) = if phase == Phase::Pretrain {
            (None, None)
        } else {
            if ps.m.len() != n_blocks {
                return Err(Error::Checkpoint(format!(
                    "mask has {} entries, partition has {n_blocks} blocks",
                    ps.m.len()
                )));
            }
            let mut opt_m = Sgd::new(
                cfg.mask_opt.lr,
                cfg.mask_opt.momentum,
                cfg.mask_opt.weight_decay,
                &[n_blocks],
            )?;
            if let Some(v) = ckpt.tensor("vel.mask") {
                opt_m.set_velocity(0, v.data.clone())?;
            }
            (
                Some(MaskState { m: ps.m.clone(), tau: ps.tau, t: ps.t, iter: ps.iter }),
                Some(opt_m),
            )
        };
        Ok(SmartRun {
            ts,
            partition: Rc::new(partition),
            cfg,
            mask,
            opt_m,
            hard_mask: ps.hard_mask.clone(),
            phase,
            records: Vec::new(),
            epoch_log: Vec::new(),
        })
    }
}

/// Restore model parameters and weight-optimizer velocities from a
/// checkpoint's tensor table.
pub fn restore_params(ts: &mut TrainState, ckpt: &Checkpoint) -> Result<()> {
    let names: Vec<String> = ts.model.params().iter().map(|p| p.name.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let entry = ckpt.tensor(&format!("param.{name}")).ok_or_else(|| {
            Error::Checkpoint(format!("checkpoint is missing tensor param.{name}"))
        })?;
        ts.model.set_param(pi, entry.data.clone())?;
        if let Some(v) = ckpt.tensor(&format!("vel.{name}")) {
            ts.opt_w.set_velocity(pi, v.data.clone())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{BlockSpec, LayerDesc};
    use crate::workbench::{gen_blobs, ArchKind, Model, ModelSpec};

    #[test]
    fn compute_k_examples() {
        assert_eq!(compute_k(0.5, 10), 5);
        assert_eq!(compute_k(0.93, 100), 7);
        assert_eq!(compute_k(0.97, 33), 1);
        assert_eq!(compute_k(0.0, 7), 7);
        assert_eq!(compute_k(1.0, 7), 0);
        assert_eq!(compute_k(0.3, 234), 164);
    }

    fn toy_partition() -> (BlockPartition, Vec<Tensor>) {
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", 2, 2, 1, 1, 1.0)],
            BlockSpec::new(1, 2).unwrap(),
        )
        .unwrap();
        let w = Tensor::new(vec![2, 2, 1, 1], vec![3.0, -4.0, 1.0, 2.0]).unwrap();
        (p, vec![w])
    }

    #[test]
    fn init_masks_variants() {
        let (p, w) = toy_partition();
        let ma = init_masks(&p, &w, MaskInit::MeanAbs, 0.5).unwrap();
        assert_eq!(ma.m, vec![3.5, 1.5]);
        assert_eq!(ma.tau, 0.5);
        assert_eq!(ma.iter, 0);
        let l1 = init_masks(&p, &w, MaskInit::L1, 0.5).unwrap();
        assert_eq!(l1.m, vec![7.0, 3.0]);
        let ones = init_masks(&p, &w, MaskInit::Ones, 0.5).unwrap();
        assert_eq!(ones.m, vec![1.0, 1.0]);
    }

    #[test]
    fn l1_init_is_mean_abs_scaled_by_block_size() {
        let mut rng = crate::rng::Rng::new(3);
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", 5, 7, 1, 1, 1.0)],
            BlockSpec::new(2, 3).unwrap(),
        )
        .unwrap();
        let data: Vec<f64> = (0..35).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let w = vec![Tensor::new(vec![5, 7, 1, 1], data).unwrap()];
        let l1 = init_masks(&p, &w, MaskInit::L1, 1.0).unwrap();
        let ma = init_masks(&p, &w, MaskInit::MeanAbs, 1.0).unwrap();
        for b in 0..p.n_blocks() {
            let scaled = ma.m[b] * p.block_size(b) as f64;
            assert!((l1.m[b] - scaled).abs() <= 1e-12, "block {b}");
        }
    }

    #[test]
    fn harden_basics_and_cross_check() {
        let st = MaskState { m: vec![0.2, 0.9, 0.95], tau: 1.0, t: 0.0, iter: 0 };
        assert_eq!(harden(&st, 2).unwrap(), vec![0.0, 1.0, 1.0]);
        assert_eq!(harden(&st, 3).unwrap(), vec![1.0, 1.0, 1.0]);

        let mut rng = crate::rng::Rng::new(8);
        for _ in 0..100 {
            let n = 2 + rng.next_below(20) as usize;
            let k = rng.next_below(n as u64 + 1) as usize;
            let m: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let st = MaskState { m: m.clone(), tau: 0.1, t: 0.0, iter: 0 };
            assert_eq!(harden(&st, k).unwrap(), dtopk::hard_topk(&m, k).unwrap());
        }
    }

    #[test]
    fn fluctuation_examples() {
        // f = 1 kills the fluctuation; f = 0.5 with ||w_hat|| = 2 gives 2;
        // f = 0.8 with ||w_hat|| = 4 gives 1.
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", 3, 1, 1, 1, 1.0)],
            BlockSpec::new(1, 1).unwrap(),
        )
        .unwrap();
        let w = vec![Tensor::new(vec![3, 1, 1, 1], vec![9.0, 4.0, 5.0]).unwrap()];
        let f = [1.0, 0.5, 0.8];
        let d = fluctuation_diag(&p, &w, &f).unwrap();
        assert!((d[0] - 0.0).abs() < 1e-12);
        assert!((d[1] - 2.0).abs() < 1e-12);
        assert!((d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fluctuation_zero_mask_value() {
        let p = BlockPartition::new(
            vec![LayerDesc::conv("c", 1, 1, 1, 1, 1.0)],
            BlockSpec::new(1, 1).unwrap(),
        )
        .unwrap();
        let w = vec![Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap()];
        let d = fluctuation_diag(&p, &w, &[0.0]).unwrap();
        // ||w_hat|| is itself zero at f = 0.
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn monitor_bound_examples() {
        assert_eq!(monitor_satisfied_frac(&[0.2], 0.01, 0.0, 10), 1.0);
        assert_eq!(monitor_satisfied_frac(&[0.2], 0.05, 0.0, 10), 0.0);
    }

    #[test]
    fn eq6_zero_upstream_gives_exact_zeros() {
        let (p, w) = toy_partition();
        let m = vec![0.7, 0.2];
        let f = dtopk::topk_forward(&m, 1, 0.5).unwrap().f;
        let upstream = vec![vec![0.0; 4]];
        let g = eq6_gradients(&p, &m, 1, 0.5, &f, &w, &upstream).unwrap();
        assert!(g.weight_grads[0].iter().all(|&v| v == 0.0));
        assert!(g.block_inner.iter().all(|&v| v == 0.0));
        assert!(g.mask_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eq6_matches_hand_expansion_on_two_blocks() {
        // Single layer, two 1x2 blocks, hand-computed chain rule.
        let (p, w) = toy_partition();
        let m = vec![0.7, 0.2];
        let (k, tau) = (1usize, 0.5f64);
        let sol = dtopk::topk_forward(&m, k, tau).unwrap();
        let upstream = vec![vec![0.1, -0.2, 0.3, 0.05]];
        let g = eq6_gradients(&p, &m, k, tau, &sol.f, &w, &upstream).unwrap();

        // dL/dw = upstream * f broadcast per block.
        let want_wg = [
            0.1 * sol.f[0],
            -0.2 * sol.f[0],
            0.3 * sol.f[1],
            0.05 * sol.f[1],
        ];
        for (a, b) in g.weight_grads[0].iter().zip(&want_wg) {
            assert!((a - b).abs() <= 1e-10);
        }
        // g_b = <upstream, w> per block.
        let want_inner = [0.1 * 3.0 + (-0.2) * (-4.0), 0.3 * 1.0 + 0.05 * 2.0];
        for (a, b) in g.block_inner.iter().zip(&want_inner) {
            assert!((a - b).abs() <= 1e-10);
        }
        // dL/dm = J g with the dense closed-form Jacobian.
        let jac = dtopk::topk_jacobian(&m, k, tau).unwrap();
        for i in 0..2 {
            let want: f64 = (0..2).map(|j| jac[i][j] * want_inner[j]).sum();
            assert!((g.mask_grad[i] - want).abs() <= 1e-10);
        }
    }

    fn desk_setup(seed: u64) -> (TrainState, BlockPartition, DataBundle) {
        let data = gen_blobs(3, 8, 40, seed).unwrap();
        let model = Model::init(
            ModelSpec {
                arch: ArchKind::Mlp,
                input_shape: vec![8],
                channels: vec![],
                conv_kernel: 1,
                hidden: vec![8, 8],
                classes: 3,
                prune_classifier: false,
            },
            seed,
        )
        .unwrap();
        let partition =
            BlockPartition::new(model.prunable_layer_descs(), BlockSpec::new(2, 2).unwrap())
                .unwrap();
        let ts = TrainState::new(
            model,
            &OptSettings { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 },
            seed,
            16,
        )
        .unwrap();
        (ts, partition, data)
    }

    fn desk_cfg(r: f64, bpe: u64) -> SmartConfig {
        SmartConfig {
            target_sparsity: r,
            pretrain_epochs: 2,
            search_end_epoch: 5,
            finetune_epochs: 2,
            schedule: TempSchedule::new(ScheduleFamily::Exponential, 0.5, 1e-5, 3 * bpe).unwrap(),
            mask_init: MaskInit::MeanAbs,
            weights_frozen: false,
            mask_opt: OptSettings { lr: 0.05, momentum: 0.9, weight_decay: 0.0 },
        }
    }

    #[test]
    fn exact_sparsity_after_full_run() {
        let (ts, partition, data) = desk_setup(5);
        let n_w = partition.n_blocks();
        let bpe = batches_per_epoch(data.train.len(), 16);
        let mut run = SmartRun::new(ts, partition, desk_cfg(0.5, bpe)).unwrap();
        let status = run.run(&data, None).unwrap();
        let report = match status {
            RunStatus::Completed(r) => r,
            _ => panic!("expected completion"),
        };
        let k = compute_k(0.5, n_w);
        let zeros = report.hard_mask.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeros, n_w - k);
        let sp = report.eval.sparsity.as_ref().unwrap();
        assert_eq!(sp.zero_blocks, n_w - k);
        // Pruned blocks are materialized to zero in the weights.
        let weights = run.ts.model.prunable_weights();
        let mult = run.partition.expand_mask(&report.hard_mask).unwrap();
        for (w, m) in weights.iter().zip(&mult) {
            for (wv, mv) in w.data().iter().zip(m.data()) {
                if *mv == 0.0 {
                    assert_eq!(*wv, 0.0);
                }
            }
        }
    }

    #[test]
    fn r_zero_equals_plain_training() {
        let (ts, partition, data) = desk_setup(6);
        let bpe = batches_per_epoch(data.train.len(), 16);
        let mut run = SmartRun::new(ts, partition, desk_cfg(0.0, bpe)).unwrap();
        run.run(&data, None).unwrap();

        // Plain training for the same 7 global epochs with the same seed.
        let (mut ts2, _, _) = desk_setup(6);
        ts2.train_epochs(&data.train, 7).unwrap();

        for (a, b) in run.ts.model.params().iter().zip(ts2.model.params()) {
            assert_eq!(a.value.data(), b.value.data(), "param {} differs", a.name);
        }
    }

    #[test]
    fn frozen_weights_stay_bit_identical_during_search() {
        let (ts, partition, data) = desk_setup(7);
        let bpe = batches_per_epoch(data.train.len(), 16);
        let mut cfg = desk_cfg(0.5, bpe);
        cfg.weights_frozen = true;
        let mut run = SmartRun::new(ts, partition, cfg).unwrap();
        run.pretrain(&data).unwrap();
        let before: Vec<Vec<f64>> =
            run.ts.model.params().iter().map(|p| p.value.data().to_vec()).collect();
        let m_before = run.mask.as_ref().unwrap().m.clone();
        run.search(&data, None).unwrap();
        for (p, b) in run.ts.model.params().iter().zip(&before) {
            assert_eq!(p.value.data(), b.as_slice(), "param {} moved", p.name);
        }
        assert_ne!(run.mask.as_ref().unwrap().m, m_before, "mask never moved");
    }

    #[test]
    fn fixed_seed_gives_bit_identical_mask_trajectory() {
        let run_once = || {
            let (ts, partition, data) = desk_setup(9);
            let bpe = batches_per_epoch(data.train.len(), 16);
            let mut run = SmartRun::new(ts, partition, desk_cfg(0.5, bpe)).unwrap();
            run.run(&data, None).unwrap();
            (run.mask.unwrap().m, run.records)
        };
        let (m1, rec1) = run_once();
        let (m2, rec2) = run_once();
        assert_eq!(m1, m2);
        assert_eq!(rec1, rec2);
    }

    #[test]
    fn resume_mid_search_reproduces_uninterrupted_run() {
        let (ts, partition, data) = desk_setup(10);
        let bpe = batches_per_epoch(data.train.len(), 16);
        let cfg = desk_cfg(0.5, bpe);

        // Uninterrupted.
        let mut full = SmartRun::new(ts, partition, cfg.clone()).unwrap();
        let full_report = match full.run(&data, None).unwrap() {
            RunStatus::Completed(r) => r,
            _ => panic!(),
        };

        // Halt at iteration 4 (mid-epoch for bpe = 2? guard below), resume.
        let halt_iter = bpe + 1; // strictly inside the second search epoch
        let (ts2, partition2, _) = desk_setup(10);
        let mut first = SmartRun::new(ts2, partition2, cfg.clone()).unwrap();
        match first.run(&data, Some(halt_iter)).unwrap() {
            RunStatus::Halted(h) => assert_eq!(h, halt_iter),
            _ => panic!("expected halt"),
        }
        let ckpt = first.to_checkpoint(42);
        let bytes = ckpt.to_bytes();
        let restored = Checkpoint::from_bytes(&bytes).unwrap();

        let (ts3, _, _) = desk_setup(10);
        let mut resumed = SmartRun::from_checkpoint(ts3, cfg, &restored).unwrap();
        let resumed_report = match resumed.run(&data, None).unwrap() {
            RunStatus::Completed(r) => r,
            _ => panic!(),
        };

        assert_eq!(full_report.eval.metrics.loss, resumed_report.eval.metrics.loss);
        assert_eq!(full_report.eval.metrics.accuracy, resumed_report.eval.metrics.accuracy);
        assert_eq!(full_report.hard_mask, resumed_report.hard_mask);
        for (a, b) in full.ts.model.params().iter().zip(resumed.ts.model.params()) {
            assert_eq!(a.value.data(), b.value.data(), "param {} differs", a.name);
        }
    }

    #[test]
    fn soft_and_hard_objectives_agree_at_search_end() {
        // With tau_e = 1e-5 the relaxation has effectively hardened by the
        // end of search: every f is within 1e-3 of binary and the soft and
        // hard losses agree to 1% of their magnitude.
        let (ts, partition, data) = desk_setup(12);
        let bpe = batches_per_epoch(data.train.len(), 16);
        let cfg = desk_cfg(0.5, bpe);
        let mut run = SmartRun::new(ts, partition, cfg).unwrap();
        run.pretrain(&data).unwrap();
        run.search(&data, None).unwrap();

        let st = run.mask.as_ref().unwrap();
        let k = run.k();
        let sol = dtopk::topk_forward(&st.m, k, st.tau).unwrap();
        let max_soft = sol
            .f
            .iter()
            .map(|&f| f.min(1.0 - f))
            .fold(0.0f64, f64::max);
        assert!(max_soft <= 1e-3, "mask not hardened: {max_soft}");

        let hard = run.hard_mask.as_ref().unwrap().clone();
        let soft_eval =
            evaluate(&run.ts.model, &data.test, Some((&run.partition, &sol.f))).unwrap();
        let hard_eval =
            evaluate(&run.ts.model, &data.test, Some((&run.partition, &hard))).unwrap();
        let (ls, lh) = (soft_eval.metrics.loss, hard_eval.metrics.loss);
        assert!(
            (ls - lh).abs() <= 1e-2 * lh.abs().max(1e-12),
            "soft {ls} vs hard {lh}"
        );
    }
}
