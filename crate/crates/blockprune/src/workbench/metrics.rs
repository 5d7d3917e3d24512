//! Model evaluation: top-1 accuracy and mean loss, optionally under a mask.

use crate::blocks::{BlockPartition, SparsityReport};
use crate::error::Result;
use crate::tensor::{Graph, Tensor};
use crate::workbench::{Dataset, Model};

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: Metrics,
    /// Present when a binary mask was supplied.
    pub sparsity: Option<SparsityReport>,
}

/// Evaluate in fixed order. `mask` supplies per-block multipliers applied to
/// the prunable weights; when the mask is binary the sparsity accounting is
/// attached to the report.
pub fn evaluate(
    model: &Model,
    data: &Dataset,
    mask: Option<(&BlockPartition, &[f64])>,
) -> Result<EvalReport> {
    let overrides = match mask {
        Some((partition, values)) => {
            let mult = partition.expand_mask(values)?;
            let masked: Result<Vec<Tensor>> = model
                .prunable_weights()
                .iter()
                .zip(&mult)
                .map(|(w, m)| w.hadamard(m))
                .collect();
            Some(masked?)
        }
        None => None,
    };

    let n = data.len();
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut at = 0usize;
    while at < n {
        let idxs: Vec<usize> = (at..(at + EVAL_BATCH).min(n)).collect();
        let (x, y) = data.batch(&idxs, &model.spec.input_shape)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, &x, Some(&y), overrides.as_deref())?;
        loss_sum += g.value(out.loss.unwrap()).item()? * idxs.len() as f64;
        let logits = g.value(out.logits);
        let c = model.spec.classes;
        for (row, &label) in y.iter().enumerate() {
            let z = &logits.data()[row * c..(row + 1) * c];
            let mut best = 0usize;
            for (j, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = j;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        at += idxs.len();
    }

    let sparsity = match mask {
        Some((partition, values)) if values.iter().all(|&v| v == 0.0 || v == 1.0) => {
            Some(partition.sparsity_report(values)?)
        }
        _ => None,
    };
    Ok(EvalReport {
        metrics: Metrics { accuracy: correct as f64 / n as f64, loss: loss_sum / n as f64 },
        sparsity,
    })
}
