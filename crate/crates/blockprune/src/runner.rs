//! Run orchestration behind the command-line front end.
//!
//! Each command produces exactly one JSON document (returned to the caller
//! for stdout); progress lines go to stderr. Prune runs also write their
//! final checkpoint, a per-iteration diagnostic CSV, and a copy of the
//! metrics JSON next to the checkpoint so report aggregation can sweep a
//! directory.

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::baselines::{run_awg, run_magnitude, AwgConfig, PruneReport};
use crate::blocks::{BlockPartition, BlockSpec};
use crate::config::{DataConfig, PruneMethod, RunConfig};
use crate::error::{Error, Result};
use crate::smart::{
    restore_params, EpochMetric, MonitorRecord, Phase, RunStatus, SmartConfig, SmartRun,
    TempSchedule,
};
use crate::trainer::{batches_per_epoch, TrainState};
use crate::verify::{run_all_suites, FaultInjection};
use crate::workbench::{
    evaluate, gen_blobs, load_idx, Checkpoint, DataBundle, Model, PrunerState, TensorEntry,
};

pub fn build_data(cfg: &RunConfig) -> Result<DataBundle> {
    match &cfg.data {
        DataConfig::Blobs { dims, per_class } => {
            gen_blobs(cfg.model.classes, *dims, *per_class, cfg.train.seed)
        }
        DataConfig::Idx { train_images, train_labels, test_images, test_labels } => {
            let train = load_idx(Path::new(train_images), Path::new(train_labels))?;
            let test = load_idx(Path::new(test_images), Path::new(test_labels))?;
            for d in [&train, &test] {
                if let Some(&bad) = d.labels.iter().find(|&&l| l >= cfg.model.classes) {
                    return Err(Error::Config(format!(
                        "idx label {bad} out of range for {} classes",
                        cfg.model.classes
                    )));
                }
            }
            Ok(DataBundle { train, test })
        }
    }
}

fn fresh_state(cfg: &RunConfig) -> Result<TrainState> {
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    TrainState::new(model, &cfg.train.opt, cfg.train.seed, cfg.train.batch_size)
}

fn log_config(cfg: &RunConfig) {
    eprintln!("resolved config (hash {:016x}):", cfg.hash());
    for line in cfg.canonical().lines() {
        eprintln!("  {line}");
    }
}

fn epoch_log_json(log: &[EpochMetric]) -> Value {
    Value::Array(
        log.iter()
            .map(|e| {
                json!({
                    "epoch": e.epoch,
                    "phase": e.phase,
                    "train_loss": e.train_loss,
                    "test_accuracy": e.test_accuracy,
                    "test_loss": e.test_loss,
                })
            })
            .collect(),
    )
}

fn write_diag_csv(path: &Path, records: &[MonitorRecord]) -> Result<()> {
    let mut text = String::from(MonitorRecord::csv_header());
    text.push('\n');
    for r in records {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn plain_checkpoint(ts: &TrainState, config_hash: u64, phase: Phase, hard_mask: Option<Vec<f64>>) -> Checkpoint {
    let mut tensors = Vec::new();
    for p in ts.model.params() {
        tensors.push(TensorEntry {
            name: format!("param.{}", p.name),
            shape: p.value.shape().to_vec(),
            data: p.value.data().to_vec(),
        });
    }
    for (p, v) in ts.model.params().iter().zip(ts.opt_w.velocities()) {
        tensors.push(TensorEntry {
            name: format!("vel.{}", p.name),
            shape: p.value.shape().to_vec(),
            data: v.clone(),
        });
    }
    Checkpoint {
        config_hash,
        tensors,
        pruner: Some(PrunerState {
            m: vec![],
            tau: 0.0,
            t: 0.0,
            iter: 0,
            phase: phase.as_u8(),
            epoch: ts.epoch,
            hard_mask,
        }),
        partition: None,
    }
}

/// Train the dense model for `[train] epochs` and write a checkpoint.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<Value> {
    log_config(cfg);
    let data = build_data(cfg)?;
    let mut ts = fresh_state(cfg)?;
    let mut epoch_log = Vec::new();
    for _ in 0..cfg.train.epochs {
        let train_loss = ts.train_epoch(&data.train, None)?;
        let rep = evaluate(&ts.model, &data.test, None)?;
        eprintln!(
            "epoch {} train_loss {} test_acc {} test_loss {}",
            ts.epoch, train_loss, rep.metrics.accuracy, rep.metrics.loss
        );
        epoch_log.push(EpochMetric {
            epoch: ts.epoch,
            phase: "pretrain",
            train_loss,
            test_accuracy: rep.metrics.accuracy,
            test_loss: rep.metrics.loss,
        });
    }
    let rep = evaluate(&ts.model, &data.test, None)?;
    plain_checkpoint(&ts, cfg.hash(), Phase::Pretrain, None).save(out)?;
    let doc = json!({
        "method": "dense",
        "sparsity": 0.0,
        "seed": cfg.train.seed,
        "accuracy": rep.metrics.accuracy,
        "loss": rep.metrics.loss,
        "block_sparsity": 0.0,
        "element_sparsity": 0.0,
        "mac_reduction": 0.0,
        "config_hash": format!("{:016x}", cfg.hash()),
        "checkpoint": out.display().to_string(),
        "epoch_log": epoch_log_json(&epoch_log),
    });
    std::fs::write(out.with_extension("metrics.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(doc)
}

/// Derive the SMART driver config from the parsed file config.
fn smart_config(cfg: &RunConfig, bpe: u64) -> Result<SmartConfig> {
    let p = cfg.prune.as_ref().expect("prune section present");
    let si = if p.si > 0 { p.si } else { (p.l - p.s) as u64 * bpe };
    if si == 0 {
        return Err(Error::Config(
            "no search iterations: set si or make l > s".into(),
        ));
    }
    let schedule = TempSchedule::new(p.schedule, p.tau_start, p.tau_end, si)?;
    Ok(SmartConfig {
        target_sparsity: p.r,
        pretrain_epochs: p.s,
        search_end_epoch: p.l,
        finetune_epochs: p.finetune_epochs,
        schedule,
        mask_init: p.mask_init,
        weights_frozen: p.weights_frozen,
        mask_opt: p.mask_opt,
    })
}

fn report_json(cfg: &RunConfig, method: &str, rep_eval: &crate::workbench::EvalReport, epoch_log: &[EpochMetric]) -> Value {
    let p = cfg.prune.as_ref().unwrap();
    let sp = rep_eval.sparsity.as_ref();
    json!({
        "method": method,
        "sparsity": p.r,
        "seed": cfg.train.seed,
        "accuracy": rep_eval.metrics.accuracy,
        "loss": rep_eval.metrics.loss,
        "block_sparsity": sp.map_or(0.0, |s| s.block_sparsity),
        "element_sparsity": sp.map_or(0.0, |s| s.element_sparsity),
        "mac_reduction": sp.map_or(0.0, |s| s.mac_reduction),
        "zero_blocks": sp.map_or(0, |s| s.zero_blocks),
        "total_blocks": sp.map_or(0, |s| s.total_blocks),
        "config_hash": format!("{:016x}", cfg.hash()),
        "epoch_log": epoch_log_json(epoch_log),
    })
}

/// Run the configured pruner from a pretrained (or mid-run) checkpoint.
pub fn cmd_prune(cfg: &RunConfig, init: &Path, out: &Path) -> Result<Value> {
    let p = cfg
        .prune
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [prune] section".into()))?
        .clone();
    log_config(cfg);
    let data = build_data(cfg)?;
    let ckpt = Checkpoint::load(init)?;
    let mut ts = fresh_state(cfg)?;
    restore_params(&mut ts, &ckpt)?;
    if let Some(ps) = &ckpt.pruner {
        ts.epoch = ps.epoch;
    }

    let partition = BlockPartition::new(
        ts.model.prunable_layer_descs(),
        BlockSpec::new(p.bo, p.bi)?,
    )?;
    for w in partition.warnings() {
        eprintln!("warning: {w}");
    }

    let bpe = batches_per_epoch(data.train.len(), cfg.train.batch_size);
    let doc = match p.method {
        PruneMethod::Smart => {
            let scfg = smart_config(cfg, bpe)?;
            let resume_mid_run = ckpt
                .pruner
                .as_ref()
                .map(|ps| ps.phase != Phase::Pretrain.as_u8())
                .unwrap_or(false);
            let mut run = if resume_mid_run {
                SmartRun::from_checkpoint(ts, scfg, &ckpt)?
            } else {
                SmartRun::new(ts, partition, scfg)?
            };
            let report = match run.run(&data, None)? {
                RunStatus::Completed(r) => r,
                RunStatus::Halted(_) => unreachable!("no halt requested"),
            };
            write_diag_csv(&out.with_extension("diag.csv"), &report.records)?;
            run.to_checkpoint(cfg.hash()).save(out)?;
            report_json(cfg, "smart", &report.eval, &report.epoch_log)
        }
        PruneMethod::Awg => {
            let acfg = AwgConfig {
                steps: p.steps,
                ema_decay: p.gamma,
                finetune_per_step: p.p,
                final_finetune: p.q,
                target_sparsity: p.r,
                max_sparsity_per_layer: p.mspl,
            };
            let report = run_awg(&mut ts, &partition, &acfg, &data)?;
            finish_baseline(cfg, &mut ts, &report, out, "awg")?
        }
        PruneMethod::Magnitude => {
            let report = run_magnitude(&mut ts, &partition, p.r, p.finetune_epochs, &data)?;
            finish_baseline(cfg, &mut ts, &report, out, "magnitude")?
        }
    };
    std::fs::write(out.with_extension("metrics.json"), serde_json::to_string_pretty(&doc).unwrap())?;
    Ok(doc)
}

fn finish_baseline(
    cfg: &RunConfig,
    ts: &mut TrainState,
    report: &PruneReport,
    out: &Path,
    method: &str,
) -> Result<Value> {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_diag_csv(&out.with_extension("diag.csv"), &report.records)?;
    plain_checkpoint(ts, cfg.hash(), Phase::Done, Some(report.hard_mask.clone())).save(out)?;
    Ok(report_json(cfg, method, &report.eval, &report.epoch_log))
}

/// Run every oracle suite; returns the JSON verdicts and the overall flag.
pub fn cmd_validate(inject: Option<FaultInjection>) -> (Value, bool) {
    let results = run_all_suites(inject);
    let all_passed = results.iter().all(|s| s.passed);
    let doc = json!({
        "all_passed": all_passed,
        "suites": results
            .iter()
            .map(|s| {
                json!({
                    "name": s.name,
                    "passed": s.passed,
                    "cases": s.cases,
                    "max_err": if s.max_err.is_finite() { Value::from(s.max_err) } else { Value::Null },
                    "detail": s.detail,
                })
            })
            .collect::<Vec<_>>(),
    });
    (doc, all_passed)
}

pub const REPORT_HEADER: &str =
    "method,sparsity,seed,accuracy,loss,block_sparsity,element_sparsity,mac_reduction";

#[derive(Debug, Clone, PartialEq)]
struct ReportRow {
    method: String,
    sparsity: f64,
    seed: u64,
    accuracy: f64,
    loss: f64,
    block_sparsity: f64,
    element_sparsity: f64,
    mac_reduction: f64,
}

fn parse_row(doc: &Value) -> Option<ReportRow> {
    let num = |key: &str| doc.get(key).and_then(Value::as_f64).filter(|v| v.is_finite());
    Some(ReportRow {
        method: doc.get("method")?.as_str()?.to_string(),
        sparsity: num("sparsity")?,
        seed: doc.get("seed").and_then(Value::as_u64)?,
        accuracy: num("accuracy")?,
        loss: num("loss")?,
        block_sparsity: num("block_sparsity")?,
        element_sparsity: num("element_sparsity")?,
        mac_reduction: num("mac_reduction")?,
    })
}

/// Aggregate run metric JSONs from a directory into one deterministic CSV:
/// one row per (method, sparsity, seed). Malformed files are skipped with a
/// warning.
pub fn cmd_report(runs_dir: &Path, out: &Path) -> Result<Value> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(runs_dir)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", runs_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for path in &paths {
        let parsed = std::fs::read_to_string(path)
            .ok()
            .and_then(|text| serde_json::from_str::<Value>(&text).ok())
            .as_ref()
            .and_then(parse_row);
        match parsed {
            Some(row) => rows.push(row),
            None => {
                skipped += 1;
                eprintln!("warning: skipping malformed metrics file {}", path.display());
            }
        }
    }
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.sparsity.partial_cmp(&b.sparsity).unwrap())
            .then(a.seed.cmp(&b.seed))
    });
    let mut csv = String::from(REPORT_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.sparsity,
            r.seed,
            r.accuracy,
            r.loss,
            r.block_sparsity,
            r.element_sparsity,
            r.mac_reduction
        ));
    }
    std::fs::write(out, &csv)?;
    Ok(json!({
        "rows": rows.len(),
        "skipped": skipped,
        "out": out.display().to_string(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = "
[model]
arch = mlp
input = 8
hidden = 8
classes = 3

[data]
kind = blobs
dims = 8
per_class = 50

[train]
lr = 0.05
momentum = 0.9
weight_decay = 5e-4
epochs = 4
batch_size = 16
seed = 11

[prune]
method = magnitude
r = 0.5
bo = 2
bi = 2
s = 4
l = 4
si = 1
finetune_epochs = 2
";

    #[test]
    fn pretrain_then_prune_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::parse(CFG).unwrap();
        let ck = dir.path().join("dense.bpck");
        let doc = cmd_pretrain(&cfg, &ck).unwrap();
        assert!(ck.exists());
        assert!(doc["accuracy"].as_f64().unwrap() > 0.5);

        let out = dir.path().join("pruned.bpck");
        let doc = cmd_prune(&cfg, &ck, &out).unwrap();
        assert_eq!(doc["method"], "magnitude");
        assert!(out.exists());
        assert!(out.with_extension("diag.csv").exists());
        assert!(out.with_extension("metrics.json").exists());
        let bs = doc["block_sparsity"].as_f64().unwrap();
        assert!((bs - 0.5).abs() < 0.05, "block sparsity {bs}");
    }

    #[test]
    fn report_aggregates_and_skips_malformed() {
        let dir = tempfile::tempdir().unwrap();
        for (i, method) in ["smart", "awg", "magnitude"].iter().enumerate() {
            for (j, r) in [0.3, 0.5, 0.7].iter().enumerate() {
                for seed in 0..3u64 {
                    let doc = json!({
                        "method": method,
                        "sparsity": r,
                        "seed": seed,
                        "accuracy": 0.9 - 0.01 * (i + j) as f64,
                        "loss": 0.3,
                        "block_sparsity": r,
                        "element_sparsity": r,
                        "mac_reduction": r,
                    });
                    let path = dir.path().join(format!("{method}_{j}_{seed}.json"));
                    std::fs::write(path, doc.to_string()).unwrap();
                }
            }
        }
        std::fs::write(dir.path().join("broken.json"), "{not json").unwrap();
        let out = dir.path().join("report.csv");
        let doc = cmd_report(dir.path(), &out).unwrap();
        assert_eq!(doc["rows"], 27);
        assert_eq!(doc["skipped"], 1);
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 28);
        assert!(text.starts_with(REPORT_HEADER));
    }

    #[test]
    fn report_on_empty_dir_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("report.csv");
        let doc = cmd_report(dir.path(), &out).unwrap();
        assert_eq!(doc["rows"], 0);
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.trim(), REPORT_HEADER);
    }
}
