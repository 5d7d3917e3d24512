//! Sectioned key=value run configuration.
//!
//! Grammar: `[section]` headers, `key = value` lines, `#` comments, blank
//! lines ignored. Sections: `[model]`, `[data]`, `[train]`, `[prune]`.
//! Unknown sections or keys are rejected outright, and every run logs the
//! fully resolved config along with its 64-bit hash.
//!
//! ```text
//! [model]
//! arch = tiny_cnn            # mlp | tiny_cnn
//! input = 1x8x8              # D for mlp, CxHxW for tiny_cnn
//! channels = 8,16,16         # tiny_cnn conv widths
//! conv_kernel = 1            # conv kernel extent, 1 or 3
//! hidden = 28                # fully-connected hidden widths
//! classes = 4
//! prune_classifier = false
//!
//! [data]
//! kind = blobs               # blobs | idx
//! dims = 64                  # blobs feature dimension
//! per_class = 300
//! # idx alternative: train_images/train_labels/test_images/test_labels paths
//!
//! [train]
//! lr = 0.02
//! momentum = 0.9
//! weight_decay = 5e-4
//! epochs = 20
//! batch_size = 32
//! seed = 42                  # mandatory; there is no wall-clock seeding
//!
//! [prune]
//! method = smart             # smart | awg | magnitude
//! r = 0.5
//! bo = 4
//! bi = 4
//! schedule = exponential     # linear | exponential | inverse_exponential
//! tau_start = 0.5
//! tau_end = 1e-5
//! si = 0                     # 0 = derive from (l - s) * batches per epoch
//! mask_init = mean_abs       # mean_abs | l1 | ones
//! weights_frozen = false
//! s = 20                     # global epoch where search starts
//! l = 26                     # global epoch where search ends
//! finetune_epochs = 6
//! mask_lr = 0.02             # defaults to train lr
//! mask_momentum = 0.9        # defaults to train momentum
//! mask_weight_decay = 0      # defaults to 0
//! # awg knobs:
//! steps = 4
//! gamma = 0.9
//! p = 2
//! q = 4
//! mspl = 0.98
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::smart::{MaskInit, ScheduleFamily};
use crate::trainer::OptSettings;
use crate::workbench::{ArchKind, ModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum DataConfig {
    Blobs { dims: usize, per_class: usize },
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    Smart,
    Awg,
    Magnitude,
}

impl PruneMethod {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "smart" => Ok(PruneMethod::Smart),
            "awg" => Ok(PruneMethod::Awg),
            "magnitude" => Ok(PruneMethod::Magnitude),
            other => Err(Error::Config(format!(
                "unknown prune method '{other}' (want smart | awg | magnitude)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            PruneMethod::Smart => "smart",
            PruneMethod::Awg => "awg",
            PruneMethod::Magnitude => "magnitude",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub opt: OptSettings,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    pub method: PruneMethod,
    pub r: f64,
    pub bo: usize,
    pub bi: usize,
    pub schedule: ScheduleFamily,
    pub tau_start: f64,
    pub tau_end: f64,
    /// 0 means "derive from (l - s) search epochs".
    pub si: u64,
    pub mask_init: MaskInit,
    pub weights_frozen: bool,
    pub s: u32,
    pub l: u32,
    pub finetune_epochs: u32,
    pub mask_opt: OptSettings,
    // AWG
    pub steps: u32,
    pub gamma: f64,
    pub p: u32,
    pub q: u32,
    pub mspl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub prune: Option<PruneConfig>,
}

/// Two-level section/key map with consumption tracking, so anything the
/// schema never asks for is flagged as unknown.
struct Sections {
    map: BTreeMap<String, BTreeMap<String, String>>,
    consumed: std::cell::RefCell<Vec<(String, String)>>,
}

impl Sections {
    fn parse(text: &str) -> Result<Sections> {
        let mut map: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (ln, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let name = name.trim().to_string();
                if !matches!(name.as_str(), "model" | "data" | "train" | "prune") {
                    return Err(Error::Config(format!(
                        "line {}: unknown section [{name}]",
                        ln + 1
                    )));
                }
                map.entry(name.clone()).or_default();
                current = Some(name);
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got '{line}'", ln + 1)));
            };
            let section = current.clone().ok_or_else(|| {
                Error::Config(format!("line {}: key outside any [section]", ln + 1))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if map.get_mut(&section).unwrap().insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}' in [{section}]",
                    ln + 1
                )));
            }
        }
        Ok(Sections { map, consumed: std::cell::RefCell::new(Vec::new()) })
    }

    fn get(&self, section: &str, key: &str) -> Option<String> {
        let v = self.map.get(section).and_then(|s| s.get(key)).cloned();
        if v.is_some() {
            self.consumed.borrow_mut().push((section.to_string(), key.to_string()));
        }
        v
    }

    fn require(&self, section: &str, key: &str) -> Result<String> {
        self.get(section, key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}' in [{section}]")))
    }

    fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (section, keys) in &self.map {
            for key in keys.keys() {
                if !consumed.iter().any(|(s, k)| s == section && k == key) {
                    return Err(Error::Config(format!("unknown key '{key}' in [{section}]")));
                }
            }
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        Error::Config(format!("[{section}] {key}: cannot parse '{v}'"))
    })
}

fn parse_bool(section: &str, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: want true/false, got '{v}'"))),
    }
}

fn parse_usize_list(section: &str, key: &str, v: &str, sep: char) -> Result<Vec<usize>> {
    if v.is_empty() {
        return Ok(vec![]);
    }
    v.split(sep).map(|piece| parse_num(section, key, piece.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let s = Sections::parse(text)?;

        // [model]
        let arch = ArchKind::parse(&s.require("model", "arch")?)?;
        let input = s.require("model", "input")?;
        let input_shape = parse_usize_list("model", "input", &input, 'x')?;
        let channels = match s.get("model", "channels") {
            Some(v) => parse_usize_list("model", "channels", &v, ',')?,
            None => vec![],
        };
        let conv_kernel = match s.get("model", "conv_kernel") {
            Some(v) => parse_num("model", "conv_kernel", &v)?,
            None => 1,
        };
        let hidden = match s.get("model", "hidden") {
            Some(v) => parse_usize_list("model", "hidden", &v, ',')?,
            None => vec![],
        };
        let classes = parse_num("model", "classes", &s.require("model", "classes")?)?;
        let prune_classifier = match s.get("model", "prune_classifier") {
            Some(v) => parse_bool("model", "prune_classifier", &v)?,
            None => false,
        };
        let model = ModelSpec {
            arch,
            input_shape,
            channels,
            conv_kernel,
            hidden,
            classes,
            prune_classifier,
        };
        model.validate()?;

        // [data]
        let data = match s.require("data", "kind")?.as_str() {
            "blobs" => DataConfig::Blobs {
                dims: parse_num("data", "dims", &s.require("data", "dims")?)?,
                per_class: parse_num("data", "per_class", &s.require("data", "per_class")?)?,
            },
            "idx" => DataConfig::Idx {
                train_images: s.require("data", "train_images")?,
                train_labels: s.require("data", "train_labels")?,
                test_images: s.require("data", "test_images")?,
                test_labels: s.require("data", "test_labels")?,
            },
            other => {
                return Err(Error::Config(format!(
                    "[data] kind: unknown '{other}' (want blobs | idx)"
                )))
            }
        };

        // [train]
        let train = TrainConfig {
            opt: OptSettings {
                lr: parse_num("train", "lr", &s.require("train", "lr")?)?,
                momentum: parse_num("train", "momentum", &s.require("train", "momentum")?)?,
                weight_decay: parse_num(
                    "train",
                    "weight_decay",
                    &s.require("train", "weight_decay")?,
                )?,
            },
            epochs: parse_num("train", "epochs", &s.require("train", "epochs")?)?,
            batch_size: parse_num("train", "batch_size", &s.require("train", "batch_size")?)?,
            seed: parse_num("train", "seed", &s.require("train", "seed")?)?,
        };
        if train.batch_size == 0 {
            return Err(Error::Config("[train] batch_size must be positive".into()));
        }

        // [prune] (optional; required only by the prune command)
        let prune = if s.map.contains_key("prune") {
            let method = PruneMethod::parse(&s.require("prune", "method")?)?;
            let mask_opt = OptSettings {
                lr: match s.get("prune", "mask_lr") {
                    Some(v) => parse_num("prune", "mask_lr", &v)?,
                    None => train.opt.lr,
                },
                momentum: match s.get("prune", "mask_momentum") {
                    Some(v) => parse_num("prune", "mask_momentum", &v)?,
                    None => train.opt.momentum,
                },
                weight_decay: match s.get("prune", "mask_weight_decay") {
                    Some(v) => parse_num("prune", "mask_weight_decay", &v)?,
                    None => 0.0,
                },
            };
            let cfg = PruneConfig {
                method,
                r: parse_num("prune", "r", &s.require("prune", "r")?)?,
                bo: parse_num("prune", "bo", &s.require("prune", "bo")?)?,
                bi: parse_num("prune", "bi", &s.require("prune", "bi")?)?,
                schedule: match s.get("prune", "schedule") {
                    Some(v) => ScheduleFamily::parse(&v)?,
                    None => ScheduleFamily::Exponential,
                },
                tau_start: match s.get("prune", "tau_start") {
                    Some(v) => parse_num("prune", "tau_start", &v)?,
                    None => 0.5,
                },
                tau_end: match s.get("prune", "tau_end") {
                    Some(v) => parse_num("prune", "tau_end", &v)?,
                    None => 1e-5,
                },
                si: match s.get("prune", "si") {
                    Some(v) => parse_num("prune", "si", &v)?,
                    None => 0,
                },
                mask_init: match s.get("prune", "mask_init") {
                    Some(v) => MaskInit::parse(&v)?,
                    None => MaskInit::MeanAbs,
                },
                weights_frozen: match s.get("prune", "weights_frozen") {
                    Some(v) => parse_bool("prune", "weights_frozen", &v)?,
                    None => false,
                },
                s: match s.get("prune", "s") {
                    Some(v) => parse_num("prune", "s", &v)?,
                    None => 0,
                },
                l: match s.get("prune", "l") {
                    Some(v) => parse_num("prune", "l", &v)?,
                    None => 0,
                },
                finetune_epochs: match s.get("prune", "finetune_epochs") {
                    Some(v) => parse_num("prune", "finetune_epochs", &v)?,
                    None => 0,
                },
                mask_opt,
                steps: match s.get("prune", "steps") {
                    Some(v) => parse_num("prune", "steps", &v)?,
                    None => 1,
                },
                gamma: match s.get("prune", "gamma") {
                    Some(v) => parse_num("prune", "gamma", &v)?,
                    None => 0.9,
                },
                p: match s.get("prune", "p") {
                    Some(v) => parse_num("prune", "p", &v)?,
                    None => 0,
                },
                q: match s.get("prune", "q") {
                    Some(v) => parse_num("prune", "q", &v)?,
                    None => 0,
                },
                mspl: match s.get("prune", "mspl") {
                    Some(v) => Some(parse_num("prune", "mspl", &v)?),
                    None => None,
                },
            };
            if !(0.0..=1.0).contains(&cfg.r) {
                return Err(Error::Config(format!("[prune] r must be in [0,1], got {}", cfg.r)));
            }
            if cfg.bo == 0 || cfg.bi == 0 {
                return Err(Error::Config("[prune] block extents bo/bi must be >= 1".into()));
            }
            if cfg.s > cfg.l {
                return Err(Error::Config(format!(
                    "[prune] s = {} must not exceed l = {}",
                    cfg.s, cfg.l
                )));
            }
            Some(cfg)
        } else {
            None
        };

        s.finish()?;
        Ok(RunConfig { model, data, train, prune })
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Canonical resolved form: every effective value, sorted, one per line.
    /// This is what gets logged and hashed.
    pub fn canonical(&self) -> String {
        let mut lines = Vec::new();
        lines.push(format!("model.arch={}", self.model.arch.as_str()));
        lines.push(format!(
            "model.input={}",
            self.model.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
        ));
        lines.push(format!(
            "model.channels={}",
            self.model.channels.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!("model.conv_kernel={}", self.model.conv_kernel));
        lines.push(format!(
            "model.hidden={}",
            self.model.hidden.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
        ));
        lines.push(format!("model.classes={}", self.model.classes));
        lines.push(format!("model.prune_classifier={}", self.model.prune_classifier));
        match &self.data {
            DataConfig::Blobs { dims, per_class } => {
                lines.push("data.kind=blobs".into());
                lines.push(format!("data.dims={dims}"));
                lines.push(format!("data.per_class={per_class}"));
            }
            DataConfig::Idx { train_images, train_labels, test_images, test_labels } => {
                lines.push("data.kind=idx".into());
                lines.push(format!("data.train_images={train_images}"));
                lines.push(format!("data.train_labels={train_labels}"));
                lines.push(format!("data.test_images={test_images}"));
                lines.push(format!("data.test_labels={test_labels}"));
            }
        }
        lines.push(format!("train.lr={}", self.train.opt.lr));
        lines.push(format!("train.momentum={}", self.train.opt.momentum));
        lines.push(format!("train.weight_decay={}", self.train.opt.weight_decay));
        lines.push(format!("train.epochs={}", self.train.epochs));
        lines.push(format!("train.batch_size={}", self.train.batch_size));
        lines.push(format!("train.seed={}", self.train.seed));
        if let Some(p) = &self.prune {
            lines.push(format!("prune.method={}", p.method.as_str()));
            lines.push(format!("prune.r={}", p.r));
            lines.push(format!("prune.bo={}", p.bo));
            lines.push(format!("prune.bi={}", p.bi));
            lines.push(format!("prune.schedule={}", p.schedule.as_str()));
            lines.push(format!("prune.tau_start={}", p.tau_start));
            lines.push(format!("prune.tau_end={}", p.tau_end));
            lines.push(format!("prune.si={}", p.si));
            lines.push(format!("prune.mask_init={}", p.mask_init.as_str()));
            lines.push(format!("prune.weights_frozen={}", p.weights_frozen));
            lines.push(format!("prune.s={}", p.s));
            lines.push(format!("prune.l={}", p.l));
            lines.push(format!("prune.finetune_epochs={}", p.finetune_epochs));
            lines.push(format!("prune.mask_lr={}", p.mask_opt.lr));
            lines.push(format!("prune.mask_momentum={}", p.mask_opt.momentum));
            lines.push(format!("prune.mask_weight_decay={}", p.mask_opt.weight_decay));
            lines.push(format!("prune.steps={}", p.steps));
            lines.push(format!("prune.gamma={}", p.gamma));
            lines.push(format!("prune.p={}", p.p));
            lines.push(format!("prune.q={}", p.q));
            lines.push(format!(
                "prune.mspl={}",
                p.mspl.map(|v| v.to_string()).unwrap_or_else(|| "none".into())
            ));
        }
        lines.sort();
        lines.join("\n")
    }

    /// FNV-1a over the canonical form.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = "
[model]
arch = mlp
input = 8
hidden = 6
classes = 3

[data]
kind = blobs
dims = 8
per_class = 50

[train]
lr = 0.05
momentum = 0.9
weight_decay = 5e-4
epochs = 5
batch_size = 16
seed = 7

[prune]
method = smart
r = 0.5
bo = 2
bi = 2
s = 5
l = 8
finetune_epochs = 2
";

    #[test]
    fn parses_and_hashes_deterministically() {
        let a = RunConfig::parse(GOOD).unwrap();
        let b = RunConfig::parse(GOOD).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.train.seed, 7);
        let p = a.prune.as_ref().unwrap();
        assert_eq!(p.method, PruneMethod::Smart);
        assert_eq!(p.mask_opt.lr, 0.05); // inherited from train lr
        assert_eq!(p.mask_opt.weight_decay, 0.0); // mask decay defaults off
    }

    #[test]
    fn hash_changes_with_any_value() {
        let a = RunConfig::parse(GOOD).unwrap();
        let b = RunConfig::parse(&GOOD.replace("seed = 7", "seed = 8")).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let bad = GOOD.replace("lr = 0.05", "lr = 0.05\nwarmup = 3");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("unknown key 'warmup'") && err.contains("[train]"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        let bad = format!("{GOOD}\n[sched]\nx = 1\n");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("unknown section"), "{err}");
    }

    #[test]
    fn missing_seed_rejected() {
        let bad = GOOD.replace("seed = 7", "");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("'seed'"), "{err}");
    }

    #[test]
    fn duplicate_key_rejected() {
        let bad = GOOD.replace("lr = 0.05", "lr = 0.05\nlr = 0.1");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("duplicate key 'lr'"), "{err}");
    }

    #[test]
    fn s_beyond_l_rejected() {
        let bad = GOOD.replace("s = 5", "s = 9");
        let err = RunConfig::parse(&bad).unwrap_err().to_string();
        assert!(err.contains("must not exceed"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = GOOD.replace("lr = 0.05", "lr = 0.05  # main learning rate\n\n");
        assert!(RunConfig::parse(&text).is_ok());
    }
}
