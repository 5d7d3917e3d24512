//! Desk-scale model zoo: an MLP and a small CNN, both relu-activated.

use crate::blocks::LayerDesc;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    TinyCnn,
}

impl ArchKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchKind::Mlp),
            "tiny_cnn" => Ok(ArchKind::TinyCnn),
            other => Err(Error::Config(format!("unknown arch '{other}' (want mlp | tiny_cnn)"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::TinyCnn => "tiny_cnn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: ArchKind,
    /// Per-sample input shape: `[D]` for the MLP, `[C,H,W]` for the CNN.
    pub input_shape: Vec<usize>,
    /// Conv channel widths (CNN only). Stride 1; padding keeps the spatial
    /// extent (`kernel / 2`).
    pub channels: Vec<usize>,
    /// Conv kernel extent (CNN only): 1 or 3.
    pub conv_kernel: usize,
    /// Hidden fully-connected widths (after the conv stack for the CNN).
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Whether the final classifier layer joins the prunable set. Off by
    /// default: pruning a tiny output head at high sparsity collapses the
    /// model.
    pub prune_classifier: bool,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        match self.arch {
            ArchKind::Mlp => {
                if self.input_shape.len() != 1 || self.input_shape[0] == 0 {
                    return Err(Error::Config(format!(
                        "mlp wants input_shape [D], got {:?}",
                        self.input_shape
                    )));
                }
            }
            ArchKind::TinyCnn => {
                if self.input_shape.len() != 3 || self.input_shape.iter().any(|&d| d == 0) {
                    return Err(Error::Config(format!(
                        "tiny_cnn wants input_shape [C,H,W], got {:?}",
                        self.input_shape
                    )));
                }
                if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
                    return Err(Error::Config("tiny_cnn needs nonempty conv channels".into()));
                }
                if !matches!(self.conv_kernel, 1 | 3) {
                    return Err(Error::Config(format!(
                        "tiny_cnn conv_kernel must be 1 or 3, got {}",
                        self.conv_kernel
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Everything the forward pass hands back: node ids for the loss (when
/// labels were supplied), the logits, and one leaf per parameter in
/// `params()` order.
pub struct ForwardOut {
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    pub param_nodes: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    params: Vec<Param>,
    /// Indices into `params` of the prunable weight tensors, layer order.
    prunable: Vec<usize>,
}

struct LayerPlan {
    name: String,
    weight_shape: Vec<usize>,
    bias_len: usize,
    fan_in: usize,
    prunable: bool,
    is_classifier: bool,
}

impl Model {
    fn plan(spec: &ModelSpec) -> Result<Vec<LayerPlan>> {
        spec.validate()?;
        let mut plans = Vec::new();
        match spec.arch {
            ArchKind::Mlp => {
                let mut widths = vec![spec.input_shape[0]];
                widths.extend(&spec.hidden);
                widths.push(spec.classes);
                for i in 0..widths.len() - 1 {
                    let last = i == widths.len() - 2;
                    plans.push(LayerPlan {
                        name: format!("fc{}", i + 1),
                        weight_shape: vec![widths[i], widths[i + 1]],
                        bias_len: widths[i + 1],
                        fan_in: widths[i],
                        prunable: !last || spec.prune_classifier,
                        is_classifier: last,
                    });
                }
            }
            ArchKind::TinyCnn => {
                let (c_in, h, w) = (spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]);
                let k = spec.conv_kernel;
                let mut prev = c_in;
                for (i, &c) in spec.channels.iter().enumerate() {
                    plans.push(LayerPlan {
                        name: format!("conv{}", i + 1),
                        weight_shape: vec![c, prev, k, k],
                        bias_len: c,
                        fan_in: prev * k * k,
                        prunable: true,
                        is_classifier: false,
                    });
                    prev = c;
                }
                let mut widths = vec![prev * h * w];
                widths.extend(&spec.hidden);
                widths.push(spec.classes);
                for i in 0..widths.len() - 1 {
                    let last = i == widths.len() - 2;
                    plans.push(LayerPlan {
                        name: format!("fc{}", i + 1),
                        weight_shape: vec![widths[i], widths[i + 1]],
                        bias_len: widths[i + 1],
                        fan_in: widths[i],
                        prunable: !last || spec.prune_classifier,
                        is_classifier: last,
                    });
                }
            }
        }
        Ok(plans)
    }

    /// He-initialized model, biases zero; all draws come from the init
    /// stream of the master seed.
    pub fn init(spec: ModelSpec, master_seed: u64) -> Result<Model> {
        let plans = Self::plan(&spec)?;
        let mut rng = Rng::for_init(master_seed);
        let mut params = Vec::new();
        let mut prunable = Vec::new();
        for p in &plans {
            let numel: usize = p.weight_shape.iter().product();
            let std = if p.is_classifier {
                (1.0 / p.fan_in as f64).sqrt()
            } else {
                (2.0 / p.fan_in as f64).sqrt()
            };
            let data: Vec<f64> = (0..numel).map(|_| rng.next_gauss() * std).collect();
            if p.prunable {
                prunable.push(params.len());
            }
            params.push(Param {
                name: format!("{}.w", p.name),
                value: Tensor::new(p.weight_shape.clone(), data)?,
            });
            params.push(Param {
                name: format!("{}.b", p.name),
                value: Tensor::zeros(vec![p.bias_len]),
            });
        }
        Ok(Model { spec, params, prunable })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.numel()).collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn param_data_mut(&mut self, idx: usize) -> &mut [f64] {
        self.params[idx].value.data_mut()
    }

    pub fn set_param(&mut self, idx: usize, data: Vec<f64>) -> Result<()> {
        if data.len() != self.params[idx].value.numel() {
            return Err(Error::InvalidArg(format!(
                "param {}: expected {} values, got {}",
                self.params[idx].name,
                self.params[idx].value.numel(),
                data.len()
            )));
        }
        self.params[idx].value.data_mut().copy_from_slice(&data);
        Ok(())
    }

    /// Indices into `params()` of the prunable weights, layer order.
    pub fn prunable_indices(&self) -> &[usize] {
        &self.prunable
    }

    pub fn prunable_weights(&self) -> Vec<Tensor> {
        self.prunable.iter().map(|&i| self.params[i].value.clone()).collect()
    }

    /// Partitioner view of the prunable layers: geometry plus per-element
    /// MAC weights (a conv weight fires once per output pixel).
    pub fn prunable_layer_descs(&self) -> Vec<LayerDesc> {
        let spatial_macs = if self.spec.arch == ArchKind::TinyCnn {
            (self.spec.input_shape[1] * self.spec.input_shape[2]) as f64
        } else {
            1.0
        };
        self.prunable
            .iter()
            .map(|&i| {
                let p = &self.params[i];
                let s = p.value.shape();
                let name = p.name.trim_end_matches(".w");
                if s.len() == 4 {
                    LayerDesc::conv(name, s[0], s[1], s[2], s[3], spatial_macs)
                } else {
                    LayerDesc::linear(name, s[0], s[1])
                }
            })
            .collect()
    }

    /// Build the network on a graph. Every parameter becomes a grad-enabled
    /// leaf; `override_prunable` substitutes tensors (e.g. masked weights)
    /// for the prunable ones, in `prunable_indices()` order.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: &Tensor,
        labels: Option<&[usize]>,
        override_prunable: Option<&[Tensor]>,
    ) -> Result<ForwardOut> {
        if let Some(ov) = override_prunable {
            if ov.len() != self.prunable.len() {
                return Err(Error::InvalidArg(format!(
                    "expected {} override tensors, got {}",
                    self.prunable.len(),
                    ov.len()
                )));
            }
        }
        let param_nodes: Vec<NodeId> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let t = match (override_prunable, self.prunable.iter().position(|&q| q == i)) {
                    (Some(ov), Some(pos)) => ov[pos].clone(),
                    _ => p.value.clone(),
                };
                g.leaf(t.with_grad())
            })
            .collect();

        let mut cur = g.leaf(x.clone());
        let mut pi = 0usize; // param cursor, stepping in (w, b) pairs
        match self.spec.arch {
            ArchKind::TinyCnn => {
                let pad = self.spec.conv_kernel / 2;
                for _ in 0..self.spec.channels.len() {
                    cur = g.conv2d(cur, param_nodes[pi], pad)?;
                    cur = g.add_chan_bias(cur, param_nodes[pi + 1])?;
                    cur = g.relu(cur);
                    pi += 2;
                }
                cur = g.flatten(cur)?;
            }
            ArchKind::Mlp => {}
        }
        let n_fc = self.spec.hidden.len() + 1;
        for fc in 0..n_fc {
            cur = g.matmul(cur, param_nodes[pi])?;
            cur = g.add_row_bias(cur, param_nodes[pi + 1])?;
            if fc + 1 < n_fc {
                cur = g.relu(cur);
            }
            pi += 2;
        }
        let loss = match labels {
            Some(y) => Some(g.softmax_cross_entropy(cur, y)?),
            None => None,
        };
        Ok(ForwardOut { logits: cur, loss, param_nodes })
    }

    pub fn total_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
