use ndarray::Array2;
use rand::Rng;

use super::{GnnError, ModelConfig};
use crate::autodiff::{ParamSet, Tensor};

/// Parameter handles of one GIN/GINE convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub eps: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    /// 1×d_in edge-weight embedding (GINE only).
    pub edge: Option<usize>,
}

/// Parameters of the 1-output scoring convolution used by SAG pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreParams {
    pub eps: usize,
    pub w: usize,
    pub b: usize,
    pub edge: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub conv: ConvParams,
    pub score: Option<ScoreParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub set: ParamSet,
    pub layers: Vec<LayerParams>,
    /// (weight, bias) per head layer.
    pub head: Vec<(usize, usize)>,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Every parameter name and shape, in creation order.
fn layout(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let h = config.hidden_dim;
    let mut d_in = config.in_dim;
    for l in 0..config.n_conv_layers {
        out.push((format!("conv{l}.eps"), (1, 1)));
        out.push((format!("conv{l}.mlp1.w"), (d_in, h)));
        out.push((format!("conv{l}.mlp1.b"), (1, h)));
        out.push((format!("conv{l}.mlp2.w"), (h, h)));
        out.push((format!("conv{l}.mlp2.b"), (1, h)));
        if config.use_edge_weights {
            out.push((format!("conv{l}.edge"), (1, d_in)));
        }
        if config.use_sag_pool {
            out.push((format!("pool{l}.eps"), (1, 1)));
            out.push((format!("pool{l}.w"), (h, 1)));
            out.push((format!("pool{l}.b"), (1, 1)));
            if config.use_edge_weights {
                out.push((format!("pool{l}.edge"), (1, h)));
            }
        }
        d_in = h;
    }
    let mut width = config.readout_dim();
    for j in 0..config.mlp_head_layers {
        let out_w = if j + 1 == config.mlp_head_layers { config.n_classes } else { h };
        out.push((format!("head{j}.w"), (width, out_w)));
        out.push((format!("head{j}.b"), (1, out_w)));
        width = out_w;
    }
    out
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases and ε = 0.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, GnnError> {
        config.validate()?;
        let mut set = ParamSet::new();
        for (name, (r, c)) in layout(config) {
            let value = if name.ends_with(".eps") || name.ends_with(".b") {
                Array2::zeros((r, c))
            } else {
                glorot(rng, r, c)
            };
            set.push(Tensor::param(name, value));
        }
        Self::from_set(config, set)
    }

    /// Binds handles by name; every expected tensor must be present with
    /// the expected shape and nothing else may be.
    pub fn from_set(config: &ModelConfig, set: ParamSet) -> Result<Self, GnnError> {
        let expected = layout(config);
        if expected.len() != set.len() {
            return Err(GnnError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                expected.len(),
                set.len()
            )));
        }
        for (name, shape) in &expected {
            let i = set
                .find(name)
                .ok_or_else(|| GnnError::ParamMismatch(format!("missing tensor `{name}`")))?;
            if set.get(i).shape() != *shape {
                return Err(GnnError::ParamMismatch(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    set.get(i).shape()
                )));
            }
        }
        let idx = |n: String| set.find(&n).expect("checked above");
        let layers = (0..config.n_conv_layers)
            .map(|l| LayerParams {
                conv: ConvParams {
                    eps: idx(format!("conv{l}.eps")),
                    w1: idx(format!("conv{l}.mlp1.w")),
                    b1: idx(format!("conv{l}.mlp1.b")),
                    w2: idx(format!("conv{l}.mlp2.w")),
                    b2: idx(format!("conv{l}.mlp2.b")),
                    edge: config.use_edge_weights.then(|| idx(format!("conv{l}.edge"))),
                },
                score: config.use_sag_pool.then(|| ScoreParams {
                    eps: idx(format!("pool{l}.eps")),
                    w: idx(format!("pool{l}.w")),
                    b: idx(format!("pool{l}.b")),
                    edge: config.use_edge_weights.then(|| idx(format!("pool{l}.edge"))),
                }),
            })
            .collect();
        let head = (0..config.mlp_head_layers)
            .map(|j| (idx(format!("head{j}.w")), idx(format!("head{j}.b"))))
            .collect();
        Ok(Self { set, layers, head })
    }
}
