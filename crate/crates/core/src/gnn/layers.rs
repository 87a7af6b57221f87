use ndarray::Array2;

use super::{ConvParams, GnnError, ScoreParams};
use crate::autodiff::{linear, topk_indices, ParamSet, Tape, Var};
use crate::graph_builder::Graph;

/// Directed message edges `src[i] → dst[i]` with scalar weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub n_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Topology {
    pub fn from_graph(graph: &Graph) -> Self {
        Self {
            n_nodes: graph.n_nodes(),
            src: graph.edges.iter().map(|e| e[0]).collect(),
            dst: graph.edges.iter().map(|e| e[1]).collect(),
            weights: graph.edge_weights.clone(),
        }
    }

    /// Subgraph induced by `kept`; node `kept[i]` becomes node `i`.
    pub fn induced(&self, kept: &[usize]) -> Self {
        let mut remap = vec![usize::MAX; self.n_nodes];
        for (new, &old) in kept.iter().enumerate() {
            remap[old] = new;
        }
        let mut out = Self {
            n_nodes: kept.len(),
            src: Vec::new(),
            dst: Vec::new(),
            weights: Vec::new(),
        };
        for ((&u, &v), &w) in self.src.iter().zip(&self.dst).zip(&self.weights) {
            if remap[u] != usize::MAX && remap[v] != usize::MAX {
                out.src.push(remap[u]);
                out.dst.push(remap[v]);
                out.weights.push(w);
            }
        }
        out
    }
}

/// `(1 + ε)·h_v + Σ_{u→v} m_uv` where `m_uv = h_u`, or
/// `relu(h_u + w_uv·W_e)` when an edge embedding is given.
fn aggregate(tape: &mut Tape, h: Var, topo: &Topology, params: &ParamSet, eps: usize, edge: Option<usize>) -> Result<Var, GnnError> {
    let one = tape.constant(Array2::ones((1, 1)))?;
    let eps = tape.param(params, eps)?;
    let scale = tape.add(one, eps)?;
    let own = tape.mul_scalar(h, scale)?;
    let edge = edge.map(|we| tape.param(params, we)).transpose()?;
    let summed = tape.message_sum(h, edge, &topo.src, &topo.dst, &topo.weights)?;
    Ok(tape.add(own, summed)?)
}

fn mlp(tape: &mut Tape, x: Var, params: &ParamSet, conv: &ConvParams) -> Result<Var, GnnError> {
    let (w1, b1) = (tape.param(params, conv.w1)?, tape.param(params, conv.b1)?);
    let z = linear(tape, x, w1, b1)?;
    let z = tape.relu(z)?;
    let (w2, b2) = (tape.param(params, conv.w2)?, tape.param(params, conv.b2)?);
    Ok(linear(tape, z, w2, b2)?)
}

/// GIN update `MLP((1 + ε)·h_v + Σ_u h_u)`; edge weights are ignored.
pub fn gin_conv(tape: &mut Tape, h: Var, topo: &Topology, params: &ParamSet, conv: &ConvParams) -> Result<Var, GnnError> {
    let agg = aggregate(tape, h, topo, params, conv.eps, None)?;
    mlp(tape, agg, params, conv)
}

/// GINE update `MLP((1 + ε)·h_v + Σ_u relu(h_u + w_uv·W_e))`.
pub fn gine_conv(tape: &mut Tape, h: Var, topo: &Topology, params: &ParamSet, conv: &ConvParams) -> Result<Var, GnnError> {
    let edge = conv.edge.ok_or_else(|| GnnError::ParamMismatch("GINE layer without an edge embedding".into()))?;
    let agg = aggregate(tape, h, topo, params, conv.eps, Some(edge))?;
    mlp(tape, agg, params, conv)
}

/// Output of one pooling step.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub h: Var,
    pub topology: Topology,
    /// Kept input rows, highest score first.
    pub kept: Vec<usize>,
}

/// Self-attention graph pooling: a one-output graph convolution scores
/// every node, the `ceil(ratio·n)` best are kept (ties to the lower index)
/// and their features are gated by `tanh(score)`.
pub fn sag_pool(tape: &mut Tape, h: Var, topo: &Topology, ratio: f64, params: &ParamSet, score: &ScoreParams) -> Result<Pooled, GnnError> {
    let n = topo.n_nodes;
    if n == 0 {
        return Err(GnnError::EmptyGraph);
    }
    let agg = aggregate(tape, h, topo, params, score.eps, score.edge)?;
    let (w, b) = (tape.param(params, score.w)?, tape.param(params, score.b)?);
    let s = linear(tape, agg, w, b)?;
    let k = ((ratio * n as f64).ceil() as usize).clamp(1, n);
    let scores = tape.value(s)?.column(0).to_vec();
    let kept = topk_indices(&scores, k);
    tape.note_selection(&kept);
    let hk = tape.gather_rows(h, &kept)?;
    let sk = tape.gather_rows(s, &kept)?;
    let gate = tape.tanh(sk)?;
    let gated = tape.scale_rows(hk, gate)?;
    Ok(Pooled {
        h: gated,
        topology: topo.induced(&kept),
        kept,
    })
}

/// Graph embedding: column means concatenated with column maxima.
pub fn readout(tape: &mut Tape, h: Var) -> Result<Var, GnnError> {
    let mean = tape.global_mean(h)?;
    let max = tape.global_max(h)?;
    Ok(tape.concat_cols(mean, max)?)
}
