//! Tape-based reverse-mode differentiation over dense 2-D matrices.
//!
//! Every forward primitive appends one node to the [`Tape`]; node order is
//! therefore a topological order and [`Tape::backward`] walks it in reverse.
//! Learnable parameters live outside the tape in a [`ParamSet`]: the forward
//! pass copies them in with [`Tape::param`] and `backward` accumulates the
//! resulting gradients back into the set.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Axis};
use rand::Rng;

use super::{AutodiffError, Mat, ParamSet};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul(usize, usize),
    Add { a: usize, b: usize, broadcast: bool },
    MulScalar { a: usize, s: usize },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    ScaleRows { a: usize, s: usize },
    ConcatCols(usize, usize),
    Dropout { a: usize, mask: Mat },
    GatherRows { a: usize, idx: Vec<usize> },
    ScatterSum { m: usize, target: Vec<usize> },
    MessageSum { h: usize, edge: Option<usize>, src: Vec<usize>, dst: Vec<usize>, weights: Vec<f64> },
    GlobalMean(usize),
    GlobalMax { a: usize, argmax: Vec<usize> },
    Sum(usize),
    SoftmaxCrossEntropy { logits: usize, label: usize, weight: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    // Running hash of every discrete decision (relu gates, argmax rows,
    // top-k selections). Two forwards with equal signatures lie in the same
    // smooth piece of the loss surface.
    signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mix(h: u64, v: u64) -> u64 {
    let mut z = h ^ v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a stream of relu gate bits into the branch signature, 64 at a time.
struct GateHasher {
    sig: u64,
    word: u64,
    bits: u32,
}

impl GateHasher {
    fn new(sig: u64) -> Self {
        Self { sig, word: 0, bits: 0 }
    }

    fn push(&mut self, open: bool) {
        self.word = (self.word << 1) | u64::from(open);
        self.bits += 1;
        if self.bits == 64 {
            self.sig = mix(self.sig, self.word);
            self.word = 0;
            self.bits = 0;
        }
    }

    fn finish(self) -> u64 {
        mix(mix(self.sig, self.word), u64::from(self.bits))
    }
}

fn shape(m: &Mat) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

/// Indices of the `k` largest scores, highest first; equal scores keep the
/// lower index first.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            signature: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of all branch decisions taken so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    /// Folds a discrete selection made outside the tape (such as a top-k
    /// pick) into the branch signature.
    pub fn note_selection(&mut self, idx: &[usize]) {
        let mut sig = mix(self.signature, idx.len() as u64);
        for &i in idx {
            sig = mix(sig, i as u64);
        }
        self.signature = sig;
    }

    fn index(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(AutodiffError::NotOnTape);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> Result<&Mat, AutodiffError> {
        let i = self.index(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> Result<f64, AutodiffError> {
        let m = self.value(v)?;
        if shape(m) != (1, 1) {
            return Err(AutodiffError::NotScalar { shape: shape(m) });
        }
        Ok(m[[0, 0]])
    }

    fn push(&mut self, op: &'static str, value: Mat, kind: Op, needs_grad: bool) -> Result<Var, AutodiffError> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFiniteDetected { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Mat) -> Result<Var, AutodiffError> {
        self.push("constant", value, Op::Leaf { param: None }, false)
    }

    /// Records parameter `index` of `params`.
    pub fn param(&mut self, params: &ParamSet, index: usize) -> Result<Var, AutodiffError> {
        let t = params.get(index);
        let needs = t.requires_grad;
        self.push("param", t.value.clone(), Op::Leaf { param: Some(index) }, needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.ncols() != vb.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = va.dot(vb);
        let needs = self.needs(ia) || self.needs(ib);
        self.push("matmul", out, Op::MatMul(ia, ib), needs)
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let broadcast = if va.dim() == vb.dim() {
            false
        } else if vb.nrows() == 1 && vb.ncols() == va.ncols() {
            true
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "add",
                lhs: shape(va),
                rhs: shape(vb),
            });
        };
        let out = if broadcast { va + &vb.row(0) } else { va + vb };
        let needs = self.needs(ia) || self.needs(ib);
        self.push("add", out, Op::Add { a: ia, b: ib, broadcast }, needs)
    }

    /// Multiplies every entry of `a` by the 1×1 value `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let (ia, is) = (self.index(a)?, self.index(s)?);
        let vs = &self.nodes[is].value;
        if shape(vs) != (1, 1) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_scalar",
                lhs: shape(&self.nodes[ia].value),
                rhs: shape(vs),
            });
        }
        let out = &self.nodes[ia].value * vs[[0, 0]];
        let needs = self.needs(ia) || self.needs(is);
        self.push("mul_scalar", out, Op::MulScalar { a: ia, s: is }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let mut gates = GateHasher::new(self.signature);
        let out = self.nodes[ia].value.mapv(|x| {
            gates.push(x > 0.0);
            x.max(0.0)
        });
        self.signature = gates.finish();
        let needs = self.needs(ia);
        self.push("relu", out, Op::Relu(ia), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.mapv(f64::tanh);
        let needs = self.needs(ia);
        self.push("tanh", out, Op::Tanh(ia), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let out = self.nodes[ia].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let needs = self.needs(ia);
        self.push("sigmoid", out, Op::Sigmoid(ia), needs)
    }

    /// Row `i` of `a` multiplied by `s[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        let (ia, is) = (self.index(a)?, self.index(s)?);
        let (va, vs) = (&self.nodes[ia].value, &self.nodes[is].value);
        if vs.ncols() != 1 || vs.nrows() != va.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scale_rows",
                lhs: shape(va),
                rhs: shape(vs),
            });
        }
        let out = va * vs;
        let needs = self.needs(ia) || self.needs(is);
        self.push("scale_rows", out, Op::ScaleRows { a: ia, s: is }, needs)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.nrows() != vb.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: shape(va),
                rhs: shape(vb),
            });
        }
        let out = ndarray::concatenate(Axis(1), &[va.view(), vb.view()]).expect("row counts checked");
        let needs = self.needs(ia) || self.needs(ib);
        self.push("concat_cols", out, Op::ConcatCols(ia, ib), needs)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)` so inference is
    /// the identity. Draws one uniform per entry, row-major, only when
    /// `training` and `p > 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::InvalidArgument("dropout probability must lie in [0, 1)"));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let (r, c) = shape(&self.nodes[ia].value);
        let mask = Array2::from_shape_fn((r, c), |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let out = &self.nodes[ia].value * &mask;
        let needs = self.needs(ia);
        self.push("dropout", out, Op::Dropout { a: ia, mask }, needs)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let va = &self.nodes[ia].value;
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.nrows()) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: va.nrows(),
            });
        }
        let out = va.select(Axis(0), idx);
        let needs = self.needs(ia);
        self.push("gather_rows", out, Op::GatherRows { a: ia, idx: idx.to_vec() }, needs)
    }

    /// `out[j] = Σ_{i : target[i] = j} m[i]` with `n_out` output rows.
    pub fn scatter_sum(&mut self, m: Var, target: &[usize], n_out: usize) -> Result<Var, AutodiffError> {
        let im = self.index(m)?;
        let vm = &self.nodes[im].value;
        if target.len() != vm.nrows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_sum",
                lhs: shape(vm),
                rhs: (target.len(), 1),
            });
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= n_out) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "scatter_sum",
                index: bad,
                len: n_out,
            });
        }
        let mut out = Array2::zeros((n_out, vm.ncols()));
        for (row, &t) in vm.outer_iter().zip(target) {
            let mut dst = out.row_mut(t);
            dst += &row;
        }
        let needs = self.needs(im);
        self.push("scatter_sum", out, Op::ScatterSum { m: im, target: target.to_vec() }, needs)
    }

    /// Message passing in one node: `out[v] = Σ_{e : dst[e] = v} m_e` with
    /// `m_e = h[src[e]]`, or `m_e = relu(h[src[e]] + weights[e]·edge)` when a
    /// 1×d edge embedding is given. Equivalent to gathering, shifting,
    /// rectifying and scattering, without materialising per-edge rows.
    pub fn message_sum(&mut self, h: Var, edge: Option<Var>, src: &[usize], dst: &[usize], weights: &[f64]) -> Result<Var, AutodiffError> {
        let ih = self.index(h)?;
        let ie = edge.map(|e| self.index(e)).transpose()?;
        let vh = &self.nodes[ih].value;
        let (n, d) = shape(vh);
        if src.len() != dst.len() || (ie.is_some() && weights.len() != src.len()) {
            return Err(AutodiffError::ShapeMismatch {
                op: "message_sum",
                lhs: (src.len(), dst.len()),
                rhs: (weights.len(), 1),
            });
        }
        if let Some(&bad) = src.iter().chain(dst).find(|&&i| i >= n) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "message_sum",
                index: bad,
                len: n,
            });
        }
        if let Some(ie) = ie {
            let ve = &self.nodes[ie].value;
            if shape(ve) != (1, d) {
                return Err(AutodiffError::ShapeMismatch {
                    op: "message_sum",
                    lhs: (n, d),
                    rhs: shape(ve),
                });
            }
        }
        let hs = vh.as_standard_layout();
        let hs = hs.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * d];
        let mut gates = GateHasher::new(self.signature);
        match ie {
            None => {
                for (&u, &v) in src.iter().zip(dst) {
                    for (o, &x) in out[v * d..(v + 1) * d].iter_mut().zip(&hs[u * d..(u + 1) * d]) {
                        *o += x;
                    }
                }
            }
            Some(ie) => {
                let ve: Vec<f64> = self.nodes[ie].value.iter().copied().collect();
                for ((&u, &v), &w) in src.iter().zip(dst).zip(weights) {
                    let hu = &hs[u * d..(u + 1) * d];
                    let row = &mut out[v * d..(v + 1) * d];
                    for k in 0..d {
                        let pre = hu[k] + w * ve[k];
                        gates.push(pre > 0.0);
                        if pre > 0.0 {
                            row[k] += pre;
                        }
                    }
                }
            }
        }
        let out = Array2::from_shape_vec((n, d), out).expect("n × d buffer");
        self.signature = gates.finish();
        let needs = self.needs(ih) || ie.is_some_and(|i| self.needs(i));
        self.push(
            "message_sum",
            out,
            Op::MessageSum {
                h: ih,
                edge: ie,
                src: src.to_vec(),
                dst: dst.to_vec(),
                weights: if ie.is_some() { weights.to_vec() } else { Vec::new() },
            },
            needs,
        )
    }

    /// Column means as a 1×d row.
    pub fn global_mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let va = &self.nodes[ia].value;
        if va.nrows() == 0 {
            return Err(AutodiffError::EmptyInput { op: "global_mean" });
        }
        let out = va.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let needs = self.needs(ia);
        self.push("global_mean", out, Op::GlobalMean(ia), needs)
    }

    /// Column maxima as a 1×d row; the first maximal row wins.
    pub fn global_max(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let va = &self.nodes[ia].value;
        if va.nrows() == 0 {
            return Err(AutodiffError::EmptyInput { op: "global_max" });
        }
        let mut argmax = vec![0usize; va.ncols()];
        let mut out = Array2::zeros((1, va.ncols()));
        let mut sig = self.signature;
        for (c, col) in va.axis_iter(Axis(1)).enumerate() {
            let mut best = 0;
            for (r, &x) in col.iter().enumerate() {
                if x > col[best] {
                    best = r;
                }
            }
            argmax[c] = best;
            out[[0, c]] = col[best];
            sig = mix(sig, best as u64);
        }
        self.signature = sig;
        let needs = self.needs(ia);
        self.push("global_max", out, Op::GlobalMax { a: ia, argmax }, needs)
    }

    /// Sum of all entries as a 1×1 value.
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let out = Array2::from_elem((1, 1), self.nodes[ia].value.sum());
        let needs = self.needs(ia);
        self.push("sum", out, Op::Sum(ia), needs)
    }

    /// Weighted cross-entropy of a single 1×C logit row against `label`.
    /// `class_weights` may be empty (all ones).
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize, class_weights: &[f64]) -> Result<Var, AutodiffError> {
        let il = self.index(logits)?;
        let vl = &self.nodes[il].value;
        if vl.nrows() != 1 || label >= vl.ncols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape(vl),
                rhs: (1, label + 1),
            });
        }
        let weight = if class_weights.is_empty() {
            1.0
        } else if class_weights.len() == vl.ncols() {
            class_weights[label]
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: shape(vl),
                rhs: (1, class_weights.len()),
            });
        };
        let probs = softmax(vl.row(0).as_slice().expect("contiguous row"));
        let row = vl.row(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = weight * (lse - row[label]);
        let needs = self.needs(il);
        self.push(
            "softmax_cross_entropy",
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits: il,
                label,
                weight,
                probs,
            },
            needs,
        )
    }

    /// Back-propagates from the scalar `loss` and adds every parameter
    /// gradient into `params`. Gradients accumulate across calls until the
    /// caller zeroes them.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<(), AutodiffError> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Op::Leaf { param: Some(p) }, Some(g)) = (&node.op, grad) {
                params.accumulate(*p, &g);
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None where the node
    /// does not influence the loss or needs no gradient).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Mat>>, AutodiffError> {
        let il = self.index(loss)?;
        let lv = &self.nodes[il].value;
        if shape(lv) != (1, 1) {
            return Err(AutodiffError::NotScalar { shape: shape(lv) });
        }
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[il] = Some(Array2::ones((1, 1)));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf { .. } => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.nodes[*b].value.t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.nodes[*a].value.t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add { a, b, broadcast } => {
                    if self.needs(*b) {
                        let gb = if *broadcast {
                            g.sum_axis(Axis(0)).insert_axis(Axis(0))
                        } else {
                            g.clone()
                        };
                        acc(&mut grads, *b, gb);
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulScalar { a, s } => {
                    let sv = self.nodes[*s].value[[0, 0]];
                    if self.needs(*s) {
                        let gs = (&g * &self.nodes[*a].value).sum();
                        acc(&mut grads, *s, Array2::from_elem((1, 1), gs));
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g * sv);
                    }
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| {
                        if y <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&node.value, |gv, &y| *gv *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::ScaleRows { a, s } => {
                    if self.needs(*s) {
                        let gs = (&g * &self.nodes[*a].value).sum_axis(Axis(1)).insert_axis(Axis(1));
                        acc(&mut grads, *s, gs);
                    }
                    if self.needs(*a) {
                        acc(&mut grads, *a, g * &self.nodes[*s].value);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let split = self.nodes[*a].value.ncols();
                    if self.needs(*a) {
                        acc(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                    }
                }
                Op::Dropout { a, mask } => {
                    acc(&mut grads, *a, g * mask);
                }
                Op::GatherRows { a, idx } => {
                    let va = &self.nodes[*a].value;
                    let mut ga = Array2::zeros(va.dim());
                    for (row, &r) in g.outer_iter().zip(idx) {
                        let mut dst = ga.row_mut(r);
                        dst += &row;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterSum { m, target } => {
                    acc(&mut grads, *m, g.select(Axis(0), target));
                }
                Op::MessageSum { h, edge, src, dst, weights } => {
                    let vh = &self.nodes[*h].value;
                    let (n, d) = vh.dim();
                    let hs = vh.as_standard_layout();
                    let hs = hs.as_slice().expect("standard layout");
                    let gs = g.as_standard_layout();
                    let gs = gs.as_slice().expect("standard layout");
                    let mut gh = vec![0.0; n * d];
                    match edge {
                        None => {
                            for (&u, &v) in src.iter().zip(dst) {
                                for (o, &x) in gh[u * d..(u + 1) * d].iter_mut().zip(&gs[v * d..(v + 1) * d]) {
                                    *o += x;
                                }
                            }
                        }
                        Some(ie) => {
                            let ve: Vec<f64> = self.nodes[*ie].value.iter().copied().collect();
                            let mut ge = vec![0.0; d];
                            for ((&u, &v), &w) in src.iter().zip(dst).zip(weights) {
                                let hu = &hs[u * d..(u + 1) * d];
                                let gv = &gs[v * d..(v + 1) * d];
                                let ghu = &mut gh[u * d..(u + 1) * d];
                                for k in 0..d {
                                    if hu[k] + w * ve[k] > 0.0 {
                                        ghu[k] += gv[k];
                                        ge[k] += w * gv[k];
                                    }
                                }
                            }
                            if self.needs(*ie) {
                                acc(&mut grads, *ie, Array2::from_shape_vec((1, d), ge).expect("1 × d buffer"));
                            }
                        }
                    }
                    if self.needs(*h) {
                        acc(&mut grads, *h, Array2::from_shape_vec((n, d), gh).expect("n × d buffer"));
                    }
                }
                Op::GlobalMean(a) => {
                    let n = self.nodes[*a].value.nrows();
                    let row = g.row(0).mapv(|x| x / n as f64);
                    let ga = row.broadcast((n, row.len())).expect("broadcast row").to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::GlobalMax { a, argmax } => {
                    let mut ga = Array2::zeros(self.nodes[*a].value.dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        ga[[r, c]] = g[[0, c]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.nodes[*a].value.dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    label,
                    weight,
                    probs,
                } => {
                    let scale = g[[0, 0]] * weight;
                    let ga = Array2::from_shape_fn((1, probs.len()), |(_, c)| {
                        scale * (probs[c] - if c == *label { 1.0 } else { 0.0 })
                    });
                    acc(&mut grads, *logits, ga);
                }
            }
        }
        Ok(grads)
    }
}

fn acc(grads: &mut [Option<Mat>], i: usize, g: Mat) {
    match &mut grads[i] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Records `x · W + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scatter_sum_definition() {
        let mut tape = Tape::new();
        let m = tape.constant(array![[1.0], [2.0], [3.0]]).unwrap();
        let out = tape.scatter_sum(m, &[0, 0, 1], 2).unwrap();
        assert_eq!(tape.value(out).unwrap(), &array![[3.0], [3.0]]);
    }

    #[test]
    fn message_sum_matches_gather_shift_relu_scatter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        let h = params.push(Tensor::param("h", Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0))));
        let e = params.push(Tensor::param("e", Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0))));
        let src = [0, 1, 2, 3, 4, 0, 2];
        let dst = [1, 0, 3, 2, 0, 4, 4];
        let w: Vec<f64> = (0..src.len()).map(|_| rng.random_range(0.1..2.0)).collect();

        let mut fused = params.clone();
        let mut t = Tape::new();
        let (hv, ev) = (t.param(&fused, h).unwrap(), t.param(&fused, e).unwrap());
        let out = t.message_sum(hv, Some(ev), &src, &dst, &w).unwrap();
        let fused_value = t.value(out).unwrap().clone();
        let loss = t.sum(out).unwrap();
        t.backward(loss, &mut fused).unwrap();

        let mut plain = params.clone();
        let mut t = Tape::new();
        let (hv, ev) = (t.param(&plain, h).unwrap(), t.param(&plain, e).unwrap());
        let gathered = t.gather_rows(hv, &src).unwrap();
        let wc = t.constant(Array2::from_shape_vec((w.len(), 1), w.clone()).unwrap()).unwrap();
        let shift = t.matmul(wc, ev).unwrap();
        let pre = t.add(gathered, shift).unwrap();
        let msg = t.relu(pre).unwrap();
        let out = t.scatter_sum(msg, &dst, 5).unwrap();
        let plain_value = t.value(out).unwrap().clone();
        let loss = t.sum(out).unwrap();
        t.backward(loss, &mut plain).unwrap();

        assert!((&fused_value - &plain_value).iter().all(|x| x.abs() < 1e-12));
        for p in [h, e] {
            let diff = fused.get(p).grad.as_ref().unwrap() - plain.get(p).grad.as_ref().unwrap();
            assert!(diff.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn gather_then_scatter_identity_round_trip() {
        let mut tape = Tape::new();
        let a = array![[1.0, -2.0], [0.5, 4.0], [3.0, 3.0]];
        let v = tape.constant(a.clone()).unwrap();
        let g = tape.gather_rows(v, &[0, 1, 2]).unwrap();
        let back = tape.scatter_sum(g, &[0, 1, 2], 3).unwrap();
        assert_eq!(tape.value(back).unwrap(), &a);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let a = tape.constant(array![[1.0, 2.0, 3.0]]).unwrap();
        let d = tape.dropout(a, 0.0, true, &mut rng).unwrap();
        assert_eq!(tape.value(d).unwrap(), &array![[1.0, 2.0, 3.0]]);
        let e = tape.dropout(a, 0.7, false, &mut rng).unwrap();
        assert_eq!(tape.value(e).unwrap(), &array![[1.0, 2.0, 3.0]]);
    }

    #[test]
    fn dropout_expectation_close_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &p in &[0.2, 0.5] {
            let mut total = 0.0;
            let trials = 10_000;
            for _ in 0..trials {
                let mut tape = Tape::new();
                let a = tape.constant(Array2::ones((1, 16))).unwrap();
                let d = tape.dropout(a, p, true, &mut rng).unwrap();
                total += tape.value(d).unwrap().mean().unwrap();
            }
            let mean = total / trials as f64;
            assert!((mean - 1.0).abs() < 0.02, "p={p} mean={mean}");
        }
    }

    #[test]
    fn dropout_rejects_probability_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let a = tape.constant(Array2::ones((1, 1))).unwrap();
        assert!(tape.dropout(a, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn topk_tie_breaks_by_lower_index() {
        assert_eq!(topk_indices(&[0.5, 0.9, 0.5], 2), vec![1, 0]);
        assert_eq!(topk_indices(&[1.0, 1.0, 1.0], 3), vec![0, 1, 2]);
    }

    #[test]
    fn relu_gate_gradient() {
        let mut params = ParamSet::new();
        let w = params.push(Tensor::param("w", array![[-1.0, 2.0]]));
        let mut tape = Tape::new();
        let wv = tape.param(&params, w).unwrap();
        let r = tape.relu(wv).unwrap();
        let loss = tape.sum(r).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad.as_ref().unwrap(), &array![[0.0, 1.0]]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut params = ParamSet::new();
        let w = params.push(Tensor::param("w", array![[3.0]]));
        let mut tape = Tape::new();
        let wv = tape.param(&params, w).unwrap();
        let loss = tape.sum(wv).unwrap();
        tape.backward(loss, &mut params).unwrap();
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad.as_ref().unwrap()[[0, 0]], 2.0);
    }

    #[test]
    fn uniform_binary_cross_entropy_is_ln2_with_analytic_gradient() {
        let mut params = ParamSet::new();
        let z = params.push(Tensor::param("z", array![[0.0, 0.0]]));
        let mut tape = Tape::new();
        let zv = tape.param(&params, z).unwrap();
        let loss = tape.softmax_cross_entropy(zv, 0, &[]).unwrap();
        assert!((tape.scalar(loss).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(z).grad.as_ref().unwrap(), &array![[-0.5, 0.5]]);
    }

    #[test]
    fn cross_entropy_gradient_matches_central_difference() {
        let logits = [0.3, -1.2];
        let h = 1e-4;
        let ce = |l: [f64; 2]| {
            let mut t = Tape::new();
            let v = t.constant(array![[l[0], l[1]]]).unwrap();
            let loss = t.softmax_cross_entropy(v, 1, &[1.0, 2.5]).unwrap();
            t.scalar(loss).unwrap()
        };
        let mut params = ParamSet::new();
        let z = params.push(Tensor::param("z", array![[logits[0], logits[1]]]));
        let mut tape = Tape::new();
        let zv = tape.param(&params, z).unwrap();
        let loss = tape.softmax_cross_entropy(zv, 1, &[1.0, 2.5]).unwrap();
        tape.backward(loss, &mut params).unwrap();
        let g = params.get(z).grad.clone().unwrap();
        for c in 0..2 {
            let mut up = logits;
            let mut dn = logits;
            up[c] += h;
            dn[c] -= h;
            let fd = (ce(up) - ce(dn)) / (2.0 * h);
            assert!((fd - g[[0, c]]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_non_negative() {
        for l in [[5.0, -5.0], [-3.0, 2.0], [0.0, 0.0]] {
            for label in 0..2 {
                let mut t = Tape::new();
                let v = t.constant(array![[l[0], l[1]]]).unwrap();
                let loss = t.softmax_cross_entropy(v, label, &[]).unwrap();
                assert!(t.scalar(loss).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn var_from_other_tape_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let v = a.constant(array![[1.0]]).unwrap();
        assert!(matches!(b.relu(v), Err(AutodiffError::NotOnTape)));
        let loss = a.sum(v).unwrap();
        let mut params = ParamSet::new();
        assert!(matches!(b.backward(loss, &mut params), Err(AutodiffError::NotOnTape)));
    }

    #[test]
    fn non_finite_values_trip_an_error() {
        let mut t = Tape::new();
        let v = t.constant(array![[1e300]]).unwrap();
        assert!(matches!(t.mul_scalar(v, v), Err(AutodiffError::NonFiniteDetected { .. })));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut t = Tape::new();
        let a = t.constant(Array2::zeros((2, 3))).unwrap();
        let b = t.constant(Array2::zeros((2, 3))).unwrap();
        assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch { op: "matmul", .. })));
        let c = t.constant(Array2::zeros((1, 2))).unwrap();
        assert!(matches!(t.add(a, c), Err(AutodiffError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn global_max_routes_gradient_to_first_argmax() {
        let mut params = ParamSet::new();
        let a = params.push(Tensor::param("a", array![[1.0, 5.0], [1.0, 2.0]]));
        let mut t = Tape::new();
        let av = t.param(&params, a).unwrap();
        let m = t.global_max(av).unwrap();
        let loss = t.sum(m).unwrap();
        t.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(a).grad.as_ref().unwrap(), &array![[1.0, 1.0], [0.0, 0.0]]);
    }
}
