//! Minimal reverse-mode automatic differentiation over dense float64
//! matrices.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] walks it
//! once in reverse and leaves gradients on the parameter leaves. Tapes are
//! single-use and confined to one training step.

mod adam;
mod checkpoint;

pub use adam::{AdamParams, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest};

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::spectral::SpectralBasis;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

struct LayerNormCache {
    normalized: Mat,
    inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    /// C = A * B^T
    MatMulNT(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// N x D plus a broadcast 1 x D row.
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    ScalarMul(TensorId, f64),
    /// Elementwise product with a learnable 1 x 1 scalar.
    ScaleByScalar(TensorId, TensorId),
    Exp(TensorId),
    Log(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Softplus(TensorId),
    SoftmaxRows {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        cache: Rc<LayerNormCache>,
    },
    Dropout {
        x: TensorId,
        mask: Rc<Mat>,
    },
    ConcatCols(TensorId, TensorId),
    SliceCols {
        x: TensorId,
        start: usize,
    },
    GatherRows {
        x: TensorId,
        idx: Rc<Vec<usize>>,
    },
    SegmentSum {
        x: TensorId,
        assign: Rc<Vec<usize>>,
    },
    SegmentSoftmax {
        x: TensorId,
        assign: Rc<Vec<usize>>,
        seg_count: usize,
    },
    Diffuse {
        x: TensorId,
        t: TensorId,
        basis: Rc<SpectralBasis>,
        coeffs: Rc<Mat>,
        decay: Rc<Mat>,
    },
    MeanRows(TensorId),
    Sum(TensorId),
    CrossEntropy {
        logits: TensorId,
        labels: Rc<Vec<usize>>,
        probs: Rc<Mat>,
    },
}

struct Node {
    value: Rc<Mat>,
    grad: Option<Mat>,
    requires_grad: bool,
    is_leaf: bool,
    op: Op,
}

struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Wengert-list tape for one forward/backward pass.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                consumed: false,
            }),
        }
    }

    fn push(&self, value: Mat, requires_grad: bool, is_leaf: bool, op: Op) -> TensorId {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            requires_grad,
            is_leaf,
            op,
        });
        TensorId(inner.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|id| inner.nodes[id.0].requires_grad)
    }

    /// Constant input; no gradient will be accumulated for it.
    pub fn leaf(&self, value: Mat) -> TensorId {
        self.push(value, false, true, Op::Leaf)
    }

    /// Trainable parameter; after backward its gradient is retained.
    pub fn param(&self, value: Mat) -> TensorId {
        self.push(value, true, true, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> Rc<Mat> {
        Rc::clone(&self.inner.borrow().nodes[id.0].value)
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        self.inner.borrow().nodes[id.0].value.shape()
    }

    /// Gradient left on a leaf after backward.
    pub fn grad(&self, id: TensorId) -> Option<Mat> {
        self.inner.borrow().nodes[id.0].grad.clone()
    }

    // -- primitives ---------------------------------------------------------

    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{}x{} * {}x{}", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let out = va.matmul(&vb);
        Ok(self.push(out, self.needs_grad(&[a, b]), false, Op::MatMul(a, b)))
    }

    pub fn matmul_nt(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(Error::shape(
                "matmul_nt",
                format!("{}x{} * ({}x{})^T", va.rows(), va.cols(), vb.rows(), vb.cols()),
            ));
        }
        let out = va.matmul_nt(&vb);
        Ok(self.push(out, self.needs_grad(&[a, b]), false, Op::MatMulNT(a, b)))
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = (*va).clone();
        out.add_scaled(&vb, 1.0);
        Ok(self.push(out, self.needs_grad(&[a, b]), false, Op::Add(a, b)))
    }

    /// x (N x D) + row (1 x D), broadcast down the rows.
    pub fn add_row(&self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", vx.shape(), vr.shape()),
            ));
        }
        let mut out = (*vx).clone();
        let r = vr.row(0);
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r) {
                *o += b;
            }
        }
        Ok(self.push(out, self.needs_grad(&[x, row]), false, Op::AddRow(x, row)))
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} - {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = (*va).clone();
        out.add_scaled(&vb, -1.0);
        Ok(self.push(out, self.needs_grad(&[a, b]), false, Op::Sub(a, b)))
    }

    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = (*va).clone();
        for (o, &b) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= b;
        }
        Ok(self.push(out, self.needs_grad(&[a, b]), false, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&self, x: TensorId, c: f64) -> Result<TensorId> {
        let vx = self.value(x);
        let mut out = (*vx).clone();
        out.scale(c);
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::ScalarMul(x, c)))
    }

    /// x scaled elementwise by a trainable 1 x 1 tensor.
    pub fn scale_by_scalar(&self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.shape() != (1, 1) {
            return Err(Error::shape(
                "scale_by_scalar",
                format!("scale must be 1x1, got {:?}", vs.shape()),
            ));
        }
        let c = vs.at(0, 0);
        let mut out = (*vx).clone();
        out.scale(c);
        Ok(self.push(out, self.needs_grad(&[x, s]), false, Op::ScaleByScalar(x, s)))
    }

    pub fn exp(&self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(f64::exp);
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::Exp(x)))
    }

    pub fn log(&self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        if vx.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log of non-positive value".to_string()));
        }
        let out = vx.map(f64::ln);
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::Log(x)))
    }

    pub fn relu(&self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(|v| v.max(0.0));
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::Relu(x)))
    }

    pub fn gelu(&self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(gelu);
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::Gelu(x)))
    }

    pub fn softplus(&self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(softplus);
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::Softplus(x)))
    }

    /// Row softmax with an optional additive mask (same shape as x).
    pub fn softmax_rows(&self, x: TensorId, mask: Option<&Mat>) -> Result<TensorId> {
        let vx = self.value(x);
        if let Some(m) = mask {
            if m.shape() != vx.shape() {
                return Err(Error::shape(
                    "softmax_rows",
                    format!("mask {:?} vs input {:?}", m.shape(), vx.shape()),
                ));
            }
        }
        let (n, d) = vx.shape();
        let mut out = (*vx).clone();
        for i in 0..n {
            let row = out.row_mut(i);
            if let Some(m) = mask {
                for (v, &mv) in row.iter_mut().zip(m.row(i)) {
                    *v += mv;
                }
            }
            let maxv = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - maxv).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let _ = d;
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::SoftmaxRows { x }))
    }

    /// Per-row layer normalization with affine parameters gamma, beta (1 x D).
    pub fn layer_norm(&self, x: TensorId, gamma: TensorId, beta: TensorId) -> Result<TensorId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (n, d) = vx.shape();
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?}, beta {:?} for input {:?}",
                    vg.shape(),
                    vb.shape(),
                    vx.shape()
                ),
            ));
        }
        let eps = 1e-8;
        let mut normalized = Mat::zeros(n, d);
        let mut inv_std = vec![0.0; n];
        let mut out = Mat::zeros(n, d);
        let gamma_row = vg.row(0);
        let beta_row = vb.row(0);
        for i in 0..n {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            let nrow = normalized.row_mut(i);
            let orow = out.row_mut(i);
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                nrow[j] = xh;
                orow[j] = gamma_row[j] * xh + beta_row[j];
            }
        }
        let cache = Rc::new(LayerNormCache {
            normalized,
            inv_std,
        });
        Ok(self.push(
            out,
            self.needs_grad(&[x, gamma, beta]),
            false,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
        ))
    }

    /// Inverted dropout. In eval mode this is the identity (the input id is
    /// returned unchanged); in train mode zeroed entries are compensated by
    /// 1/(1-p).
    pub fn dropout(
        &self,
        x: TensorId,
        p: f64,
        train: bool,
        rng: &mut impl rand::Rng,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout probability {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let vx = self.value(x);
        let keep = 1.0 - p;
        let inv_keep = 1.0 / keep;
        let mut mask = Mat::zeros(vx.rows(), vx.cols());
        for m in mask.data_mut() {
            *m = if rng.gen_range(0.0..1.0) < p { 0.0 } else { inv_keep };
        }
        let mut out = (*vx).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        let mask = Rc::new(mask);
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::Dropout { x, mask }))
    }

    pub fn concat_cols(&self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?} | {:?}", va.shape(), vb.shape()),
            ));
        }
        let (n, da) = va.shape();
        let db = vb.cols();
        let mut out = Mat::zeros(n, da + db);
        for i in 0..n {
            let row = out.row_mut(i);
            row[..da].copy_from_slice(va.row(i));
            row[da..].copy_from_slice(vb.row(i));
        }
        Ok(self.push(out, self.needs_grad(&[a, b]), false, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + len, vx.cols()),
            ));
        }
        let mut out = Mat::zeros(vx.rows(), len);
        for i in 0..vx.rows() {
            out.row_mut(i).copy_from_slice(&vx.row(i)[start..start + len]);
        }
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::SliceCols { x, start }))
    }

    /// out[r] = x[idx[r]].
    pub fn gather_rows(&self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index {bad} into {} rows", vx.rows()),
            ));
        }
        let mut out = Mat::zeros(idx.len(), vx.cols());
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(vx.row(src));
        }
        let idx = Rc::new(idx.to_vec());
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::GatherRows { x, idx }))
    }

    /// Sum rows into segments keyed by `assign` (out has seg_count rows).
    pub fn segment_sum(
        &self,
        x: TensorId,
        assign: &[usize],
        seg_count: usize,
    ) -> Result<TensorId> {
        let vx = self.value(x);
        if assign.len() != vx.rows() {
            return Err(Error::shape(
                "segment_sum",
                format!("{} assignments for {} rows", assign.len(), vx.rows()),
            ));
        }
        if let Some(&bad) = assign.iter().find(|&&s| s >= seg_count) {
            return Err(Error::shape(
                "segment_sum",
                format!("segment {bad} >= {seg_count}"),
            ));
        }
        let mut out = Mat::zeros(seg_count, vx.cols());
        for (i, &s) in assign.iter().enumerate() {
            for (o, &v) in out.row_mut(s).iter_mut().zip(vx.row(i)) {
                *o += v;
            }
        }
        let assign = Rc::new(assign.to_vec());
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::SegmentSum { x, assign }))
    }

    /// Softmax across the rows of each segment, per channel: within segment
    /// s and channel j, the entries exp(x)/sum(exp(x)) sum to one.
    pub fn segment_softmax(
        &self,
        x: TensorId,
        assign: &[usize],
        seg_count: usize,
    ) -> Result<TensorId> {
        let vx = self.value(x);
        if assign.len() != vx.rows() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} assignments for {} rows", assign.len(), vx.rows()),
            ));
        }
        let (n, d) = vx.shape();
        let mut maxv = Mat::from_fn(seg_count, d, |_, _| f64::NEG_INFINITY);
        for (i, &s) in assign.iter().enumerate() {
            for (m, &v) in maxv.row_mut(s).iter_mut().zip(vx.row(i)) {
                if v > *m {
                    *m = v;
                }
            }
        }
        let mut out = Mat::zeros(n, d);
        let mut sums = Mat::zeros(seg_count, d);
        for (i, &s) in assign.iter().enumerate() {
            let orow = out.row_mut(i);
            orow.copy_from_slice(vx.row(i));
            let mrow = maxv.row(s);
            for ((o, &m), acc) in orow.iter_mut().zip(mrow).zip(sums.row_mut(s)) {
                *o = (*o - m).exp();
                *acc += *o;
            }
        }
        let inv_sums = sums.map(|v| 1.0 / v);
        for (i, &s) in assign.iter().enumerate() {
            for (o, &inv) in out.row_mut(i).iter_mut().zip(inv_sums.row(s)) {
                *o *= inv;
            }
        }
        let assign = Rc::new(assign.to_vec());
        Ok(self.push(
            out,
            self.needs_grad(&[x]),
            false,
            Op::SegmentSoftmax {
                x,
                assign,
                seg_count,
            },
        ))
    }

    /// Spectral heat diffusion with one learnable time per channel
    /// (t is 1 x D, non-negative).
    pub fn diffuse(&self, x: TensorId, t: TensorId, basis: &Rc<SpectralBasis>) -> Result<TensorId> {
        let (vx, vt) = (self.value(x), self.value(t));
        let n = basis.n();
        let d = vx.cols();
        if vx.rows() != n {
            return Err(Error::shape(
                "diffuse",
                format!("{} feature rows for basis of size {n}", vx.rows()),
            ));
        }
        if vt.shape() != (1, d) {
            return Err(Error::shape(
                "diffuse",
                format!("time vector {:?} for {d} channels", vt.shape()),
            ));
        }
        if vt.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::domain("diffusion times must be finite and >= 0".to_string()));
        }
        let k = basis.k_eig();
        let mut wx = (*vx).clone();
        for (i, &w) in basis.mass().iter().enumerate() {
            for v in wx.row_mut(i) {
                *v *= w;
            }
        }
        let coeffs = basis.eigenvectors().matmul_tn(&wx);
        let trow = vt.row(0);
        let decay = Mat::from_fn(k, d, |m, j| (-basis.eigenvalues()[m] * trow[j]).exp());
        let mut damped = decay.clone();
        for (o, &c) in damped.data_mut().iter_mut().zip(coeffs.data()) {
            *o *= c;
        }
        let out = basis.eigenvectors().matmul(&damped);
        Ok(self.push(
            out,
            self.needs_grad(&[x, t]),
            false,
            Op::Diffuse {
                x,
                t,
                basis: Rc::clone(basis),
                coeffs: Rc::new(coeffs),
                decay: Rc::new(decay),
            },
        ))
    }

    /// Column means over rows: N x D -> 1 x D.
    pub fn mean_rows(&self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        let (n, d) = vx.shape();
        let out = Mat::from_fn(1, d, |_, j| {
            (0..n).map(|i| vx.at(i, j)).sum::<f64>() / n as f64
        });
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::MeanRows(x)))
    }

    /// Sum of all entries -> 1 x 1.
    pub fn sum(&self, x: TensorId) -> Result<TensorId> {
        let vx = self.value(x);
        let out = Mat::from_vec(1, 1, vec![vx.data().iter().sum()]);
        Ok(self.push(out, self.needs_grad(&[x]), false, Op::Sum(x)))
    }

    /// Mean softmax cross-entropy of row logits against integer labels.
    pub fn cross_entropy(&self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let vx = self.value(logits);
        let (n, c) = vx.shape();
        if labels.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::domain(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Mat::zeros(n, c);
        let mut loss = 0.0;
        for i in 0..n {
            let row = vx.row(i);
            let maxv = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - maxv).exp();
                probs.set(i, j, e);
                sum += e;
            }
            for j in 0..c {
                probs.set(i, j, probs.at(i, j) / sum);
            }
            loss += sum.ln() + maxv - row[labels[i]];
        }
        loss /= n as f64;
        let out = Mat::from_vec(1, 1, vec![loss]);
        let labels = Rc::new(labels.to_vec());
        let probs = Rc::new(probs);
        Ok(self.push(
            out,
            self.needs_grad(&[logits]),
            false,
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            },
        ))
    }

    // -- backward -----------------------------------------------------------

    /// Propagate gradients from a scalar loss back to every parameter leaf.
    /// A tape can run backward once.
    pub fn backward(&self, loss: TensorId) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::Training(
                "tape already consumed by a previous backward call".into(),
            ));
        }
        inner.consumed = true;
        if inner.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got {:?}",
                inner.nodes[loss.0].value.shape()
            )));
        }

        let n_nodes = inner.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n_nodes).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));
        let mut leaf_grads: Vec<(usize, Mat)> = Vec::new();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if !node.requires_grad && !matches!(node.op, Op::Leaf) {
                continue;
            }
            if node.is_leaf {
                if node.requires_grad {
                    leaf_grads.push((id, g));
                }
                continue;
            }
            backprop_op(&inner.nodes, id, &g, &mut grads);
        }

        for (id, g) in leaf_grads {
            inner.nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    out
}

fn accumulate(grads: &mut [Option<Mat>], nodes: &[Node], id: TensorId, delta: Mat) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(g) => g.add_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_op(nodes: &[Node], id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
    let val = |t: TensorId| -> &Mat { &nodes[t.0].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if nodes[a.0].requires_grad {
                // dA = G B^T; an explicit transpose keeps the product on the
                // fast row-major kernel (B is typically a small weight)
                accumulate(grads, nodes, *a, g.matmul(&val(*b).transpose()));
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, nodes, *b, val(*a).matmul_tn(g));
            }
        }
        Op::MatMulNT(a, b) => {
            // C = A B^T: dA = G B, dB = G^T A
            if nodes[a.0].requires_grad {
                accumulate(grads, nodes, *a, g.matmul(val(*b)));
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, nodes, *b, g.matmul_tn(val(*a)));
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::AddRow(x, row) => {
            accumulate(grads, nodes, *x, g.clone());
            if nodes[row.0].requires_grad {
                let d = g.cols();
                let col_sum = Mat::from_fn(1, d, |_, j| (0..g.rows()).map(|i| g.at(i, j)).sum());
                accumulate(grads, nodes, *row, col_sum);
            }
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            let mut neg = g.clone();
            neg.scale(-1.0);
            accumulate(grads, nodes, *b, neg);
        }
        Op::Mul(a, b) => {
            if nodes[a.0].requires_grad {
                accumulate(grads, nodes, *a, hadamard(g, val(*b)));
            }
            if nodes[b.0].requires_grad {
                accumulate(grads, nodes, *b, hadamard(g, val(*a)));
            }
        }
        Op::ScalarMul(x, c) => {
            let mut d = g.clone();
            d.scale(*c);
            accumulate(grads, nodes, *x, d);
        }
        Op::ScaleByScalar(x, s) => {
            let c = val(*s).at(0, 0);
            if nodes[x.0].requires_grad {
                let mut d = g.clone();
                d.scale(c);
                accumulate(grads, nodes, *x, d);
            }
            if nodes[s.0].requires_grad {
                let vx = val(*x);
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gi, xi)| gi * xi)
                    .sum();
                accumulate(grads, nodes, *s, Mat::from_vec(1, 1, vec![ds]));
            }
        }
        Op::Exp(x) => {
            accumulate(grads, nodes, *x, hadamard(g, &nodes[id].value));
        }
        Op::Log(x) => {
            let vx = val(*x);
            let mut d = g.clone();
            for (o, &v) in d.data_mut().iter_mut().zip(vx.data()) {
                *o /= v;
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::Relu(x) => {
            let vx = val(*x);
            let mut d = g.clone();
            for (o, &v) in d.data_mut().iter_mut().zip(vx.data()) {
                if v <= 0.0 {
                    *o = 0.0;
                }
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::Gelu(x) => {
            let vx = val(*x);
            let mut d = g.clone();
            for (o, &v) in d.data_mut().iter_mut().zip(vx.data()) {
                *o *= gelu_grad(v);
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::Softplus(x) => {
            let vx = val(*x);
            let mut d = g.clone();
            for (o, &v) in d.data_mut().iter_mut().zip(vx.data()) {
                *o *= sigmoid(v);
            }
            accumulate(grads, nodes, *x, d);
        }
        Op::SoftmaxRows { x } => {
            let y = &nodes[id].value;
            let (n, d) = y.shape();
            let mut dx = Mat::zeros(n, d);
            for i in 0..n {
                let yr = y.row(i);
                let gr = g.row(i);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            let _ = d;
            accumulate(grads, nodes, *x, dx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cache,
        } => {
            let (n, d) = nodes[id].value.shape();
            let vg = val(*gamma);
            if nodes[beta.0].requires_grad {
                let dbeta = Mat::from_fn(1, d, |_, j| (0..n).map(|i| g.at(i, j)).sum());
                accumulate(grads, nodes, *beta, dbeta);
            }
            if nodes[gamma.0].requires_grad {
                let dgamma = Mat::from_fn(1, d, |_, j| {
                    (0..n).map(|i| g.at(i, j) * cache.normalized.at(i, j)).sum()
                });
                accumulate(grads, nodes, *gamma, dgamma);
            }
            if nodes[x.0].requires_grad {
                let mut dx = Mat::zeros(n, d);
                let gamma_row = vg.row(0);
                for i in 0..n {
                    let gr = g.row(i);
                    let nr = cache.normalized.row(i);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gamma_row[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * nr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    let is = cache.inv_std[i];
                    let drow = dx.row_mut(i);
                    for j in 0..d {
                        let dxh = gr[j] * gamma_row[j];
                        drow[j] = is * (dxh - mean_dxh - nr[j] * mean_dxh_xh);
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
        }
        Op::Dropout { x, mask } => {
            accumulate(grads, nodes, *x, hadamard(g, mask));
        }
        Op::ConcatCols(a, b) => {
            let da = val(*a).cols();
            if nodes[a.0].requires_grad {
                let mut d = Mat::zeros(g.rows(), da);
                for i in 0..g.rows() {
                    d.row_mut(i).copy_from_slice(&g.row(i)[..da]);
                }
                accumulate(grads, nodes, *a, d);
            }
            if nodes[b.0].requires_grad {
                let db = val(*b).cols();
                let mut d = Mat::zeros(g.rows(), db);
                for i in 0..g.rows() {
                    d.row_mut(i).copy_from_slice(&g.row(i)[da..]);
                }
                accumulate(grads, nodes, *b, d);
            }
        }
        Op::SliceCols { x, start } => {
            let vx = val(*x);
            let len = g.cols();
            let mut dx = Mat::zeros(vx.rows(), vx.cols());
            for i in 0..g.rows() {
                dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::GatherRows { x, idx } => {
            let vx = val(*x);
            let mut dx = Mat::zeros(vx.rows(), vx.cols());
            for (r, &src) in idx.iter().enumerate() {
                for (o, &v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::SegmentSum { x, assign } => {
            let vx = val(*x);
            let mut dx = Mat::zeros(vx.rows(), vx.cols());
            for (i, &s) in assign.iter().enumerate() {
                dx.row_mut(i).copy_from_slice(g.row(s));
            }
            accumulate(grads, nodes, *x, dx);
        }
        Op::SegmentSoftmax {
            x,
            assign,
            seg_count,
        } => {
            let y = &nodes[id].value;
            let (n, d) = y.shape();
            let mut seg_dot = Mat::zeros(*seg_count, d);
            for (i, &s) in assign.iter().enumerate() {
                for ((acc, &gv), &yv) in seg_dot.row_mut(s).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                    *acc += gv * yv;
                }
            }
            let mut dx = Mat::zeros(n, d);
            for (i, &s) in assign.iter().enumerate() {
                for (((o, &yv), &gv), &dv) in dx
                    .row_mut(i)
                    .iter_mut()
                    .zip(y.row(i))
                    .zip(g.row(i))
                    .zip(seg_dot.row(s))
                {
                    *o = yv * (gv - dv);
                }
            }
            let _ = n;
            accumulate(grads, nodes, *x, dx);
        }
        Op::Diffuse {
            x,
            t,
            basis,
            coeffs,
            decay,
        } => {
            let k = basis.k_eig();
            let d = coeffs.cols();
            // dM = Phi^T G, with M the damped coefficients
            let dm = basis.eigenvectors().matmul_tn(g);
            if nodes[x.0].requires_grad {
                // dX = W Phi (E . dM)
                let e_dm = hadamard(&dm, decay);
                let mut dx = basis.eigenvectors().matmul(&e_dm);
                for (i, &w) in basis.mass().iter().enumerate() {
                    for v in dx.row_mut(i) {
                        *v *= w;
                    }
                }
                accumulate(grads, nodes, *x, dx);
            }
            if nodes[t.0].requires_grad {
                let mut dt = Mat::zeros(1, d);
                for m in 0..k {
                    let lam = -basis.eigenvalues()[m];
                    for (((o, &e), &c), &dmv) in dt
                        .row_mut(0)
                        .iter_mut()
                        .zip(decay.row(m))
                        .zip(coeffs.row(m))
                        .zip(dm.row(m))
                    {
                        *o += lam * e * c * dmv;
                    }
                }
                accumulate(grads, nodes, *t, dt);
            }
        }
        Op::MeanRows(x) => {
            let vx = val(*x);
            let n = vx.rows();
            let scale = 1.0 / n as f64;
            accumulate(
                grads,
                nodes,
                *x,
                Mat::from_fn(n, vx.cols(), |_, j| g.at(0, j) * scale),
            );
        }
        Op::Sum(x) => {
            let vx = val(*x);
            let gv = g.at(0, 0);
            accumulate(
                grads,
                nodes,
                *x,
                Mat::from_fn(vx.rows(), vx.cols(), |_, _| gv),
            );
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let (n, c) = probs.shape();
            let gv = g.at(0, 0) / n as f64;
            let dx = Mat::from_fn(n, c, |i, j| {
                let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                gv * (probs.at(i, j) - onehot)
            });
            accumulate(grads, nodes, *logits, dx);
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically invert softplus: find raw such that softplus(raw) = t.
pub fn softplus_inverse(t: f64) -> f64 {
    assert!(t > 0.0, "softplus range is positive");
    if t > 30.0 {
        t
    } else {
        (t.exp() - 1.0).ln()
    }
}
