//! Minimal reverse-mode autodiff over feature matrices.
//!
//! A [`Tape`] records each forward operation as it runs; [`Tape::backward`]
//! walks the records in exact reverse order, accumulating gradients
//! additively per node.  All numeric kernels are the free functions from
//! [`crate::layers`] and [`crate::binarize`], so the differentiated forward
//! is the same arithmetic as the pure layer forwards.
//!
//! Non-differentiable stages use their documented surrogates: activation
//! binarization backpropagates the piecewise-polynomial derivative, and
//! binarized weights combine the clipped straight-through pass with the
//! analytic gradient of the layer-wise scale.
//!
//! Weight tensors live on the tape in *stacked* form: a layer's per-offset
//! (in × out) matrices concatenate row-wise into one (offsets·in × out)
//! matrix, matching the row-major (offsets, in, out) serialization order.

use crate::binarize::{binary_weight_backward, sign_surrogate_grad};
use crate::error::TrainError;
use crate::layers::{
    avg_pool_backward, avg_pool_forward, batch_norm_apply, batch_norm_backward,
    batch_norm_stats, conv_backward_input, conv_backward_weights, conv_forward,
    conv_transpose_backward_input, conv_transpose_backward_weights, conv_transpose_forward,
    prelu_backward, prelu_forward, sign_mat, unpool_backward, unpool_forward,
};
use crate::mat::Mat;
use crate::sparse::KernelMap;
use std::rc::Rc;

pub type NodeId = usize;

/// Splits a stacked (offsets·in × out) weight matrix into per-offset mats.
pub fn split_stacked(stacked: &Mat, offsets: usize) -> Vec<Mat> {
    assert_eq!(stacked.rows() % offsets, 0, "stacked rows must divide by offsets");
    let in_c = stacked.rows() / offsets;
    (0..offsets)
        .map(|j| {
            let mut m = Mat::zeros(in_c, stacked.cols());
            for i in 0..in_c {
                m.row_mut(i).copy_from_slice(stacked.row(j * in_c + i));
            }
            m
        })
        .collect()
}

/// Concatenates per-offset mats row-wise into the stacked layout.
pub fn stack_mats(mats: &[Mat]) -> Mat {
    let in_c = mats[0].rows();
    let cols = mats[0].cols();
    let mut out = Mat::zeros(mats.len() * in_c, cols);
    for (j, m) in mats.iter().enumerate() {
        assert_eq!((m.rows(), m.cols()), (in_c, cols));
        for i in 0..in_c {
            out.row_mut(j * in_c + i).copy_from_slice(m.row(i));
        }
    }
    out
}

enum Op {
    Leaf,
    Conv { map: Rc<KernelMap>, x: NodeId, w: NodeId },
    ConvT { map: Rc<KernelMap>, x: NodeId, w: NodeId },
    AvgPool { map: Rc<KernelMap>, x: NodeId },
    Unpool { map: Rc<KernelMap>, x: NodeId },
    SignAct { x: NodeId },
    BinWeights { w: NodeId },
    BnTrain { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    BnEval { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<f64>, var: Vec<f64>, eps: f64 },
    Prelu { x: NodeId, slopes: NodeId },
    MatMul { x: NodeId, w: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddScaled { a: NodeId, b: NodeId, k: f64 },
    ConcatCols { parts: Vec<NodeId>, widths: Vec<usize> },
    Sigmoid { x: NodeId },
    SoftmaxRows { x: NodeId },
    MatMulConst { x: NodeId, m: Rc<Mat> },
    SliceRow { x: NodeId, row: usize },
    RowBlockScale { x: NodeId, scales: NodeId, block: usize },
    SumAll { x: NodeId },
    CrossEntropy { logits: NodeId, labels: Rc<Vec<i32>>, ignore: i32, probs: Mat, valid: usize },
    ConfSigmoid { x: NodeId },
    ConfSoftmax { x: NodeId, argmax: Vec<usize> },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients per node id after a backward pass.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

/// Recording tape: values flow forward through the builder methods, and
/// `backward` replays the records in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id].value
    }

    /// Batch statistics a `bn_train` node saved during its forward.
    pub fn bn_stats(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        match &self.nodes[id].op {
            Op::BnTrain { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Gather convolution of `x` with stacked weights `w` over `map`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, map: Rc<KernelMap>) -> NodeId {
        let mats = split_stacked(self.value(w), map.pairs().len());
        let out = conv_forward(self.value(x), &map, &mats);
        self.push(out, Op::Conv { map, x, w })
    }

    /// Transposed convolution: `x` lives at the map's output (coarse) rows,
    /// the result at its input (fine) rows.
    pub fn conv_t(&mut self, x: NodeId, w: NodeId, map: Rc<KernelMap>) -> NodeId {
        let mats = split_stacked(self.value(w), map.pairs().len());
        let out = conv_transpose_forward(self.value(x), &map, &mats);
        self.push(out, Op::ConvT { map, x, w })
    }

    pub fn avg_pool(&mut self, x: NodeId, map: Rc<KernelMap>) -> NodeId {
        let out = avg_pool_forward(self.value(x), &map);
        self.push(out, Op::AvgPool { map, x })
    }

    pub fn unpool(&mut self, x: NodeId, map: Rc<KernelMap>) -> NodeId {
        let out = unpool_forward(self.value(x), &map);
        self.push(out, Op::Unpool { map, x })
    }

    /// Elementwise sign with surrogate backward.
    pub fn sign_act(&mut self, x: NodeId) -> NodeId {
        let out = sign_mat(self.value(x));
        self.push(out, Op::SignAct { x })
    }

    /// Binarized weights `mean|w| · sign(w)` with STE + scale backward.
    pub fn bin_weights(&mut self, w: NodeId) -> NodeId {
        let latent = self.value(w);
        let n = (latent.rows() * latent.cols()) as f64;
        let scale = latent.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        let out = latent.map(|v| if v >= 0.0 { scale } else { -scale });
        self.push(out, Op::BinWeights { w })
    }

    /// Batch norm with batch statistics (training mode).  The computed
    /// statistics are saved on the node (see [`Tape::bn_stats`]).
    pub fn bn_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (mean, var) = batch_norm_stats(self.value(x));
        let out = batch_norm_apply(
            self.value(x),
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        self.push(out, Op::BnTrain { x, gamma, beta, mean, var, eps })
    }

    /// Batch norm with frozen statistics (eval mode).
    pub fn bn_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> NodeId {
        let out = batch_norm_apply(
            self.value(x),
            &mean,
            &var,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        self.push(out, Op::BnEval { x, gamma, beta, mean, var, eps })
    }

    pub fn prelu(&mut self, x: NodeId, slopes: NodeId) -> NodeId {
        let out = prelu_forward(self.value(x), self.value(slopes).data());
        self.push(out, Op::Prelu { x, slopes })
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let out = self.value(x).matmul(self.value(w));
        self.push(out, Op::MatMul { x, w })
    }

    /// Adds a (1 × C) bias row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let bias = self.value(b).row(0).to_vec();
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (v, &bv) in out.row_mut(r).iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        self.push(out, Op::AddBias { x, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = self.value(a).add(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    /// `a + k·b`.
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, k: f64) -> NodeId {
        let out = self.value(a).add_scaled(self.value(b), k);
        self.push(out, Op::AddScaled { a, b, k })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            out = out.concat_cols(self.value(p));
        }
        self.push(out, Op::ConcatCols { parts: parts.to_vec(), widths })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    /// Row-wise softmax (numerically stabilized).
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in out.row_mut(r) {
                *o /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows { x })
    }

    /// Right-multiplication by a constant matrix.
    pub fn matmul_const(&mut self, x: NodeId, m: Rc<Mat>) -> NodeId {
        let out = self.value(x).matmul(&m);
        self.push(out, Op::MatMulConst { x, m })
    }

    /// Extracts row `row` of `x` as a 1×C node.
    pub fn slice_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let xv = self.value(x);
        let out = Mat::from_vec(1, xv.cols(), xv.row(row).to_vec());
        self.push(out, Op::SliceRow { x, row })
    }

    /// Scales each `block`-row band of `x` by the matching entry of the
    /// (1 × bands) node `scales`.
    pub fn row_block_scale(&mut self, x: NodeId, scales: NodeId, block: usize) -> NodeId {
        let xv = self.value(x);
        let sv = self.value(scales);
        assert_eq!(xv.rows() % block, 0);
        assert_eq!(sv.cols() * block, xv.rows(), "one scale per row band");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let s = sv[(0, r / block)];
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        self.push(out, Op::RowBlockScale { x, scales, block })
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll { x })
    }

    /// Mean cross entropy over sites whose label is not `ignore`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: Rc<Vec<i32>>,
        ignore: i32,
    ) -> Result<NodeId, TrainError> {
        let lv = self.value(logits);
        if lv.rows() != labels.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} logit rows vs {} labels",
                lv.rows(),
                labels.len()
            )));
        }
        let classes = lv.cols() as i32;
        let mut probs = Mat::zeros(lv.rows(), lv.cols());
        let mut loss = 0.0;
        let mut valid = 0usize;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            for p in probs.row_mut(r) {
                *p /= sum;
            }
            let label = labels[r];
            if label == ignore {
                continue;
            }
            assert!(label >= 0 && label < classes, "label {label} out of range");
            loss += max + sum.ln() - row[label as usize];
            valid += 1;
        }
        if valid == 0 {
            return Err(TrainError::AllIgnored);
        }
        let value = Mat::from_vec(1, 1, vec![loss / valid as f64]);
        Ok(self.push(value, Op::CrossEntropy { logits, labels, ignore, probs, valid }))
    }

    /// Confidence pressure for sigmoid-relaxed selections:
    /// `−mean |x − 0.5|`, minimized when entries saturate toward 0 or 1.
    pub fn conf_sigmoid(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = (xv.rows() * xv.cols()) as f64;
        let s: f64 = xv.data().iter().map(|&v| (v - 0.5).abs()).sum();
        self.push(Mat::from_vec(1, 1, vec![-s / n]), Op::ConfSigmoid { x })
    }

    /// Confidence pressure for softmax-relaxed selections: the negative
    /// log-likelihood of each row's current argmax, summed over rows.
    pub fn conf_softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut loss = 0.0;
        let mut argmax = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            loss -= row[best].ln();
        }
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::ConfSoftmax { x, argmax })
    }

    /// Reverse pass from a recorded scalar node.  Returns a gradient per
    /// reachable node; gradients along multiple paths sum.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TrainError> {
        if loss >= self.nodes.len() {
            return Err(TrainError::UnrecordedNode(loss));
        }
        let lv = &self.nodes[loss].value;
        if (lv.rows(), lv.cols()) != (1, 1) {
            return Err(TrainError::ShapeMismatch(format!(
                "loss node is {}×{}, expected scalar",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Mat::from_vec(1, 1, vec![1.0]));

        fn acc(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
            match &mut grads[id] {
                Some(m) => m.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=loss).rev() {
            let Some(u) = grads[id].clone() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Conv { map, x, w } => {
                    let offsets = map.pairs().len();
                    let wv = split_stacked(self.value(*w), offsets);
                    let in_c = wv[0].rows();
                    let out_c = wv[0].cols();
                    acc(&mut grads, *x, conv_backward_input(&u, map, &wv));
                    let gw = conv_backward_weights(self.value(*x), &u, map, in_c, out_c);
                    acc(&mut grads, *w, stack_mats(&gw));
                }
                Op::ConvT { map, x, w } => {
                    let offsets = map.pairs().len();
                    let wv = split_stacked(self.value(*w), offsets);
                    let in_c = wv[0].rows();
                    let out_c = wv[0].cols();
                    acc(&mut grads, *x, conv_transpose_backward_input(&u, map, &wv));
                    let gw =
                        conv_transpose_backward_weights(self.value(*x), &u, map, in_c, out_c);
                    acc(&mut grads, *w, stack_mats(&gw));
                }
                Op::AvgPool { map, x } => acc(&mut grads, *x, avg_pool_backward(&u, map)),
                Op::Unpool { map, x } => acc(&mut grads, *x, unpool_backward(&u, map)),
                Op::SignAct { x } => {
                    let xv = self.value(*x);
                    let mut g = u.clone();
                    for (gv, &x0) in g.data_mut().iter_mut().zip(xv.data()) {
                        *gv *= sign_surrogate_grad(x0);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::BinWeights { w } => {
                    let g = binary_weight_backward(
                        std::slice::from_ref(&u),
                        std::slice::from_ref(self.value(*w)),
                    );
                    acc(&mut grads, *w, g.into_iter().next().unwrap());
                }
                Op::BnTrain { x, gamma, beta, mean, var, eps } => {
                    let (dx, dgamma, dbeta) = batch_norm_backward(
                        self.value(*x),
                        &u,
                        mean,
                        var,
                        self.value(*gamma).data(),
                        *eps,
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, Mat::from_vec(1, dgamma.len(), dgamma));
                    acc(&mut grads, *beta, Mat::from_vec(1, dbeta.len(), dbeta));
                }
                Op::BnEval { x, gamma, beta, mean, var, eps } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma).data();
                    let c = xv.cols();
                    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                    let mut dx = Mat::zeros(xv.rows(), c);
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for r in 0..xv.rows() {
                        for j in 0..c {
                            let uv = u[(r, j)];
                            dx[(r, j)] = uv * gv[j] * inv[j];
                            dgamma[j] += uv * (xv[(r, j)] - mean[j]) * inv[j];
                            dbeta[j] += uv;
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, Mat::from_vec(1, c, dgamma));
                    acc(&mut grads, *beta, Mat::from_vec(1, c, dbeta));
                }
                Op::Prelu { x, slopes } => {
                    let (dx, da) = prelu_backward(self.value(*x), &u, self.value(*slopes).data());
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *slopes, Mat::from_vec(1, da.len(), da));
                }
                Op::MatMul { x, w } => {
                    acc(&mut grads, *x, u.matmul_t(self.value(*w)));
                    acc(&mut grads, *w, self.value(*x).t_matmul(&u));
                }
                Op::AddBias { x, b } => {
                    let mut db = vec![0.0; u.cols()];
                    for r in 0..u.rows() {
                        for (d, &v) in db.iter_mut().zip(u.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *x, u.clone());
                    acc(&mut grads, *b, Mat::from_vec(1, db.len(), db));
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, u.clone());
                    acc(&mut grads, *b, u.clone());
                }
                Op::AddScaled { a, b, k } => {
                    acc(&mut grads, *a, u.clone());
                    acc(&mut grads, *b, u.map(|v| v * k));
                }
                Op::ConcatCols { parts, widths } => {
                    let mut lo = 0;
                    for (&p, &w) in parts.iter().zip(widths) {
                        acc(&mut grads, p, u.slice_cols(lo, lo + w));
                        lo += w;
                    }
                }
                Op::Sigmoid { x } => {
                    let y = &self.nodes[id].value;
                    let mut g = u.clone();
                    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                        *gv *= yv * (1.0 - yv);
                    }
                    acc(&mut grads, *x, g);
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.nodes[id].value;
                    let mut g = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let ur = u.row(r);
                        let dot: f64 = yr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
                        for (j, gv) in g.row_mut(r).iter_mut().enumerate() {
                            *gv = yr[j] * (ur[j] - dot);
                        }
                    }
                    acc(&mut grads, *x, g);
                }
                Op::MatMulConst { x, m } => {
                    acc(&mut grads, *x, u.matmul_t(m));
                }
                Op::SliceRow { x, row } => {
                    let xv = self.value(*x);
                    let mut g = Mat::zeros(xv.rows(), xv.cols());
                    g.row_mut(*row).copy_from_slice(u.row(0));
                    acc(&mut grads, *x, g);
                }
                Op::RowBlockScale { x, scales, block } => {
                    let xv = self.value(*x);
                    let sv = self.value(*scales);
                    let mut gx = u.clone();
                    let mut gs = vec![0.0; sv.cols()];
                    for r in 0..xv.rows() {
                        let band = r / block;
                        let s = sv[(0, band)];
                        for (c, gv) in gx.row_mut(r).iter_mut().enumerate() {
                            gs[band] += *gv * xv[(r, c)];
                            *gv *= s;
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *scales, Mat::from_vec(1, gs.len(), gs));
                }
                Op::SumAll { x } => {
                    let xv = self.value(*x);
                    let s = u[(0, 0)];
                    acc(&mut grads, *x, Mat::from_vec(xv.rows(), xv.cols(), vec![s; xv.rows() * xv.cols()]));
                }
                Op::CrossEntropy { logits, labels, ignore, probs, valid } => {
                    let s = u[(0, 0)] / *valid as f64;
                    let mut g = Mat::zeros(probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        if labels[r] == *ignore {
                            continue;
                        }
                        for (j, gv) in g.row_mut(r).iter_mut().enumerate() {
                            let onehot = if j as i32 == labels[r] { 1.0 } else { 0.0 };
                            *gv = s * (probs[(r, j)] - onehot);
                        }
                    }
                    acc(&mut grads, *logits, g);
                }
                Op::ConfSigmoid { x } => {
                    let xv = self.value(*x);
                    let n = (xv.rows() * xv.cols()) as f64;
                    let s = u[(0, 0)];
                    let g = xv.map(|v| {
                        // subgradient 0 at the exact midpoint
                        if v > 0.5 {
                            -s / n
                        } else if v < 0.5 {
                            s / n
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *x, g);
                }
                Op::ConfSoftmax { x, argmax } => {
                    let xv = self.value(*x);
                    let s = u[(0, 0)];
                    let mut g = Mat::zeros(xv.rows(), xv.cols());
                    for (r, &j) in argmax.iter().enumerate() {
                        g[(r, j)] = -s / xv[(r, j)];
                    }
                    acc(&mut grads, *x, g);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use crate::sparse::{build_kernel_map, build_sparse_tensor, Coord, KernelOffsets};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn linear_gradient_is_exact() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_vec(3, 1, vec![2.0, -1.0, 4.0]));
        let w = tape.leaf(Mat::from_vec(1, 1, vec![0.5]));
        let y = tape.matmul(x, w);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        // d(Σ w·x)/dw = Σ x
        assert_eq!(grads.get(w).unwrap()[(0, 0)], 5.0);
        // d/dx = w
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let mut tape = Tape::new();
        let x1 = tape.leaf(Mat::from_vec(2, 1, vec![1.0, 2.0]));
        let x2 = tape.leaf(Mat::from_vec(2, 1, vec![10.0, 20.0]));
        let w = tape.leaf(Mat::from_vec(1, 1, vec![1.0]));
        let y1 = tape.matmul(x1, w);
        let y2 = tape.matmul(x2, w);
        let y = tape.add(y1, y2);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap()[(0, 0)], 33.0);
    }

    #[test]
    fn unrecorded_node_rejected() {
        let tape = Tape::new();
        assert!(matches!(tape.backward(7), Err(TrainError::UnrecordedNode(7))));
    }

    #[test]
    fn stack_split_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let mats: Vec<Mat> = (0..5).map(|_| rand_mat(&mut rng, 3, 2)).collect();
        let stacked = stack_mats(&mats);
        assert_eq!(stacked.rows(), 15);
        assert_eq!(split_stacked(&stacked, 5), mats);
    }

    /// Central finite differences of a scalar tape output with respect to
    /// one leaf, rebuilt through `build` for each probe.
    fn fd_check(
        build: &dyn Fn(&mut Tape, &[Mat]) -> NodeId,
        leaves: &[Mat],
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, leaves);
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let g = grads.get(li).unwrap_or_else(|| panic!("no grad for leaf {li}"));
            for r in 0..leaf.rows() {
                for c in 0..leaf.cols() {
                    let mut plus = leaves.to_vec();
                    plus[li][(r, c)] += h;
                    let mut minus = leaves.to_vec();
                    minus[li][(r, c)] -= h;
                    let mut tp = Tape::new();
                    let lp = build(&mut tp, &plus);
                    let mut tm = Tape::new();
                    let lm = build(&mut tm, &minus);
                    let fd = (tp.value(lp)[(0, 0)] - tm.value(lm)[(0, 0)]) / (2.0 * h);
                    let got = g[(r, c)];
                    assert!(
                        (got - fd).abs() <= tol * fd.abs().max(1.0),
                        "leaf {li} [{r},{c}]: analytic {got} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn two_layer_real_network_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        let coords: Vec<Coord> = vec![
            Coord::new(0, 0, 0, 0),
            Coord::new(0, 1, 0, 0),
            Coord::new(0, 0, 1, 0),
            Coord::new(0, 1, 1, 1),
            Coord::new(0, 2, 1, 0),
        ];
        let t = build_sparse_tensor(coords, rand_mat(&mut rng, 5, 1), 1).unwrap();
        let map = Rc::new(
            build_kernel_map(&t, t.coords().to_vec(), &KernelOffsets::cube(3), 1).unwrap(),
        );
        let labels = Rc::new(vec![0i32, 1, 0, 1, 0]);

        let x0 = t.features().clone();
        let w1 = rand_mat(&mut rng, 27, 2); // 1 in-channel → stacked 27×2
        let slopes = Mat::from_vec(1, 2, vec![0.25, 0.1]);
        let w2 = rand_mat(&mut rng, 27 * 2, 2);
        let bias = rand_mat(&mut rng, 1, 2);
        let leaves = vec![x0, w1, slopes, w2, bias];

        let map2 = Rc::clone(&map);
        let labels2 = Rc::clone(&labels);
        fd_check(
            &move |tape, leaves| {
                let x = tape.leaf(leaves[0].clone());
                let w1 = tape.leaf(leaves[1].clone());
                let s = tape.leaf(leaves[2].clone());
                let w2 = tape.leaf(leaves[3].clone());
                let b = tape.leaf(leaves[4].clone());
                let h1 = tape.conv(x, w1, Rc::clone(&map2));
                let h1 = tape.prelu(h1, s);
                let h2 = tape.conv(h1, w2, Rc::clone(&map2));
                let h2 = tape.add_bias(h2, b);
                tape.cross_entropy(h2, Rc::clone(&labels2), -1).unwrap()
            },
            &leaves,
            1e-4,
        );
    }

    #[test]
    fn bn_pool_concat_pipeline_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let mut coords = Vec::new();
        for x in 0..4 {
            for y in 0..3 {
                if rng.random::<f64>() < 0.8 {
                    coords.push(Coord::new(0, x, y, 0));
                }
            }
        }
        let n = coords.len();
        let t = build_sparse_tensor(coords, rand_mat(&mut rng, n, 2), 1).unwrap();
        let coarse = crate::sparse::downsample_coords(&t, 2);
        let pool_map = Rc::new(
            build_kernel_map(&t, coarse.clone(), &KernelOffsets::cube(2), 2).unwrap(),
        );
        let labels = Rc::new((0..coarse.len()).map(|i| (i % 2) as i32).collect::<Vec<_>>());

        let x0 = t.features().clone();
        let gamma = Mat::from_vec(1, 2, vec![1.2, 0.8]);
        let beta = Mat::from_vec(1, 2, vec![0.1, -0.3]);
        let wa = rand_mat(&mut rng, 2, 2);
        let wb = rand_mat(&mut rng, 2, 2);
        let wout = rand_mat(&mut rng, 4, 2);
        let leaves = vec![x0, gamma, beta, wa, wb, wout];

        let pm = Rc::clone(&pool_map);
        let lb = Rc::clone(&labels);
        fd_check(
            &move |tape, leaves| {
                let x = tape.leaf(leaves[0].clone());
                let gamma = tape.leaf(leaves[1].clone());
                let beta = tape.leaf(leaves[2].clone());
                let wa = tape.leaf(leaves[3].clone());
                let wb = tape.leaf(leaves[4].clone());
                let wout = tape.leaf(leaves[5].clone());
                let xn = tape.bn_train(x, gamma, beta, 1e-5);
                let pooled = tape.avg_pool(xn, Rc::clone(&pm));
                let a = tape.matmul(pooled, wa);
                let b = tape.matmul(pooled, wb);
                let cat = tape.concat_cols(&[a, b]);
                let logits = tape.matmul(cat, wout);
                tape.cross_entropy(logits, Rc::clone(&lb), -1).unwrap()
            },
            &leaves,
            1e-4,
        );
    }

    #[test]
    fn transposed_conv_and_unpool_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let fine_coords: Vec<Coord> = (0..3)
            .flat_map(|x| (0..3).map(move |y| Coord::new(0, x, y, 0)))
            .collect();
        let fine =
            build_sparse_tensor(fine_coords.clone(), Mat::zeros(fine_coords.len(), 1), 1).unwrap();
        let coarse = crate::sparse::downsample_coords(&fine, 2);
        let map = Rc::new(
            build_kernel_map(&fine, coarse.clone(), &KernelOffsets::cube(2), 2).unwrap(),
        );
        let labels = Rc::new((0..fine_coords.len()).map(|i| (i % 2) as i32).collect::<Vec<_>>());

        let y0 = rand_mat(&mut rng, coarse.len(), 2);
        let w = rand_mat(&mut rng, 8 * 2, 2);
        let skip_w = rand_mat(&mut rng, 2, 2);
        let leaves = vec![y0, w, skip_w];

        let pm = Rc::clone(&map);
        let lb = Rc::clone(&labels);
        fd_check(
            &move |tape, leaves| {
                let y = tape.leaf(leaves[0].clone());
                let w = tape.leaf(leaves[1].clone());
                let skip_w = tape.leaf(leaves[2].clone());
                let main = tape.conv_t(y, w, Rc::clone(&pm));
                let unpooled = tape.unpool(y, Rc::clone(&pm));
                let skip = tape.matmul(unpooled, skip_w);
                let out = tape.add(main, skip);
                tape.cross_entropy(out, Rc::clone(&lb), -1).unwrap()
            },
            &leaves,
            1e-4,
        );
    }

    #[test]
    fn selection_subgraph_matches_fd() {
        // sigmoid(α) → window mask → per-band weight scaling → conv → sum,
        // the differentiable spine of the fused search layer.
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let coords: Vec<Coord> =
            (0..3).map(|x| Coord::new(0, x, 0, 0)).collect();
        let t = build_sparse_tensor(coords, rand_mat(&mut rng, 3, 2), 1).unwrap();
        let map = Rc::new(
            build_kernel_map(&t, t.coords().to_vec(), &KernelOffsets::cube(3), 1).unwrap(),
        );
        // constant 0/1 matrix: 2 selections × 27 window slots
        let mwin = Rc::new(Mat::from_vec(
            2,
            27,
            (0..54).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        ));

        let alpha = rand_mat(&mut rng, 1, 2);
        let v = rand_mat(&mut rng, 27 * 2, 2);
        let leaves = vec![alpha, v];

        let pm = Rc::clone(&map);
        let mw = Rc::clone(&mwin);
        fd_check(
            &move |tape, leaves| {
                let alpha = tape.leaf(leaves[0].clone());
                let v = tape.leaf(leaves[1].clone());
                let x = tape.leaf(Mat::from_vec(3, 2, vec![0.5, -1.0, 2.0, 0.3, -0.7, 1.1]));
                let pi = tape.sigmoid(alpha);
                let mask = tape.matmul_const(pi, Rc::clone(&mw)); // 1×27
                let row = tape.slice_row(mask, 0);
                let scaled = tape.row_block_scale(v, row, 2);
                let out = tape.conv(x, scaled, Rc::clone(&pm));
                tape.sum_all(out)
            },
            &leaves,
            1e-4,
        );
    }

    #[test]
    fn sign_act_backward_is_surrogate() {
        let mut tape = Tape::new();
        let x = tape.leaf(Mat::from_vec(1, 4, vec![-1.5, -0.5, 0.25, 3.0]));
        let y = tape.sign_act(x);
        assert_eq!(tape.value(y).data(), &[-1.0, -1.0, 1.0, 1.0]);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        let expect: Vec<f64> =
            [-1.5, -0.5, 0.25, 3.0].iter().map(|&v| sign_surrogate_grad(v)).collect();
        assert_eq!(grads.get(x).unwrap().data(), expect.as_slice());
    }

    #[test]
    fn bin_weights_backward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        let latent = rand_mat(&mut rng, 4, 3).map(|v| v * 1.5);
        let mut tape = Tape::new();
        let w = tape.leaf(latent.clone());
        let bw = tape.bin_weights(w);
        // forward is scale·sign
        let n = 12.0;
        let scale: f64 = latent.data().iter().map(|v| v.abs()).sum::<f64>() / n;
        for (got, &l) in tape.value(bw).data().iter().zip(latent.data()) {
            assert_eq!(*got, if l >= 0.0 { scale } else { -scale });
        }
        let loss = tape.sum_all(bw);
        let grads = tape.backward(loss).unwrap();
        let upstream = Mat::from_vec(4, 3, vec![1.0; 12]);
        let expect = binary_weight_backward(
            std::slice::from_ref(&upstream),
            std::slice::from_ref(&latent),
        );
        assert!(grads.get(w).unwrap().max_abs_diff(&expect[0]) < 1e-12);
    }

    #[test]
    fn cross_entropy_reference_values() {
        // near-one-hot logits drive the loss toward zero
        let mut tape = Tape::new();
        let logits = tape.leaf(Mat::from_vec(2, 3, vec![30.0, 0.0, 0.0, 0.0, 30.0, 0.0]));
        let loss = tape.cross_entropy(logits, Rc::new(vec![0, 1]), -1).unwrap();
        assert!(tape.value(loss)[(0, 0)] < 1e-9);

        // uniform logits give ln C
        let mut tape = Tape::new();
        let logits = tape.leaf(Mat::zeros(4, 5));
        let loss = tape.cross_entropy(logits, Rc::new(vec![0, 1, 2, 3]), -1).unwrap();
        assert!((tape.value(loss)[(0, 0)] - 5.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let logits = rand_mat(&mut rng, 10, 4);
        let labels: Vec<i32> =
            (0..10).map(|i| if i % 3 == 0 { 255 } else { (i % 4) as i32 }).collect();
        let mut tape = Tape::new();
        let lg = tape.leaf(logits.clone());
        let loss = tape.cross_entropy(lg, Rc::new(labels.clone()), 255).unwrap();

        // brute-force subset mean
        let mut expect = 0.0;
        let mut n = 0;
        for (r, &label) in labels.iter().enumerate() {
            if label == 255 {
                continue;
            }
            let row = logits.row(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            expect += lse - row[label as usize];
            n += 1;
        }
        expect /= n as f64;
        assert!((tape.value(loss)[(0, 0)] - expect).abs() < 1e-12);

        let mut tape = Tape::new();
        let lg = tape.leaf(logits);
        let all = tape.cross_entropy(lg, Rc::new(vec![255; 10]), 255);
        assert!(matches!(all, Err(TrainError::AllIgnored)));
    }

    #[test]
    fn confidence_losses_values_and_gradients() {
        // sigmoid form: −mean|π−0.5|
        let mut tape = Tape::new();
        let pi = tape.leaf(Mat::from_vec(1, 4, vec![0.5, 0.9, 0.1, 0.75]));
        let l = tape.conf_sigmoid(pi);
        assert!((tape.value(l)[(0, 0)] - -(0.0 + 0.4 + 0.4 + 0.25) / 4.0).abs() < 1e-12);
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(pi).unwrap().data(), &[0.0, -0.25, 0.25, -0.25]);

        // softmax form through the softmax: FD check on α
        let alpha0 = Mat::from_vec(2, 3, vec![0.3, -0.2, 0.9, 1.4, 0.1, -0.5]);
        fd_check(
            &|tape, leaves| {
                let a = tape.leaf(leaves[0].clone());
                let pi = tape.softmax_rows(a);
                tape.conf_softmax(pi)
            },
            &[alpha0],
            1e-4,
        );
    }

    #[test]
    fn eval_mode_bn_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(68);
        let x0 = rand_mat(&mut rng, 6, 2);
        let gamma0 = Mat::from_vec(1, 2, vec![1.5, 0.7]);
        let beta0 = Mat::from_vec(1, 2, vec![0.2, -0.1]);
        let mean = vec![0.3, -0.2];
        let var = vec![1.7, 0.9];
        let leaves = vec![x0, gamma0, beta0];
        fd_check(
            &move |tape, leaves| {
                let x = tape.leaf(leaves[0].clone());
                let g = tape.leaf(leaves[1].clone());
                let b = tape.leaf(leaves[2].clone());
                let y = tape.bn_eval(x, g, b, mean.clone(), var.clone(), 1e-5);
                tape.sum_all(y)
            },
            &leaves,
            1e-4,
        );
    }
}
