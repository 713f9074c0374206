//! Scalar losses with hand-written gradients. Each returns the loss value
//! and the gradient with respect to its first argument.

use crate::nn::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Weighted-mean cross entropy over rows; `targets[r]` is the class index
/// for row `r`. Zero total weight short-circuits to a zero loss and zero
/// gradient so empty assignments never divide by zero.
pub fn softmax_ce(logits: &Tensor, targets: &[usize], weights: &[f64]) -> (f64, Tensor) {
    debug_assert_eq!(logits.rows(), targets.len());
    debug_assert_eq!(logits.rows(), weights.len());
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return (0.0, Tensor::zeros(logits.shape()));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for r in 0..grad.rows() {
        let w = weights[r] / total;
        let row = grad.row_mut(r);
        loss -= w * row[targets[r]].max(f64::MIN_POSITIVE).ln();
        for v in row.iter_mut() {
            *v *= w;
        }
        row[targets[r]] -= w;
    }
    (loss, grad)
}

fn huber(d: f64) -> (f64, f64) {
    if d.abs() < 1.0 {
        (0.5 * d * d, d)
    } else {
        (d.abs() - 0.5, d.signum())
    }
}

/// Smooth-L1 summed over each row's dimensions, then weighted-mean over
/// rows. Gradient is with respect to `pred`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, weights: &[f64]) -> (f64, Tensor) {
    debug_assert_eq!(pred.shape(), target.shape());
    debug_assert_eq!(pred.rows(), weights.len());
    let total: f64 = weights.iter().sum();
    let mut grad = Tensor::zeros(pred.shape());
    if total <= 0.0 {
        return (0.0, grad);
    }
    let mut loss = 0.0;
    for r in 0..pred.rows() {
        let w = weights[r] / total;
        let g = grad.row_mut(r);
        for (c, (p, t)) in pred.row(r).iter().zip(target.row(r)).enumerate() {
            let (l, d) = huber(p - t);
            loss += w * l;
            g[c] = w * d;
        }
    }
    (loss, grad)
}

/// Binary cross entropy on a single logit. Returns the loss and its
/// gradient with respect to the logit, which reduces to `p - label`.
pub fn binary_ce(logit: f64, label: f64) -> (f64, f64) {
    // log(1 + e^{-|z|}) form avoids overflow for large |z|.
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - label)
}
