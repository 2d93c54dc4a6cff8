use serde::{Deserialize, Serialize};

use crate::error::{shape_err, EngineError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Half mean squared error against a heatmap.
    Euclidean,
    /// Mean per-pixel cross-entropy after a per-pixel softmax over channels.
    SoftmaxXent,
}

/// `0.5 * mean((pred - target)^2)` and its gradient.
pub fn euclidean_loss<F: Scalar>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<(f64, Tensor<F>)> {
    if pred.shape() != target.shape() {
        return Err(shape_err("euclidean_loss", format!("pred {} vs target {}", pred.shape(), target.shape())));
    }
    let count = pred.data().len().max(1) as f64;
    let mut grad = pred.clone();
    let mut total = 0.0;
    let inv = F::of(1.0 / count);
    for (g, &t) in grad.data_mut().iter_mut().zip(target.data()) {
        let d = *g - t;
        total += d.f64() * d.f64();
        *g = d * inv;
    }
    let loss = 0.5 * total / count;
    if !loss.is_finite() {
        return Err(EngineError::NonFinite { op: "euclidean_loss", index: 0 });
    }
    Ok((loss, grad))
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let s = logits.shape();
    let mut out = logits.clone();
    let plane = s.plane();
    for n in 0..s.n {
        let sample = out.sample_mut(n);
        for p in 0..plane {
            let max = (0..s.c).map(|c| sample[c * plane + p]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for c in 0..s.c {
                let e = (sample[c * plane + p] - max).exp();
                sample[c * plane + p] = e;
                z += e;
            }
            for c in 0..s.c {
                sample[c * plane + p] = sample[c * plane + p] / z;
            }
        }
    }
    out
}

/// Mean per-pixel cross-entropy; `labels` holds one class index per pixel
/// in `(n, h, w)` order.
pub fn softmax_xent_loss<F: Scalar>(logits: &Tensor<F>, labels: &[u8]) -> Result<(f64, Tensor<F>)> {
    let s = logits.shape();
    let plane = s.plane();
    if labels.len() != s.n * plane {
        return Err(shape_err("softmax_xent", format!("{} labels for logits {}", labels.len(), s)));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= s.c) {
        return Err(EngineError::LabelOutOfRange { label: bad as usize, classes: s.c });
    }
    let mut grad = softmax_channels(logits);
    let count = labels.len().max(1) as f64;
    let inv = F::of(1.0 / count);
    let mut total = 0.0;
    for n in 0..s.n {
        let sample = grad.sample_mut(n);
        for p in 0..plane {
            let label = labels[n * plane + p] as usize;
            let prob = sample[label * plane + p];
            total -= prob.f64().max(f64::MIN_POSITIVE).ln();
            sample[label * plane + p] = prob - F::one();
            for c in 0..s.c {
                sample[c * plane + p] = sample[c * plane + p] * inv;
            }
        }
    }
    let loss = total / count;
    if !loss.is_finite() {
        return Err(EngineError::NonFinite { op: "softmax_xent", index: 0 });
    }
    Ok((loss, grad))
}
