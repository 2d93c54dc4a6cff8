//! Per-map batch normalization.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<F> {
    pub running_mean: Vec<F>,
    pub running_var: Vec<F>,
}

impl<F: Scalar> BatchNormStats<F> {
    pub fn new(maps: usize) -> Self {
        BatchNormStats {
            running_mean: vec![F::zero(); maps],
            running_var: vec![F::one(); maps],
        }
    }
}

/// What backward needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<F> {
    mode: Mode,
    normalized: Tensor<F>,
    inv_std: Vec<F>,
}

fn per_map<F: Scalar>(x: &Tensor<F>, mut f: impl FnMut(usize, &[F])) {
    let s = x.shape();
    for (i, chunk) in x.data().chunks_exact(s.plane()).enumerate() {
        f(i % s.c, chunk);
    }
}

/// Train mode normalizes with batch statistics and updates the running
/// averages; infer mode uses the running averages.
pub fn batchnorm<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    stats: &mut BatchNormStats<F>,
    mode: Mode,
) -> Result<(Tensor<F>, BatchNormCache<F>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c || stats.running_mean.len() != s.c {
        return Err(shape_err("batchnorm", format!("{} affine pairs for {} maps", gamma.len(), s.c)));
    }
    let eps = F::of(BN_EPS);
    let (mean, var) = match mode {
        Mode::Train => {
            let count = (s.n * s.plane()) as f64;
            let mut sum = vec![0.0f64; s.c];
            per_map(x, |c, chunk| sum[c] += chunk.iter().map(|v| v.f64()).sum::<f64>());
            let mean: Vec<f64> = sum.iter().map(|t| t / count).collect();
            let mut sq = vec![0.0f64; s.c];
            per_map(x, |c, chunk| {
                sq[c] += chunk.iter().map(|v| (v.f64() - mean[c]).powi(2)).sum::<f64>();
            });
            let var: Vec<f64> = sq.iter().map(|t| t / count).collect();
            let m = BN_MOMENTUM;
            for c in 0..s.c {
                let unbiased = if count > 1.0 { var[c] * count / (count - 1.0) } else { var[c] };
                stats.running_mean[c] = F::of((1.0 - m) * stats.running_mean[c].f64() + m * mean[c]);
                stats.running_var[c] = F::of((1.0 - m) * stats.running_var[c].f64() + m * unbiased);
            }
            (
                mean.into_iter().map(F::of).collect::<Vec<F>>(),
                var.into_iter().map(F::of).collect::<Vec<F>>(),
            )
        }
        Mode::Infer => (stats.running_mean.clone(), stats.running_var.clone()),
    };
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut normalized = x.clone();
    let mut out = x.clone();
    let plane = s.plane();
    for (i, (nchunk, ochunk)) in normalized
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
        .enumerate()
    {
        let c = i % s.c;
        for (nv, ov) in nchunk.iter_mut().zip(ochunk.iter_mut()) {
            *nv = (*nv - mean[c]) * inv_std[c];
            *ov = gamma[c] * *nv + beta[c];
        }
    }
    out.ensure_finite("batchnorm")?;
    Ok((out, BatchNormCache { mode, normalized, inv_std }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<F: Scalar>(
    grad: &Tensor<F>,
    gamma: &[F],
    cache: &BatchNormCache<F>,
) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    let s = cache.normalized.shape();
    if grad.shape() != s {
        return Err(shape_err("batchnorm_backward", format!("grad {} vs {}", grad.shape(), s)));
    }
    let plane = s.plane();
    let mut dgamma = vec![0.0f64; s.c];
    let mut dbeta = vec![0.0f64; s.c];
    for (i, (g, xh)) in grad
        .data()
        .chunks_exact(plane)
        .zip(cache.normalized.data().chunks_exact(plane))
        .enumerate()
    {
        let c = i % s.c;
        for (&gv, &xv) in g.iter().zip(xh) {
            dgamma[c] += gv.f64() * xv.f64();
            dbeta[c] += gv.f64();
        }
    }
    let mut dx = grad.clone();
    let count = (s.n * plane) as f64;
    for (i, (d, xh)) in dx
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(cache.normalized.data().chunks_exact(plane))
        .enumerate()
    {
        let c = i % s.c;
        let scale = gamma[c] * cache.inv_std[c];
        match cache.mode {
            Mode::Infer => d.iter_mut().for_each(|v| *v = *v * scale),
            Mode::Train => {
                // dx = gamma * inv_std / m * (m * g - sum(g) - xhat * sum(g * xhat))
                let sum_g = F::of(dbeta[c] / count);
                let sum_gx = F::of(dgamma[c] / count);
                for (v, &x) in d.iter_mut().zip(xh) {
                    *v = scale * (*v - sum_g - x * sum_gx);
                }
            }
        }
    }
    dx.ensure_finite("batchnorm_backward")?;
    Ok((
        dx,
        dgamma.into_iter().map(F::of).collect(),
        dbeta.into_iter().map(F::of).collect(),
    ))
}
