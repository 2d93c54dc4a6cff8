use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Identity,
    Relu,
    /// Leaky rectifier with one learned slope per feature map.
    Prelu,
}

pub fn relu<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Scalar>(grad: &Tensor<F>, input: &Tensor<F>) -> Tensor<F> {
    let mut out = grad.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(input.data()) {
        if x <= F::zero() {
            *g = F::zero();
        }
    }
    out
}

/// `x` if `x > 0`, else `slope[c] * x`.
pub fn prelu<F: Scalar>(x: &Tensor<F>, slopes: &[F]) -> Result<Tensor<F>> {
    let s = x.shape();
    if slopes.len() != s.c {
        return Err(shape_err("prelu", format!("{} slopes for {} maps", slopes.len(), s.c)));
    }
    let mut out = x.clone();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let a = slopes[i % s.c];
        for v in chunk {
            if *v <= F::zero() {
                *v = a * *v;
            }
        }
    }
    Ok(out)
}

/// Returns `(grad_input, grad_slopes)`.
pub fn prelu_backward<F: Scalar>(grad: &Tensor<F>, input: &Tensor<F>, slopes: &[F]) -> Result<(Tensor<F>, Vec<F>)> {
    let s = input.shape();
    if grad.shape() != s || slopes.len() != s.c {
        return Err(shape_err("prelu_backward", format!("grad {} vs input {}", grad.shape(), s)));
    }
    let plane = s.plane();
    let mut gx = grad.clone();
    let mut ga = vec![F::zero(); s.c];
    for (i, (gchunk, xchunk)) in gx
        .data_mut()
        .chunks_exact_mut(plane)
        .zip(input.data().chunks_exact(plane))
        .enumerate()
    {
        let c = i % s.c;
        for (g, &x) in gchunk.iter_mut().zip(xchunk) {
            if x <= F::zero() {
                ga[c] += *g * x;
                *g = *g * slopes[c];
            }
        }
    }
    Ok((gx, ga))
}
