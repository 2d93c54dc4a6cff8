use rand::Rng;

use crate::error::{EngineError, Result};
use crate::norm::Mode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-element multiplier applied in the forward pass (0 or `1 / (1 - rate)`).
#[derive(Clone, Debug)]
pub struct DropoutMask<F> {
    pub scale: Vec<F>,
}

/// Inverted dropout. Infer mode and `rate == 0` are exact identities.
pub fn dropout<F: Scalar, R: Rng + ?Sized>(
    x: &Tensor<F>,
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<(Tensor<F>, Option<DropoutMask<F>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(EngineError::InvalidParameter(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let scale: Vec<F> = (0..x.data().len())
        .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
        .collect();
    let mut out = x.clone();
    for (v, &s) in out.data_mut().iter_mut().zip(&scale) {
        *v = *v * s;
    }
    Ok((out, Some(DropoutMask { scale })))
}

pub fn dropout_backward<F: Scalar>(grad: &Tensor<F>, mask: Option<&DropoutMask<F>>) -> Tensor<F> {
    let mut out = grad.clone();
    if let Some(m) = mask {
        for (g, &s) in out.data_mut().iter_mut().zip(&m.scale) {
            *g = *g * s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_and_infer_are_identity() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 2, 3, 3), |_, c, y, x| (c * 9 + y * 3 + x) as f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(dropout(&x, 0.0, &mut rng, Mode::Train).unwrap().0, x);
        assert_eq!(dropout(&x, 0.7, &mut rng, Mode::Infer).unwrap().0, x);
    }

    #[test]
    fn zero_fraction_matches_rate() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 1000, 1000), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (y, _) = dropout(&x, 0.5, &mut rng, Mode::Train).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.5).abs() < 0.003, "zero fraction {zeros}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn same_seed_same_mask() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 8, 8), 1.0);
        let a = dropout(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(9), Mode::Train).unwrap().0;
        let b = dropout(&x, 0.3, &mut ChaCha8Rng::seed_from_u64(9), Mode::Train).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn rate_one_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 1));
        assert!(dropout(&x, 1.0, &mut ChaCha8Rng::seed_from_u64(0), Mode::Train).is_err());
    }
}
