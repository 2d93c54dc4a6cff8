use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Flat input index of the winning element for every pooled output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArgmaxCache {
    pub input_shape: Shape,
    pub winners: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Odd extents are padded with -inf, so the
/// output is `ceil(in / 2)`. Ties go to the first element in row-major order.
pub fn maxpool2x2<F: Scalar>(input: &Tensor<F>) -> (Tensor<F>, ArgmaxCache) {
    let s = input.shape();
    let (oh, ow) = (s.h.div_ceil(2), s.w.div_ceil(2));
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.len());
    let mut winners = Vec::with_capacity(out_shape.len());
    let data = input.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.h * s.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let (y, x) = (2 * oy + dy, 2 * ox + dx);
                    if y < s.h && x < s.w {
                        let i = base + y * s.w + x;
                        if data[i] > data[best] {
                            best = i;
                        }
                    }
                }
                out.push(data[best]);
                winners.push(best);
            }
        }
    }
    let out = Tensor::from_vec(out_shape, out).expect("pool output sized from shape");
    (
        out,
        ArgmaxCache {
            input_shape: s,
            winners,
        },
    )
}

/// Routes each output gradient to its window's winner.
pub fn maxpool2x2_backward<F: Scalar>(grad_out: &Tensor<F>, cache: &ArgmaxCache) -> Result<Tensor<F>> {
    if grad_out.shape().len() != cache.winners.len() {
        return Err(shape_err(
            "maxpool_backward",
            format!("grad {} does not match {} pooled outputs", grad_out.shape(), cache.winners.len()),
        ));
    }
    let mut grad = Tensor::zeros(cache.input_shape);
    let g = grad.data_mut();
    for (&w, &v) in cache.winners.iter().zip(grad_out.data()) {
        g[w] += v;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_max() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = maxpool2x2(&x);
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn constant_input_routes_to_first_element() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 4, 4), 7.0);
        let (y, cache) = maxpool2x2(&x);
        assert!(y.data().iter().all(|&v| v == 7.0));
        let g = maxpool2x2_backward(&Tensor::full(y.shape(), 1.0), &cache).unwrap();
        let expect: Vec<f64> = (0..16)
            .map(|i| if (i / 4) % 2 == 0 && (i % 4) % 2 == 0 { 1.0 } else { 0.0 })
            .collect();
        assert_eq!(g.data(), expect.as_slice());
    }

    #[test]
    fn odd_extent_is_padded_with_neg_infinity() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 3, 3), vec![-5.0, -4.0, -3.0, -2.0, -1.0, -6.0, -7.0, -8.0, -9.0])
            .unwrap();
        let (y, _) = maxpool2x2(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[-1.0, -3.0, -7.0, -9.0]);
    }
}
