//! Independent oracles shared by the engine tests and the acceptance suite:
//! a naive nested-loop convolution and central finite differences.

#![allow(dead_code)]

use rand::Rng;
use wami_engine::activation::{prelu, prelu_backward, relu, relu_backward};
use wami_engine::dropout::{dropout, dropout_backward};
use wami_engine::norm::{batchnorm, batchnorm_backward, BatchNormStats};
use wami_engine::pool::{maxpool2x2, maxpool2x2_backward};
use wami_engine::{
    conv2d_backward, conv2d_forward, euclidean_loss, softmax_xent_loss, ConvLayer, Mode, Padding, Shape, Tensor,
};

pub const FD_STEP: f64 = 1e-6;
/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Direct 6-deep loop convolution with zero "same" padding (cross-correlation).
pub fn naive_conv(input: &Tensor<f64>, layer: &ConvLayer<f64>) -> Tensor<f64> {
    let s = input.shape();
    let k = layer.kernel as isize;
    let pad = layer.pad() as isize;
    let st = layer.stride;
    let (oh, ow) = layer.output_hw(s.h, s.w).unwrap();
    let mut out = Tensor::zeros(Shape::new(s.n, layer.out_maps, oh, ow));
    for n in 0..s.n {
        for m in 0..layer.out_maps {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = layer.bias.value[m];
                    for c in 0..s.c {
                        for i in 0..k {
                            for j in 0..k {
                                let y = (oy * st) as isize + i - pad;
                                let x = (ox * st) as isize + j - pad;
                                if y < 0 || x < 0 || y >= s.h as isize || x >= s.w as isize {
                                    continue;
                                }
                                let w = layer.weight.value[((m * s.c + c) * k as usize + i as usize) * k as usize + j as usize];
                                acc += w * input.at(n, c, y as usize, x as usize);
                            }
                        }
                    }
                    *out.at_mut(n, m, oy, ox) = acc;
                }
            }
        }
    }
    out
}

pub fn random_tensor<R: Rng>(rng: &mut R, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

fn random_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Max relative error between `analytic` and central differences of `f`
/// with respect to every entry of `x`.
pub fn fd_max_err(x: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = f(x);
        x[i] = orig - FD_STEP;
        let down = f(x);
        x[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

fn random_shape<R: Rng>(rng: &mut R, max_c: usize) -> Shape {
    Shape::new(rng.random_range(1..=2), rng.random_range(1..=max_c), rng.random_range(2..=7), rng.random_range(2..=7))
}

pub fn conv_case<R: Rng>(rng: &mut R) -> f64 {
    let shape = random_shape(rng, 3);
    let kernel = [1, 3, 5][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let mut layer = ConvLayer::new(shape.c, rng.random_range(1..=3), kernel, stride, Padding::Same).unwrap();
    layer.weight.value = random_vec(rng, layer.weight.len(), -1.0, 1.0);
    layer.bias.value = random_vec(rng, layer.bias.len(), -1.0, 1.0);
    let x = random_tensor(rng, shape);
    let y = conv2d_forward(&x, &layer).unwrap();
    let r = random_tensor(rng, y.shape());
    let g = conv2d_backward(&r, &x, &layer, true).unwrap();

    let mut xs = x.data().to_vec();
    let e_in = fd_max_err(&mut xs, g.input.unwrap().data(), |v| {
        let t = Tensor::from_vec(shape, v.to_vec()).unwrap();
        conv2d_forward(&t, &layer).unwrap().dot(&r)
    });
    let mut ws = layer.weight.value.clone();
    let e_w = fd_max_err(&mut ws, &g.kernels, |v| {
        let mut l = layer.clone();
        l.weight.value = v.to_vec();
        conv2d_forward(&x, &l).unwrap().dot(&r)
    });
    let mut bs = layer.bias.value.clone();
    let e_b = fd_max_err(&mut bs, &g.bias, |v| {
        let mut l = layer.clone();
        l.bias.value = v.to_vec();
        conv2d_forward(&x, &l).unwrap().dot(&r)
    });
    e_in.max(e_w).max(e_b)
}

pub fn pool_case<R: Rng>(rng: &mut R) -> f64 {
    let shape = random_shape(rng, 3);
    let x = random_tensor(rng, shape);
    let (y, cache) = maxpool2x2(&x);
    let r = random_tensor(rng, y.shape());
    let g = maxpool2x2_backward(&r, &cache).unwrap();
    let mut xs = x.data().to_vec();
    fd_max_err(&mut xs, g.data(), |v| maxpool2x2(&Tensor::from_vec(shape, v.to_vec()).unwrap()).0.dot(&r))
}

pub fn relu_case<R: Rng>(rng: &mut R) -> f64 {
    let shape = random_shape(rng, 3);
    let x = random_tensor(rng, shape);
    let r = random_tensor(rng, shape);
    let g = relu_backward(&r, &x);
    let mut xs = x.data().to_vec();
    fd_max_err(&mut xs, g.data(), |v| relu(&Tensor::from_vec(shape, v.to_vec()).unwrap()).dot(&r))
}

pub fn prelu_case<R: Rng>(rng: &mut R) -> f64 {
    let shape = random_shape(rng, 3);
    let x = random_tensor(rng, shape);
    let slopes = random_vec(rng, shape.c, 0.0, 0.5);
    let r = random_tensor(rng, shape);
    let (gx, ga) = prelu_backward(&r, &x, &slopes).unwrap();
    let mut xs = x.data().to_vec();
    let e_x = fd_max_err(&mut xs, gx.data(), |v| {
        prelu(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &slopes).unwrap().dot(&r)
    });
    let mut a = slopes.clone();
    let e_a = fd_max_err(&mut a, &ga, |v| prelu(&x, v).unwrap().dot(&r));
    e_x.max(e_a)
}

pub fn batchnorm_case<R: Rng>(rng: &mut R, mode: Mode) -> f64 {
    let mut shape = random_shape(rng, 3);
    shape.n = 2;
    let x = random_tensor(rng, shape);
    let gamma = random_vec(rng, shape.c, 0.5, 1.5);
    let beta = random_vec(rng, shape.c, -0.5, 0.5);
    let mut stats = BatchNormStats {
        running_mean: random_vec(rng, shape.c, -0.2, 0.2),
        running_var: random_vec(rng, shape.c, 0.5, 1.5),
    };
    let frozen = stats.clone();
    let (y, cache) = batchnorm(&x, &gamma, &beta, &mut stats, mode).unwrap();
    let r = random_tensor(rng, y.shape());
    let (gx, gg, gb) = batchnorm_backward(&r, &gamma, &cache).unwrap();
    let eval = |x: &Tensor<f64>, g: &[f64], b: &[f64]| {
        let mut s = frozen.clone();
        batchnorm(x, g, b, &mut s, mode).unwrap().0.dot(&r)
    };
    let mut xs = x.data().to_vec();
    let e_x = fd_max_err(&mut xs, gx.data(), |v| eval(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &gamma, &beta));
    let mut gs = gamma.clone();
    let e_g = fd_max_err(&mut gs, &gg, |v| eval(&x, v, &beta));
    let mut bs = beta.clone();
    let e_b = fd_max_err(&mut bs, &gb, |v| eval(&x, &gamma, v));
    e_x.max(e_g).max(e_b)
}

pub fn dropout_case<R: Rng>(rng: &mut R) -> f64 {
    use rand::SeedableRng;
    let shape = random_shape(rng, 3);
    let x = random_tensor(rng, shape);
    let seed: u64 = rng.random();
    let rate = rng.random_range(0.1..0.7);
    let run = |t: &Tensor<f64>| {
        let mut mask_rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        dropout(t, rate, &mut mask_rng, Mode::Train).unwrap()
    };
    let (y, mask) = run(&x);
    let r = random_tensor(rng, y.shape());
    let g = dropout_backward(&r, mask.as_ref());
    let mut xs = x.data().to_vec();
    fd_max_err(&mut xs, g.data(), |v| run(&Tensor::from_vec(shape, v.to_vec()).unwrap()).0.dot(&r))
}

pub fn euclidean_case<R: Rng>(rng: &mut R) -> f64 {
    let shape = random_shape(rng, 2);
    let pred = random_tensor(rng, shape);
    let target = random_tensor(rng, shape);
    let (_, g) = euclidean_loss(&pred, &target).unwrap();
    let mut ps = pred.data().to_vec();
    fd_max_err(&mut ps, g.data(), |v| {
        euclidean_loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &target).unwrap().0
    })
}

pub fn xent_case<R: Rng>(rng: &mut R) -> f64 {
    let mut shape = random_shape(rng, 3);
    shape.c = rng.random_range(2..=3);
    let logits = random_tensor(rng, shape).map(|v| 3.0 * v);
    let labels: Vec<u8> = (0..shape.n * shape.plane()).map(|_| rng.random_range(0..shape.c) as u8).collect();
    let (_, g) = softmax_xent_loss(&logits, &labels).unwrap();
    let mut ls = logits.data().to_vec();
    fd_max_err(&mut ls, g.data(), |v| {
        softmax_xent_loss(&Tensor::from_vec(shape, v.to_vec()).unwrap(), &labels).unwrap().0
    })
}

/// Every differentiable op, by name.
pub const OPS: [&str; 9] = [
    "conv2d",
    "maxpool2x2",
    "relu",
    "prelu",
    "batchnorm_train",
    "batchnorm_infer",
    "dropout",
    "euclidean_loss",
    "softmax_xent",
];

pub fn run_case<R: Rng>(op: &str, rng: &mut R) -> f64 {
    match op {
        "conv2d" => conv_case(rng),
        "maxpool2x2" => pool_case(rng),
        "relu" => relu_case(rng),
        "prelu" => prelu_case(rng),
        "batchnorm_train" => batchnorm_case(rng, Mode::Train),
        "batchnorm_infer" => batchnorm_case(rng, Mode::Infer),
        "dropout" => dropout_case(rng),
        "euclidean_loss" => euclidean_case(rng),
        "softmax_xent" => xent_case(rng),
        other => panic!("unknown op {other}"),
    }
}

/// One random convolution case against the naive loop; returns max abs error.
pub fn conv_oracle_case<R: Rng>(rng: &mut R) -> f64 {
    let shape = Shape::new(rng.random_range(1..=2), rng.random_range(1..=5), rng.random_range(1..=16), rng.random_range(1..=16));
    let kernel = [1, 3, 5, 7][rng.random_range(0..4)];
    let stride = rng.random_range(1..=2);
    let mut layer = ConvLayer::new(shape.c, rng.random_range(1..=4), kernel, stride, Padding::Same).unwrap();
    layer.weight.value = random_vec(rng, layer.weight.len(), -1.0, 1.0);
    layer.bias.value = random_vec(rng, layer.bias.len(), -1.0, 1.0);
    let x = random_tensor(rng, shape);
    let fast = conv2d_forward(&x, &layer).unwrap();
    let slow = naive_conv(&x, &layer);
    assert_eq!(fast.shape(), slow.shape());
    fast.data().iter().zip(slow.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}
