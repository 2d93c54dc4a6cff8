//! Multi-channel 2-d convolution.
//!
//! Each input channel (for the first layer of a video network, each frame of
//! the stack) owns its own kernel per output map; the per-channel responses
//! are summed and a per-map bias is added. Kernels are applied as
//! cross-correlation (no flip). Lowered to a GEMM through im2col.

use std::ops::Range;

use crate::error::{shape_err, EngineError, Result};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `(k - 1) / 2` on every side; output is `ceil(in / stride)`.
    Same,
    /// No padding; output is `(in - k) / stride + 1`.
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<F> {
    pub in_maps: usize,
    pub out_maps: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `(out_maps, in_maps, kernel, kernel)`.
    pub weight: Param<F>,
    /// One per output map.
    pub bias: Param<F>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads<F> {
    pub input: Option<Tensor<F>>,
    pub kernels: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> ConvLayer<F> {
    pub fn new(in_maps: usize, out_maps: usize, kernel: usize, stride: usize, padding: Padding) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(EngineError::InvalidParameter(format!("kernel size {kernel} must be odd")));
        }
        if stride == 0 || in_maps == 0 || out_maps == 0 {
            return Err(EngineError::InvalidParameter("stride and map counts must be >= 1".into()));
        }
        Ok(ConvLayer {
            in_maps,
            out_maps,
            kernel,
            stride,
            padding,
            weight: Param::filled(vec![out_maps, in_maps, kernel, kernel], F::zero()),
            bias: Param::filled(vec![out_maps], F::zero()),
        })
    }

    pub fn pad(&self) -> usize {
        match self.padding {
            Padding::Same => (self.kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }

    /// Output spatial size for an input of `h x w`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.pad();
        let (k, s) = (self.kernel, self.stride);
        if h + 2 * p < k || w + 2 * p < k {
            return Err(shape_err("conv2d", format!("{h}x{w} input is smaller than the {k}x{k} kernel")));
        }
        Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
    }

    fn patch_len(&self) -> usize {
        self.in_maps * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    fn check_input(&self, shape: Shape) -> Result<(usize, usize)> {
        if shape.c != self.in_maps {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but the layer has kernels for {}", shape.c, self.in_maps),
            ));
        }
        self.output_hw(shape.h, shape.w)
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    /// Range of output columns whose tap `kj` lands inside the input row.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad { 0 } else { (self.pad - kj).div_ceil(self.s) };
        // ix = ox * s + kj - pad < w
        let limit = self.w + self.pad;
        let hi = if limit <= kj { 0 } else { ((limit - kj - 1) / self.s + 1).min(self.ow) };
        (lo.min(hi), hi)
    }

    /// Output-row bands whose im2col buffer stays around `COLS_BUDGET` elements.
    fn bands(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        let per_row = (self.c * self.k * self.k * self.ow).max(1);
        let step = (COLS_BUDGET / per_row).clamp(1, self.oh.max(1));
        (0..self.oh).step_by(step).map(move |lo| lo..(lo + step).min(self.oh))
    }
}

/// Elements of im2col scratch per GEMM call, sized to stay cache-resident.
const COLS_BUDGET: usize = 1 << 18;

/// Fills `cols` (`c*k*k` rows of `(rows.end - rows.start) * ow` columns)
/// for the output rows in `rows`.
fn im2col<F: Scalar>(src: &[F], g: &Geometry, rows: Range<usize>, cols: &mut [F]) {
    let p = rows.len() * g.ow;
    let mut row = 0;
    for ch in 0..g.c {
        let plane = &src[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for (r, oy) in rows.clone().enumerate() {
                    let drow = &mut dst[r * g.ow..(r + 1) * g.ow];
                    let iy = (oy * g.s + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(F::zero());
                    drow[hi..].fill(F::zero());
                    if lo >= hi {
                        continue;
                    }
                    if g.s == 1 {
                        let start = lo + kj - g.pad;
                        drow[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                    } else {
                        for (ox, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = srow[(ox + lo) * g.s + kj - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<F: Scalar>(cols: &[F], g: &Geometry, rows: Range<usize>, dst: &mut [F]) {
    let p = rows.len() * g.ow;
    let mut row = 0;
    for ch in 0..g.c {
        let plane = &mut dst[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.valid_cols(kj);
                for (r, oy) in rows.clone().enumerate() {
                    let iy = (oy * g.s + ki) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h || lo >= hi {
                        continue;
                    }
                    let srow = &src[r * g.ow..(r + 1) * g.ow];
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.s == 1 {
                        let start = lo + kj - g.pad;
                        for (d, &v) in drow[start..start + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox * g.s + kj - g.pad] += srow[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn geometry<F: Scalar>(layer: &ConvLayer<F>, shape: Shape, oh: usize, ow: usize) -> Geometry {
    Geometry {
        c: shape.c,
        h: shape.h,
        w: shape.w,
        k: layer.kernel,
        s: layer.stride,
        pad: layer.pad(),
        oh,
        ow,
    }
}

/// Forward convolution: `out[m] = sum_n (in[n] * K[m, n]) + b[m]`.
pub fn conv2d_forward<F: Scalar>(input: &Tensor<F>, layer: &ConvLayer<F>) -> Result<Tensor<F>> {
    let shape = input.shape();
    let (oh, ow) = layer.check_input(shape)?;
    let g = geometry(layer, shape, oh, ow);
    let (m, kk, p) = (layer.out_maps, layer.patch_len(), oh * ow);
    let mut out = Tensor::zeros(Shape::new(shape.n, m, oh, ow));
    let mut cols = Vec::new();
    for n in 0..shape.n {
        let src = input.sample(n);
        let dst = out.sample_mut(n);
        if layer.is_pointwise() {
            F::gemm(m, kk, p, F::one(), &layer.weight.value, (kk, 1), src, (p, 1), F::zero(), dst, (p, 1));
        } else {
            for band in g.bands() {
                let q = band.len() * ow;
                cols.resize(kk * q, F::zero());
                im2col(src, &g, band.clone(), &mut cols);
                let out_band = &mut dst[band.start * ow..];
                F::gemm(m, kk, q, F::one(), &layer.weight.value, (kk, 1), &cols, (q, 1), F::zero(), out_band, (p, 1));
            }
        }
        for (row, &b) in dst.chunks_exact_mut(p).zip(&layer.bias.value) {
            row.iter_mut().for_each(|v| *v += b);
        }
    }
    out.ensure_finite("conv2d")?;
    Ok(out)
}

/// Backward convolution given the forward input.
///
/// The input gradient is skipped when `need_input` is false (first layer).
pub fn conv2d_backward<F: Scalar>(
    grad_out: &Tensor<F>,
    input: &Tensor<F>,
    layer: &ConvLayer<F>,
    need_input: bool,
) -> Result<ConvGrads<F>> {
    let shape = input.shape();
    let (oh, ow) = layer.check_input(shape)?;
    let expect = Shape::new(shape.n, layer.out_maps, oh, ow);
    if grad_out.shape() != expect {
        return Err(shape_err("conv2d_backward", format!("grad {} != output {expect}", grad_out.shape())));
    }
    let g = geometry(layer, shape, oh, ow);
    let (m, kk, p) = (layer.out_maps, layer.patch_len(), oh * ow);
    let mut kernels = vec![F::zero(); m * kk];
    let mut bias = vec![F::zero(); m];
    let mut grad_in = need_input.then(|| Tensor::zeros(shape));
    let mut cols = Vec::new();
    let mut dcols = Vec::new();

    for n in 0..shape.n {
        let gout = grad_out.sample(n);
        for (b, row) in bias.iter_mut().zip(gout.chunks_exact(p)) {
            *b += row.iter().copied().sum::<F>();
        }
        let src = input.sample(n);
        if layer.is_pointwise() {
            // dK += gout * x^T ; dx = K^T * gout
            F::gemm(m, p, kk, F::one(), gout, (p, 1), src, (1, p), F::one(), &mut kernels, (kk, 1));
            if let Some(gi) = grad_in.as_mut() {
                let dst = gi.sample_mut(n);
                F::gemm(kk, m, p, F::one(), &layer.weight.value, (1, kk), gout, (p, 1), F::zero(), dst, (p, 1));
            }
            continue;
        }
        for band in g.bands() {
            let q = band.len() * ow;
            cols.resize(kk * q, F::zero());
            im2col(src, &g, band.clone(), &mut cols);
            let gband = &gout[band.start * ow..];
            F::gemm(m, q, kk, F::one(), gband, (p, 1), &cols, (1, q), F::one(), &mut kernels, (kk, 1));
            if let Some(gi) = grad_in.as_mut() {
                dcols.resize(kk * q, F::zero());
                F::gemm(kk, m, q, F::one(), &layer.weight.value, (1, kk), gband, (p, 1), F::zero(), &mut dcols, (q, 1));
                col2im_add(&dcols, &g, band, gi.sample_mut(n));
            }
        }
    }
    if let Some(gi) = &grad_in {
        gi.ensure_finite("conv2d_backward")?;
    }
    Ok(ConvGrads {
        input: grad_in,
        kernels,
        bias,
    })
}
