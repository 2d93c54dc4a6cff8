//! Ground-truth heatmaps and segmentation maps from point annotations.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Gaussians are truncated at this many standard deviations.
const TRUNCATE_SIGMAS: f64 = 6.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One annotated object center in one frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub frame_id: usize,
    pub x: f64,
    pub y: f64,
    pub object_id: usize,
    pub is_moving: bool,
}

impl Annotation {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// All annotations of a sequence plus the frame size they live in.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointAnnotations {
    pub width: usize,
    pub height: usize,
    pub items: Vec<Annotation>,
}

impl PointAnnotations {
    pub fn frame(&self, frame_id: usize) -> impl Iterator<Item = &Annotation> {
        self.items.iter().filter(move |a| a.frame_id == frame_id)
    }

    pub fn points(&self, frame_id: usize, moving_only: bool) -> Vec<Point> {
        self.frame(frame_id).filter(|a| a.is_moving || !moving_only).map(Annotation::point).collect()
    }
}

/// Single-channel score grid at `1 / 2^downsample` of input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub downsample: u32,
    pub values: Vec<f32>,
}

impl Heatmap {
    pub fn zeros(width: usize, height: usize, downsample: u32) -> Self {
        Heatmap { width, height, downsample, values: vec![0.0; width * height] }
    }

    /// Grid for an input of `in_w x in_h` pixels.
    pub fn for_input(in_w: usize, in_h: usize, downsample: u32) -> Self {
        let f = 1usize << downsample;
        Heatmap::zeros(in_w.div_ceil(f), in_h.div_ceil(f), downsample)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut f32 {
        &mut self.values[y * self.width + x]
    }

    pub fn scale(&self) -> f64 {
        f64::from(1u32 << self.downsample)
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Divides by `peak` and clamps into `[0, 1]`.
    pub fn normalized(&self, peak: f64) -> Heatmap {
        let inv = (1.0 / peak) as f32;
        let values = self.values.iter().map(|&v| (v * inv).clamp(0.0, 1.0)).collect();
        Heatmap { values, ..*self }
    }
}

/// Binary map (0 = background, 1 = object).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn foreground(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

/// Peak height of one unclipped target Gaussian.
pub fn gaussian_peak(sigma: f64) -> f64 {
    1.0 / (2.0 * PI * sigma * sigma)
}

/// Sum of per-point Gaussians with amplitude `1 / (2 pi sigma^2)` centered at
/// `(x / 2^d, y / 2^d)` on the grid, clipped at 1. `sigma` is in grid cells.
pub fn make_heatmap(points: &[Point], in_w: usize, in_h: usize, downsample: u32, sigma: f64) -> Heatmap {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut map = Heatmap::for_input(in_w, in_h, downsample);
    let (gw, gh) = (map.width, map.height);
    let scale = map.scale();
    let amp = gaussian_peak(sigma);
    let inv_two_var = 1.0 / (2.0 * sigma * sigma);
    let reach = TRUNCATE_SIGMAS * sigma;
    let mut acc = vec![0.0f64; gw * gh];
    let mut gx = Vec::new();
    for p in points {
        let (cx, cy) = (p.x / scale, p.y / scale);
        let Some((x0, x1)) = window(cx, reach, gw) else { continue };
        let Some((y0, y1)) = window(cy, reach, gh) else { continue };
        gx.clear();
        gx.extend((x0..x1).map(|u| (-(u as f64 - cx).powi(2) * inv_two_var).exp()));
        for v in y0..y1 {
            let wy = amp * (-(v as f64 - cy).powi(2) * inv_two_var).exp();
            let row = &mut acc[v * gw + x0..v * gw + x1];
            for (a, &wx) in row.iter_mut().zip(&gx) {
                *a += wy * wx;
            }
        }
    }
    for (dst, a) in map.values.iter_mut().zip(acc) {
        *dst = a.min(1.0) as f32;
    }
    map
}

/// Grid index range `[lo, hi)` within `reach` of `c`, or `None` if empty.
fn window(c: f64, reach: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (c - reach).ceil().max(0.0);
    let hi = ((c + reach).floor() + 1.0).min(len as f64);
    (hi > lo).then_some((lo as usize, hi as usize))
}

/// Label 1 where the heatmap reaches `threshold`.
pub fn make_segmentation(heatmap: &Heatmap, threshold: f64) -> LabelMap {
    let t = threshold as f32;
    LabelMap {
        width: heatmap.width,
        height: heatmap.height,
        labels: heatmap.values.iter().map(|&v| u8::from(v >= t)).collect(),
    }
}

/// Default segmentation threshold: a quarter of the single-object peak.
pub fn default_seg_threshold(sigma: f64) -> f64 {
    0.25 * gaussian_peak(sigma)
}
