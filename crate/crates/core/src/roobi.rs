//! Receptive-field arithmetic and proposal gating over the coarse network's
//! output grid.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::models::{LayerSpec, NetworkSpec};
use crate::targets::Heatmap;

/// Side of the square output-grid blocks that become proposals.
pub const BLOCK: usize = 4;

/// Default fine-network chip side, input pixels.
pub const CHIP_SIZE: usize = 128;

/// Axis-aligned rectangle in pixel coordinates; `x`/`y` may be negative for
/// chips hanging over the frame edge.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x: i64, y: i64, w: usize, h: usize) -> Self {
        Rect { x, y, w, h }
    }

    /// Exclusive right edge.
    pub fn right(&self) -> i64 {
        self.x + self.w as i64
    }

    /// Exclusive bottom edge.
    pub fn bottom(&self) -> i64 {
        self.y + self.h as i64
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x as f64 && x < self.right() as f64 && y >= self.y as f64 && y < self.bottom() as f64
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let (x0, y0) = (self.x.max(other.x), self.y.max(other.y));
        let (x1, y1) = (self.right().min(other.right()), self.bottom().min(other.bottom()));
        (x1 > x0 && y1 > y0).then(|| Rect::new(x0, y0, (x1 - x0) as usize, (y1 - y0) as usize))
    }
}

/// Receptive field of one output neuron along an axis: `size` input pixels,
/// neighbouring outputs `jump` pixels apart, the first one starting at
/// `start` (negative when it reaches into padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfDescriptor {
    pub size: usize,
    pub jump: usize,
    pub start: i64,
}

impl RfDescriptor {
    pub const IDENTITY: RfDescriptor = RfDescriptor { size: 1, jump: 1, start: 0 };

    /// A single sliding window with symmetric padding `pad`.
    pub fn window(kernel: usize, stride: usize, pad: usize) -> Self {
        RfDescriptor { size: kernel, jump: stride, start: -(pad as i64) }
    }

    /// Descriptor of `next` applied on top of `self`.
    pub fn then(self, next: RfDescriptor) -> Self {
        RfDescriptor {
            size: self.size + (next.size - 1) * self.jump,
            jump: self.jump * next.jump,
            start: self.start + next.start * self.jump as i64,
        }
    }

    /// Input coordinate of the first output's field center.
    pub fn center(&self) -> f64 {
        self.start as f64 + (self.size as f64 - 1.0) / 2.0
    }

    /// Unclipped inclusive input span of outputs `first..=last`.
    pub fn span(&self, first: usize, last: usize) -> (i64, i64) {
        let lo = self.start + (first * self.jump) as i64;
        (lo, self.start + (last * self.jump) as i64 + self.size as i64 - 1)
    }
}

/// `(kernel, stride, pad)` of every spatial layer.
fn windows(spec: &NetworkSpec) -> Vec<(usize, usize, usize)> {
    spec.layers
        .iter()
        .filter_map(|l| match *l {
            LayerSpec::Conv { kernel, stride, .. } => Some((kernel, stride, (kernel - 1) / 2)),
            LayerSpec::Pool => Some((2, 2, 0)),
            _ => None,
        })
        .collect()
}

/// Cumulative descriptor after each spatial layer.
pub fn layer_descriptors(spec: &NetworkSpec) -> Vec<RfDescriptor> {
    windows(spec)
        .into_iter()
        .scan(RfDescriptor::IDENTITY, |acc, (k, s, p)| {
            *acc = acc.then(RfDescriptor::window(k, s, p));
            Some(*acc)
        })
        .collect()
}

pub fn rf_descriptor(spec: &NetworkSpec) -> RfDescriptor {
    layer_descriptors(spec).last().copied().unwrap_or(RfDescriptor::IDENTITY)
}

/// Tightest input rectangle (within a `frame_w x frame_h` input) whose pixels
/// influence any output in `out_region` (output-grid coordinates).
///
/// Walks the layers backwards, clipping to each intermediate extent so that
/// padding cells never pull in input pixels.
pub fn receptive_field(spec: &NetworkSpec, out_region: Rect, frame_w: usize, frame_h: usize) -> Result<Rect> {
    let ops = windows(spec);
    let mut extents = vec![(frame_w, frame_h)];
    for &(k, s, p) in &ops {
        let (w, h) = *extents.last().expect("non-empty");
        // Pools pad odd extents on the far side only, which adds no pixels.
        let out = |n: usize| if p == 0 && k == 2 { n.div_ceil(2) } else { (n + 2 * p - k) / s + 1 };
        extents.push((out(w), out(h)));
    }
    let (gw, gh) = *extents.last().expect("non-empty");
    let grid = Rect::new(0, 0, gw, gh);
    if out_region.area() == 0 || grid.intersect(&out_region) != Some(out_region) {
        return Err(CoreError::Shape(format!("output region {out_region:?} outside {gw}x{gh} grid")));
    }
    let mut xs = (out_region.x, out_region.right() - 1);
    let mut ys = (out_region.y, out_region.bottom() - 1);
    for (i, &(k, s, p)) in ops.iter().enumerate().rev() {
        let (w, h) = extents[i];
        let back = |(a, b): (i64, i64), n: usize| {
            let (s, p, k) = (s as i64, p as i64, k as i64);
            ((a * s - p).max(0), (b * s - p + k - 1).min(n as i64 - 1))
        };
        xs = back(xs, w);
        ys = back(ys, h);
    }
    Ok(Rect::new(xs.0, ys.0, (xs.1 - xs.0 + 1) as usize, (ys.1 - ys.0 + 1) as usize))
}

/// A gated output block and the input regions it maps to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roobi {
    /// Block column and row in units of `BLOCK` output cells.
    pub block: (usize, usize),
    /// Influence rectangle, clipped to the frame.
    pub rect: Rect,
    /// Fine-network chip; even origin, may overhang the frame.
    pub chip: Rect,
    /// Block maximum of the coarse score map.
    pub score: f32,
}

/// Block layout of a coarse output grid over a given frame.
#[derive(Clone, Debug)]
pub struct BlockGrid {
    pub grid_w: usize,
    pub grid_h: usize,
    pub frame_w: usize,
    pub frame_h: usize,
    pub chip: usize,
}

impl BlockGrid {
    pub fn new(spec: &NetworkSpec, frame_w: usize, frame_h: usize, chip: usize) -> Result<Self> {
        if chip == 0 || chip % 2 != 0 {
            return Err(CoreError::Config(format!("chip size must be even and positive, got {chip}")));
        }
        let (grid_h, grid_w) = spec.output_dims(frame_h, frame_w);
        Ok(BlockGrid { grid_w, grid_h, frame_w, frame_h, chip })
    }

    pub fn blocks_x(&self) -> usize {
        self.grid_w.div_ceil(BLOCK)
    }

    pub fn blocks_y(&self) -> usize {
        self.grid_h.div_ceil(BLOCK)
    }

    pub fn total_blocks(&self) -> usize {
        self.blocks_x() * self.blocks_y()
    }

    /// Output cells of block `(bx, by)`; edge blocks may be smaller.
    pub fn cells(&self, bx: usize, by: usize) -> Rect {
        let (x, y) = (bx * BLOCK, by * BLOCK);
        Rect::new(x as i64, y as i64, BLOCK.min(self.grid_w - x), BLOCK.min(self.grid_h - y))
    }

    /// Builds the proposal for one block.
    pub fn roobi(&self, spec: &NetworkSpec, bx: usize, by: usize, score: f32) -> Result<Roobi> {
        let cells = self.cells(bx, by);
        let rect = receptive_field(spec, cells, self.frame_w, self.frame_h)?;
        let rf = rf_descriptor(spec);
        let origin = |first: i64, last: i64| {
            let (lo, hi) = rf.span(first as usize, last as usize);
            let o = (lo + hi + 1 - self.chip as i64).div_euclid(2);
            o - o.rem_euclid(2)
        };
        let chip = Rect::new(
            origin(cells.x, cells.right() - 1),
            origin(cells.y, cells.bottom() - 1),
            self.chip,
            self.chip,
        );
        Ok(Roobi { block: (bx, by), rect, chip, score })
    }

    /// Every block, regardless of score.
    pub fn all(&self, spec: &NetworkSpec) -> Result<Vec<Roobi>> {
        let mut out = Vec::with_capacity(self.total_blocks());
        for by in 0..self.blocks_y() {
            for bx in 0..self.blocks_x() {
                out.push(self.roobi(spec, bx, by, 0.0)?);
            }
        }
        Ok(out)
    }
}

/// Proposes every block whose maximum score reaches `tau_gate`, in raster
/// order of blocks.
pub fn propose(scores: &Heatmap, spec: &NetworkSpec, grid: &BlockGrid, tau_gate: f64) -> Result<Vec<Roobi>> {
    if !(0.0..=1.0).contains(&tau_gate) {
        return Err(CoreError::Config(format!("gating threshold must lie in [0, 1], got {tau_gate}")));
    }
    if (scores.width, scores.height) != (grid.grid_w, grid.grid_h) {
        return Err(CoreError::Shape(format!(
            "score map {}x{} does not match {}x{} grid",
            scores.width, scores.height, grid.grid_w, grid.grid_h
        )));
    }
    let mut out = Vec::new();
    for by in 0..grid.blocks_y() {
        for bx in 0..grid.blocks_x() {
            let c = grid.cells(bx, by);
            let mut best = f32::NEG_INFINITY;
            for y in c.y as usize..c.bottom() as usize {
                for x in c.x as usize..c.right() as usize {
                    best = best.max(scores.at(x, y));
                }
            }
            if tau_gate == 0.0 || best as f64 >= tau_gate {
                out.push(grid.roobi(spec, bx, by, best)?);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub total_blocks: usize,
    pub proposed: usize,
    pub skipped_fraction: f64,
    /// Fine-network time avoided, from the measured per-chip cost.
    pub est_time_saved_s: f64,
    pub wall_time_s: f64,
}

pub fn speedup_report(proposed: usize, total_blocks: usize, per_chip: Duration, wall: Duration) -> Result<SpeedupReport> {
    if total_blocks == 0 {
        return Err(CoreError::Config("no blocks to gate".into()));
    }
    if proposed > total_blocks {
        return Err(CoreError::Config(format!("{proposed} proposals out of {total_blocks} blocks")));
    }
    let skipped = total_blocks - proposed;
    Ok(SpeedupReport {
        total_blocks,
        proposed,
        skipped_fraction: skipped as f64 / total_blocks as f64,
        est_time_saved_s: per_chip.as_secs_f64() * skipped as f64,
        wall_time_s: wall.as_secs_f64(),
    })
}
