//! Heatmap to point detections: threshold, label, filter, split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::targets::{Heatmap, LabelMap, Point};

pub const OTSU_BINS: usize = 256;

/// Result of Otsu's method on a `[0, 1]` heatmap.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    /// Foreground is every value `>= level`.
    Level(f64),
    /// All values fall into one histogram bin; carries their mean.
    /// Callers treat this as "no detections".
    Uniform(f64),
}

fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * OTSU_BINS as f32) as usize).min(OTSU_BINS - 1)
}

/// Otsu's threshold over a 256-bin histogram of `[0, 1]`. Splitting after
/// bin `k` gives the level `(k + 1) / 256`; ties keep the lowest `k`.
pub fn otsu(values: &[f32]) -> Threshold {
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[bin_of(v)] += 1;
    }
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len() as f64
        };
        return Threshold::Uniform(mean);
    }
    let total = values.len() as f64;
    let center = |k: usize| (k as f64 + 0.5) / OTSU_BINS as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(k, &c)| c as f64 * center(k)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += c as f64;
        sum0 += c as f64 * center(k);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Threshold::Level((best.1 + 1) as f64 / OTSU_BINS as f64)
}

/// Between-class variance (times `n^2`) of splitting `values` at `level`,
/// using bin-center values. Exposed for brute-force checks.
pub fn between_class_variance(values: &[f32], level: f64) -> f64 {
    let center = |v: f32| (bin_of(v) as f64 + 0.5) / OTSU_BINS as f64;
    let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
    for &v in values {
        if (bin_of(v) as f64) < level * OTSU_BINS as f64 - 0.5 {
            n0 += 1.0;
            s0 += center(v);
        } else {
            n1 += 1.0;
            s1 += center(v);
        }
    }
    if n0 == 0.0 || n1 == 0.0 {
        return 0.0;
    }
    n0 * n1 * (s0 / n0 - s1 / n1).powi(2)
}

/// 8-connected blob of foreground pixels (grid coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Raster-ordered `(x, y)` pixels.
    pub pixels: Vec<(usize, usize)>,
    /// Inclusive bounding box `(x0, y0, x1, y1)`.
    pub bbox: (usize, usize, usize, usize),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    pub fn centroid(&self) -> Point {
        let n = self.pixels.len() as f64;
        let (sx, sy) = self.pixels.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| (sx + x as f64, sy + y as f64));
        Point::new(sx / n, sy / n)
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Labels 8-connected foreground components with a two-pass union-find.
/// Components are ordered by their first pixel in raster order.
pub fn components(map: &LabelMap) -> Vec<Component> {
    let (w, h) = (map.width, map.height);
    let mut label = vec![usize::MAX; w * h];
    let mut parent: Vec<usize> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if map.labels[y * w + x] == 0 {
                continue;
            }
            let mut mine = usize::MAX;
            // Already-visited neighbours: W, NW, N, NE.
            let neighbours = [(-1isize, 0isize), (-1, -1), (0, -1), (1, -1)];
            for (dx, dy) in neighbours {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize {
                    continue;
                }
                let l = label[ny as usize * w + nx as usize];
                if l == usize::MAX {
                    continue;
                }
                if mine == usize::MAX {
                    mine = find(&mut parent, l);
                } else {
                    let (a, b) = (find(&mut parent, mine), find(&mut parent, l));
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi] = lo;
                    mine = lo;
                }
            }
            if mine == usize::MAX {
                mine = parent.len();
                parent.push(mine);
            }
            label[y * w + x] = mine;
        }
    }
    let mut slot = vec![usize::MAX; parent.len()];
    let mut out: Vec<Component> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = label[y * w + x];
            if l == usize::MAX {
                continue;
            }
            let root = find(&mut parent, l);
            if slot[root] == usize::MAX {
                slot[root] = out.len();
                out.push(Component { pixels: Vec::new(), bbox: (x, y, x, y) });
            }
            let c = &mut out[slot[root]];
            c.pixels.push((x, y));
            c.bbox = (c.bbox.0.min(x), c.bbox.1.min(y), c.bbox.2.max(x), c.bbox.3.max(y));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Input-pixel coordinates.
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Detection {
    pub fn point(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ThresholdMode {
    Otsu,
    Fixed(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub threshold: ThresholdMode,
    /// Input-pixel area below which components are dropped.
    pub min_area: f64,
    /// Input-pixel area above which components are split.
    pub max_area: f64,
    pub split: bool,
    /// Detections closer than this (input pixels) are merged, keeping the stronger.
    pub merge_radius: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig { threshold: ThresholdMode::Otsu, min_area: 100.0, max_area: 900.0, split: true, merge_radius: 5.0 }
    }
}

/// Turns components of `heatmap` into detections in input coordinates.
///
/// Areas are compared at input scale (heatmap area times `4^d`). Oversized
/// components are split by greedily placing non-overlapping discs at the
/// strongest remaining responses; the disc radius comes from the median
/// in-range component area.
pub fn extract_detections(comps: &[Component], heatmap: &Heatmap, cfg: &PostprocessConfig) -> Vec<Detection> {
    let scale = heatmap.scale();
    let px_area = scale * scale;
    let mut normal: Vec<f64> = comps
        .iter()
        .map(|c| c.area() as f64 * px_area)
        .filter(|&a| a >= cfg.min_area && a <= cfg.max_area)
        .collect();
    normal.sort_by(f64::total_cmp);
    let typical = if normal.is_empty() { 0.5 * (cfg.min_area + cfg.max_area) } else { normal[normal.len() / 2] };
    let radius = (typical / std::f64::consts::PI).sqrt() / scale;

    let mut out = Vec::new();
    for c in comps {
        let area = c.area() as f64 * px_area;
        if area < cfg.min_area {
            continue;
        }
        if area > cfg.max_area && cfg.split {
            out.extend(split_component(c, heatmap, radius, cfg.min_area / px_area));
            continue;
        }
        let p = c.centroid();
        let score = c.pixels.iter().map(|&(x, y)| heatmap.at(x, y)).fold(f32::MIN, f32::max);
        out.push(Detection { x: p.x * scale, y: p.y * scale, score: f64::from(score) });
    }
    out
}

/// Greedy disc placement inside one component (all sizes in grid units).
fn split_component(c: &Component, heatmap: &Heatmap, radius: f64, min_residual: f64) -> Vec<Detection> {
    let scale = heatmap.scale();
    let mut covered = vec![false; c.pixels.len()];
    let mut centers: Vec<(f64, f64)> = Vec::new();
    let mut out = Vec::new();
    let r2 = radius * radius;
    loop {
        let residual = covered.iter().filter(|&&v| !v).count() as f64;
        if residual < min_residual {
            break;
        }
        // Strongest uncovered pixel at least one diameter from every disc.
        let pick = c
            .pixels
            .iter()
            .enumerate()
            .filter(|&(i, &(x, y))| {
                !covered[i]
                    && centers.iter().all(|&(cx, cy)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) >= 4.0 * r2)
            })
            .fold(None::<(usize, f32)>, |best, (i, &(x, y))| {
                let v = heatmap.at(x, y);
                match best {
                    Some((_, bv)) if bv >= v => best,
                    _ => Some((i, v)),
                }
            });
        let Some((i, score)) = pick else { break };
        let (cx, cy) = (c.pixels[i].0 as f64, c.pixels[i].1 as f64);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (j, &(x, y)) in c.pixels.iter().enumerate() {
            if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r2 {
                covered[j] = true;
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
        centers.push((cx, cy));
        out.push(Detection { x: sx / n * scale, y: sy / n * scale, score: f64::from(score) });
    }
    out
}

/// Keeps the strongest detection of every group closer than `radius`
/// (stable: equal scores keep the earlier detection).
pub fn merge_nearby(dets: &[Detection], radius: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| dets[k].point().dist(&dets[i].point()) >= radius) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| dets[i]).collect()
}

/// Full chain on a `[0, 1]` score map.
pub fn detect(scores: &Heatmap, cfg: &PostprocessConfig) -> Vec<Detection> {
    let level = match cfg.threshold {
        ThresholdMode::Fixed(t) => t,
        ThresholdMode::Otsu => match otsu(&scores.values) {
            Threshold::Level(t) => t,
            Threshold::Uniform(_) => return Vec::new(),
        },
    };
    let t = level as f32;
    let map = LabelMap {
        width: scores.width,
        height: scores.height,
        labels: scores.values.iter().map(|&v| u8::from(v >= t && v > 0.0)).collect(),
    };
    let dets = extract_detections(&components(&map), scores, cfg);
    if cfg.merge_radius > 0.0 {
        merge_nearby(&dets, cfg.merge_radius)
    } else {
        dets
    }
}

pub fn write_detections_csv(rows: &[(usize, Detection)], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("frame_id,x,y,score\n");
    for (frame, d) in rows {
        writeln!(s, "{frame},{:.3},{:.3},{:.6}", d.x, d.y, d.score).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_detections_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, Detection)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |msg: String| CoreError::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            let frame = f[0].parse::<usize>().map_err(|e| err(format!("{:?}: {e}", f[0])))?;
            Ok((frame, Detection { x: num(f[1])?, y: num(f[2])?, score: num(f[3])? }))
        })
        .collect()
}
