//! Deterministic synthetic aerial scenes with moving and stopped vehicles.
//!
//! A scene is a short registered sequence over a textured background with
//! an axis-aligned road grid. Vehicles are soft rectangles driving along
//! lanes (or parked in them); distractors include whole-frame gain jumps,
//! sub-pixel residual misregistration, drifting mosaic seams and slowly
//! translating elongated blobs standing in for tall-structure parallax.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use wami_engine::{Shape, Tensor};

use crate::error::{CoreError, Result};
use crate::frame::{FrameStack, GrayFrame};
use crate::models::{Dataset, Example, Target};
use crate::targets::{make_heatmap, make_segmentation, Annotation, Point, PointAnnotations};

/// Frames spanned by the motion filter.
pub const MOVING_WINDOW: usize = 5;
/// Minimum displacement (input pixels) across the window to count as moving.
pub const MOVING_MIN_DISPLACEMENT: f64 = 15.0;

const PLACEMENT_ATTEMPTS: usize = 400;
const VEHICLE_GAP: f64 = 3.0;
const JITTER_MARGIN: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Stack length the scene is meant to be consumed with.
    pub stack_frames: usize,
    pub vehicles: usize,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    /// Relative standard deviation of vehicle dimensions.
    pub size_jitter: f64,
    /// Moving-vehicle speed range in pixels per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub stopped_fraction: f64,
    /// Fraction of vehicles whose intensity nearly matches the road.
    pub camouflage_fraction: f64,
    pub roads_h: usize,
    pub roads_v: usize,
    pub road_width: f64,
    /// Maximum relative change of a gain jump.
    pub gain_jump: f64,
    /// Per-frame probability of a gain jump.
    pub gain_jump_prob: f64,
    pub jitter_sigma: f64,
    pub seams: usize,
    pub parallax: usize,
    pub noise_sigma: f64,
    /// Off-road formations of moving vehicles.
    pub platoons: usize,
    pub platoon_rows: usize,
    pub platoon_cols: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 1024,
            height: 1024,
            frames: 5,
            stack_frames: 5,
            vehicles: 40,
            vehicle_length: 18.0,
            vehicle_width: 9.0,
            size_jitter: 0.08,
            speed_min: 10.0,
            speed_max: 25.0,
            stopped_fraction: 0.3,
            camouflage_fraction: 0.05,
            roads_h: 3,
            roads_v: 3,
            road_width: 32.0,
            gain_jump: 0.15,
            gain_jump_prob: 0.3,
            jitter_sigma: 0.5,
            seams: 2,
            parallax: 8,
            noise_sigma: 0.02,
            platoons: 0,
            platoon_rows: 3,
            platoon_cols: 3,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.width < 128 || self.height < 128 {
            return bad("frame dims must be at least 128x128");
        }
        if self.frames == 0 || self.stack_frames == 0 || self.stack_frames % 2 == 0 {
            return bad("frames must be >= 1 and stack_frames odd");
        }
        if !(0.0..=1.0).contains(&self.stopped_fraction) || !(0.0..=1.0).contains(&self.camouflage_fraction) {
            return bad("fractions must lie in [0, 1]");
        }
        if self.speed_min < 0.0 || self.speed_max < self.speed_min {
            return bad("speed range must satisfy 0 <= min <= max");
        }
        if self.vehicle_length <= 0.0 || self.vehicle_width <= 0.0 || self.road_width <= 0.0 {
            return bad("vehicle and road sizes must be positive");
        }
        if self.vehicles > 0 && self.roads_h + self.roads_v == 0 {
            return bad("vehicles need at least one road");
        }
        Ok(())
    }

    /// Index of the frame whose stack is fully inside the sequence and
    /// closest to the middle.
    pub fn center_frame(&self) -> usize {
        (self.frames - 1) / 2
    }
}

/// Constant-velocity vehicle. Positions are in registered coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrack {
    pub id: usize,
    /// Center at frame 0.
    pub start: Point,
    /// Pixels per frame.
    pub vx: f64,
    pub vy: f64,
    /// Extent along the direction of travel.
    pub length: f64,
    pub width: f64,
    pub horizontal: bool,
    pub intensity: f32,
}

impl VehicleTrack {
    pub fn position(&self, t: usize) -> Point {
        Point::new(self.start.x + self.vx * t as f64, self.start.y + self.vy * t as f64)
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    /// Displacement across a full motion-filter window.
    pub fn window_displacement(&self) -> f64 {
        self.speed() * (MOVING_WINDOW - 1) as f64
    }

    pub fn is_moving(&self) -> bool {
        self.window_displacement() >= MOVING_MIN_DISPLACEMENT
    }

    fn half_extents(&self) -> (f64, f64) {
        if self.horizontal {
            (self.length / 2.0, self.width / 2.0)
        } else {
            (self.width / 2.0, self.length / 2.0)
        }
    }

    fn conflicts(&self, other: &VehicleTrack, frames: usize) -> bool {
        let (ax, ay) = self.half_extents();
        let (bx, by) = other.half_extents();
        (0..frames).any(|t| {
            let (p, q) = (self.position(t), other.position(t));
            (p.x - q.x).abs() < ax + bx + VEHICLE_GAP && (p.y - q.y).abs() < ay + by + VEHICLE_GAP
        })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub frames: Vec<GrayFrame>,
    /// Every in-frame vehicle per frame, flagged moving or not.
    pub annotations: PointAnnotations,
    pub tracks: Vec<VehicleTrack>,
    /// Per-frame residual misregistration (pixels).
    pub jitter: Vec<(f64, f64)>,
    /// 1 on road pixels.
    pub road_mask: Vec<u8>,
}

impl SyntheticScene {
    pub fn stack(&self, center: usize, n: usize) -> Result<FrameStack> {
        FrameStack::from_sequence(&self.frames, center, n)
    }

    /// Ground-truth points of a frame, optionally restricted to moving vehicles.
    pub fn points(&self, frame_id: usize, moving_only: bool) -> Vec<Point> {
        self.annotations.points(frame_id, moving_only)
    }
}

struct Road {
    horizontal: bool,
    /// Center line coordinate (y for horizontal roads, x for vertical).
    at: f64,
    intensity: f32,
}

/// Renders a scene. Identical configs produce identical scenes.
pub fn generate(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);

    let roads = layout_roads(cfg, &mut rng);
    let (base, road_mask) = render_background(cfg, &roads, &mut rng);
    let tracks = place_vehicles(cfg, &roads, &mut rng)?;
    let parallax = place_parallax(cfg, &mut rng);
    let seams = place_seams(cfg, &mut rng);

    let jitter_dist = Normal::new(0.0, cfg.jitter_sigma.max(0.0)).expect("finite sigma");
    let jitter: Vec<(f64, f64)> = (0..cfg.frames)
        .map(|_| {
            let j = (jitter_dist.sample(&mut rng), jitter_dist.sample(&mut rng));
            let lim = JITTER_MARGIN as f64 - 1.0;
            (j.0.clamp(-lim, lim), j.1.clamp(-lim, lim))
        })
        .collect();
    let gains: Vec<f32> = (0..cfg.frames)
        .map(|_| {
            if rng.random::<f64>() < cfg.gain_jump_prob {
                (1.0 + rng.random_range(-1.0..=1.0) * cfg.gain_jump) as f32
            } else {
                1.0
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut items = Vec::new();
    for t in 0..cfg.frames {
        let (jx, jy) = jitter[t];
        let mut buf = shift_bilinear(&base, w, h, jx, jy);
        for blob in &parallax {
            blob.paint(&mut buf, w, h, t, (jx, jy));
        }
        for v in &tracks {
            let p = v.position(t);
            let (cx, cy) = (p.x + jx, p.y + jy);
            if !(0.0..w as f64).contains(&cx) || !(0.0..h as f64).contains(&cy) {
                continue;
            }
            let (hx, hy) = v.half_extents();
            paint_rect(&mut buf, w, h, cx, cy, hx, hy, v.intensity);
            items.push(Annotation { frame_id: t, x: cx, y: cy, object_id: v.id, is_moving: v.is_moving() });
        }
        for seam in &seams {
            seam.apply(&mut buf, w, h, t);
        }
        let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64 + 1)));
        let noise = Normal::new(0.0f32, cfg.noise_sigma.max(0.0) as f32).expect("finite sigma");
        let gain = gains[t];
        for v in &mut buf {
            *v = *v * gain + noise.sample(&mut noise_rng);
        }
        frames.push(GrayFrame::from_unit(w, h, &buf));
    }

    Ok(SyntheticScene {
        config: cfg.clone(),
        frames,
        annotations: PointAnnotations { width: w, height: h, items },
        tracks,
        jitter,
        road_mask,
    })
}

fn layout_roads(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Road> {
    let mut roads = Vec::new();
    for (count, extent, horizontal) in [(cfg.roads_h, cfg.height, true), (cfg.roads_v, cfg.width, false)] {
        let stratum = extent as f64 / count.max(1) as f64;
        for i in 0..count {
            let at = stratum * (i as f64 + rng.random_range(0.2..0.8));
            roads.push(Road { horizontal, at, intensity: rng.random_range(0.36..0.46) });
        }
    }
    roads
}

/// Static scene (texture plus roads) with a margin for sub-pixel shifting.
fn render_background(cfg: &SceneConfig, roads: &[Road], rng: &mut ChaCha8Rng) -> (Vec<f32>, Vec<u8>) {
    let m = JITTER_MARGIN;
    let (bw, bh) = (cfg.width + 2 * m, cfg.height + 2 * m);
    let mut base = vec![0.55f32; bw * bh];
    for (cell, amp) in [(96usize, 0.08f32), (24, 0.04), (6, 0.02)] {
        add_value_noise(&mut base, bw, bh, cell, amp, rng);
    }
    let mut mask = vec![0u8; cfg.width * cfg.height];
    let half = cfg.road_width / 2.0;
    for road in roads {
        for y in 0..bh {
            for x in 0..bw {
                // Base pixel (x, y) sits at frame coordinate (x - m, y - m).
                let (along, across) = if road.horizontal {
                    (x as f64 - m as f64, y as f64 - m as f64 - road.at)
                } else {
                    (y as f64 - m as f64, x as f64 - m as f64 - road.at)
                };
                let cov = (half - across.abs() + 0.5).clamp(0.0, 1.0) as f32;
                if cov == 0.0 {
                    continue;
                }
                let mut v = road.intensity;
                // Dashed center line.
                if across.abs() < 1.0 && along.rem_euclid(24.0) < 12.0 {
                    v += 0.18;
                }
                let p = &mut base[y * bw + x];
                *p = *p * (1.0 - cov) + v * cov;
                let (fx, fy) = (x as isize - m as isize, y as isize - m as isize);
                if cov >= 0.5 && fx >= 0 && fy >= 0 && (fx as usize) < cfg.width && (fy as usize) < cfg.height {
                    mask[fy as usize * cfg.width + fx as usize] = 1;
                }
            }
        }
    }
    (base, mask)
}

fn add_value_noise(buf: &mut [f32], w: usize, h: usize, cell: usize, amp: f32, rng: &mut ChaCha8Rng) {
    let (gw, gh) = (w / cell + 2, h / cell + 2);
    let grid: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    for y in 0..h {
        let fy = y as f32 / cell as f32;
        let (gy, ty) = (fy as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f32 / cell as f32;
            let (gx, tx) = (fx as usize, smooth(fx.fract()));
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(gx, gy) * (1.0 - tx) + g(gx + 1, gy) * tx;
            let bot = g(gx, gy + 1) * (1.0 - tx) + g(gx + 1, gy + 1) * tx;
            buf[y * w + x] += amp * (top * (1.0 - ty) + bot * ty);
        }
    }
}

/// Samples the margin-padded base so that content appears shifted by `(dx, dy)`.
fn shift_bilinear(base: &[f32], w: usize, h: usize, dx: f64, dy: f64) -> Vec<f32> {
    let m = JITTER_MARGIN as f64;
    let bw = w + 2 * JITTER_MARGIN;
    let (sx, sy) = (m - dx, m - dy);
    let (ix, iy) = (sx.floor() as usize, sy.floor() as usize);
    let (fx, fy) = ((sx - sx.floor()) as f32, (sy - sy.floor()) as f32);
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        let r0 = &base[(y + iy) * bw..];
        let r1 = &base[(y + iy + 1) * bw..];
        for x in 0..w {
            let top = r0[x + ix] * (1.0 - fx) + r0[x + ix + 1] * fx;
            let bot = r1[x + ix] * (1.0 - fx) + r1[x + ix + 1] * fx;
            out[y * w + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Anti-aliased axis-aligned rectangle blended over `buf`.
#[allow(clippy::too_many_arguments)]
fn paint_rect(buf: &mut [f32], w: usize, h: usize, cx: f64, cy: f64, hx: f64, hy: f64, v: f32) {
    let x0 = (cx - hx - 1.0).floor().max(0.0) as usize;
    let x1 = ((cx + hx + 1.0).ceil() as usize).min(w - 1);
    let y0 = (cy - hy - 1.0).floor().max(0.0) as usize;
    let y1 = ((cy + hy + 1.0).ceil() as usize).min(h - 1);
    for y in y0..=y1 {
        let cov_y = (hy - (y as f64 - cy).abs() + 0.5).clamp(0.0, 1.0);
        if cov_y == 0.0 {
            continue;
        }
        for x in x0..=x1 {
            let cov = ((hx - (x as f64 - cx).abs() + 0.5).clamp(0.0, 1.0) * cov_y) as f32;
            let p = &mut buf[y * w + x];
            *p = *p * (1.0 - cov) + v * cov;
        }
    }
}

/// Coverage mask (`>= 0.5`) of one vehicle at frame `t`, without jitter.
pub fn vehicle_mask(track: &VehicleTrack, t: usize, w: usize, h: usize) -> Vec<u8> {
    let mut buf = vec![0.0f32; w * h];
    let p = track.position(t);
    let (hx, hy) = track.half_extents();
    paint_rect(&mut buf, w, h, p.x, p.y, hx, hy, 1.0);
    buf.iter().map(|&c| u8::from(c >= 0.5)).collect()
}

fn vehicle_intensity(cfg: &SceneConfig, road: f32, rng: &mut ChaCha8Rng) -> f32 {
    if rng.random::<f64>() < cfg.camouflage_fraction {
        return (road + rng.random_range(-0.06f32..=0.06)).clamp(0.0, 1.0);
    }
    loop {
        let v = rng.random_range(0.03f32..=0.97);
        if (v - road).abs() >= 0.15 {
            return v;
        }
    }
}

fn place_vehicles(cfg: &SceneConfig, roads: &[Road], rng: &mut ChaCha8Rng) -> Result<Vec<VehicleTrack>> {
    let mut tracks: Vec<VehicleTrack> = Vec::new();
    let size = |rng: &mut ChaCha8Rng, mean: f64| {
        let d = Normal::new(mean, mean * cfg.size_jitter).expect("finite");
        d.sample(rng).clamp(mean * 0.7, mean * 1.3)
    };
    let tc = cfg.center_frame() as f64;
    let lane = cfg.road_width / 4.0;

    for id in 0..cfg.vehicles {
        let stopped = rng.random::<f64>() < cfg.stopped_fraction;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let road = &roads[rng.random_range(0..roads.len())];
            let side: f64 = if rng.random::<bool>() { 1.0 } else { -1.0 };
            // Right-hand traffic: the +side lane drives in the negative direction.
            let speed = if stopped { 0.0 } else { rng.random_range(cfg.speed_min..=cfg.speed_max) * -side };
            let extent = if road.horizontal { cfg.width } else { cfg.height } as f64;
            let along = rng.random_range(0.0..extent);
            let across = road.at + side * lane;
            let (length, width) = (size(rng, cfg.vehicle_length), size(rng, cfg.vehicle_width));
            let intensity = vehicle_intensity(cfg, road.intensity, rng);
            let (cx, cy, vx, vy) = if road.horizontal { (along, across, speed, 0.0) } else { (across, along, 0.0, speed) };
            let track = VehicleTrack {
                id,
                start: Point::new(cx - vx * tc, cy - vy * tc),
                vx,
                vy,
                length,
                width,
                horizontal: road.horizontal,
                intensity,
            };
            if tracks.iter().all(|o| !o.conflicts(&track, cfg.frames)) {
                tracks.push(track);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CoreError::Placement { wanted: cfg.vehicles, placed: tracks.len() });
        }
    }

    for _ in 0..cfg.platoons {
        let rows = cfg.platoon_rows.max(1);
        let cols = cfg.platoon_cols.max(1);
        let pitch_x = cfg.vehicle_length + 8.0;
        let pitch_y = cfg.vehicle_width + 8.0;
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let speed = rng.random_range(cfg.speed_min.max(4.0)..=cfg.speed_max.max(4.0));
            let x0 = rng.random_range(0.2..0.8) * cfg.width as f64;
            let y0 = rng.random_range(0.2..0.8) * cfg.height as f64;
            let base_id = tracks.len().max(cfg.vehicles);
            let members: Vec<VehicleTrack> = (0..rows * cols)
                .map(|k| {
                    let (r, c) = (k / cols, k % cols);
                    let cx = x0 + c as f64 * pitch_x;
                    let cy = y0 + r as f64 * pitch_y;
                    VehicleTrack {
                        id: base_id + k,
                        start: Point::new(cx - speed * tc, cy),
                        vx: speed,
                        vy: 0.0,
                        length: cfg.vehicle_length,
                        width: cfg.vehicle_width,
                        horizontal: true,
                        intensity: if (r + c) % 2 == 0 { 0.1 } else { 0.92 },
                    }
                })
                .collect();
            if members.iter().all(|m| tracks.iter().all(|o| !o.conflicts(m, cfg.frames))) {
                tracks.extend(members);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(CoreError::Placement { wanted: cfg.vehicles + cfg.platoons * rows * cols, placed: tracks.len() });
        }
    }
    Ok(tracks)
}

/// Elongated blob drifting slowly and against the frame jitter.
struct ParallaxBlob {
    start: Point,
    drift: (f64, f64),
    angle: f64,
    major: f64,
    minor: f64,
    amp: f32,
}

impl ParallaxBlob {
    fn paint(&self, buf: &mut [f32], w: usize, h: usize, t: usize, jitter: (f64, f64)) {
        let cx = self.start.x + self.drift.0 * t as f64 - jitter.0;
        let cy = self.start.y + self.drift.1 * t as f64 - jitter.1;
        let reach = 3.0 * self.major;
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(w);
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
                let g = (-0.5 * ((u / self.major).powi(2) + (v / self.minor).powi(2))).exp() as f32;
                buf[y * w + x] += self.amp * g;
            }
        }
    }
}

fn place_parallax(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<ParallaxBlob> {
    (0..cfg.parallax)
        .map(|_| {
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.8..3.2);
            ParallaxBlob {
                start: Point::new(rng.random_range(0.0..cfg.width as f64), rng.random_range(0.0..cfg.height as f64)),
                drift: (speed * dir.cos(), speed * dir.sin()),
                angle: rng.random_range(0.0..std::f64::consts::PI),
                major: rng.random_range(8.0..16.0),
                minor: rng.random_range(2.5..5.0),
                amp: rng.random_range(0.15f32..0.35) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            }
        })
        .collect()
}

/// Intensity step on one side of a drifting straight line.
struct Seam {
    vertical: bool,
    start: f64,
    drift: f64,
    steps: Vec<f32>,
}

impl Seam {
    fn apply(&self, buf: &mut [f32], w: usize, h: usize, t: usize) {
        let at = self.start + self.drift * t as f64;
        let step = self.steps[t];
        for y in 0..h {
            for x in 0..w {
                let c = if self.vertical { x } else { y } as f64;
                if c >= at {
                    buf[y * w + x] += step;
                }
            }
        }
    }
}

fn place_seams(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Seam> {
    (0..cfg.seams)
        .map(|_| {
            let vertical = rng.random::<bool>();
            let extent = if vertical { cfg.width } else { cfg.height } as f64;
            Seam {
                vertical,
                start: rng.random_range(0.15..0.85) * extent,
                drift: rng.random_range(-12.0..12.0),
                steps: (0..cfg.frames).map(|_| rng.random_range(-0.05f32..0.05)).collect(),
            }
        })
        .collect()
}

/// Recomputes `is_moving` from annotated positions: an object is moving in a
/// frame if its displacement across the surrounding `window`-frame span
/// (shifted to stay inside the frames where it is annotated) reaches `min_disp`.
pub fn mark_moving(ann: &mut PointAnnotations, window: usize, min_disp: f64) {
    let mut by_object: BTreeMap<usize, BTreeMap<usize, Point>> = BTreeMap::new();
    for a in &ann.items {
        by_object.entry(a.object_id).or_default().insert(a.frame_id, a.point());
    }
    for a in &mut ann.items {
        let track = &by_object[&a.object_id];
        let frames: Vec<usize> = track.keys().copied().collect();
        let pos = frames.binary_search(&a.frame_id).expect("frame is in its own track");
        let span = window.min(frames.len());
        let start = pos.saturating_sub(span / 2).min(frames.len() - span);
        let (first, last) = (track[&frames[start]], track[&frames[start + span - 1]]);
        a.is_moving = span > 1 && first.dist(&last) >= min_disp;
    }
}

pub fn write_annotations_csv(ann: &PointAnnotations, path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("frame_id,x,y,object_id,is_moving\n");
    for a in &ann.items {
        writeln!(s, "{},{:.3},{:.3},{},{}", a.frame_id, a.x, a.y, a.object_id, u8::from(a.is_moving)).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_annotations_csv(path: impl AsRef<Path>, width: usize, height: usize) -> Result<PointAnnotations> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| CoreError::Parse { path: path.to_path_buf(), line: i + 1, msg };
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| err(format!("{s:?}: {e}")));
        items.push(Annotation {
            frame_id: int(f[0])?,
            x: num(f[1])?,
            y: num(f[2])?,
            object_id: int(f[3])?,
            is_moving: matches!(f[4], "1" | "true"),
        });
    }
    Ok(PointAnnotations { width, height, items })
}

pub fn frame_file_name(frame_id: usize) -> String {
    format!("frame_{frame_id:05}.png")
}

/// Writes frames, `annotations.csv` and `scene.json` into `dir`.
pub fn write_scene(scene: &SyntheticScene, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (i, f) in scene.frames.iter().enumerate() {
        f.save_png(dir.join(frame_file_name(i)))?;
    }
    write_annotations_csv(&scene.annotations, dir.join("annotations.csv"))?;
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&scene.config)?)?;
    Ok(())
}

/// Loads `frame_%05d.png` files in index order.
pub fn read_frames(dir: impl AsRef<Path>) -> Result<Vec<GrayFrame>> {
    let dir = dir.as_ref();
    let mut frames = Vec::new();
    while dir.join(frame_file_name(frames.len())).exists() {
        frames.push(GrayFrame::load_png(dir.join(frame_file_name(frames.len())))?);
    }
    if frames.is_empty() {
        return Err(CoreError::Config(format!("no frame_00000.png in {}", dir.display())));
    }
    Ok(frames)
}

/// Loads a directory written by `write_scene`. Tracks and render details
/// are not stored, so only frames, annotations and the config come back.
pub fn read_scene(dir: impl AsRef<Path>) -> Result<SyntheticScene> {
    let dir = dir.as_ref();
    let frames = read_frames(dir)?;
    let (width, height) = (frames[0].width, frames[0].height);
    let config_path = dir.join("scene.json");
    let config = if config_path.exists() {
        serde_json::from_str(&fs::read_to_string(config_path)?)?
    } else {
        SceneConfig { width, height, frames: frames.len(), ..SceneConfig::default() }
    };
    if (config.width, config.height, config.frames) != (width, height, frames.len()) {
        return Err(CoreError::Shape(format!("{}: scene.json does not match the frames on disk", dir.display())));
    }
    let annotations = read_annotations_csv(dir.join("annotations.csv"), width, height)?;
    let jitter = vec![(0.0, 0.0); frames.len()];
    Ok(SyntheticScene { config, frames, annotations, tracks: Vec::new(), jitter, road_mask: Vec::new() })
}

/// Training-target flavour for a chip set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TargetKind {
    Heatmap,
    /// Labels where the heatmap reaches `threshold`.
    Segmentation { threshold: f64 },
}

/// How scenes are cut into training examples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipSpec {
    pub size: usize,
    pub stride: usize,
    /// Stack length `N`.
    pub frames: usize,
    /// Target grid downsample exponent.
    pub downsample: u32,
    /// Target Gaussian width in grid cells.
    pub sigma: f64,
    pub target: TargetKind,
    /// Build targets from moving vehicles only.
    pub moving_only: bool,
    /// Share of vehicle-free chips kept as negatives, spread evenly in
    /// raster order.
    #[serde(default)]
    pub empty_fraction: f64,
}

/// One chip of one stack; `points` are chip-local target centers.
#[derive(Clone, Debug)]
pub struct ChipRef {
    pub stack: usize,
    pub x0: usize,
    pub y0: usize,
    pub points: Vec<Point>,
}

/// Chip origins covering a `w x h` frame with the given size and stride;
/// the last row and column are aligned to the frame edge.
pub fn chip_origins(w: usize, h: usize, size: usize, stride: usize) -> Vec<(usize, usize)> {
    let axis = |extent: usize| {
        let mut v: Vec<usize> = (0..=extent.saturating_sub(size)).step_by(stride.max(1)).collect();
        if let Some(&last) = v.last() {
            if last + size < extent {
                v.push(extent - size);
            }
        }
        v
    };
    let xs = axis(w);
    axis(h).into_iter().flat_map(|y| xs.iter().map(move |&x| (x, y))).collect()
}

/// Chips of the center-frame stack of `scene`. Chips containing no vehicle
/// center at all (moving or stopped) are dropped, except for the
/// `empty_fraction` share kept as negatives.
pub fn chips(scene: &SyntheticScene, spec: &ChipSpec) -> Vec<ChipRef> {
    let center = scene.config.center_frame();
    let all = scene.points(center, false);
    let targets = scene.points(center, spec.moving_only);
    let (w, h) = (scene.config.width, scene.config.height);
    let s = spec.size as f64;
    let keep_empty = spec.empty_fraction.clamp(0.0, 1.0);
    let mut empties = 0usize;
    chip_origins(w, h, spec.size, spec.stride)
        .into_iter()
        .filter(|&(x0, y0)| {
            if all.iter().any(|p| (x0 as f64..x0 as f64 + s).contains(&p.x) && (y0 as f64..y0 as f64 + s).contains(&p.y)) {
                return true;
            }
            empties += 1;
            (empties as f64 * keep_empty).floor() > ((empties - 1) as f64 * keep_empty).floor()
        })
        .map(|(x0, y0)| ChipRef {
            stack: 0,
            x0,
            y0,
            points: targets.iter().map(|p| Point::new(p.x - x0 as f64, p.y - y0 as f64)).collect(),
        })
        .collect()
}

/// Chips cut from a set of scenes, materialized one example at a time.
pub struct ChipSet {
    pub spec: ChipSpec,
    stacks: Vec<FrameStack>,
    pub chips: Vec<ChipRef>,
}

impl ChipSet {
    pub fn from_scenes(scenes: &[SyntheticScene], spec: ChipSpec) -> Result<Self> {
        let mut stacks = Vec::new();
        let mut all = Vec::new();
        for scene in scenes {
            let idx = stacks.len();
            stacks.push(scene.stack(scene.config.center_frame(), spec.frames)?);
            all.extend(chips(scene, &spec).into_iter().map(|c| ChipRef { stack: idx, ..c }));
        }
        Ok(ChipSet { spec, stacks, chips: all })
    }

}

impl Dataset for ChipSet {
    fn len(&self) -> usize {
        self.chips.len()
    }

    fn variants(&self) -> u8 {
        8
    }

    /// Chip `index` under one of the 8 square symmetries (`variant` 0 is
    /// the identity; bit 0 flips x, bit 1 flips y, bit 2 transposes).
    fn example(&self, index: usize, variant: u8) -> Example {
        let chip = &self.chips[index];
        let n = self.spec.size;
        let raw = self.stacks[chip.stack].crop(chip.x0 as isize, chip.y0 as isize, n, n);
        let input = if variant == 0 { raw } else { transform_planes(&raw, variant) };
        let last = (n - 1) as f64;
        let points: Vec<Point> = chip
            .points
            .iter()
            .map(|p| {
                let (mut x, mut y) = (p.x, p.y);
                if variant & 4 != 0 {
                    std::mem::swap(&mut x, &mut y);
                }
                if variant & 1 != 0 {
                    x = last - x;
                }
                if variant & 2 != 0 {
                    y = last - y;
                }
                Point::new(x, y)
            })
            .collect();
        let heat = make_heatmap(&points, n, n, self.spec.downsample, self.spec.sigma);
        let target = match self.spec.target {
            TargetKind::Heatmap => {
                let shape = Shape::new(1, 1, heat.height, heat.width);
                Target::Heatmap(Tensor::from_vec(shape, heat.values).expect("grid matches shape"))
            }
            TargetKind::Segmentation { threshold } => Target::Labels(make_segmentation(&heat, threshold).labels),
        };
        Example { input, target }
    }
}

fn transform_planes(t: &Tensor<f32>, variant: u8) -> Tensor<f32> {
    let s = t.shape();
    let n = s.w;
    debug_assert_eq!(s.h, s.w);
    Tensor::from_fn(s, |b, c, y, x| {
        let (mut sx, mut sy) = (x, y);
        if variant & 1 != 0 {
            sx = n - 1 - sx;
        }
        if variant & 2 != 0 {
            sy = n - 1 - sy;
        }
        if variant & 4 != 0 {
            std::mem::swap(&mut sx, &mut sy);
        }
        t.at(b, c, sy, sx)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SceneConfig {
        SceneConfig { width: 256, height: 256, vehicles: 10, roads_h: 2, roads_v: 2, seed: 3, ..Default::default() }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.annotations, b.annotations);
        let c = generate(&SceneConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn all_stopped_means_no_moving_truth() {
        let s = generate(&SceneConfig { stopped_fraction: 1.0, ..small() }).unwrap();
        assert!(!s.annotations.items.is_empty());
        for t in 0..s.config.frames {
            assert!(s.points(t, true).is_empty());
        }
    }

    #[test]
    fn too_many_vehicles_is_an_error() {
        let cfg = SceneConfig { vehicles: 2000, roads_h: 1, roads_v: 0, ..small() };
        assert!(matches!(generate(&cfg), Err(CoreError::Placement { .. })));
    }

    #[test]
    fn vehicle_footprint_near_nominal() {
        let s = generate(&SceneConfig { size_jitter: 0.05, ..small() }).unwrap();
        let areas: Vec<usize> = s
            .tracks
            .iter()
            .map(|v| vehicle_mask(v, 0, 400, 400).iter().filter(|&&m| m == 1).count())
            .filter(|&a| a > 0)
            .collect();
        let mean = areas.iter().sum::<usize>() as f64 / areas.len() as f64;
        assert!((mean / 162.0 - 1.0).abs() < 0.2, "mean footprint {mean}");
    }

    #[test]
    fn moving_filter_matches_speeds() {
        let cfg = SceneConfig { speed_min: 0.0, speed_max: 8.0, stopped_fraction: 0.0, jitter_sigma: 0.0, ..small() };
        let s = generate(&cfg).unwrap();
        let mut recomputed = s.annotations.clone();
        mark_moving(&mut recomputed, MOVING_WINDOW, MOVING_MIN_DISPLACEMENT);
        for (a, b) in s.annotations.items.iter().zip(&recomputed.items) {
            let track = &s.tracks[a.object_id];
            assert_eq!(a.is_moving, track.speed() * 4.0 >= 15.0);
            // Vehicles that leave the frame have shorter annotated spans.
            let visible = (0..cfg.frames).all(|t| {
                let p = track.position(t);
                p.x >= 0.0 && p.x < 256.0 && p.y >= 0.0 && p.y < 256.0
            });
            if visible {
                assert_eq!(a.is_moving, b.is_moving, "object {}", a.object_id);
            }
        }
    }

    #[test]
    fn annotations_sit_on_rendered_vehicles() {
        let cfg = SceneConfig { noise_sigma: 0.0, gain_jump_prob: 0.0, seams: 0, parallax: 0, camouflage_fraction: 0.0, ..small() };
        let s = generate(&cfg).unwrap();
        for a in s.annotations.frame(2) {
            let v = &s.tracks[a.object_id];
            let px = s.frames[2].at(a.x.round() as usize, a.y.round() as usize);
            assert!((f32::from(px) / 255.0 - v.intensity).abs() < 0.02);
        }
        let ids: Vec<usize> = s.annotations.frame(2).map(|a| a.object_id).collect();
        let mut dedup = ids.clone();
        dedup.dedup();
        assert_eq!(ids, dedup);
    }

    #[test]
    fn tiling_arithmetic() {
        assert_eq!(chip_origins(1024, 1024, 128, 128).len(), 64);
        assert_eq!(chip_origins(100, 100, 64, 64), vec![(0, 0), (36, 0), (0, 36), (36, 36)]);
    }

    #[test]
    fn chips_skip_empty_tiles_and_center_targets() {
        let s = generate(&small()).unwrap();
        let spec = ChipSpec {
            size: 64,
            stride: 64,
            frames: 5,
            downsample: 1,
            sigma: 2.0,
            target: TargetKind::Heatmap,
            moving_only: false,
            empty_fraction: 0.0,
        };
        let set = ChipSet::from_scenes(std::slice::from_ref(&s), spec).unwrap();
        assert!(set.len() < 16);
        let half = ChipSet::from_scenes(std::slice::from_ref(&s), ChipSpec { empty_fraction: 0.5, ..spec }).unwrap();
        assert_eq!(half.len(), set.len() + (16 - set.len()) / 2);
        for (i, chip) in set.chips.iter().enumerate() {
            assert!(!chip.points.iter().all(|p| p.x < 0.0 || p.x >= 64.0 || p.y < 0.0 || p.y >= 64.0));
            let ex = set.example(i, 0);
            assert_eq!(ex.input.shape(), Shape::new(1, 5, 64, 64));
            let Target::Heatmap(t) = &ex.target else { panic!() };
            let p = chip.points.iter().find(|p| (0.0..64.0).contains(&p.x) && (0.0..64.0).contains(&p.y)).unwrap();
            let (u, v) = ((p.x / 2.0).round() as usize, (p.y / 2.0).round() as usize);
            let (u, v) = (u.min(31), v.min(31));
            assert!(t.at(0, 0, v, u) > 0.0);
        }
    }

    #[test]
    fn transforms_keep_targets_aligned() {
        let s = generate(&small()).unwrap();
        let spec = ChipSpec {
            size: 64,
            stride: 32,
            frames: 1,
            downsample: 0,
            sigma: 2.0,
            target: TargetKind::Heatmap,
            moving_only: false,
            empty_fraction: 0.0,
        };
        let set = ChipSet::from_scenes(std::slice::from_ref(&s), spec).unwrap();
        let base = set.example(0, 0);
        for variant in 1..8 {
            let ex = set.example(0, variant);
            let (Target::Heatmap(a), Target::Heatmap(b)) = (&base.target, &ex.target) else { panic!() };
            // Heatmap mass and input histogram are preserved.
            assert!((a.data().iter().sum::<f32>() - b.data().iter().sum::<f32>()).abs() < 1e-4);
            let mut x: Vec<f32> = base.input.data().to_vec();
            let mut y: Vec<f32> = ex.input.data().to_vec();
            x.sort_by(f32::total_cmp);
            y.sort_by(f32::total_cmp);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn scene_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate(&small()).unwrap();
        write_scene(&s, dir.path()).unwrap();
        let back = read_scene(dir.path()).unwrap();
        assert_eq!(back.config, s.config);
        assert_eq!(back.frames, s.frames);
        let c = s.config.center_frame();
        for (a, b) in back.points(c, true).iter().zip(&s.points(c, true)) {
            assert!(a.dist(b) < 1e-3);
        }
    }
}
