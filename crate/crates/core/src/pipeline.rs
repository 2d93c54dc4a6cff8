//! Two-stage inference: coarse gating over the full frame, fine heatmaps on
//! the proposed chips, stitching and point extraction.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::eval::MATCH_RADIUS;
use crate::frame::{FrameStack, GrayFrame};
use crate::models::{clusternet_spec, foveanet_spec, train, Head, Model, TrainConfig, TrainReport};
use crate::postprocess::{detect, Detection, PostprocessConfig, ThresholdMode};
use crate::roobi::{propose, rf_descriptor, speedup_report, BlockGrid, Roobi, SpeedupReport, CHIP_SIZE};
use crate::synthdata::{ChipSet, ChipSpec, SyntheticScene, TargetKind};
use crate::targets::{default_seg_threshold, Heatmap};
use wami_engine::{LossKind, OptimizerKind};

/// Default coarse-network tile side, input pixels.
pub const TILE_SIZE: usize = 512;

/// Run settings shared by the CLI subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub frames_dir: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub clusternet: Option<PathBuf>,
    pub foveanet: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub frames: usize,
    pub tau_gate: f64,
    pub chip: usize,
    pub tile: usize,
    pub post: PostprocessConfig,
    pub radius: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            frames_dir: None,
            annotations: None,
            clusternet: None,
            foveanet: None,
            out_dir: None,
            frames: 5,
            tau_gate: 0.0,
            chip: CHIP_SIZE,
            tile: TILE_SIZE,
            post: PostprocessConfig::default(),
            radius: MATCH_RADIUS,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| CoreError::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "frames_dir" => self.frames_dir = Some(value.into()),
            "annotations" => self.annotations = Some(value.into()),
            "clusternet" => self.clusternet = Some(value.into()),
            "foveanet" => self.foveanet = Some(value.into()),
            "out_dir" => self.out_dir = Some(value.into()),
            "frames" => self.frames = num(key, value)?,
            "tau_gate" => self.tau_gate = num(key, value)?,
            "chip" => self.chip = num(key, value)?,
            "tile" => self.tile = num(key, value)?,
            "threshold" => {
                self.post.threshold = match value {
                    "otsu" => ThresholdMode::Otsu,
                    v => ThresholdMode::Fixed(num(key, v)?),
                }
            }
            "min_area" => self.post.min_area = num(key, value)?,
            "max_area" => self.post.max_area = num(key, value)?,
            "split" => self.post.split = num(key, value)?,
            "merge_radius" => self.post.merge_radius = num(key, value)?,
            "radius" => self.radius = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(CoreError::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.frames, 1 | 3 | 5) {
            return Err(CoreError::Config(format!("frames must be 1, 3 or 5, got {}", self.frames)));
        }
        if !(0.0..=1.0).contains(&self.tau_gate) {
            return Err(CoreError::Config(format!("tau_gate must lie in [0, 1], got {}", self.tau_gate)));
        }
        if self.radius <= 0.0 {
            return Err(CoreError::Config("match radius must be positive".into()));
        }
        if self.post.min_area > self.post.max_area {
            return Err(CoreError::Config("min_area exceeds max_area".into()));
        }
        for (name, p) in [
            ("frames_dir", &self.frames_dir),
            ("annotations", &self.annotations),
            ("clusternet", &self.clusternet),
            ("foveanet", &self.foveanet),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CoreError::Config(format!("{name}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

/// Everything `detect_frame` produces for one stack.
#[derive(Clone, Debug)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    /// Normalized fine-network scores over the whole frame; zero where no
    /// chip was run.
    pub scores: Heatmap,
    /// Normalized coarse scores, when the coarse network ran.
    pub cluster: Option<Heatmap>,
    pub proposals: Vec<Roobi>,
    pub speedup: SpeedupReport,
}

/// The pair of trained networks plus chip and tile geometry.
#[derive(Clone, Debug)]
pub struct Detector {
    pub cluster: Model,
    pub fovea: Model,
    pub chip: usize,
    pub tile: usize,
}

impl Detector {
    pub fn new(cluster: Model, fovea: Model, chip: usize, tile: usize) -> Result<Self> {
        if cluster.spec.frames != fovea.spec.frames {
            return Err(CoreError::CheckpointMismatch(format!(
                "coarse network takes {} frames, fine network {}",
                cluster.spec.frames, fovea.spec.frames
            )));
        }
        let fine = 1usize << fovea.downsample();
        let coarse = 1usize << cluster.downsample();
        if chip % fine != 0 || chip % 2 != 0 {
            return Err(CoreError::Config(format!("chip size {chip} must be a multiple of {}", fine.max(2))));
        }
        if tile == 0 || tile % coarse != 0 {
            return Err(CoreError::Config(format!("tile size {tile} must be a multiple of {coarse}")));
        }
        Ok(Detector { cluster, fovea, chip, tile })
    }

    pub fn frames(&self) -> usize {
        self.fovea.spec.frames
    }

    fn check(&self, stack: &FrameStack) -> Result<()> {
        self.fovea.expect_frames(stack.len())
    }

    /// Normalized coarse scores for the whole frame, computed tile by tile.
    /// Tiles overlap by the receptive-field reach so every output cell sees
    /// exactly the pixels a single whole-frame pass would.
    pub fn cluster_scores(&self, stack: &FrameStack) -> Result<Heatmap> {
        self.check(stack)?;
        let (w, h) = (stack.width(), stack.height());
        let cell = 1usize << self.cluster.downsample();
        let rf = rf_descriptor(&self.cluster.spec);
        let reach = (-rf.start).max(rf.start + rf.size as i64 - 1).max(0) as usize;
        let margin = reach.div_ceil(cell) * cell;
        let (gh, gw) = self.cluster.spec.output_dims(h, w);
        let mut out = Heatmap::zeros(gw, gh, self.cluster.downsample());
        for cy in (0..h).step_by(self.tile) {
            for cx in (0..w).step_by(self.tile) {
                let (x0, y0) = (cx.saturating_sub(margin), cy.saturating_sub(margin));
                let x1 = (cx + self.tile + margin).min(w);
                let y1 = (cy + self.tile + margin).min(h);
                let input = stack.crop(x0 as isize, y0 as isize, x1 - x0, y1 - y0);
                let raw = self.cluster.infer_tensor(&input)?.remove(0);
                let core_x = cx / cell..((cx + self.tile).min(w)).div_ceil(cell);
                let core_y = cy / cell..((cy + self.tile).min(h)).div_ceil(cell);
                for gy in core_y {
                    for gx in core_x.clone() {
                        let v = raw.at(gx - x0 / cell, gy - y0 / cell);
                        let o = out.at_mut(gx, gy);
                        *o = o.max(v);
                    }
                }
            }
        }
        Ok(self.cluster.scores(&out))
    }

    /// Raw fine-network output for one chip.
    pub fn chip_output(&self, stack: &FrameStack, chip: &Roobi) -> Result<Heatmap> {
        let input = stack.crop(chip.chip.x as isize, chip.chip.y as isize, chip.chip.w, chip.chip.h);
        Ok(self.fovea.infer_tensor(&input)?.remove(0))
    }

    fn chip_outputs(&self, stack: &FrameStack, chips: &[Roobi]) -> Result<(Vec<Heatmap>, Duration)> {
        let start = Instant::now();
        let outs = chips.iter().map(|r| self.chip_output(stack, r)).collect::<Result<Vec<_>>>()?;
        let per_chip = if chips.is_empty() { Duration::ZERO } else { start.elapsed() / chips.len() as u32 };
        Ok((outs, per_chip))
    }

    /// Per-cell maximum of chip outputs over a frame-sized grid, normalized.
    fn stitch<'a>(&self, stack: &FrameStack, parts: impl IntoIterator<Item = (&'a Roobi, &'a Heatmap)>) -> Heatmap {
        let d = self.fovea.downsample();
        let cell = 1i64 << d;
        let mut map = Heatmap::for_input(stack.width(), stack.height(), d);
        for (r, raw) in parts {
            let (ox, oy) = (r.chip.x.div_euclid(cell), r.chip.y.div_euclid(cell));
            for cy in 0..raw.height {
                let gy = oy + cy as i64;
                if gy < 0 || gy >= map.height as i64 {
                    continue;
                }
                for cx in 0..raw.width {
                    let gx = ox + cx as i64;
                    if gx < 0 || gx >= map.width as i64 {
                        continue;
                    }
                    let o = map.at_mut(gx as usize, gy as usize);
                    *o = o.max(raw.at(cx, cy));
                }
            }
        }
        self.fovea.scores(&map)
    }

    fn grid(&self, stack: &FrameStack) -> Result<BlockGrid> {
        BlockGrid::new(&self.cluster.spec, stack.width(), stack.height(), self.chip)
    }

    /// Full two-stage detection on one stack.
    pub fn detect_frame(&self, stack: &FrameStack, tau_gate: f64, post: &PostprocessConfig) -> Result<FrameResult> {
        let start = Instant::now();
        let grid = self.grid(stack)?;
        let cluster = self.cluster_scores(stack)?;
        let proposals = propose(&cluster, &self.cluster.spec, &grid, tau_gate)?;
        let (outs, per_chip) = self.chip_outputs(stack, &proposals)?;
        let scores = self.stitch(stack, proposals.iter().zip(&outs));
        let detections = detect(&scores, post);
        let speedup = speedup_report(proposals.len(), grid.total_blocks(), per_chip, start.elapsed())?;
        Ok(FrameResult { detections, scores, cluster: Some(cluster), proposals, speedup })
    }

    /// Fine network over every block's chip, no gating.
    pub fn exhaustive_scan(&self, stack: &FrameStack, post: &PostprocessConfig) -> Result<FrameResult> {
        self.check(stack)?;
        let start = Instant::now();
        let grid = self.grid(stack)?;
        let proposals = grid.all(&self.cluster.spec)?;
        let (outs, per_chip) = self.chip_outputs(stack, &proposals)?;
        let scores = self.stitch(stack, proposals.iter().zip(&outs));
        let detections = detect(&scores, post);
        let speedup = speedup_report(proposals.len(), grid.total_blocks(), per_chip, start.elapsed())?;
        Ok(FrameResult { detections, scores, cluster: None, proposals, speedup })
    }

    /// Runs both networks on every block once so that any gating threshold
    /// can be replayed without recomputation.
    pub fn scan(&self, stack: &FrameStack) -> Result<ScanCache> {
        let grid = self.grid(stack)?;
        let cluster = self.cluster_scores(stack)?;
        let blocks = propose(&cluster, &self.cluster.spec, &grid, 0.0)?;
        let (outputs, per_chip) = self.chip_outputs(stack, &blocks)?;
        Ok(ScanCache { stack: stack.clone(), blocks, outputs, per_chip })
    }

    /// Result of a cached scan under `tau_gate`; identical to
    /// `detect_frame` apart from timings.
    pub fn replay(&self, cache: &ScanCache, tau_gate: f64, post: &PostprocessConfig) -> Result<FrameResult> {
        if !(0.0..=1.0).contains(&tau_gate) {
            return Err(CoreError::Config(format!("gating threshold must lie in [0, 1], got {tau_gate}")));
        }
        let keep: Vec<usize> =
            (0..cache.blocks.len()).filter(|&i| tau_gate == 0.0 || cache.blocks[i].score as f64 >= tau_gate).collect();
        let scores = self.stitch(&cache.stack, keep.iter().map(|&i| (&cache.blocks[i], &cache.outputs[i])));
        let detections = detect(&scores, post);
        let speedup = speedup_report(keep.len(), cache.blocks.len(), cache.per_chip, cache.per_chip * keep.len() as u32)?;
        let proposals = keep.iter().map(|&i| cache.blocks[i].clone()).collect();
        Ok(FrameResult { detections, scores, cluster: None, proposals, speedup })
    }
}

/// Every block's proposal and fine-network output for one stack.
#[derive(Clone, Debug)]
pub struct ScanCache {
    pub stack: FrameStack,
    pub blocks: Vec<Roobi>,
    pub outputs: Vec<Heatmap>,
    pub per_chip: Duration,
}

/// Training settings for the desk-scale (single CPU) networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskRecipe {
    pub width: usize,
    pub fovea_chip: usize,
    /// Fine target width in grid cells.
    pub fovea_sigma: f64,
    pub fovea_steps: usize,
    pub fovea_lr: f64,
    /// Share of vehicle-free fine chips kept as negatives.
    pub fovea_empty_fraction: f64,
    pub cluster_tile: usize,
    pub cluster_sigma: f64,
    pub cluster_steps: usize,
    pub cluster_lr: f64,
    pub batch_size: usize,
}

impl Default for DeskRecipe {
    fn default() -> Self {
        DeskRecipe {
            width: 16,
            fovea_chip: 64,
            fovea_sigma: 3.0,
            fovea_steps: 3000,
            fovea_lr: 1e-3,
            fovea_empty_fraction: 0.1,
            cluster_tile: 256,
            cluster_sigma: 1.0,
            cluster_steps: 600,
            cluster_lr: 1e-3,
            batch_size: 8,
        }
    }
}

impl DeskRecipe {
    fn train_config(&self, lr: f64, steps: usize, loss: LossKind, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::adam(),
            lr,
            batch_size: self.batch_size,
            max_steps: Some(steps),
            max_epochs: usize::MAX,
            eval_every: 100,
            plateau_patience: usize::MAX,
            augment: true,
            loss,
            seed,
            ..TrainConfig::clusternet()
        }
    }

    /// Trains the coarse network on vehicle-bearing tiles of `scenes`.
    pub fn train_clusternet(&self, scenes: &[SyntheticScene], frames: usize, seed: u64) -> Result<(Model, TrainReport)> {
        let spec = ChipSpec {
            size: self.cluster_tile,
            stride: self.cluster_tile,
            frames,
            downsample: 4,
            sigma: self.cluster_sigma,
            target: TargetKind::Heatmap,
            moving_only: true,
            empty_fraction: 0.0,
        };
        let data = ChipSet::from_scenes(scenes, spec)?;
        let mut model = Model::new(clusternet_spec(frames)?.with_width(self.width), self.cluster_sigma, seed)?;
        let cfg = self.train_config(self.cluster_lr, self.cluster_steps, LossKind::Euclidean, seed);
        let report = train(&mut model, &data, &Vec::new(), &cfg)?;
        Ok((model, report))
    }

    /// Trains the fine network on vehicle-bearing chips of `scenes` plus a
    /// share of empty ones.
    pub fn train_foveanet(&self, scenes: &[SyntheticScene], frames: usize, head: Head, seed: u64) -> Result<(Model, TrainReport)> {
        let (target, loss) = match head {
            Head::Heatmap => (TargetKind::Heatmap, LossKind::Euclidean),
            Head::Segmentation => {
                (TargetKind::Segmentation { threshold: default_seg_threshold(self.fovea_sigma) }, LossKind::SoftmaxXent)
            }
        };
        let spec = ChipSpec {
            size: self.fovea_chip,
            stride: self.fovea_chip,
            frames,
            downsample: 1,
            sigma: self.fovea_sigma,
            target,
            moving_only: true,
            empty_fraction: self.fovea_empty_fraction,
        };
        let data = ChipSet::from_scenes(scenes, spec)?;
        let net = foveanet_spec(frames)?.with_width(self.width).with_head(head);
        let mut model = Model::new(net, self.fovea_sigma, seed)?;
        let cfg = self.train_config(self.fovea_lr, self.fovea_steps, loss, seed);
        let report = train(&mut model, &data, &Vec::new(), &cfg)?;
        Ok((model, report))
    }
}

/// Grayscale visualization of a `[0, 1]` score map.
pub fn write_heatmap_png(map: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    GrayFrame::from_unit(map.width, map.height, &map.values).save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{clusternet_spec, foveanet_spec};

    fn detector(frames: usize) -> Detector {
        let c = Model::new(clusternet_spec(frames).unwrap().with_width(4), 1.0, 1).unwrap();
        let f = Model::new(foveanet_spec(frames).unwrap().with_width(4), 3.0, 2).unwrap();
        Detector::new(c, f, 128, 128).unwrap()
    }

    fn stack(frames: usize, w: usize, h: usize) -> FrameStack {
        let fr = (0..frames)
            .map(|i| {
                let px = (0..w * h).map(|p| ((p * 31 + i * 7 + p / w * 3) % 251) as u8).collect();
                GrayFrame::new(w, h, px).unwrap()
            })
            .collect();
        FrameStack::new(fr, 0).unwrap()
    }

    #[test]
    fn tiled_coarse_pass_matches_whole_frame() {
        let det = detector(3);
        let s = stack(3, 300, 260);
        let tiled = det.cluster_scores(&s).unwrap();
        let whole = det.cluster.scores(&det.cluster.infer(&s).unwrap());
        assert_eq!((tiled.width, tiled.height), (whole.width, whole.height));
        for (a, b) in tiled.values.iter().zip(&whole.values) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn ungated_equals_exhaustive() {
        let det = detector(1);
        let s = stack(1, 200, 180);
        let post = PostprocessConfig::default();
        let a = det.detect_frame(&s, 0.0, &post).unwrap();
        let b = det.exhaustive_scan(&s, &post).unwrap();
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.speedup.skipped_fraction, 0.0);
        let cache = det.scan(&s).unwrap();
        for tau in [0.0, 0.3, 0.9] {
            let live = det.detect_frame(&s, tau, &post).unwrap();
            let replayed = det.replay(&cache, tau, &post).unwrap();
            assert_eq!(live.detections, replayed.detections);
            assert_eq!(live.proposals, replayed.proposals);
        }
    }

    #[test]
    fn raising_the_gate_only_lowers_scores() {
        let det = detector(1);
        let cache = det.scan(&stack(1, 200, 180)).unwrap();
        let post = PostprocessConfig::default();
        let maps: Vec<_> = [0.0, 0.2, 0.5, 0.9].iter().map(|&t| det.replay(&cache, t, &post).unwrap()).collect();
        for w in maps.windows(2) {
            assert!(w[1].proposals.len() <= w[0].proposals.len());
            assert!(w[1].scores.values.iter().zip(&w[0].scores.values).all(|(hi, lo)| hi <= lo));
        }
    }

    #[test]
    fn full_gate_skips_everything() {
        let det = detector(1);
        let s = stack(1, 200, 180);
        let r = det.detect_frame(&s, 1.0, &PostprocessConfig::default()).unwrap();
        if r.proposals.is_empty() {
            assert!(r.detections.is_empty());
            assert_eq!(r.speedup.skipped_fraction, 1.0);
        }
    }

    #[test]
    fn frame_mismatch_is_rejected() {
        let c = Model::new(clusternet_spec(3).unwrap().with_width(4), 1.0, 1).unwrap();
        let f = Model::new(foveanet_spec(5).unwrap().with_width(4), 3.0, 2).unwrap();
        assert!(matches!(Detector::new(c, f, 128, 512), Err(CoreError::CheckpointMismatch(_))));
        let det = detector(3);
        assert!(det.detect_frame(&stack(5, 128, 128), 0.0, &PostprocessConfig::default()).is_err());
    }

    #[test]
    fn config_text_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# run\nframes = 3\ntau_gate=0.4\nthreshold = otsu\nmin_area = 60\n").unwrap();
        assert_eq!((c.frames, c.tau_gate, c.post.min_area), (3, 0.4, 60.0));
        c.set("threshold", "0.25").unwrap();
        assert_eq!(c.post.threshold, ThresholdMode::Fixed(0.25));
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("frames 3").is_err());
        c.tau_gate = 2.0;
        assert!(c.validate().is_err());
    }
}
