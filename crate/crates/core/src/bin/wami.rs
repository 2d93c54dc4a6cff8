use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use wami_core::eval::{evaluate_detections, sweep, write_curve_csv, write_report_json, write_roc_csv, EvalFrame, Matcher};
use wami_core::frame::FrameStack;
use wami_core::models::{write_log_csv, Head, Model, TrainReport};
use wami_core::pipeline::{write_heatmap_png, DeskRecipe, Detector, RunConfig};
use wami_core::postprocess::{read_detections_csv, write_detections_csv, Detection};
use wami_core::synthdata::{generate, read_annotations_csv, read_frames, read_scene, write_scene, SceneConfig};
use wami_core::{CoreError, Result};

#[derive(Parser)]
#[command(name = "wami", version, about = "Two-stage small-vehicle detector for aerial motion imagery")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    #[command(flatten)]
    globals: Globals,
}

#[derive(clap::Args)]
struct Globals {
    /// Random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` settings file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Coarse-score gating threshold in [0, 1].
    #[arg(long, global = true)]
    tau_gate: Option<f64>,
    /// Frames per input stack (1, 3 or 5).
    #[arg(long, global = true)]
    frames: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadArg {
    Heatmap,
    Segmentation,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic scene directory.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        vehicles: Option<usize>,
        /// Square frame side in pixels.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train the coarse proposal network on scene directories.
    TrainClusternet {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the fine localization network on scene directories.
    TrainFoveanet {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value = "heatmap")]
        head: HeadArg,
    },
    /// Detect vehicles in every frame with a full stack.
    Infer {
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        #[arg(long)]
        clusternet: Option<PathBuf>,
        #[arg(long)]
        foveanet: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Score a detections CSV against annotations.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Keep stopped vehicles in the ground truth.
        #[arg(long)]
        all_vehicles: bool,
    },
    /// Precision/recall over fixed score thresholds.
    Sweep {
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        clusternet: Option<PathBuf>,
        #[arg(long)]
        foveanet: Option<PathBuf>,
        /// PR curve CSV; the ROC table goes next to it with a `_roc` suffix.
        #[arg(long)]
        out: PathBuf,
        /// `start:stop:step` or a comma-separated list.
        #[arg(long, default_value = "0.1:0.9:0.1")]
        thresholds: String,
    },
}

/// Per-run record written by `infer` next to its detections.
#[derive(Serialize, Deserialize)]
struct RunRecord {
    frame_ids: Vec<usize>,
    tau_gate: f64,
    frames: usize,
    total_blocks: Vec<usize>,
    proposed: Vec<usize>,
    skipped_fraction: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(CoreError),
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn read_settings(path: Option<&Path>) -> CliResult<Vec<(String, String)>> {
    let Some(path) = path else { return Ok(Vec::new()) };
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Overrides fields of `base` by name, parsing each value as the field's
/// current JSON type.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, settings: &[(String, String)]) -> CliResult<T> {
    let mut v = serde_json::to_value(base).map_err(|e| Failure::Runtime(e.into()))?;
    let map = v.as_object_mut().expect("settings structs serialize to objects");
    for (k, raw) in settings {
        let bad = || Failure::Usage(format!("{k}: cannot parse {raw:?}"));
        let slot = map.get_mut(k).ok_or_else(|| Failure::Usage(format!("unknown setting {k:?}")))?;
        *slot = match slot {
            Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() => Value::from(raw.parse::<u64>().map_err(|_| bad())?),
            Value::Number(_) => Value::from(raw.parse::<f64>().map_err(|_| bad())?),
            Value::String(_) => Value::String(raw.clone()),
            _ => return Err(bad()),
        };
    }
    serde_json::from_value(v).map_err(|e| Failure::Usage(e.to_string()))
}

fn take(settings: &mut Vec<(String, String)>, key: &str) -> Option<String> {
    let pos = settings.iter().rposition(|(k, _)| k == key)?;
    let v = settings.remove(pos).1;
    settings.retain(|(k, _)| k != key);
    Some(v)
}

fn run(Cli { cmd, globals: cli }: Cli) -> CliResult {
    let mut settings = read_settings(cli.config.as_deref())?;
    match cmd {
        Cmd::Synth { out, vehicles, size } => {
            let mut cfg: SceneConfig = overlay(&SceneConfig::default(), &settings)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = cli.frames {
                cfg.stack_frames = n;
                cfg.frames = cfg.frames.max(n);
            }
            if let Some(v) = vehicles {
                cfg.vehicles = v;
            }
            if let Some(s) = size {
                cfg.width = s;
                cfg.height = s;
            }
            let scene = generate(&cfg)?;
            write_scene(&scene, &out)?;
            eprintln!("wrote {} frames, {} annotations to {}", scene.frames.len(), scene.annotations.items.len(), out.display());
        }
        Cmd::TrainClusternet { data, out, steps } => {
            let (recipe, frames, seed) = train_settings(&cli, &mut settings)?;
            let recipe = DeskRecipe { cluster_steps: steps.unwrap_or(recipe.cluster_steps), ..recipe };
            let scenes = data.iter().map(read_scene).collect::<Result<Vec<_>>>()?;
            let (model, report) = recipe.train_clusternet(&scenes, frames, seed)?;
            save_trained(&model, &report, &out)?;
        }
        Cmd::TrainFoveanet { data, out, steps, head } => {
            let (recipe, frames, seed) = train_settings(&cli, &mut settings)?;
            let recipe = DeskRecipe { fovea_steps: steps.unwrap_or(recipe.fovea_steps), ..recipe };
            let head = match head {
                HeadArg::Heatmap => Head::Heatmap,
                HeadArg::Segmentation => Head::Segmentation,
            };
            let scenes = data.iter().map(read_scene).collect::<Result<Vec<_>>>()?;
            let (model, report) = recipe.train_foveanet(&scenes, frames, head, seed)?;
            save_trained(&model, &report, &out)?;
        }
        Cmd::Infer { frames_dir, clusternet, foveanet, out_dir } => {
            let cfg = run_config(&cli, &settings, |c| {
                set_path(&mut c.frames_dir, frames_dir);
                set_path(&mut c.clusternet, clusternet);
                set_path(&mut c.foveanet, foveanet);
                set_path(&mut c.out_dir, out_dir);
            })?;
            let out_dir = need(&cfg.out_dir, "out_dir")?;
            let det = load_detector(&cfg)?;
            let stacks = stacks(&cfg)?;
            fs::create_dir_all(out_dir).map_err(|e| Failure::Runtime(e.into()))?;
            let mut rows: Vec<(usize, Detection)> = Vec::new();
            let mut record = RunRecord {
                frame_ids: Vec::new(),
                tau_gate: cfg.tau_gate,
                frames: cfg.frames,
                total_blocks: Vec::new(),
                proposed: Vec::new(),
                skipped_fraction: Vec::new(),
            };
            for stack in &stacks {
                let r = det.detect_frame(stack, cfg.tau_gate, &cfg.post)?;
                eprintln!(
                    "frame {}: {} detections, {}/{} blocks proposed, {:.2}s",
                    stack.frame_id,
                    r.detections.len(),
                    r.speedup.proposed,
                    r.speedup.total_blocks,
                    r.speedup.wall_time_s
                );
                write_heatmap_png(&r.scores, out_dir.join(format!("heatmap_{:05}.png", stack.frame_id)))?;
                rows.extend(r.detections.iter().map(|d| (stack.frame_id, *d)));
                record.frame_ids.push(stack.frame_id);
                record.total_blocks.push(r.speedup.total_blocks);
                record.proposed.push(r.speedup.proposed);
                record.skipped_fraction.push(r.speedup.skipped_fraction);
            }
            write_detections_csv(&rows, out_dir.join("detections.csv"))?;
            let json = serde_json::to_string_pretty(&record).map_err(|e| Failure::Runtime(e.into()))?;
            fs::write(out_dir.join("run.json"), json).map_err(|e| Failure::Runtime(e.into()))?;
        }
        Cmd::Eval { detections, annotations, out, all_vehicles } => {
            let cfg = run_config(&cli, &settings, |c| set_path(&mut c.annotations, annotations))?;
            let ann_path = need(&cfg.annotations, "annotations")?;
            let ann = read_annotations_csv(ann_path, 0, 0)?;
            let dets = read_detections_csv(&detections)?;
            let run_path = detections.with_file_name("run.json");
            let ids: BTreeSet<usize> = if run_path.exists() {
                let text = fs::read_to_string(&run_path).map_err(|e| Failure::Runtime(e.into()))?;
                let rec: RunRecord = serde_json::from_str(&text).map_err(|e| Failure::Runtime(e.into()))?;
                rec.frame_ids.into_iter().collect()
            } else {
                ann.items.iter().map(|a| a.frame_id).collect()
            };
            let frames: Vec<_> = ids
                .iter()
                .map(|&id| {
                    let d: Vec<Detection> = dets.iter().filter(|(f, _)| *f == id).map(|(_, d)| *d).collect();
                    (d, ann.points(id, !all_vehicles))
                })
                .collect();
            let report = evaluate_detections(&frames, cfg.radius, Matcher::Optimal);
            eprintln!("P {:.4} R {:.4} F1 {:.4} mean TP distance {:.2} px", report.precision, report.recall, report.f1, report.mean_tp_dist_px);
            write_report_json(&report, &out)?;
        }
        Cmd::Sweep { frames_dir, annotations, clusternet, foveanet, out, thresholds } => {
            let cfg = run_config(&cli, &settings, |c| {
                set_path(&mut c.frames_dir, frames_dir);
                set_path(&mut c.annotations, annotations);
                set_path(&mut c.clusternet, clusternet);
                set_path(&mut c.foveanet, foveanet);
            })?;
            let levels = parse_thresholds(&thresholds)?;
            let det = load_detector(&cfg)?;
            let ann_path = match &cfg.annotations {
                Some(p) => p.clone(),
                None => need(&cfg.frames_dir, "frames_dir")?.join("annotations.csv"),
            };
            let ann = read_annotations_csv(ann_path, 0, 0)?;
            let mut frames = Vec::new();
            for stack in stacks(&cfg)? {
                let r = det.detect_frame(&stack, cfg.tau_gate, &cfg.post)?;
                frames.push(EvalFrame { scores: r.scores, truth: ann.points(stack.frame_id, true) });
            }
            let rows = sweep(&frames, &levels, &cfg.post, cfg.radius)?;
            write_curve_csv(&rows, &out)?;
            let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
            write_roc_csv(&rows, out.with_file_name(format!("{stem}_roc.csv")))?;
        }
    }
    Ok(())
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn need<'a>(p: &'a Option<PathBuf>, name: &str) -> CliResult<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Failure::Usage(format!("missing --{}", name.replace('_', "-"))))
}

fn run_config(cli: &Globals, settings: &[(String, String)], flags: impl FnOnce(&mut RunConfig)) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    for (k, v) in settings {
        cfg.set(k, v)?;
    }
    flags(&mut cfg);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.tau_gate {
        cfg.tau_gate = t;
    }
    if let Some(n) = cli.frames {
        cfg.frames = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_settings(cli: &Globals, settings: &mut Vec<(String, String)>) -> CliResult<(DeskRecipe, usize, u64)> {
    let parse = |k: &str, v: String| v.parse().map_err(|_| Failure::Usage(format!("{k}: cannot parse {v:?}")));
    let frames = match take(settings, "frames") {
        Some(v) => parse("frames", v)?,
        None => 5,
    };
    let seed = match take(settings, "seed") {
        Some(v) => parse("seed", v)?,
        None => 0,
    };
    let recipe = overlay(&DeskRecipe::default(), settings)?;
    Ok((recipe, cli.frames.unwrap_or(frames as usize), cli.seed.unwrap_or(seed)))
}

fn save_trained(model: &Model, report: &TrainReport, out: &Path) -> CliResult {
    model.save(out)?;
    let log = out.with_extension("log.csv");
    write_log_csv(&report.history, &log)?;
    eprintln!("saved {} ({} steps, final loss {:.4e}); log in {}", out.display(), report.steps, report.best_val_loss, log.display());
    Ok(())
}

fn load_detector(cfg: &RunConfig) -> CliResult<Detector> {
    let cluster = Model::load(need(&cfg.clusternet, "clusternet")?)?;
    let fovea = Model::load(need(&cfg.foveanet, "foveanet")?)?;
    cluster.expect_frames(cfg.frames)?;
    fovea.expect_frames(cfg.frames)?;
    Ok(Detector::new(cluster, fovea, cfg.chip, cfg.tile)?)
}

fn stacks(cfg: &RunConfig) -> CliResult<Vec<FrameStack>> {
    let seq = read_frames(need(&cfg.frames_dir, "frames_dir")?)?;
    let half = cfg.frames / 2;
    if seq.len() < cfg.frames {
        return Err(Failure::Usage(format!("{} frames on disk, stacks need {}", seq.len(), cfg.frames)));
    }
    Ok((half..seq.len() - half).map(|c| FrameStack::from_sequence(&seq, c, cfg.frames)).collect::<Result<Vec<_>>>()?)
}

fn parse_thresholds(text: &str) -> CliResult<Vec<f64>> {
    let bad = || Failure::Usage(format!("bad thresholds {text:?}"));
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() == 3 {
        let v: Vec<f64> = parts.iter().map(|p| p.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        let (start, stop, step) = (v[0], v[1], v[2]);
        if !(step > 0.0) || stop < start {
            return Err(bad());
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize + 1;
        // Rounded so 0.1:0.9:0.1 prints as nine clean levels.
        return Ok((0..n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect());
    }
    text.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}
