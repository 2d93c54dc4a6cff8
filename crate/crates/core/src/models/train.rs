//! Mini-batch training with validation checkpointing and a plateau schedule.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wami_engine::{euclidean_loss, softmax_xent_loss, EngineError, LossKind, Mode, OptimizerKind, OptimizerState, PlateauSchedule, Tensor};

use super::{collate, output_shape, Dataset, Model, Target};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub lr_drop_factor: f64,
    /// Evaluations without improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub max_epochs: usize,
    /// Hard cap on optimizer steps, if any.
    pub max_steps: Option<usize>,
    /// Steps between validation passes; 0 validates once per epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Draw a random augmentation variant per example.
    pub augment: bool,
}

impl TrainConfig {
    /// Proposal-network defaults: Nesterov SGD, lr 0.01, batch 8.
    pub fn clusternet() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::nesterov(),
            lr: 0.01,
            batch_size: 8,
            lr_drop_factor: 0.1,
            plateau_patience: 5,
            max_epochs: 100,
            max_steps: None,
            eval_every: 0,
            seed: 0,
            loss: LossKind::Euclidean,
            augment: false,
        }
    }

    /// Localization-network defaults: Adam, lr 1e-5, batch 32.
    pub fn foveanet() -> Self {
        TrainConfig { optimizer: OptimizerKind::adam(), lr: 1e-5, batch_size: 32, ..TrainConfig::clusternet() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return Err(CoreError::Config("training needs lr > 0 and batch_size >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<LogRow>,
    pub steps: usize,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub initial_train_loss: f64,
}

fn batch_loss(kind: LossKind, out: &Tensor<f32>, target: &Target) -> Result<(f64, Tensor<f32>)> {
    Ok(match (kind, target) {
        (LossKind::Euclidean, Target::Heatmap(t)) => euclidean_loss(out, t)?,
        (LossKind::SoftmaxXent, Target::Labels(l)) => softmax_xent_loss(out, l)?,
        _ => return Err(CoreError::Config(format!("{kind:?} loss does not fit the dataset targets"))),
    })
}

fn diverged(e: EngineError, step: usize) -> CoreError {
    match e {
        EngineError::NonFinite { .. } => CoreError::Diverged { step, loss: f64::NAN },
        other => other.into(),
    }
}

/// Mean loss over a dataset in inference mode.
pub fn evaluate_loss(model: &Model, data: &dyn Dataset, kind: LossKind, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let examples: Vec<_> = chunk.iter().map(|&i| data.example(i, 0)).collect();
        let (x, target) = collate(&examples)?;
        let out = model.forward(&x).map_err(|e| match e {
            CoreError::Engine(e) => diverged(e, 0),
            other => other,
        })?;
        let (loss, _) = batch_loss(kind, &out, &target)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Trains `model` in place and leaves it holding the parameters with the
/// lowest validation loss (or the final ones if `val` is empty).
pub fn train(model: &mut Model, train_set: &dyn Dataset, val: &dyn Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(CoreError::Config("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    model.net.reseed_dropout(cfg.seed.wrapping_add(1));
    let mut opt = OptimizerState::<f32>::new(cfg.optimizer, cfg.lr);
    let mut schedule = PlateauSchedule::new(cfg.lr_drop_factor, cfg.plateau_patience, 1e-4);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let eval_every = if cfg.eval_every == 0 { steps_per_epoch } else { cfg.eval_every };
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.max_epochs.saturating_mul(steps_per_epoch));

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<_>)> = None;
    let mut initial = None;
    let mut window = (0.0, 0usize);
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'outer;
            }
            let examples: Vec<_> = chunk
                .iter()
                .map(|&i| {
                    let v = if cfg.augment { rng.random_range(0..train_set.variants()) } else { 0 };
                    train_set.example(i, v)
                })
                .collect();
            let (x, target) = collate(&examples)?;
            let out = model.net.forward(&x, Mode::Train).map_err(|e| diverged(e, step))?;
            debug_assert_eq!(out.shape(), output_shape(&model.spec, x.shape()));
            let (loss, grad) = batch_loss(cfg.loss, &out, &target)?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { step, loss });
            }
            initial.get_or_insert(loss);
            model.net.zero_grad();
            model.net.backward(&grad, false).map_err(|e| diverged(e, step))?;
            opt.step(&mut model.net.params_mut());
            step += 1;
            window.0 += loss;
            window.1 += 1;

            if step % eval_every == 0 || step == max_steps {
                let train_loss = window.0 / window.1 as f64;
                window = (0.0, 0);
                let val_loss = if val.is_empty() { None } else { Some(evaluate_loss(model, val, cfg.loss, cfg.batch_size)?) };
                let monitored = val_loss.unwrap_or(train_loss);
                if !monitored.is_finite() {
                    return Err(CoreError::Diverged { step, loss: monitored });
                }
                history.push(LogRow { step, train_loss, val_loss, lr: opt.lr });
                if best.as_ref().is_none_or(|b| monitored < b.0) {
                    best = Some((monitored, step, model.net.state()));
                }
                schedule.observe(monitored, &mut opt.lr);
            }
        }
    }

    let (best_val_loss, best_step) = match best {
        Some((loss, s, state)) => {
            model.net.load_state(&state)?;
            (loss, s)
        }
        None => (f64::NAN, step),
    };
    Ok(TrainReport { history, steps: step, best_step, best_val_loss, initial_train_loss: initial.unwrap_or(f64::NAN) })
}

pub fn write_log_csv(history: &[LogRow], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::from("step,train_loss,val_loss,lr\n");
    for r in history {
        let val = r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default();
        writeln!(s, "{},{:e},{},{:e}", r.step, r.train_loss, val, r.lr).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_log_csv(path: impl AsRef<Path>) -> Result<Vec<LogRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let err = |msg: String| CoreError::Parse { path: path.to_path_buf(), line: i + 1, msg };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(err(format!("expected 4 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")));
            Ok(LogRow {
                step: f[0].parse().map_err(|e| err(format!("{:?}: {e}", f[0])))?,
                train_loss: num(f[1])?,
                val_loss: if f[2].is_empty() { None } else { Some(num(f[2])?) },
                lr: num(f[3])?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{clusternet_spec, foveanet_spec, Example, Head, LayerSpec};
    use crate::targets::{make_heatmap, Point};
    use wami_engine::Shape;

    fn tiny_set(frames: usize, size: usize, d: u32, sigma: f64, n: usize) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| {
                let m = size as f64 / 4.0;
                let p = Point::new(rng.random_range(m..size as f64 - m), rng.random_range(m..size as f64 - m));
                let input = Tensor::from_fn(Shape::new(1, frames, size, size), |_, c, y, x| {
                    let on = (x as f64 - p.x).abs() < 4.0 && (y as f64 - p.y).abs() < 2.0;
                    if on && c == frames / 2 { 0.4 } else { -0.1 }
                });
                let h = make_heatmap(&[p], size, size, d, sigma);
                let t = Tensor::from_vec(Shape::new(1, 1, h.height, h.width), h.values).unwrap();
                Example { input, target: Target::Heatmap(t) }
            })
            .collect()
    }

    #[test]
    fn overfits_four_samples() {
        // Dropout would keep the training loss noisy; memorization is judged without it.
        let mut spec = foveanet_spec(3).unwrap().with_width(8);
        spec.layers.retain(|l| !matches!(l, LayerSpec::Dropout { .. }));
        let mut model = Model::new(spec, 2.0, 3).unwrap();
        let data = tiny_set(3, 32, 1, 2.0, 4);
        let before = evaluate_loss(&model, &data, LossKind::Euclidean, 4).unwrap();
        let cfg = TrainConfig { lr: 1e-3, batch_size: 4, max_epochs: 500, eval_every: 50, ..TrainConfig::foveanet() };
        let report = train(&mut model, &data, &data, &cfg).unwrap();
        let after = evaluate_loss(&model, &data, LossKind::Euclidean, 4).unwrap();
        assert!(after < 0.01 * before, "loss {before:e} -> {after:e} ({:?})", report.history.last());
    }

    #[test]
    fn training_is_reproducible() {
        let spec = clusternet_spec(1).unwrap().with_width(4);
        let data = tiny_set(1, 64, 4, 1.0, 6);
        let cfg = TrainConfig { max_steps: Some(12), eval_every: 4, augment: false, ..TrainConfig::clusternet() };
        let run = || {
            let mut m = Model::new(spec.clone(), 1.0, 11).unwrap();
            let r = train(&mut m, &data, &data, &cfg).unwrap();
            (r, m.net.state())
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.history.len(), 3);
    }

    #[test]
    fn loss_kind_must_match_targets() {
        let spec = foveanet_spec(1).unwrap().with_width(4).with_head(Head::Segmentation);
        let mut m = Model::new(spec, 2.0, 0).unwrap();
        let data = tiny_set(1, 16, 1, 2.0, 2);
        let cfg = TrainConfig { loss: LossKind::SoftmaxXent, max_steps: Some(1), ..TrainConfig::foveanet() };
        assert!(matches!(train(&mut m, &data, &data, &cfg), Err(CoreError::Config(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let spec = foveanet_spec(1).unwrap().with_width(4);
        let mut m = Model::new(spec, 2.0, 0).unwrap();
        let data = tiny_set(1, 16, 1, 2.0, 2);
        let cfg = TrainConfig { lr: 1e30, optimizer: OptimizerKind::nesterov(), max_steps: Some(20), ..TrainConfig::clusternet() };
        let err = train(&mut m, &data, &data, &cfg).unwrap_err();
        assert!(matches!(err, CoreError::Diverged { .. }), "{err}");
    }

    #[test]
    fn log_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            LogRow { step: 10, train_loss: 0.5, val_loss: Some(0.25), lr: 0.01 },
            LogRow { step: 20, train_loss: 0.125, val_loss: None, lr: 0.001 },
        ];
        let p = dir.path().join("log.csv");
        write_log_csv(&rows, &p).unwrap();
        assert_eq!(read_log_csv(&p).unwrap(), rows);
    }
}
