//! First-order optimizers and the plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::param::Param;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn nesterov() -> Self {
        OptimizerKind::SgdNesterov { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter slots are created lazily on the first step and stay
/// aligned with the parameter order passed to [`OptimizerState::step`].
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub steps: u64,
    /// Velocity (Nesterov) or first moment (Adam).
    first: Vec<Vec<F>>,
    /// Second moment (Adam only).
    second: Vec<Vec<F>>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        OptimizerState {
            kind,
            lr,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Applies one update from the gradients stored in `params`.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        assert_eq!(self.first.len(), params.len(), "optimizer state does not match parameter list");
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdNesterov { momentum } => {
                let (mu, lr) = (F::of(momentum), F::of(self.lr));
                for (p, vel) in params.iter_mut().zip(&mut self.first) {
                    for ((w, &g), v) in p.value.iter_mut().zip(&p.grad).zip(vel.iter_mut()) {
                        // v <- mu v + g ; w <- w - lr (g + mu v)
                        *v = mu * *v + g;
                        *w -= lr * (g + mu * *v);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.steps as i32;
                let (b1, b2, eps, lr) = (F::of(beta1), F::of(beta2), F::of(eps), F::of(self.lr));
                let (c1, c2) = (F::of(1.0 - beta1.powi(t)), F::of(1.0 - beta2.powi(t)));
                let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, &g), m), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// failed to improve for `patience` consecutive evaluations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub factor: f64,
    pub patience: usize,
    /// Minimum relative improvement that resets the counter.
    pub min_rel_improvement: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(factor: f64, patience: usize, min_rel_improvement: f64) -> Self {
        PlateauSchedule {
            factor,
            patience,
            min_rel_improvement,
            best: None,
            stale: 0,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feeds one validation loss; returns the new learning rate if it dropped.
    pub fn observe(&mut self, loss: f64, lr: &mut f64) -> Option<f64> {
        match self.best {
            Some(b) if loss > b * (1.0 - self.min_rel_improvement) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.stale = 0;
                    self.best = Some(b.min(loss));
                    *lr *= self.factor;
                    return Some(*lr);
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        None
    }
}

impl Default for PlateauSchedule {
    fn default() -> Self {
        PlateauSchedule::new(0.1, 5, 1e-4)
    }
}
