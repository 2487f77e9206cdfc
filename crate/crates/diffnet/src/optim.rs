use serde::{Deserialize, Serialize};

use crate::error::shape_err;
use crate::NetError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptKind {
    Sgd { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptKind {
    pub fn sgd() -> Self {
        OptKind::Sgd { momentum: 0.0 }
    }

    pub fn adamw() -> Self {
        OptKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Cosine annealing with warm restarts every `period` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub period: u64,
    pub min_factor: f64,
}

impl CosineSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        let p = self.period.max(1);
        let phase = (step % p) as f64 / p as f64;
        self.min_factor + (1.0 - self.min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptKind,
    pub lr: f64,
    pub schedule: Option<CosineSchedule>,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            schedule: None,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn with_schedule(mut self, s: CosineSchedule) -> Self {
        self.schedule = Some(s);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.lr * self.schedule.map_or(1.0, |s| s.factor(self.step))
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NetError> {
        if params.len() != grads.len() {
            return Err(shape_err(params.len(), grads.len()));
        }
        if self.m.is_empty() {
            self.m = vec![0.0; params.len()];
            if matches!(self.kind, OptKind::AdamW { .. }) {
                self.v = vec![0.0; params.len()];
            }
        } else if self.m.len() != params.len() {
            return Err(shape_err(self.m.len(), params.len()));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(NetError::Argument(format!("non-finite gradient at step {}", self.step)));
        }
        let lr = self.current_lr();
        self.step += 1;
        match self.kind {
            OptKind::Sgd { momentum } => {
                for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.m) {
                    *m = momentum * *m + g;
                    *p -= lr * *m;
                }
            }
            OptKind::AdamW {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * weight_decay * *p;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
