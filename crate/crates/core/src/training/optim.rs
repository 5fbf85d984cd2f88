//! First-order optimizers over a flat parameter vector, plus learning-rate
//! plateau scheduling and early stopping driven by the validation metric.

use crate::error::{Error, Result};

/// Optimizer family and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    pub fn adam_default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Stateful optimizer: velocity for SGD with momentum, first and second
/// moment estimates with bias correction for Adam. Buffers match the flat
/// parameter vector length.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    velocity: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, dim: usize) -> Self {
        let (velocity, first, second) = match kind {
            OptimizerKind::SgdMomentum { .. } => (vec![0.0; dim], Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (Vec::new(), vec![0.0; dim], vec![0.0; dim]),
        };
        Self {
            kind,
            learning_rate,
            velocity,
            first_moment: first,
            second_moment: second,
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update with a uniform learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.step_with_multipliers(params, grads, None)
    }

    /// One update where coordinate i uses `learning_rate * multipliers[i]`.
    /// Momentum and moment buffers are multiplier-independent; only the
    /// applied step scales.
    pub fn step_with_multipliers(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        multipliers: Option<&[f64]>,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        if let Some(m) = multipliers {
            if m.len() != params.len() {
                return Err(Error::LengthMismatch {
                    left: m.len(),
                    right: params.len(),
                });
            }
        }
        if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                tensor: format!("coordinate {idx}"),
                epoch: None,
            });
        }
        let lr = self.learning_rate;
        let mult = |i: usize| multipliers.map_or(1.0, |m| m[i]);
        match self.kind {
            OptimizerKind::SgdMomentum { momentum } => {
                self.step_count += 1;
                for i in 0..params.len() {
                    self.velocity[i] = momentum * self.velocity[i] + grads[i];
                    params[i] -= lr * mult(i) * self.velocity[i];
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                self.step_count += 1;
                let t = self.step_count as i32;
                let bias1 = 1.0 - beta1.powi(t);
                let bias2 = 1.0 - beta2.powi(t);
                for i in 0..params.len() {
                    self.first_moment[i] = beta1 * self.first_moment[i] + (1.0 - beta1) * grads[i];
                    self.second_moment[i] =
                        beta2 * self.second_moment[i] + (1.0 - beta2) * grads[i] * grads[i];
                    let m_hat = self.first_moment[i] / bias1;
                    let v_hat = self.second_moment[i] / bias2;
                    params[i] -= lr * mult(i) * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Tracks consecutive epochs whose validation metric failed to improve on
/// the best seen by at least `threshold` (higher metric is better). The
/// first observation initializes the best and never counts as a plateau
/// epoch.
#[derive(Debug, Clone)]
struct ImprovementCounter {
    best: f64,
    counter: usize,
    threshold: f64,
}

impl ImprovementCounter {
    fn new(threshold: f64) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            counter: 0,
            threshold,
        }
    }

    fn observe(&mut self, metric: f64) -> usize {
        if metric - self.best < self.threshold {
            self.counter += 1;
        } else {
            self.counter = 0;
        }
        if metric > self.best {
            self.best = metric;
        }
        self.counter
    }
}

/// Reduces the learning rate by `factor` once the metric has plateaued for
/// `patience` consecutive epochs; the plateau counter resets on reduction.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    counter: ImprovementCounter,
    patience: usize,
    factor: f64,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64, threshold: f64) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        assert!(factor > 0.0 && factor < 1.0, "factor must be in (0,1)");
        Self {
            counter: ImprovementCounter::new(threshold),
            patience,
            factor,
        }
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }

    /// Returns true when the learning rate should be reduced after this
    /// epoch's metric.
    pub fn observe(&mut self, metric: f64) -> bool {
        if self.counter.observe(metric) >= self.patience {
            self.counter.counter = 0;
            true
        } else {
            false
        }
    }
}

/// Stops training once the metric has plateaued for `patience` consecutive
/// epochs.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    counter: ImprovementCounter,
    patience: usize,
}

impl EarlyStop {
    pub fn new(patience: usize, threshold: f64) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        Self {
            counter: ImprovementCounter::new(threshold),
            patience,
        }
    }

    pub fn observe(&mut self, metric: f64) -> bool {
        self.counter.observe(metric) >= self.patience
    }
}

/// Plateau and stop patience presets per task family, in epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatiencePreset {
    pub plateau: usize,
    pub stop: usize,
}

/// Handwriting-word recognition preset.
pub const PATIENCE_OCR: PatiencePreset = PatiencePreset { plateau: 3, stop: 7 };
/// Text-chunking preset.
pub const PATIENCE_CHUNKING: PatiencePreset = PatiencePreset { plateau: 1, stop: 3 };
/// Binary-segmentation preset.
pub const PATIENCE_SEGMENTATION: PatiencePreset = PatiencePreset { plateau: 5, stop: 13 };
