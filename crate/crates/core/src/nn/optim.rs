//! AdamW with decoupled weight decay, plus reduce-on-plateau learning-rate
//! scheduling.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidValue(format!("lr = {}", self.lr)));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidValue(format!("{name} = {beta} outside [0, 1)")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidValue(format!("eps = {}", self.eps)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidValue(format!(
                "weight_decay = {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// AdamW optimizer state over a fixed list of parameter tensors.
///
/// The update is the decoupled form: moments see only the gradient, and the
/// weight-decay term `lr * wd * p` is subtracted alongside the Adam step,
/// never entering the moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// Creates optimizer state for tensors of the given lengths.
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Adjusts the learning rate (used by the plateau scheduler).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One optimizer step over every tensor.
    ///
    /// `tensors[i]` and `grads[i]` must have the length fixed at
    /// construction; the step counter advances once per call.
    pub fn step(&mut self, tensors: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if tensors.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                context: "AdamW tensor list".into(),
                expected: self.m.len(),
                got: tensors.len().max(grads.len()),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t as i32);
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        for (i, (params, gs)) in tensors.iter_mut().zip(grads).enumerate() {
            if params.len() != self.m[i].len() || gs.len() != self.m[i].len() {
                return Err(Error::DimensionMismatch {
                    context: format!("AdamW tensor {i}"),
                    expected: self.m[i].len(),
                    got: params.len().max(gs.len()),
                });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..params.len() {
                let g = gs[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * (g * g);
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                params[j] -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * params[j]);
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Non-improving epochs tolerated before a reduction.
    pub patience: u32,
    /// Multiplier applied on reduction; strictly inside (0, 1).
    pub factor: f64,
    /// Lower bound for the learning rate.
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            patience: 10,
            factor: 0.5,
            min_lr: 1e-6,
        }
    }
}

/// Reduce-on-plateau scheduler state.
///
/// An epoch improves when its validation loss is strictly below the best
/// seen so far; improvement resets the counter. After `patience`
/// consecutive non-improving epochs the learning rate is multiplied by
/// `factor` (clamped at `min_lr`) and the counter restarts.
#[derive(Debug, Clone)]
pub struct LrPlateau {
    cfg: PlateauConfig,
    best: f64,
    bad_epochs: u32,
}

impl LrPlateau {
    pub fn new(cfg: PlateauConfig) -> Result<Self> {
        if !(cfg.factor > 0.0 && cfg.factor < 1.0) {
            return Err(Error::InvalidValue(format!(
                "plateau factor = {} outside (0, 1)",
                cfg.factor
            )));
        }
        if cfg.patience == 0 {
            return Err(Error::InvalidValue("plateau patience must be >= 1".into()));
        }
        if !(cfg.min_lr.is_finite() && cfg.min_lr >= 0.0) {
            return Err(Error::InvalidValue(format!("min_lr = {}", cfg.min_lr)));
        }
        Ok(Self {
            cfg,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feeds one epoch's validation loss and returns the learning rate to
    /// use next. Never increases the rate.
    pub fn update(&mut self, validation_loss: f64, current_lr: f64) -> f64 {
        if validation_loss < self.best {
            self.best = validation_loss;
            self.bad_epochs = 0;
            return current_lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.cfg.patience {
            self.bad_epochs = 0;
            return (current_lr * self.cfg.factor).max(self.cfg.min_lr);
        }
        current_lr
    }
}
