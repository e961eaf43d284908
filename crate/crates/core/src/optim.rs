//! Adam and the two learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok =
            self.lr >= 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam state over an ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update. `grads[i]` belongs to `params[i]`; `None` leaves the
    /// parameter and its moments untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} params but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::ShapeMismatch("parameter list changed between steps".into()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() || self.m[i].len() != p.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "param {i}: shape {:?}, gradient {:?}",
                        p.shape(),
                        g.shape()
                    )));
                }
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps) = (T::of(c.lr), T::of(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((theta, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let mhat = *mi * ibc1;
                let vhat = *vi * ibc2;
                *theta -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CosineRestartSchedule {
    pub eta0: f64,
    /// Length of the first cycle in optimizer steps; 0 means "use the
    /// training-set size".
    pub first_cycle_steps: usize,
    pub t_mul: f64,
    pub m_mul: f64,
    /// Absolute floor learning rate.
    pub alpha_min: f64,
}

impl Default for CosineRestartSchedule {
    fn default() -> Self {
        CosineRestartSchedule {
            eta0: 1e-3,
            first_cycle_steps: 0,
            t_mul: 1.5,
            m_mul: 1.0,
            alpha_min: 1e-6,
        }
    }
}

impl CosineRestartSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.t_mul < 1.0 || !(self.alpha_min < self.eta0) || self.m_mul <= 0.0 {
            return Err(Error::InvalidConfig(format!("invalid cosine schedule {self:?}")));
        }
        Ok(())
    }

    pub fn with_first_cycle(mut self, steps: usize) -> Self {
        if self.first_cycle_steps == 0 {
            self.first_cycle_steps = steps;
        }
        self
    }

    pub fn lr(&self, global_step: u64) -> f64 {
        let mut len = self.first_cycle_steps.max(1) as f64;
        let mut peak = self.eta0;
        let mut t = global_step as f64;
        while t >= len {
            t -= len;
            len *= self.t_mul;
            peak *= self.m_mul;
        }
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t / len).cos());
        self.alpha_min + (peak - self.alpha_min) * cos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub patience: usize,
    pub factor: f64,
    pub min_lr: f64,
    pub min_delta: f64,
    pub lower_is_better: bool,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            patience: 5,
            factor: 0.5,
            min_lr: 1e-5,
            min_delta: 1e-4,
            lower_is_better: true,
        }
    }
}

/// Reduce-on-plateau state.
#[derive(Debug, Clone)]
pub struct PlateauState {
    pub cfg: PlateauConfig,
    pub lr: f64,
    best: Option<f64>,
    wait: usize,
}

impl PlateauState {
    pub fn new(cfg: PlateauConfig, lr: f64) -> Result<Self> {
        if !(cfg.factor > 0.0 && cfg.factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "plateau factor must be in (0, 1), got {}",
                cfg.factor
            )));
        }
        Ok(PlateauState {
            cfg,
            lr,
            best: None,
            wait: 0,
        })
    }

    /// Records one dev metric; returns the learning rate to use next and
    /// whether it was reduced.
    pub fn update(&mut self, metric: f64) -> (f64, bool) {
        let improved = match self.best {
            None => true,
            Some(b) if self.cfg.lower_is_better => metric < b - self.cfg.min_delta,
            Some(b) => metric > b + self.cfg.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.wait = 0;
            return (self.lr, false);
        }
        self.wait += 1;
        if self.wait >= self.cfg.patience {
            self.wait = 0;
            let next = (self.lr * self.cfg.factor).max(self.cfg.min_lr);
            let reduced = next < self.lr;
            self.lr = next;
            return (self.lr, reduced);
        }
        (self.lr, false)
    }
}

/// Optimizer and schedule settings of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    pub cosine: CosineRestartSchedule,
    pub plateau: PlateauConfig,
    /// Adam learning rate of the classifier.
    pub cls_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            adam: AdamConfig::default(),
            cosine: CosineRestartSchedule::default(),
            plateau: PlateauConfig::default(),
            cls_lr: 1e-4,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.cosine.validate()?;
        PlateauState::new(self.plateau, self.adam.lr)?;
        if !(self.cls_lr >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "cls_lr must be >= 0, got {}",
                self.cls_lr
            )));
        }
        Ok(())
    }
}
