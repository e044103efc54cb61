//! Bias-corrected exponential moving average of parameters.
//!
//! `ema_{n+1} = (1 - beta_n) ema_n + beta_n theta_{n+1}` with
//! `beta_n = (rho + n)^-kappa`, and at evaluation
//! `bema_n = alpha_n (theta_n - theta_0) + ema_n` with `alpha_n = (rho + n)^-eta_b`.
//! A state keeps only `theta_0` (shared) and `ema`; `theta_n` is the live
//! training parameter set.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Tensors;

/// One BEMA hyperparameter triple, as it appears in manifests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BemaHypers {
    pub ema_lag: f64,
    pub ema_power: f64,
    pub bema_power: f64,
}

/// One EMA trajectory and the BEMA powers evaluated from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaSpec {
    pub ema_lag: f64,
    pub ema_power: f64,
    pub bema_powers: Vec<f64>,
}

impl EmaSpec {
    pub fn single(h: BemaHypers) -> Self {
        EmaSpec { ema_lag: h.ema_lag, ema_power: h.ema_power, bema_powers: vec![h.bema_power] }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ema_lag >= 1.0) || !(0.0..=1.0).contains(&self.ema_power) {
            return Err(Error::Config(format!("invalid EMA lag/power: {self:?}")));
        }
        if self.bema_powers.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!("BEMA powers outside [0, 1]: {:?}", self.bema_powers)));
        }
        Ok(())
    }

    pub fn hypers(&self) -> impl Iterator<Item = BemaHypers> + '_ {
        self.bema_powers.iter().map(|&bema_power| BemaHypers { ema_lag: self.ema_lag, ema_power: self.ema_power, bema_power })
    }
}

/// EMA lag 10, EMA powers 0.1..1 and BEMA powers 0.1..1: 100 parameter sets.
pub fn grid_10x10() -> Vec<EmaSpec> {
    let tenths: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    tenths.iter().map(|&k| EmaSpec { ema_lag: 10.0, ema_power: k, bema_powers: tenths.clone() }).collect()
}

#[derive(Clone, Debug)]
pub struct BemaState {
    spec: EmaSpec,
    theta0: Arc<Tensors>,
    ema: Tensors,
    step: u64,
}

impl BemaState {
    pub fn new(spec: EmaSpec, theta0: Arc<Tensors>) -> Result<Self> {
        spec.validate()?;
        let ema = (*theta0).clone();
        Ok(BemaState { spec, theta0, ema, step: 0 })
    }

    pub fn spec(&self) -> &EmaSpec {
        &self.spec
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ema(&self) -> &Tensors {
        &self.ema
    }

    /// `beta_n`, clamped to `[0, 1]`.
    pub fn ema_weight(&self, n: u64) -> f64 {
        (self.spec.ema_lag + n as f64).powf(-self.spec.ema_power).clamp(0.0, 1.0)
    }

    pub fn bema_weight(&self, n: u64, bema_power: f64) -> f64 {
        (self.spec.ema_lag + n as f64).powf(-bema_power)
    }

    /// Folds in `theta_{n+1}`.
    pub fn update(&mut self, theta_next: &Tensors) {
        let beta = self.ema_weight(self.step);
        self.ema.zip_apply(theta_next, |e, t| *e = (1.0 - beta) * *e + beta * t);
        self.step += 1;
    }

    /// BEMA parameters at the current step for one BEMA power.
    pub fn bema_params(&self, theta_n: &Tensors, bema_power: f64) -> Tensors {
        let alpha = self.bema_weight(self.step, bema_power);
        let mut out = self.ema.clone();
        for ((dst, cur), init) in out.slices_mut().into_iter().zip(theta_n.slices()).zip(self.theta0.slices()) {
            for ((o, &c), &i) in dst.iter_mut().zip(cur).zip(init) {
                *o += alpha * (c - i);
            }
        }
        out
    }

    /// Every BEMA parameter set this state fans out to.
    pub fn materialize(&self, theta_n: &Tensors) -> Vec<(BemaHypers, Tensors)> {
        self.spec.hypers().map(|h| (h, self.bema_params(theta_n, h.bema_power))).collect()
    }
}

/// Advances every state on a shared parameter trajectory.
pub fn multi_state_update(states: &mut [BemaState], theta_next: &Tensors) {
    for s in states {
        s.update(theta_next);
    }
}
