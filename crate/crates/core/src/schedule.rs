//! Noise schedules for the forward process.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Per-step coefficients. Step `t` runs from 1 to `T`; `alpha_bar(0) == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least one step, got {steps}"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(steps),
            ScheduleKind::Cosine => cosine_betas(steps),
        };
        let mut alpha_bars = Vec::with_capacity(steps + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar(t)` for `t` in `0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                lo: 1,
                hi: self.steps(),
            });
        }
        Ok(())
    }

    /// `beta_t`, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))
    }

    /// Coefficients `(c0, ct)` of the posterior mean `c0 * x_0 + ct * x_t`.
    pub fn posterior_mean_coefs(&self, t: usize) -> (f64, f64) {
        let denom = 1.0 - self.alpha_bar(t);
        let c0 = self.beta(t) * libm::sqrt(self.alpha_bar(t - 1)) / denom;
        let ct = (1.0 - self.alpha_bar(t - 1)) * libm::sqrt(self.alpha(t)) / denom;
        (c0, ct)
    }
}

fn linear_betas(steps: usize) -> Vec<f64> {
    // Endpoints rescaled so that any step count spans the same total noise as 1000 steps.
    let scale = 1000.0 / steps as f64;
    let start = (1e-4 * scale).min(MAX_BETA);
    let end = (0.02 * scale).min(MAX_BETA);
    if steps == 1 {
        return alloc::vec![start];
    }
    (0..steps)
        .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
        .collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |t: f64| {
        let c = libm::cos(
            (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                * core::f64::consts::FRAC_PI_2,
        );
        c * c
    };
    let f0 = f(0.0);
    (1..=steps)
        .map(|t| {
            let prev = f((t - 1) as f64) / f0;
            let cur = f(t as f64) / f0;
            (1.0 - cur / prev).clamp(1e-8, MAX_BETA)
        })
        .collect()
}
