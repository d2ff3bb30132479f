use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub shape: ScheduleShape,
    /// Permit `beta = 0` (noise-free schedules used by tests).
    #[serde(default)]
    pub allow_degenerate: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            beta_min: 1e-4,
            beta_max: 0.02,
            shape: ScheduleShape::Linear,
            allow_degenerate: false,
        }
    }
}

/// Variance schedule `beta_t` with cumulative products `alpha_bar_t`.
///
/// Steps are 1-based: `t ∈ 1..=T`. Step `0` is the clean sample
/// (`alpha_bar_0 = 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear schedule from `beta_min` to `beta_max` over `steps` steps.
pub fn build_schedule(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    shape: ScheduleShape,
) -> Result<NoiseSchedule> {
    NoiseSchedule::from_config(&ScheduleConfig {
        steps,
        beta_min,
        beta_max,
        shape,
        allow_degenerate: false,
    })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        ensure!(cfg.steps >= 1, Error::Parameter("schedule needs at least one step".into()));
        let lower_ok = if cfg.allow_degenerate {
            cfg.beta_min >= 0.0
        } else {
            cfg.beta_min > 0.0
        };
        ensure!(
            lower_ok && cfg.beta_min <= cfg.beta_max && cfg.beta_max < 1.0,
            Error::Parameter(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{}, {}]",
                cfg.beta_min, cfg.beta_max
            ))
        );
        let betas = match cfg.shape {
            ScheduleShape::Linear => {
                let n = cfg.steps;
                (0..n)
                    .map(|i| {
                        if n == 1 {
                            cfg.beta_min
                        } else {
                            cfg.beta_min + (cfg.beta_max - cfg.beta_min) * i as f64 / (n - 1) as f64
                        }
                    })
                    .collect()
            }
        };
        Self::from_betas(betas)
    }

    /// Schedule from explicit per-step variances, each in `[0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        ensure!(!betas.is_empty(), Error::Parameter("empty beta sequence".into()));
        ensure!(
            betas.iter().all(|b| b.is_finite() && (0.0..1.0).contains(b)),
            Error::Parameter("every beta must lie in [0, 1)".into())
        );
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        ensure!(
            (1..=self.steps()).contains(&t),
            Error::Parameter(format!("step {t} outside 1..={}", self.steps()))
        );
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// `alpha_bar_t`, with `alpha_bar_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}
