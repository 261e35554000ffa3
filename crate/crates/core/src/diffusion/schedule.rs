use serde::{Deserialize, Serialize};

use super::DiffusionError;

/// Linear beta schedule and its cumulative signal fraction `ᾱ_t = ∏(1 − β)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f32>,
    alpha_bars: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f32,
    pub beta_end: f32,
}

impl Default for ScheduleParams {
    /// 100 steps, β from 1e-4 to 0.07. The end value is the smallest round
    /// number that takes ᾱ below 0.05 at the last step.
    fn default() -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.07,
        }
    }
}

impl NoiseSchedule {
    pub fn linear(params: ScheduleParams) -> Result<Self, DiffusionError> {
        let ScheduleParams {
            steps,
            beta_start,
            beta_end,
        } = params;
        if steps < 2 {
            return Err(DiffusionError::Schedule(format!("need at least 2 steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::Schedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let (b0, b1) = (f64::from(beta_start), f64::from(beta_end));
        let mut betas = Vec::with_capacity(steps);
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut prod = 1.0f64;
        for i in 0..steps {
            let beta = b0 + (b1 - b0) * i as f64 / (steps - 1) as f64;
            prod *= 1.0 - beta;
            betas.push(beta as f32);
            alpha_bars.push(prod as f32);
        }
        Ok(Self {
            params,
            betas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f32 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f32 {
        self.alpha_bars[t]
    }

    pub fn alpha_bars(&self) -> &[f32] {
        &self.alpha_bars
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t >= self.steps() {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                steps: self.steps(),
            });
        }
        Ok(())
    }
}
