//! Noise schedule, closed-form forward noising and the noise-to-mean conversion.
//!
//! Timesteps are 1-based: `t` ranges over `[1, T]`. Internally index `t - 1` is used.
//! The per-step signal retention `alpha_t` is interpolated linearly between its end
//! points; this differs from the common convention of interpolating `beta_t = 1 - alpha_t`
//! only in how the endpoints are parameterized (the resulting betas are also linear).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            alpha_start: 1.0 - 1e-4,
            alpha_end: 1.0 - 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.alpha_start, self.alpha_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of `alpha_t` from `alpha_start` at `t = 1` to `alpha_end` at `t = T`.
    pub fn linear(timesteps: usize, alpha_start: f64, alpha_end: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(alpha_end > 0.0 && alpha_end <= alpha_start && alpha_start < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < alpha_end <= alpha_start < 1, got start={alpha_start}, end={alpha_end}"
            )));
        }
        let alphas = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    alpha_start
                } else {
                    let w = i as f64 / (timesteps - 1) as f64;
                    alpha_start * (1.0 - w) + alpha_end * w
                }
            })
            .collect();
        Self::from_alphas(alphas)
    }

    /// Builds a schedule from explicit per-step alphas in `(0, 1]`.
    ///
    /// `alpha = 1` is accepted here for degenerate test schedules; [`Self::linear`]
    /// enforces the strict interior.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if let Some(a) = alphas.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config(format!("alpha {a} outside (0, 1]")));
        }
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0f64;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(Self { alphas, alpha_bars })
    }

    pub fn timesteps(&self) -> usize {
        self.alphas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::TimestepRange {
                t,
                max: self.timesteps(),
            });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let denom = 1.0 - self.alpha_bar(t);
        if denom <= 0.0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar(t - 1)) / denom * self.beta(t)
    }

    /// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`, with one timestep per batch item.
    pub fn forward_noise<F: Scalar>(
        &self,
        x0: &Tensor<F>,
        t: &[usize],
        eps: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        x0.expect_same_shape(eps)?;
        self.check_batch(x0, t)?;
        let mut out = Tensor::zeros(x0.shape());
        for (i, &ti) in t.iter().enumerate() {
            let ab = self.alpha_bar(ti);
            let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
            for ((o, &x), &e) in out.item_mut(i).iter_mut().zip(x0.item(i)).zip(eps.item(i)) {
                *o = a * x + b * e;
            }
        }
        Ok(out)
    }

    /// Reverse-step mean `(x_t - (1 - alpha_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`.
    pub fn mean_from_eps<F: Scalar>(
        &self,
        x_t: &Tensor<F>,
        t: &[usize],
        eps_hat: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        x_t.expect_same_shape(eps_hat)?;
        self.check_batch(x_t, t)?;
        let mut out = Tensor::zeros(x_t.shape());
        for (i, &ti) in t.iter().enumerate() {
            let one_minus_ab = 1.0 - self.alpha_bar(ti);
            let coef = if one_minus_ab > 0.0 {
                self.beta(ti) / one_minus_ab.sqrt()
            } else {
                0.0
            };
            let (inv, coef) = (F::of(1.0 / self.alpha(ti).sqrt()), F::of(coef));
            for ((o, &x), &e) in out.item_mut(i).iter_mut().zip(x_t.item(i)).zip(eps_hat.item(i)) {
                *o = inv * (x - coef * e);
            }
        }
        Ok(out)
    }

    fn check_batch<F: Scalar>(&self, x: &Tensor<F>, t: &[usize]) -> Result<()> {
        if x.shape().is_empty() || x.dim(0) != t.len() {
            return Err(Error::Shape(format!(
                "{} timesteps for batch shape {:?}",
                t.len(),
                x.shape()
            )));
        }
        t.iter().try_for_each(|&ti| self.check(ti))
    }
}
