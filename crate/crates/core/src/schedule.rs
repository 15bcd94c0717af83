//! Linear-beta noise schedule, closed-form forward noising, and the one-step
//! reverse estimate.
//!
//! Conventions: timesteps are 1-indexed at every public boundary (t in 1..=T)
//! and stored 0-indexed internally. The noising form is
//! z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps, whose exact algebraic
//! inverse under a known eps is one_step_reverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta grid from beta_start to beta_end over T steps.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::invalid("schedule needs T >= 1"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        for i in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                i as f64 / (t_max - 1) as f64
            };
            betas.push(beta_start + (beta_end - beta_start) * frac);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t_max);
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            t_max,
            beta_start,
            beta_end,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta_range(&self) -> (f64, f64) {
        (self.beta_start, self.beta_end)
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.t_max {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.t_max
            )));
        }
        Ok(())
    }

    /// abar_t for a 1-indexed timestep.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// abar extended to t = 0, where the latent is clean: abar_0 = 1.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.alpha_bar(t)
    }

    /// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps
    pub fn forward_noise(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::Shape {
                context: "forward_noise",
                expected: z0.shape().to_vec(),
                got: eps.shape().to_vec(),
            });
        }
        let ab = self.alpha_bars[t - 1];
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        z0.zip_map(eps, |z, e| cs * z + cn * e)
    }

    /// zhat_0 = (z_t - sqrt(1 - abar_t) eps_pred) / sqrt(abar_t);
    /// the exact inverse of forward_noise when eps_pred equals the true eps.
    pub fn one_step_reverse(&self, zt: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if zt.shape() != eps_pred.shape() {
            return Err(Error::Shape {
                context: "one_step_reverse",
                expected: zt.shape().to_vec(),
                got: eps_pred.shape().to_vec(),
            });
        }
        let ab = self.alpha_bars[t - 1];
        let inv = 1.0 / ab.sqrt();
        let cn = (1.0 - ab).sqrt();
        zt.zip_map(eps_pred, |z, e| (z - cn * e) * inv)
    }

    /// Coefficients (1/sqrt(abar_t), -sqrt(1-abar_t)/sqrt(abar_t)) so callers
    /// can express one_step_reverse as a linear map on a differentiation tape.
    pub fn reverse_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_t(t)?;
        let ab = self.alpha_bars[t - 1];
        let inv = 1.0 / ab.sqrt();
        Ok((inv, -(1.0 - ab).sqrt() * inv))
    }

    /// Descending timestep grid for a sampler run: `num_steps` values evenly
    /// spaced over (0, T], starting at T, deduplicated when num_steps > T.
    pub fn sampling_timesteps(&self, num_steps: usize) -> Result<Vec<usize>> {
        if num_steps < 1 {
            return Err(Error::invalid("num_steps must be >= 1"));
        }
        let n = num_steps.min(self.t_max);
        let mut ts = Vec::with_capacity(n);
        for i in 0..n {
            // Largest value first: round(T * (n - i) / n), always >= 1.
            let t = ((self.t_max as f64) * ((n - i) as f64) / (n as f64)).round() as usize;
            ts.push(t.max(1));
        }
        ts.dedup();
        Ok(ts)
    }
}
