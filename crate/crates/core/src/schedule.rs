//! Noise schedules and the forward (noising) diffusion process.
//!
//! Timesteps are 1-based at the API (`1..=T`), with `alpha_bar(0) == 1`
//! standing for the clean image. Storage is 0-based.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Domain, ImageTensor};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Parameters from which a linear schedule is rebuilt (stored in configs and
/// checkpoints).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    /// Linear bounds rescaled by `1000 / steps` so that short chains still end
    /// near pure noise. Equal to the defaults at 1000 steps.
    pub fn scaled_for(steps: usize) -> Self {
        let scale = DEFAULT_STEPS as f64 / steps.max(1) as f64;
        Self {
            steps,
            beta_start: (DEFAULT_BETA_START * scale).min(0.5),
            beta_end: (DEFAULT_BETA_END * scale).min(0.999),
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sqrt_alpha_bars: Vec<f64>,
    sqrt_one_minus_alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` at t=1 to `beta_end` at t=T.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid(format!(
                "beta bounds must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * (i as f64 / (steps - 1) as f64)
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Arbitrary betas in the closed interval `[0, 1]`; the endpoints are
    /// allowed so degenerate schedules can be expressed.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(invalid("schedule needs at least one step"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(invalid(format!("beta {b} outside [0, 1]")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sqrt_alpha_bars = alpha_bars.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bars = alpha_bars.iter().map(|a| (1.0 - a).sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sqrt_alpha_bars,
            sqrt_one_minus_alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
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

    pub fn sqrt_alpha_bars(&self) -> &[f64] {
        &self.sqrt_alpha_bars
    }

    pub fn sqrt_one_minus_alpha_bars(&self) -> &[f64] {
        &self.sqrt_one_minus_alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// DDPM posterior variance `(1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let denom = 1.0 - self.alpha_bar(t);
        if denom <= 0.0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar(t - 1)) / denom * self.beta(t)
    }

    /// Sub-sequence of timesteps with `stride` spacing, always ending at T.
    /// Returns the equivalent shorter schedule and, for each of its steps,
    /// the original timestep the denoiser should be queried with.
    pub fn respaced(&self, stride: usize) -> Result<(NoiseSchedule, Vec<usize>)> {
        if stride == 0 {
            return Err(invalid("stride must be positive"));
        }
        let steps = self.steps();
        let mut visited: Vec<usize> = (1..=steps).rev().step_by(stride).collect();
        visited.reverse();
        let mut betas = Vec::with_capacity(visited.len());
        let mut prev = 1.0;
        for &t in &visited {
            let ab = self.alpha_bar(t);
            betas.push((1.0 - ab / prev).clamp(0.0, 1.0));
            prev = ab;
        }
        Ok((NoiseSchedule::from_betas(betas)?, visited))
    }

    /// CSV with columns `t,beta,alpha,alpha_bar,sqrt_alpha_bar,sqrt_one_minus_alpha_bar`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,sqrt_alpha_bar,sqrt_one_minus_alpha_bar\n");
        for i in 0..self.steps() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                self.betas[i],
                self.alphas[i],
                self.alpha_bars[i],
                self.sqrt_alpha_bars[i],
                self.sqrt_one_minus_alpha_bars[i]
            ));
        }
        out
    }
}

/// One Markov step `sqrt(1 - beta_t) * y + sqrt(beta_t) * z`.
pub fn forward_step<R: Rng + ?Sized>(
    y_prev: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    sched.check_step(t)?;
    if !y_prev.is_finite() {
        return Err(Error::NonFinite(format!("forward_step input at t={t}")));
    }
    let keep = (1.0 - sched.beta(t)).sqrt();
    let noise = sched.beta(t).sqrt();
    let mut out = y_prev.clone().with_domain(Domain::Signed);
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = keep * *v + noise * z;
    }
    Ok(out)
}

/// Closed-form sample of `y_t` given `y_0`; returns `(y_t, eps)`.
pub fn forward_marginal<R: Rng + ?Sized>(
    y0: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    sched.check_step(t)?;
    let eps = ImageTensor::randn(y0.channels(), y0.height(), y0.width(), rng);
    let y_t = forward_marginal_with(y0, &eps, t, sched)?;
    Ok((y_t, eps))
}

/// Deterministic part of [`forward_marginal`] for a given noise draw.
pub fn forward_marginal_with(
    y0: &ImageTensor,
    eps: &ImageTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<ImageTensor> {
    sched.check_step(t)?;
    y0.ensure_same_shape(eps)?;
    let a = sched.sqrt_alpha_bars[t - 1];
    let b = sched.sqrt_one_minus_alpha_bars[t - 1];
    let data = y0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&y, &e)| a * y + b * e)
        .collect();
    ImageTensor::new(y0.channels(), y0.height(), y0.width(), data, Domain::Signed)
}
