//! Variance schedules and the closed-form forward process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Interpolate √β linearly, then square.
    ScaledLinear,
}

/// Reverse-process variance σ_t².
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceKind {
    /// β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)
    #[default]
    Posterior,
    Beta,
}

/// β, α and ᾱ for t = 1..=T. Index with the 1-based timestep through the
/// accessors; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn build_schedule(timesteps: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Validation("schedule needs T ≥ 1".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Validation(format!(
            "need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let frac = |i: usize| {
        if timesteps == 1 {
            0.0
        } else {
            i as f64 / (timesteps - 1) as f64
        }
    };
    let betas = (0..timesteps)
        .map(|i| match kind {
            ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(i),
            ScheduleKind::ScaledLinear => {
                let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                let s = a + (b - a) * frac(i);
                s * s
            }
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Validation("empty beta sequence".into()));
        }
        if betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::Validation("every beta must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation("betas must be non-decreasing".into()));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
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

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::Validation(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma_squared(&self, t: usize, kind: VarianceKind) -> f64 {
        match kind {
            VarianceKind::Beta => self.beta(t),
            VarianceKind::Posterior => self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)),
        }
    }
}

/// `√ᾱ · z0 + √(1 − ᾱ) · noise` for an explicit ᾱ.
pub fn q_sample_with_alpha_bar(z0: &Tensor, alpha_bar: f64, noise: &Tensor) -> Result<Tensor> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    z0.zip_map(noise, |z, e| a * z + b * e)
}

pub fn q_sample(z0: &Tensor, t: usize, noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check_t(t)?;
    q_sample_with_alpha_bar(z0, schedule.alpha_bar(t), noise)
}

/// Per-batch-element timesteps for an `[N, ...]` tensor.
pub fn q_sample_batch(z0: &Tensor, ts: &[usize], noise: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if z0.shape() != noise.shape() || ts.len() != z0.batch() {
        return Err(Error::Shape(format!(
            "z0 {:?}, noise {:?}, {} timesteps",
            z0.shape(),
            noise.shape(),
            ts.len()
        )));
    }
    let per = z0.numel() / ts.len().max(1);
    let mut out = Vec::with_capacity(z0.numel());
    for (n, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let (a, b) = (schedule.alpha_bar(t).sqrt(), (1.0 - schedule.alpha_bar(t)).sqrt());
        let r = n * per..(n + 1) * per;
        out.extend(
            z0.data()[r.clone()]
                .iter()
                .zip(&noise.data()[r])
                .map(|(z, e)| a * z + b * e),
        );
    }
    Tensor::from_vec(z0.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_arithmetic() {
        let s = NoiseSchedule::from_betas(vec![0.1, 0.2]).unwrap();
        assert_eq!(s.alphas(), &[0.9, 0.8]);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn linear_thousand_step_endpoint() {
        let s = build_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        // independent product in log space
        let log: f64 = (0..1000)
            .map(|i| (1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).ln())
            .sum();
        assert!((s.alpha_bar(1000) - log.exp()).abs() < 1e-12);
        assert!((s.alpha_bar(1000) - 4.0358e-5).abs() < 1e-6);
        assert!(s.alpha_bar(1000) < 0.01);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(1000) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn scaled_linear_interpolates_sqrt() {
        let s = build_schedule(3, 0.01, 0.09, ScheduleKind::ScaledLinear).unwrap();
        for (b, e) in s.betas().iter().zip([0.01, 0.04, 0.09]) {
            assert!((b - e).abs() < 1e-15);
        }
    }

    #[test]
    fn identities_hold_exactly() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = build_schedule(50, 1e-3, 0.2, kind).unwrap();
            let mut acc = 1.0;
            for t in 1..=50 {
                assert_eq!(s.alpha(t), 1.0 - s.beta(t));
                acc *= s.alpha(t);
                assert_eq!(s.alpha_bar(t), acc);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
            let rebuilt = NoiseSchedule::from_betas(s.betas().to_vec()).unwrap();
            assert_eq!(rebuilt, s);
        }
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(build_schedule(0, 1e-4, 0.02, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.0, 0.02, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 0.03, 0.02, ScheduleKind::Linear).is_err());
        assert!(build_schedule(10, 1e-4, 1.0, ScheduleKind::Linear).is_err());
        let s = build_schedule(10, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        let z = Tensor::zeros(&[1, 1, 1, 1, 2]);
        assert!(q_sample(&z, 0, &z, &s).is_err());
        assert!(q_sample(&z, 11, &z, &s).is_err());
    }

    #[test]
    fn q_sample_limits_and_linearity() {
        let z0 = Tensor::from_vec(&[1, 1, 1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let e = Tensor::from_vec(&[1, 1, 1, 1, 3], vec![0.3, 0.1, -0.7]).unwrap();
        assert_eq!(q_sample_with_alpha_bar(&z0, 1.0, &e).unwrap(), z0);
        assert_eq!(q_sample_with_alpha_bar(&z0, 0.0, &e).unwrap(), e);
        let s = build_schedule(20, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
        let a = 2.5;
        let lhs = q_sample(&z0.scale(a), 7, &e.scale(a), &s).unwrap();
        let rhs = q_sample(&z0, 7, &e, &s).unwrap().scale(a);
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let both = Tensor::stack(&[z0.clone(), z0.clone()]).unwrap();
        let noise = Tensor::stack(&[e.clone(), e.clone()]).unwrap();
        let b = q_sample_batch(&both, &[3, 9], &noise, &s).unwrap();
        assert_eq!(b.sample(0), q_sample(&z0, 3, &e, &s).unwrap());
        assert_eq!(b.sample(1), q_sample(&z0, 9, &e, &s).unwrap());
    }

    #[test]
    fn posterior_variance_vanishes_at_first_step() {
        let s = build_schedule(10, 1e-3, 0.1, ScheduleKind::Linear).unwrap();
        assert_eq!(s.sigma_squared(1, VarianceKind::Posterior), 0.0);
        assert_eq!(s.sigma_squared(5, VarianceKind::Beta), s.beta(5));
        assert!(s.sigma_squared(5, VarianceKind::Posterior) < s.beta(5));
    }
}
