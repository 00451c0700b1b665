use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear β schedule; same as [`NoiseSchedule::linear`].
pub fn build_schedule<T: Scalar>(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule<T>> {
    NoiseSchedule::linear(steps, beta_start, beta_end)
}

/// Per-step variances `β_t` with `α_t = 1 − β_t` and `ᾱ_t = Π_{s≤t} α_s`.
///
/// Steps are 1-based in the public API; `beta(t)` is `β_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<T> {
    beta: Vec<T>,
    alpha: Vec<T>,
    alpha_bar: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// Linear interpolation of β from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                T::of(beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        Self::from_betas(beta)
    }

    /// Schedule from explicit variances in `[0, 1)`, non-decreasing.
    ///
    /// `β = 0` is accepted as the noiseless limit.
    pub fn from_betas(beta: Vec<T>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if beta.iter().any(|&b| !(b >= T::zero() && b < T::one())) {
            return Err(Error::Config("every beta must lie in [0, 1)".into()));
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("betas must be non-decreasing".into()));
        }
        let alpha: Vec<T> = beta.iter().map(|&b| T::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = T::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step { t, steps: self.steps() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> T {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> T {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> T {
        self.alpha_bar[t - 1]
    }

    pub fn betas(&self) -> &[T] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bar
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let s = NoiseSchedule::<f64>::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        assert_eq!(s.steps(), 100);
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(100) - 0.02).abs() < 1e-17);
        // ᾱ_T from the product of the 100 interpolated terms, computed independently
        let mut prod = 1.0;
        for i in 0..100 {
            prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 99.0);
        }
        assert!((s.alpha_bar(100) - prod).abs() < 1e-15);
        assert!((prod - 0.363_563_248).abs() < 1e-8);
        assert_eq!(s.alpha_bar(1), s.alpha(1));
        for t in 2..=100 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
            assert!(s.beta(t) >= s.beta(t - 1));
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::<f64>::linear(1, 0.3, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.3]);
        assert_eq!(build_schedule::<f64>(1, 0.3, 0.5).unwrap(), s);
    }

    #[test]
    fn rejects_bad_bounds() {
        for (t, a, b) in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.03, 0.02), (10, 1e-4, 1.0)] {
            assert!(matches!(NoiseSchedule::<f64>::linear(t, a, b), Err(Error::Config(_))));
        }
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
        let s = NoiseSchedule::<f64>::linear(5, 0.1, 0.2).unwrap();
        assert!(matches!(s.check_step(0), Err(Error::Step { .. })));
        assert!(matches!(s.check_step(6), Err(Error::Step { .. })));
    }
}
