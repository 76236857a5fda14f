//! Polynomial variance-preserving noise schedule.
//!
//! `alpha_t = (1 - 2s)(1 - (t/T)^2) + s` and `sigma_t = sqrt(1 - alpha_t^2)`,
//! tabulated for `t = 0..=T` at construction.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLAMP: f64 = 1e-5;
/// Lower bound applied to alpha and sigma before they are used as divisors.
pub const SCHEDULE_FLOOR: f64 = 1e-6;

/// Floored `alpha_t` for a schedule of `steps` steps.
pub fn alpha_at(t: usize, steps: usize, clamp: f64) -> f64 {
    let frac = t as f64 / steps as f64;
    // (1 - s) - (1 - 2s) f^2 is the same polynomial, written so both endpoints are exact
    if t >= steps {
        clamp
    } else {
        (1.0 - clamp) - (1.0 - 2.0 * clamp) * frac * frac
    }
    .max(SCHEDULE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    clamp: f64,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
    sigma2: Vec<f64>,
    gamma: Vec<f64>,
}

/// Quantities linking step `t` to an earlier step `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRatios {
    /// alpha_t / alpha_s
    pub alpha_ts: f64,
    /// sigma_t^2 - alpha_ts^2 sigma_s^2
    pub sigma2_ts: f64,
    /// sigma_{t|s} sigma_s / sigma_t, the posterior standard deviation
    pub sigma_t_to_s: f64,
}

impl NoiseSchedule {
    pub fn new(steps: usize, clamp: f64) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(clamp > 0.0 && clamp < 0.5) {
            return Err(Error::Config(format!(
                "schedule clamp s={clamp} must lie in (0, 0.5)"
            )));
        }
        let mut alpha = Vec::with_capacity(steps + 1);
        let mut sigma = Vec::with_capacity(steps + 1);
        let mut sigma2 = Vec::with_capacity(steps + 1);
        let mut gamma = Vec::with_capacity(steps + 1);
        for t in 0..=steps {
            let a = alpha_at(t, steps, clamp);
            let s2 = (1.0 - a * a).max(SCHEDULE_FLOOR * SCHEDULE_FLOOR);
            alpha.push(a);
            sigma.push(s2.sqrt());
            sigma2.push(s2);
            gamma.push(s2.ln() - (a * a).ln());
        }
        Ok(Self {
            steps,
            clamp,
            alpha,
            sigma,
            sigma2,
            gamma,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha[t] * self.alpha[t] / self.sigma2[t]
    }

    /// Negative log signal-to-noise ratio.
    pub fn gamma(&self, t: usize) -> f64 {
        self.gamma[t]
    }

    pub fn step_ratios(&self, t: usize, s: usize) -> Result<StepRatios> {
        if s >= t || t > self.steps {
            return Err(Error::Ordering { s, t });
        }
        let alpha_ts = self.alpha[t] / self.alpha[s];
        let sigma2_ts = (self.sigma2[t] - alpha_ts * alpha_ts * self.sigma2[s]).max(0.0);
        let sigma_t_to_s = sigma2_ts.sqrt() * self.sigma[s] / self.sigma[t].max(SCHEDULE_FLOOR);
        Ok(StepRatios {
            alpha_ts,
            sigma2_ts,
            sigma_t_to_s,
        })
    }

    /// `t,alpha,sigma,gamma` rows for plotting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,alpha,sigma,gamma")?;
        for t in 0..=self.steps {
            writeln!(
                out,
                "{t},{},{},{}",
                self.alpha[t], self.sigma[t], self.gamma[t]
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn endpoints_and_midpoint() {
        let s = NoiseSchedule::new(1000, 1e-5).unwrap();
        assert_eq!(s.alpha(0), 1.0 - 1e-5);
        assert_eq!(s.alpha(1000), 1e-5);
        assert!((s.alpha(500) - 0.749995).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::new(0, 1e-5).is_err());
        assert!(NoiseSchedule::new(10, 0.0).is_err());
        assert!(NoiseSchedule::new(10, 0.5).is_err());
    }

    #[test]
    fn identities_hold_on_every_step() {
        for steps in [1, 50, 1000] {
            let s = NoiseSchedule::new(steps, 1e-5).unwrap();
            for t in 0..=steps {
                let a2 = s.alpha(t).powi(2);
                assert!((a2 + s.sigma(t).powi(2) - 1.0).abs() <= 1e-12);
                assert!((sigmoid(-s.gamma(t)) - a2).abs() <= 1e-12);
                assert!((s.gamma(t) + s.snr(t).ln()).abs() <= 1e-12);
                if t > 0 {
                    assert!(s.alpha(t) < s.alpha(t - 1));
                    assert!(s.sigma(t) > s.sigma(t - 1));
                    assert!(s.snr(t) < s.snr(t - 1));
                    assert!(s.gamma(t) > s.gamma(t - 1));
                }
            }
        }
    }

    #[test]
    fn snr_examples() {
        // hand values alpha^2 = 0.8, sigma^2 = 0.2
        let (a2, s2) = (0.8f64, 0.2f64);
        assert!((a2 / s2 - 4.0).abs() < 1e-12);
        assert!((-(a2 / s2).ln() + 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn step_ratios_match_direct_recomputation() {
        let s = NoiseSchedule::new(50, 1e-5).unwrap();
        let r = s.step_ratios(50, 49).unwrap();
        let (at, as_) = (s.alpha(50), s.alpha(49));
        let ats = at / as_;
        let s2ts = (1.0 - at * at) - ats * ats * (1.0 - as_ * as_);
        assert!((r.alpha_ts - ats).abs() < 1e-15);
        assert!((r.sigma2_ts - s2ts).abs() < 1e-12);
        let sts = s2ts.sqrt() * (1.0 - as_ * as_).sqrt() / (1.0 - at * at).sqrt();
        assert!((r.sigma_t_to_s - sts).abs() < 1e-12);
        assert!(matches!(s.step_ratios(5, 5), Err(Error::Ordering { .. })));
        assert!(s.step_ratios(5, 7).is_err());
    }

    #[test]
    fn composition_and_nonnegative_variance() {
        let s = NoiseSchedule::new(50, 1e-5).unwrap();
        for t in 2..=50 {
            for m in 1..t {
                for r in 0..m {
                    let lhs = s.step_ratios(t, m).unwrap().alpha_ts
                        * s.step_ratios(m, r).unwrap().alpha_ts;
                    assert!((lhs - s.step_ratios(t, r).unwrap().alpha_ts).abs() < 1e-10);
                }
                assert!(s.step_ratios(t, m).unwrap().sigma2_ts >= 0.0);
            }
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let s = NoiseSchedule::new(4, 1e-5).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.starts_with("t,alpha,sigma,gamma\n0,"));
    }
}
