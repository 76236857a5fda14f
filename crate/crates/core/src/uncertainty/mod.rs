//! Predictive uncertainty: property estimates, threshold probabilities and
//! calibration metrics.

mod calibration;
mod oracle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibration::{auce, calibration_curve, pearson_matrix, r_squared, CALIBRATION_LEVELS};
pub use oracle::{PropertyOracle, PropertyTable, SyntheticOracle, SyntheticProperty, TableOracle};

/// Standard deviations are floored here before any CDF evaluation.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// Predictive mean with its aleatoric and epistemic variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropertyEstimate {
    pub mean: f64,
    pub var_aleatoric: f64,
    pub var_epistemic: f64,
}

impl PropertyEstimate {
    pub fn total_variance(&self) -> f64 {
        self.var_aleatoric + self.var_epistemic
    }

    pub fn sigma(&self) -> f64 {
        self.total_variance().max(0.0).sqrt().max(SIGMA_FLOOR)
    }
}

/// Normal-Inverse-Gamma evidential output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NigParams {
    pub gamma_mean: f64,
    pub nu: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// Aleatoric `beta / (alpha - 1)` and epistemic `beta / (nu (alpha - 1))` variance.
pub fn nig_to_estimate(nig: &NigParams) -> Result<PropertyEstimate> {
    if !(nig.alpha > 1.0) {
        return Err(Error::Domain(format!(
            "NIG alpha = {} must exceed 1",
            nig.alpha
        )));
    }
    if !(nig.nu > 0.0) || !(nig.beta > 0.0) {
        return Err(Error::Domain(format!(
            "NIG nu = {} and beta = {} must be positive",
            nig.nu, nig.beta
        )));
    }
    let a1 = nig.alpha - 1.0;
    Ok(PropertyEstimate {
        mean: nig.gamma_mean,
        var_aleatoric: nig.beta / a1,
        var_epistemic: nig.beta / (nig.nu * a1),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Larger is better: reward the upper tail `P(X >= delta)`.
    Maximize,
    /// Smaller is better: reward the lower tail `P(X <= delta)`.
    Minimize,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }

    /// Whether `value` clears `cutoff` strictly.
    pub fn satisfied(self, value: f64, cutoff: f64) -> bool {
        match self {
            Direction::Maximize => value > cutoff,
            Direction::Minimize => value < cutoff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub name: String,
    pub direction: Direction,
    pub cutoff: f64,
}

/// Probability that the property clears its cutoff under `N(mean, sigma^2)`.
pub fn single_objective_prob(est: &PropertyEstimate, spec: &ObjectiveSpec) -> f64 {
    tail_probability(est.mean, est.sigma(), spec.cutoff, spec.direction)
}

pub fn tail_probability(mean: f64, sigma: f64, cutoff: f64, direction: Direction) -> f64 {
    let z = (mean - cutoff) / (sigma.max(SIGMA_FLOOR) * std::f64::consts::SQRT_2);
    match direction {
        // 1 - Phi((delta - mu) / sigma)
        Direction::Maximize => 0.5 * libm::erfc(-z),
        Direction::Minimize => 0.5 * libm::erfc(z),
    }
}

/// Joint satisfaction probability assuming independent properties.
pub fn multi_objective_prob(ests: &[PropertyEstimate], specs: &[ObjectiveSpec]) -> Result<f64> {
    if ests.len() != specs.len() || ests.is_empty() {
        return Err(Error::Shape(format!(
            "{} estimates for {} objectives",
            ests.len(),
            specs.len()
        )));
    }
    Ok(ests
        .iter()
        .zip(specs)
        .map(|(e, s)| single_objective_prob(e, s))
        .product())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(direction: Direction, cutoff: f64) -> ObjectiveSpec {
        ObjectiveSpec {
            name: "p".into(),
            direction,
            cutoff,
        }
    }

    fn est(mean: f64, sigma: f64) -> PropertyEstimate {
        PropertyEstimate {
            mean,
            var_aleatoric: sigma * sigma,
            var_epistemic: 0.0,
        }
    }

    #[test]
    fn nig_examples() {
        let e = nig_to_estimate(&NigParams {
            gamma_mean: 0.3,
            nu: 1.0,
            alpha: 2.0,
            beta: 1.0,
        })
        .unwrap();
        assert_eq!(
            (e.var_aleatoric, e.var_epistemic, e.total_variance()),
            (1.0, 1.0, 2.0)
        );
        assert_eq!(e.mean, 0.3);
        let e = nig_to_estimate(&NigParams {
            gamma_mean: 0.0,
            nu: 4.0,
            alpha: 3.0,
            beta: 2.0,
        })
        .unwrap();
        assert_eq!((e.var_aleatoric, e.var_epistemic), (1.0, 0.25));
        let wide = nig_to_estimate(&NigParams {
            gamma_mean: 0.0,
            nu: 1e12,
            alpha: 2.0,
            beta: 1.0,
        })
        .unwrap();
        assert!(wide.var_epistemic < 1e-11);
        for alpha in [1.0, 0.5, 1.0 - 1e-15] {
            let r = nig_to_estimate(&NigParams {
                gamma_mean: 0.0,
                nu: 1.0,
                alpha,
                beta: 1.0,
            });
            assert!(matches!(r, Err(Error::Domain(_))));
        }
    }

    #[test]
    fn single_objective_examples() {
        assert_eq!(
            single_objective_prob(&est(2.0, 0.7), &spec(Direction::Maximize, 2.0)),
            0.5
        );
        assert_eq!(
            single_objective_prob(&est(2.0, 0.7), &spec(Direction::Minimize, 2.0)),
            0.5
        );
        let up = single_objective_prob(&est(1.5, 0.5), &spec(Direction::Maximize, 1.0));
        let down = single_objective_prob(&est(1.5, 0.5), &spec(Direction::Minimize, 1.0));
        assert!((up - 0.841344746068543).abs() < 1e-12);
        assert!((down - 0.158655253931457).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_floored() {
        let p = single_objective_prob(&est(1.0, 0.0), &spec(Direction::Maximize, 1.0 - 1e-3));
        assert_eq!(p, 1.0);
        assert!(single_objective_prob(&est(1.0, 0.0), &spec(Direction::Maximize, 1.0)).is_finite());
    }

    #[test]
    fn multi_objective_examples() {
        let half = est(0.0, 1.0);
        let s = spec(Direction::Maximize, 0.0);
        let specs = vec![s.clone(), s.clone(), s.clone()];
        assert_eq!(
            multi_objective_prob(&[half, half, half], &specs).unwrap(),
            0.125
        );
        assert!(multi_objective_prob(&[half, half], &specs).is_err());
        let sure = est(100.0, 1.0);
        assert_eq!(
            multi_objective_prob(&[sure, sure, sure], &specs).unwrap(),
            1.0
        );
        let never = est(-100.0, 1.0);
        assert_eq!(
            multi_objective_prob(&[sure, never, sure], &specs).unwrap(),
            0.0
        );
    }
}
