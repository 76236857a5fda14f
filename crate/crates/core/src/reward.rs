//! Per-molecule reward: joint satisfaction probability times a quality
//! bonus, minus a decaying in-batch similarity penalty.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{tanimoto, Fingerprint};
use crate::uncertainty::{multi_objective_prob, Direction, ObjectiveSpec, PropertyEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CutoffMode {
    Dynamic,
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub b_valid: f64,
    pub b_unique: f64,
    pub b_novel: f64,
    pub lambda0: f64,
    /// Per-episode exponential decay of the diversity weight.
    pub decay_rate: f64,
    pub cutoff_mode: CutoffMode,
    pub ema_momentum: f64,
    pub bonus_enabled: bool,
    pub diversity_enabled: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            b_valid: 0.2,
            b_unique: 0.35,
            b_novel: 0.05,
            lambda0: 0.1,
            decay_rate: 0.05,
            cutoff_mode: CutoffMode::Dynamic,
            ema_momentum: 0.9,
            bonus_enabled: true,
            diversity_enabled: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.b_valid,
            self.b_unique,
            self.b_novel,
            self.lambda0,
            self.decay_rate,
        ];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(
                "reward weights must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum {} must lie in [0, 1)",
                self.ema_momentum
            )));
        }
        Ok(())
    }
}

/// Quality multiplier. With the bonus disabled this is the constant 1 so the
/// uncertainty reward keeps flowing.
pub fn bonus(valid: bool, unique: bool, novel: bool, cfg: &RewardConfig) -> f64 {
    if !cfg.bonus_enabled {
        return 1.0;
    }
    let f = |b: bool| if b { 1.0 } else { 0.0 };
    cfg.b_valid * f(valid) + cfg.b_unique * f(unique) + cfg.b_novel * f(novel)
}

/// Mean Tanimoto similarity of each fingerprint to the rest of the batch.
pub fn batch_diversity(fingerprints: &[Fingerprint]) -> Result<Vec<f64>> {
    let n = fingerprints.len();
    if n <= 1 {
        return Ok(vec![0.0; n]);
    }
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in i + 1..n {
            let s = tanimoto(&fingerprints[i], &fingerprints[j])?;
            sums[i] += s;
            sums[j] += s;
        }
    }
    Ok(sums.into_iter().map(|s| s / (n - 1) as f64).collect())
}

pub fn lambda_at(episode: usize, cfg: &RewardConfig) -> f64 {
    if !cfg.diversity_enabled {
        return 0.0;
    }
    cfg.lambda0 * (-cfg.decay_rate * episode as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub u_multi: f64,
    pub bonus: f64,
    pub diversity: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_reward(u_multi: f64, bonus: f64, diversity: f64, lambda: f64) -> RewardBreakdown {
    RewardBreakdown {
        u_multi,
        bonus,
        diversity,
        lambda,
        total: u_multi * bonus - lambda * diversity,
    }
}

/// Property cutoffs tracking an exponential moving average of generated
/// batch means, never looser than the configured static cutoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicCutoffState {
    pub objectives: Vec<ObjectiveSpec>,
    /// `None` until the first batch has been seen.
    pub ema: Vec<Option<f64>>,
}

impl DynamicCutoffState {
    /// `objectives` carry the floor cutoffs.
    pub fn new(objectives: Vec<ObjectiveSpec>) -> Self {
        let ema = vec![None; objectives.len()];
        Self { objectives, ema }
    }

    /// Cutoff currently in force for property `k`.
    pub fn cutoff(&self, k: usize) -> f64 {
        let spec = &self.objectives[k];
        match (self.ema[k], spec.direction) {
            (None, _) => spec.cutoff,
            (Some(e), Direction::Maximize) => e.max(spec.cutoff),
            (Some(e), Direction::Minimize) => e.min(spec.cutoff),
        }
    }

    /// Objectives with the cutoffs in force.
    pub fn current(&self) -> Vec<ObjectiveSpec> {
        (0..self.objectives.len())
            .map(|k| ObjectiveSpec {
                cutoff: self.cutoff(k),
                ..self.objectives[k].clone()
            })
            .collect()
    }

    /// Folds one batch of property means into the average. A no-op in static mode.
    pub fn update(&mut self, batch_means: &[f64], cfg: &RewardConfig) -> Result<()> {
        if batch_means.len() != self.objectives.len() {
            return Err(Error::Shape(format!(
                "{} batch means for {} objectives",
                batch_means.len(),
                self.objectives.len()
            )));
        }
        if cfg.cutoff_mode == CutoffMode::Static {
            return Ok(());
        }
        let m = cfg.ema_momentum;
        for (e, &b) in self.ema.iter_mut().zip(batch_means) {
            if !b.is_finite() {
                continue;
            }
            *e = Some(match *e {
                Some(prev) => m * prev + (1.0 - m) * b,
                None => b,
            });
        }
        Ok(())
    }
}

/// Per-molecule inputs to the reward.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardInput {
    pub estimates: Vec<PropertyEstimate>,
    pub valid: bool,
    pub unique: bool,
    pub novel: bool,
}

/// Rewards for a whole batch under the cutoffs in `state`.
pub fn score_batch(
    inputs: &[RewardInput],
    fingerprints: &[Fingerprint],
    state: &DynamicCutoffState,
    episode: usize,
    cfg: &RewardConfig,
) -> Result<Vec<RewardBreakdown>> {
    if inputs.len() != fingerprints.len() {
        return Err(Error::Shape(
            "one fingerprint per molecule is required".into(),
        ));
    }
    let objectives = state.current();
    let lambda = lambda_at(episode, cfg);
    let diversity = if cfg.diversity_enabled {
        batch_diversity(fingerprints)?
    } else {
        vec![0.0; inputs.len()]
    };
    inputs
        .iter()
        .zip(diversity)
        .map(|(inp, d)| {
            let u = multi_objective_prob(&inp.estimates, &objectives)?;
            Ok(total_reward(
                u,
                bonus(inp.valid, inp.unique, inp.novel, cfg),
                d,
                lambda,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fp(bits: &[usize]) -> Fingerprint {
        let mut f = Fingerprint::new(64);
        for &b in bits {
            f.set(b);
        }
        f
    }

    #[test]
    fn bonus_examples() {
        let cfg = RewardConfig::default();
        assert!((bonus(true, true, true, &cfg) - 0.6).abs() < 1e-15);
        assert_eq!(bonus(false, false, false, &cfg), 0.0);
        assert_eq!(bonus(true, false, false, &cfg), 0.2);
        let off = RewardConfig {
            bonus_enabled: false,
            ..cfg
        };
        assert_eq!(bonus(false, false, false, &off), 1.0);
    }

    #[test]
    fn diversity_examples() {
        let same = vec![fp(&[1, 2]); 3];
        assert_eq!(batch_diversity(&same).unwrap(), vec![1.0; 3]);
        let disjoint = vec![fp(&[1]), fp(&[2]), fp(&[3])];
        assert_eq!(batch_diversity(&disjoint).unwrap(), vec![0.0; 3]);
        assert_eq!(batch_diversity(&[fp(&[4])]).unwrap(), vec![0.0]);
    }

    #[test]
    fn lambda_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(lambda_at(0, &cfg), 0.1);
        assert!((lambda_at(20, &cfg) - 0.036787944117144).abs() < 1e-12);
        let flat = RewardConfig {
            decay_rate: 0.0,
            ..cfg.clone()
        };
        assert_eq!(lambda_at(50, &flat), 0.1);
        let off = RewardConfig {
            diversity_enabled: false,
            ..cfg
        };
        assert_eq!(lambda_at(0, &off), 0.0);
    }

    #[test]
    fn total_examples() {
        let r = total_reward(0.5, 0.6, 0.5, 0.1);
        assert!((r.total - 0.25).abs() < 1e-15);
        assert_eq!(total_reward(0.5, 0.6, 0.9, 0.0).total, 0.5 * 0.6);
        assert!((total_reward(0.0, 0.6, 1.0, 0.1).total + 0.1).abs() < 1e-15);
    }

    fn objective(direction: Direction, cutoff: f64) -> ObjectiveSpec {
        ObjectiveSpec {
            name: "p".into(),
            direction,
            cutoff,
        }
    }

    #[test]
    fn ema_update_example() {
        let cfg = RewardConfig::default();
        let mut st = DynamicCutoffState::new(vec![objective(Direction::Maximize, 0.1)]);
        st.ema[0] = Some(0.5);
        st.update(&[0.7], &cfg).unwrap();
        assert!((st.ema[0].unwrap() - 0.52).abs() < 1e-15);
        let before = st.clone();
        st.update(&[0.52], &cfg).unwrap();
        assert!((st.ema[0].unwrap() - 0.52).abs() < 1e-15);
        let fixed = RewardConfig {
            cutoff_mode: CutoffMode::Static,
            ..cfg
        };
        st.update(&[10.0], &fixed).unwrap();
        assert_eq!(st.cutoff(0), before.cutoff(0));
    }

    #[test]
    fn cutoffs_respect_floors() {
        let cfg = RewardConfig::default();
        let mut st = DynamicCutoffState::new(vec![
            objective(Direction::Maximize, 0.4),
            objective(Direction::Minimize, 8.0),
        ]);
        assert_eq!(st.current()[0].cutoff, 0.4);
        st.update(&[0.1, 12.0], &cfg).unwrap();
        assert_eq!(st.cutoff(0), 0.4);
        assert_eq!(st.cutoff(1), 8.0);
        st.update(&[0.9, 2.0], &cfg).unwrap();
        assert!(st.cutoff(0) > 0.4 || st.ema[0].unwrap() <= 0.4);
    }
}
