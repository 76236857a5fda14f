//! Forward noising, ancestral sampling with trajectory recording, transition
//! densities and the empirical (condition, size) sampler.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::checkpoint::{decode_container, encode_container};
use crate::denoiser::{one_hot, LatentState, NoisePredictor, Prediction};
use crate::error::{Error, Result};
use crate::molgraph::{remove_mean, AtomVocabulary, MolecularConfig};
use crate::schedule::{NoiseSchedule, SCHEDULE_FLOOR};

/// Source of the standard normal draws consumed by the sampler.
pub trait NoiseSource {
    /// Unprojected `m x 3` coordinate noise.
    fn coords(&mut self, m: usize) -> Array2<f64>;
    fn features(&mut self, m: usize, width: usize) -> Array2<f64>;
}

/// [`NoiseSource`] backed by any random number generator.
pub struct RngNoise<'a, R: Rng + ?Sized>(pub &'a mut R);

fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

impl<R: Rng + ?Sized> NoiseSource for RngNoise<'_, R> {
    fn coords(&mut self, m: usize) -> Array2<f64> {
        normal_matrix(self.0, m, 3)
    }

    fn features(&mut self, m: usize, width: usize) -> Array2<f64> {
        normal_matrix(self.0, m, width)
    }
}

/// Standard normal noise for a molecule of `m` atoms, coordinate part centered.
pub fn draw_noise<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    width: usize,
) -> (Array2<f64>, Array2<f64>) {
    let ex = remove_mean(&normal_matrix(rng, m, 3));
    let eh = normal_matrix(rng, m, width);
    (ex, eh)
}

/// `z_t = alpha_t [x, h] + sigma_t eps`.
pub fn noisy_latent(
    x: &Array2<f64>,
    h: &Array2<f64>,
    eps_x: &Array2<f64>,
    eps_h: &Array2<f64>,
    t: usize,
    schedule: &NoiseSchedule,
    condition: Vec<f64>,
) -> LatentState {
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    LatentState {
        z_x: x * a + eps_x * s,
        z_h: h * a + eps_h * s,
        t,
        condition,
    }
}

/// Noises a molecule to step `t`, returning the latent and the noise used.
pub fn forward_noise<R: Rng + ?Sized>(
    config: &MolecularConfig,
    vocab: &AtomVocabulary,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(LatentState, Array2<f64>, Array2<f64>)> {
    if t < 1 || t > schedule.steps() {
        return Err(Error::Ordering { s: 1, t });
    }
    let x = config.centered()?.coords;
    let h = one_hot(config, vocab)?;
    let (ex, eh) = draw_noise(rng, config.num_atoms(), vocab.len());
    let z = noisy_latent(&x, &h, &ex, &eh, t, schedule, config.condition.clone());
    Ok((z, ex, eh))
}

/// `[x, h] = z_t / alpha_t - (sigma_t / alpha_t) eps`.
pub fn data_estimate(
    state: &LatentState,
    eps_x: &Array2<f64>,
    eps_h: &Array2<f64>,
    schedule: &NoiseSchedule,
) -> (Array2<f64>, Array2<f64>) {
    let a = schedule.alpha(state.t).max(SCHEDULE_FLOOR);
    let r = schedule.sigma(state.t) / a;
    (&state.z_x / a - eps_x * r, &state.z_h / a - eps_h * r)
}

/// Coefficients of `mu = c_z z_t - c_eps eps_hat` and the transition variance for `t -> t-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub c_z: f64,
    pub c_eps: f64,
    pub variance: f64,
}

pub fn reverse_coefficients(
    schedule: &NoiseSchedule,
    t: usize,
    s: usize,
) -> Result<ReverseCoefficients> {
    let r = schedule.step_ratios(t, s)?;
    let c_z = 1.0 / r.alpha_ts;
    let c_eps = r.sigma2_ts / (r.alpha_ts * schedule.sigma(t).max(SCHEDULE_FLOOR));
    Ok(ReverseCoefficients {
        c_z,
        c_eps,
        variance: r.sigma_t_to_s * r.sigma_t_to_s,
    })
}

/// Deterministic part of the reverse transition given a noise prediction.
pub fn posterior_mean(
    state: &LatentState,
    pred: &Prediction,
    coef: &ReverseCoefficients,
    s: usize,
) -> LatentState {
    LatentState {
        z_x: remove_mean(&(&state.z_x * coef.c_z - &pred.eps_x * coef.c_eps)),
        z_h: &state.z_h * coef.c_z - &pred.eps_h * coef.c_eps,
        t: s,
        condition: state.condition.clone(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReverseStep {
    pub next: LatentState,
    pub mean: LatentState,
    pub variance: f64,
}

/// One ancestral step `z_t -> z_s` with `s = t - 1`.
pub fn reverse_step<P: NoisePredictor, N: NoiseSource + ?Sized>(
    predictor: &P,
    state: &LatentState,
    s: usize,
    schedule: &NoiseSchedule,
    noise: &mut N,
) -> Result<ReverseStep> {
    if s + 1 != state.t {
        return Err(Error::Ordering { s, t: state.t });
    }
    let coef = reverse_coefficients(schedule, state.t, s)?;
    let pred = predictor.predict(state)?;
    let mean = posterior_mean(state, &pred, &coef, s);
    let m = state.num_atoms();
    let sd = coef.variance.sqrt();
    let ex = remove_mean(&noise.coords(m));
    let eh = noise.features(m, state.z_h.ncols());
    let next = LatentState {
        z_x: &mean.z_x + &(ex * sd),
        z_h: &mean.z_h + &(eh * sd),
        t: s,
        condition: state.condition.clone(),
    };
    Ok(ReverseStep {
        next,
        mean,
        variance: coef.variance,
    })
}

/// Recorded reverse chain `z_T, ..., z_0` of one molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `states[k]` is the latent at step `T - k`.
    pub states: Vec<LatentState>,
    /// `means[k]` is the mean of the transition out of `states[k]`.
    pub means: Vec<LatentState>,
    pub variances: Vec<f64>,
    pub condition: Vec<f64>,
    pub num_atoms: usize,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.means.len()
    }

    /// `(z_t, z_{t-1}, mean, variance)` for the transition leaving step `t`.
    pub fn transition(&self, t: usize) -> Result<(&LatentState, &LatentState, &LatentState, f64)> {
        let total = self.steps();
        if t < 1 || t > total {
            return Err(Error::Ordering { s: 0, t });
        }
        let k = total - t;
        Ok((
            &self.states[k],
            &self.states[k + 1],
            &self.means[k],
            self.variances[k],
        ))
    }

    /// Log density of every recorded transition, indexed by `T - t`.
    pub fn log_densities(&self) -> Result<Vec<f64>> {
        (0..self.steps())
            .map(|k| transition_log_density(&self.states[k + 1], &self.means[k], self.variances[k]))
            .collect()
    }

    /// Writes the chain as a tensor container (debug dump).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::json!({
            "condition": self.condition,
            "num_atoms": self.num_atoms,
            "variances": self.variances,
            "times": self.states.iter().map(|s| s.t).collect::<Vec<_>>(),
        });
        let mut names = Vec::new();
        let mut arrays: Vec<&Array2<f64>> = Vec::new();
        for (k, st) in self.states.iter().enumerate() {
            names.push(format!("state.{k}.x"));
            arrays.push(&st.z_x);
            names.push(format!("state.{k}.h"));
            arrays.push(&st.z_h);
        }
        for (k, mu) in self.means.iter().enumerate() {
            names.push(format!("mean.{k}.x"));
            arrays.push(&mu.z_x);
            names.push(format!("mean.{k}.h"));
            arrays.push(&mu.z_h);
        }
        let shapes: Vec<Vec<usize>> = arrays.iter().map(|a| a.shape().to_vec()).collect();
        let refs: Vec<(&str, &[usize], &[f64])> = names
            .iter()
            .zip(&shapes)
            .zip(&arrays)
            .map(|((n, s), a)| {
                (
                    n.as_str(),
                    s.as_slice(),
                    a.as_slice().expect("standard layout"),
                )
            })
            .collect();
        encode_container("trajectory", meta, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            condition: Vec<f64>,
            num_atoms: usize,
            variances: Vec<f64>,
            times: Vec<usize>,
        }
        let (kind, meta, tensors) = decode_container(bytes)?;
        if kind != "trajectory" {
            return Err(Error::Checkpoint(format!(
                "container holds a {kind}, not a trajectory"
            )));
        }
        let meta: Meta = serde_json::from_value(meta)?;
        let n_states = meta.times.len();
        if n_states != meta.variances.len() + 1 || tensors.len() != 2 * (2 * n_states - 1) {
            return Err(Error::Checkpoint(
                "trajectory tensor count disagrees with header".into(),
            ));
        }
        let mut arrays = tensors.into_iter().map(|t| {
            let shape = (t.shape[0], t.shape.get(1).copied().unwrap_or(1));
            Array2::from_shape_vec(shape, t.data).map_err(|e| Error::Checkpoint(e.to_string()))
        });
        let mut next = || arrays.next().expect("count checked above");
        let mut states = Vec::with_capacity(n_states);
        for &t in &meta.times {
            states.push(LatentState {
                z_x: next()?,
                z_h: next()?,
                t,
                condition: meta.condition.clone(),
            });
        }
        let mut means = Vec::with_capacity(n_states - 1);
        for &t in &meta.times[1..] {
            means.push(LatentState {
                z_x: next()?,
                z_h: next()?,
                t,
                condition: meta.condition.clone(),
            });
        }
        Ok(Self {
            states,
            means,
            variances: meta.variances,
            condition: meta.condition,
            num_atoms: meta.num_atoms,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Turns a final latent into a molecule: arg-max atom types, coordinates
/// rescaled by `1 / alpha_0`.
pub fn decode(
    state: &LatentState,
    vocab: &AtomVocabulary,
    schedule: &NoiseSchedule,
) -> Result<MolecularConfig> {
    if state.z_h.ncols() != vocab.len() {
        return Err(Error::Shape(format!(
            "feature block has {} columns for a vocabulary of {}",
            state.z_h.ncols(),
            vocab.len()
        )));
    }
    let symbols = state
        .z_h
        .rows()
        .into_iter()
        .map(|row| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            vocab.symbol(best).to_string()
        })
        .collect();
    let coords = remove_mean(&state.z_x) / schedule.alpha(0);
    MolecularConfig::new(symbols, coords, state.condition.clone())
}

/// Runs the reverse chain from `z_T ~ N(0, I)` down to step 0.
pub fn sample_molecule<P: NoisePredictor, N: NoiseSource + ?Sized>(
    predictor: &P,
    condition: &[f64],
    num_atoms: usize,
    vocab: &AtomVocabulary,
    schedule: &NoiseSchedule,
    noise: &mut N,
    record: bool,
) -> Result<(MolecularConfig, Option<Trajectory>)> {
    if num_atoms == 0 {
        return Err(Error::InvalidGeometry(
            "cannot sample a molecule with no atoms".into(),
        ));
    }
    let steps = schedule.steps();
    let mut state = LatentState {
        z_x: remove_mean(&noise.coords(num_atoms)),
        z_h: noise.features(num_atoms, vocab.len()),
        t: steps,
        condition: condition.to_vec(),
    };
    let mut states = Vec::new();
    let mut means = Vec::new();
    let mut variances = Vec::new();
    for s in (0..steps).rev() {
        let step = reverse_step(predictor, &state, s, schedule, noise)?;
        if record {
            states.push(std::mem::replace(&mut state, step.next));
            means.push(step.mean);
            variances.push(step.variance);
        } else {
            state = step.next;
        }
    }
    let molecule = decode(&state, vocab, schedule)?;
    let trajectory = record.then(|| {
        states.push(state);
        Trajectory {
            states,
            means,
            variances,
            condition: condition.to_vec(),
            num_atoms,
        }
    });
    Ok((molecule, trajectory))
}

/// Dimension of the latent space for `m` atoms: `(m - 1) * 3` coordinate
/// degrees of freedom on the zero-CoG subspace plus `m * width` features.
pub fn effective_dimension(m: usize, width: usize) -> usize {
    m.saturating_sub(1) * 3 + m * width
}

/// Isotropic Gaussian log density `-(d/2) ln(2 pi v) - r2 / (2 v)`.
pub fn gaussian_log_density(sq_norm: f64, variance: f64, dim: usize) -> Result<f64> {
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::Numeric(format!(
            "transition variance {variance} must be positive"
        )));
    }
    let d = dim as f64;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * variance).ln() - sq_norm / (2.0 * variance))
}

/// `log p(z_prev | z_t)` for a transition with the given mean and variance.
pub fn transition_log_density(
    z_prev: &LatentState,
    mean: &LatentState,
    variance: f64,
) -> Result<f64> {
    let dim = effective_dimension(z_prev.num_atoms(), z_prev.z_h.ncols());
    gaussian_log_density(z_prev.sq_distance(mean), variance, dim)
}

/// Number of equal-width bins per property used by [`ConditionSizeDistribution`].
pub const CONDITION_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionCell {
    pub bins: Vec<usize>,
    pub num_atoms: usize,
    pub count: usize,
    /// Mean condition of the training molecules in this cell.
    pub condition: Vec<f64>,
}

/// Joint histogram over (binned condition, atom count).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSizeDistribution {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<ConditionCell>,
    total: usize,
}

impl ConditionSizeDistribution {
    pub fn fit(samples: &[(Vec<f64>, usize)]) -> Result<Self> {
        let Some((first, _)) = samples.first() else {
            return Err(Error::Config(
                "cannot fit a condition distribution to an empty split".into(),
            ));
        };
        let k = first.len();
        if samples
            .iter()
            .any(|(c, m)| c.len() != k || *m == 0 || c.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Config(
                "conditions must share one width, be finite, and sizes be positive".into(),
            ));
        }
        let mut lower = vec![f64::INFINITY; k];
        let mut upper = vec![f64::NEG_INFINITY; k];
        for (c, _) in samples {
            for j in 0..k {
                lower[j] = lower[j].min(c[j]);
                upper[j] = upper[j].max(c[j]);
            }
        }
        let bin = |j: usize, v: f64| {
            let span = upper[j] - lower[j];
            if span <= 0.0 {
                0
            } else {
                (((v - lower[j]) / span * CONDITION_BINS as f64) as usize).min(CONDITION_BINS - 1)
            }
        };
        let mut groups: BTreeMap<(Vec<usize>, usize), (usize, Vec<f64>)> = BTreeMap::new();
        for (c, m) in samples {
            let key: Vec<usize> = c.iter().enumerate().map(|(j, &v)| bin(j, v)).collect();
            let entry = groups.entry((key, *m)).or_insert_with(|| (0, vec![0.0; k]));
            entry.0 += 1;
            for j in 0..k {
                entry.1[j] += c[j];
            }
        }
        let cells = groups
            .into_iter()
            .map(|((bins, num_atoms), (count, sum))| ConditionCell {
                bins,
                num_atoms,
                count,
                condition: sum.iter().map(|s| s / count as f64).collect(),
            })
            .collect();
        Ok(Self {
            lower,
            upper,
            cells,
            total: samples.len(),
        })
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|c| c.count as f64 / self.total as f64)
            .collect()
    }

    /// Draws a `(condition, atom count)` pair with empirical cell frequencies.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let weights: Vec<usize> = self.cells.iter().map(|c| c.count).collect();
        let index = WeightedIndex::new(&weights).expect("fit guarantees positive counts");
        let cell = &self.cells[index.sample(rng)];
        (cell.condition.clone(), cell.num_atoms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Architecture, DenoiserParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Zero;
    impl NoisePredictor for Zero {
        fn predict(&self, s: &LatentState) -> Result<Prediction> {
            Ok(Prediction {
                eps_x: Array2::zeros(s.z_x.raw_dim()),
                eps_h: Array2::zeros(s.z_h.raw_dim()),
            })
        }
    }

    struct NoNoise;
    impl NoiseSource for NoNoise {
        fn coords(&mut self, m: usize) -> Array2<f64> {
            Array2::zeros((m, 3))
        }
        fn features(&mut self, m: usize, w: usize) -> Array2<f64> {
            Array2::zeros((m, w))
        }
    }

    fn state(seed: u64, m: usize, t: usize) -> LatentState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, h) = draw_noise(&mut rng, m, 4);
        LatentState {
            z_x: x,
            z_h: h,
            t,
            condition: vec![],
        }
    }

    #[test]
    fn frozen_noise_gives_mean() {
        let sched = NoiseSchedule::new(20, 1e-5).unwrap();
        let z = state(1, 5, 12);
        let step = reverse_step(&Zero, &z, 11, &sched, &mut NoNoise).unwrap();
        assert_eq!(step.next, step.mean);
        assert!(step.variance > 0.0);
    }

    #[test]
    fn reverse_step_rejects_skips() {
        let sched = NoiseSchedule::new(20, 1e-5).unwrap();
        let z = state(1, 3, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(reverse_step(&Zero, &z, 10, &sched, &mut RngNoise(&mut rng)).is_err());
        assert!(reverse_step(&Zero, &z, 12, &sched, &mut RngNoise(&mut rng)).is_err());
    }

    #[test]
    fn log_density_examples() {
        let base = gaussian_log_density(0.0, 1.0, 6).unwrap();
        assert!((base - (-3.0 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((base + 5.51363).abs() < 1e-5);
        assert!((gaussian_log_density(1.0, 1.0, 6).unwrap() - (base - 0.5)).abs() < 1e-12);
        let doubled = gaussian_log_density(0.0, 2.0, 6).unwrap();
        assert!((doubled - base + 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!(gaussian_log_density(0.0, 0.0, 6).is_err());
        assert!(gaussian_log_density(0.0, -1.0, 6).is_err());
    }

    #[test]
    fn single_atom_samples_at_origin() {
        let sched = NoiseSchedule::new(10, 1e-5).unwrap();
        let vocab = AtomVocabulary::qm9();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mol, traj) =
            sample_molecule(&Zero, &[], 1, &vocab, &sched, &mut RngNoise(&mut rng), true).unwrap();
        assert_eq!(mol.coords, Array2::<f64>::zeros((1, 3)));
        let traj = traj.unwrap();
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.states[0].t, 10);
        assert_eq!(traj.states[10].t, 0);
    }

    #[test]
    fn trajectory_container_round_trip() {
        let arch = Architecture {
            vocab_size: 4,
            condition_dim: 1,
            hidden: 6,
            layers: 1,
            steps: 6,
            clamp: 1e-5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = DenoiserParams::init(arch, &mut rng).unwrap();
        let sched = NoiseSchedule::new(6, 1e-5).unwrap();
        let (_, traj) = sample_molecule(
            &params,
            &[0.4],
            4,
            &AtomVocabulary::qm9(),
            &sched,
            &mut RngNoise(&mut rng),
            true,
        )
        .unwrap();
        let traj = traj.unwrap();
        let back = Trajectory::from_bytes(&traj.to_bytes().unwrap()).unwrap();
        assert_eq!(back, traj);
        let (zt, zs, mu, v) = traj.transition(6).unwrap();
        assert_eq!((zt.t, zs.t, mu.t), (6, 5, 5));
        assert_eq!(v, traj.variances[0]);
    }

    #[test]
    fn condition_distribution_examples() {
        let single = ConditionSizeDistribution::fit(&[(vec![0.3], 5)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            assert_eq!(single.draw(&mut rng), (vec![0.3], 5));
        }
        assert!(ConditionSizeDistribution::fit(&[]).is_err());
        let two =
            ConditionSizeDistribution::fit(&[(vec![0.0], 3), (vec![1.0], 7), (vec![0.05], 3)])
                .unwrap();
        assert_eq!(two.cells.len(), 2);
        assert!((two.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((two.cells[0].condition[0] - 0.025).abs() < 1e-15);
    }
}
