#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use molrl::denoiser::{Architecture, DenoiserParams, LatentState};
use molrl::diffusion::ConditionSizeDistribution;
use molrl::molgraph::toy::{random_molecule, ToySpec};
use molrl::molgraph::{AtomVocabulary, CanonicalHash, MolecularConfig};
use molrl::ppo::{collect_episode, EpisodeBatch, RlEnvironment};
use molrl::reward::{DynamicCutoffState, RewardConfig};
use molrl::schedule::NoiseSchedule;
use molrl::uncertainty::SyntheticOracle;

/// `erf` from the all-positive series `2/sqrt(pi) e^{-x^2} sum (2x^2)^n x / (2n+1)!!`.
/// No cancellation, so it is accurate to a few ulps wherever it converges.
pub fn erf_series(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    if x.abs() > 8.0 {
        return x.signum();
    }
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 0.0;
    loop {
        n += 1.0;
        term *= 2.0 * x2 / (2.0 * n + 1.0);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * (-x2).exp() * sum
}

/// Standard normal CDF from [`erf_series`].
pub fn phi(z: f64) -> f64 {
    0.5 * (1.0 + erf_series(z / std::f64::consts::SQRT_2))
}

pub fn arch(layers: usize, hidden: usize, steps: usize, condition_dim: usize) -> Architecture {
    Architecture {
        vocab_size: 4,
        condition_dim,
        hidden,
        layers,
        steps,
        clamp: 1e-5,
    }
}

/// Random parameters with every tensor, the coordinate head included, nonzero.
pub fn random_params<R: Rng>(rng: &mut R, arch: Architecture, scale: f64) -> DenoiserParams {
    let mut p = DenoiserParams::init(arch, rng).unwrap();
    p.randomize_all(rng, scale);
    p
}

pub fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn centered(a: &Array2<f64>) -> Array2<f64> {
    let mean = a.mean_axis(ndarray::Axis(0)).unwrap();
    a - &mean
}

pub fn random_state<R: Rng>(
    rng: &mut R,
    m: usize,
    width: usize,
    t: usize,
    condition: Vec<f64>,
) -> LatentState {
    LatentState {
        z_x: centered(&gaussian(rng, m, 3)),
        z_h: gaussian(rng, m, width),
        t,
        condition,
    }
}

/// Uniformly random rotation, optionally composed with a reflection.
pub fn random_orthogonal<R: Rng>(rng: &mut R, reflect: bool) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((3, 3));
    for c in 0..3 {
        let mut v: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
        for p in 0..c {
            let dot: f64 = (0..3).map(|r| v[r] * q[[r, p]]).sum();
            for r in 0..3 {
                v[r] -= dot * q[[r, p]];
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for r in 0..3 {
            q[[r, c]] = v[r] / norm;
        }
    }
    let det = q[[0, 0]] * (q[[1, 1]] * q[[2, 2]] - q[[1, 2]] * q[[2, 1]])
        - q[[0, 1]] * (q[[1, 0]] * q[[2, 2]] - q[[1, 2]] * q[[2, 0]])
        + q[[0, 2]] * (q[[1, 0]] * q[[2, 1]] - q[[1, 1]] * q[[2, 0]]);
    let want = if reflect { -1.0 } else { 1.0 };
    if det * want < 0.0 {
        for r in 0..3 {
            q[[r, 2]] = -q[[r, 2]];
        }
    }
    q
}

pub fn random_permutation<R: Rng>(rng: &mut R, m: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..m).collect();
    p.shuffle(rng);
    p
}

pub fn permute_rows(a: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn(a.raw_dim(), |(i, j)| a[[perm[i], j]])
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn toy_molecules(n: usize, seed: u64) -> Vec<MolecularConfig> {
    let vocab = AtomVocabulary::qm9();
    let spec = ToySpec::qm9_like();
    (0..n)
        .map(|i| {
            random_molecule(
                &mut molrl::rng::stream(seed, "test-toy", &[i as u64]),
                &vocab,
                &spec,
            )
            .unwrap()
        })
        .collect()
}

/// Everything an episode needs, owned, for small in-process PPO runs.
pub struct MiniEnv {
    pub vocab: AtomVocabulary,
    pub schedule: NoiseSchedule,
    pub oracle: SyntheticOracle,
    pub conditions: ConditionSizeDistribution,
    pub train_hashes: BTreeSet<CanonicalHash>,
    pub reward: RewardConfig,
}

impl MiniEnv {
    pub fn new(steps: usize, sizes: &[usize]) -> Self {
        let vocab = AtomVocabulary::qm9();
        let samples: Vec<(Vec<f64>, usize)> = sizes.iter().map(|&m| (vec![], m)).collect();
        Self {
            schedule: NoiseSchedule::new(steps, 1e-5).unwrap(),
            oracle: SyntheticOracle::with_defaults(vocab.clone()),
            conditions: ConditionSizeDistribution::fit(&samples).unwrap(),
            train_hashes: BTreeSet::new(),
            reward: RewardConfig::default(),
            vocab,
        }
    }

    pub fn env(&self) -> RlEnvironment<'_> {
        RlEnvironment {
            vocab: &self.vocab,
            schedule: &self.schedule,
            oracle: &self.oracle,
            conditions: &self.conditions,
            train_hashes: &self.train_hashes,
            reward: &self.reward,
        }
    }

    pub fn cutoffs(&self) -> DynamicCutoffState {
        DynamicCutoffState::new(self.oracle.objectives())
    }

    pub fn batch(&self, params: &DenoiserParams, n: usize, seed: u64) -> EpisodeBatch {
        collect_episode(params, &self.env(), &self.cutoffs(), n, 0, seed).unwrap()
    }
}

/// A config TOML for a toy run over `data`, writing under `out`.
pub fn toy_config(data: &Path, out: &Path, seed: u64, extra: &str) -> String {
    format!(
        "schema_version = 1\nseed = {seed}\noutput_dir = {out:?}\n\n[data]\npath = {data:?}\n\n{extra}\n",
        out = out.display().to_string(),
        data = data.display().to_string(),
    )
}

/// Small enough for a debug-profile test run: T = 20, 2 layers of width 16.
pub const TINY: &str = "[schedule]\nsteps = 20\n\n[model]\nhidden = 16\nlayers = 2\n\n[pretrain]\nsteps = 30\nbatch_size = 8\n\n[ppo]\nepisodes = 3\nn_samples = 6\nk_timesteps = 4\n\n[sample]\nn = 4\n";
