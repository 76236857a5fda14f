//! Clipped policy-gradient fine-tuning of the denoiser.
//!
//! Each sampled molecule is one episode trajectory. Its terminal reward is
//! shared by every sampled transition of the chain, and the likelihood ratio
//! is taken per transition.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{adam_step, grad, AdamState, DenoiserParams, GradientBundle};
use crate::diffusion::{
    posterior_mean, reverse_coefficients, sample_molecule, transition_log_density,
    ConditionSizeDistribution, RngNoise, Trajectory,
};
use crate::error::{Error, Result};
use crate::metrics::{batch_flags, classify, evaluate, EvalContext, GenerationReport};
use crate::molgraph::{fingerprint, AtomVocabulary, CanonicalHash, MolecularConfig};
use crate::reward::{score_batch, DynamicCutoffState, RewardBreakdown, RewardConfig, RewardInput};
use crate::rng::stream;
use crate::schedule::NoiseSchedule;
use crate::uncertainty::{ObjectiveSpec, PropertyEstimate, PropertyOracle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub learning_rate: f64,
    /// Optimizer passes over each collected episode.
    pub reuse: usize,
    pub n_samples: usize,
    /// Transitions sampled per trajectory for each update.
    pub k_timesteps: usize,
    pub episodes: usize,
    /// Trajectory chunks whose gradients are summed before one update.
    pub grad_accum_batches: usize,
    /// The learning rate decays linearly to this fraction of its start.
    pub final_lr_fraction: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_eps: 3e-4,
            learning_rate: 1e-5,
            reuse: 3,
            n_samples: 128,
            k_timesteps: 8,
            episodes: 30,
            grad_accum_batches: 1,
            final_lr_fraction: 0.1,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) || !(self.learning_rate > 0.0) || !self.learning_rate.is_finite()
        {
            return Err(Error::Config(
                "clip_eps and learning_rate must be positive".into(),
            ));
        }
        if self.reuse == 0
            || self.n_samples == 0
            || self.k_timesteps == 0
            || self.grad_accum_batches == 0
        {
            return Err(Error::Config(
                "reuse, n_samples, k_timesteps and grad_accum_batches must be at least 1".into(),
            ));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "final_lr_fraction {} must lie in (0, 1]",
                self.final_lr_fraction
            )));
        }
        Ok(())
    }

    pub fn total_updates(&self) -> usize {
        self.episodes * self.reuse
    }

    /// Learning rate of inner update `update` (0-based).
    pub fn learning_rate_at(&self, update: usize) -> f64 {
        let total = self.total_updates();
        if total <= 1 {
            return self.learning_rate;
        }
        let frac = update.min(total - 1) as f64 / (total - 1) as f64;
        self.learning_rate * (1.0 - (1.0 - self.final_lr_fraction) * frac)
    }
}

/// Everything an episode is scored against.
pub struct RlEnvironment<'a> {
    pub vocab: &'a AtomVocabulary,
    pub schedule: &'a NoiseSchedule,
    pub oracle: &'a dyn PropertyOracle,
    pub conditions: &'a ConditionSizeDistribution,
    pub train_hashes: &'a BTreeSet<CanonicalHash>,
    pub reward: &'a RewardConfig,
}

/// Trajectories sampled under frozen parameters and their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub episode: usize,
    pub trajectories: Vec<Trajectory>,
    pub molecules: Vec<MolecularConfig>,
    pub rewards: Vec<RewardBreakdown>,
    /// `old_logp[i][T - t]` is the log density of transition `t` of trajectory `i`.
    pub old_logp: Vec<Vec<f64>>,
    pub flags: Vec<(bool, bool, bool)>,
    /// Oracle means per molecule, in objective order.
    pub property_means: Vec<Vec<f64>>,
    /// Objectives with the cutoffs in force while scoring.
    pub objectives: Vec<ObjectiveSpec>,
}

impl EpisodeBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.rewards.len() != n
            || self.old_logp.len() != n
            || self.molecules.len() != n
            || self.flags.len() != n
        {
            return Err(Error::Shape(
                "episode batch fields disagree in length".into(),
            ));
        }
        for (i, (lp, tr)) in self.old_logp.iter().zip(&self.trajectories).enumerate() {
            if lp.len() != tr.steps() {
                return Err(Error::Shape(format!(
                    "trajectory {i} has {} log densities for {} steps",
                    lp.len(),
                    tr.steps()
                )));
            }
            if let Some(k) = lp.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    location: format!(
                        "old log-probability of trajectory {i} at t={}",
                        tr.steps() - k
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn mean_reward(&self) -> f64 {
        mean(self.rewards.iter().map(|r| r.total))
    }

    /// Batch mean of every objective's predicted property.
    pub fn batch_property_means(&self) -> Vec<f64> {
        (0..self.objectives.len())
            .map(|k| mean(self.property_means.iter().map(|p| p[k])))
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Oracle estimates reordered to follow `objectives`.
pub fn aligned_estimates(
    oracle: &dyn PropertyOracle,
    objectives: &[ObjectiveSpec],
    config: &MolecularConfig,
) -> Result<Vec<PropertyEstimate>> {
    let names = oracle.names();
    let ests = oracle.predict(config)?;
    objectives
        .iter()
        .map(|o| {
            names
                .iter()
                .position(|n| *n == o.name)
                .map(|k| ests[k])
                .ok_or_else(|| Error::Config(format!("oracle has no property {:?}", o.name)))
        })
        .collect()
}

/// Samples `n_samples` recorded chains with `params_old` and scores them.
/// Conditions and sizes come from one stream, each chain's noise from its own.
pub fn collect_episode(
    params_old: &DenoiserParams,
    env: &RlEnvironment,
    cutoffs: &DynamicCutoffState,
    n_samples: usize,
    episode: usize,
    seed: u64,
) -> Result<EpisodeBatch> {
    if n_samples == 0 {
        return Err(Error::Config("an episode needs at least one sample".into()));
    }
    let mut draw_rng = stream(seed, "ppo-conditions", &[episode as u64]);
    let draws: Vec<(Vec<f64>, usize)> = (0..n_samples)
        .map(|_| env.conditions.draw(&mut draw_rng))
        .collect();
    let sampled: Vec<(MolecularConfig, Trajectory)> = draws
        .par_iter()
        .enumerate()
        .map(|(i, (cond, m))| {
            let mut rng = stream(seed, "ppo-noise", &[episode as u64, i as u64]);
            let (mol, traj) = sample_molecule(
                params_old,
                cond,
                *m,
                env.vocab,
                env.schedule,
                &mut RngNoise(&mut rng),
                true,
            )?;
            Ok((mol, traj.expect("recording requested")))
        })
        .collect::<Result<_>>()?;
    let (molecules, trajectories): (Vec<_>, Vec<_>) = sampled.into_iter().unzip();

    let objectives = cutoffs.current();
    let scored: Vec<_> = molecules
        .par_iter()
        .map(|m| {
            let class = classify(m, env.vocab)?;
            let fp = fingerprint(&class.graph);
            let ests = aligned_estimates(env.oracle, &objectives, m)?;
            Ok((class, fp, ests))
        })
        .collect::<Result<_>>()?;
    let classes: Vec<_> = scored.iter().map(|s| s.0.clone()).collect();
    let flags = batch_flags(&classes, env.train_hashes);
    let fingerprints: Vec<_> = scored.iter().map(|s| s.1.clone()).collect();
    let inputs: Vec<RewardInput> = scored
        .iter()
        .zip(&flags)
        .map(|(s, &(valid, unique, novel))| RewardInput {
            estimates: s.2.clone(),
            valid,
            unique,
            novel,
        })
        .collect();
    let rewards = score_batch(&inputs, &fingerprints, cutoffs, episode, env.reward)?;
    let old_logp = trajectories
        .par_iter()
        .map(|t| t.log_densities())
        .collect::<Result<Vec<_>>>()?;
    let property_means = inputs
        .iter()
        .map(|inp| inp.estimates.iter().map(|e| e.mean).collect())
        .collect();
    let batch = EpisodeBatch {
        episode,
        trajectories,
        molecules,
        rewards,
        old_logp,
        flags,
        property_means,
        objectives,
    };
    batch.validate()?;
    Ok(batch)
}

/// `k` distinct transitions per trajectory drawn uniformly from `1..=steps`.
pub fn sample_timesteps<R: rand::Rng + ?Sized>(
    n: usize,
    steps: usize,
    k: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let k = k.min(steps);
    (0..n)
        .map(|_| {
            let mut ts: Vec<usize> = sample_indices(rng, steps, k)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            ts.sort_unstable();
            ts
        })
        .collect()
}

/// Surrogate term `min(r R, clip(r, 1 - eps, 1 + eps) R)` and its derivative in `r`.
pub fn clip_term(ratio: f64, reward: f64, clip_eps: f64) -> (f64, f64) {
    let unclipped = ratio * reward;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * reward;
    if unclipped <= clipped {
        (unclipped, reward)
    } else {
        (clipped, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub n_terms: usize,
    /// `ratios[i][j]` belongs to the `j`-th sampled transition of trajectory `i`.
    pub ratios: Vec<Vec<f64>>,
    pub clipped_fraction: f64,
}

impl LossReport {
    pub fn max_ratio_deviation(&self) -> f64 {
        self.ratios
            .iter()
            .flatten()
            .fold(0.0f64, |m, r| m.max((r - 1.0).abs()))
    }
}

struct TermOut {
    value: f64,
    ratio: f64,
    clipped: bool,
}

/// Clipped surrogate of one trajectory at its sampled steps. `scale` is
/// `1 / total terms` so that partial sums add up to the batch mean.
fn trajectory_terms(
    scope: &mut crate::denoiser::GradScope<'_>,
    traj: &Trajectory,
    old_logp: &[f64],
    reward: f64,
    times: &[usize],
    schedule: &NoiseSchedule,
    clip_eps: f64,
    scale: f64,
    index: usize,
) -> Result<Vec<TermOut>> {
    let steps = traj.steps();
    times
        .iter()
        .map(|&t| {
            let (z_t, z_s, _, variance) = traj.transition(t)?;
            let coef = reverse_coefficients(schedule, t, t - 1)?;
            let (pred, id) = scope.predict(z_t)?;
            let mu = posterior_mean(z_t, &pred, &coef, t - 1);
            let logp = transition_log_density(z_s, &mu, variance)?;
            let ratio = (logp - old_logp[steps - t]).exp();
            if !logp.is_finite() || !ratio.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("log-probability of trajectory {index} at t={t}"),
                });
            }
            let (value, d_ratio) = clip_term(ratio, reward, clip_eps);
            // loss = -scale * term; d logp / d mu = (z_s - mu) / v; d mu / d eps = -c_eps
            let d_logp = -scale * d_ratio * ratio;
            if d_logp != 0.0 {
                let k = d_logp * (-coef.c_eps) / variance;
                let gx: Array2<f64> = (&z_s.z_x - &mu.z_x) * k;
                let gh: Array2<f64> = (&z_s.z_h - &mu.z_h) * k;
                scope.seed(id, &gx, &gh)?;
            }
            Ok(TermOut {
                value: -scale * value,
                ratio,
                clipped: d_ratio == 0.0 && reward != 0.0,
            })
        })
        .collect()
}

fn check_timesteps(batch: &EpisodeBatch, timesteps: &[Vec<usize>]) -> Result<usize> {
    if batch.is_empty() {
        return Err(Error::Degenerate("empty episode batch".into()));
    }
    if timesteps.len() != batch.len() {
        return Err(Error::Shape(
            "one timestep list per trajectory is required".into(),
        ));
    }
    let mut n = 0;
    for (ts, tr) in timesteps.iter().zip(&batch.trajectories) {
        if let Some(&t) = ts.iter().find(|&&t| t < 1 || t > tr.steps()) {
            return Err(Error::Ordering { s: 0, t });
        }
        n += ts.len();
    }
    if n == 0 {
        return Err(Error::Degenerate("no timesteps sampled".into()));
    }
    Ok(n)
}

/// Value and parameter gradient of the clipped surrogate loss, summed over
/// `accum_batches` trajectory chunks in a fixed order.
pub fn clipped_loss_and_grad(
    params: &DenoiserParams,
    batch: &EpisodeBatch,
    timesteps: &[Vec<usize>],
    schedule: &NoiseSchedule,
    clip_eps: f64,
    accum_batches: usize,
) -> Result<(LossReport, GradientBundle)> {
    let n_terms = check_timesteps(batch, timesteps)?;
    let scale = 1.0 / n_terms as f64;
    let n = batch.len();
    let chunk = n.div_ceil(accum_batches.max(1));
    let mut total = GradientBundle::zeros_like(params);
    let mut loss = 0.0;
    let mut ratios = Vec::with_capacity(n);
    let mut clipped = 0usize;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let parts: Vec<(f64, GradientBundle, Vec<TermOut>)> = (start..end)
            .into_par_iter()
            .map(|i| {
                let mut outs = Vec::new();
                let (v, g) = grad(params, |scope| {
                    outs = trajectory_terms(
                        scope,
                        &batch.trajectories[i],
                        &batch.old_logp[i],
                        batch.rewards[i].total,
                        &timesteps[i],
                        schedule,
                        clip_eps,
                        scale,
                        i,
                    )?;
                    Ok(outs.iter().map(|o| o.value).sum())
                })?;
                Ok((v, g, outs))
            })
            .collect::<Result<_>>()?;
        for (v, g, outs) in parts {
            loss += v;
            total.add_assign(&g)?;
            clipped += outs.iter().filter(|o| o.clipped).count();
            ratios.push(outs.into_iter().map(|o| o.ratio).collect());
        }
    }
    Ok((
        LossReport {
            loss,
            n_terms,
            ratios,
            clipped_fraction: clipped as f64 / n_terms as f64,
        },
        total,
    ))
}

/// Loss value only.
pub fn clipped_loss(
    params: &DenoiserParams,
    batch: &EpisodeBatch,
    timesteps: &[Vec<usize>],
    schedule: &NoiseSchedule,
    clip_eps: f64,
) -> Result<LossReport> {
    clipped_loss_and_grad(params, batch, timesteps, schedule, clip_eps, 1).map(|(r, _)| r)
}

/// Resumable trainer position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlState {
    pub next_episode: usize,
    pub updates_done: usize,
    pub cutoffs: DynamicCutoffState,
}

impl RlState {
    pub fn new(objectives: Vec<ObjectiveSpec>) -> Self {
        Self {
            next_episode: 0,
            updates_done: 0,
            cutoffs: DynamicCutoffState::new(objectives),
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_u_multi: f64,
    pub mean_bonus: f64,
    pub mean_diversity: f64,
    pub lambda: f64,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub atom_stability: f64,
    pub mol_stability: f64,
    pub top_molecules: f64,
    /// Loss and largest `|r - 1|` of the first pass over the episode.
    pub first_loss: f64,
    pub first_max_ratio_dev: f64,
    pub last_lr: f64,
    /// Cutoffs in force while the episode was scored.
    pub cutoffs: Vec<f64>,
}

/// State handed to the per-episode callback after the update.
pub struct EpisodeOutcome<'a> {
    pub log: &'a EpisodeLog,
    pub batch: &'a EpisodeBatch,
    pub report: &'a GenerationReport,
    pub params: &'a DenoiserParams,
    pub adam: &'a AdamState,
    pub state: &'a RlState,
}

/// Runs episodes `state.next_episode .. cfg.episodes`. All randomness is a
/// function of `(seed, episode)`, so resuming from a saved state reproduces
/// the uninterrupted run.
pub fn train<F>(
    params: &mut DenoiserParams,
    adam: &mut AdamState,
    state: &mut RlState,
    env: &RlEnvironment,
    cfg: &PpoConfig,
    seed: u64,
    on_episode: F,
) -> Result<Vec<EpisodeLog>>
where
    F: FnMut(&EpisodeOutcome) -> Result<()>,
{
    train_until(
        params,
        adam,
        state,
        env,
        cfg,
        seed,
        cfg.episodes,
        on_episode,
    )
}

/// Like [`train`] but returns once `stop` episodes are done. The learning
/// rate still follows the full `cfg.episodes` schedule, so a later resume
/// lands exactly where an uninterrupted run would.
#[allow(clippy::too_many_arguments)]
pub fn train_until<F>(
    params: &mut DenoiserParams,
    adam: &mut AdamState,
    state: &mut RlState,
    env: &RlEnvironment,
    cfg: &PpoConfig,
    seed: u64,
    stop: usize,
    mut on_episode: F,
) -> Result<Vec<EpisodeLog>>
where
    F: FnMut(&EpisodeOutcome) -> Result<()>,
{
    cfg.validate()?;
    env.reward.validate()?;
    let mut logs = Vec::new();
    while state.next_episode < cfg.episodes.min(stop) {
        let episode = state.next_episode;
        let frozen = params.clone();
        let batch = collect_episode(&frozen, env, &state.cutoffs, cfg.n_samples, episode, seed)?;
        let ctx = EvalContext {
            vocab: env.vocab,
            oracle: env.oracle,
            objectives: &batch.objectives,
        };
        let report = evaluate(&batch.molecules, env.train_hashes, &ctx)?;

        let mut first: Option<LossReport> = None;
        let mut lr = cfg.learning_rate_at(state.updates_done);
        for inner in 0..cfg.reuse {
            let mut rng = stream(seed, "ppo-timesteps", &[episode as u64, inner as u64]);
            let ts = sample_timesteps(batch.len(), env.schedule.steps(), cfg.k_timesteps, &mut rng);
            let (rep, g) = clipped_loss_and_grad(
                params,
                &batch,
                &ts,
                env.schedule,
                cfg.clip_eps,
                cfg.grad_accum_batches,
            )?;
            lr = cfg.learning_rate_at(state.updates_done);
            adam_step(params, &g, adam, lr)?;
            state.updates_done += 1;
            first.get_or_insert(rep);
        }
        let first = first.expect("reuse is at least 1");
        state
            .cutoffs
            .update(&batch.batch_property_means(), env.reward)?;
        state.next_episode += 1;

        let log = EpisodeLog {
            episode,
            mean_reward: batch.mean_reward(),
            mean_u_multi: mean(batch.rewards.iter().map(|r| r.u_multi)),
            mean_bonus: mean(batch.rewards.iter().map(|r| r.bonus)),
            mean_diversity: mean(batch.rewards.iter().map(|r| r.diversity)),
            lambda: batch.rewards[0].lambda,
            validity: report.validity,
            uniqueness: report.uniqueness,
            novelty: report.novelty,
            atom_stability: report.atom_stability,
            mol_stability: report.mol_stability,
            top_molecules: report.top_molecules,
            first_loss: first.loss,
            first_max_ratio_dev: first.max_ratio_deviation(),
            last_lr: lr,
            cutoffs: batch.objectives.iter().map(|o| o.cutoff).collect(),
        };
        on_episode(&EpisodeOutcome {
            log: &log,
            batch: &batch,
            report: &report,
            params,
            adam,
            state,
        })?;
        logs.push(log);
    }
    Ok(logs)
}

/// Writes the per-episode log with one cutoff column per objective.
pub fn write_episode_log<W: Write>(
    rows: &[EpisodeLog],
    objective_names: &[String],
    out: W,
    header: bool,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    if header {
        let mut head: Vec<String> = [
            "episode",
            "mean_reward",
            "mean_u_multi",
            "mean_bonus",
            "mean_diversity",
            "lambda",
            "validity",
            "uniqueness",
            "novelty",
            "atom_stability",
            "mol_stability",
            "top_molecules",
            "first_loss",
            "first_max_ratio_dev",
            "last_lr",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        head.extend(objective_names.iter().map(|n| format!("cutoff_{n}")));
        w.write_record(&head)?;
    }
    for r in rows {
        let mut rec = vec![
            r.episode.to_string(),
            r.mean_reward.to_string(),
            r.mean_u_multi.to_string(),
            r.mean_bonus.to_string(),
            r.mean_diversity.to_string(),
            r.lambda.to_string(),
            r.validity.to_string(),
            r.uniqueness.to_string(),
            r.novelty.to_string(),
            r.atom_stability.to_string(),
            r.mol_stability.to_string(),
            r.top_molecules.to_string(),
            r.first_loss.to_string(),
            r.first_max_ratio_dev.to_string(),
            r.last_lr.to_string(),
        ];
        rec.extend(r.cutoffs.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("episode log", e))
}

/// Per-molecule reward rows of one episode.
pub fn write_reward_rows<W: Write>(
    episode: usize,
    rewards: &[RewardBreakdown],
    out: W,
    header: bool,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    if header {
        w.write_record([
            "episode",
            "molecule",
            "u_multi",
            "bonus",
            "diversity",
            "lambda",
            "total",
        ])?;
    }
    for (i, r) in rewards.iter().enumerate() {
        w.write_record([
            episode.to_string(),
            i.to_string(),
            r.u_multi.to_string(),
            r.bonus.to_string(),
            r.diversity.to_string(),
            r.lambda.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("reward log", e))
}
