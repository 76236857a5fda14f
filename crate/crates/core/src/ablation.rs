//! Reruns fine-tuning with reward components switched off and tabulates
//! the outcome per label and seed.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cli::commands::{evaluate, finetune, pretrain, sample, CHECKPOINT_FILE};
use crate::cli::RunConfig;
use crate::error::{Error, Result};
use crate::reward::{CutoffMode, RewardConfig};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// The only reward fields an ablation may change.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardToggles {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bonus_enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity_enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff_mode: Option<CutoffMode>,
}

impl RewardToggles {
    pub fn apply(&self, base: &RewardConfig) -> RewardConfig {
        RewardConfig {
            bonus_enabled: self.bonus_enabled.unwrap_or(base.bonus_enabled),
            diversity_enabled: self.diversity_enabled.unwrap_or(base.diversity_enabled),
            cutoff_mode: self.cutoff_mode.unwrap_or(base.cutoff_mode),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRun {
    pub label: String,
    #[serde(default)]
    pub reward: RewardToggles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub runs: Vec<AblationRun>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

impl AblationPlan {
    /// Full model, then one run per disabled component.
    pub fn standard() -> Self {
        let run = |label: &str, reward: RewardToggles| AblationRun {
            label: label.into(),
            reward,
        };
        Self {
            runs: vec![
                run("full", RewardToggles::default()),
                run(
                    "no-bonus",
                    RewardToggles {
                        bonus_enabled: Some(false),
                        ..Default::default()
                    },
                ),
                run(
                    "no-diversity",
                    RewardToggles {
                        diversity_enabled: Some(false),
                        ..Default::default()
                    },
                ),
                run(
                    "static-cutoff",
                    RewardToggles {
                        cutoff_mode: Some(CutoffMode::Static),
                        ..Default::default()
                    },
                ),
            ],
            seeds: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let plan: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs.is_empty() {
            return Err(Error::Config("ablation plan has no runs".into()));
        }
        let mut seen = BTreeSet::new();
        for r in &self.runs {
            if r.label.is_empty() || r.label.contains(['/', '\\']) {
                return Err(Error::Config(format!(
                    "ablation label {:?} is not a plain name",
                    r.label
                )));
            }
            if !seen.insert(r.label.as_str()) {
                return Err(Error::Config(format!(
                    "duplicate ablation label {:?}",
                    r.label
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub seed: u64,
    pub episodes: usize,
    /// Mean total reward over all fine-tuning episodes.
    pub mean_reward: f64,
    pub final_reward: f64,
    pub validity: f64,
    pub uniqueness: f64,
    pub novelty: f64,
    pub vun: f64,
    pub atom_stability: f64,
    pub mol_stability: f64,
    pub top_molecules: f64,
}

const METRICS: [&str; 10] = [
    "mean_reward",
    "final_reward",
    "validity",
    "uniqueness",
    "novelty",
    "vun",
    "atom_stability",
    "mol_stability",
    "top_molecules",
    "episodes",
];

impl AblationRow {
    fn values(&self) -> [f64; 10] {
        [
            self.mean_reward,
            self.final_reward,
            self.validity,
            self.uniqueness,
            self.novelty,
            self.vun,
            self.atom_stability,
            self.mol_stability,
            self.top_molecules,
            self.episodes as f64,
        ]
    }
}

/// Configuration of one `(label, seed)` run.
pub fn run_config(base: &RunConfig, run: &AblationRun, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.reward = run.reward.apply(&base.reward);
    cfg.output_dir = base
        .output_dir
        .join("ablation")
        .join(&run.label)
        .join(format!("seed_{seed}"));
    cfg
}

fn write_rows(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Per-label means in plan order.
pub fn summarize(plan: &AblationPlan, rows: &[AblationRow]) -> Vec<(String, usize, Vec<f64>)> {
    plan.runs
        .iter()
        .filter_map(|run| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.label == run.label).collect();
            if mine.is_empty() {
                return None;
            }
            let mut sums = [0.0; 10];
            for r in &mine {
                for (s, v) in sums.iter_mut().zip(r.values()) {
                    *s += v;
                }
            }
            Some((
                run.label.clone(),
                mine.len(),
                sums.iter().map(|s| s / mine.len() as f64).collect(),
            ))
        })
        .collect()
}

fn write_summary(path: &Path, summary: &[(String, usize, Vec<f64>)]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut text = format!("label,n_seeds,{}\n", METRICS.join(","));
    for (label, n, means) in summary {
        let cols: Vec<String> = means.iter().map(|v| v.to_string()).collect();
        text.push_str(&format!("{label},{n},{}\n", cols.join(",")));
    }
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// One pretraining per seed, shared by every label (the toggles never touch
/// pretraining), then fine-tune, sample and evaluate per `(label, seed)`.
/// Rows are written as they finish, so a failure keeps earlier results.
pub fn run_plan(
    plan: &AblationPlan,
    base: &RunConfig,
    seeds: &[u64],
) -> Result<(Vec<AblationRow>, PathBuf)> {
    plan.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let root = base.output_dir.join("ablation");
    fs::create_dir_all(&root).map_err(|e| Error::io(root.display().to_string(), e))?;
    base.echo(&root)?;
    let runs_path = root.join("runs.csv");
    let summary_path = root.join("summary.csv");
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut pre = base.clone();
        pre.seed = seed;
        pre.output_dir = root.join("pretrain").join(format!("seed_{seed}"));
        let ckpt = pre.output_dir.join("pretrain").join(CHECKPOINT_FILE);
        pretrain(&pre)?;
        for run in &plan.runs {
            let cfg = run_config(base, run, seed);
            let logs = finetune(&cfg, Some(&ckpt), false, None)?;
            let samples = sample(&cfg, None, None)?;
            let report = evaluate(&cfg, &samples)?;
            let n = logs.len().max(1) as f64;
            rows.push(AblationRow {
                label: run.label.clone(),
                seed,
                episodes: logs.len(),
                mean_reward: logs.iter().map(|l| l.mean_reward).sum::<f64>() / n,
                final_reward: logs.last().map(|l| l.mean_reward).unwrap_or(0.0),
                validity: report.validity,
                uniqueness: report.uniqueness,
                novelty: report.novelty,
                vun: report.vun,
                atom_stability: report.atom_stability,
                mol_stability: report.mol_stability,
                top_molecules: report.top_molecules,
            });
            write_rows(&runs_path, &rows)?;
            write_summary(&summary_path, &summarize(plan, &rows))?;
        }
    }
    Ok((rows, summary_path))
}
