//! The operations behind each subcommand. Every output is a function of the
//! resolved configuration and its seed.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::denoiser::checkpoint::{Checkpoint, ScheduleMeta};
use crate::denoiser::{AdamConfig, AdamState, DenoiserParams};
use crate::diffusion::{sample_molecule, ConditionSizeDistribution, RngNoise};
use crate::error::{Error, Result};
use crate::metrics::{classify, evaluate as evaluate_set, EvalContext, GenerationReport};
use crate::molgraph::toy::{random_molecule, ToySpec};
use crate::molgraph::xyz::{write_xyz, MANIFEST_FILE};
use crate::molgraph::{
    load_xyz_dataset, species_split, AtomVocabulary, CanonicalHash, DatasetEntry, DatasetManifest,
    MolecularConfig, SplitIndices, VocabularySpec,
};
use crate::ppo::{self, aligned_estimates, EpisodeLog, RlEnvironment, RlState};
use crate::pretrain;
use crate::rng::{derive_seed, stream};
use crate::uncertainty::{
    auce, calibration_curve, r_squared, PropertyTable, SyntheticOracle, CALIBRATION_LEVELS,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const RL_STATE_FILE: &str = "rl_state.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text)
}

/// Creates `output_dir/name`, echoing the resolved configuration into it.
fn stage_dir(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    let dir = cfg.output_dir.join(name);
    create_dir(&dir)?;
    cfg.echo(&dir)?;
    Ok(dir)
}

/// A dataset with its deterministic species split.
pub struct Dataset {
    pub vocab: AtomVocabulary,
    pub entries: Vec<DatasetEntry>,
    pub split: SplitIndices,
}

impl Dataset {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let vocab = cfg.vocabulary()?;
        let entries = load_xyz_dataset(&cfg.data.path, &vocab, &cfg.data.condition_properties)?;
        if entries.is_empty() {
            return Err(Error::Usage(format!(
                "no molecules found in {}",
                cfg.data.path.display()
            )));
        }
        let k = cfg.data.condition_properties.len();
        if let Some(e) = entries.iter().find(|e| e.config.condition.len() != k) {
            return Err(Error::Config(format!(
                "molecule {} lacks the condition properties {:?}",
                e.id, cfg.data.condition_properties
            )));
        }
        let configs: Vec<MolecularConfig> = entries.iter().map(|e| e.config.clone()).collect();
        let split = species_split(
            &configs,
            cfg.data.split,
            derive_seed(cfg.seed, "split", &[]),
        )?;
        if split.train.is_empty() {
            return Err(Error::Degenerate("the training split is empty".into()));
        }
        Ok(Self {
            vocab,
            entries,
            split,
        })
    }

    pub fn train(&self) -> Vec<MolecularConfig> {
        self.split
            .train
            .iter()
            .map(|&i| self.entries[i].config.clone())
            .collect()
    }

    /// Canonical hashes of the training split, the novelty reference.
    pub fn train_hashes(&self) -> Result<BTreeSet<CanonicalHash>> {
        self.split
            .train
            .par_iter()
            .map(|&i| classify(&self.entries[i].config, &self.vocab).map(|c| c.hash))
            .collect::<Result<Vec<_>>>()
            .map(|v| v.into_iter().collect())
    }

    pub fn conditions(&self) -> Result<ConditionSizeDistribution> {
        let samples: Vec<(Vec<f64>, usize)> = self
            .split
            .train
            .iter()
            .map(|&i| {
                (
                    self.entries[i].config.condition.clone(),
                    self.entries[i].config.num_atoms(),
                )
            })
            .collect();
        ConditionSizeDistribution::fit(&samples)
    }
}

#[derive(Serialize)]
struct SplitManifest<'a> {
    seed: u64,
    ratios: [f64; 3],
    train: Vec<&'a str>,
    valid: Vec<&'a str>,
    test: Vec<&'a str>,
}

/// Writes split lists, the vocabulary and oracle annotations.
pub fn prepare(cfg: &RunConfig) -> Result<PathBuf> {
    let data = Dataset::load(cfg)?;
    let dir = stage_dir(cfg, "prepare")?;
    let ids = |idx: &[usize]| {
        idx.iter()
            .map(|&i| data.entries[i].id.as_str())
            .collect::<Vec<_>>()
    };
    write_json(
        &dir.join("splits.json"),
        &SplitManifest {
            seed: cfg.seed,
            ratios: cfg.data.split,
            train: ids(&data.split.train),
            valid: ids(&data.split.valid),
            test: ids(&data.split.test),
        },
    )?;
    write_json(
        &dir.join("vocabulary.json"),
        &VocabularySpec::from(data.vocab.clone()),
    )?;

    let oracle = cfg.oracle(&data.vocab)?;
    let objectives = cfg.objectives()?;
    let rows: Vec<(String, Vec<crate::uncertainty::PropertyEstimate>)> = data
        .entries
        .par_iter()
        .map(|e| {
            let hash = classify(&e.config, &data.vocab)?.hash.to_hex();
            Ok((
                hash,
                aligned_estimates(oracle.as_ref(), &objectives, &e.config)?,
            ))
        })
        .collect::<Result<_>>()?;
    let path = dir.join("properties.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head = vec!["molecule_id".to_string(), "hash".to_string()];
    for o in &objectives {
        head.extend([
            o.name.clone(),
            format!("mean_{}", o.name),
            format!("sigma_{}", o.name),
        ]);
    }
    w.write_record(&head)?;
    for (e, (hash, ests)) in data.entries.iter().zip(&rows) {
        let mut rec = vec![e.id.clone(), hash.clone()];
        for (o, est) in objectives.iter().zip(ests) {
            rec.push(
                e.props
                    .get(&o.name)
                    .map(|v| v.to_string())
                    .unwrap_or_default(),
            );
            rec.push(est.mean.to_string());
            rec.push(est.sigma().to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(dir)
}

fn schedule_meta(cfg: &RunConfig) -> ScheduleMeta {
    ScheduleMeta {
        steps: cfg.schedule.steps,
        clamp: cfg.schedule.clamp,
    }
}

/// Denoising pretraining on the training split.
pub fn pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let data = Dataset::load(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let dir = stage_dir(cfg, "pretrain")?;
    let arch = cfg.architecture(data.vocab.len())?;
    let mut params = DenoiserParams::init(arch, &mut stream(cfg.seed, "init", &[]))?;
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let train = data.train();
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let loss_path = dir.join("loss.csv");
    let mut log = BufWriter::new(File::create(&loss_path).map_err(io_err(&loss_path))?);
    writeln!(log, "step,loss").map_err(io_err(&loss_path))?;
    let save = |params: &DenoiserParams, adam: &AdamState, step: usize| {
        Checkpoint {
            params: params.clone(),
            vocabulary: data.vocab.clone(),
            schedule: schedule_meta(cfg),
            training_step: step as u64,
            optimizer: Some(adam.clone()),
        }
        .save(&ckpt_path)
    };
    pretrain::pretrain(
        &mut params,
        &mut adam,
        &train,
        &data.vocab,
        &schedule,
        &cfg.pretrain,
        cfg.seed,
        0,
        |step, loss, p, a| {
            writeln!(log, "{step},{loss}").map_err(io_err(&loss_path))?;
            if (step + 1) % 500 == 0 {
                save(p, a, step + 1)?;
            }
            Ok(())
        },
    )?;
    log.flush().map_err(io_err(&loss_path))?;
    save(&params, &adam, cfg.pretrain.steps)?;
    Ok(ckpt_path)
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.schedule != schedule_meta(cfg) {
        return Err(Error::Checkpoint(format!(
            "{} was trained with schedule {:?}, config asks for {:?}",
            path.display(),
            ckpt.schedule,
            schedule_meta(cfg)
        )));
    }
    if ckpt.params.arch.condition_dim != cfg.data.condition_properties.len() {
        return Err(Error::Checkpoint(format!(
            "{} expects a different condition width",
            path.display()
        )));
    }
    Ok(ckpt)
}

/// The explicit checkpoint, else the fine-tuned one, else the pretrained one.
pub fn resolve_checkpoint(cfg: &RunConfig, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    for stage in ["finetune", "pretrain"] {
        let p = cfg.output_dir.join(stage).join(CHECKPOINT_FILE);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Usage(
        "no checkpoint given and none found under the output directory".into(),
    ))
}

/// RL fine-tuning. With `resume`, continues from the fine-tuning directory's
/// checkpoint and state file. `until` stops early after that many episodes.
pub fn finetune(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    resume: bool,
    until: Option<usize>,
) -> Result<Vec<EpisodeLog>> {
    let data = Dataset::load(cfg)?;
    let schedule = cfg.noise_schedule()?;
    let dir = stage_dir(cfg, "finetune")?;
    let oracle = cfg.oracle(&data.vocab)?;
    let objectives = cfg.objectives()?;
    let train_hashes = data.train_hashes()?;
    let conditions = data.conditions()?;
    let env = RlEnvironment {
        vocab: &data.vocab,
        schedule: &schedule,
        oracle: oracle.as_ref(),
        conditions: &conditions,
        train_hashes: &train_hashes,
        reward: &cfg.reward,
    };
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let state_path = dir.join(RL_STATE_FILE);
    let episodes_path = dir.join("episodes.csv");
    let rewards_path = dir.join("rewards.csv");

    let (mut params, mut adam, mut state) = if resume {
        let ckpt = load_checkpoint(cfg, &ckpt_path)?;
        let text = fs::read_to_string(&state_path).map_err(io_err(&state_path))?;
        let state: RlState = serde_json::from_str(&text)?;
        let adam = ckpt.optimizer.ok_or_else(|| {
            Error::Checkpoint("fine-tuning checkpoint has no optimizer state".into())
        })?;
        (ckpt.params, adam, state)
    } else {
        let src = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => cfg.output_dir.join("pretrain").join(CHECKPOINT_FILE),
        };
        let ckpt = load_checkpoint(cfg, &src)?;
        let adam = AdamState::new(&ckpt.params, AdamConfig::default());
        (ckpt.params, adam, RlState::new(objectives.clone()))
    };
    if state.cutoffs.objectives != objectives {
        return Err(Error::Config(
            "the saved fine-tuning state was made with different objectives".into(),
        ));
    }

    let open = |path: &Path| -> Result<(BufWriter<File>, bool)> {
        let fresh = !resume || !path.exists();
        let file = if fresh {
            File::create(path)
        } else {
            OpenOptions::new().append(true).open(path)
        }
        .map_err(io_err(path))?;
        Ok((BufWriter::new(file), fresh))
    };
    let (mut episodes_out, mut episodes_header) = open(&episodes_path)?;
    let (mut rewards_out, mut rewards_header) = open(&rewards_path)?;
    let names: Vec<String> = objectives.iter().map(|o| o.name.clone()).collect();
    let vocab = data.vocab.clone();
    let meta = schedule_meta(cfg);

    let stop = until.unwrap_or(cfg.ppo.episodes);
    let logs = ppo::train_until(
        &mut params,
        &mut adam,
        &mut state,
        &env,
        &cfg.ppo,
        cfg.seed,
        stop,
        |out| {
            ppo::write_episode_log(
                std::slice::from_ref(out.log),
                &names,
                &mut episodes_out,
                episodes_header,
            )?;
            ppo::write_reward_rows(
                out.log.episode,
                &out.batch.rewards,
                &mut rewards_out,
                rewards_header,
            )?;
            episodes_header = false;
            rewards_header = false;
            episodes_out.flush().map_err(io_err(&episodes_path))?;
            rewards_out.flush().map_err(io_err(&rewards_path))?;
            Checkpoint {
                params: out.params.clone(),
                vocabulary: vocab.clone(),
                schedule: meta,
                training_step: out.state.updates_done as u64,
                optimizer: Some(out.adam.clone()),
            }
            .save(&ckpt_path)?;
            write_json(&state_path, out.state)
        },
    )?;
    if logs.is_empty() && !resume {
        // zero episodes still leaves a loadable checkpoint behind
        Checkpoint {
            params,
            vocabulary: vocab,
            schedule: meta,
            training_step: 0,
            optimizer: Some(adam),
        }
        .save(&ckpt_path)?;
        write_json(&state_path, &state)?;
    }
    Ok(logs)
}

/// Draws `n` molecules; molecule `i` uses only stream `i`.
pub fn sample(cfg: &RunConfig, checkpoint: Option<&Path>, n: Option<usize>) -> Result<PathBuf> {
    let n = n.unwrap_or(cfg.sample.n);
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let data = Dataset::load(cfg)?;
    let ckpt = load_checkpoint(cfg, &resolve_checkpoint(cfg, checkpoint)?)?;
    let schedule = cfg.noise_schedule()?;
    let conditions = data.conditions()?;
    let oracle = cfg.oracle(&data.vocab)?;
    let objectives = cfg.objectives()?;
    let dir = stage_dir(cfg, "samples")?;
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if name.starts_with("mol_") && name.ends_with(".xyz") {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
    }
    let molecules: Vec<MolecularConfig> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, "sample", &[i as u64]);
            let (cond, m) = conditions.draw(&mut rng);
            sample_molecule(
                &ckpt.params,
                &cond,
                m,
                &data.vocab,
                &schedule,
                &mut RngNoise(&mut rng),
                false,
            )
            .map(|r| r.0)
        })
        .collect::<Result<_>>()?;
    let path = dir.join("properties.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head = vec!["molecule_id".to_string(), "hash".to_string()];
    for o in &objectives {
        head.extend([format!("mean_{}", o.name), format!("sigma_{}", o.name)]);
    }
    w.write_record(&head)?;
    for (i, m) in molecules.iter().enumerate() {
        let id = format!("mol_{i:05}");
        let hash = classify(m, &data.vocab)?.hash.to_hex();
        // molecules outside a table oracle's coverage get no annotation
        let ests = aligned_estimates(oracle.as_ref(), &objectives, m).ok();
        let mut rec = vec![id.clone(), hash];
        let mut props = Vec::new();
        match &ests {
            Some(ests) => {
                for (o, e) in objectives.iter().zip(ests) {
                    rec.push(e.mean.to_string());
                    rec.push(e.sigma().to_string());
                    props.push((o.name.clone(), e.mean));
                }
            }
            None => rec.extend(std::iter::repeat_n(String::new(), 2 * objectives.len())),
        }
        w.write_record(&rec)?;
        write_file(&dir.join(format!("{id}.xyz")), write_xyz(m, &props))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(dir)
}

/// Scores a directory of generated XYZ files.
pub fn evaluate(cfg: &RunConfig, samples: &Path) -> Result<GenerationReport> {
    if !samples.is_dir() {
        return Err(Error::Usage(format!(
            "{} is not a directory",
            samples.display()
        )));
    }
    let data = Dataset::load(cfg)?;
    let generated: Vec<MolecularConfig> = load_xyz_dataset(samples, &data.vocab, &[])?
        .into_iter()
        .map(|e| e.config)
        .collect();
    if generated.is_empty() {
        return Err(Error::Usage(format!(
            "no XYZ files in {}",
            samples.display()
        )));
    }
    let oracle = cfg.oracle(&data.vocab)?;
    let objectives = cfg.objectives()?;
    let ctx = EvalContext {
        vocab: &data.vocab,
        oracle: oracle.as_ref(),
        objectives: &objectives,
    };
    let report = evaluate_set(&generated, &data.train_hashes()?, &ctx)?;
    let dir = stage_dir(cfg, "evaluate")?;
    report.write_json(&dir.join("report.json"))?;
    let path = dir.join("details.csv");
    report.write_details_csv(File::create(&path).map_err(io_err(&path))?)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub property: String,
    pub n: usize,
    pub r_squared: f64,
    pub auce: f64,
}

/// R², AUCE and the coverage curve for every property that has ground truth.
pub fn calibrate(cfg: &RunConfig, table: &Path) -> Result<Vec<CalibrationSummary>> {
    let t = PropertyTable::read(table)?;
    let dir = stage_dir(cfg, "calibrate")?;
    let curve_path = dir.join("curve.csv");
    let mut w = csv::Writer::from_path(&curve_path)?;
    w.write_record(["property", "confidence", "observed"])?;
    let mut out = Vec::new();
    for (k, name) in t.properties.iter().enumerate() {
        let (truth, means, sigmas) = t.column(k);
        let rows: Vec<(f64, f64, f64)> = truth
            .iter()
            .zip(&means)
            .zip(&sigmas)
            .filter_map(|((y, m), s)| y.map(|y| (y, *m, *s)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let ys: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let ms: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let ss: Vec<f64> = rows.iter().map(|r| r.2).collect();
        for (c, p) in calibration_curve(&ys, &ms, &ss, CALIBRATION_LEVELS)? {
            w.write_record([name.clone(), c.to_string(), p.to_string()])?;
        }
        out.push(CalibrationSummary {
            property: name.clone(),
            n: rows.len(),
            r_squared: r_squared(&ys, &ms)?,
            auce: auce(&ys, &ms, &ss, CALIBRATION_LEVELS)?,
        });
    }
    w.flush().map_err(io_err(&curve_path))?;
    if out.is_empty() {
        return Err(Error::Usage(format!(
            "{} has no ground-truth columns",
            table.display()
        )));
    }
    write_json(&dir.join("calibration.json"), &out)?;
    Ok(out)
}

/// Writes `n` random valid C/N/O/F molecules with noisy synthetic property
/// labels and a manifest, for desk-scale runs.
pub fn synth_toy(out: &Path, n: usize, seed: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    create_dir(out)?;
    let vocab = AtomVocabulary::qm9();
    let oracle = SyntheticOracle::with_defaults(vocab.clone());
    let spec = ToySpec::qm9_like();
    let names: Vec<String> = oracle.properties().iter().map(|p| p.name.clone()).collect();
    let width = n.to_string().len().max(4);
    for i in 0..n {
        let mut rng = stream(seed, "toy", &[i as u64]);
        let mol = random_molecule(&mut rng, &vocab, &spec)?;
        let raw = oracle.raw_values(&mol)?;
        let props: Vec<(String, f64)> = oracle
            .properties()
            .iter()
            .map(|p| {
                let noise: f64 = rng.sample(StandardNormal);
                (
                    p.name.clone(),
                    raw[p.name.as_str()] + p.var_aleatoric.sqrt() * noise,
                )
            })
            .collect();
        write_file(
            &out.join(format!("mol_{i:0width$}.xyz")),
            write_xyz(&mol, &props),
        )?;
    }
    write_json(
        &out.join(MANIFEST_FILE),
        &DatasetManifest {
            vocabulary: vocab.into(),
            properties: names,
        },
    )
}
