use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use molrl::ablation::{run_plan, AblationPlan, DEFAULT_SEEDS};
use molrl::cli::{calibrate, evaluate, finetune, prepare, pretrain, sample, synth_toy, RunConfig};
use molrl::{Error, Result};

/// Thread count for the data-parallel parts. Nothing else is read from the environment.
const THREADS_VAR: &str = "MOLRL_THREADS";

#[derive(Parser)]
#[command(
    name = "molrl",
    version,
    about = "RL fine-tuning of an equivariant molecular diffusion model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other config key, e.g. `--set ppo.episodes=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Split the dataset, write the vocabulary and oracle annotations.
    Prepare(Common),
    /// Train the denoiser on the training split.
    Pretrain(Common),
    /// PPO fine-tuning from a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the last saved episode.
        #[arg(long)]
        resume: bool,
        /// Stop once this many episodes are done; resume later with --resume.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Generate molecules as XYZ files.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Score a directory of XYZ files.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
    },
    /// R², AUCE and a coverage curve from a property table.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        table: PathBuf,
    },
    /// Fine-tune under each reward ablation and tabulate the results.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Plan TOML; the four standard runs if omitted.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Comma-separated seeds, overriding the plan's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Write a random toy dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    if p.is_absolute() {
        return Ok(p.to_path_buf());
    }
    let cwd = std::env::current_dir().map_err(|e| Error::io("current directory", e))?;
    Ok(cwd.join(p))
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            let out = absolute(out)?;
            overrides.push(format!(
                "output_dir={}",
                toml::Value::String(out.display().to_string())
            ));
        }
        RunConfig::load(&self.config, &overrides)
    }
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize =
        raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Usage(format!("{THREADS_VAR}={raw:?} is not a positive integer"))
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Prepare(c) => println!("{}", prepare(&c.load()?)?.display()),
        Command::Pretrain(c) => println!("{}", pretrain(&c.load()?)?.display()),
        Command::Finetune {
            common,
            checkpoint,
            resume,
            until,
        } => {
            let logs = finetune(&common.load()?, checkpoint.as_deref(), resume, until)?;
            for l in &logs {
                println!(
                    "episode {:>3}  reward {:+.5}  validity {:6.2}  lambda {:.4}",
                    l.episode, l.mean_reward, l.validity, l.lambda
                );
            }
        }
        Command::Sample {
            common,
            checkpoint,
            n,
        } => {
            println!(
                "{}",
                sample(&common.load()?, checkpoint.as_deref(), n)?.display()
            )
        }
        Command::Evaluate { common, samples } => {
            println!("{}", evaluate(&common.load()?, &samples)?.table_row())
        }
        Command::Calibrate { common, table } => print_json(&calibrate(&common.load()?, &table)?)?,
        Command::Ablate {
            common,
            plan,
            seeds,
        } => {
            let cfg = common.load()?;
            let plan = match plan {
                Some(p) => AblationPlan::read(&p)?,
                None => AblationPlan::standard(),
            };
            let seeds = seeds
                .or_else(|| plan.seeds.clone())
                .unwrap_or_else(|| DEFAULT_SEEDS.to_vec());
            let (_, summary) = run_plan(&plan, &cfg, &seeds)?;
            println!("{}", summary.display());
        }
        Command::Synth { out, n, seed } => {
            synth_toy(&out, n, seed)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!(
        "{}",
        serde_json::json!({ "error": kind, "message": message })
    );
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.render().to_string().trim().to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
