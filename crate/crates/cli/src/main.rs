use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcgrad::cartpole::{CostKind, Task};
use pcgrad::experiment::{emit_report, run_experiment, success_rate};
use pcgrad::{EstimatorKind, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pcgrad", version, about = "GP model-based policy search on the cart-pole")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the episode protocol for every seed and write the report.
    Run(RunArgs),
    /// Print the default configuration as TOML.
    Config,
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with any subset of the configuration fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    cost: Option<CostKind>,
    /// Observation noise multiplier.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    estimator: Option<EstimatorKind>,
    #[arg(long)]
    particles: Option<usize>,
    /// Optimizer steps per episode.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    evaluations: Option<usize>,
    /// `a..b` (inclusive) or a comma separated list.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Seeds>,
    /// Multiplier on the model's predictive noise variance.
    #[arg(long)]
    noise_mult: Option<f64>,
    /// Resample particles from a fitted Gaussian each step (rp only).
    #[arg(long)]
    resample: bool,
    #[arg(long)]
    no_checkpoints: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
struct Seeds(Vec<u64>);

fn parse_seeds(s: &str) -> Result<Seeds, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
        if b < a {
            return Err(format!("empty seed range {s}"));
        }
        return Ok(Seeds((a..=b).collect()));
    }
    s.split(',')
        .map(|p| p.trim().parse().map_err(|e| format!("bad seed `{p}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Seeds)
}

fn build_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let s = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&s).with_context(|| format!("parsing {}", p.display()))?
        }
        None => ExperimentConfig::default(),
    };
    macro_rules! set {
        ($($f:ident => $t:ident),*) => {$(if let Some(v) = a.$f.clone() { cfg.$t = v; })*};
    }
    set!(task => task, cost => cost, k => k, estimator => estimator, particles => particles,
         steps => grad_steps, horizon => horizon, episodes => learned_episodes,
         evaluations => evaluations, noise_mult => noise_mult);
    if let Some(Seeds(s)) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if a.resample {
        cfg.resample = true;
    }
    if a.no_checkpoints {
        cfg.checkpoints = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<()> {
    let cfg = build_config(&a)?;
    if let Some(n) = a.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let resolved = a.out.join("config.toml");
    std::fs::write(&resolved, toml::to_string(&cfg)?).with_context(|| format!("writing {}", resolved.display()))?;

    let records = run_experiment(&cfg, Some(&a.out))?;
    let paths = emit_report(&cfg, &records, &a.out)?;
    println!("success rate: {:.2}", success_rate(&records));
    println!("wrote {}", paths.summary.display());
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if failed == records.len() {
        bail!("all {failed} seeds failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Run(a) => run(a),
        Cmd::Config => {
            print!("{}", toml::to_string(&ExperimentConfig::default())?);
            Ok(())
        }
    }
}
