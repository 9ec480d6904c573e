use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metashed::config::RunConfig;
use metashed::harness::{self, LatentSource, RunDir};
use metashed::pars::WorkerPool;
use metashed::Result;

/// Meta-reinforcement learning for emergency load shedding on a surrogate grid.
#[derive(Debug, Parser)]
#[command(name = "metashed", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Run configuration (TOML). Defaults to the run directory's resolved
    /// config, then to the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset used when no config file is given: desk or full.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured worker count.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory. Defaults to the checkpoint's run directory, then to
    /// the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train and write checkpoints and history.
    Train {
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many outer iterations.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Search the latent of one environment with the policy frozen.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        env: String,
    },
    /// Evaluate on the test scenarios with an adapted or zero latent.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, conflicts_with = "zero", required_unless_present = "zero")]
        latent: Option<PathBuf>,
        #[arg(long)]
        zero: bool,
        /// Restrict to one environment.
        #[arg(long)]
        env: Option<String>,
    },
    /// Compare adapted, zero-latent and MPC arms on the test scenarios.
    Baseline {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Check a config file and print its resolved form.
    ValidateConfig {
        path: Option<PathBuf>,
    },
}

fn resolve(global: &Global, checkpoint: Option<&Path>) -> Result<(RunConfig, RunDir)> {
    let inferred = checkpoint.and_then(RunDir::of_checkpoint);
    let dir_hint = global.out.clone().map(RunDir::new).or(inferred);
    let mut cfg = match (&global.config, &dir_hint) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(dir)) if dir.resolved_config().exists() => RunConfig::load(&dir.resolved_config())?,
        _ => RunConfig::preset(&global.preset)?,
    };
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = global.workers {
        cfg.workers = workers;
    }
    cfg.validate()?;
    let dir = dir_hint.unwrap_or_else(|| RunDir::new(cfg.output_dir.clone()));
    Ok((cfg, dir))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { resume, stop_after } => {
            let (cfg, dir) = resolve(g, None)?;
            let pool = WorkerPool::new(cfg.workers)?;
            let state = harness::train(&cfg, &dir, *resume, *stop_after, &pool)?;
            println!("trained {} outer iterations into {}", state.outer, dir.root().display());
        }
        Command::Adapt { checkpoint, env } => {
            let (cfg, dir) = resolve(g, Some(checkpoint))?;
            let pool = WorkerPool::new(cfg.workers)?;
            let res = harness::adapt_env(&cfg, &dir, checkpoint, env, &pool)?;
            println!("{env}: latent {:?}, return {}", res.best.0, res.best_y);
        }
        Command::Evaluate {
            checkpoint,
            latent,
            zero: _,
            env,
        } => {
            let (cfg, dir) = resolve(g, Some(checkpoint))?;
            let pool = WorkerPool::new(cfg.workers)?;
            let source = latent.clone().map_or(LatentSource::Zero, LatentSource::File);
            let report = harness::evaluate_run(&cfg, &dir, checkpoint, &source, env.as_deref(), &pool)?;
            match report.aggregates() {
                Some(a) => println!(
                    "{} scenarios: mean return {}, pass rate {}, mean shed {}",
                    report.rows.len(),
                    a.mean_return,
                    a.pass_rate,
                    a.mean_shed
                ),
                None => println!("no scenarios"),
            }
        }
        Command::Baseline { checkpoint } => {
            let (cfg, dir) = resolve(g, Some(checkpoint))?;
            let pool = WorkerPool::new(cfg.workers)?;
            let report = harness::baseline_run(&cfg, &dir, checkpoint, &pool)?;
            println!("{} rows written to {}", report.rows.len(), dir.comparison().display());
        }
        Command::ValidateConfig { path } => {
            let cfg = match path {
                Some(p) => RunConfig::load(p)?,
                None => resolve(g, None)?.0,
            };
            print!("{}", cfg.to_toml()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
