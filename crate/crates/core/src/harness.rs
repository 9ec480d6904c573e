//! Run directories and the operations behind the command-line front end.
//!
//! ```text
//! <run>/resolved_config.toml
//! <run>/checkpoints/outer-0001.ckpt ...
//! <run>/history.csv
//! <run>/bo_traces/outer-0000-<env>.csv, adapt-<env>.csv
//! <run>/latents/<env>.toml
//! <run>/eval/<label>.csv, <label>_paired.csv, <label>_traces/<scenario>.csv
//! <run>/comparison.csv
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::baseline::{run_baselines, ComparisonReport};
use crate::bayesopt::{save_bo_trace, BoResult};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::{Contingency, EnvironmentParams, Scenario};
use crate::meta::{adapt, evaluate, meta_train_from, write_history, EvalReport, LatentTable, MetaState};
use crate::pars::WorkerPool;
use crate::policy::LatentVector;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

/// Paths inside one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    /// Run directory owning `checkpoint`, if it sits in a `checkpoints/` folder.
    pub fn of_checkpoint(checkpoint: &Path) -> Option<Self> {
        let dir = checkpoint.parent()?;
        if dir.file_name()? != "checkpoints" {
            return None;
        }
        Some(RunDir::new(dir.parent()?))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolved_config(&self) -> PathBuf {
        self.root.join(RESOLVED_CONFIG)
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, outer: usize) -> PathBuf {
        self.checkpoints().join(format!("outer-{outer:04}.ckpt"))
    }

    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }

    pub fn bo_traces(&self) -> PathBuf {
        self.root.join("bo_traces")
    }

    pub fn latents(&self) -> PathBuf {
        self.root.join("latents")
    }

    pub fn latent(&self, env_id: &str) -> PathBuf {
        self.latents().join(format!("{env_id}.toml"))
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn comparison(&self) -> PathBuf {
        self.root.join("comparison.csv")
    }

    /// Checkpoint with the highest outer index.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(None);
        }
        let mut found = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if let Some(k) = name
                .strip_prefix("outer-")
                .and_then(|n| n.strip_suffix(".ckpt"))
                .and_then(|n| n.parse::<usize>().ok())
            {
                found.push((k, path));
            }
        }
        Ok(found.into_iter().max_by_key(|(k, _)| *k).map(|(_, p)| p))
    }
}

/// Adapted latent of one environment, as written by `adapt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentFile {
    pub env: String,
    pub latent: Vec<f64>,
    pub best_return: f64,
}

impl LatentFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let de = toml::Deserializer::parse(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.message().to_string()))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            Error::config(format!("{}:{}", path.display(), e.path()), e.inner().message().to_string())
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Argument(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

fn create_dirs(dir: &RunDir) -> Result<()> {
    for d in [dir.root().to_path_buf(), dir.checkpoints(), dir.bo_traces()] {
        fs::create_dir_all(d)?;
    }
    Ok(())
}

/// Meta-trains, writing the resolved config, a checkpoint every
/// `checkpoint_every` outer iterations, per-environment strategy-search
/// traces and the history CSV.
///
/// With `resume`, continues from the newest checkpoint in the run directory.
/// `stop_after` bounds the number of outer iterations run by this call.
pub fn train(
    cfg: &RunConfig,
    dir: &RunDir,
    resume: bool,
    stop_after: Option<usize>,
    pool: &WorkerPool,
) -> Result<MetaState> {
    cfg.validate()?;
    create_dirs(dir)?;
    cfg.save(&dir.resolved_config())?;
    let env = cfg.env()?;
    let spec = cfg.policy_spec()?;
    let train_envs = &cfg.scenarios.train_envs;
    let contingencies = cfg.scenarios.train_contingencies.enumerate();

    let state = match (resume, dir.latest_checkpoint()?) {
        (true, Some(path)) => {
            info!("resuming from {}", path.display());
            let state = load_checkpoint(&path)?;
            if state.spec != spec {
                return Err(Error::config("policy", "checkpoint was written for a different policy shape"));
            }
            state
        }
        _ => MetaState::new(spec, train_envs, &cfg.meta, cfg.seed)?,
    };

    let mut meta = cfg.meta.clone();
    if let Some(n) = stop_after {
        meta.n_outer = meta.n_outer.min(state.outer + n);
    }
    let final_outer = meta.n_outer;
    let state = meta_train_from(&env, state, train_envs, &contingencies, &meta, pool, |st, report| {
        for (id, trace) in &report.searches {
            save_bo_trace(&dir.bo_traces().join(format!("outer-{:04}-{id}.csv", report.outer)), trace)?;
        }
        let last = st.history.last().map_or(f64::NAN, |r| r.mean_return);
        info!("outer {} done, mean return {last:.3}", report.outer);
        if st.outer % cfg.checkpoint_every == 0 || st.outer == final_outer {
            save_checkpoint(&dir.checkpoint(st.outer), st)?;
        }
        write_history(fs::File::create(dir.history())?, &st.history)
    })?;
    write_history(fs::File::create(dir.history())?, &state.history)?;
    Ok(state)
}

/// Environment with `id` and the contingencies of its split.
pub fn find_environment(cfg: &RunConfig, id: &str) -> Result<(EnvironmentParams, Vec<Contingency>)> {
    let grids = &cfg.scenarios;
    if let Some(e) = grids.test_envs.iter().find(|e| e.id == id) {
        return Ok((e.clone(), grids.test_contingencies.enumerate()));
    }
    if let Some(e) = grids.train_envs.iter().find(|e| e.id == id) {
        return Ok((e.clone(), grids.train_contingencies.enumerate()));
    }
    Err(Error::config("--env", format!("no environment `{id}` in the config")))
}

/// Strategy search for one environment; writes its latent file and trace.
pub fn adapt_env(
    cfg: &RunConfig,
    dir: &RunDir,
    checkpoint: &Path,
    env_id: &str,
    pool: &WorkerPool,
) -> Result<BoResult> {
    let (target, contingencies) = find_environment(cfg, env_id)?;
    let bundle = load_checkpoint(checkpoint)?.bundle()?;
    let env = cfg.env()?;
    let res = adapt(&env, &bundle, &target, &contingencies, &cfg.meta.bo, cfg.seed, pool)?;
    fs::create_dir_all(dir.latents())?;
    fs::create_dir_all(dir.bo_traces())?;
    save_bo_trace(&dir.bo_traces().join(format!("adapt-{env_id}.csv")), &res.trace)?;
    LatentFile {
        env: env_id.to_string(),
        latent: res.best.0.clone(),
        best_return: res.best_y,
    }
    .save(&dir.latent(env_id))?;
    info!("adapted {env_id}: latent {:?}, return {:.3}", res.best.0, res.best_y);
    Ok(res)
}

/// Latent choice for `evaluate`.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentSource {
    File(PathBuf),
    Zero,
}

/// Evaluates on the test scenarios and writes metrics and episode traces.
///
/// A latent file restricts evaluation to its environment and also writes the
/// paired difference against the zero latent. `env_filter` restricts the
/// zero-latent arm the same way.
pub fn evaluate_run(
    cfg: &RunConfig,
    dir: &RunDir,
    checkpoint: &Path,
    source: &LatentSource,
    env_filter: Option<&str>,
    pool: &WorkerPool,
) -> Result<EvalReport> {
    let bundle = load_checkpoint(checkpoint)?.bundle()?;
    let env = cfg.env()?;
    let (_, test) = cfg.scenario_sets()?;
    let zero = LatentVector::zeros(bundle.latent_dim());
    let (label, latent, filter) = match source {
        LatentSource::File(path) => {
            let f = LatentFile::load(path)?;
            if env_filter.is_some_and(|e| e != f.env) {
                return Err(Error::config("--env", format!("latent file is for `{}`", f.env)));
            }
            (f.env.clone(), LatentVector(f.latent), Some(f.env))
        }
        LatentSource::Zero => (
            env_filter.map_or("zero".to_string(), |e| format!("zero-{e}")),
            zero.clone(),
            env_filter.map(str::to_string),
        ),
    };
    if let Some(id) = &filter {
        find_environment(cfg, id)?;
    }
    let scenarios: Vec<Scenario> = test
        .into_iter()
        .filter(|s| filter.as_ref().is_none_or(|id| &s.env.id == id))
        .collect();

    let report = evaluate(&env, &bundle, &latent, &scenarios, cfg.seed, true, pool)?;
    let eval = dir.eval();
    let traces = eval.join(format!("{label}_traces"));
    fs::create_dir_all(&traces)?;
    report.save_csv(&eval.join(format!("{label}.csv")))?;
    for (s, trace) in scenarios.iter().zip(&report.traces) {
        trace.save_csv(&traces.join(format!("{}.csv", s.id())), &env.topology)?;
    }
    if matches!(source, LatentSource::File(_)) {
        let base = evaluate(&env, &bundle, &zero, &scenarios, cfg.seed, false, pool)?;
        let file = fs::File::create(eval.join(format!("{label}_paired.csv")))?;
        crate::meta::write_paired(file, &report, &base)?;
    }
    if let Some(a) = report.aggregates() {
        info!(
            "{label}: mean return {:.3}, pass rate {:.3}, mean shed {:.3}",
            a.mean_return, a.pass_rate, a.mean_shed
        );
    }
    Ok(report)
}

/// Adapts to every test environment, then compares the adapted policy, the
/// zero-latent policy and MPC on all test scenarios.
pub fn baseline_run(
    cfg: &RunConfig,
    dir: &RunDir,
    checkpoint: &Path,
    pool: &WorkerPool,
) -> Result<ComparisonReport> {
    let state = load_checkpoint(checkpoint)?;
    let bundle = state.bundle()?;
    let test_envs = &cfg.scenarios.test_envs;
    let mut table = LatentTable::new(test_envs.iter().map(|e| e.id.clone()), bundle.latent_dim());
    for e in test_envs {
        let res = adapt_env(cfg, dir, checkpoint, &e.id, pool)?;
        table.set(&e.id, res.best, Some(res.best_y))?;
    }
    let env = cfg.env()?;
    let (_, test) = cfg.scenario_sets()?;
    let report = run_baselines(&env, &bundle, &table, &test, &cfg.mpc, cfg.seed, pool)?;
    fs::create_dir_all(dir.root())?;
    report.save_csv(&dir.comparison())?;
    Ok(report)
}
