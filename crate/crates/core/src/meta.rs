//! Meta-training over a family of environments, adaptation to a new one, and
//! evaluation.
//!
//! Each outer iteration refreshes the latent of `K` environments by strategy
//! search with the weights frozen, then trains the shared weights for `N_in`
//! search iterations on scenarios of those environments with their latents
//! held fixed. Adaptation is strategy search alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bayesopt::{optimize_latent, BoConfig, BoResult, BoRound, GPDataset};
use crate::error::{Error, Result};
use crate::grid::{Contingency, EnvironmentParams, EpisodeSummary, EpisodeTrace, GridEnv, Scenario};
use crate::pars::{run_iterations, GridOracle, ParsConfig, ParsState, WorkerPool};
use crate::policy::{
    forward_flat, HiddenState, LatentVector, PolicyBundle, PolicySpec, PolicyWeights, Workspace,
};
use crate::seed::{self, stream};

#[derive(Debug, Clone, PartialEq)]
pub struct LatentEntry {
    pub latent: LatentVector,
    /// Incumbent objective of the last strategy search.
    pub last_score: Option<f64>,
    /// Dataset of the last strategy search; not persisted.
    pub dataset: Option<GPDataset>,
}

/// Latent vector per environment id.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    dim: usize,
    entries: BTreeMap<String, LatentEntry>,
}

impl LatentTable {
    pub fn new<I, S>(ids: I, dim: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries = ids
            .into_iter()
            .map(|id| {
                (
                    id.into(),
                    LatentEntry {
                        latent: LatentVector::zeros(dim),
                        last_score: None,
                        dataset: None,
                    },
                )
            })
            .collect();
        LatentTable { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent(&self, id: &str) -> Option<&LatentVector> {
        self.entries.get(id).map(|e| &e.latent)
    }

    pub fn entry(&self, id: &str) -> Option<&LatentEntry> {
        self.entries.get(id)
    }

    pub fn set(&mut self, id: &str, latent: LatentVector, score: Option<f64>) -> Result<()> {
        if latent.dim() != self.dim {
            return Err(Error::Argument(format!(
                "latent for `{id}` has dim {}, table expects {}",
                latent.dim(),
                self.dim
            )));
        }
        let dataset = self.entries.remove(id).and_then(|e| e.dataset);
        self.entries.insert(
            id.to_string(),
            LatentEntry {
                latent,
                last_score: score,
                dataset,
            },
        );
        Ok(())
    }

    fn set_dataset(&mut self, id: &str, data: GPDataset) {
        if let Some(e) = self.entries.get_mut(id) {
            e.dataset = Some(data);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &LatentEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    pub n_outer: usize,
    pub n_inner: usize,
    pub k_envs: usize,
    pub q_contingencies: usize,
    pub m_scenarios: usize,
    pub pars: ParsConfig,
    pub bo: BoConfig,
}

impl Default for MetaConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        MetaConfig {
            n_outer: 5,
            n_inner: 20,
            k_envs: 2,
            q_contingencies: 4,
            m_scenarios: 16,
            pars: ParsConfig::default(),
            bo: BoConfig::default(),
        }
    }
}

impl MetaConfig {
    pub fn full_scale() -> Self {
        MetaConfig {
            n_outer: 25,
            n_inner: 20,
            k_envs: 2,
            q_contingencies: 9,
            m_scenarios: 72,
            pars: ParsConfig::full_scale(),
            bo: BoConfig::default(),
        }
    }

    pub fn validate(&self, n_train_envs: usize) -> Result<()> {
        for (path, v) in [
            ("meta.n_outer", self.n_outer),
            ("meta.k_envs", self.k_envs),
            ("meta.q_contingencies", self.q_contingencies),
            ("meta.m_scenarios", self.m_scenarios),
        ] {
            if v == 0 {
                return Err(Error::config(path, "must be >= 1"));
            }
        }
        if self.k_envs > n_train_envs {
            return Err(Error::config(
                "meta.k_envs",
                format!("{} exceeds the {n_train_envs} training environments", self.k_envs),
            ));
        }
        self.pars.validate()?;
        self.bo.validate()
    }
}

/// One search iteration of meta-training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub outer: usize,
    pub iteration: u64,
    pub mean_return: f64,
    pub perturbed_return: f64,
    pub step_size: f64,
    pub noise_std: f64,
}

pub fn write_history<W: Write>(out: W, rows: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["outer", "iteration", "mean_return", "perturbed_return", "alpha", "nu"])?;
    for r in rows {
        w.write_record([
            r.outer.to_string(),
            r.iteration.to_string(),
            r.mean_return.to_string(),
            r.perturbed_return.to_string(),
            r.step_size.to_string(),
            r.noise_std.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to continue meta-training.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub spec: PolicySpec,
    pub pars: ParsState,
    pub table: LatentTable,
    /// Completed outer iterations.
    pub outer: usize,
    pub seed: u64,
    pub history: Vec<HistoryRow>,
    pub bo_runs: usize,
}

impl MetaState {
    pub fn new(spec: PolicySpec, train_envs: &[EnvironmentParams], cfg: &MetaConfig, seed: u64) -> Result<Self> {
        let bundle = PolicyBundle::new(spec, seed)?;
        let table = LatentTable::new(train_envs.iter().map(|e| e.id.clone()), bundle.latent_dim());
        Ok(MetaState {
            pars: ParsState::new(bundle.weights.into_flat(), bundle.normalizer, &cfg.pars),
            spec: bundle.spec,
            table,
            outer: 0,
            seed,
            history: Vec::new(),
            bo_runs: 0,
        })
    }

    pub fn bundle(&self) -> Result<PolicyBundle> {
        Ok(PolicyBundle {
            spec: self.spec.clone(),
            weights: PolicyWeights::unflatten(&self.spec, self.pars.theta.clone())?,
            normalizer: self.pars.normalizer.clone(),
        })
    }
}

/// Strategy-search results of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterReport {
    pub outer: usize,
    pub searches: Vec<(String, Vec<BoRound>)>,
}

fn sample_without_replacement<T: Clone>(items: &[T], n: usize, seed: u64, tags: &[u64]) -> Vec<T> {
    let mut v = items.to_vec();
    v.shuffle(&mut seed::rng(seed, tags));
    v.truncate(n);
    v
}

/// Runs one outer iteration in place.
pub fn outer_step(
    env: &GridEnv,
    state: &mut MetaState,
    train_envs: &[EnvironmentParams],
    contingencies: &[Contingency],
    cfg: &MetaConfig,
    pool: &WorkerPool,
) -> Result<OuterReport> {
    cfg.validate(train_envs.len())?;
    if contingencies.is_empty() {
        return Err(Error::config("train_contingencies", "contingency grid is empty"));
    }
    let k = state.outer;
    let seed = state.seed;
    // round-robin over the environment list across outer iterations
    let envs: Vec<&EnvironmentParams> = (0..cfg.k_envs)
        .map(|j| &train_envs[(k * cfg.k_envs + j) % train_envs.len()])
        .collect();

    let bundle = state.bundle()?;
    let mut searches = Vec::with_capacity(envs.len());
    for e in &envs {
        let env_tag = seed::tag(&e.id);
        let conts = sample_without_replacement(
            contingencies,
            cfg.q_contingencies,
            seed,
            &[stream::CONTINGENCY_SAMPLE, k as u64, env_tag],
        );
        let scenarios: Vec<Scenario> = conts.into_iter().map(|c| Scenario::new((*e).clone(), c)).collect();
        let anchor = state
            .table
            .latent(&e.id)
            .cloned()
            .ok_or_else(|| Error::Argument(format!("no latent for environment `{}`", e.id)))?;
        let bo_seed = seed::derive(seed, &[stream::BO, k as u64, env_tag]);
        let res = optimize_latent(env, &bundle, &scenarios, &cfg.bo, Some(&anchor), bo_seed, pool)?;
        state.table.set(&e.id, res.best.clone(), Some(res.best_y))?;
        state.table.set_dataset(&e.id, res.dataset);
        state.bo_runs += 1;
        searches.push((e.id.clone(), res.trace));
    }

    if cfg.n_inner > 0 {
        let pool_scenarios: Vec<Scenario> = envs
            .iter()
            .flat_map(|e| contingencies.iter().map(|c| Scenario::new((*e).clone(), *c)))
            .collect();
        let scenarios = sample_without_replacement(
            &pool_scenarios,
            cfg.m_scenarios,
            seed,
            &[stream::ENV_SAMPLE, k as u64],
        );
        let latents = scenarios
            .iter()
            .map(|s| state.table.latent(&s.env.id).cloned().expect("sampled env is in the table"))
            .collect();
        let oracle = GridOracle {
            env,
            spec: &state.spec,
            scenarios: &scenarios,
            latents,
        };
        let records = run_iterations(&mut state.pars, &oracle, &cfg.pars, cfg.n_inner, seed, pool)?;
        state.history.extend(records.iter().map(|r| HistoryRow {
            outer: k,
            iteration: r.iteration,
            mean_return: r.mean_return,
            perturbed_return: r.perturbed_return,
            step_size: r.step_size,
            noise_std: r.noise_std,
        }));
    }
    state.outer += 1;
    Ok(OuterReport { outer: k, searches })
}

/// Runs the remaining outer iterations, calling `after_outer` once each
/// completes (for checkpoints and traces).
pub fn meta_train_from<F>(
    env: &GridEnv,
    mut state: MetaState,
    train_envs: &[EnvironmentParams],
    contingencies: &[Contingency],
    cfg: &MetaConfig,
    pool: &WorkerPool,
    mut after_outer: F,
) -> Result<MetaState>
where
    F: FnMut(&MetaState, &OuterReport) -> Result<()>,
{
    if train_envs.is_empty() {
        return Err(Error::config("train_envs", "no training environments"));
    }
    while state.outer < cfg.n_outer {
        let report = outer_step(env, &mut state, train_envs, contingencies, cfg, pool)?;
        after_outer(&state, &report)?;
    }
    Ok(state)
}

/// Meta-trains from a fresh initialization.
pub fn meta_train(
    env: &GridEnv,
    spec: PolicySpec,
    train_envs: &[EnvironmentParams],
    contingencies: &[Contingency],
    cfg: &MetaConfig,
    seed: u64,
    pool: &WorkerPool,
) -> Result<MetaState> {
    let state = MetaState::new(spec, train_envs, cfg, seed)?;
    meta_train_from(env, state, train_envs, contingencies, cfg, pool, |_, _| Ok(()))
}

/// Strategy search for a new environment with weights and normalizer frozen.
pub fn adapt(
    env: &GridEnv,
    bundle: &PolicyBundle,
    target: &EnvironmentParams,
    contingencies: &[Contingency],
    cfg: &BoConfig,
    seed: u64,
    pool: &WorkerPool,
) -> Result<BoResult> {
    if contingencies.is_empty() {
        return Err(Error::Argument("no contingencies for adaptation".into()));
    }
    let scenarios: Vec<Scenario> = contingencies
        .iter()
        .map(|c| Scenario::new(target.clone(), *c))
        .collect();
    let before = bundle.clone();
    let res = optimize_latent(env, bundle, &scenarios, cfg, None, seed::derive(seed, &[seed::tag(&target.id)]), pool)?;
    assert_eq!(&before, bundle, "adaptation must not modify the policy");
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub scenario_id: String,
    pub total_return: f64,
    pub envelope_pass: bool,
    pub total_shed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregates {
    pub mean_return: f64,
    pub pass_rate: f64,
    pub mean_shed: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub traces: Vec<EpisodeTrace>,
}

impl EvalReport {
    /// `None` for an empty report.
    pub fn aggregates(&self) -> Option<Aggregates> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        Some(Aggregates {
            mean_return: self.rows.iter().map(|r| r.total_return).sum::<f64>() / n,
            pass_rate: self.rows.iter().filter(|r| r.envelope_pass).count() as f64 / n,
            mean_shed: self.rows.iter().map(|r| r.total_shed).sum::<f64>() / n,
        })
    }

    pub fn extend(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.traces.extend(other.traces);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario_id", "return", "envelope_pass", "total_shed"])?;
        for r in &self.rows {
            w.write_record([
                r.scenario_id.clone(),
                r.total_return.to_string(),
                r.envelope_pass.to_string(),
                r.total_shed.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Episode seed for a scenario; identical across evaluation arms.
pub fn scenario_seed(seed: u64, scenario: &Scenario) -> u64 {
    seed::derive(seed, &[stream::EVAL, seed::tag(&scenario.id())])
}

/// One episode of the policy with latent `c`, frozen normalizer.
pub fn policy_episode(
    env: &GridEnv,
    bundle: &PolicyBundle,
    c: &LatentVector,
    scenario: &Scenario,
    seed: u64,
    trace: Option<&mut EpisodeTrace>,
) -> Result<EpisodeSummary> {
    let mut hidden = HiddenState::zeros(&bundle.spec);
    let mut ws = Workspace::default();
    let mut obs_buf = Vec::new();
    env.run_episode(
        scenario,
        seed,
        |_, obs| {
            obs_buf.clear();
            obs_buf.extend_from_slice(&obs.voltages);
            obs_buf.extend_from_slice(&obs.load_fracs);
            forward_flat(
                &bundle.spec,
                bundle.weights.flatten(),
                &bundle.normalizer,
                &obs_buf,
                c.as_slice(),
                &mut hidden,
                &mut ws,
            )
        },
        trace,
    )
}

/// Evaluates the policy with latent `c` on every scenario.
pub fn evaluate(
    env: &GridEnv,
    bundle: &PolicyBundle,
    c: &LatentVector,
    scenarios: &[Scenario],
    seed: u64,
    keep_traces: bool,
    pool: &WorkerPool,
) -> Result<EvalReport> {
    if c.dim() != bundle.latent_dim() {
        return Err(Error::Argument(format!(
            "latent dim {} does not match policy latent dim {}",
            c.dim(),
            bundle.latent_dim()
        )));
    }
    let results = pool.map(scenarios, |s| -> Result<(EvalRow, Option<EpisodeTrace>)> {
        let mut trace = keep_traces.then(EpisodeTrace::default);
        let summary = policy_episode(env, bundle, c, s, scenario_seed(seed, s), trace.as_mut())?;
        Ok((
            EvalRow {
                scenario_id: s.id(),
                total_return: summary.total_return,
                envelope_pass: summary.envelope_ok,
                total_shed: summary.total_shed,
            },
            trace,
        ))
    });
    let mut report = EvalReport::default();
    for r in results {
        let (row, trace) = r?;
        report.rows.push(row);
        report.traces.extend(trace);
    }
    Ok(report)
}

/// Writes per-scenario return differences between two arms evaluated on the
/// same scenarios.
pub fn write_paired<W: Write>(out: W, adapted: &EvalReport, zero: &EvalReport) -> Result<()> {
    if adapted.rows.len() != zero.rows.len()
        || adapted.rows.iter().zip(&zero.rows).any(|(a, b)| a.scenario_id != b.scenario_id)
    {
        return Err(Error::Argument("paired reports cover different scenarios".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scenario_id", "return_adapted", "return_zero", "difference"])?;
    for (a, b) in adapted.rows.iter().zip(&zero.rows) {
        w.write_record([
            a.scenario_id.clone(),
            a.total_return.to_string(),
            b.total_return.to_string(),
            (a.total_return - b.total_return).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Twice the population standard deviation of a set of returns.
pub fn noise_margin(returns: &[f64]) -> f64 {
    if returns.is_empty() {
        return 0.0;
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    2.0 * (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt()
}
