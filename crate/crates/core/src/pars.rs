//! Parallel augmented random search over flat policy parameters.
//!
//! Each iteration samples `N` Gaussian directions, evaluates `θ ± νδ` on the
//! same `M` scenarios, keeps the `b` directions with the best `max(r+, r-)`
//! and moves along `Σ (r+ - r-) δ`, scaled by `α / (b σ_b)` where `σ_b` is the
//! population standard deviation of the `2b` retained returns. Step size and
//! noise decay geometrically.
//!
//! Every rollout is an independent task whose seed is derived from
//! `(iteration, direction, sign, scenario)`. Results are reduced in index
//! order, so the parameter trajectory does not depend on the worker count.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridEnv, Scenario};
use crate::meta::LatentTable;
use crate::policy::{forward_flat, HiddenState, LatentVector, PolicyBundle, PolicySpec, RunningNormalizer, Workspace};
use crate::seed::{self, stream};

/// Divisor floor for the retained-return standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParsConfig {
    pub n_directions: usize,
    pub top_b: usize,
    pub step_size: f64,
    pub noise_std: f64,
    pub decay: f64,
    pub iterations: usize,
    pub scenarios_per_direction: usize,
}

impl Default for ParsConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ParsConfig {
            n_directions: 32,
            top_b: 16,
            step_size: 0.1,
            noise_std: 0.05,
            decay: 0.98,
            iterations: 100,
            scenarios_per_direction: 8,
        }
    }
}

impl ParsConfig {
    /// Values used for the 300-bus study.
    pub fn full_scale() -> Self {
        ParsConfig {
            n_directions: 128,
            top_b: 64,
            step_size: 1.0,
            noise_std: 2.0,
            decay: 0.996,
            iterations: 20,
            scenarios_per_direction: 72,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_directions == 0 {
            return Err(Error::config("pars.n_directions", "must be >= 1"));
        }
        if self.top_b == 0 || self.top_b > self.n_directions {
            return Err(Error::config("pars.top_b", "must satisfy 1 <= b <= N"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("pars.step_size", "must be > 0"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("pars.noise_std", "must be > 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("pars.decay", "must lie in (0, 1]"));
        }
        if self.scenarios_per_direction == 0 {
            return Err(Error::config("pars.scenarios_per_direction", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionEval {
    pub index: usize,
    pub delta: Vec<f64>,
    pub r_plus: f64,
    pub r_minus: f64,
}

/// `n` vectors of i.i.d. standard normal entries.
pub fn sample_directions(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed, &[stream::DIRECTIONS]);
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Top-`b` update of `theta` from evaluated directions.
pub fn update_weights(
    theta: &[f64],
    evals: &[DirectionEval],
    top_b: usize,
    step_size: f64,
) -> Result<Vec<f64>> {
    if top_b == 0 || top_b > evals.len() {
        return Err(Error::Update(format!(
            "top_b = {top_b} with {} directions",
            evals.len()
        )));
    }
    if let Some(e) = evals
        .iter()
        .find(|e| !e.r_plus.is_finite() || !e.r_minus.is_finite())
    {
        return Err(Error::Update(format!("non-finite return for direction {}", e.index)));
    }
    if let Some(e) = evals.iter().find(|e| e.delta.len() != theta.len()) {
        return Err(Error::Update(format!("direction {} has wrong length", e.index)));
    }
    let mut order: Vec<usize> = (0..evals.len()).collect();
    // Stable sort keeps lower indices first among equal scores.
    order.sort_by(|&a, &b| {
        let sa = evals[a].r_plus.max(evals[a].r_minus);
        let sb = evals[b].r_plus.max(evals[b].r_minus);
        sb.total_cmp(&sa)
    });
    let top = &order[..top_b];

    let retained: Vec<f64> = top
        .iter()
        .flat_map(|&i| [evals[i].r_plus, evals[i].r_minus])
        .collect();
    let n = retained.len() as f64;
    let mean = retained.iter().sum::<f64>() / n;
    let sigma = (retained.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let sigma = if sigma < SIGMA_FLOOR { 1.0 } else { sigma };

    let scale = step_size / (top_b as f64 * sigma);
    let mut step = vec![0.0; theta.len()];
    for &i in top {
        let diff = evals[i].r_plus - evals[i].r_minus;
        for (s, d) in step.iter_mut().zip(&evals[i].delta) {
            *s += diff * d;
        }
    }
    Ok(theta.iter().zip(&step).map(|(t, s)| t + scale * s).collect())
}

/// Source of episode returns for a parameter vector.
///
/// `task` indexes the scenario list the oracle was built with.
pub trait ReturnOracle: Sync {
    fn n_tasks(&self) -> usize;

    fn rollout(
        &self,
        theta: &[f64],
        normalizer: &RunningNormalizer,
        task: usize,
        seed: u64,
        collect: bool,
    ) -> Result<(f64, Option<RunningNormalizer>)>;
}

/// Runs scenarios of the grid environment with one latent per scenario.
pub struct GridOracle<'a> {
    pub env: &'a GridEnv,
    pub spec: &'a PolicySpec,
    pub scenarios: &'a [Scenario],
    pub latents: Vec<LatentVector>,
}

impl ReturnOracle for GridOracle<'_> {
    fn n_tasks(&self) -> usize {
        self.scenarios.len()
    }

    fn rollout(
        &self,
        theta: &[f64],
        normalizer: &RunningNormalizer,
        task: usize,
        seed: u64,
        collect: bool,
    ) -> Result<(f64, Option<RunningNormalizer>)> {
        rollout_flat(
            self.env,
            self.spec,
            theta,
            normalizer,
            &self.latents[task],
            &self.scenarios[task],
            seed,
            collect,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn rollout_flat(
    env: &GridEnv,
    spec: &PolicySpec,
    theta: &[f64],
    normalizer: &RunningNormalizer,
    latent: &LatentVector,
    scenario: &Scenario,
    seed: u64,
    collect: bool,
) -> Result<(f64, Option<RunningNormalizer>)> {
    let mut hidden = HiddenState::zeros(spec);
    let mut ws = Workspace::default();
    let mut batch = collect.then(|| RunningNormalizer::new(spec.obs_dim));
    let mut obs_buf = Vec::with_capacity(spec.obs_dim);
    let summary = env.run_episode(
        scenario,
        seed,
        |_, obs| {
            obs_buf.clear();
            obs_buf.extend_from_slice(&obs.voltages);
            obs_buf.extend_from_slice(&obs.load_fracs);
            if let Some(b) = batch.as_mut() {
                b.update(&obs_buf)?;
            }
            forward_flat(spec, theta, normalizer, &obs_buf, latent.as_slice(), &mut hidden, &mut ws)
        },
        None,
    )?;
    Ok((summary.total_return, batch))
}

/// Undiscounted return of one episode, plus observation statistics when
/// `collect_norm` is set.
pub fn rollout_return(
    env: &GridEnv,
    bundle: &PolicyBundle,
    latent: &LatentVector,
    scenario: &Scenario,
    seed: u64,
    collect_norm: bool,
) -> Result<(f64, Option<RunningNormalizer>)> {
    rollout_flat(
        env,
        &bundle.spec,
        bundle.weights.flatten(),
        &bundle.normalizer,
        latent,
        scenario,
        seed,
        collect_norm,
    )
}

/// Fixed-size pool that evaluates independent tasks and returns results in
/// input order.
pub struct WorkerPool {
    pool: rayon::ThreadPool,
}

impl WorkerPool {
    pub fn new(workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Argument(format!("cannot build worker pool: {e}")))?;
        Ok(WorkerPool { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.pool.install(|| items.par_iter().map(f).collect())
    }
}

/// Mutable optimizer state owned by the coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsState {
    pub theta: Vec<f64>,
    pub normalizer: RunningNormalizer,
    pub step_size: f64,
    pub noise_std: f64,
    /// Global iteration counter; keys all per-iteration seeds.
    pub iteration: u64,
}

impl ParsState {
    pub fn new(theta: Vec<f64>, normalizer: RunningNormalizer, cfg: &ParsConfig) -> Self {
        ParsState {
            theta,
            normalizer,
            step_size: cfg.step_size,
            noise_std: cfg.noise_std,
            iteration: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    /// Mean return of the updated, unperturbed policy on this iteration's
    /// scenarios.
    pub mean_return: f64,
    /// Mean return over all perturbed rollouts.
    pub perturbed_return: f64,
    pub step_size: f64,
    pub noise_std: f64,
}

/// Scenario indices for one iteration: without replacement from reshuffled
/// passes over the task list.
fn pick_tasks(n_tasks: usize, m: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(m);
    let mut pass = 0u64;
    while out.len() < m {
        let mut idx: Vec<usize> = (0..n_tasks).collect();
        idx.shuffle(&mut seed::rng(seed, &[stream::SCENARIO_SHUFFLE, iteration, pass]));
        out.extend(idx.into_iter().take(m - out.len()));
        pass += 1;
    }
    out
}

/// Runs `iterations` search iterations in place.
pub fn run_iterations<O: ReturnOracle>(
    state: &mut ParsState,
    oracle: &O,
    cfg: &ParsConfig,
    iterations: usize,
    seed: u64,
    pool: &WorkerPool,
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    if oracle.n_tasks() == 0 {
        return Err(Error::Argument("no scenarios to train on".into()));
    }
    let dim = state.theta.len();
    let n = cfg.n_directions;
    let m = cfg.scenarios_per_direction;
    let mut history = Vec::with_capacity(iterations);

    for _ in 0..iterations {
        let t = state.iteration;
        let deltas = sample_directions(n, dim, seed::derive(seed, &[stream::DIRECTIONS, t]));
        let tasks = pick_tasks(oracle.n_tasks(), m, seed, t);
        let nu = state.noise_std;
        let perturbed: Vec<Vec<f64>> = deltas
            .iter()
            .flat_map(|d| {
                let plus = state.theta.iter().zip(d).map(|(w, x)| w + nu * x).collect();
                let minus = state.theta.iter().zip(d).map(|(w, x)| w - nu * x).collect();
                [plus, minus]
            })
            .collect();

        // job k -> (direction k / (2m), sign (k / m) % 2, slot k % m)
        let jobs: Vec<(usize, usize, usize)> = (0..n)
            .flat_map(|i| (0..2).flat_map(move |s| (0..m).map(move |j| (i, s, j))))
            .collect();
        let normalizer = &state.normalizer;
        let results = pool.map(&jobs, |&(i, s, j)| {
            let rs = seed::derive(seed, &[stream::ROLLOUT, t, i as u64, s as u64, j as u64]);
            oracle.rollout(&perturbed[2 * i + s], normalizer, tasks[j], rs, true)
        });

        let mut returns = Vec::with_capacity(jobs.len());
        let mut merged = state.normalizer.clone();
        for r in results {
            let (ret, batch) = r?;
            returns.push(ret);
            if let Some(b) = batch {
                merged.merge(&b)?;
            }
        }
        let evals: Vec<DirectionEval> = deltas
            .into_iter()
            .enumerate()
            .map(|(i, delta)| {
                let base = i * 2 * m;
                let mean = |s: usize| returns[base + s * m..base + (s + 1) * m].iter().sum::<f64>() / m as f64;
                DirectionEval {
                    index: i,
                    delta,
                    r_plus: mean(0),
                    r_minus: mean(1),
                }
            })
            .collect();

        state.theta = update_weights(&state.theta, &evals, cfg.top_b, state.step_size)?;
        state.normalizer = merged;
        let perturbed_return = returns.iter().sum::<f64>() / returns.len() as f64;
        let (theta, normalizer) = (&state.theta, &state.normalizer);
        let center = pool.map(&tasks, |&task| {
            let rs = seed::derive(seed, &[stream::EVAL, t, task as u64]);
            oracle.rollout(theta, normalizer, task, rs, false).map(|r| r.0)
        });
        let center = center.into_iter().collect::<Result<Vec<_>>>()?;
        let mean_return = center.iter().sum::<f64>() / center.len() as f64;
        // recomputed from the base values so that no rounding accumulates
        let factor = decay_factor(cfg.decay, t + 1);
        state.step_size = cfg.step_size * factor;
        state.noise_std = cfg.noise_std * factor;
        state.iteration += 1;
        history.push(IterationRecord {
            iteration: t,
            mean_return,
            perturbed_return,
            step_size: state.step_size,
            noise_std: state.noise_std,
        });
    }
    Ok(history)
}

/// Trains the shared policy on `scenarios`, each using its environment's
/// latent from `table`. Returns the updated bundle and per-iteration history.
#[allow(clippy::too_many_arguments)]
pub fn train_inner(
    env: &GridEnv,
    bundle: &PolicyBundle,
    table: &LatentTable,
    scenarios: &[Scenario],
    cfg: &ParsConfig,
    state: Option<ParsState>,
    seed: u64,
    pool: &WorkerPool,
) -> Result<(PolicyBundle, ParsState, Vec<IterationRecord>)> {
    let latents = scenarios
        .iter()
        .map(|s| {
            table.latent(&s.env.id).cloned().ok_or_else(|| {
                Error::Argument(format!("no latent for environment `{}`", s.env.id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let oracle = GridOracle {
        env,
        spec: &bundle.spec,
        scenarios,
        latents,
    };
    let mut state = state.unwrap_or_else(|| {
        ParsState::new(bundle.weights.flatten().to_vec(), bundle.normalizer.clone(), cfg)
    });
    state.theta = bundle.weights.flatten().to_vec();
    state.normalizer = bundle.normalizer.clone();
    let history = run_iterations(&mut state, &oracle, cfg, cfg.iterations, seed, pool)?;
    let weights = crate::policy::PolicyWeights::unflatten(&bundle.spec, state.theta.clone())?;
    let out = PolicyBundle {
        spec: bundle.spec.clone(),
        weights,
        normalizer: state.normalizer.clone(),
    };
    Ok((out, state, history))
}

/// `decay^k` as an explicit left-to-right product; `powi` may be folded
/// differently by the compiler.
pub fn decay_factor(decay: f64, k: u64) -> f64 {
    (0..k).fold(1.0, |acc, _| acc * decay)
}
