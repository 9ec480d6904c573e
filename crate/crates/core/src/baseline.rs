//! Receding-horizon exhaustive-search controller on the true surrogate.
//!
//! At every control step the controller simulates every action sequence over
//! its horizon, keeps the one with the highest cumulative reward (ties go to
//! the smaller total shed) and applies its first action.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Action, GridEnv, GridState, Scenario, A_MAX, TIME_EPS};
use crate::meta::{policy_episode, scenario_seed, LatentTable};
use crate::pars::WorkerPool;
use crate::policy::{LatentVector, PolicyBundle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub horizon: usize,
    pub action_grid: Vec<f64>,
    /// Apply one shed level to every load bus (enumerates full sequences);
    /// otherwise enumerate per-bus first actions with a zero tail.
    pub uniform_across_buses: bool,
    /// Upper bound on simulated sequences per decision.
    pub max_sequences: u64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 6,
            action_grid: vec![0.0, 0.1, 0.2],
            uniform_across_buses: true,
            max_sequences: 100_000,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::config("mpc.horizon", "must be >= 1"));
        }
        if self.action_grid.is_empty() {
            return Err(Error::config("mpc.action_grid", "must be non-empty"));
        }
        if self.action_grid.iter().any(|a| !(0.0..=A_MAX).contains(a)) {
            return Err(Error::config("mpc.action_grid", format!("levels must lie in [0, {A_MAX}]")));
        }
        Ok(())
    }

    /// Number of sequences one decision simulates for `n_load` load buses.
    pub fn sequence_count(&self, n_load: usize) -> u128 {
        let g = self.action_grid.len() as u128;
        let exp = if self.uniform_across_buses {
            self.horizon
        } else {
            n_load
        };
        (0..exp).fold(1u128, |acc, _| acc.saturating_mul(g))
    }
}

/// Chosen action plus instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcDecision {
    pub action: Action,
    pub sequences: u64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy)]
struct Best {
    value: f64,
    shed: f64,
}

impl Best {
    fn beats(&self, other: &Best) -> bool {
        self.value > other.value || (self.value == other.value && self.shed < other.shed)
    }
}

struct Search<'a> {
    env: &'a GridEnv,
    scenario: &'a Scenario,
    levels: Vec<f64>,
    sequences: u64,
}

impl Search<'_> {
    /// Best cumulative (reward, shed) over all continuations of `depth` steps.
    fn best_continuation(&mut self, state: &GridState, depth: usize) -> Result<Best> {
        if depth == 0 || state.t >= self.env.surrogate.episode_length - TIME_EPS {
            self.sequences += 1;
            return Ok(Best { value: 0.0, shed: 0.0 });
        }
        let n_load = self.env.topology.n_load();
        let mut best: Option<Best> = None;
        for li in 0..self.levels.len() {
            let action = Action::uniform(n_load, self.levels[li]);
            let out = self.env.step(state, &action, self.scenario)?;
            let shed: f64 = out.shed_pu.iter().sum();
            let tail = if out.done {
                self.sequences += 1;
                Best { value: 0.0, shed: 0.0 }
            } else {
                self.best_continuation(&out.state, depth - 1)?
            };
            let cand = Best {
                value: out.reward + tail.value,
                shed: shed + tail.shed,
            };
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        }
        Ok(best.expect("non-empty action grid"))
    }
}

/// One receding-horizon decision from `state`.
///
/// The controller is armed at fault clearance; before that it returns the
/// zero action without searching.
pub fn mpc_control(
    env: &GridEnv,
    state: &GridState,
    scenario: &Scenario,
    cfg: &MpcConfig,
) -> Result<MpcDecision> {
    cfg.validate()?;
    let n_load = env.topology.n_load();
    let count = cfg.sequence_count(n_load);
    if count > cfg.max_sequences as u128 {
        return Err(Error::Budget {
            count,
            budget: cfg.max_sequences as u128,
        });
    }
    if state.t < scenario.cont.t_clear() - TIME_EPS {
        return Ok(MpcDecision {
            action: Action::zeros(n_load),
            sequences: 0,
            value: 0.0,
        });
    }
    let mut levels = cfg.action_grid.clone();
    levels.sort_by(f64::total_cmp);
    levels.dedup();

    let mut search = Search {
        env,
        scenario,
        levels,
        sequences: 0,
    };
    let mut best: Option<(Best, Action)> = None;
    let consider = |cand: Best, action: Action, best: &mut Option<(Best, Action)>| {
        if best.as_ref().is_none_or(|(b, _)| cand.beats(b)) {
            *best = Some((cand, action));
        }
    };

    if cfg.uniform_across_buses {
        for li in 0..search.levels.len() {
            let action = Action::uniform(n_load, search.levels[li]);
            let out = env.step(state, &action, scenario)?;
            let tail = if out.done || cfg.horizon == 1 {
                search.sequences += 1;
                Best { value: 0.0, shed: 0.0 }
            } else {
                search.best_continuation(&out.state, cfg.horizon - 1)?
            };
            let cand = Best {
                value: out.reward + tail.value,
                shed: out.shed_pu.iter().sum::<f64>() + tail.shed,
            };
            consider(cand, action, &mut best);
        }
    } else {
        let g = search.levels.len();
        let zero = Action::zeros(n_load);
        for code in 0..count as u64 {
            let mut c = code;
            let shed = (0..n_load)
                .map(|_| {
                    let l = search.levels[(c % g as u64) as usize];
                    c /= g as u64;
                    l
                })
                .collect();
            let action = Action { shed };
            let mut out = env.step(state, &action, scenario)?;
            let mut value = out.reward;
            let mut total = out.shed_pu.iter().sum::<f64>();
            for _ in 1..cfg.horizon {
                if out.done {
                    break;
                }
                out = env.step(&out.state, &zero, scenario)?;
                value += out.reward;
                total += out.shed_pu.iter().sum::<f64>();
            }
            search.sequences += 1;
            consider(Best { value, shed: total }, action, &mut best);
        }
    }

    let (b, action) = best.expect("non-empty action grid");
    Ok(MpcDecision {
        action,
        sequences: search.sequences,
        value: b.value,
    })
}

/// Evaluation arm of a comparison run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Adapted,
    Zero,
    Mpc,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Adapted, Arm::Zero, Arm::Mpc];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Adapted => "adapted",
            Arm::Zero => "zero",
            Arm::Mpc => "mpc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub scenario_id: String,
    pub arm: Arm,
    pub total_return: f64,
    pub envelope_pass: bool,
    pub total_shed: f64,
    /// Wall-clock time of the episode; the only column that varies run to run.
    pub wall_ms: f64,
}

/// Rows ordered by scenario, then arm in [`Arm::ALL`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn arm(&self, arm: Arm) -> impl Iterator<Item = &ComparisonRow> {
        self.rows.iter().filter(move |r| r.arm == arm)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["scenario_id", "arm", "return", "envelope_pass", "total_shed", "wall_ms"])?;
        for r in &self.rows {
            w.write_record([
                r.scenario_id.clone(),
                r.arm.name().to_string(),
                r.total_return.to_string(),
                r.envelope_pass.to_string(),
                r.total_shed.to_string(),
                format!("{:.3}", r.wall_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Runs the adapted-latent policy, the zero-latent policy and MPC on every
/// scenario with the same episode seed per scenario.
pub fn run_baselines(
    env: &GridEnv,
    bundle: &PolicyBundle,
    latents: &LatentTable,
    scenarios: &[Scenario],
    cfg: &MpcConfig,
    seed: u64,
    pool: &WorkerPool,
) -> Result<ComparisonReport> {
    cfg.validate()?;
    let zero = LatentVector::zeros(bundle.latent_dim());
    for s in scenarios {
        if latents.latent(&s.env.id).is_none() {
            return Err(Error::Argument(format!("no adapted latent for environment `{}`", s.env.id)));
        }
    }
    let results = pool.map(scenarios, |s| -> Result<Vec<ComparisonRow>> {
        let episode_seed = scenario_seed(seed, s);
        let mut rows = Vec::with_capacity(Arm::ALL.len());
        for arm in Arm::ALL {
            let start = Instant::now();
            let summary = match arm {
                Arm::Adapted => {
                    let c = latents.latent(&s.env.id).expect("checked above");
                    policy_episode(env, bundle, c, s, episode_seed, None)?
                }
                Arm::Zero => policy_episode(env, bundle, &zero, s, episode_seed, None)?,
                Arm::Mpc => env.run_episode(
                    s,
                    episode_seed,
                    |st, _| Ok(mpc_control(env, st, s, cfg)?.action),
                    None,
                )?,
            };
            rows.push(ComparisonRow {
                scenario_id: s.id(),
                arm,
                total_return: summary.total_return,
                envelope_pass: summary.envelope_ok,
                total_shed: summary.total_shed,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
        Ok(rows)
    });
    let mut report = ComparisonReport::default();
    for r in results {
        report.rows.extend(r?);
    }
    Ok(report)
}
