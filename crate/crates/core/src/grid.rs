//! Desk-scale surrogate of fault-induced delayed voltage recovery (FIDVR).
//!
//! A small meshed network whose bus voltages respond to load demand through a
//! hop-distance coupling matrix. A fault sags voltages around the faulted bus;
//! air-conditioner motors whose terminal voltage stays under `v_stall` for at
//! least `t_stall` stall and draw several times their running demand, which
//! holds voltages below the recovery envelope until enough load is shed.
//!
//! The per-step reward is the voltage-band / shedding / invalid-action form
//! implemented by [`reward`], with a terminal `-10000` when any bus is still
//! below 0.95 p.u. more than four seconds after fault clearance.

use std::collections::{HashSet, VecDeque};
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Largest shed fraction per control step.
pub const A_MAX: f64 = 0.2;

/// Loads below this remaining fraction cannot be shed further.
pub const MIN_SHEDDABLE: f64 = 0.05;

/// Slack used when comparing sample instants against band edges, so that a
/// time such as `16 * 0.1` lands on the same side of `1.1 + 0.5` as intended.
pub const TIME_EPS: f64 = 1e-9;

/// One operating condition: a power-flow scaling plus dynamic load parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentParams {
    pub id: String,
    pub pf_scale: f64,
    pub motor_fraction: f64,
    pub t_stall: f64,
    pub v_stall: f64,
}

impl EnvironmentParams {
    pub fn validate(&self) -> Result<()> {
        let field = |name: &str| format!("environment[{}].{}", self.id, name);
        if self.id.is_empty() {
            return Err(Error::config("environment.id", "must be non-empty"));
        }
        if self.id.chars().any(char::is_whitespace) {
            return Err(Error::config(field("id"), "must not contain whitespace"));
        }
        if !(self.pf_scale > 0.0 && self.pf_scale.is_finite()) {
            return Err(Error::config(field("pf_scale"), "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.motor_fraction) {
            return Err(Error::config(field("motor_fraction"), "must lie in [0, 1]"));
        }
        if !(self.t_stall > 0.0 && self.t_stall.is_finite()) {
            return Err(Error::config(field("t_stall"), "must be > 0"));
        }
        if !(self.v_stall > 0.0 && self.v_stall < 1.0) {
            return Err(Error::config(field("v_stall"), "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Stalled-motor severity used to rank environments by difficulty.
    pub fn severity(&self) -> f64 {
        self.pf_scale * self.motor_fraction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contingency {
    pub fault_bus: usize,
    pub fault_start: f64,
    pub fault_duration: f64,
}

impl Contingency {
    /// Fault clearance instant.
    pub fn t_clear(&self) -> f64 {
        self.fault_start + self.fault_duration
    }

    fn key(&self) -> (usize, u64) {
        (self.fault_bus, self.fault_duration.to_bits())
    }
}

/// An environment paired with a contingency: the unit of one rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub env: EnvironmentParams,
    pub cont: Contingency,
}

impl Scenario {
    pub fn new(env: EnvironmentParams, cont: Contingency) -> Self {
        Scenario { env, cont }
    }

    pub fn id(&self) -> String {
        format!(
            "{}@bus{}-{}s",
            self.env.id, self.cont.fault_bus, self.cont.fault_duration
        )
    }
}

/// Network description: buses, load buses, and the demand-to-voltage coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTopology {
    n_bus: usize,
    load_buses: Vec<usize>,
    nominal_load: Vec<f64>,
    /// Row-major `n_bus x n_bus`.
    coupling: Vec<f64>,
    /// Row-major hop distances.
    hops: Vec<usize>,
}

/// Serializable description from which a [`GridTopology`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub n_bus: usize,
    pub edges: Vec<(usize, usize)>,
    pub load_buses: Vec<usize>,
    pub nominal_load: Vec<f64>,
    /// Coupling between buses `h` hops apart is `coupling_decay^h`.
    pub coupling_decay: f64,
}

impl Default for TopologySpec {
    /// Ten-bus path with two chords and six load buses.
    fn default() -> Self {
        let mut edges: Vec<(usize, usize)> = (0..9).map(|i| (i, i + 1)).collect();
        edges.push((1, 6));
        edges.push((3, 8));
        TopologySpec {
            n_bus: 10,
            edges,
            load_buses: vec![1, 2, 4, 5, 7, 8],
            nominal_load: vec![1.0, 0.8, 1.2, 1.0, 0.9, 1.1],
            coupling_decay: 0.5,
        }
    }
}

impl GridTopology {
    pub fn from_spec(spec: &TopologySpec) -> Result<Self> {
        let n = spec.n_bus;
        if n == 0 {
            return Err(Error::Topology("n_bus must be >= 1".into()));
        }
        if spec.load_buses.is_empty() {
            return Err(Error::Topology("at least one load bus is required".into()));
        }
        if spec.nominal_load.len() != spec.load_buses.len() {
            return Err(Error::Topology(format!(
                "{} nominal loads for {} load buses",
                spec.nominal_load.len(),
                spec.load_buses.len()
            )));
        }
        if spec.nominal_load.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Topology("nominal loads must be positive".into()));
        }
        if !(spec.coupling_decay > 0.0 && spec.coupling_decay < 1.0) {
            return Err(Error::Topology("coupling_decay must lie in (0, 1)".into()));
        }
        let mut seen = HashSet::new();
        for &b in &spec.load_buses {
            if b >= n {
                return Err(Error::Topology(format!("load bus {b} out of range")));
            }
            if !seen.insert(b) {
                return Err(Error::Topology(format!("load bus {b} listed twice")));
            }
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in &spec.edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Topology(format!("invalid edge ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut hops = vec![usize::MAX; n * n];
        for src in 0..n {
            let row = &mut hops[src * n..(src + 1) * n];
            row[src] = 0;
            let mut queue = VecDeque::from([src]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if row[v] == usize::MAX {
                        row[v] = row[u] + 1;
                        queue.push_back(v);
                    }
                }
            }
            if row.contains(&usize::MAX) {
                return Err(Error::Topology("network is not connected".into()));
            }
        }
        let coupling = hops
            .iter()
            .map(|&h| spec.coupling_decay.powi(h as i32))
            .collect();
        Ok(GridTopology {
            n_bus: n,
            load_buses: spec.load_buses.clone(),
            nominal_load: spec.nominal_load.clone(),
            coupling,
            hops,
        })
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }

    pub fn n_load(&self) -> usize {
        self.load_buses.len()
    }

    pub fn load_buses(&self) -> &[usize] {
        &self.load_buses
    }

    pub fn nominal_load(&self) -> &[f64] {
        &self.nominal_load
    }

    pub fn coupling(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.n_bus + j]
    }

    pub fn hop(&self, i: usize, j: usize) -> usize {
        self.hops[i * self.n_bus + j]
    }

    pub fn obs_dim(&self) -> usize {
        self.n_bus + self.load_buses.len()
    }
}

/// Constants of the surrogate dynamics and episode timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateParams {
    /// Voltage sensitivity to demand change.
    pub beta: f64,
    /// Demand multiplier of a stalled motor.
    pub lambda: f64,
    /// Per-hop decay of the fault sag.
    pub rho: f64,
    /// Fault sag depth at the faulted bus.
    pub fault_depth: f64,
    /// Voltage lag time constant, seconds.
    pub t_v: f64,
    /// Control step, seconds.
    pub dt: f64,
    /// Episode length, seconds.
    pub episode_length: f64,
    /// Std of Gaussian noise on observed voltages; zero disables.
    pub obs_noise_std: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            beta: 0.12,
            lambda: 2.5,
            rho: 0.5,
            fault_depth: 1.2,
            t_v: 0.2,
            dt: 0.1,
            episode_length: 10.0,
            obs_noise_std: 0.0,
        }
    }
}

impl SurrogateParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("surrogate.{name}"), "must be > 0"))
            }
        };
        pos(self.beta, "beta")?;
        pos(self.lambda, "lambda")?;
        pos(self.fault_depth, "fault_depth")?;
        pos(self.t_v, "t_v")?;
        pos(self.dt, "dt")?;
        pos(self.episode_length, "episode_length")?;
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config("surrogate.rho", "must lie in (0, 1]"));
        }
        if !(self.obs_noise_std >= 0.0 && self.obs_noise_std.is_finite()) {
            return Err(Error::config("surrogate.obs_noise_std", "must be >= 0"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.episode_length / self.dt - TIME_EPS).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            c1: 1000.0,
            c2: 10.0,
            c3: 1.0,
            penalty: -10000.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("reward.{name}"), "must be >= 0"));
            }
        }
        if self.penalty != -10000.0 {
            return Err(Error::config("reward.penalty", "must be -10000"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridState {
    pub step: usize,
    pub t: f64,
    pub voltage: Vec<f64>,
    pub load_frac: Vec<f64>,
    pub stalled: Vec<f64>,
    pub under_vstall_timer: Vec<f64>,
    pub invalid_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub voltages: Vec<f64>,
    pub load_fracs: Vec<f64>,
}

impl Observation {
    /// Voltages followed by load fractions, in fixed bus order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.voltages.len() + self.load_fracs.len());
        v.extend_from_slice(&self.voltages);
        v.extend_from_slice(&self.load_fracs);
        v
    }

    pub fn len(&self) -> usize {
        self.voltages.len() + self.load_fracs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub shed: Vec<f64>,
}

impl Action {
    pub fn zeros(n_load: usize) -> Self {
        Action {
            shed: vec![0.0; n_load],
        }
    }

    pub fn uniform(n_load: usize, level: f64) -> Self {
        Action {
            shed: vec![level; n_load],
        }
    }

    pub fn validate(&self, n_load: usize) -> Result<()> {
        if self.shed.len() != n_load {
            return Err(Error::Argument(format!(
                "action has {} components, expected {n_load}",
                self.shed.len()
            )));
        }
        if let Some(a) = self.shed.iter().find(|a| !(0.0..=A_MAX).contains(*a)) {
            return Err(Error::Argument(format!(
                "shed fraction {a} outside [0, {A_MAX}]"
            )));
        }
        Ok(())
    }
}

/// Minimum acceptable voltage at `t`, or `None` before fault clearance.
///
/// Bands are closed on the right: `(T, T+0.33]`, `(T+0.33, T+0.5]`,
/// `(T+0.5, T+1.5]`, then everything after `T+1.5`.
pub fn voltage_floor(t: f64, t_pf: f64) -> Option<f64> {
    let s = t - t_pf;
    if s <= TIME_EPS {
        None
    } else if s <= 0.33 + TIME_EPS {
        Some(0.7)
    } else if s <= 0.5 + TIME_EPS {
        Some(0.8)
    } else if s <= 1.5 + TIME_EPS {
        Some(0.9)
    } else {
        Some(0.95)
    }
}

/// True once the terminal low-voltage penalty window (`t > T_pf + 4`) is open.
pub fn in_penalty_window(t: f64, t_pf: f64) -> bool {
    t - t_pf > 4.0 + TIME_EPS
}

/// Per-step reward. Returns `(reward, terminal)`.
///
/// `shed_pu` holds the load removed at each load bus during this step, in
/// per-unit; `invalid` counts shed requests that could not be honored.
pub fn reward(
    voltage: &[f64],
    shed_pu: &[f64],
    invalid: usize,
    t: f64,
    t_pf: f64,
    w: &RewardWeights,
) -> (f64, bool) {
    if in_penalty_window(t, t_pf) && voltage.iter().any(|&v| v < 0.95) {
        return (w.penalty, true);
    }
    let dv: f64 = match voltage_floor(t, t_pf) {
        Some(floor) => voltage.iter().map(|&v| (v - floor).min(0.0)).sum(),
        None => 0.0,
    };
    let dp: f64 = shed_pu.iter().sum();
    (w.c1 * dv - w.c2 * dp - w.c3 * invalid as f64, false)
}

/// Voltages sampled over an episode, one row per sample.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoltageTrace {
    pub times: Vec<f64>,
    pub voltages: Vec<Vec<f64>>,
}

impl VoltageTrace {
    pub fn push(&mut self, t: f64, v: &[f64]) {
        self.times.push(t);
        self.voltages.push(v.to_vec());
    }
}

/// True iff any bus breaches the staged recovery envelope.
pub fn envelope_violated(trace: &VoltageTrace, t_pf: f64) -> Result<bool> {
    if trace.times.is_empty() {
        return Err(Error::Argument("empty voltage trace".into()));
    }
    if trace.times.len() != trace.voltages.len() {
        return Err(Error::Argument("trace times and voltages differ in length".into()));
    }
    Ok(trace.times.iter().zip(&trace.voltages).any(|(&t, row)| {
        voltage_floor(t, t_pf).is_some_and(|floor| row.iter().any(|&v| v < floor))
    }))
}

/// Result of one environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: GridState,
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    /// Load removed per load bus this step, per-unit.
    pub shed_pu: Vec<f64>,
}

/// Topology, surrogate constants and reward weights bundled together.
#[derive(Debug, Clone)]
pub struct GridEnv {
    pub topology: GridTopology,
    pub surrogate: SurrogateParams,
    pub weights: RewardWeights,
}

impl GridEnv {
    pub fn new(topology: GridTopology, surrogate: SurrogateParams, weights: RewardWeights) -> Self {
        GridEnv {
            topology,
            surrogate,
            weights,
        }
    }

    pub fn desk() -> Self {
        GridEnv::new(
            GridTopology::from_spec(&TopologySpec::default()).expect("default topology"),
            SurrogateParams::default(),
            RewardWeights::default(),
        )
    }

    pub fn n_steps(&self) -> usize {
        self.surrogate.n_steps()
    }

    pub fn check_scenario(&self, scenario: &Scenario) -> Result<()> {
        let c = &scenario.cont;
        if c.fault_bus >= self.topology.n_bus {
            return Err(Error::Topology(format!(
                "fault bus {} out of range for {} buses",
                c.fault_bus, self.topology.n_bus
            )));
        }
        if !(c.fault_duration > 0.0) || !(c.fault_start >= 0.0) {
            return Err(Error::Argument(format!(
                "contingency needs duration > 0 and start >= 0 (got {} / {})",
                c.fault_duration, c.fault_start
            )));
        }
        scenario.env.validate()
    }

    /// Pre-fault equilibrium at `t = 0`.
    pub fn reset(&self, scenario: &Scenario, seed: u64) -> Result<(GridState, Observation)> {
        self.check_scenario(scenario)?;
        let n_load = self.topology.n_load();
        let state = GridState {
            step: 0,
            t: 0.0,
            voltage: vec![1.0; self.topology.n_bus],
            load_frac: vec![1.0; n_load],
            stalled: vec![0.0; n_load],
            under_vstall_timer: vec![0.0; n_load],
            invalid_count: 0,
            seed,
        };
        let obs = self.observe(&state);
        Ok((state, obs))
    }

    pub fn observe(&self, state: &GridState) -> Observation {
        let mut voltages = state.voltage.clone();
        if self.surrogate.obs_noise_std > 0.0 {
            let mut rng = seed::rng(state.seed, &[seed::stream::OBS_NOISE, state.step as u64]);
            for v in &mut voltages {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += self.surrogate.obs_noise_std * z;
            }
        }
        Observation {
            voltages,
            load_fracs: state.load_frac.clone(),
        }
    }

    /// Voltage targets for the current demand, minus an optional fault sag
    /// scaled by `fault_scale`.
    fn voltage_targets(
        &self,
        env: &EnvironmentParams,
        load_frac: &[f64],
        stalled: &[f64],
        fault_bus: usize,
        fault_scale: f64,
        out: &mut [f64],
    ) {
        let topo = &self.topology;
        let s = &self.surrogate;
        for (i, target) in out.iter_mut().enumerate() {
            let mut relief = 0.0;
            for (j, &b) in topo.load_buses.iter().enumerate() {
                let nominal = env.pf_scale * topo.nominal_load[j];
                let demand =
                    nominal * load_frac[j] * (1.0 + s.lambda * env.motor_fraction * stalled[j]);
                relief += topo.coupling(i, b) * (nominal - demand);
            }
            let sag = if fault_scale > 0.0 {
                fault_scale * s.fault_depth * s.rho.powi(topo.hop(i, fault_bus) as i32)
            } else {
                0.0
            };
            *target = 1.0 + s.beta * relief - sag;
        }
    }

    /// Advances one control step.
    ///
    /// Within the step: shedding is applied, then (if the fault overlaps the
    /// step) motors are exposed to the fault-on voltage for the overlap time,
    /// then voltages relax toward their post-step targets, then motors are
    /// exposed to the new voltages for the remainder of the step.
    pub fn step(&self, state: &GridState, action: &Action, scenario: &Scenario) -> Result<StepOutcome> {
        let topo = &self.topology;
        let sp = &self.surrogate;
        let env = &scenario.env;
        let cont = &scenario.cont;
        let n_load = topo.n_load();
        action.validate(n_load)?;
        if state.t >= sp.episode_length - TIME_EPS {
            return Err(Error::Argument("episode already finished".into()));
        }

        let mut next = state.clone();
        next.step = state.step + 1;
        next.t = next.step as f64 * sp.dt;
        let (t0, t1) = (state.t, next.t);

        // shedding
        let mut shed_pu = vec![0.0; n_load];
        let mut invalid = 0;
        for j in 0..n_load {
            let a = action.shed[j];
            if a <= 0.0 {
                continue;
            }
            if next.load_frac[j] < MIN_SHEDDABLE {
                invalid += 1;
                continue;
            }
            shed_pu[j] = env.pf_scale * topo.nominal_load[j] * next.load_frac[j] * a;
            next.load_frac[j] *= 1.0 - a;
        }
        next.invalid_count = invalid;

        // fault-on exposure
        let fault_end = cont.t_clear();
        let overlap = (t1.min(fault_end) - t0.max(cont.fault_start)).max(0.0);
        let mut targets = vec![0.0; topo.n_bus];
        if overlap > 0.0 {
            self.voltage_targets(env, &next.load_frac, &next.stalled, cont.fault_bus, 1.0, &mut targets);
            for (j, &b) in topo.load_buses.iter().enumerate() {
                if targets[b].clamp(0.0, 1.2) < env.v_stall {
                    next.under_vstall_timer[j] += overlap;
                    if next.under_vstall_timer[j] >= env.t_stall - TIME_EPS {
                        next.stalled[j] = 1.0;
                    }
                }
            }
        }

        // voltage relaxation
        let fault_on_at_end = fault_end > t1 + TIME_EPS && cont.fault_start < t1 - TIME_EPS;
        let scale = if fault_on_at_end { 1.0 } else { 0.0 };
        self.voltage_targets(env, &next.load_frac, &next.stalled, cont.fault_bus, scale, &mut targets);
        let gain = (sp.dt / sp.t_v).min(1.0);
        for (v, &target) in next.voltage.iter_mut().zip(&targets) {
            *v = (*v + gain * (target - *v)).clamp(0.0, 1.2);
        }
        if let Some(v) = next.voltage.iter().find(|v| !v.is_finite()) {
            return Err(Error::Simulation {
                scenario: scenario.id(),
                message: format!("non-finite voltage {v} at t = {t1}"),
            });
        }

        // post-step exposure
        let rest = (sp.dt - overlap).max(0.0);
        for (j, &b) in topo.load_buses.iter().enumerate() {
            if next.stalled[j] > 0.0 {
                continue;
            }
            if next.voltage[b] < env.v_stall {
                next.under_vstall_timer[j] += rest;
                if next.under_vstall_timer[j] >= env.t_stall - TIME_EPS {
                    next.stalled[j] = 1.0;
                }
            } else if overlap == 0.0 {
                next.under_vstall_timer[j] = 0.0;
            }
        }

        let (r, terminal) = reward(&next.voltage, &shed_pu, invalid, t1, fault_end, &self.weights);
        let done = terminal || t1 >= sp.episode_length - TIME_EPS;
        let obs = self.observe(&next);
        Ok(StepOutcome {
            state: next,
            obs,
            reward: r,
            done,
            shed_pu,
        })
    }

    /// Runs one episode under `controller`, optionally recording a trace.
    pub fn run_episode<F>(
        &self,
        scenario: &Scenario,
        seed: u64,
        mut controller: F,
        mut trace: Option<&mut EpisodeTrace>,
    ) -> Result<EpisodeSummary>
    where
        F: FnMut(&GridState, &Observation) -> Result<Action>,
    {
        let (mut state, mut obs) = self.reset(scenario, seed)?;
        let t_pf = scenario.cont.t_clear();
        let mut summary = EpisodeSummary {
            total_return: 0.0,
            total_shed: 0.0,
            envelope_ok: true,
            steps: 0,
            penalized: false,
        };
        loop {
            let action = controller(&state, &obs)?;
            let out = self.step(&state, &action, scenario)?;
            summary.total_return += out.reward;
            summary.total_shed += out.shed_pu.iter().sum::<f64>();
            summary.steps += 1;
            if let Some(floor) = voltage_floor(out.state.t, t_pf) {
                if out.state.voltage.iter().any(|&v| v < floor) {
                    summary.envelope_ok = false;
                }
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.rows.push(TraceRow {
                    t: out.state.t,
                    voltage: out.state.voltage.clone(),
                    load_frac: out.state.load_frac.clone(),
                    action: action.shed.clone(),
                    reward: out.reward,
                });
            }
            let done = out.done;
            if done && out.reward == self.weights.penalty {
                summary.penalized = true;
            }
            state = out.state;
            obs = out.obs;
            if done {
                break;
            }
        }
        Ok(summary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub total_return: f64,
    /// Total load shed over the episode, per-unit.
    pub total_shed: f64,
    pub envelope_ok: bool,
    pub steps: usize,
    pub penalized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub voltage: Vec<f64>,
    pub load_frac: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeTrace {
    pub rows: Vec<TraceRow>,
}

impl EpisodeTrace {
    pub fn voltage_trace(&self) -> VoltageTrace {
        let mut vt = VoltageTrace::default();
        for row in &self.rows {
            vt.push(row.t, &row.voltage);
        }
        vt
    }

    /// CSV with columns `t, v0.., l0.., a0.., reward`.
    pub fn write_csv<W: Write>(&self, out: W, topology: &GridTopology) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..topology.n_bus()).map(|i| format!("v{i}")));
        header.extend(topology.load_buses().iter().map(|b| format!("l{b}")));
        header.extend(topology.load_buses().iter().map(|b| format!("a{b}")));
        header.push("reward".into());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.t.to_string()];
            rec.extend(row.voltage.iter().map(f64::to_string));
            rec.extend(row.load_frac.iter().map(f64::to_string));
            rec.extend(row.action.iter().map(f64::to_string));
            rec.push(row.reward.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, topology: &GridTopology) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), topology)
    }
}

/// Cartesian grid of contingencies: every fault bus with every duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContingencyGrid {
    pub fault_buses: Vec<usize>,
    pub durations: Vec<f64>,
    #[serde(default = "default_fault_start")]
    pub fault_start: f64,
}

fn default_fault_start() -> f64 {
    1.0
}

impl ContingencyGrid {
    pub fn enumerate(&self) -> Vec<Contingency> {
        self.durations
            .iter()
            .flat_map(|&d| {
                self.fault_buses.iter().map(move |&b| Contingency {
                    fault_bus: b,
                    fault_start: self.fault_start,
                    fault_duration: d,
                })
            })
            .collect()
    }
}

/// Environment and contingency grids for both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioGrids {
    pub train_envs: Vec<EnvironmentParams>,
    pub test_envs: Vec<EnvironmentParams>,
    pub train_contingencies: ContingencyGrid,
    pub test_contingencies: ContingencyGrid,
}

impl EnvironmentParams {
    pub fn new(id: &str, pf_scale: f64, motor_fraction: f64, t_stall: f64, v_stall: f64) -> Self {
        EnvironmentParams {
            id: id.to_string(),
            pf_scale,
            motor_fraction,
            t_stall,
            v_stall,
        }
    }
}

impl Default for ScenarioGrids {
    /// Desk grids: two training conditions and four held-out ones, trained on
    /// 0.05 and 0.08 s faults and tested on 0.1 s faults.
    fn default() -> Self {
        let e = EnvironmentParams::new;
        ScenarioGrids {
            train_envs: vec![e("train-a", 1.2, 0.44, 0.032, 0.45), e("train-b", 1.35, 0.44, 0.032, 0.45)],
            test_envs: vec![
                e("test-1", 1.25, 0.55, 0.075, 0.495),
                e("test-2", 1.15, 0.55, 0.1, 0.53),
                e("test-3", 1.4, 0.44, 0.1, 0.53),
                e("test-4", 1.1, 0.35, 0.05, 0.45),
            ],
            train_contingencies: ContingencyGrid {
                fault_buses: (1..=8).collect(),
                durations: vec![0.05, 0.08],
                fault_start: 1.0,
            },
            test_contingencies: ContingencyGrid {
                fault_buses: vec![1, 3, 4, 6, 7],
                durations: vec![0.1],
                fault_start: 1.0,
            },
        }
    }
}

/// Enumerates train and test scenarios, rejecting overlapping contingencies.
pub fn build_scenario_sets(
    grids: &ScenarioGrids,
    topology: &GridTopology,
) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
    let train_c = grids.train_contingencies.enumerate();
    let test_c = grids.test_contingencies.enumerate();
    if train_c.is_empty() {
        return Err(Error::config("train_contingencies", "contingency grid is empty"));
    }
    if test_c.is_empty() {
        return Err(Error::config("test_contingencies", "contingency grid is empty"));
    }
    if grids.train_envs.is_empty() {
        return Err(Error::config("train_envs", "no training environments"));
    }
    for (path, cs) in [("train_contingencies", &train_c), ("test_contingencies", &test_c)] {
        for c in cs.iter() {
            if c.fault_bus >= topology.n_bus() {
                return Err(Error::config(
                    format!("{path}.fault_buses"),
                    format!("bus {} out of range", c.fault_bus),
                ));
            }
            if !(c.fault_duration > 0.0) {
                return Err(Error::config(format!("{path}.durations"), "must be > 0"));
            }
        }
    }
    let train_keys: HashSet<_> = train_c.iter().map(Contingency::key).collect();
    if let Some(c) = test_c.iter().find(|c| train_keys.contains(&c.key())) {
        return Err(Error::config(
            "test_contingencies",
            format!(
                "(bus {}, duration {}) also appears in the training grid",
                c.fault_bus, c.fault_duration
            ),
        ));
    }
    let mut ids = HashSet::new();
    for e in grids.train_envs.iter().chain(&grids.test_envs) {
        e.validate()?;
        if !ids.insert(e.id.as_str()) {
            return Err(Error::config("environments", format!("duplicate id `{}`", e.id)));
        }
    }
    let product = |envs: &[EnvironmentParams], cs: &[Contingency]| -> Vec<Scenario> {
        envs.iter()
            .flat_map(|e| cs.iter().map(move |c| Scenario::new(e.clone(), *c)))
            .collect()
    };
    Ok((
        product(&grids.train_envs, &train_c),
        product(&grids.test_envs, &test_c),
    ))
}
