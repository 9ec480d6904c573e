//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use metashed::grid::{Contingency, EnvironmentParams, GridEnv, GridState, Scenario};
use metashed::pars::ReturnOracle;
use metashed::policy::RunningNormalizer;
use metashed::Result;

/// Time in whole microseconds; keeps band membership exact at the edges.
pub fn micros(t: f64) -> i64 {
    (t * 1e6).round() as i64
}

/// Minimum voltage of the recovery envelope, `None` before clearance.
pub fn band_floor(t: f64, t_pf: f64) -> Option<f64> {
    let s = micros(t) - micros(t_pf);
    if s <= 0 {
        None
    } else if s <= 330_000 {
        Some(0.7)
    } else if s <= 500_000 {
        Some(0.8)
    } else if s <= 1_500_000 {
        Some(0.9)
    } else {
        Some(0.95)
    }
}

/// Scalar reward: penalty when any bus is below 0.95 after T_pf + 4, else
/// c1 * sum of band deficits - c2 * shed - c3 * invalid requests.
pub fn reward_oracle(
    voltage: &[f64],
    shed: &[f64],
    invalid: usize,
    t: f64,
    t_pf: f64,
    c: (f64, f64, f64),
) -> f64 {
    let late = micros(t) - micros(t_pf) > 4_000_000;
    let mut low = false;
    for &v in voltage {
        if v < 0.95 {
            low = true;
        }
    }
    if late && low {
        return -10000.0;
    }
    let mut dv = 0.0;
    if let Some(floor) = band_floor(t, t_pf) {
        for &v in voltage {
            if v < floor {
                dv += v - floor;
            }
        }
    }
    let mut dp = 0.0;
    for &p in shed {
        dp += p;
    }
    c.0 * dv - c.1 * dp - c.2 * invalid as f64
}

/// Per-bus envelope check on samples `(t, voltages)`.
pub fn envelope_oracle(samples: &[(f64, Vec<f64>)], t_pf: f64) -> bool {
    for (t, row) in samples {
        if let Some(floor) = band_floor(*t, t_pf) {
            for &v in row {
                if v < floor {
                    return true;
                }
            }
        }
    }
    false
}

/// Shed (per-unit) and invalid count of applying `shed` to `state`.
pub fn shed_oracle(env: &GridEnv, scenario: &Scenario, state: &GridState, shed: &[f64]) -> (Vec<f64>, usize) {
    let mut out = vec![0.0; shed.len()];
    let mut invalid = 0;
    for j in 0..shed.len() {
        if shed[j] == 0.0 {
            continue;
        }
        if state.load_frac[j] < 0.05 {
            invalid += 1;
        } else {
            out[j] = scenario.env.pf_scale * env.topology.nominal_load()[j] * state.load_frac[j] * shed[j];
        }
    }
    (out, invalid)
}

pub fn env_params(id: &str, pf: f64, mf: f64, ts: f64, vs: f64) -> EnvironmentParams {
    EnvironmentParams::new(id, pf, mf, ts, vs)
}

pub fn contingency(bus: usize, start: f64, duration: f64) -> Contingency {
    Contingency {
        fault_bus: bus,
        fault_start: start,
        fault_duration: duration,
    }
}

/// Return `-|theta - target|^2`, independent of the normalizer and seed.
pub struct Quadratic {
    pub target: Vec<f64>,
}

impl Quadratic {
    pub fn value(&self, theta: &[f64]) -> f64 {
        -theta.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    }
}

impl ReturnOracle for Quadratic {
    fn n_tasks(&self) -> usize {
        1
    }

    fn rollout(
        &self,
        theta: &[f64],
        _normalizer: &RunningNormalizer,
        _task: usize,
        _seed: u64,
        _collect: bool,
    ) -> Result<(f64, Option<RunningNormalizer>)> {
        Ok((self.value(theta), None))
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}
