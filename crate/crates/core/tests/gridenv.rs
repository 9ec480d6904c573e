mod common;

use common::*;
use metashed::grid::*;
use metashed::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk_scenario(bus: usize, duration: f64) -> Scenario {
    Scenario::new(env_params("e", 1.35, 0.44, 0.032, 0.45), contingency(bus, 1.0, duration))
}

fn random_state(env: &GridEnv, rng: &mut ChaCha8Rng) -> GridState {
    let n_load = env.topology.n_load();
    let step = rng.random_range(0..env.n_steps());
    GridState {
        step,
        t: step as f64 * env.surrogate.dt,
        voltage: (0..env.topology.n_bus()).map(|_| rng.random_range(0.0..1.2)).collect(),
        load_frac: (0..n_load)
            .map(|_| if rng.random_bool(0.2) { rng.random_range(0.0..0.05) } else { rng.random_range(0.05..=1.0) })
            .collect(),
        stalled: (0..n_load).map(|_| if rng.random_bool(0.3) { 1.0 } else { 0.0 }).collect(),
        under_vstall_timer: (0..n_load).map(|_| rng.random_range(0.0..0.05)).collect(),
        invalid_count: 0,
        seed: 0,
    }
}

fn random_action(n: usize, rng: &mut ChaCha8Rng) -> Action {
    Action {
        shed: (0..n)
            .map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..=A_MAX) })
            .collect(),
    }
}

#[test]
fn step_reward_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut env = GridEnv::desk();
    for case in 0..1000 {
        env.weights = RewardWeights {
            c1: rng.random_range(0.0..2000.0),
            c2: rng.random_range(0.0..100.0),
            c3: rng.random_range(0.0..5.0),
            penalty: -10000.0,
        };
        let duration = [0.05, 0.08, 0.1][case % 3];
        let scenario = desk_scenario(rng.random_range(0..10), duration);
        let state = random_state(&env, &mut rng);
        let action = random_action(env.topology.n_load(), &mut rng);
        let out = env.step(&state, &action, &scenario).unwrap();
        let (shed, invalid) = shed_oracle(&env, &scenario, &state, &action.shed);
        let w = env.weights;
        let expect = reward_oracle(&out.state.voltage, &shed, invalid, out.state.t, scenario.cont.t_clear(), (w.c1, w.c2, w.c3));
        assert!((out.reward - expect).abs() <= 1e-12, "case {case}: {} vs {expect}", out.reward);
        assert_eq!(out.state.invalid_count, invalid);
    }
}

#[test]
fn tagged_reward_examples() {
    let env = GridEnv::desk();
    let scenario = desk_scenario(3, 0.08);
    let (state, _) = env.reset(&scenario, 0).unwrap();
    let out = env.step(&state, &Action::zeros(6), &scenario).unwrap();
    assert_eq!(out.reward, 0.0);
    assert!(out.state.voltage.iter().all(|&v| v == 1.0));

    let t_pf = scenario.cont.t_clear();
    let mut late = state.clone();
    late.step = 60;
    late.t = 6.0;
    late.voltage = vec![0.8; 10];
    let out = env.step(&late, &Action::zeros(6), &scenario).unwrap();
    assert!(out.state.t > t_pf + 4.0 && out.state.voltage.iter().any(|&v| v < 0.95));
    assert_eq!(out.reward, -10000.0);
    assert!(out.done);

    let unit = RewardWeights { c1: 1.0, ..RewardWeights::default() };
    let mut v = vec![1.0; 10];
    v[4] = 0.60;
    let (r, done) = reward(&v, &[0.0; 6], 0, t_pf + 0.2, t_pf, &unit);
    assert!(!done);
    assert!((r - (-0.1)).abs() < 1e-15);
    assert_eq!(r, reward_oracle(&v, &[0.0; 6], 0, t_pf + 0.2, t_pf, (1.0, unit.c2, unit.c3)));
}

#[test]
fn envelope_agrees_with_band_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut disagreements = 0;
    for _ in 0..200 {
        let t_pf = [1.05, 1.08, 1.1][rng.random_range(0..3)];
        let mut trace = VoltageTrace::default();
        let mut samples = Vec::new();
        for k in 1..=100 {
            let t = k as f64 * 0.1;
            let row: Vec<f64> = (0..10)
                .map(|_| if rng.random_bool(0.995) { rng.random_range(0.96..1.05) } else { rng.random_range(0.6..1.0) })
                .collect();
            trace.push(t, &row);
            samples.push((t, row));
        }
        if envelope_violated(&trace, t_pf).unwrap() != envelope_oracle(&samples, t_pf) {
            disagreements += 1;
        }
    }
    assert_eq!(disagreements, 0);
}

#[test]
fn envelope_examples() {
    let t_pf = 1.08;
    let mut flat = VoltageTrace::default();
    for k in 1..=100 {
        flat.push(k as f64 * 0.1, &[1.0; 10]);
    }
    assert!(!envelope_violated(&flat, t_pf).unwrap());
    let mut tr = VoltageTrace::default();
    tr.push(t_pf + 0.2, &[0.65]);
    assert!(envelope_violated(&tr, t_pf).unwrap());
    let mut tr = VoltageTrace::default();
    tr.push(t_pf + 5.0, &[0.94]);
    assert!(envelope_violated(&tr, t_pf).unwrap());
    assert!(matches!(envelope_violated(&VoltageTrace::default(), t_pf), Err(Error::Argument(_))));
}

#[test]
fn reset_examples() {
    let env = GridEnv::desk();
    let s = desk_scenario(2, 0.05);
    let (a, _) = env.reset(&s, 9).unwrap();
    let (b, _) = env.reset(&s, 9).unwrap();
    assert_eq!(a, b);
    assert!(a.voltage.iter().all(|&v| v == 1.0));
    assert!(a.load_frac.iter().all(|&l| l == 1.0));
    assert!(a.stalled.iter().all(|&q| q == 0.0));
    let bad = desk_scenario(env.topology.n_bus(), 0.05);
    assert!(matches!(env.reset(&bad, 0), Err(Error::Topology(_))));
}

#[test]
fn scenario_set_examples() {
    let env = GridEnv::desk();
    let e = |id: &str| env_params(id, 1.2, 0.4, 0.03, 0.45);
    let grids = ScenarioGrids {
        train_envs: vec![e("a"), e("b"), e("c")],
        test_envs: vec![e("t1"), e("t2"), e("t3"), e("t4")],
        train_contingencies: ContingencyGrid { fault_buses: vec![1, 4, 7], durations: vec![0.05, 0.08], fault_start: 1.0 },
        test_contingencies: ContingencyGrid { fault_buses: vec![1, 3, 4, 6, 7], durations: vec![0.1], fault_start: 1.0 },
    };
    let (train, test) = build_scenario_sets(&grids, &env.topology).unwrap();
    assert_eq!(train.len(), 18);
    assert_eq!(test.len(), 20);
    for t in &test {
        assert!(!train.iter().any(|s| s.cont.fault_bus == t.cont.fault_bus && s.cont.fault_duration == t.cont.fault_duration));
    }
    let mut empty = grids.clone();
    empty.train_contingencies.fault_buses.clear();
    assert!(build_scenario_sets(&empty, &env.topology).unwrap_err().is_config());
    let mut overlap = grids;
    overlap.test_contingencies.durations = vec![0.08];
    assert!(build_scenario_sets(&overlap, &env.topology).unwrap_err().is_config());
}

#[test]
fn no_fault_equilibrium_holds() {
    let env = GridEnv::desk();
    let s = Scenario::new(env_params("e", 1.35, 0.44, 0.032, 0.45), contingency(3, 50.0, 0.08));
    let (mut state, _) = env.reset(&s, 0).unwrap();
    loop {
        let out = env.step(&state, &Action::zeros(6), &s).unwrap();
        assert!(out.state.voltage.iter().all(|&v| (v - 1.0).abs() <= 1e-12));
        assert_eq!(out.reward, 0.0);
        state = out.state;
        if out.done {
            break;
        }
    }
    assert_eq!(state.step, env.n_steps());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn more_shedding_never_lowers_voltage(seed in any::<u64>(), bus in 0usize..10, d in prop::sample::select(vec![0.05, 0.08, 0.1])) {
        let env = GridEnv::desk();
        let scenario = desk_scenario(bus, d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&env, &mut rng);
        let small = random_action(6, &mut rng);
        let big = Action { shed: small.shed.iter().map(|&a| rng.random_range(a..=A_MAX)).collect() };
        let a = env.step(&state, &small, &scenario).unwrap();
        let b = env.step(&state, &big, &scenario).unwrap();
        for (x, y) in a.state.voltage.iter().zip(&b.state.voltage) {
            prop_assert!(y >= x, "{y} < {x}");
        }
    }

    #[test]
    fn state_stays_in_range(seed in any::<u64>(), bus in 0usize..10, pf in 0.8f64..1.6, mf in 0.0f64..=1.0) {
        let env = GridEnv::desk();
        let scenario = Scenario::new(env_params("e", pf, mf, 0.032, 0.45), contingency(bus, 1.0, 0.08));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut state, _) = env.reset(&scenario, seed).unwrap();
        loop {
            let out = env.step(&state, &random_action(6, &mut rng), &scenario).unwrap();
            let s = &out.state;
            prop_assert!(s.voltage.iter().all(|v| (0.0..=1.2).contains(v)));
            prop_assert!(s.load_frac.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.stalled.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.under_vstall_timer.iter().all(|v| *v >= 0.0));
            prop_assert!(out.reward.is_finite());
            state = out.state;
            if out.done {
                break;
            }
        }
    }
}
