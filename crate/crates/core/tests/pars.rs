mod common;

use common::*;
use metashed::grid::{GridEnv, Scenario};
use metashed::meta::{policy_episode, LatentTable};
use metashed::pars::*;
use metashed::policy::*;
use metashed::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Update rule written out directly: rank by the better side, keep `b`,
/// scale by the population std of the kept returns.
fn update_oracle(theta: &[f64], evals: &[DirectionEval], b: usize, alpha: f64) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..evals.len()).collect();
    idx.sort_by(|&i, &j| {
        let si = evals[i].r_plus.max(evals[i].r_minus);
        let sj = evals[j].r_plus.max(evals[j].r_minus);
        sj.partial_cmp(&si).unwrap().then(i.cmp(&j))
    });
    let kept = &idx[..b];
    let mut rs = Vec::new();
    for &i in kept {
        rs.push(evals[i].r_plus);
        rs.push(evals[i].r_minus);
    }
    let (_, sd) = mean_std(&rs);
    let sd = if sd < 1e-8 { 1.0 } else { sd };
    let mut out = theta.to_vec();
    for &i in kept {
        let diff = evals[i].r_plus - evals[i].r_minus;
        for (o, d) in out.iter_mut().zip(&evals[i].delta) {
            *o += alpha / (b as f64 * sd) * diff * d;
        }
    }
    out
}

fn random_evals(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<DirectionEval> {
    (0..n)
        .map(|i| DirectionEval {
            index: i,
            delta: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            r_plus: rng.random_range(-100.0..10.0),
            r_minus: rng.random_range(-100.0..10.0),
        })
        .collect()
}

#[test]
fn hand_example() {
    let evals = [DirectionEval { index: 0, delta: vec![1.0, 0.0], r_plus: 2.0, r_minus: 0.0 }];
    let out = update_weights(&[0.5, -0.5], &evals, 1, 0.01).unwrap();
    assert!((out[0] - 0.52).abs() < 1e-12);
    assert!((out[1] + 0.5).abs() < 1e-12);
}

#[test]
fn degenerate_returns_leave_theta() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut evals = random_evals(6, 3, &mut rng);
    for e in &mut evals {
        e.r_minus = e.r_plus;
    }
    assert_eq!(update_weights(&[1.0, 2.0, 3.0], &evals, 3, 0.5).unwrap(), vec![1.0, 2.0, 3.0]);
    for e in &mut evals {
        e.r_plus = 4.0;
        e.r_minus = 4.0;
    }
    assert_eq!(update_weights(&[1.0, 2.0, 3.0], &evals, 3, 0.5).unwrap(), vec![1.0, 2.0, 3.0]);
    evals[2].r_plus = f64::INFINITY;
    assert!(matches!(update_weights(&[1.0, 2.0, 3.0], &evals, 3, 0.5), Err(Error::Update(_))));
}

#[test]
fn update_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(1..20);
        let b = rng.random_range(1..=n);
        let evals = random_evals(n, 7, &mut rng);
        let theta: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = rng.random_range(0.001..1.0);
        let got = update_weights(&theta, &evals, b, alpha).unwrap();
        for (x, y) in got.iter().zip(update_oracle(&theta, &evals, b, alpha)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn return_scaling_leaves_update_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let evals = random_evals(16, 5, &mut rng);
        let theta: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 10f64.powf(rng.random_range(-3.0..3.0));
        let scaled: Vec<DirectionEval> = evals
            .iter()
            .map(|e| DirectionEval { r_plus: k * e.r_plus, r_minus: k * e.r_minus, ..e.clone() })
            .collect();
        let a = update_weights(&theta, &evals, 8, 0.1).unwrap();
        let b = update_weights(&theta, &scaled, 8, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "k = {k}");
        }
    }
}

#[test]
fn quadratic_oracle_converges() {
    let cfg = ParsConfig {
        n_directions: 16,
        top_b: 8,
        step_size: 0.05,
        noise_std: 0.05,
        decay: 0.99,
        iterations: 300,
        scenarios_per_direction: 1,
    };
    let pool = WorkerPool::new(1).unwrap();
    let mut passed = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let oracle = Quadratic { target: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let mut state = ParsState::new(vec![0.0; 5], RunningNormalizer::new(1), &cfg);
        let hist = run_iterations(&mut state, &oracle, &cfg, 300, seed, &pool).unwrap();
        let last = hist.last().unwrap().mean_return;
        assert_eq!(last, oracle.value(&state.theta));
        if last > -1e-3 {
            passed += 1;
        }
    }
    assert!(passed >= 9, "{passed}/10 seeds converged");
}

#[test]
fn decay_is_exact() {
    let cfg = ParsConfig { n_directions: 2, top_b: 1, scenarios_per_direction: 1, ..ParsConfig::default() };
    let pool = WorkerPool::new(1).unwrap();
    let oracle = Quadratic { target: vec![1.0, 1.0] };
    let mut state = ParsState::new(vec![0.0; 2], RunningNormalizer::new(1), &cfg);
    let h = 37;
    run_iterations(&mut state, &oracle, &cfg, h, 0, &pool).unwrap();
    let mut f = 1.0;
    for _ in 0..h {
        f *= cfg.decay;
    }
    assert_eq!(state.step_size, cfg.step_size * f);
    assert_eq!(state.noise_std, cfg.noise_std * f);
    assert!((state.step_size - cfg.step_size * cfg.decay.powi(h as i32)).abs() < 1e-15);
}

fn tiny_setup() -> (GridEnv, PolicyBundle, LatentTable, Vec<Scenario>) {
    let env = GridEnv::desk();
    let spec = PolicySpec { obs_dim: 16, latent_dim: 2, action_dim: 6, hidden_sizes: vec![4], cell: CellKind::Recurrent };
    let bundle = PolicyBundle::new(spec, 5).unwrap();
    let e = env_params("a", 1.35, 0.44, 0.032, 0.45);
    let scenarios = [(2, 0.05), (5, 0.08), (7, 0.05)]
        .iter()
        .map(|&(b, d)| Scenario::new(e.clone(), contingency(b, 1.0, d)))
        .collect();
    let mut table = LatentTable::new(["a"], 2);
    table.set("a", LatentVector(vec![0.5, -0.5]), None).unwrap();
    (env, bundle, table, scenarios)
}

#[test]
fn trajectory_is_independent_of_worker_count() {
    let (env, bundle, table, scenarios) = tiny_setup();
    let cfg = ParsConfig { n_directions: 4, top_b: 2, iterations: 1, scenarios_per_direction: 2, ..ParsConfig::default() };
    let trajectory = |workers: usize| {
        let pool = WorkerPool::new(workers).unwrap();
        let mut b = bundle.clone();
        let mut state = None;
        let mut thetas = Vec::new();
        for _ in 0..4 {
            let (nb, st, _) = train_inner(&env, &b, &table, &scenarios, &cfg, state, 17, &pool).unwrap();
            thetas.push(nb.weights.flatten().to_vec());
            b = nb;
            state = Some(st);
        }
        (thetas, b.normalizer)
    };
    let one = trajectory(1);
    let eight = trajectory(8);
    assert_eq!(one, eight);
}

#[test]
fn zero_iterations_leave_bundle() {
    let (env, bundle, table, scenarios) = tiny_setup();
    let cfg = ParsConfig { iterations: 0, ..ParsConfig::default() };
    let (out, _, hist) = train_inner(&env, &bundle, &table, &scenarios, &cfg, None, 0, &WorkerPool::new(1).unwrap()).unwrap();
    assert_eq!(out, bundle);
    assert!(hist.is_empty());
}

#[test]
fn missing_latent_is_an_argument_error() {
    let (env, bundle, _, scenarios) = tiny_setup();
    let table = LatentTable::new(["other"], 2);
    let r = train_inner(&env, &bundle, &table, &scenarios, &ParsConfig::default(), None, 0, &WorkerPool::new(1).unwrap());
    assert!(matches!(r, Err(Error::Argument(_))));
}

/// A policy whose outputs sit at the bottom of the sigmoid.
fn idle_bundle() -> PolicyBundle {
    let spec = PolicySpec { obs_dim: 16, latent_dim: 2, action_dim: 6, hidden_sizes: vec![4], cell: CellKind::Feedforward };
    let mut w = PolicyWeights::zeros(&spec).unwrap();
    w.tensor_mut("out.bias").unwrap().fill(-30.0);
    PolicyBundle { normalizer: RunningNormalizer::new(16), spec, weights: w }
}

#[test]
fn rollout_return_examples() {
    let env = GridEnv::desk();
    let bundle = idle_bundle();
    let c = LatentVector::zeros(2);
    let hard = Scenario::new(env_params("h", 1.35, 0.44, 0.032, 0.45), contingency(4, 1.0, 0.08));
    let (ret, norm) = rollout_return(&env, &bundle, &c, &hard, 3, true).unwrap();
    let summary = policy_episode(&env, &bundle, &c, &hard, 3, None).unwrap();
    assert!(summary.penalized);
    // every per-step reward is <= 0, so the penalty bounds the whole return
    assert!(ret <= -10000.0);
    assert_eq!(norm.unwrap().count as usize, summary.steps);
    assert_eq!(rollout_return(&env, &bundle, &c, &hard, 3, true).unwrap().0, ret);

    let calm = Scenario::new(env_params("h", 1.35, 0.44, 0.032, 0.45), contingency(4, 50.0, 0.08));
    let (ret, norm) = rollout_return(&env, &bundle, &c, &calm, 3, false).unwrap();
    let summary = policy_episode(&env, &bundle, &c, &calm, 3, None).unwrap();
    assert!(norm.is_none());
    assert!(ret <= 0.0 && ret >= -env.weights.c2 * summary.total_shed - 1e-12);
    assert!(ret > -1e-6);
}

proptest! {
    #[test]
    fn single_direction_moves_along_delta(
        delta in prop::collection::vec(-3.0f64..3.0, 4),
        lo in -50.0f64..0.0,
        gap in 1e-3f64..50.0,
        alpha in 1e-3f64..1.0,
    ) {
        let evals = [DirectionEval { index: 0, delta: delta.clone(), r_plus: lo + gap, r_minus: lo }];
        let theta = [0.1, 0.2, 0.3, 0.4];
        let out = update_weights(&theta, &evals, 1, alpha).unwrap();
        let step: Vec<f64> = out.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let dot: f64 = step.iter().zip(&delta).map(|(s, d)| s * d).sum();
        prop_assert!(dot > 0.0 || delta.iter().all(|&d| d == 0.0));
        let norm_d = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
        let norm_s = step.iter().map(|d| d * d).sum::<f64>().sqrt();
        prop_assert!((dot - norm_d * norm_s).abs() <= 1e-9 * (1.0 + norm_d * norm_s));
    }
}
