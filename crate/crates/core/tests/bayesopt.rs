use metashed::bayesopt::*;
use metashed::policy::LatentVector;
use metashed::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Textbook GP posterior on standardized targets, mapped back to raw units.
fn posterior_oracle(xs: &[Vec<f64>], ys: &[f64], ell: f64, noise: f64, q: &[f64]) -> (f64, f64) {
    let k = |a: &[f64], b: &[f64]| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-d2 / (2.0 * ell * ell)).exp()
    };
    let n = ys.len() as f64;
    let m = ys.iter().sum::<f64>() / n;
    let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n).sqrt();
    let sd = if sd < 1e-12 { 1.0 } else { sd };
    let z: Vec<f64> = ys.iter().map(|y| (y - m) / sd).collect();
    let gram: Vec<Vec<f64>> = xs
        .iter()
        .enumerate()
        .map(|(i, a)| xs.iter().enumerate().map(|(j, b)| k(a, b) + if i == j { noise } else { 0.0 }).collect())
        .collect();
    let ks: Vec<f64> = xs.iter().map(|a| k(a, q)).collect();
    let alpha = solve(gram.clone(), z);
    let v = solve(gram, ks.clone());
    let mean: f64 = ks.iter().zip(&alpha).map(|(a, b)| a * b).sum();
    let var: f64 = 1.0 - ks.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
    (mean * sd + m, var.max(0.0).sqrt() * sd)
}

fn cfg(dim_bound: f64) -> BoConfig {
    BoConfig { c_bound: dim_bound, ..BoConfig::default() }
}

#[test]
fn posterior_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let c = cfg(2.0);
        let mut data = c.empty_dataset().unwrap();
        let n = rng.random_range(1..12);
        for _ in 0..n {
            let x = vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            data.push(x, rng.random_range(-500.0..0.0)).unwrap();
        }
        let q = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let (m, s) = gp_posterior(&data, &LatentVector(q.to_vec())).unwrap();
        let (om, os) = posterior_oracle(&data.x, data.raw_y(), c.kernel().length_scale, c.noise_var, &q);
        assert!((m - om).abs() <= 1e-8 * (1.0 + om.abs()), "{m} vs {om}");
        assert!((s - os).abs() <= 1e-6 * (1.0 + os), "{s} vs {os}");
    }
}

#[test]
fn interpolates_with_tiny_noise() {
    let c = BoConfig { noise_var: 1e-10, ..BoConfig::default() };
    let mut data = c.empty_dataset().unwrap();
    let pts = [(vec![0.0, 0.0], -3.0), (vec![1.0, -1.0], -7.0), (vec![-1.5, 0.5], -1.0)];
    for (x, y) in &pts {
        data.push(x.clone(), *y).unwrap();
    }
    for (x, y) in &pts {
        let (m, s) = gp_posterior(&data, &LatentVector(x.clone())).unwrap();
        assert!((m - y).abs() < 1e-3, "{m} vs {y}");
        assert!(s < 1e-3);
    }
}

#[test]
fn empty_dataset_gives_prior() {
    let data = BoConfig::default().empty_dataset().unwrap();
    let (m, s) = gp_posterior(&data, &LatentVector(vec![0.3, 0.1])).unwrap();
    assert_eq!((m, s), (0.0, 1.0));
}

#[test]
fn symmetric_data_gives_symmetric_posterior() {
    let c = BoConfig::default();
    let mut data = c.empty_dataset().unwrap();
    data.push(vec![-1.0, 0.0], -5.0).unwrap();
    data.push(vec![1.0, 0.0], -5.0).unwrap();
    data.push(vec![0.0, 0.0], -1.0).unwrap();
    for q in [0.3, 0.9, 1.7] {
        let a = gp_posterior(&data, &LatentVector(vec![q, 0.4])).unwrap();
        let b = gp_posterior(&data, &LatentVector(vec![-q, 0.4])).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }
}

#[test]
fn standardization_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut data = BoConfig::default().empty_dataset().unwrap();
    for _ in 0..20 {
        data.push(vec![0.0], rng.random_range(-1e4..1e2)).unwrap();
    }
    for (z, y) in data.standardized().iter().zip(data.raw_y()) {
        assert!((data.destandardize(*z) - y).abs() <= 1e-12 * (1.0 + y.abs()));
    }
    let mut flat = BoConfig::default().empty_dataset().unwrap();
    flat.push(vec![0.0], 4.0).unwrap();
    flat.push(vec![1.0], 4.0).unwrap();
    assert_eq!(flat.y_std, 1.0);
    assert!(matches!(flat.push(vec![2.0], f64::NAN), Err(Error::Numeric(_))));
    assert!(matches!(flat.push(vec![2.0, 1.0], 1.0), Err(Error::Argument(_))));
}

#[test]
fn initial_design_is_anchored_and_in_box() {
    let anchor = LatentVector(vec![0.5, -0.25]);
    assert_eq!(initial_design_point(0, &anchor, 2.0), anchor);
    // Halton point 1 in bases 2 and 3 maps to (0, -2/3)
    let p = initial_design_point(1, &anchor, 2.0);
    assert!((p.0[0] - 0.0).abs() < 1e-15 && (p.0[1] + 2.0 / 3.0).abs() < 1e-15);
    for k in 1..64 {
        assert!(initial_design_point(k, &anchor, 2.0).in_box(2.0));
    }
}

#[test]
fn exploitation_finds_quadratic_peak() {
    let c = BoConfig { kappa: 0.0, n_candidates: 4000, ..BoConfig::default() };
    let mut data = c.empty_dataset().unwrap();
    let f = |x: &[f64]| -(x[0] * x[0] + x[1] * x[1]);
    // 9x9 grid over the box as the dense oracle
    for i in 0..9 {
        for j in 0..9 {
            let x = vec![-2.0 + 0.5 * i as f64, -2.0 + 0.5 * j as f64];
            let y = f(&x);
            data.push(x, y).unwrap();
        }
    }
    let s = suggest(&data, 2, &c, 3).unwrap();
    assert!(s.0.iter().map(|v| v * v).sum::<f64>().sqrt() < 0.1, "{:?}", s.0);
}

#[test]
fn synthetic_objective_is_located() {
    let target = [0.7, -0.4];
    let f = |c: &LatentVector| Ok(-((c.0[0] - target[0]).powi(2) + (c.0[1] - target[1]).powi(2)));
    let c = BoConfig::default();
    let res = optimize_with(f, &LatentVector::zeros(2), &c, 11).unwrap();
    let dist = ((res.best.0[0] - target[0]).powi(2) + (res.best.0[1] - target[1]).powi(2)).sqrt();
    assert!(dist < 0.25, "best {:?} at distance {dist}", res.best.0);
    assert_eq!(res.trace.len(), c.n_iterations);
    assert_eq!(res.trace[0].c, vec![0.0, 0.0]);
    for w in res.trace.windows(2) {
        assert!(w[1].incumbent >= w[0].incumbent);
    }
    assert!(res.trace.iter().all(|r| r.c.iter().all(|v| v.abs() <= c.c_bound)));
    assert_eq!(res.best_y, res.trace.last().unwrap().incumbent);
}

#[test]
fn constant_objective_returns_anchor() {
    let anchor = LatentVector(vec![0.3, 0.3]);
    let res = optimize_with(|_| Ok(-2.0), &anchor, &BoConfig::default(), 1).unwrap();
    assert_eq!(res.best, anchor);
    assert_eq!(res.best_y, -2.0);
}

#[test]
fn single_round_returns_the_anchor() {
    let c = BoConfig { n_iterations: 1, n_init: 1, ..BoConfig::default() };
    let res = optimize_with(|c| Ok(c.0[0]), &LatentVector::zeros(3), &c, 0).unwrap();
    assert_eq!(res.best, LatentVector::zeros(3));
    assert_eq!(res.dataset.len(), 1);
}

#[test]
fn simulation_fault_records_worst_value() {
    let mut n = 0;
    let res = optimize_with(
        |_| {
            n += 1;
            match n {
                1 => Ok(-1.0),
                2 => Ok(-9.0),
                3 => Err(Error::Simulation { scenario: "s".into(), message: "test".into() }),
                _ => Ok(-2.0),
            }
        },
        &LatentVector::zeros(2),
        &BoConfig { n_iterations: 5, ..BoConfig::default() },
        0,
    )
    .unwrap();
    assert_eq!(res.trace[2].y, -9.0);
    assert!(matches!(
        optimize_with(|_| Ok(f64::INFINITY), &LatentVector::zeros(2), &BoConfig::default(), 0),
        Err(Error::Numeric(_))
    ));
}

#[test]
fn search_is_deterministic_per_seed() {
    let f = |c: &LatentVector| Ok((c.0[0] * 3.0).sin() - c.0[1].powi(2));
    let a = optimize_with(f, &LatentVector::zeros(2), &BoConfig::default(), 7).unwrap();
    let b = optimize_with(f, &LatentVector::zeros(2), &BoConfig::default(), 7).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn observed_points_are_least_uncertain(
        pts in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0, -100.0f64..0.0), 1..10),
        pick in 0usize..10,
        angle in 0.0f64..std::f64::consts::TAU,
    ) {
        let c = BoConfig::default();
        let mut data = c.empty_dataset().unwrap();
        for (a, b, y) in &pts {
            data.push(vec![*a, *b], *y).unwrap();
        }
        let (a, b, _) = pts[pick % pts.len()];
        let ell = c.kernel().length_scale;
        let far = vec![a + 3.0 * ell * angle.cos(), b + 3.0 * ell * angle.sin()];
        let near = gp_posterior(&data, &LatentVector(vec![a, b])).unwrap().1;
        // compare against the single-point posterior at the far point, which
        // bounds what that point can learn from `x`
        let mut single = c.empty_dataset().unwrap();
        single.push(vec![a, b], 0.0).unwrap();
        let far_alone = gp_posterior(&single, &LatentVector(far)).unwrap().1;
        prop_assert!(near / data.y_std <= far_alone / single.y_std + 1e-12);
    }

    #[test]
    fn suggestions_stay_in_box(seed in any::<u64>(), bound in 0.1f64..5.0, n in 0usize..8) {
        let c = BoConfig { c_bound: bound, n_candidates: 50, ..BoConfig::default() };
        let mut data = c.empty_dataset().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n {
            data.push(vec![rng.random_range(-bound..=bound); 3], rng.random_range(-10.0..0.0)).unwrap();
        }
        prop_assert!(suggest(&data, 3, &c, seed).unwrap().in_box(bound));
    }
}
