//! Gaussian-process Bayesian optimization over the latent box.
//!
//! The surrogate is a squared-exponential GP fitted to standardized returns
//! with fixed hyperparameters. Each round maximizes `μ + κσ` over uniform
//! random candidates in `[-c_bound, c_bound]^d`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridEnv, Scenario};
use crate::pars::{rollout_return, WorkerPool};
use crate::policy::{LatentVector, PolicyBundle};
use crate::seed::{self, stream};

/// Jitter added to the kernel diagonal, tried in order until factorization
/// succeeds.
const JITTER: [f64; 6] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub length_scale: f64,
    pub signal_var: f64,
}

impl Kernel {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_var * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }
}

/// Observed `(latent, return)` pairs plus GP hyperparameters.
///
/// Raw returns are kept; the GP works on `(y - y_mean) / y_std`.
#[derive(Debug, Clone, PartialEq)]
pub struct GPDataset {
    pub x: Vec<Vec<f64>>,
    y: Vec<f64>,
    pub kernel: Kernel,
    pub noise_var: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

impl GPDataset {
    pub fn new(kernel: Kernel, noise_var: f64) -> Result<Self> {
        if !(kernel.length_scale > 0.0 && kernel.signal_var > 0.0 && noise_var > 0.0) {
            return Err(Error::Argument(
                "kernel length scale, signal variance and noise variance must be > 0".into(),
            ));
        }
        Ok(GPDataset {
            x: Vec::new(),
            y: Vec::new(),
            kernel,
            noise_var,
            y_mean: 0.0,
            y_std: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn push(&mut self, x: Vec<f64>, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::Numeric(format!("non-finite observation {y}")));
        }
        if let Some(first) = self.x.first() {
            if first.len() != x.len() {
                return Err(Error::Argument(format!(
                    "latent dim {} does not match dataset dim {}",
                    x.len(),
                    first.len()
                )));
            }
        }
        self.x.push(x);
        self.y.push(y);
        let n = self.y.len() as f64;
        self.y_mean = self.y.iter().sum::<f64>() / n;
        let var = self.y.iter().map(|v| (v - self.y_mean).powi(2)).sum::<f64>() / n;
        self.y_std = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
        Ok(())
    }

    /// Raw observed returns.
    pub fn raw_y(&self) -> &[f64] {
        &self.y
    }

    pub fn standardized(&self) -> Vec<f64> {
        self.y.iter().map(|v| (v - self.y_mean) / self.y_std).collect()
    }

    pub fn destandardize(&self, z: f64) -> f64 {
        z * self.y_std + self.y_mean
    }

    /// Index of the best raw observation; the earliest wins ties.
    pub fn incumbent(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &v) in self.y.iter().enumerate() {
            if best.is_none_or(|b| v > self.y[b]) {
                best = Some(i);
            }
        }
        best
    }

    /// Drops observations, keeping hyperparameters.
    pub fn clear(&mut self) {
        self.x.clear();
        self.y.clear();
        self.y_mean = 0.0;
        self.y_std = 1.0;
    }
}

/// Factorized GP posterior, reusable across many queries.
pub struct GpFit<'a> {
    data: &'a GPDataset,
    chol: Option<Cholesky<f64, nalgebra::Dyn>>,
    alpha: DVector<f64>,
}

impl<'a> GpFit<'a> {
    pub fn new(data: &'a GPDataset) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Ok(GpFit {
                data,
                chol: None,
                alpha: DVector::zeros(0),
            });
        }
        let k = DMatrix::from_fn(n, n, |i, j| data.kernel.eval(&data.x[i], &data.x[j]));
        let z = DVector::from_vec(data.standardized());
        for jitter in JITTER {
            let mut m = k.clone();
            for i in 0..n {
                m[(i, i)] += data.noise_var + jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                let alpha = chol.solve(&z);
                return Ok(GpFit {
                    data,
                    chol: Some(chol),
                    alpha,
                });
            }
        }
        Err(Error::Numeric(format!(
            "kernel matrix of {n} points not positive definite after jitter"
        )))
    }

    /// Posterior mean and standard deviation in raw units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let d = self.data;
        let prior = d.kernel.signal_var;
        let Some(chol) = &self.chol else {
            return (d.y_mean, prior.sqrt() * d.y_std);
        };
        let ks = DVector::from_iterator(d.len(), d.x.iter().map(|xi| d.kernel.eval(xi, x)));
        let mean = ks.dot(&self.alpha);
        let v = chol.l().solve_lower_triangular(&ks).expect("cholesky factor is invertible");
        let var = (prior - v.norm_squared()).max(0.0);
        (d.destandardize(mean), var.sqrt() * d.y_std)
    }
}

/// Posterior `(mean, std)` at `x` in raw units.
pub fn gp_posterior(data: &GPDataset, x: &LatentVector) -> Result<(f64, f64)> {
    Ok(GpFit::new(data)?.predict(x.as_slice()))
}

pub fn ucb(mean: f64, std: f64, kappa: f64) -> f64 {
    mean + kappa * std
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoConfig {
    pub n_iterations: usize,
    pub n_init: usize,
    pub kappa: f64,
    pub c_bound: f64,
    pub n_candidates: usize,
    pub noise_var: f64,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            n_iterations: 32,
            n_init: 4,
            kappa: 2.0,
            c_bound: 2.0,
            n_candidates: 1000,
            noise_var: 1e-4,
        }
    }
}

impl BoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.n_iterations < self.n_init {
            return Err(Error::config("bo.n_init", "must satisfy 1 <= n_init <= n_iterations"));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::config("bo.kappa", "must be >= 0"));
        }
        if !(self.c_bound > 0.0 && self.c_bound.is_finite()) {
            return Err(Error::config("bo.c_bound", "must be > 0"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("bo.n_candidates", "must be >= 1"));
        }
        if !(self.noise_var > 0.0) {
            return Err(Error::config("bo.noise_var", "must be > 0"));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Kernel {
        Kernel {
            length_scale: 0.2 * 2.0 * self.c_bound,
            signal_var: 1.0,
        }
    }

    pub fn empty_dataset(&self) -> Result<GPDataset> {
        GPDataset::new(self.kernel(), self.noise_var)
    }
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Point `k` of the initial design: the anchor first, then Halton points
/// mapped into the box.
pub fn initial_design_point(k: usize, anchor: &LatentVector, c_bound: f64) -> LatentVector {
    if k == 0 {
        return anchor.clone();
    }
    LatentVector(
        (0..anchor.dim())
            .map(|j| {
                let u = radical_inverse(k as u64, PRIMES[j % PRIMES.len()]);
                -c_bound + 2.0 * c_bound * u
            })
            .collect(),
    )
}

/// Next latent to evaluate, with the zero vector as design anchor.
pub fn suggest(data: &GPDataset, dim: usize, cfg: &BoConfig, seed: u64) -> Result<LatentVector> {
    suggest_with_anchor(data, &LatentVector::zeros(dim), cfg, seed)
}

pub fn suggest_with_anchor(
    data: &GPDataset,
    anchor: &LatentVector,
    cfg: &BoConfig,
    seed: u64,
) -> Result<LatentVector> {
    if data.len() < cfg.n_init {
        return Ok(initial_design_point(data.len(), anchor, cfg.c_bound));
    }
    let fit = GpFit::new(data)?;
    let mut rng = seed::rng(seed, &[stream::BO]);
    let dim = anchor.dim();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut cand = vec![0.0; dim];
    for _ in 0..cfg.n_candidates {
        for c in cand.iter_mut() {
            *c = rng.random_range(-cfg.c_bound..=cfg.c_bound);
        }
        let (m, s) = fit.predict(&cand);
        let a = ucb(m, s, cfg.kappa);
        if best.as_ref().is_none_or(|(b, _)| a > *b) {
            best = Some((a, cand.clone()));
        }
    }
    Ok(LatentVector(best.expect("n_candidates >= 1").1))
}

/// One suggest-evaluate round.
#[derive(Debug, Clone, PartialEq)]
pub struct BoRound {
    pub round: usize,
    pub c: Vec<f64>,
    pub y: f64,
    pub incumbent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoResult {
    pub best: LatentVector,
    pub best_y: f64,
    pub dataset: GPDataset,
    pub trace: Vec<BoRound>,
}

/// Maximizes `objective` over the box.
///
/// A simulation fault in one evaluation is reported on stderr and recorded as
/// the worst value seen so far.
pub fn optimize_with<F>(
    mut objective: F,
    anchor: &LatentVector,
    cfg: &BoConfig,
    seed: u64,
) -> Result<BoResult>
where
    F: FnMut(&LatentVector) -> Result<f64>,
{
    cfg.validate()?;
    if !anchor.in_box(cfg.c_bound) {
        return Err(Error::Argument("anchor outside the latent box".into()));
    }
    let mut data = cfg.empty_dataset()?;
    let mut trace = Vec::with_capacity(cfg.n_iterations);
    for round in 0..cfg.n_iterations {
        let c = suggest_with_anchor(&data, anchor, cfg, seed::derive(seed, &[stream::BO, round as u64]))?;
        let y = match objective(&c) {
            Ok(y) if y.is_finite() => y,
            Ok(y) => return Err(Error::Numeric(format!("objective returned {y}"))),
            Err(e @ Error::Simulation { .. }) => {
                let Some(worst) = data.raw_y().iter().copied().reduce(f64::min) else {
                    return Err(e);
                };
                eprintln!("warning: BO round {round}: {e}; recording worst value {worst}");
                worst
            }
            Err(e) => return Err(e),
        };
        data.push(c.0.clone(), y)?;
        let inc = data.incumbent().expect("non-empty");
        trace.push(BoRound {
            round,
            c: c.0,
            y,
            incumbent: data.raw_y()[inc],
        });
    }
    let inc = data.incumbent().expect("n_iterations >= 1");
    Ok(BoResult {
        best: LatentVector(data.x[inc].clone()),
        best_y: data.raw_y()[inc],
        dataset: data,
        trace,
    })
}

/// Strategy search for one environment: `y(c)` is the mean return over
/// `scenarios` with weights and normalizer frozen.
pub fn optimize_latent(
    env: &GridEnv,
    bundle: &PolicyBundle,
    scenarios: &[Scenario],
    cfg: &BoConfig,
    anchor: Option<&LatentVector>,
    seed: u64,
    pool: &WorkerPool,
) -> Result<BoResult> {
    let first = scenarios
        .first()
        .ok_or_else(|| Error::Argument("no scenarios for strategy search".into()))?;
    if let Some(s) = scenarios.iter().find(|s| s.env != first.env) {
        return Err(Error::Argument(format!(
            "strategy search mixes environments `{}` and `{}`",
            first.env.id, s.env.id
        )));
    }
    let zero = LatentVector::zeros(bundle.latent_dim());
    let anchor = anchor.unwrap_or(&zero);
    let indices: Vec<usize> = (0..scenarios.len()).collect();
    optimize_with(
        |c| {
            let returns = pool.map(&indices, |&j| {
                let rs = seed::derive(seed, &[stream::EVAL, j as u64]);
                rollout_return(env, bundle, c, &scenarios[j], rs, false).map(|r| r.0)
            });
            let returns = returns.into_iter().collect::<Result<Vec<_>>>()?;
            Ok(returns.iter().sum::<f64>() / returns.len() as f64)
        },
        anchor,
        cfg,
        seed,
    )
}

/// Writes `round, c0.., y, incumbent`.
pub fn write_bo_trace<W: Write>(out: W, trace: &[BoRound]) -> Result<()> {
    let dim = trace.first().map_or(0, |r| r.c.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["round".to_string()];
    header.extend((0..dim).map(|j| format!("c{j}")));
    header.extend(["y".to_string(), "incumbent".to_string()]);
    w.write_record(&header)?;
    for r in trace {
        let mut row = vec![r.round.to_string()];
        row.extend(r.c.iter().map(|v| v.to_string()));
        row.extend([r.y.to_string(), r.incumbent.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_bo_trace(path: &Path, trace: &[BoRound]) -> Result<()> {
    write_bo_trace(std::fs::File::create(path)?, trace)
}
