//! Latent-conditioned policy network, evaluated by plain forward passes.
//!
//! The network input is the normalized observation concatenated with the
//! latent vector (the latent bypasses the normalizer). Hidden layers are
//! either gated recurrent units or `tanh` feedforward layers, and the output
//! layer squashes to `(0, A_MAX)` with a scaled sigmoid.
//!
//! Parameters live in one flat vector so that derivative-free search can
//! perturb them directly. A [`ParamSlice`] manifest maps ranges of that
//! vector onto layer tensors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Action, A_MAX};
use crate::seed;

/// Half-width of the uniform initialization interval.
pub const INIT_SCALE: f64 = 0.05;

/// Divisor floor for the observation normalizer.
pub const MIN_STD: f64 = 1e-8;

/// Output pre-activations are clipped to this magnitude so the squashed
/// action stays strictly inside `(0, A_MAX)` in floating point.
pub const OUT_CLIP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Recurrent,
    Feedforward,
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Recurrent => "recurrent",
            CellKind::Feedforward => "feedforward",
        })
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recurrent" => Ok(CellKind::Recurrent),
            "feedforward" => Ok(CellKind::Feedforward),
            other => Err(Error::Argument(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub action_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub cell: CellKind,
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl PolicySpec {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.latent_dim == 0 || self.action_dim == 0 {
            return Err(Error::config("policy", "obs_dim, latent_dim and action_dim must be >= 1"));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::config("policy.hidden_sizes", "must be non-empty"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::config("policy.hidden_sizes", "layer sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.latent_dim
    }

    /// Layout of the flat parameter vector.
    ///
    /// Recurrent layers store input weights `[3h x in]`, recurrent weights
    /// `[3h x h]` and biases `[3h]`, gate order update / reset / candidate.
    pub fn manifest(&self) -> Vec<ParamSlice> {
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, rows: usize, cols: usize| {
            out.push(ParamSlice {
                name,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        let mut fan_in = self.input_dim();
        for (l, &h) in self.hidden_sizes.iter().enumerate() {
            match self.cell {
                CellKind::Recurrent => {
                    push(format!("gru{l}.w_in"), 3 * h, fan_in);
                    push(format!("gru{l}.w_hh"), 3 * h, h);
                    push(format!("gru{l}.bias"), 3 * h, 1);
                }
                CellKind::Feedforward => {
                    push(format!("dense{l}.w"), h, fan_in);
                    push(format!("dense{l}.bias"), h, 1);
                }
            }
            fan_in = h;
        }
        push("out.w".into(), self.action_dim, fan_in);
        push("out.bias".into(), self.action_dim, 1);
        out
    }

    pub fn n_params(&self) -> usize {
        self.manifest().iter().map(ParamSlice::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    theta: Vec<f64>,
    manifest: Vec<ParamSlice>,
}

impl PolicyWeights {
    pub fn unflatten(spec: &PolicySpec, theta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        let manifest = spec.manifest();
        let expected: usize = manifest.iter().map(ParamSlice::len).sum();
        if theta.len() != expected {
            return Err(Error::Argument(format!(
                "flat parameter vector has {} entries, architecture needs {expected}",
                theta.len()
            )));
        }
        Ok(PolicyWeights { theta, manifest })
    }

    pub fn zeros(spec: &PolicySpec) -> Result<Self> {
        Self::unflatten(spec, vec![0.0; spec.n_params()])
    }

    pub fn flatten(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.theta
    }

    pub fn manifest(&self) -> &[ParamSlice] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Mutable view of the named tensor, row-major.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.manifest.iter().find(|s| s.name == name)?.range();
        Some(&mut self.theta[r])
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let r = self.manifest.iter().find(|s| s.name == name)?.range();
        Some(&self.theta[r])
    }
}

/// Small uniform weights in `[-INIT_SCALE, INIT_SCALE]`, deterministic per seed.
pub fn init_weights(spec: &PolicySpec, seed: u64) -> Result<PolicyWeights> {
    spec.validate()?;
    let mut rng = seed::rng(seed, &[seed::stream::INIT]);
    let theta = (0..spec.n_params())
        .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
        .collect();
    PolicyWeights::unflatten(spec, theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(dim: usize) -> Self {
        LatentVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn in_box(&self, bound: f64) -> bool {
        self.0.iter().all(|c| (-bound..=bound).contains(c))
    }
}

/// Streaming per-component mean and sum of squared deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNormalizer {
    pub count: u64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningNormalizer {
    pub fn new(dim: usize) -> Self {
        RunningNormalizer {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.dim() {
            return Err(Error::Argument(format!(
                "observation has {} components, normalizer tracks {}",
                obs.len(),
                self.dim()
            )));
        }
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(obs) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
        Ok(())
    }

    /// Folds another stream's statistics into this one.
    pub fn merge(&mut self, other: &RunningNormalizer) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Argument("normalizer dimensions differ".into()));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / n;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    /// Population standard deviation per component.
    pub fn std(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![1.0; self.dim()];
        }
        let n = self.count as f64;
        self.m2.iter().map(|&s| (s.max(0.0) / n).sqrt()).collect()
    }

    pub fn normalize_into(&self, obs: &[f64], out: &mut [f64]) {
        let n = self.count as f64;
        for i in 0..obs.len() {
            let std = if self.count == 0 {
                1.0
            } else {
                (self.m2[i].max(0.0) / n).sqrt()
            };
            let div = if std < MIN_STD { 1.0 } else { std };
            out[i] = (obs[i] - self.mean[i]) / div;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layers: Vec<Vec<f64>>,
}

impl HiddenState {
    pub fn zeros(spec: &PolicySpec) -> Self {
        HiddenState {
            layers: match spec.cell {
                CellKind::Recurrent => spec.hidden_sizes.iter().map(|&h| vec![0.0; h]).collect(),
                CellKind::Feedforward => Vec::new(),
            },
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Scratch buffers reused across forward passes.
#[derive(Debug, Clone, Default)]
pub struct Workspace {
    input: Vec<f64>,
    act: Vec<f64>,
    next: Vec<f64>,
    gates_x: Vec<f64>,
    gates_h: Vec<f64>,
    out: Vec<f64>,
}

/// Forward pass over a raw flat parameter vector.
///
/// `hidden` is advanced in place; `theta` must match `spec.n_params()`.
pub fn forward_flat(
    spec: &PolicySpec,
    theta: &[f64],
    normalizer: &RunningNormalizer,
    obs: &[f64],
    latent: &[f64],
    hidden: &mut HiddenState,
    ws: &mut Workspace,
) -> Result<Action> {
    if obs.len() != spec.obs_dim || normalizer.dim() != spec.obs_dim {
        return Err(Error::Argument(format!(
            "observation has {} components, policy expects {}",
            obs.len(),
            spec.obs_dim
        )));
    }
    if latent.len() != spec.latent_dim {
        return Err(Error::Argument(format!(
            "latent has {} components, policy expects {}",
            latent.len(),
            spec.latent_dim
        )));
    }
    if theta.len() != spec.n_params() {
        return Err(Error::Argument("parameter vector does not match spec".into()));
    }
    if spec.cell == CellKind::Recurrent && hidden.layers.len() != spec.hidden_sizes.len() {
        return Err(Error::Argument("hidden state does not match spec".into()));
    }

    ws.input.resize(spec.input_dim(), 0.0);
    normalizer.normalize_into(obs, &mut ws.input[..spec.obs_dim]);
    ws.input[spec.obs_dim..].copy_from_slice(latent);
    ws.act.clear();
    ws.act.extend_from_slice(&ws.input);

    let mut offset = 0;
    let mut take = |n: usize| {
        let s = &theta[offset..offset + n];
        offset += n;
        s
    };

    for (l, &h) in spec.hidden_sizes.iter().enumerate() {
        let fan_in = ws.act.len();
        match spec.cell {
            CellKind::Recurrent => {
                let w_in = take(3 * h * fan_in);
                let w_hh = take(3 * h * h);
                let bias = take(3 * h);
                let prev = &mut hidden.layers[l];
                ws.gates_x.clear();
                ws.gates_x.extend_from_slice(bias);
                matvec_acc(w_in, &ws.act, &mut ws.gates_x);
                ws.gates_h.clear();
                ws.gates_h.resize(3 * h, 0.0);
                matvec_acc(w_hh, prev, &mut ws.gates_h);
                ws.next.clear();
                for k in 0..h {
                    let z = sigmoid(ws.gates_x[k] + ws.gates_h[k]);
                    let r = sigmoid(ws.gates_x[h + k] + ws.gates_h[h + k]);
                    let n = (ws.gates_x[2 * h + k] + r * ws.gates_h[2 * h + k]).tanh();
                    ws.next.push((1.0 - z) * n + z * prev[k]);
                }
                prev.copy_from_slice(&ws.next);
            }
            CellKind::Feedforward => {
                let w = take(h * fan_in);
                let bias = take(h);
                ws.next.clear();
                ws.next.extend_from_slice(bias);
                matvec_acc(w, &ws.act, &mut ws.next);
                for v in &mut ws.next {
                    *v = v.tanh();
                }
            }
        }
        std::mem::swap(&mut ws.act, &mut ws.next);
    }

    let w = take(spec.action_dim * ws.act.len());
    let bias = take(spec.action_dim);
    ws.out.clear();
    ws.out.extend_from_slice(bias);
    matvec_acc(w, &ws.act, &mut ws.out);
    Ok(Action {
        shed: ws.out.iter().map(|&z| A_MAX * sigmoid(z.clamp(-OUT_CLIP, OUT_CLIP))).collect(),
    })
}

/// Pure forward pass: returns the action and the advanced hidden state.
pub fn forward(
    weights: &PolicyWeights,
    spec: &PolicySpec,
    normalizer: &RunningNormalizer,
    obs: &[f64],
    latent: &LatentVector,
    hidden: &HiddenState,
) -> Result<(Action, HiddenState)> {
    let mut h = hidden.clone();
    let mut ws = Workspace::default();
    let a = forward_flat(spec, weights.flatten(), normalizer, obs, latent.as_slice(), &mut h, &mut ws)?;
    Ok((a, h))
}

/// Everything needed to act: architecture, weights and normalizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBundle {
    pub spec: PolicySpec,
    pub weights: PolicyWeights,
    pub normalizer: RunningNormalizer,
}

impl PolicyBundle {
    pub fn new(spec: PolicySpec, seed: u64) -> Result<Self> {
        let weights = init_weights(&spec, seed)?;
        let normalizer = RunningNormalizer::new(spec.obs_dim);
        Ok(PolicyBundle {
            spec,
            weights,
            normalizer,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim
    }
}
