//! Versioned plain-text checkpoints.
//!
//! A checkpoint holds everything [`meta_train_from`](crate::meta::meta_train_from)
//! needs to continue a run bit-for-bit: policy shape, flat weights, normalizer
//! moments, the latent table, the decayed step size and noise, counters, the
//! base seed and the history so far. Floats are written in Rust's shortest
//! round-trip form, so a load reproduces every value exactly.
//!
//! ```text
//! metashed-checkpoint v1
//! [spec]
//! obs_dim 16
//! ...
//! [end]
//! ```

use std::fmt::Display;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::meta::{HistoryRow, LatentTable, MetaState};
use crate::pars::ParsState;
use crate::policy::{CellKind, LatentVector, PolicySpec, RunningNormalizer};

const MAGIC: &str = "metashed-checkpoint";
pub const SCHEMA_VERSION: &str = "v1";

#[cfg(test)]
const SECTIONS: [&str; 8] = [
    "spec",
    "theta",
    "normalizer",
    "optimizer",
    "run",
    "latents",
    "history",
    "end",
];

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_checkpoint<W: Write>(mut out: W, state: &MetaState) -> Result<()> {
    let spec = &state.spec;
    let p = &state.pars;
    writeln!(out, "{MAGIC} {SCHEMA_VERSION}")?;

    writeln!(out, "[spec]")?;
    writeln!(out, "obs_dim {}", spec.obs_dim)?;
    writeln!(out, "latent_dim {}", spec.latent_dim)?;
    writeln!(out, "action_dim {}", spec.action_dim)?;
    writeln!(out, "hidden_sizes {}", join(&spec.hidden_sizes))?;
    writeln!(out, "cell {}", spec.cell)?;

    writeln!(out, "[theta]")?;
    writeln!(out, "len {}", p.theta.len())?;
    for v in &p.theta {
        writeln!(out, "{v}")?;
    }

    writeln!(out, "[normalizer]")?;
    writeln!(out, "count {}", p.normalizer.count)?;
    writeln!(out, "mean {}", join(&p.normalizer.mean))?;
    writeln!(out, "m2 {}", join(&p.normalizer.m2))?;

    writeln!(out, "[optimizer]")?;
    writeln!(out, "step_size {}", p.step_size)?;
    writeln!(out, "noise_std {}", p.noise_std)?;
    writeln!(out, "iteration {}", p.iteration)?;

    writeln!(out, "[run]")?;
    writeln!(out, "seed {}", state.seed)?;
    writeln!(out, "outer {}", state.outer)?;
    writeln!(out, "bo_runs {}", state.bo_runs)?;

    writeln!(out, "[latents]")?;
    writeln!(out, "dim {}", state.table.dim())?;
    for (id, e) in state.table.iter() {
        if id.is_empty() || id.chars().any(char::is_whitespace) {
            return Err(Error::Argument(format!(
                "environment id `{id}` cannot be stored in a checkpoint"
            )));
        }
        let score = e.last_score.map_or("none".to_string(), |s| s.to_string());
        writeln!(out, "{id} {score} {}", join(e.latent.as_slice()))?;
    }

    writeln!(out, "[history]")?;
    for r in &state.history {
        writeln!(
            out,
            "{} {} {} {} {} {}",
            r.outer, r.iteration, r.mean_return, r.perturbed_return, r.step_size, r.noise_std
        )?;
    }
    writeln!(out, "[end]")?;
    out.flush()?;
    Ok(())
}

/// Writes through a temporary file and renames, so an interrupted save
/// never leaves a half-written checkpoint under `path`.
pub fn save_checkpoint(path: &Path, state: &MetaState) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let file = fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        write_checkpoint(&mut w, state)?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MetaState> {
    let file = fs::File::open(path)?;
    read_checkpoint(BufReader::new(file))
}

struct Reader {
    lines: Vec<String>,
    pos: usize,
    section: &'static str,
}

impl Reader {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.section, msg)
    }

    fn peek(&self) -> Option<&str> {
        self.lines.get(self.pos).map(String::as_str)
    }

    fn next_line(&mut self) -> Result<&str> {
        let line = self
            .lines
            .get(self.pos)
            .ok_or_else(|| Error::parse(self.section, "unexpected end of file"))?;
        self.pos += 1;
        Ok(line.as_str())
    }

    fn enter(&mut self, name: &'static str) -> Result<()> {
        self.section = name;
        let line = self.next_line()?.to_string();
        if line != format!("[{name}]") {
            return Err(self.err(format!("expected section header, found `{line}`")));
        }
        Ok(())
    }

    /// Reads `key v1 v2 ...` and returns the values.
    fn field(&mut self, key: &str) -> Result<Vec<String>> {
        let line = self.next_line()?.to_string();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(k) if k == key => Ok(parts.map(str::to_string).collect()),
            _ => Err(self.err(format!("expected `{key}`, found `{line}`"))),
        }
    }

    fn scalar<T: FromStr>(&mut self, key: &str) -> Result<T> {
        let vals = self.field(key)?;
        match vals.as_slice() {
            [v] => self.value(key, v),
            _ => Err(self.err(format!("`{key}` expects one value, found {}", vals.len()))),
        }
    }

    fn vector<T: FromStr>(&mut self, key: &str) -> Result<Vec<T>> {
        let vals = self.field(key)?;
        vals.iter().map(|v| self.value(key, v)).collect()
    }

    fn value<T: FromStr>(&self, key: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| self.err(format!("bad value `{v}` for `{key}`")))
    }
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<MetaState> {
    let lines = input.lines().collect::<std::io::Result<Vec<_>>>()?;
    let mut r = Reader {
        lines,
        pos: 0,
        section: "header",
    };

    let header = r.next_line()?.to_string();
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(r.err("not a checkpoint file"));
    }
    let version = parts.next().unwrap_or("").to_string();
    if version != SCHEMA_VERSION {
        return Err(Error::Migration {
            found: version,
            expected: SCHEMA_VERSION.to_string(),
        });
    }

    r.enter("spec")?;
    let spec = PolicySpec {
        obs_dim: r.scalar("obs_dim")?,
        latent_dim: r.scalar("latent_dim")?,
        action_dim: r.scalar("action_dim")?,
        hidden_sizes: r.vector("hidden_sizes")?,
        cell: r.scalar::<CellKind>("cell")?,
    };
    spec.validate().map_err(|e| r.err(e.to_string()))?;

    r.enter("theta")?;
    let len: usize = r.scalar("len")?;
    if len != spec.n_params() {
        return Err(r.err(format!("{len} weights, spec needs {}", spec.n_params())));
    }
    let mut theta = Vec::with_capacity(len);
    for _ in 0..len {
        let line = r.next_line()?.to_string();
        theta.push(r.value("theta", line.trim())?);
    }

    r.enter("normalizer")?;
    let normalizer = RunningNormalizer {
        count: r.scalar("count")?,
        mean: r.vector("mean")?,
        m2: r.vector("m2")?,
    };
    if normalizer.mean.len() != spec.obs_dim || normalizer.m2.len() != spec.obs_dim {
        return Err(r.err(format!("moments must have {} components", spec.obs_dim)));
    }

    r.enter("optimizer")?;
    let step_size: f64 = r.scalar("step_size")?;
    let noise_std: f64 = r.scalar("noise_std")?;
    let iteration: u64 = r.scalar("iteration")?;

    r.enter("run")?;
    let seed: u64 = r.scalar("seed")?;
    let outer: usize = r.scalar("outer")?;
    let bo_runs: usize = r.scalar("bo_runs")?;

    r.enter("latents")?;
    let dim: usize = r.scalar("dim")?;
    if dim != spec.latent_dim {
        return Err(r.err(format!("latent dim {dim}, spec says {}", spec.latent_dim)));
    }
    let mut rows = Vec::new();
    while let Some(line) = r.peek() {
        if line.starts_with('[') {
            break;
        }
        let line = r.next_line()?.to_string();
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 2 + dim {
            return Err(r.err(format!("latent row `{line}` should have {} fields", 2 + dim)));
        }
        let score = match parts[1] {
            "none" => None,
            s => Some(r.value::<f64>("score", s)?),
        };
        let c = parts[2..]
            .iter()
            .map(|v| r.value::<f64>("latent", v))
            .collect::<Result<Vec<_>>>()?;
        rows.push((parts[0].to_string(), score, c));
    }
    let mut table = LatentTable::new(rows.iter().map(|(id, _, _)| id.clone()), dim);
    for (id, score, c) in rows {
        table.set(&id, LatentVector(c), score)?;
    }

    r.enter("history")?;
    let mut history = Vec::new();
    while let Some(line) = r.peek() {
        if line.starts_with('[') {
            break;
        }
        let line = r.next_line()?.to_string();
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(r.err(format!("history row `{line}` should have 6 fields")));
        }
        history.push(HistoryRow {
            outer: r.value("outer", f[0])?,
            iteration: r.value("iteration", f[1])?,
            mean_return: r.value("mean_return", f[2])?,
            perturbed_return: r.value("perturbed_return", f[3])?,
            step_size: r.value("alpha", f[4])?,
            noise_std: r.value("nu", f[5])?,
        });
    }

    r.enter("end")?;
    if let Some(extra) = r.peek() {
        return Err(r.err(format!("trailing content `{extra}`")));
    }

    Ok(MetaState {
        spec,
        pars: ParsState {
            theta,
            normalizer,
            step_size,
            noise_std,
            iteration,
        },
        table,
        outer,
        seed,
        history,
        bo_runs,
    })
}
