//! Run configuration.
//!
//! A run is described by one TOML document. Every section is optional and
//! falls back to the desk preset; unknown keys anywhere are rejected with the
//! dotted path of the offending field. The fully resolved document is written
//! next to the run's artifacts and reads back to the same value.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baseline::MpcConfig;
use crate::error::{Error, Result};
use crate::grid::{
    build_scenario_sets, ContingencyGrid, GridEnv, GridTopology, RewardWeights, Scenario,
    ScenarioGrids, SurrogateParams, TopologySpec,
};
use crate::meta::MetaConfig;
use crate::policy::{CellKind, PolicySpec};

/// Network shape; observation and action sizes follow from the topology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub cell: CellKind,
    pub hidden_sizes: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            cell: CellKind::Feedforward,
            hidden_sizes: vec![16, 16],
            latent_dim: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
    /// Save a checkpoint after every this many outer iterations.
    pub checkpoint_every: usize,
    pub topology: TopologySpec,
    pub surrogate: SurrogateParams,
    pub reward: RewardWeights,
    pub scenarios: ScenarioGrids,
    pub policy: PolicyConfig,
    pub meta: MetaConfig,
    pub mpc: MpcConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            output_dir: PathBuf::from("runs/desk"),
            checkpoint_every: 1,
            topology: TopologySpec::default(),
            surrogate: SurrogateParams::default(),
            reward: RewardWeights::default(),
            scenarios: ScenarioGrids::default(),
            policy: PolicyConfig::default(),
            meta: MetaConfig::default(),
            mpc: MpcConfig::default(),
        }
    }
}

impl RunConfig {
    /// The default preset.
    pub fn desk() -> Self {
        RunConfig::default()
    }

    /// Population, budget and network sizes of the 300-bus study on the
    /// desk surrogate.
    pub fn full_scale() -> Self {
        let mut cfg = RunConfig {
            output_dir: PathBuf::from("runs/full"),
            meta: MetaConfig::full_scale(),
            policy: PolicyConfig {
                cell: CellKind::Recurrent,
                hidden_sizes: vec![64, 64],
                latent_dim: 2,
            },
            ..RunConfig::default()
        };
        cfg.scenarios.train_contingencies = ContingencyGrid {
            fault_buses: (0..9).collect(),
            durations: vec![0.05, 0.08],
            fault_start: 1.0,
        };
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "full" => Ok(RunConfig::full_scale()),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (desk, full)"))),
        }
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text)
            .map_err(|e| Error::config("<document>", e.message().to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(if path == "." { "<document>".into() } else { path }, e.inner().message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<document>", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be >= 1"));
        }
        let topology = GridTopology::from_spec(&self.topology)?;
        self.surrogate.validate()?;
        self.reward.validate()?;
        let mut ids = HashSet::new();
        for e in self.scenarios.train_envs.iter().chain(&self.scenarios.test_envs) {
            e.validate()?;
            if !ids.insert(e.id.as_str()) {
                return Err(Error::config("scenarios", format!("duplicate environment id `{}`", e.id)));
            }
        }
        build_scenario_sets(&self.scenarios, &topology)?;
        self.policy_spec_for(&topology).validate()?;
        self.meta.validate(self.scenarios.train_envs.len())?;
        self.mpc.validate()
    }

    pub fn env(&self) -> Result<GridEnv> {
        let topology = GridTopology::from_spec(&self.topology)?;
        Ok(GridEnv::new(topology, self.surrogate.clone(), self.reward))
    }

    fn policy_spec_for(&self, topology: &GridTopology) -> PolicySpec {
        PolicySpec {
            obs_dim: topology.obs_dim(),
            latent_dim: self.policy.latent_dim,
            action_dim: topology.n_load(),
            hidden_sizes: self.policy.hidden_sizes.clone(),
            cell: self.policy.cell,
        }
    }

    pub fn policy_spec(&self) -> Result<PolicySpec> {
        Ok(self.policy_spec_for(&GridTopology::from_spec(&self.topology)?))
    }

    /// Train and test scenario lists.
    pub fn scenario_sets(&self) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
        build_scenario_sets(&self.scenarios, &GridTopology::from_spec(&self.topology)?)
    }
}
