//! Scenario files: device parameters, profile source, topology and run settings.
//!
//! Units: power in kW, prices in $/kWh, temperatures in °C. Every key is
//! optional and falls back to the defaults below.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::profiles::{load_profiles, ProfileTable};
use super::synth::{synth_profiles, ArchetypeMix, SynthParams};
use super::DataError;
use crate::consensus::{auto_epsilon, ConsensusConfig};
use crate::localopt::SolverConfig;
use crate::model::{FlexLoadParams, HvacParams, ProsumerSpec, TariffModel};
use crate::topology::{self, Topology, WeightMatrix};

/// A constant or a per-slot series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Series {
    Constant(f64),
    Values(Vec<f64>),
}

impl Series {
    pub fn expand(&self, what: &str, horizon: usize) -> Result<Vec<f64>, DataError> {
        match self {
            Series::Constant(v) => Ok(vec![*v; horizon]),
            Series::Values(v) if v.len() == horizon => Ok(v.clone()),
            Series::Values(v) => Err(DataError::Config(format!(
                "{what} has {} values, horizon has {horizon} slots",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonConfig {
    /// Number of slots in the day.
    pub slots: usize,
    /// Slot length, hours.
    pub slot_duration_h: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { slots: 24, slot_duration_h: 1.0 }
    }
}

/// Flexible-load parameters in scenario form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlexConfig {
    /// Lower power bound, kW.
    pub p_min: Series,
    /// Upper power bound, kW.
    pub p_max: Series,
    /// Preferred schedule, kW.
    pub p_ref: Series,
    /// Shift discomfort weight, $/kW².
    pub beta_f: f64,
}

impl Default for FlexConfig {
    fn default() -> Self {
        Self {
            p_min: Series::Constant(0.0),
            p_max: Series::Constant(1.0),
            p_ref: Series::Constant(0.3),
            beta_f: 0.05,
        }
    }
}

impl FlexConfig {
    pub fn to_params(&self, horizon: usize) -> Result<FlexLoadParams, DataError> {
        Ok(FlexLoadParams {
            p_min: self.p_min.expand("flex.p_min", horizon)?,
            p_max: self.p_max.expand("flex.p_max", horizon)?,
            p_ref: self.p_ref.expand("flex.p_ref", horizon)?,
            beta_f: self.beta_f,
        })
    }
}

/// Device parameters shared by every agent unless overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentDefaults {
    /// Grid connection limit, kW.
    pub grid_cap: f64,
    pub hvac: HvacParams,
    pub flex: FlexConfig,
}

impl Default for AgentDefaults {
    fn default() -> Self {
        Self { grid_cap: 20.0, hvac: HvacParams::default(), flex: FlexConfig::default() }
    }
}

/// One agent entry; omitted keys come from `[defaults]` and `[tariff]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub id: u32,
    /// Profile agent id to read series from; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_cap: Option<f64>,
    /// Partial overrides of the tariff table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tariff: Option<toml::Table>,
    /// Partial overrides of the HVAC table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hvac: Option<toml::Table>,
    /// Partial overrides of the flexible-load table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flex: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilesConfig {
    /// CSV path, relative to the scenario file.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Number of generated agents.
    pub agents: usize,
    pub mix: ArchetypeMix,
    pub params: SynthParams,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { agents: 10, mix: ArchetypeMix::default(), params: SynthParams::default() }
    }
}

/// Communication graph choice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologyConfig {
    #[default]
    Complete,
    Star {
        #[serde(default)]
        hub: usize,
    },
    Ring {
        /// Neighbours per agent, even.
        #[serde(default = "default_ring_k")]
        k: usize,
    },
    /// Undirected edge list with Metropolis weights.
    Edges { edges: Vec<(usize, usize)> },
    /// Dense weight rows; the graph is read from the nonzero off-diagonal entries.
    Explicit { weights: Vec<Vec<f64>> },
}

fn default_ring_k() -> usize {
    2
}

impl TopologyConfig {
    /// Builds the graph and its consensus weights for `n` agents.
    pub fn build(&self, n: usize) -> Result<(Topology, WeightMatrix), DataError> {
        let graph = match self {
            TopologyConfig::Complete => topology::complete(n),
            TopologyConfig::Star { hub } => topology::star(n, *hub),
            TopologyConfig::Ring { k } => topology::nearest_k_ring(n, *k),
            TopologyConfig::Edges { edges } => Topology::from_edges(n, edges),
            TopologyConfig::Explicit { weights } => {
                let edges: Vec<(usize, usize)> = weights
                    .iter()
                    .enumerate()
                    .flat_map(|(i, row)| {
                        row.iter()
                            .enumerate()
                            .filter(move |&(j, &v)| j > i && v != 0.0)
                            .map(move |(j, _)| (i, j))
                    })
                    .collect();
                let graph = Topology::from_edges(n, &edges).map_err(topology_error)?;
                let w = WeightMatrix::from_dense(&graph, weights.clone()).map_err(topology_error)?;
                return Ok((graph, w));
            }
        }
        .map_err(topology_error)?;
        let w = topology::metropolis_weights(&graph).map_err(topology_error)?;
        Ok((graph, w))
    }
}

fn topology_error(e: topology::TopologyError) -> DataError {
    DataError::Config(format!("topology: {e}"))
}

impl fmt::Display for TopologyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyConfig::Complete => write!(f, "complete"),
            TopologyConfig::Star { hub } => write!(f, "star:{hub}"),
            TopologyConfig::Ring { k } => write!(f, "ring:{k}"),
            TopologyConfig::Edges { edges } => write!(f, "edges({})", edges.len()),
            TopologyConfig::Explicit { .. } => write!(f, "explicit"),
        }
    }
}

/// Parses `complete`, `star[:hub]` or `ring[:k]`.
impl FromStr for TopologyConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let number = |default: usize| -> Result<usize, String> {
            arg.map_or(Ok(default), |a| a.parse().map_err(|_| format!("invalid number '{a}' in '{s}'")))
        };
        match kind {
            "complete" if arg.is_none() => Ok(TopologyConfig::Complete),
            "star" => Ok(TopologyConfig::Star { hub: number(0)? }),
            "ring" => Ok(TopologyConfig::Ring { k: number(2)? }),
            _ => Err(format!("unknown topology '{s}', expected complete, star[:hub] or ring[:k]")),
        }
    }
}

/// Learning rate: a number, or `"auto"` for half the mean grid-cost slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Epsilon {
    Fixed(f64),
    Named(EpsilonRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsilonRule {
    Auto,
}

impl FromStr for Epsilon {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "auto" {
            return Ok(Epsilon::Named(EpsilonRule::Auto));
        }
        s.parse().map(Epsilon::Fixed).map_err(|_| format!("invalid epsilon '{s}'"))
    }
}

/// Consensus settings in scenario form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusSection {
    /// $/kWh per kW of mismatch, or "auto".
    pub epsilon: Epsilon,
    /// Per-agent price-change tolerance, $/kWh (2-norm over slots).
    pub tol_lambda: f64,
    /// Per-agent mismatch tolerance, kW (2-norm over slots).
    pub tol_e: f64,
    /// Pool imbalance tolerance per slot, kW.
    pub clearing_tol: f64,
    pub max_rounds: usize,
    /// Initial price, $/kWh; each agent's base grid price when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_init: Option<Series>,
    /// Worker threads; all cores when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl Default for ConsensusSection {
    fn default() -> Self {
        let d = ConsensusConfig::default();
        Self {
            epsilon: Epsilon::Fixed(d.epsilon),
            tol_lambda: d.tol_lambda,
            tol_e: d.tol_e,
            clearing_tol: d.clearing_tol,
            max_rounds: d.max_rounds,
            lambda_init: None,
            threads: None,
        }
    }
}

/// Whole scenario file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Seed of the synthetic profile generator.
    pub seed: u64,
    pub horizon: HorizonConfig,
    pub tariff: TariffModel,
    pub defaults: AgentDefaults,
    /// Explicit agents; one agent per profile when empty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub agents: Vec<AgentConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profiles: Option<ProfilesConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    pub topology: TopologyConfig,
    pub consensus: ConsensusSection,
    pub solver: SolverConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<Epsilon>,
    pub topology: Option<TopologyConfig>,
    pub max_rounds: Option<usize>,
    pub threads: Option<usize>,
}

/// Everything a run needs, resolved and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioBundle {
    pub specs: Vec<ProsumerSpec>,
    pub topology: Topology,
    pub weights: WeightMatrix,
    pub consensus: ConsensusConfig,
    pub solver: SolverConfig,
    pub seed: u64,
    /// Effective configuration after overrides.
    pub config: ScenarioConfig,
}

fn merge<T: Serialize + for<'de> Deserialize<'de>>(
    base: &T,
    patch: Option<&toml::Table>,
    what: &str,
) -> Result<T, DataError> {
    let mut table = match toml::Value::try_from(base) {
        Ok(toml::Value::Table(t)) => t,
        Ok(_) => return Err(DataError::Config(format!("{what} is not a table"))),
        Err(e) => return Err(DataError::Config(format!("{what}: {e}"))),
    };
    for (k, v) in patch.into_iter().flatten() {
        table.insert(k.clone(), v.clone());
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| DataError::Config(format!("{what}: {e}")))
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, DataError> {
        toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, DataError> {
        toml::to_string_pretty(self).map_err(|e| DataError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(eps) = o.epsilon {
            self.consensus.epsilon = eps;
        }
        if let Some(topo) = &o.topology {
            self.topology = topo.clone();
        }
        if let Some(m) = o.max_rounds {
            self.consensus.max_rounds = m;
        }
        if let Some(t) = o.threads {
            self.consensus.threads = Some(t);
        }
    }

    /// Reads the profile source; relative paths resolve against `base_dir`.
    pub fn profiles(&self, base_dir: &Path) -> Result<ProfileTable, DataError> {
        let h = self.horizon.slots;
        match (&self.profiles, &self.synthetic) {
            (Some(_), Some(_)) => Err(DataError::Config("set either [profiles] or [synthetic], not both".into())),
            (Some(p), None) => load_profiles(&base_dir.join(&p.path), h),
            (None, Some(s)) => Ok(synth_profiles(self.seed, s.agents, h, s.mix, &s.params)),
            (None, None) => Err(DataError::Config("no profile source: add [profiles] or [synthetic]".into())),
        }
    }

    /// Resolves agents, topology and run settings.
    pub fn resolve(&self, base_dir: &Path) -> Result<ScenarioBundle, DataError> {
        let table = self.profiles(base_dir)?;
        self.resolve_with(&table)
    }

    /// As [`resolve`](Self::resolve) with an already loaded profile table.
    pub fn resolve_with(&self, table: &ProfileTable) -> Result<ScenarioBundle, DataError> {
        let h = self.horizon.slots;
        if h == 0 || !(self.horizon.slot_duration_h > 0.0) {
            return Err(DataError::Config("horizon needs at least one slot of positive length".into()));
        }
        table.validate(h)?;
        let entries: Vec<AgentConfig> = if self.agents.is_empty() {
            table
                .agents
                .iter()
                .map(|a| AgentConfig { id: a.agent_id, profile: None, grid_cap: None, tariff: None, hvac: None, flex: None })
                .collect()
        } else {
            self.agents.clone()
        };
        if entries.is_empty() {
            return Err(DataError::Config("scenario has no agents".into()));
        }
        let mut specs = Vec::with_capacity(entries.len());
        for a in &entries {
            if specs.iter().any(|s: &ProsumerSpec| s.id == a.id) {
                return Err(DataError::Config(format!("duplicate agent id {}", a.id)));
            }
            let pid = a.profile.unwrap_or(a.id);
            let profile = table
                .get(pid)
                .ok_or_else(|| DataError::Config(format!("agent {}: no profile for id {pid}", a.id)))?;
            let what = |s: &str| format!("agent {} {s}", a.id);
            let flex: FlexConfig = merge(&self.defaults.flex, a.flex.as_ref(), &what("flex"))?;
            let spec = ProsumerSpec {
                id: a.id,
                grid_cap: a.grid_cap.unwrap_or(self.defaults.grid_cap),
                renewable_avail: profile.renewable_kw.clone(),
                inflexible: profile.load_kw.clone(),
                outdoor_temp: profile.outdoor_temp_c.clone(),
                hvac: merge(&self.defaults.hvac, a.hvac.as_ref(), &what("hvac"))?,
                flex: flex.to_params(h)?,
                tariff: merge(&self.tariff, a.tariff.as_ref(), &what("tariff"))?,
            };
            spec.validate().map_err(|e| DataError::Config(format!("agent {}: {e}", a.id)))?;
            specs.push(spec);
        }
        let (topology, weights) = self.topology.build(specs.len())?;
        let c = &self.consensus;
        let consensus = ConsensusConfig {
            epsilon: match c.epsilon {
                Epsilon::Fixed(v) => v,
                Epsilon::Named(EpsilonRule::Auto) => auto_epsilon(&specs),
            },
            tol_lambda: c.tol_lambda,
            tol_e: c.tol_e,
            clearing_tol: c.clearing_tol,
            max_rounds: c.max_rounds,
            lambda_init: c.lambda_init.as_ref().map(|s| s.expand("consensus.lambda_init", h)).transpose()?,
            threads: c.threads,
        };
        consensus.validate().map_err(|e| DataError::Config(e.to_string()))?;
        let s = &self.solver;
        if !(s.qp_tol > 0.0) || s.max_qp_iter == 0 || !(s.regularization >= 0.0) {
            return Err(DataError::Config("solver settings must be positive".into()));
        }
        Ok(ScenarioBundle {
            specs,
            topology,
            weights,
            consensus,
            solver: self.solver,
            seed: self.seed,
            config: self.clone(),
        })
    }
}

/// Loads a scenario file, applies overrides and resolves it.
pub fn load_scenario(path: &Path, overrides: &Overrides) -> Result<ScenarioBundle, DataError> {
    let mut config = ScenarioConfig::load(path)?;
    config.apply(overrides);
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    config.resolve(&base)
}
