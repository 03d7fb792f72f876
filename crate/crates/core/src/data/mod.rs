//! Profile ingestion, synthetic profiles, scenario files, traces and reports.

use std::path::Path;

use thiserror::Error;

pub mod profiles;
pub mod report;
pub mod scenario;
pub mod synth;
pub mod trace;

pub use profiles::{load_profiles, write_profiles, AgentProfile, ProfileTable};
pub use report::{read_report, write_report, Mode, Reduction, Report, RunSummary};
pub use scenario::{load_scenario, Overrides, ScenarioBundle, ScenarioConfig, TopologyConfig};
pub use synth::{synth_profiles, ArchetypeMix, SynthParams};
pub use trace::{read_trace, write_trace};

/// Version written into every trace and report file.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("invalid {column} at {location}: {reason}")]
    Schema { location: String, column: String, reason: String },
    #[error("agent {agent} is missing slot {slot}")]
    MissingSlot { agent: u32, slot: usize },
    #[error("agent {agent} has {got} slots, expected {expected}")]
    Horizon { agent: u32, expected: usize, got: usize },
    #[error("invalid JSON record at line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("incompatible format version {}, expected {expected}", found.as_deref().unwrap_or("(missing)"))]
    Version { found: Option<String>, expected: u32 },
    #[error("invalid scenario: {0}")]
    Config(String),
}

impl DataError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        DataError::Io { path: path.as_ref().display().to_string(), source }
    }
}
