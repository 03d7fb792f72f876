//! Per-agent exogenous series stored as CSV.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// CSV header, in column order.
pub const PROFILE_COLUMNS: [&str; 5] = ["agent_id", "slot", "load_kw", "renewable_kw", "outdoor_temp_c"];

/// Exogenous series of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub agent_id: u32,
    /// Inflexible load per slot, kW.
    pub load_kw: Vec<f64>,
    /// Available renewable generation per slot, kW.
    pub renewable_kw: Vec<f64>,
    /// Outdoor temperature per slot, °C.
    pub outdoor_temp_c: Vec<f64>,
}

impl AgentProfile {
    pub fn horizon(&self) -> usize {
        self.load_kw.len()
    }
}

/// Profiles of all agents, ordered by agent id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileTable {
    pub agents: Vec<AgentProfile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    agent_id: u32,
    slot: usize,
    load_kw: f64,
    renewable_kw: f64,
    outdoor_temp_c: f64,
}

impl ProfileTable {
    pub fn rows(&self) -> usize {
        self.agents.iter().map(AgentProfile::horizon).sum()
    }

    pub fn get(&self, agent_id: u32) -> Option<&AgentProfile> {
        self.agents.iter().find(|a| a.agent_id == agent_id)
    }

    /// Checks finiteness, sign, and that every agent has exactly `horizon` slots.
    pub fn validate(&self, horizon: usize) -> Result<(), DataError> {
        for a in &self.agents {
            let series = [
                ("load_kw", &a.load_kw),
                ("renewable_kw", &a.renewable_kw),
                ("outdoor_temp_c", &a.outdoor_temp_c),
            ];
            for (column, values) in series {
                if values.len() != horizon {
                    return Err(DataError::Horizon { agent: a.agent_id, expected: horizon, got: values.len() });
                }
                for (slot, &v) in values.iter().enumerate() {
                    check_value(column, v).map_err(|reason| DataError::Schema {
                        location: format!("agent {} slot {slot}", a.agent_id),
                        column: column.into(),
                        reason,
                    })?;
                }
            }
        }
        Ok(())
    }
}

fn check_value(column: &str, v: f64) -> Result<(), String> {
    if !v.is_finite() {
        return Err(format!("value {v} is not finite"));
    }
    if column != "outdoor_temp_c" && v < 0.0 {
        return Err(format!("value {v} is negative"));
    }
    Ok(())
}

/// Parses a profile CSV from any reader and validates it against `horizon`.
pub fn read_profiles(reader: impl Read, horizon: usize) -> Result<ProfileTable, DataError> {
    let mut csv = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = csv.headers().map_err(|e| csv_error(&e))?.clone();
    let found: Vec<&str> = header.iter().collect();
    if found != PROFILE_COLUMNS {
        return Err(DataError::Parse {
            line: 1,
            message: format!("expected header {}, found {}", PROFILE_COLUMNS.join(","), found.join(",")),
        });
    }
    let mut slots: BTreeMap<u32, BTreeMap<usize, (f64, f64, f64)>> = BTreeMap::new();
    for record in csv.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record.deserialize(Some(&header)).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        for (column, v) in [
            ("load_kw", row.load_kw),
            ("renewable_kw", row.renewable_kw),
            ("outdoor_temp_c", row.outdoor_temp_c),
        ] {
            check_value(column, v).map_err(|reason| DataError::Schema {
                location: format!("line {line}"),
                column: column.into(),
                reason,
            })?;
        }
        if row.slot >= horizon {
            return Err(DataError::Schema {
                location: format!("line {line}"),
                column: "slot".into(),
                reason: format!("slot {} outside horizon {horizon}", row.slot),
            });
        }
        let entry = slots.entry(row.agent_id).or_default();
        if entry.insert(row.slot, (row.load_kw, row.renewable_kw, row.outdoor_temp_c)).is_some() {
            return Err(DataError::Schema {
                location: format!("line {line}"),
                column: "slot".into(),
                reason: format!("duplicate slot {} for agent {}", row.slot, row.agent_id),
            });
        }
    }
    let mut agents = Vec::with_capacity(slots.len());
    for (agent_id, by_slot) in slots {
        if let Some(missing) = (0..horizon).find(|t| !by_slot.contains_key(t)) {
            return Err(DataError::MissingSlot { agent: agent_id, slot: missing });
        }
        let values: Vec<_> = by_slot.into_values().collect();
        agents.push(AgentProfile {
            agent_id,
            load_kw: values.iter().map(|v| v.0).collect(),
            renewable_kw: values.iter().map(|v| v.1).collect(),
            outdoor_temp_c: values.iter().map(|v| v.2).collect(),
        });
    }
    Ok(ProfileTable { agents })
}

fn csv_error(e: &csv::Error) -> DataError {
    DataError::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

/// Loads and validates a profile CSV file.
pub fn load_profiles(path: &Path, horizon: usize) -> Result<ProfileTable, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_profiles(file, horizon)
}

/// Writes the table as CSV, one row per agent and slot.
pub fn write_profiles_to(table: &ProfileTable, writer: impl Write) -> Result<(), DataError> {
    let mut csv = csv::Writer::from_writer(writer);
    for a in &table.agents {
        for t in 0..a.horizon() {
            csv.serialize(Row {
                agent_id: a.agent_id,
                slot: t,
                load_kw: a.load_kw[t],
                renewable_kw: a.renewable_kw[t],
                outdoor_temp_c: a.outdoor_temp_c[t],
            })
            .map_err(|e| csv_error(&e))?;
        }
    }
    csv.flush().map_err(|e| DataError::Io { path: String::new(), source: e })
}

pub fn write_profiles(table: &ProfileTable, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_profiles_to(table, file)
}
