//! Standalone vs. coordinated cost reports with plot-ready series.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, FORMAT_VERSION};
use crate::consensus::RunTrace;
use crate::model::Schedule;

/// Standalone costs at or below this are treated as zero.
pub const ZERO_COST: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NotApplicable {
    #[serde(rename = "n/a")]
    Na,
}

/// Percentage reduction `100 (1 - coordinated / standalone)`, or "n/a".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Reduction {
    Percent(f64),
    NotApplicable(NotApplicable),
}

impl Reduction {
    pub fn of(standalone: f64, coordinated: f64) -> Self {
        if standalone.abs() <= ZERO_COST {
            Reduction::NotApplicable(NotApplicable::Na)
        } else {
            Reduction::Percent(100.0 * (1.0 - coordinated / standalone))
        }
    }

    pub fn percent(&self) -> Option<f64> {
        match self {
            Reduction::Percent(p) => Some(*p),
            Reduction::NotApplicable(_) => None,
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Reduction::Percent(p) => write!(f, "{p:.2}%"),
            Reduction::NotApplicable(_) => write!(f, "n/a"),
        }
    }
}

/// Costs of one agent; a mode that was not run is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCosts {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standalone: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinated: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_pct: Option<Reduction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemCosts {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standalone_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coordinated_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduction_pct: Option<Reduction>,
}

/// Outcome of a consensus run. Wall time is kept out so reports stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub converged: bool,
    pub rounds_used: usize,
    /// Learning rate actually used.
    pub epsilon: f64,
    /// Largest final pool imbalance over slots, kW.
    pub clearing_residual_kw: f64,
}

/// Named data series, optionally tied to one agent or one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub agents: Vec<AgentCosts>,
    pub system: Option<SystemCosts>,
    pub run: Option<RunSummary>,
    pub series: Vec<SeriesRecord>,
}

/// Which cost columns a report carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Standalone,
    Coordinated,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Standalone => "standalone",
            Mode::Coordinated => "coordinated",
        }
    }
}

fn check_lengths(ids: &[u32], costs: &[&[f64]]) -> Result<(), DataError> {
    match costs.iter().find(|c| c.len() != ids.len()) {
        Some(c) => Err(DataError::Config(format!(
            "report needs {} costs per mode, got {}",
            ids.len(),
            c.len()
        ))),
        None => Ok(()),
    }
}

impl Report {
    /// Costs of a single mode.
    pub fn single(mode: Mode, ids: &[u32], costs: &[f64]) -> Result<Self, DataError> {
        check_lengths(ids, &[costs])?;
        let pick = |c: f64| match mode {
            Mode::Standalone => (Some(c), None),
            Mode::Coordinated => (None, Some(c)),
        };
        let agents = ids
            .iter()
            .zip(costs)
            .map(|(&id, &c)| {
                let (standalone, coordinated) = pick(c);
                AgentCosts { id, standalone, coordinated, reduction_pct: None }
            })
            .collect();
        let (standalone_total, coordinated_total) = pick(costs.iter().sum());
        Ok(Self {
            agents,
            system: Some(SystemCosts { standalone_total, coordinated_total, reduction_pct: None }),
            ..Self::default()
        })
    }

    /// Per-agent and system cost comparison.
    pub fn costs(ids: &[u32], standalone: &[f64], coordinated: &[f64]) -> Result<Self, DataError> {
        check_lengths(ids, &[standalone, coordinated])?;
        let agents = ids
            .iter()
            .zip(standalone.iter().zip(coordinated))
            .map(|(&id, (&s, &c))| AgentCosts {
                id,
                standalone: Some(s),
                coordinated: Some(c),
                reduction_pct: Some(Reduction::of(s, c)),
            })
            .collect();
        let (s, c) = (standalone.iter().sum::<f64>(), coordinated.iter().sum::<f64>());
        Ok(Self {
            agents,
            system: Some(SystemCosts {
                standalone_total: Some(s),
                coordinated_total: Some(c),
                reduction_pct: Some(Reduction::of(s, c)),
            }),
            ..Self::default()
        })
    }

    pub fn push_series(&mut self, name: &str, agent: Option<u32>, slot: Option<usize>, values: Vec<f64>) {
        self.series.push(SeriesRecord { name: name.into(), agent, slot, values });
    }

    /// Every per-agent schedule series of one mode.
    pub fn push_schedules(&mut self, mode: Mode, ids: &[u32], schedules: &[Schedule]) {
        let m = mode.name();
        for (&id, s) in ids.iter().zip(schedules) {
            self.push_series(&format!("{m}.grid_kw"), Some(id), None, s.p_g.clone());
            self.push_series(&format!("{m}.renewable_kw"), Some(id), None, s.p_re.clone());
            self.push_series(&format!("{m}.hvac_kw"), Some(id), None, s.p_ac.clone());
            self.push_series(&format!("{m}.flex_kw"), Some(id), None, s.p_f.clone());
            if mode == Mode::Coordinated {
                self.push_series(&format!("{m}.trade_kw"), Some(id), None, s.p_et.clone());
            }
            self.push_series(&format!("{m}.indoor_temp_c"), Some(id), None, s.t_in.clone());
        }
    }

    /// Round-by-round consensus series: mean price per slot and pool imbalance.
    pub fn push_trace(&mut self, trace: &RunTrace) {
        let h = trace.rounds.first().map_or(0, |r| r.mismatch.len());
        for t in 0..h {
            let mean: Vec<f64> = trace
                .rounds
                .iter()
                .map(|r| r.lambda.iter().map(|l| l[t]).sum::<f64>() / r.lambda.len() as f64)
                .collect();
            self.push_series("rounds.mean_price", None, Some(t), mean);
        }
        let worst: Vec<f64> = trace
            .rounds
            .iter()
            .map(|r| r.mismatch.iter().fold(0.0f64, |m, x| m.max(x.abs())))
            .collect();
        self.push_series("rounds.max_abs_mismatch_kw", None, None, worst);
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "section", rename_all = "snake_case")]
enum ReportLine {
    Header { format_version: u32 },
    Agent(AgentCosts),
    System(SystemCosts),
    Run(RunSummary),
    Series(SeriesRecord),
}

pub fn write_report_to(report: &Report, writer: impl Write) -> Result<(), DataError> {
    let mut w = BufWriter::new(writer);
    let mut line = |record: ReportLine| -> Result<(), DataError> {
        serde_json::to_writer(&mut w, &record).map_err(|e| DataError::Json { line: 0, message: e.to_string() })?;
        w.write_all(b"\n").map_err(|e| DataError::io("<report>", e))
    };
    line(ReportLine::Header { format_version: FORMAT_VERSION })?;
    for a in &report.agents {
        line(ReportLine::Agent(a.clone()))?;
    }
    if let Some(s) = &report.system {
        line(ReportLine::System(s.clone()))?;
    }
    if let Some(r) = &report.run {
        line(ReportLine::Run(r.clone()))?;
    }
    for s in &report.series {
        line(ReportLine::Series(s.clone()))?;
    }
    w.flush().map_err(|e| DataError::io("<report>", e))
}

pub fn read_report_from(reader: impl BufRead) -> Result<Report, DataError> {
    let mut report = Report::default();
    let mut header = false;
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text.map_err(|e| DataError::io("<report>", e))?;
        if text.trim().is_empty() {
            continue;
        }
        let record: ReportLine = serde_json::from_str(&text).map_err(|e| DataError::Json { line, message: e.to_string() })?;
        match record {
            ReportLine::Header { format_version } if !header => {
                if format_version != FORMAT_VERSION {
                    return Err(DataError::Version { found: Some(format_version.to_string()), expected: FORMAT_VERSION });
                }
                header = true;
            }
            _ if !header => return Err(DataError::Version { found: None, expected: FORMAT_VERSION }),
            ReportLine::Header { .. } => return Err(DataError::Json { line, message: "duplicate header".into() }),
            ReportLine::Agent(a) => report.agents.push(a),
            ReportLine::System(s) => report.system = Some(s),
            ReportLine::Run(r) => report.run = Some(r),
            ReportLine::Series(s) => report.series.push(s),
        }
    }
    Ok(report)
}

pub fn write_report(report: &Report, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_report_to(report, file)
}

pub fn read_report(path: &Path) -> Result<Report, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_report_from(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn twenty_percent() {
        let r = Report::costs(&[0], &[10.0], &[8.0]).unwrap();
        let pct = r.agents[0].reduction_pct.unwrap();
        assert_eq!(pct.to_string(), "20.00%");
        assert!((pct.percent().unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn equal_costs_give_zero() {
        let costs = [3.0, 1.5, 7.25];
        let r = Report::costs(&[0, 1, 2], &costs, &costs).unwrap();
        for a in &r.agents {
            assert_eq!(a.reduction_pct.unwrap().to_string(), "0.00%");
        }
        assert_eq!(r.system.unwrap().reduction_pct, Some(Reduction::Percent(0.0)));
    }

    #[test]
    fn system_reduction_uses_totals() {
        let (s, c) = ([10.0, 30.0, 0.0], [9.0, 20.0, -1.0]);
        let r = Report::costs(&[1, 2, 3], &s, &c).unwrap();
        let expected = 100.0 * (1.0 - 28.0 / 40.0);
        assert!((r.system.as_ref().unwrap().reduction_pct.unwrap().percent().unwrap() - expected).abs() < 1e-12);
        assert_eq!(r.agents[2].reduction_pct.unwrap().to_string(), "n/a");
        assert!(Report::costs(&[1], &s, &c).is_err());
    }

    #[test]
    fn round_trip_and_na_encoding() {
        let mut r = Report::costs(&[4, 5], &[0.0, 2.0 / 3.0], &[0.0, 0.1]).unwrap();
        r.push_series("price", None, Some(3), vec![0.1, 0.2 + 0.1]);
        r.run = Some(RunSummary { converged: true, rounds_used: 17, epsilon: 0.005, clearing_residual_kw: 1e-7 / 3.0 });
        let mut buf = Vec::new();
        write_report_to(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("\"reduction_pct\":\"n/a\""));
        assert!(text.starts_with(&format!("{{\"section\":\"header\",\"format_version\":{FORMAT_VERSION}}}")));
        assert_eq!(read_report_from(buf.as_slice()).unwrap(), r);
    }

    #[test]
    fn single_mode_omits_other_columns() {
        let r = Report::single(Mode::Standalone, &[1, 2], &[1.5, 2.5]).unwrap();
        assert_eq!(r.system.as_ref().unwrap().standalone_total, Some(4.0));
        assert!(r.agents.iter().all(|a| a.coordinated.is_none() && a.reduction_pct.is_none()));
        let mut buf = Vec::new();
        write_report_to(&r, &mut buf).unwrap();
        assert!(!String::from_utf8(buf.clone()).unwrap().contains("coordinated"));
        assert_eq!(read_report_from(buf.as_slice()).unwrap(), r);
        assert!(Report::single(Mode::Coordinated, &[1], &[]).is_err());
    }
}
