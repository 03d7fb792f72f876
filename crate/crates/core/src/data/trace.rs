//! Line-delimited JSON run traces: a header, one line per round, a summary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, FORMAT_VERSION};
use crate::consensus::{RoundRecord, RunTrace};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum TraceLine {
    Header { format_version: u32 },
    Round(RoundRecord),
    Summary { converged: bool, rounds_used: usize, wall_time_s: f64 },
}

pub fn write_trace_to(trace: &RunTrace, writer: impl Write) -> Result<(), DataError> {
    let mut w = BufWriter::new(writer);
    let mut line = |record: &TraceLine| -> Result<(), DataError> {
        serde_json::to_writer(&mut w, record).map_err(|e| DataError::Json { line: 0, message: e.to_string() })?;
        w.write_all(b"\n").map_err(|e| DataError::io("<trace>", e))
    };
    line(&TraceLine::Header { format_version: FORMAT_VERSION })?;
    for r in &trace.rounds {
        line(&TraceLine::Round(r.clone()))?;
    }
    line(&TraceLine::Summary {
        converged: trace.converged,
        rounds_used: trace.rounds_used,
        wall_time_s: trace.wall_time_s,
    })?;
    w.flush().map_err(|e| DataError::io("<trace>", e))
}

pub fn read_trace_from(reader: impl BufRead) -> Result<RunTrace, DataError> {
    let mut trace = RunTrace::default();
    let mut header = false;
    let mut summary = false;
    for (i, text) in reader.lines().enumerate() {
        let line = i + 1;
        let text = text.map_err(|e| DataError::io("<trace>", e))?;
        if text.trim().is_empty() {
            continue;
        }
        if !header {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| DataError::Json { line, message: e.to_string() })?;
            let found = value.get("format_version").and_then(serde_json::Value::as_u64);
            if found != Some(FORMAT_VERSION as u64) {
                return Err(DataError::Version { found: found.map(|v| v.to_string()), expected: FORMAT_VERSION });
            }
        }
        let record: TraceLine =
            serde_json::from_str(&text).map_err(|e| DataError::Json { line, message: e.to_string() })?;
        match (record, header, summary) {
            (TraceLine::Header { .. }, false, _) => header = true,
            (TraceLine::Round(r), true, false) => trace.rounds.push(r),
            (TraceLine::Summary { converged, rounds_used, wall_time_s }, true, false) => {
                trace.converged = converged;
                trace.rounds_used = rounds_used;
                trace.wall_time_s = wall_time_s;
                summary = true;
            }
            _ => return Err(DataError::Json { line, message: "record out of order".into() }),
        }
    }
    if !summary {
        return Err(DataError::Json { line: 0, message: "trace has no summary record".into() });
    }
    Ok(trace)
}

pub fn write_trace(trace: &RunTrace, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    write_trace_to(trace, file)
}

pub fn read_trace(path: &Path) -> Result<RunTrace, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    read_trace_from(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_trace(seed: u64) -> RunTrace {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, h) = (3, 4);
        let mut v = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.gen_range(-1e3..1e3) / 7.0).collect() };
        let rounds = (1..=5)
            .map(|round| RoundRecord {
                round,
                lambda: (0..n).map(|_| v(h)).collect(),
                e_norm: v(n),
                mismatch: v(h),
                objective: v(n),
                tracking_error: v(1)[0].abs() * 1e-15,
            })
            .collect();
        RunTrace { rounds, converged: true, rounds_used: 5, wall_time_s: 0.123456789 }
    }

    #[test]
    fn round_trip_is_exact() {
        for seed in 0..5 {
            let trace = random_trace(seed);
            let mut buf = Vec::new();
            write_trace_to(&trace, &mut buf).unwrap();
            assert_eq!(read_trace_from(buf.as_slice()).unwrap(), trace);
        }
    }

    #[test]
    fn empty_trace_is_valid() {
        let trace = RunTrace::default();
        let mut buf = Vec::new();
        write_trace_to(&trace, &mut buf).unwrap();
        assert_eq!(read_trace_from(buf.as_slice()).unwrap(), trace);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let mut buf = Vec::new();
        write_trace_to(&RunTrace::default(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace(
            &format!("\"format_version\":{FORMAT_VERSION}"),
            "\"format_version\":999",
        );
        match read_trace_from(text.as_bytes()) {
            Err(DataError::Version { found, expected }) => {
                assert_eq!(found.as_deref(), Some("999"));
                assert_eq!(expected, FORMAT_VERSION);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_trace_is_rejected() {
        let mut buf = Vec::new();
        write_trace_to(&random_trace(1), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(read_trace_from(cut.as_bytes()).is_err());
    }
}
