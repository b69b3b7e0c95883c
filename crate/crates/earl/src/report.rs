//! Trace persistence and reporting.
//!
//! Runs stream one JSON object per line into the trace file; reporting
//! reads it back, writes per-step and aggregated CSVs, and prints a
//! run summary. Blank trace lines are tolerated, anything else
//! malformed is an error that names the line.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::dispatch::DispatchStrategy;
use crate::orchestrator::TraceRow;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Row {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path) -> impl Fn(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Appends trace rows to a file as JSON lines, flushing per row so a
/// crashed run keeps everything it completed.
pub struct TraceWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self, ReportError> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(TraceWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write_row(&mut self, row: &TraceRow) -> io::Result<()> {
        let mut line = serde_json::to_string(row).expect("trace rows serialize");
        line.push('\n');
        self.out.write_all(line.as_bytes())?;
        self.out.flush()
    }

    pub fn finish(mut self) -> Result<(), ReportError> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Reads a JSONL trace back, naming the offending line on parse errors.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, ReportError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TraceRow = serde_json::from_str(&line).map_err(|e| ReportError::Row {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn strategy_name(strategy: DispatchStrategy) -> &'static str {
    match strategy {
        DispatchStrategy::GatherScatter => "gather_scatter",
        DispatchStrategy::AllToAll => "all_to_all",
    }
}

/// One row per step, flat CSV mirror of the trace.
pub fn write_steps_csv(path: &Path, rows: &[TraceRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })?;
    for row in rows {
        w.serialize(row).map_err(|e| ReportError::Io {
            path: path.to_path_buf(),
            source: io::Error::other(e),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Aggregate over (strategy, power-of-two context bucket).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub strategy: &'static str,
    /// Smallest power of two at or above the step's average context
    /// length; steps with equal ceilings aggregate together.
    pub context_ceiling: u64,
    pub steps: u64,
    pub switches: u64,
    pub oom_events: u64,
    pub mean_tgs: f64,
    pub mean_dispatch_latency_s: f64,
    pub mean_step_time_s: f64,
    pub total_dispatch_bytes: u64,
}

pub fn context_ceiling(avg_context_len: f64) -> u64 {
    let len = avg_context_len.ceil().max(1.0) as u64;
    len.next_power_of_two()
}

/// Groups steps by strategy and context ceiling, ordered by both.
pub fn aggregate(rows: &[TraceRow]) -> Vec<AggregateRow> {
    use std::collections::BTreeMap;
    struct Acc {
        steps: u64,
        switches: u64,
        oom_events: u64,
        tgs_sum: f64,
        dispatch_sum: f64,
        step_time_sum: f64,
        bytes: u64,
    }
    let mut groups: BTreeMap<(&'static str, u64), Acc> = BTreeMap::new();
    for row in rows {
        let key = (strategy_name(row.strategy), context_ceiling(row.avg_context_len));
        let acc = groups.entry(key).or_insert(Acc {
            steps: 0,
            switches: 0,
            oom_events: 0,
            tgs_sum: 0.0,
            dispatch_sum: 0.0,
            step_time_sum: 0.0,
            bytes: 0,
        });
        acc.steps += 1;
        acc.switches += row.switched as u64;
        acc.oom_events += row.oom_event as u64;
        acc.tgs_sum += row.tgs;
        acc.dispatch_sum += row.dispatch_latency_s;
        acc.step_time_sum += row.step_time_s;
        acc.bytes += row.dispatch_total_bytes;
    }
    groups
        .into_iter()
        .map(|((strategy, ceiling), acc)| AggregateRow {
            strategy,
            context_ceiling: ceiling,
            steps: acc.steps,
            switches: acc.switches,
            oom_events: acc.oom_events,
            mean_tgs: acc.tgs_sum / acc.steps as f64,
            mean_dispatch_latency_s: acc.dispatch_sum / acc.steps as f64,
            mean_step_time_s: acc.step_time_sum / acc.steps as f64,
            total_dispatch_bytes: acc.bytes,
        })
        .collect()
}

pub fn write_aggregate_csv(path: &Path, rows: &[TraceRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| ReportError::Io {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    })?;
    for row in aggregate(rows) {
        w.serialize(&row).map_err(|e| ReportError::Io {
            path: path.to_path_buf(),
            source: io::Error::other(e),
        })?;
    }
    w.flush().map_err(io_err(path))
}

/// Headline numbers for terminal output.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub steps: usize,
    pub switches: u64,
    pub oom_events: u64,
    pub total_step_time_s: f64,
    pub total_dispatch_bytes: u64,
    pub mean_tgs: f64,
    pub final_config: Option<(u32, u32)>,
}

pub fn summarize(rows: &[TraceRow]) -> Summary {
    let completed: Vec<&TraceRow> = rows.iter().filter(|r| !r.oom_event).collect();
    let mean_tgs = if completed.is_empty() {
        0.0
    } else {
        completed.iter().map(|r| r.tgs).sum::<f64>() / completed.len() as f64
    };
    Summary {
        steps: rows.len(),
        switches: rows.iter().filter(|r| r.switched).count() as u64,
        oom_events: rows.iter().filter(|r| r.oom_event).count() as u64,
        total_step_time_s: rows.iter().map(|r| r.step_time_s).sum(),
        total_dispatch_bytes: rows.iter().map(|r| r.dispatch_total_bytes).sum(),
        mean_tgs,
        final_config: rows.last().map(|r| (r.tensor_parallel, r.data_parallel)),
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "steps: {}  switches: {}  oom events: {}",
            self.steps, self.switches, self.oom_events
        )?;
        writeln!(
            f,
            "total step time: {:.3} s  mean throughput: {:.1} tokens/s per worker",
            self.total_step_time_s, self.mean_tgs
        )?;
        write!(f, "dispatched: {} bytes", self.total_dispatch_bytes)?;
        if let Some((tp, dp)) = self.final_config {
            write!(f, "  final configuration: TP{tp}xDP{dp}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn row(step: u64, avg: f64, strategy: DispatchStrategy) -> TraceRow {
        TraceRow {
            step_id: step,
            tensor_parallel: 4,
            data_parallel: 4,
            switched: step == 2,
            avg_context_len: avg,
            max_context_len: avg as u64 + 8,
            truncation_fraction: 0.0,
            oom_event: false,
            strategy,
            batch_bytes: 1_000,
            dispatch_total_bytes: 2_000,
            dispatch_latency_s: 0.25,
            switch_time_s: 0.0,
            rollout_time_s: 1.0,
            prep_time_s: 0.0,
            update_time_s: 1.0,
            step_time_s: 2.25,
            tgs: 100.0 + step as f64,
        }
    }

    #[test]
    fn traces_roundtrip_line_by_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let rows: Vec<TraceRow> = (0..5)
            .map(|s| row(s, 4_000.0 + s as f64, DispatchStrategy::AllToAll))
            .collect();
        let mut w = TraceWriter::create(&path).unwrap();
        for r in &rows {
            w.write_row(r).unwrap();
        }
        w.finish().unwrap();
        assert_eq!(read_trace(&path).unwrap(), rows);
    }

    #[test]
    fn blank_lines_are_skipped_but_garbage_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let good = serde_json::to_string(&row(0, 100.0, DispatchStrategy::AllToAll)).unwrap();
        fs::write(&path, format!("{good}\n\n{good}\n")).unwrap();
        assert_eq!(read_trace(&path).unwrap().len(), 2);
        fs::write(&path, format!("{good}\nnot json\n")).unwrap();
        match read_trace(&path) {
            Err(ReportError::Row { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected a row error, got {other:?}"),
        }
    }

    #[test]
    fn context_ceilings_are_powers_of_two() {
        assert_eq!(context_ceiling(0.0), 1);
        assert_eq!(context_ceiling(1.0), 1);
        assert_eq!(context_ceiling(1.5), 2);
        assert_eq!(context_ceiling(4_692.0), 8_192);
        assert_eq!(context_ceiling(8_192.0), 8_192);
        assert_eq!(context_ceiling(8_192.5), 16_384);
    }

    #[test]
    fn aggregation_groups_by_strategy_and_ceiling() {
        let rows = vec![
            row(0, 4_000.0, DispatchStrategy::AllToAll),
            row(1, 4_090.0, DispatchStrategy::AllToAll),
            row(2, 9_000.0, DispatchStrategy::AllToAll),
            row(3, 4_000.0, DispatchStrategy::GatherScatter),
        ];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 3);
        let first = &agg[0];
        assert_eq!(first.strategy, "all_to_all");
        assert_eq!(first.context_ceiling, 4_096);
        assert_eq!(first.steps, 2);
        assert_eq!(first.mean_tgs, 100.5);
        assert_eq!(first.total_dispatch_bytes, 4_000);
        let gs = agg.iter().find(|a| a.strategy == "gather_scatter").unwrap();
        assert_eq!(gs.steps, 1);
        assert_eq!(gs.switches, 0);
        let sixteen = agg
            .iter()
            .find(|a| a.context_ceiling == 16_384)
            .unwrap();
        assert_eq!(sixteen.switches, 1);
    }

    #[test]
    fn csv_outputs_parse_back() {
        let dir = tempfile::tempdir().unwrap();
        let steps = dir.path().join("steps.csv");
        let agg = dir.path().join("aggregate.csv");
        let rows: Vec<TraceRow> = (0..4)
            .map(|s| row(s, 4_000.0, DispatchStrategy::AllToAll))
            .collect();
        write_steps_csv(&steps, &rows).unwrap();
        write_aggregate_csv(&agg, &rows).unwrap();
        let mut reader = csv::Reader::from_path(&steps).unwrap();
        let back: Vec<TraceRow> = reader
            .deserialize()
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(back, rows);
        let text = fs::read_to_string(&agg).unwrap();
        assert!(text.starts_with("strategy,context_ceiling,steps"), "{text}");
        assert_eq!(text.lines().count(), 2);
    }

    #[test]
    fn summaries_count_the_interesting_events() {
        let mut rows: Vec<TraceRow> = (0..3)
            .map(|s| row(s, 4_000.0, DispatchStrategy::AllToAll))
            .collect();
        rows[2].oom_event = true;
        rows[2].tgs = 0.0;
        let summary = summarize(&rows);
        assert_eq!(summary.steps, 3);
        assert_eq!(summary.switches, 1);
        assert_eq!(summary.oom_events, 1);
        assert_eq!(summary.mean_tgs, 100.5);
        assert_eq!(summary.final_config, Some((4, 4)));
        let text = summary.to_string();
        assert!(text.contains("oom events: 1"));
    }
}
