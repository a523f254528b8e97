//! Append-only telemetry log.
//!
//! Records live in memory and, when a path is configured, in a JSONL file
//! with an index sidecar (`<path>.idx`) holding `seq offset at` every
//! `INDEX_EVERY` records. An I/O failure switches the store to degraded
//! mode: the file is abandoned and recording continues in memory.
//!
//! Scheduler records carry the scheduler's decisions verbatim, so the
//! utilization report can be recomputed from the file alone.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use qbridge_core::reservation::Window;
use qbridge_core::scheduler::{utilization_report, Decision, UtilizationReport};
use qbridge_core::Tick;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const INDEX_EVERY: u64 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Task,
    Device,
    Scheduler,
    Pipeline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub seq: u64,
    pub at: Tick,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<u64>,
    pub payload: Value,
}

/// Half-open tick range plus optional category and job.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TelemetryFilter {
    pub from: Option<Tick>,
    pub to: Option<Tick>,
    pub category: Option<Category>,
    pub job_id: Option<u64>,
}

impl TelemetryFilter {
    pub fn matches(&self, r: &TelemetryRecord) -> bool {
        self.from.is_none_or(|f| r.at >= f)
            && self.to.is_none_or(|t| r.at < t)
            && self.category.is_none_or(|c| r.category == c)
            && self.job_id.is_none_or(|j| r.job_id == Some(j))
    }
}

struct Sink {
    out: BufWriter<File>,
    idx: BufWriter<File>,
    offset: u64,
}

pub struct TelemetryStore {
    records: Vec<TelemetryRecord>,
    sink: Option<Sink>,
    path: Option<PathBuf>,
    degraded: bool,
    last_error: Option<String>,
}

pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

impl TelemetryStore {
    pub fn in_memory() -> TelemetryStore {
        TelemetryStore {
            records: Vec::new(),
            sink: None,
            path: None,
            degraded: false,
            last_error: None,
        }
    }

    /// Truncates and opens `path`. Failure to open leaves the store usable
    /// but degraded.
    pub fn open(path: &Path) -> TelemetryStore {
        let mut s = TelemetryStore::in_memory();
        s.path = Some(path.to_path_buf());
        let open = || -> io::Result<Sink> {
            let out = File::create(path)?;
            let idx = File::create(index_path(path))?;
            Ok(Sink {
                out: BufWriter::new(out),
                idx: BufWriter::new(idx),
                offset: 0,
            })
        };
        match open() {
            Ok(sink) => s.sink = Some(sink),
            Err(e) => s.degrade(e),
        }
        s
    }

    fn degrade(&mut self, e: io::Error) {
        self.degraded = true;
        self.last_error = Some(e.to_string());
        self.sink = None;
    }

    pub fn is_degraded(&self) -> bool {
        self.degraded
    }

    pub fn last_error(&self) -> Option<&str> {
        self.last_error.as_deref()
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Appends a record. Ticks never go backwards: a stale `at` is raised to
    /// the latest one seen.
    pub fn record(&mut self, at: Tick, category: Category, job_id: Option<u64>, payload: Value) -> u64 {
        let seq = self.records.len() as u64;
        let at = self.records.last().map_or(at, |r| r.at.max(at));
        let rec = TelemetryRecord {
            seq,
            at,
            category,
            job_id,
            payload,
        };
        if let Some(sink) = &mut self.sink {
            let mut line = serde_json::to_string(&rec).expect("record serializes");
            line.push('\n');
            let res = (|| -> io::Result<()> {
                if seq % INDEX_EVERY == 0 {
                    writeln!(sink.idx, "{seq} {} {at}", sink.offset)?;
                }
                sink.out.write_all(line.as_bytes())?;
                sink.offset += line.len() as u64;
                Ok(())
            })();
            if let Err(e) = res {
                self.degrade(e);
            }
        }
        self.records.push(rec);
        seq
    }

    pub fn flush(&mut self) {
        if let Some(sink) = &mut self.sink {
            let res = sink.out.flush().and_then(|_| sink.idx.flush());
            if let Err(e) = res {
                self.degrade(e);
            }
        }
    }

    pub fn records(&self) -> &[TelemetryRecord] {
        &self.records
    }

    pub fn query(&self, filter: &TelemetryFilter) -> Vec<TelemetryRecord> {
        self.records.iter().filter(|r| filter.matches(r)).cloned().collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("cannot read telemetry log: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Corrupt { line: usize, msg: String },
}

pub fn read_log(path: &Path) -> Result<Vec<TelemetryRecord>, ReplayError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| ReplayError::Corrupt {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads records starting at the indexed position at or before `seq`.
pub fn read_from(path: &Path, seq: u64) -> Result<Vec<TelemetryRecord>, ReplayError> {
    let mut offset = 0;
    if let Ok(idx) = File::open(index_path(path)) {
        for line in BufReader::new(idx).lines() {
            let line = line?;
            let mut parts = line.split_whitespace().map(str::parse::<u64>);
            if let (Some(Ok(s)), Some(Ok(o))) = (parts.next(), parts.next()) {
                if s <= seq {
                    offset = o;
                }
            }
        }
    }
    let mut file = File::open(path)?;
    io::Seek::seek(&mut file, io::SeekFrom::Start(offset))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let rec: TelemetryRecord = serde_json::from_str(&line?).map_err(|e| ReplayError::Corrupt {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if rec.seq >= seq {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Scheduler decisions in log order.
pub fn decisions(records: &[TelemetryRecord]) -> Vec<Decision> {
    records
        .iter()
        .filter(|r| r.category == Category::Scheduler)
        .filter_map(|r| serde_json::from_value(r.payload.clone()).ok())
        .collect()
}

/// Devices in registration order.
pub fn registered_devices(records: &[TelemetryRecord]) -> Vec<String> {
    records
        .iter()
        .filter(|r| r.category == Category::Device && r.payload["event"] == "registered")
        .filter_map(|r| r.payload["device_id"].as_str().map(String::from))
        .collect()
}

/// The utilization report as it would have been computed live.
pub fn replay_report(records: &[TelemetryRecord], window: Window) -> UtilizationReport {
    utilization_report(&decisions(records), &registered_devices(records), window)
}
