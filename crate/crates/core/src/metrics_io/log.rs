//! Line-delimited JSON metrics log, one object per finished epoch.
//!
//! Fields, in order: `run_id`, `method`, `dataset`, `p`, `seed`, `phase`,
//! `epoch`, `total_epochs`, `l_ssl`, `l_sl`, `l_sl_tasks`, `joint`, `lr`,
//! `acc`, `mean_acc`, `ledger` (cumulative), `timestamp` (unix seconds).

use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::Method;
use crate::engine::{EpochRecord, FlopLedger, RunResult};
use crate::error::{Error, Result};
use crate::schedule::Phase;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub run_id: String,
    pub method: Method,
    pub dataset: String,
    pub p: f64,
    pub seed: u64,
    pub phase: Phase,
    pub epoch: usize,
    pub total_epochs: usize,
    pub l_ssl: Option<f64>,
    pub l_sl: Option<f64>,
    pub l_sl_tasks: Vec<Option<f64>>,
    pub joint: f64,
    pub lr: f64,
    pub acc: Vec<f64>,
    pub mean_acc: f64,
    pub ledger: FlopLedger,
    pub timestamp: f64,
}

/// Identity of a run as it appears in the log.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMeta {
    pub run_id: String,
    pub method: Method,
    pub dataset: String,
    pub p: f64,
    pub seed: u64,
    pub total_epochs: usize,
}

impl RunMeta {
    pub fn of(run_id: impl Into<String>, r: &RunResult) -> Self {
        Self {
            run_id: run_id.into(),
            method: r.method,
            dataset: r.dataset.clone(),
            p: r.p,
            seed: r.seed,
            total_epochs: r.schedule.total_epochs,
        }
    }
}

impl LogRecord {
    pub fn new(meta: &RunMeta, rec: &EpochRecord) -> Self {
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        Self {
            run_id: meta.run_id.clone(),
            method: meta.method,
            dataset: meta.dataset.clone(),
            p: meta.p,
            seed: meta.seed,
            phase: rec.phase,
            epoch: rec.epoch,
            total_epochs: meta.total_epochs,
            l_ssl: rec.l_ssl,
            l_sl: rec.l_sl,
            l_sl_tasks: rec.l_sl_tasks.clone(),
            joint: rec.joint,
            lr: rec.lr,
            acc: rec.acc.clone(),
            mean_acc: rec.mean_acc(),
            ledger: rec.ledger,
            timestamp,
        }
    }

    fn key(&self) -> (&str, usize) {
        (&self.run_id, self.epoch)
    }
}

/// Append-only writer. Records must arrive in strictly increasing
/// `(run_id, epoch)` order, including relative to what the file already holds.
pub struct MetricsLog {
    path: PathBuf,
    file: File,
    last: Option<(String, usize)>,
}

impl MetricsLog {
    /// Opens or creates `path` for appending. A trailing partial line left by
    /// an interrupted writer is terminated so that it reads back as one
    /// malformed line instead of corrupting the next record.
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
        if !text.is_empty() && !text.ends_with('\n') {
            file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        }
        file.seek(SeekFrom::End(0)).map_err(|e| Error::io(path, e))?;
        let last = parse(&text)
            .records
            .last()
            .map(|r| (r.run_id.clone(), r.epoch));
        Ok(Self {
            path: path.to_path_buf(),
            file,
            last,
        })
    }

    pub fn append(&mut self, rec: &LogRecord) -> Result<()> {
        if let Some((run, epoch)) = &self.last {
            if rec.key() <= (run.as_str(), *epoch) {
                return Err(Error::Validation(format!(
                    "{}: record ({}, {}) does not follow ({run}, {epoch})",
                    self.path.display(),
                    rec.run_id,
                    rec.epoch
                )));
            }
        }
        let mut line = serde_json::to_string(rec).map_err(|e| Error::Validation(e.to_string()))?;
        line.push('\n');
        // a single write keeps concurrent readers from seeing a split record
        // except at the very end of the file
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.last = Some((rec.run_id.clone(), rec.epoch));
        Ok(())
    }
}

/// Parsed log contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LogRead {
    pub records: Vec<LogRecord>,
    /// One message per skipped malformed line.
    pub warnings: Vec<String>,
}

fn parse(text: &str) -> LogRead {
    let mut out = LogRead::default();
    // everything after the last newline may still be being written
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    for (n, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogRecord>(line) {
            Ok(r) => out.records.push(r),
            Err(e) => out.warnings.push(format!("line {}: {e}", n + 1)),
        }
    }
    out
}

/// Reads a log, skipping malformed lines (with a warning) and ignoring a
/// trailing partial line.
pub fn read_log(path: &Path) -> Result<LogRead> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = parse(&text);
    for w in &mut out.warnings {
        *w = format!("{}: {w}", path.display());
    }
    Ok(out)
}
