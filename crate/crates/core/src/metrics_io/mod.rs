//! Checkpoints, metrics logs, report tables and reconstruction dumps.

mod checkpoint;
mod log;
mod recon;
mod report;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use log::{read_log, LogRead, LogRecord, MetricsLog, RunMeta};
pub use recon::{dump_reconstructions, encode_ppm, Reconstruct};
pub use report::{abs_gain, completed_runs, rel_gain, report, speedup, Report, ReportRow, RunPoint};

/// Writes `bytes` to `path` atomically (temporary file, then rename).
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> crate::error::Result<()> {
    checkpoint::write_atomic(path, bytes)
}
