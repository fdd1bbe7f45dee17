use serde::{Deserialize, Serialize};

use super::trainer::{train, Sources};
use crate::config::{Method, TrainConfig};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// One timed run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub method: Method,
    pub seed: u64,
    pub latency_s: f64,
    pub mean_acc: f64,
    pub mac_total: u64,
    pub recon_mse: Option<f64>,
}

/// Seed-averaged results of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: Method,
    pub runs: Vec<BenchRun>,
    pub mean_latency_s: f64,
    pub mean_acc: f64,
    pub mean_macs: f64,
    /// `latency(ssl_sl) / latency(method)` when ssl_sl was benchmarked.
    pub speedup: Option<f64>,
    /// The same ratio of executed multiply-accumulates.
    pub predicted_speedup: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Runs every method for every seed `repeat` times, sequentially, and
/// averages latency (first batch to final evaluation) and accuracy.
pub fn benchmark<T: Scalar>(
    methods: &[Method],
    base: &TrainConfig,
    seeds: &[u64],
    repeat: usize,
    sources: &Sources<T>,
) -> Result<Vec<BenchRow>> {
    if methods.len() < 2 {
        return Err(Error::Config("benchmark needs at least two methods".into()));
    }
    if seeds.is_empty() || repeat == 0 {
        return Err(Error::Config("benchmark needs at least one seed and repeat".into()));
    }
    let mut rows = Vec::new();
    for &method in methods {
        let mut runs = Vec::new();
        for &seed in seeds {
            for _ in 0..repeat {
                let cfg = TrainConfig {
                    method,
                    seed,
                    ..base.clone()
                };
                let r = train(&cfg, sources)?;
                runs.push(BenchRun {
                    method,
                    seed,
                    latency_s: r.ledger.wall_clock_s,
                    mean_acc: r.mean_acc,
                    mac_total: r.ledger.mac_total,
                    recon_mse: r.recon_mse,
                });
            }
        }
        rows.push(BenchRow {
            method,
            mean_latency_s: mean(runs.iter().map(|r| r.latency_s)),
            mean_acc: mean(runs.iter().map(|r| r.mean_acc)),
            mean_macs: mean(runs.iter().map(|r| r.mac_total as f64)),
            runs,
            speedup: None,
            predicted_speedup: None,
        });
    }
    if let Some(base_row) = rows.iter().find(|r| r.method == Method::SslSl).cloned() {
        for r in &mut rows {
            r.speedup = Some(base_row.mean_latency_s / r.mean_latency_s);
            r.predicted_speedup = Some(base_row.mean_macs / r.mean_macs);
        }
    }
    Ok(rows)
}
