//! Aggregation of metrics logs into accuracy / latency tables.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;

use super::log::LogRecord;
use crate::config::Method;
use crate::error::{Error, Result};

/// `a − b`.
pub fn abs_gain(a: f64, b: f64) -> f64 {
    a - b
}

/// `100·(a − b)/b`, in percent.
pub fn rel_gain(a: f64, b: f64) -> f64 {
    100.0 * (a - b) / b
}

/// How many times faster a run of latency `latency` is than `baseline`.
pub fn speedup(baseline: f64, latency: f64) -> f64 {
    baseline / latency
}

/// One completed run, as used for the per-point (Pareto) output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunPoint {
    pub run_id: String,
    pub dataset: String,
    pub p: f64,
    pub method: Method,
    pub seed: u64,
    pub acc: f64,
    pub latency_s: f64,
}

/// One dataset × fraction × method cell. Statistics are `None` when the cell
/// has no completed run (`missing`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub dataset: String,
    pub p: f64,
    pub method: Method,
    pub runs: usize,
    pub missing: bool,
    pub mean_acc: Option<f64>,
    pub mean_latency_s: Option<f64>,
    pub speedup_vs_ssl_sl: Option<f64>,
    pub abs_gain_vs_ssl_sl: Option<f64>,
    pub rel_gain_vs_ssl_sl: Option<f64>,
    pub abs_gain_vs_sl: Option<f64>,
    pub rel_gain_vs_sl: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub points: Vec<RunPoint>,
}

/// Finished runs in `records`: every epoch `0..total_epochs` present.
pub fn completed_runs(records: &[LogRecord]) -> Vec<RunPoint> {
    let mut by_run: BTreeMap<&str, Vec<&LogRecord>> = BTreeMap::new();
    for r in records {
        by_run.entry(&r.run_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for (id, recs) in by_run {
        let total = recs[0].total_epochs;
        let epochs: BTreeSet<usize> = recs.iter().map(|r| r.epoch).collect();
        if total == 0 || epochs.len() != total || epochs.iter().next_back() != Some(&(total - 1)) {
            continue;
        }
        let last = recs.iter().find(|r| r.epoch == total - 1).expect("present");
        out.push(RunPoint {
            run_id: id.to_string(),
            dataset: last.dataset.clone(),
            p: last.p,
            method: last.method,
            seed: last.seed,
            acc: last.mean_acc,
            latency_s: last.ledger.wall_clock_s,
        });
    }
    out
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Groups completed runs by dataset × p × method, averaging over seeds.
///
/// Each method in `methods` that appears in a (dataset, p) group gets a row,
/// ordered as in `methods`; a method whose runs there are all unfinished gets
/// a row marked missing.
pub fn report(records: &[LogRecord], methods: &[Method]) -> Report {
    let points = completed_runs(records);
    let mut groups: Vec<(String, f64)> = Vec::new();
    for r in records {
        if !groups.iter().any(|(d, p)| *d == r.dataset && *p == r.p) {
            groups.push((r.dataset.clone(), r.p));
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut rows = Vec::new();
    for (dataset, p) in groups {
        let cell = |m: Method| -> Vec<&RunPoint> {
            points
                .iter()
                .filter(|x| x.dataset == dataset && x.p == p && x.method == m)
                .collect()
        };
        let stats = |m: Method| {
            let runs = cell(m);
            let acc: Vec<f64> = runs.iter().map(|x| x.acc).collect();
            let lat: Vec<f64> = runs.iter().map(|x| x.latency_s).collect();
            (runs.len(), mean(&acc), mean(&lat))
        };
        let (_, base_acc, base_lat) = stats(Method::SslSl);
        let (_, sl_acc, _) = stats(Method::Sl);
        for &m in methods {
            if !records.iter().any(|r| r.dataset == dataset && r.p == p && r.method == m) {
                continue;
            }
            let (n, acc, lat) = stats(m);
            let pair = |a: Option<f64>, b: Option<f64>, f: fn(f64, f64) -> f64| a.zip(b).map(|(a, b)| f(a, b));
            rows.push(ReportRow {
                dataset: dataset.clone(),
                p,
                method: m,
                runs: n,
                missing: n == 0,
                mean_acc: acc,
                mean_latency_s: lat,
                speedup_vs_ssl_sl: pair(base_lat, lat, speedup),
                abs_gain_vs_ssl_sl: pair(acc, base_acc, abs_gain),
                rel_gain_vs_ssl_sl: pair(acc, base_acc, rel_gain),
                abs_gain_vs_sl: pair(acc, sl_acc, abs_gain),
                rel_gain_vs_sl: pair(acc, sl_acc, rel_gain),
            });
        }
    }
    Report { rows, points }
}

fn csv_string<S: Serialize>(items: &[S]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for it in items {
        w.serialize(it).map_err(|e| Error::Validation(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Validation(e.to_string()))
}

impl Report {
    /// Machine-readable table; missing statistics are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(&self.rows)
    }

    /// One line per completed run, for accuracy-vs-latency plots.
    pub fn pareto_csv(&self) -> Result<String> {
        csv_string(&self.points)
    }

    /// Human-readable aligned table.
    pub fn to_text(&self) -> String {
        let head = [
            "dataset", "p", "method", "runs", "acc", "latency_s", "speedup", "gain_ssl_sl", "rel_ssl_sl", "gain_sl",
            "rel_sl",
        ];
        let f2 = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let signed = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:+.2}"));
        let mut table: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            if r.missing {
                table.push(vec![
                    r.dataset.clone(),
                    r.p.to_string(),
                    r.method.to_string(),
                    "0".into(),
                    "missing".into(),
                ]);
                continue;
            }
            table.push(vec![
                r.dataset.clone(),
                r.p.to_string(),
                r.method.to_string(),
                r.runs.to_string(),
                f2(r.mean_acc),
                f2(r.mean_latency_s),
                r.speedup_vs_ssl_sl.map_or("-".to_string(), |v| format!("{v:.2}x")),
                signed(r.abs_gain_vs_ssl_sl),
                r.rel_gain_vs_ssl_sl.map_or("-".to_string(), |v| format!("{v:+.2}%")),
                signed(r.abs_gain_vs_sl),
                r.rel_gain_vs_sl.map_or("-".to_string(), |v| format!("{v:+.2}%")),
            ]);
        }
        let mut width = vec![0; head.len()];
        for row in &table {
            for (k, c) in row.iter().enumerate() {
                width[k] = width[k].max(c.len());
            }
        }
        let mut out = String::new();
        for row in &table {
            let cells: Vec<String> = row.iter().enumerate().map(|(k, c)| format!("{c:<w$}", w = width[k])).collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out.push_str(
            "\nacc: final held-out accuracy (%), mean over seeds.\n\
             latency_s: first training batch through the last evaluation; data loading and setup excluded.\n",
        );
        out
    }

    /// Writes `report.csv`, `report.txt` and `pareto.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()?),
            ("report.txt", self.to_text()),
            ("pareto.csv", self.pareto_csv()?),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
