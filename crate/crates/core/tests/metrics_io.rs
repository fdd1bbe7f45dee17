mod common;

use common::{tiny_cfg, tiny_data, tiny_sources};

use mixtrain::config::{Method, TrainConfig};
use mixtrain::data::{Batch, Dataset, Normalization};
use mixtrain::engine::{reconstruction_loss_all, train, FlopLedger, Trainer};
use mixtrain::metrics_io::{
    abs_gain, decode_checkpoint, encode_checkpoint, load_checkpoint, read_log, rel_gain, report, save_checkpoint,
    speedup, dump_reconstructions, LogRecord, MetricsLog, Reconstruct, RunMeta,
};
use mixtrain::schedule::Phase;
use mixtrain::tensor::Tensor;
use mixtrain::{Error, Result};

fn mix_cfg() -> TrainConfig {
    TrainConfig {
        e_ssl: 2,
        e_sl: 2,
        augment_pad: 2,
        augment_flip: true,
        ..tiny_cfg(Method::MixTraining)
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let src = tiny_sources::<f32>();
    let cfg = mix_cfg();
    let mut t = Trainer::new(&cfg, &src).unwrap();
    t.run_epoch().unwrap();
    t.run_epoch().unwrap();
    let state = t.snapshot();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    save_checkpoint(&path, &cfg.to_kv(), &state).unwrap();
    let back = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back.state, state);
    assert_eq!(back.config, cfg.to_kv());
    assert!(!dir.path().join("run.ckpt.tmp").exists());

    // one manifest line per model parameter
    let bytes = std::fs::read(&path).unwrap();
    let head = String::from_utf8_lossy(&bytes[..bytes.windows(5).position(|w| w == b"\nEND\n").unwrap()]);
    let n = head.lines().filter(|l| l.starts_with("param ")).count();
    assert_eq!(n, t.model.params.iter().count());
}

#[test]
fn resume_from_file_equals_uninterrupted_run() {
    let src = tiny_sources::<f32>();
    for cfg in [
        mix_cfg(),
        TrainConfig {
            e_ssl: 1,
            e_sl: 1,
            ..tiny_cfg(Method::SslSl)
        },
    ] {
        let full = train(&cfg, &src).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut first = Trainer::new(&cfg, &src).unwrap();
        first.run_epoch().unwrap();
        save_checkpoint(&path, &cfg.to_kv(), &first.snapshot()).unwrap();
        drop(first);

        let ck = load_checkpoint::<f32>(&path).unwrap();
        let cfg2 = TrainConfig::from_kv(&ck.config).unwrap();
        assert_eq!(cfg2, cfg);
        let mut resumed = Trainer::new(&cfg2, &src).unwrap();
        resumed.restore(ck.state).unwrap();
        resumed.run(|_, _| Ok(())).unwrap();
        let mse = resumed.heldout_mse().unwrap();
        let r = resumed.result(Some(mse));
        assert_eq!(r.untimed_records(), full.untimed_records());
        assert_eq!(r.recon_mse, full.recon_mse);
    }
}

#[test]
fn truncated_payload_names_both_sizes() {
    let src = tiny_sources::<f32>();
    let t = Trainer::new(&mix_cfg(), &src).unwrap();
    let bytes = encode_checkpoint("", &t.snapshot()).unwrap();
    let cut = &bytes[..bytes.len() - 7];
    let err = decode_checkpoint::<f32>("x.ckpt".as_ref(), cut).unwrap_err();
    let msg = err.to_string();
    let total: usize = {
        let head = String::from_utf8_lossy(&bytes);
        let line = head.lines().find(|l| l.starts_with("payload ")).unwrap().to_string();
        line["payload ".len()..].parse().unwrap()
    };
    assert!(matches!(err, Error::Format { .. }));
    assert!(msg.contains(&total.to_string()) && msg.contains(&(total - 7).to_string()), "{msg}");
}

#[test]
fn precision_and_magic_are_checked() {
    let src = tiny_sources::<f32>();
    let t = Trainer::new(&mix_cfg(), &src).unwrap();
    let bytes = encode_checkpoint("", &t.snapshot()).unwrap();
    let err = decode_checkpoint::<f64>("x".as_ref(), &bytes).unwrap_err();
    assert!(err.to_string().contains("dtype"), "{err}");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode_checkpoint::<f32>("x".as_ref(), &bad).is_err());
    let err = load_checkpoint::<f32>("/nonexistent/dir/a.ckpt".as_ref()).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/dir/a.ckpt"));
}

fn rec(run: &str, method: Method, p: f64, seed: u64, epoch: usize, total: usize, acc: f64, lat: f64) -> LogRecord {
    LogRecord {
        run_id: run.into(),
        method,
        dataset: "toy".into(),
        p,
        seed,
        phase: Phase::Sl,
        epoch,
        total_epochs: total,
        l_ssl: None,
        l_sl: Some(1.0),
        l_sl_tasks: vec![Some(1.0)],
        joint: 1.0,
        lr: 1e-3,
        acc: vec![acc],
        mean_acc: acc,
        ledger: FlopLedger {
            wall_clock_s: lat,
            ..Default::default()
        },
        timestamp: 0.0,
    }
}

const METHODS: [Method; 3] = [Method::Sl, Method::SslSl, Method::MixTraining];

#[test]
fn gain_and_speedup_arithmetic() {
    let a = abs_gain(55.46, 46.65);
    let r = rel_gain(55.46, 46.65);
    assert_eq!(format!("{a:.2}"), "8.81");
    assert_eq!(format!("{r:.2}"), "18.89");
    assert_eq!(format!("{:.2}", speedup(22917.29, 17795.47)), "1.29");

    let logs = vec![
        rec("a", Method::SslSl, 1.0, 1, 0, 1, 46.65, 22917.29),
        rec("b", Method::MixTraining, 1.0, 1, 0, 1, 55.46, 17795.47),
    ];
    let rep = report(&logs, &METHODS);
    let mix = rep.rows.iter().find(|r| r.method == Method::MixTraining).unwrap();
    assert_eq!(mix.mean_acc, Some(55.46));
    assert_eq!(mix.mean_latency_s, Some(17795.47));
    assert_eq!(format!("{:.2}", mix.abs_gain_vs_ssl_sl.unwrap()), "8.81");
    assert_eq!(format!("{:.2}", mix.rel_gain_vs_ssl_sl.unwrap()), "18.89");
    assert_eq!(format!("{:.2}", mix.speedup_vs_ssl_sl.unwrap()), "1.29");
    let text = rep.to_text();
    assert!(text.contains("1.29x") && text.contains("+8.81") && text.contains("+18.89%"), "{text}");
}

#[test]
fn seeds_are_averaged_and_empty_cells_marked_missing() {
    let logs = vec![
        rec("s1", Method::SslSl, 0.1, 1, 0, 2, 10.0, 1.0),
        rec("s1", Method::SslSl, 0.1, 1, 1, 2, 40.0, 4.0),
        rec("s2", Method::SslSl, 0.1, 2, 0, 2, 20.0, 2.0),
        rec("s2", Method::SslSl, 0.1, 2, 1, 2, 60.0, 6.0),
        // unfinished: epoch 1 of 2 never logged
        rec("m1", Method::MixTraining, 0.1, 1, 0, 2, 99.0, 1.0),
    ];
    let rep = report(&logs, &METHODS);
    // sl never ran in this group, so it gets no row at all
    assert_eq!(rep.rows.len(), 2);
    let base = &rep.rows[0];
    assert_eq!((base.method, base.runs, base.mean_acc, base.mean_latency_s), (Method::SslSl, 2, Some(50.0), Some(5.0)));
    assert_eq!(base.speedup_vs_ssl_sl, Some(1.0));
    let mix = &rep.rows[1];
    assert!(mix.missing && mix.mean_acc.is_none() && mix.speedup_vs_ssl_sl.is_none());
    assert_eq!(rep.points.len(), 2);
    assert!(rep.to_text().contains("missing"));
    let csv = rep.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("dataset,p,method,runs,missing,mean_acc"));
    // pure function of the records
    assert_eq!(report(&logs, &METHODS), rep);
}

#[test]
fn log_is_append_only_and_tolerates_partial_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.jsonl");
    let src = tiny_sources::<f32>();
    let cfg = mix_cfg();
    let r = train(&cfg, &src).unwrap();
    let meta = RunMeta::of("run-1", &r);
    let mut log = MetricsLog::open(&path).unwrap();
    for e in &r.records {
        log.append(&LogRecord::new(&meta, e)).unwrap();
    }
    let err = log.append(&LogRecord::new(&meta, &r.records[0])).unwrap_err();
    assert!(err.to_string().contains("does not follow"));
    drop(log);

    let read = read_log(&path).unwrap();
    assert!(read.warnings.is_empty());
    assert_eq!(read.records.len(), r.records.len());
    assert_eq!(read.records.last().unwrap().mean_acc, r.mean_acc);
    assert_eq!(read.records[0].ledger, r.records[0].ledger);

    // a concurrent writer mid-line, and a corrupted line
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.insert_str(0, "{not json\n");
    text.push_str("{\"run_id\":\"run-1\",\"meth");
    std::fs::write(&path, &text).unwrap();
    let read = read_log(&path).unwrap();
    assert_eq!(read.records.len(), r.records.len());
    assert_eq!(read.warnings.len(), 1);
    assert!(read.warnings[0].contains("line 1"));

    // reopening terminates the partial line; the ordering check spans sessions
    let mut log = MetricsLog::open(&path).unwrap();
    assert!(log.append(&LogRecord::new(&meta, &r.records[1])).is_err());
    let next = RunMeta::of("run-2", &r);
    log.append(&LogRecord::new(&next, &r.records[0])).unwrap();
    let read = read_log(&path).unwrap();
    assert_eq!(read.records.len(), r.records.len() + 1);
    assert_eq!(read.warnings.len(), 2);

    let rep = report(&read.records, &METHODS);
    assert_eq!(rep.points.len(), 1);
    assert_eq!(rep.points[0].acc, r.mean_acc);
    assert_eq!(rep.points[0].latency_s, r.ledger.wall_clock_s);
}

struct Identity;
impl Reconstruct<f64> for Identity {
    fn reconstruct(&self, src: &Dataset<f64>, idx: &[usize]) -> Result<Tensor<f64>> {
        Ok(Batch::gather(src, idx)?.images)
    }
}

struct Zero;
impl Reconstruct<f64> for Zero {
    fn reconstruct(&self, src: &Dataset<f64>, idx: &[usize]) -> Result<Tensor<f64>> {
        let img = Batch::gather(src, idx)?.images;
        Ok(Tensor::zeros(img.shape().to_vec()))
    }
}

#[test]
fn stub_decoders_give_the_expected_error() {
    let ds = tiny_data::<f64>(3);
    let idx = [0, 5, 17];
    let dir = tempfile::tempdir().unwrap();
    let norm = Normalization::default();
    let id = dump_reconstructions(&Identity, &ds, &idx, &norm, dir.path()).unwrap();
    assert_eq!(id, vec![0.0; 3]);
    let zero = dump_reconstructions(&Zero, &ds, &idx, &norm, dir.path()).unwrap();
    for (k, &i) in idx.iter().enumerate() {
        let img = ds.items[i].image.data();
        let mean_sq = img.iter().map(|x| x * x).sum::<f64>() / img.len() as f64;
        assert!((zero[k] - mean_sq).abs() < 1e-12);
    }
    let csv = std::fs::read_to_string(dir.path().join("mse.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(2).unwrap().starts_with("5,"));
    let ppm = std::fs::read(dir.path().join("0017_recon.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(ppm.len(), b"P6\n8 8\n255\n".len() + 8 * 8 * 3);
    // the zero image maps back to the normalization mean
    assert_eq!(ppm[ppm.len() - 1], 128);
    let grid = std::fs::read(dir.path().join("grid.ppm")).unwrap();
    assert!(grid.starts_with(b"P6\n24 16\n255\n"));
}

#[test]
fn dumped_mse_matches_engine_loss() {
    let src = tiny_sources::<f64>();
    let cfg = TrainConfig {
        dtype: mixtrain::config::Dtype::F64,
        ..tiny_cfg(Method::MixTraining)
    };
    let mut t = Trainer::new(&cfg, &src).unwrap();
    t.run_epoch().unwrap();
    let ds = t.test_sets()[0].clone();
    let idx: Vec<usize> = (0..6).collect();
    let dir = tempfile::tempdir().unwrap();
    let mses = dump_reconstructions(&t.model, &ds, &idx, &Normalization::default(), dir.path()).unwrap();
    let dumped = mses.iter().sum::<f64>() / mses.len() as f64;
    let engine = reconstruction_loss_all(&t.model, &ds, &idx).unwrap();
    assert!((dumped - engine).abs() <= 1e-12 * engine.abs().max(1.0), "{dumped} vs {engine}");
    for k in 0..6 {
        let one = reconstruction_loss_all(&t.model, &ds, &[k]).unwrap();
        assert!((mses[k] - one).abs() <= 1e-12 * one.max(1.0));
    }
}
