//! `mixtrain`: train, sweep, bench, report and reconstruct from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime abort.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process, ExitCode};

use clap::{Arg, ArgAction, ArgMatches, Command};
use mixtrain::config::{Dtype, Method, TrainConfig, KEYS};
use mixtrain::data::Normalization;
use mixtrain::engine::{benchmark, load_sources, BenchRow, RunResult, Trainer};
use mixtrain::metrics_io::{
    dump_reconstructions, load_checkpoint, read_log, report, save_checkpoint, write_atomic, LogRecord, MetricsLog,
    RunMeta,
};
use mixtrain::tensor::Scalar;
use mixtrain::Error;

const CONFIG_FILE: &str = "config.txt";
const LOG_FILE: &str = "metrics.jsonl";
const SUMMARY_FILE: &str = "summary.json";
const CHECKPOINT_FILE: &str = "final.ckpt";
const DEFAULT_SEEDS: [u64; 4] = [1, 2, 3, 4];
const ALL_METHODS: [Method; 3] = [Method::Sl, Method::SslSl, Method::MixTraining];

/// Sweep axes; each accepts a comma-separated list.
const AXES: [&str; 5] = ["method", "alpha", "rho", "p", "seed"];

enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn setup(e: Error) -> Self {
        if e.is_config_error() || matches!(e, Error::Io { .. }) {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }

    fn runtime(e: impl ToString) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn config_args() -> Vec<Arg> {
    let mut args: Vec<Arg> = KEYS
        .iter()
        .map(|&k| {
            Arg::new(k)
                .long(flag(k))
                .value_name("VALUE")
                .help(format!("config key {k}"))
                .help_heading("Config")
        })
        .collect();
    args.push(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("key=value config file; flags take precedence"),
    );
    args.push(
        Arg::new("out")
            .long("out")
            .value_name("DIR")
            .help("output directory (default: $MIXTRAIN_OUT or ./runs)"),
    );
    args
}

fn cli() -> Command {
    Command::new("mixtrain")
        .about("Self-supervised / supervised training schedules on small image datasets")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(Command::new("train").about("Run one training job").args(config_args()))
        .subcommand(
            Command::new("sweep")
                .about("Run the Cartesian product of comma-separated method, alpha, rho, p, seed and epochs values")
                .args(config_args())
                .arg(
                    Arg::new("epochs")
                        .long("epochs")
                        .value_name("LIST")
                        .help("sets e_ssl = e_sl to each value"),
                )
                .arg(
                    Arg::new("jobs")
                        .long("jobs")
                        .value_name("N")
                        .default_value("1")
                        .value_parser(clap::value_parser!(usize)),
                ),
        )
        .subcommand(
            Command::new("bench")
                .about("Time two or more methods (comma-separated --method) over seeds")
                .args(config_args())
                .arg(
                    Arg::new("repeat")
                        .long("repeat")
                        .value_name("N")
                        .default_value("1")
                        .value_parser(clap::value_parser!(usize)),
                ),
        )
        .subcommand(
            Command::new("report")
                .about("Aggregate metrics logs under a directory")
                .arg(Arg::new("logs").required(true).value_name("DIR"))
                .arg(Arg::new("out").long("out").value_name("DIR").help("default: the log directory")),
        )
        .subcommand(
            Command::new("reconstruct")
                .about("Dump reconstructions of held-out samples from a finished train directory")
                .arg(Arg::new("run").required(true).value_name("RUN_DIR"))
                .arg(
                    Arg::new("samples")
                        .long("samples")
                        .value_name("N")
                        .default_value("8")
                        .value_parser(clap::value_parser!(usize)),
                )
                .arg(Arg::new("out").long("out").value_name("DIR").help("default: RUN_DIR/recon")),
        )
        .arg(Arg::new("quiet").long("quiet").short('q').action(ArgAction::SetTrue).global(true))
}

fn main() -> ExitCode {
    let m = cli().get_matches();
    let quiet = m.get_flag("quiet");
    let res = match m.subcommand() {
        Some(("train", a)) => cmd_train(a, quiet),
        Some(("sweep", a)) => cmd_sweep(a, quiet),
        Some(("bench", a)) => cmd_bench(a),
        Some(("report", a)) => cmd_report(a),
        Some(("reconstruct", a)) => cmd_reconstruct(a),
        _ => unreachable!("subcommand required"),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn out_root(a: &ArgMatches) -> PathBuf {
    a.get_one::<String>("out")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("MIXTRAIN_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// Config file first, then every flag given on the command line, in key order.
/// Keys listed in `skip` are left to the caller.
fn base_config(a: &ArgMatches, skip: &[&str]) -> CliResult<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = a.get_one::<String>("config") {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{path}: {e}")))?;
        cfg.apply_kv(&text)
            .map_err(|e| Failure::Config(format!("{path}: {e}")))?;
    }
    for &k in KEYS {
        if skip.contains(&k) {
            continue;
        }
        if let Some(v) = a.get_one::<String>(k) {
            cfg.set(k, v).map_err(|e| Failure::Config(format!("--{}: {e}", flag(k))))?;
        }
    }
    Ok(cfg)
}

fn run_id(cfg: &TrainConfig) -> String {
    format!(
        "{}-{}-p{}-a{}-r{}-e{}_{}-s{}",
        cfg.method,
        cfg.dataset_label(),
        cfg.p,
        cfg.alpha,
        cfg.rho,
        cfg.e_ssl,
        cfg.e_sl,
        cfg.seed
    )
}

fn write_file(path: &Path, body: &str) -> CliResult {
    write_atomic(path, body.as_bytes()).map_err(Failure::setup)
}

fn cmd_train(a: &ArgMatches, quiet: bool) -> CliResult {
    let cfg = base_config(a, &[])?;
    cfg.validate().map_err(Failure::setup)?;
    let dir = match a.get_one::<String>("out") {
        Some(d) => PathBuf::from(d),
        None => out_root(a).join(run_id(&cfg)),
    };
    train_into(&cfg, &dir, quiet).map(|_| ())
}

/// Echoes the config into `dir`, trains, and writes the log, checkpoint and summary.
fn train_into(cfg: &TrainConfig, dir: &Path, quiet: bool) -> CliResult<RunResult> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    let echo = cfg.to_kv();
    write_file(&dir.join(CONFIG_FILE), &echo)?;
    if !quiet {
        println!("# effective config ({})", dir.join(CONFIG_FILE).display());
        print!("{echo}");
    }
    match cfg.dtype {
        Dtype::F32 => train_typed::<f32>(cfg, dir, quiet),
        Dtype::F64 => train_typed::<f64>(cfg, dir, quiet),
    }
}

fn train_typed<T: Scalar>(cfg: &TrainConfig, dir: &Path, quiet: bool) -> CliResult<RunResult> {
    let sources = load_sources::<T>(cfg).map_err(Failure::setup)?;
    let mut trainer = Trainer::new(cfg, &sources).map_err(Failure::setup)?;
    let schedule = trainer.schedule();
    if !quiet {
        println!(
            "phases ssl={} mix={} sl={} total={}",
            schedule.pure_ssl_epochs, schedule.e_mix, schedule.pure_sl_epochs, schedule.total_epochs
        );
    }
    let log_path = dir.join(LOG_FILE);
    // a fresh run replaces any log left by an earlier attempt
    if log_path.exists() {
        std::fs::remove_file(&log_path).map_err(|e| Failure::runtime(format!("{}: {e}", log_path.display())))?;
    }
    let mut log = MetricsLog::open(&log_path).map_err(Failure::runtime)?;
    let meta = RunMeta {
        run_id: run_id(cfg),
        method: cfg.method,
        dataset: cfg.dataset_label(),
        p: cfg.p,
        seed: cfg.seed,
        total_epochs: schedule.total_epochs,
    };
    trainer
        .run(|_, rec| {
            if !quiet {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
                println!(
                    "epoch {:>3} {:<3} lr {:.2e} l_ssl {} l_sl {} joint {:.4} acc {:.2}",
                    rec.epoch,
                    rec.phase,
                    rec.lr,
                    fmt(rec.l_ssl),
                    fmt(rec.l_sl),
                    rec.joint,
                    rec.mean_acc()
                );
            }
            log.append(&LogRecord::new(&meta, rec))
        })
        .map_err(Failure::runtime)?;
    let mse = trainer.heldout_mse().map_err(Failure::runtime)?;
    let result = trainer.result(Some(mse));
    save_checkpoint(&dir.join(CHECKPOINT_FILE), &result.config, &trainer.snapshot()).map_err(Failure::runtime)?;
    let json = serde_json::to_string_pretty(&result).map_err(Failure::runtime)?;
    write_file(&dir.join(SUMMARY_FILE), &json)?;
    if !quiet {
        println!(
            "done: acc {:.2} latency {:.3}s macs {} recon_mse {:.5}",
            result.mean_acc, result.ledger.wall_clock_s, result.ledger.mac_total, mse
        );
    }
    Ok(result)
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect()
}

/// Expands the sweep axes into one config per cell.
fn sweep_cells(a: &ArgMatches) -> CliResult<Vec<TrainConfig>> {
    let base = base_config(a, &AXES)?;
    let mut axes: Vec<(&str, Vec<String>)> = Vec::new();
    for k in AXES {
        match a.get_one::<String>(k) {
            Some(v) => axes.push((k, split_list(v))),
            None if k == "seed" => axes.push((k, DEFAULT_SEEDS.iter().map(u64::to_string).collect())),
            None => {}
        }
    }
    if let Some(v) = a.get_one::<String>("epochs") {
        axes.push(("epochs", split_list(v)));
    }
    if let Some((k, _)) = axes.iter().find(|(_, vals)| vals.is_empty()) {
        return Err(Failure::Config(format!("--{} has no values", flag(k))));
    }
    let mut cells = vec![base];
    for (k, vals) in &axes {
        let mut next = Vec::with_capacity(cells.len() * vals.len());
        for c in &cells {
            for v in vals {
                let mut c = c.clone();
                let res = if *k == "epochs" {
                    c.set("e_ssl", v).and_then(|_| c.set("e_sl", v))
                } else {
                    c.set(k, v)
                };
                res.map_err(|e| Failure::Config(format!("--{}: {e}", flag(k))))?;
                next.push(c);
            }
        }
        cells = next;
    }
    for c in &cells {
        c.validate().map_err(Failure::setup)?;
    }
    Ok(cells)
}

fn cmd_sweep(a: &ArgMatches, quiet: bool) -> CliResult {
    let cells = sweep_cells(a)?;
    let root = out_root(a);
    let jobs = *a.get_one::<usize>("jobs").expect("default");
    if jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let mut todo = Vec::new();
    let mut skipped = 0;
    for cfg in cells {
        let dir = root.join(run_id(&cfg));
        if dir.join(SUMMARY_FILE).exists() {
            skipped += 1;
        } else {
            todo.push((cfg, dir));
        }
    }
    println!("sweep: {} cells to run, {skipped} already complete", todo.len());
    if jobs == 1 {
        for (cfg, dir) in &todo {
            println!("run {}", dir.display());
            train_into(cfg, dir, quiet)?;
        }
    } else {
        run_children(todo, jobs)?;
    }
    write_report(&root, &root)
}

/// Runs each cell as an isolated `train` process, at most `jobs` at a time.
fn run_children(todo: Vec<(TrainConfig, PathBuf)>, jobs: usize) -> CliResult {
    let exe = std::env::current_exe().map_err(Failure::runtime)?;
    let mut queue: VecDeque<_> = todo.into();
    let mut running: Vec<(PathBuf, Child)> = Vec::new();
    let mut failed = Vec::new();
    while !queue.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some((cfg, dir)) = queue.pop_front() else { break };
            std::fs::create_dir_all(&dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
            let cfg_path = dir.join(CONFIG_FILE);
            write_file(&cfg_path, &cfg.to_kv())?;
            let log = std::fs::File::create(dir.join("stdout.txt")).map_err(Failure::runtime)?;
            let child = Process::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--out")
                .arg(&dir)
                .stdout(log)
                .spawn()
                .map_err(Failure::runtime)?;
            println!("run {}", dir.display());
            running.push((dir, child));
        }
        // wait on the oldest child; cells are similar in length
        let (dir, mut child) = running.remove(0);
        let status = child.wait().map_err(Failure::runtime)?;
        if !status.success() {
            failed.push(format!("{} ({status})", dir.display()));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("failed cells: {}", failed.join(", "))))
    }
}

fn parse_methods(a: &ArgMatches) -> CliResult<Vec<Method>> {
    let Some(v) = a.get_one::<String>("method") else {
        return Err(Failure::Config("bench needs --method with at least two methods".into()));
    };
    split_list(v)
        .iter()
        .map(|m| m.parse().map_err(|e: Error| Failure::Config(e.to_string())))
        .collect()
}

fn cmd_bench(a: &ArgMatches) -> CliResult {
    let methods = parse_methods(a)?;
    if methods.len() < 2 {
        return Err(Failure::Config("bench needs at least two methods; speedup is undefined for one".into()));
    }
    let base = base_config(a, &["method", "seed"])?;
    let seeds: Vec<u64> = match a.get_one::<String>("seed") {
        Some(v) => split_list(v)
            .iter()
            .map(|s| s.parse().map_err(|_| Failure::Config(format!("bad seed {s:?}"))))
            .collect::<CliResult<_>>()?,
        None => DEFAULT_SEEDS.to_vec(),
    };
    for &m in &methods {
        TrainConfig { method: m, ..base.clone() }.validate().map_err(Failure::setup)?;
    }
    let repeat = *a.get_one::<usize>("repeat").expect("default");
    let dir = out_root(a);
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Config(format!("{}: {e}", dir.display())))?;
    write_file(&dir.join(CONFIG_FILE), &base.to_kv())?;
    println!("# effective config ({})", dir.join(CONFIG_FILE).display());
    print!("{}", base.to_kv());
    let rows = match base.dtype {
        Dtype::F32 => bench_typed::<f32>(&methods, &base, &seeds, repeat),
        Dtype::F64 => bench_typed::<f64>(&methods, &base, &seeds, repeat),
    }?;
    let (table, runs) = bench_tables(&rows);
    write_file(&dir.join("bench.txt"), &table)?;
    write_file(&dir.join("bench_runs.csv"), &runs)?;
    print!("{table}");
    Ok(())
}

fn bench_typed<T: Scalar>(methods: &[Method], base: &TrainConfig, seeds: &[u64], repeat: usize) -> CliResult<Vec<BenchRow>> {
    let sources = load_sources::<T>(base).map_err(Failure::setup)?;
    benchmark(methods, base, seeds, repeat, &sources).map_err(|e| match e {
        Error::Aborted { .. } => Failure::runtime(e),
        e => Failure::setup(e),
    })
}

fn bench_tables(rows: &[BenchRow]) -> (String, String) {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}x"));
    let mut table = format!(
        "{:<12} {:>5} {:>10} {:>12} {:>9} {:>10} {:>10}\n",
        "method", "runs", "acc", "latency_s", "speedup", "mac_ratio", "macs"
    );
    let mut runs = String::from("method,seed,latency_s,acc,mac_total,recon_mse\n");
    for r in rows {
        table.push_str(&format!(
            "{:<12} {:>5} {:>10.2} {:>12.3} {:>9} {:>10} {:>10.3e}\n",
            r.method.to_string(),
            r.runs.len(),
            r.mean_acc,
            r.mean_latency_s,
            opt(r.speedup),
            opt(r.predicted_speedup),
            r.mean_macs
        ));
        for x in &r.runs {
            runs.push_str(&format!(
                "{},{},{},{},{},{}\n",
                x.method,
                x.seed,
                x.latency_s,
                x.mean_acc,
                x.mac_total,
                x.recon_mse.map_or(String::new(), |v| v.to_string())
            ));
        }
    }
    table.push_str("latency_s: mean over seeds and repeats, first training batch through final evaluation.\n");
    table.push_str("speedup and mac_ratio are relative to ssl_sl.\n");
    (table, runs)
}

fn write_report(logs: &Path, out: &Path) -> CliResult {
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(logs)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "jsonl"))
        .map(|e| e.into_path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Failure::Config(format!("no .jsonl logs under {}", logs.display())));
    }
    let mut records = Vec::new();
    for f in &files {
        let read = read_log(f).map_err(Failure::setup)?;
        for w in read.warnings {
            eprintln!("warning: skipped malformed line {w}");
        }
        records.extend(read.records);
    }
    let rep = report(&records, &ALL_METHODS);
    rep.write(out).map_err(Failure::runtime)?;
    print!("{}", rep.to_text());
    Ok(())
}

fn cmd_report(a: &ArgMatches) -> CliResult {
    let logs = PathBuf::from(a.get_one::<String>("logs").expect("required"));
    if !logs.is_dir() {
        return Err(Failure::Config(format!("{} is not a directory", logs.display())));
    }
    let out = a.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| logs.clone());
    write_report(&logs, &out)
}

fn cmd_reconstruct(a: &ArgMatches) -> CliResult {
    let run = PathBuf::from(a.get_one::<String>("run").expect("required"));
    let text = std::fs::read_to_string(run.join(CONFIG_FILE))
        .map_err(|e| Failure::Config(format!("{}: {e}", run.join(CONFIG_FILE).display())))?;
    let cfg = TrainConfig::from_kv(&text).map_err(Failure::setup)?;
    let n = *a.get_one::<usize>("samples").expect("default");
    let out = a.get_one::<String>("out").map(PathBuf::from).unwrap_or_else(|| run.join("recon"));
    match cfg.dtype {
        Dtype::F32 => reconstruct_typed::<f32>(&cfg, &run, n, &out),
        Dtype::F64 => reconstruct_typed::<f64>(&cfg, &run, n, &out),
    }
}

fn reconstruct_typed<T: Scalar>(cfg: &TrainConfig, run: &Path, n: usize, out: &Path) -> CliResult {
    let ck = load_checkpoint::<T>(&run.join(CHECKPOINT_FILE)).map_err(Failure::setup)?;
    let sources = load_sources::<T>(cfg).map_err(Failure::setup)?;
    let mut trainer = Trainer::new(cfg, &sources).map_err(Failure::setup)?;
    trainer.restore(ck.state).map_err(Failure::setup)?;
    let test = &trainer.test_sets()[0];
    let idx: Vec<usize> = (0..n.min(test.len())).collect();
    let mses = dump_reconstructions(&trainer.model, test, &idx, &Normalization::default(), out).map_err(Failure::runtime)?;
    println!(
        "wrote {} pairs to {}; mean mse {:.5}",
        mses.len(),
        out.display(),
        mses.iter().sum::<f64>() / mses.len().max(1) as f64
    );
    Ok(())
}
