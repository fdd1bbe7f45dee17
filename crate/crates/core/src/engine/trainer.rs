use std::path::Path;
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use super::eval::{accuracy, reconstruction_mse};
use super::step::{mix_step, sl_step, ssl_step, LossTerms, StepOutput};
use super::FlopLedger;
use crate::config::{Method, TrainConfig};
use crate::data::{
    augment_batch, batches, load, round_robin, split_holdout, subsample, Batch, Dataset, Examples, Format,
    MixedDataset, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::nn::{make_mask_plan, MaskPlan, MixModel};
use crate::rng::{derive_seed, RngStreams};
use crate::schedule::{lr_at, plan, AdamW, Phase, PhaseSchedule};
use crate::tensor::{Scalar, Tensor};

/// Labeled data of one task; a held-out split is carved from `train` when
/// `test` is absent.
#[derive(Clone, Debug)]
pub struct TaskSource<T> {
    pub train: Dataset<T>,
    pub test: Option<Dataset<T>>,
}

/// Everything a run trains and evaluates on.
#[derive(Clone, Debug)]
pub struct Sources<T> {
    pub tasks: Vec<TaskSource<T>>,
    /// Separate unlabeled source; when absent the task inputs serve as the
    /// self-supervised pool and mixing degenerates to the identity.
    pub ssl: Option<Dataset<T>>,
}

impl<T: Scalar> Sources<T> {
    pub fn single(train: Dataset<T>, test: Option<Dataset<T>>) -> Self {
        Self {
            tasks: vec![TaskSource { train, test }],
            ssl: None,
        }
    }
}

fn load_one<T: Scalar>(path: &str, format: Option<Format>) -> Result<(Dataset<T>, Option<Dataset<T>>)> {
    let p = Path::new(path);
    let fmt = format
        .or_else(|| Format::infer(p))
        .ok_or_else(|| Error::Config(format!("cannot infer the format of {path}; set format")))?;
    if fmt == Format::SyntheticSpec {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let spec: SyntheticSpec = text.parse().map_err(|e: Error| match e {
            Error::Config(m) => Error::format(p, m),
            other => other,
        })?;
        return spec.generate();
    }
    Ok((load(p, fmt)?, None))
}

/// Reads the sources named in `cfg`.
pub fn load_sources<T: Scalar>(cfg: &TrainConfig) -> Result<Sources<T>> {
    if cfg.data.is_empty() {
        return Err(Error::Config("no data source given".into()));
    }
    let mut tasks = Vec::with_capacity(cfg.data.len());
    for (i, path) in cfg.data.iter().enumerate() {
        let (train, bundled_test) = load_one(path, cfg.format)?;
        let test = match cfg.test_data.get(i) {
            Some(tp) => Some(load_one(tp, cfg.format)?.0),
            None => bundled_test,
        };
        tasks.push(TaskSource { train, test });
    }
    let ssl = match &cfg.ssl_data {
        Some(path) => Some(load_one::<T>(path, cfg.format)?.0.unlabeled()),
        None => None,
    };
    Ok(Sources { tasks, ssl })
}

/// Metrics of one finished epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub epoch_in_phase: usize,
    pub lr: f64,
    /// Sample-weighted epoch means.
    pub l_ssl: Option<f64>,
    /// Mean of the per-task terms present this epoch.
    pub l_sl: Option<f64>,
    pub l_sl_tasks: Vec<Option<f64>>,
    /// `w_ssl·l_ssl + w_sl·l_sl` with the phase weights: (1, 0) for ssl,
    /// (alpha, 1−alpha) for mix, (0, 1) for sl.
    pub joint: f64,
    /// Held-out accuracy per task, percent.
    pub acc: Vec<f64>,
    /// Cumulative ledger after this epoch.
    pub ledger: FlopLedger,
}

impl EpochRecord {
    pub fn mean_acc(&self) -> f64 {
        self.acc.iter().sum::<f64>() / self.acc.len().max(1) as f64
    }

    /// Copy with wall-clock fields zeroed, for run-to-run comparison.
    pub fn untimed(&self) -> Self {
        Self {
            ledger: self.ledger.untimed(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub dataset: String,
    pub p: f64,
    pub seed: u64,
    /// Effective configuration in `key=value` form.
    pub config: String,
    pub schedule: PhaseSchedule,
    pub records: Vec<EpochRecord>,
    pub final_acc: Vec<f64>,
    pub mean_acc: f64,
    pub ledger: FlopLedger,
    /// Held-out reconstruction MSE after training, measured outside the timed region.
    pub recon_mse: Option<f64>,
}

impl RunResult {
    pub fn untimed_records(&self) -> Vec<EpochRecord> {
        self.records.iter().map(EpochRecord::untimed).collect()
    }
}

/// Resumable trainer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState<T> {
    pub params: Vec<(String, Tensor<T>)>,
    pub opt: AdamW<T>,
    pub rng: Vec<(String, Vec<u8>)>,
    /// Next epoch to run.
    pub epoch: usize,
    pub ledger: FlopLedger,
    pub records: Vec<EpochRecord>,
}

#[derive(Default)]
struct LossSums {
    ssl: (f64, usize),
    sl: Vec<(f64, usize)>,
}

impl LossSums {
    fn new(tasks: usize) -> Self {
        Self {
            ssl: (0.0, 0),
            sl: vec![(0.0, 0); tasks],
        }
    }

    fn add(&mut self, terms: &LossTerms, task: usize, n: usize) {
        if let Some(l) = terms.l_ssl {
            self.ssl.0 += l * n as f64;
            self.ssl.1 += n;
        }
        if let Some(l) = terms.l_sl {
            self.sl[task].0 += l * n as f64;
            self.sl[task].1 += n;
        }
    }

    fn mean((s, n): (f64, usize)) -> Option<f64> {
        (n > 0).then(|| s / n as f64)
    }
}

fn phase_weights(phase: Phase, alpha: f64) -> (f64, f64) {
    match phase {
        Phase::Ssl => (1.0, 0.0),
        Phase::Mix => (alpha, 1.0 - alpha),
        Phase::Sl => (0.0, 1.0),
    }
}

fn draw_plans<R: RngCore>(rng: &mut R, n: usize, tokens: usize, ratio: f64) -> Result<Vec<MaskPlan>> {
    (0..n).map(|_| make_mask_plan(tokens, ratio, rng.next_u64())).collect()
}

/// Runs the phase plan of one configuration epoch by epoch.
pub struct Trainer<T> {
    cfg: TrainConfig,
    schedule: PhaseSchedule,
    pub model: MixModel<T>,
    pub opt: AdamW<T>,
    pub rngs: RngStreams,
    train: Vec<Dataset<T>>,
    test: Vec<Dataset<T>>,
    ssl_pool: Dataset<T>,
    partner: Option<Dataset<T>>,
    epoch: usize,
    ledger: FlopLedger,
    records: Vec<EpochRecord>,
}

impl<T: Scalar> Trainer<T> {
    /// Splits and subsamples the data, then initializes the model and optimizer.
    pub fn new(cfg: &TrainConfig, sources: &Sources<T>) -> Result<Self> {
        cfg.validate()?;
        if sources.tasks.is_empty() {
            return Err(Error::Config("no task data".into()));
        }
        let shape = sources.tasks[0]
            .train
            .image_shape()
            .ok_or_else(|| Error::Validation(format!("{}: empty dataset", sources.tasks[0].train.name)))?
            .to_vec();
        let all = sources
            .tasks
            .iter()
            .flat_map(|t| std::iter::once(&t.train).chain(t.test.as_ref()))
            .chain(sources.ssl.as_ref());
        for d in all {
            if let Some(s) = d.image_shape() {
                if s != shape.as_slice() {
                    return Err(Error::dim("sources", &shape, s));
                }
            }
        }
        for t in &sources.tasks {
            if !t.train.is_labeled() {
                return Err(Error::Validation(format!(
                    "{}: method {} needs labeled training data",
                    t.train.name, cfg.method
                )));
            }
            if let Some(test) = &t.test {
                if !test.is_labeled() || test.is_empty() {
                    return Err(Error::Validation(format!("{}: test split must be labeled", test.name)));
                }
            }
        }

        let mut rngs = RngStreams::new(cfg.seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for t in &sources.tasks {
            let (pool, held) = match &t.test {
                Some(ts) => (t.train.clone(), ts.clone()),
                None => split_holdout(&t.train, cfg.holdout, rngs.subsample.next_u64())?,
            };
            train.push(subsample(&pool, cfg.p, rngs.subsample.next_u64())?);
            test.push(held);
        }
        let heads: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .map(|(i, d)| (i, d.num_classes.expect("labeled")))
            .collect();
        let model_cfg = cfg.model_config(shape[0], shape[1], shape[2]);
        let model = MixModel::new(model_cfg, &heads, &mut rngs.init)?;
        let opt = AdamW::from_config(&model.params, cfg);
        let partner = sources.ssl.clone();
        let ssl_pool = match (&partner, train.as_slice()) {
            (Some(p), _) => p.unlabeled(),
            (None, [only]) => only.unlabeled(),
            (None, many) => Dataset::union_unlabeled("task-union", &many.iter().collect::<Vec<_>>())?,
        };
        Ok(Self {
            cfg: cfg.clone(),
            schedule: plan(cfg),
            model,
            opt,
            rngs,
            train,
            test,
            ssl_pool,
            partner,
            epoch: 0,
            ledger: FlopLedger::default(),
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> PhaseSchedule {
        self.schedule
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.schedule.total_epochs
    }

    pub fn ledger(&self) -> FlopLedger {
        self.ledger
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn train_sets(&self) -> &[Dataset<T>] {
        &self.train
    }

    pub fn test_sets(&self) -> &[Dataset<T>] {
        &self.test
    }

    pub fn ssl_pool(&self) -> &Dataset<T> {
        &self.ssl_pool
    }

    fn ssl_epoch(&mut self, epoch: usize, lr: f64, sums: &mut LossSums) -> Result<()> {
        let Self {
            cfg,
            model,
            opt,
            rngs,
            ssl_pool,
            ledger,
            ..
        } = self;
        let tokens = model.config().backbone.tokens();
        for batch in batches(&*ssl_pool, cfg.batch_size, derive_seed(cfg.seed, "ssl", 0), epoch)? {
            let n = batch.len();
            let mut images = batch.images;
            augment_batch(&mut images, cfg.augment(), &mut rngs.augment)?;
            let plans = draw_plans(&mut rngs.maskplan, n, tokens, cfg.mask_ratio)?;
            let out = ssl_step(model, &images, &plans, cfg.loss_target)?;
            apply(model, opt, ledger, sums, out, 0, n, lr)?;
        }
        Ok(())
    }

    fn task_epoch(&mut self, epoch: usize, lr: f64, mixing: bool, sums: &mut LossSums) -> Result<()> {
        let Self {
            cfg,
            model,
            opt,
            rngs,
            train,
            partner,
            ledger,
            ..
        } = self;
        let mixed: Vec<MixedDataset<T>> = if mixing {
            train
                .iter()
                .enumerate()
                .map(|(t, d)| MixedDataset::build(partner.as_ref().unwrap_or(d), d, cfg.lambda, t, &mut rngs.mixpair))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let sources: Vec<&dyn Examples<T>> = if mixing {
            mixed.iter().map(|m| m as &dyn Examples<T>).collect()
        } else {
            train.iter().map(|d| d as &dyn Examples<T>).collect()
        };
        let mut iters = sources
            .iter()
            .enumerate()
            .map(|(t, s)| batches(*s, cfg.batch_size, derive_seed(cfg.seed, "task", t as u64), epoch))
            .collect::<Result<Vec<_>>>()?;
        let sizes: Vec<usize> = sources.iter().map(|s| s.count()).collect();
        let tokens = model.config().backbone.tokens();
        for t in round_robin(&sizes, cfg.batch_size) {
            let batch: Batch<T> = iters[t].next().expect("round robin matches batch counts");
            let n = batch.len();
            let labels = batch.labels.expect("labeled task data");
            let mut images = batch.images;
            augment_batch(&mut images, cfg.augment(), &mut rngs.augment)?;
            let out = if mixing {
                let plans = draw_plans(&mut rngs.maskplan, n, tokens, cfg.mask_ratio)?;
                mix_step(
                    model,
                    &images,
                    &labels,
                    t,
                    &plans,
                    cfg.alpha,
                    cfg.loss_target,
                    cfg.head_parallel,
                )?
            } else {
                sl_step(model, &images, &labels, t)?
            };
            apply(model, opt, ledger, sums, out, t, n, lr)?;
        }
        Ok(())
    }

    fn evaluate(&mut self) -> Result<Vec<f64>> {
        let mut acc = Vec::with_capacity(self.test.len());
        for (t, ds) in self.test.iter().enumerate() {
            let out = accuracy(&self.model, ds, t, self.cfg.batch_size)?;
            self.ledger.eval_fwd += out.samples;
            self.ledger.mac_total += out.macs;
            acc.push(out.value);
        }
        Ok(acc)
    }

    /// Trains and evaluates the next epoch.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let slot = self
            .schedule
            .slot(epoch)
            .ok_or_else(|| Error::Validation(format!("run already finished after {epoch} epochs")))?;
        let start = Instant::now();
        let lr = lr_at(slot.phase, slot.epoch_in_phase, slot.phase_len, &self.cfg);
        let mut sums = LossSums::new(self.train.len());
        let acc = match slot.phase {
            Phase::Ssl => self.ssl_epoch(epoch, lr, &mut sums),
            Phase::Mix => self.task_epoch(epoch, lr, true, &mut sums),
            Phase::Sl => self.task_epoch(epoch, lr, false, &mut sums),
        }
        .and_then(|_| self.evaluate())
        .map_err(|e| Error::Aborted {
            epoch,
            source: Box::new(e),
        })?;
        self.ledger.wall_clock_s += start.elapsed().as_secs_f64();

        let l_ssl = LossSums::mean(sums.ssl);
        let l_sl_tasks: Vec<Option<f64>> = sums.sl.iter().map(|&s| LossSums::mean(s)).collect();
        let present: Vec<f64> = l_sl_tasks.iter().flatten().copied().collect();
        let l_sl = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        let (w_ssl, w_sl) = phase_weights(slot.phase, self.cfg.alpha);
        let record = EpochRecord {
            epoch,
            phase: slot.phase,
            epoch_in_phase: slot.epoch_in_phase,
            lr,
            l_ssl,
            l_sl,
            l_sl_tasks,
            joint: LossTerms::combine(l_ssl, l_sl, w_ssl, w_sl).joint,
            acc,
            ledger: self.ledger,
        };
        self.records.push(record.clone());
        self.epoch += 1;
        Ok(record)
    }

    /// Runs the remaining epochs, calling `hook` after each one.
    pub fn run(&mut self, mut hook: impl FnMut(&Self, &EpochRecord) -> Result<()>) -> Result<()> {
        while !self.finished() {
            let rec = self.run_epoch()?;
            hook(self, &rec)?;
        }
        Ok(())
    }

    /// Mean over tasks of the held-out reconstruction MSE (all patches, fixed masks).
    pub fn heldout_mse(&self) -> Result<f64> {
        let mut total = 0.0;
        for ds in &self.test {
            total += reconstruction_mse(&self.model, ds, self.cfg.batch_size)?;
        }
        Ok(total / self.test.len() as f64)
    }

    /// Multiply-accumulates the full schedule should execute, from the
    /// analytic per-sample model costs and the data sizes.
    pub fn predicted_macs(&self) -> Result<u64> {
        let s = &self.schedule;
        let n_ssl = self.ssl_pool.len() as u64;
        let mut total = 0u64;
        for (t, (tr, te)) in self.train.iter().zip(&self.test).enumerate() {
            let m = self.model.mac_profile(t)?;
            let bb = m.backbone_fwd + m.backbone_bwd;
            let recon = m.recon_fwd + m.recon_bwd;
            let cls = m.cls_fwd + m.cls_bwd;
            let n = tr.len() as u64;
            total += s.e_mix as u64 * n * (bb + recon + cls);
            total += s.pure_sl_epochs as u64 * n * (bb + cls);
            total += s.total_epochs as u64 * te.len() as u64 * (m.backbone_fwd + m.cls_fwd);
            if t == 0 {
                total += s.pure_ssl_epochs as u64 * n_ssl * (bb + recon);
            }
        }
        Ok(total)
    }

    pub fn snapshot(&self) -> TrainerState<T> {
        TrainerState {
            params: self.model.params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            opt: self.opt.clone(),
            rng: self.rngs.export(),
            epoch: self.epoch,
            ledger: self.ledger,
            records: self.records.clone(),
        }
    }

    /// Continues from a saved state taken from a trainer with the same
    /// configuration and sources.
    pub fn restore(&mut self, state: TrainerState<T>) -> Result<()> {
        if state.epoch > self.schedule.total_epochs || state.records.len() != state.epoch {
            return Err(Error::Validation(format!(
                "state at epoch {} with {} records does not fit a {}-epoch schedule",
                state.epoch,
                state.records.len(),
                self.schedule.total_epochs
            )));
        }
        let fits = state.opt.m.len() == self.model.params.len()
            && state.opt.v.len() == state.opt.m.len()
            && state.opt.steps.len() == state.opt.m.len()
            && self
                .model
                .params
                .iter()
                .zip(state.opt.m.iter().zip(&state.opt.v))
                .all(|((_, p), (m, v))| m.shape() == p.value.shape() && v.shape() == p.value.shape());
        if !fits {
            return Err(Error::Validation("optimizer state does not match the model".into()));
        }
        let rngs = RngStreams::import(&state.rng)?;
        self.model.params.load_values(state.params)?;
        self.opt = state.opt;
        self.rngs = rngs;
        self.epoch = state.epoch;
        self.ledger = state.ledger;
        self.records = state.records;
        Ok(())
    }

    /// Summary of the run so far.
    pub fn result(&self, recon_mse: Option<f64>) -> RunResult {
        let final_acc = self.records.last().map(|r| r.acc.clone()).unwrap_or_default();
        let mean_acc = final_acc.iter().sum::<f64>() / final_acc.len().max(1) as f64;
        RunResult {
            method: self.cfg.method,
            dataset: self.cfg.dataset_label(),
            p: self.cfg.p,
            seed: self.cfg.seed,
            config: self.cfg.to_kv(),
            schedule: self.schedule,
            records: self.records.clone(),
            final_acc,
            mean_acc,
            ledger: self.ledger,
            recon_mse,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn apply<T: Scalar>(
    model: &mut MixModel<T>,
    opt: &mut AdamW<T>,
    ledger: &mut FlopLedger,
    sums: &mut LossSums,
    out: StepOutput<T>,
    task: usize,
    n: usize,
    lr: f64,
) -> Result<()> {
    opt.step(&mut model.params, &out.grads, lr)?;
    *ledger += out.ledger;
    sums.add(&out.terms, task, n);
    Ok(())
}

/// Runs a full schedule and measures held-out reconstruction afterwards.
pub fn train<T: Scalar>(cfg: &TrainConfig, sources: &Sources<T>) -> Result<RunResult> {
    let mut trainer = Trainer::new(cfg, sources)?;
    trainer.run(|_, _| Ok(()))?;
    let mse = trainer.heldout_mse()?;
    Ok(trainer.result(Some(mse)))
}

/// As [`train`], checking that the configuration names one source per task.
pub fn train_multitask<T: Scalar>(cfg: &TrainConfig, sources: &Sources<T>) -> Result<RunResult> {
    if !cfg.data.is_empty() && cfg.data.len() != sources.tasks.len() {
        return Err(Error::Validation(format!(
            "{} task sources configured, {} provided",
            cfg.data.len(),
            sources.tasks.len()
        )));
    }
    train(cfg, sources)
}
