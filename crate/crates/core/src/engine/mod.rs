//! Trainers for the three methods, the merged step and pass accounting.

mod bench;
mod eval;
mod step;
mod trainer;

use serde::{Deserialize, Serialize};

pub use bench::{benchmark, BenchRow, BenchRun};
pub use eval::{
    accuracy, eval_mask_plans, per_sample_mse, reconstruct_batch, reconstruction_loss_all, reconstruction_mse,
    EvalOutcome,
};
pub use step::{merged_step, mix_step, sl_step, ssl_step, LossTerms, StepInput, StepOutput};
pub use trainer::{
    load_sources, train, train_multitask, EpochRecord, RunResult, Sources, TaskSource, Trainer,
    TrainerState,
};

/// Work done by a run.
///
/// Pass counters are in sample-passes over training batches; evaluation
/// forwards are counted separately in `eval_fwd`. `mac_total` covers every
/// matrix product executed, training and evaluation alike.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub backbone_fwd: u64,
    pub backbone_bwd: u64,
    pub ssl_head_fwd: u64,
    pub ssl_head_bwd: u64,
    pub sl_head_fwd: u64,
    pub sl_head_bwd: u64,
    pub eval_fwd: u64,
    pub mac_total: u64,
    pub wall_clock_s: f64,
}

impl std::ops::AddAssign for FlopLedger {
    fn add_assign(&mut self, o: Self) {
        self.backbone_fwd += o.backbone_fwd;
        self.backbone_bwd += o.backbone_bwd;
        self.ssl_head_fwd += o.ssl_head_fwd;
        self.ssl_head_bwd += o.ssl_head_bwd;
        self.sl_head_fwd += o.sl_head_fwd;
        self.sl_head_bwd += o.sl_head_bwd;
        self.eval_fwd += o.eval_fwd;
        self.mac_total += o.mac_total;
        self.wall_clock_s += o.wall_clock_s;
    }
}

impl FlopLedger {
    /// Backbone forward passes expressed in epochs over `n` samples.
    pub fn backbone_epochs(&self, n: usize) -> f64 {
        self.backbone_fwd as f64 / n as f64
    }

    /// Copy with timing removed, for comparing runs.
    pub fn untimed(&self) -> Self {
        Self {
            wall_clock_s: 0.0,
            ..*self
        }
    }
}
