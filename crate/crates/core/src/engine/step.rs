//! One optimizer step's forward/backward work.
//!
//! The backbone runs once per batch on its own tape. Each active head then runs
//! on a separate tape whose input is a gradient-carrying copy of the features;
//! its weighted loss is backpropagated to yield head gradients and a feature
//! gradient. Feature gradients are summed in a fixed order (reconstruction
//! first, then classification) and pushed through a single backbone backward.

use serde::{Deserialize, Serialize};

use super::FlopLedger;
use crate::error::{Error, Result};
use crate::nn::{batch_tokens, Binder, GradStore, LossTarget, MaskPlan, MixModel};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Loss values of one step or one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_ssl: Option<f64>,
    pub l_sl: Option<f64>,
    pub joint: f64,
}

impl LossTerms {
    /// `w_ssl·l_ssl + w_sl·l_sl` over the terms present.
    pub fn combine(l_ssl: Option<f64>, l_sl: Option<f64>, w_ssl: f64, w_sl: f64) -> Self {
        let joint = w_ssl * l_ssl.unwrap_or(0.0) + w_sl * l_sl.unwrap_or(0.0);
        Self { l_ssl, l_sl, joint }
    }
}

/// Inputs of a merged step. A head is active when its inputs are present.
#[derive(Clone, Copy, Debug)]
pub struct StepInput<'a, T> {
    /// `[B, C, H, W]`
    pub images: &'a Tensor<T>,
    /// Mask plans per sample; enables the reconstruction head.
    pub plans: Option<&'a [MaskPlan]>,
    /// Labels and task id; enable that task's classification head.
    pub labels: Option<(&'a [usize], usize)>,
    pub w_ssl: f64,
    pub w_sl: f64,
    pub loss_target: LossTarget,
    /// Run the two heads on separate threads.
    pub head_parallel: bool,
}

#[derive(Debug)]
pub struct StepOutput<T> {
    pub terms: LossTerms,
    pub grads: GradStore<T>,
    /// Passes and multiply-accumulates of this step.
    pub ledger: FlopLedger,
}

struct HeadResult<T> {
    loss: f64,
    grads: GradStore<T>,
    d_features: Tensor<T>,
    macs: u64,
}

fn run_head<T: Scalar>(
    model: &MixModel<T>,
    features: &Tensor<T>,
    weight: f64,
    build: impl FnOnce(&mut Binder<'_, T>, Var) -> Result<Var>,
) -> Result<HeadResult<T>> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone(), true);
    let loss = {
        let mut b = Binder::new(&mut tape, &model.params, true);
        build(&mut b, f)?
    };
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("head loss is {value}")));
    }
    let scaled = tape.scale(loss, T::lit(weight))?;
    let mut grads = tape.backward(scaled)?;
    let d_features = grads
        .take(f)
        .unwrap_or_else(|| Tensor::zeros(features.shape().to_vec()));
    let mut store = GradStore::new(model.params.len());
    store.absorb(&tape, &mut grads)?;
    Ok(HeadResult {
        loss: value,
        grads: store,
        d_features,
        macs: tape.macs(),
    })
}

/// Shared-backbone step over whichever heads `input` activates.
pub fn merged_step<T: Scalar>(model: &MixModel<T>, input: StepInput<'_, T>) -> Result<StepOutput<T>> {
    let n = input.images.shape().first().copied().unwrap_or(0);
    if input.plans.is_none() && input.labels.is_none() {
        return Err(Error::Validation("step with no active head".into()));
    }
    if let Some(p) = input.plans {
        if p.len() != n {
            return Err(Error::Validation(format!("{} mask plans for batch of {n}", p.len())));
        }
    }
    if let Some((labels, task)) = input.labels {
        model.head(task)?;
        if labels.len() != n {
            return Err(Error::Validation(format!("{} labels for batch of {n}", labels.len())));
        }
    }
    let tokens = batch_tokens(input.images, &model.config().backbone)?;

    let mut bb_tape = Tape::new();
    let feats = {
        let tok = bb_tape.constant(tokens.clone());
        let mut b = Binder::new(&mut bb_tape, &model.params, true);
        model.encode(&mut b, tok)?
    };
    let features = bb_tape.value(feats).clone();

    let recon = |plans: &[MaskPlan]| {
        run_head(model, &features, input.w_ssl, |b, f| {
            let target = b.tape.constant(tokens.clone());
            model.reconstruct(b, f, plans, target, input.loss_target)
        })
    };
    let classify = |labels: &[usize], task: usize| {
        run_head(model, &features, input.w_sl, |b, f| {
            let logits = model.classify(b, f, task)?;
            b.tape.softmax_cross_entropy(logits, labels)
        })
    };
    let (r, c) = match (input.plans, input.labels) {
        (Some(plans), Some((labels, task))) if input.head_parallel => std::thread::scope(|s| {
            let handle = s.spawn(|| recon(plans));
            let c = classify(labels, task);
            let r = handle.join().expect("reconstruction head thread panicked");
            (Some(r), Some(c))
        }),
        (plans, labels) => (plans.map(recon), labels.map(|(l, t)| classify(l, t))),
    };
    let r = r.transpose()?;
    let c = c.transpose()?;

    let mut seed = Tensor::zeros(features.shape().to_vec());
    let mut grads = GradStore::new(model.params.len());
    let mut ledger = FlopLedger {
        backbone_fwd: n as u64,
        backbone_bwd: n as u64,
        ..Default::default()
    };
    for (head, is_recon) in [(r.as_ref(), true), (c.as_ref(), false)] {
        let Some(h) = head else { continue };
        seed.add_assign(&h.d_features)?;
        ledger.mac_total += h.macs;
        if is_recon {
            ledger.ssl_head_fwd += n as u64;
            ledger.ssl_head_bwd += n as u64;
        } else {
            ledger.sl_head_fwd += n as u64;
            ledger.sl_head_bwd += n as u64;
        }
    }
    let mut bb_grads = bb_tape.backward_from(feats, seed)?;
    grads.absorb(&bb_tape, &mut bb_grads)?;
    ledger.mac_total += bb_tape.macs();
    let terms = LossTerms::combine(r.as_ref().map(|h| h.loss), c.as_ref().map(|h| h.loss), input.w_ssl, input.w_sl);
    for h in [r, c].into_iter().flatten() {
        grads.merge(h.grads)?;
    }
    Ok(StepOutput { terms, grads, ledger })
}

/// Reconstruction-only step.
pub fn ssl_step<T: Scalar>(
    model: &MixModel<T>,
    images: &Tensor<T>,
    plans: &[MaskPlan],
    loss_target: LossTarget,
) -> Result<StepOutput<T>> {
    merged_step(
        model,
        StepInput {
            images,
            plans: Some(plans),
            labels: None,
            w_ssl: 1.0,
            w_sl: 0.0,
            loss_target,
            head_parallel: false,
        },
    )
}

/// Classification-only step.
pub fn sl_step<T: Scalar>(
    model: &MixModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    task_id: usize,
) -> Result<StepOutput<T>> {
    merged_step(
        model,
        StepInput {
            images,
            plans: None,
            labels: Some((labels, task_id)),
            w_ssl: 0.0,
            w_sl: 1.0,
            loss_target: LossTarget::default(),
            head_parallel: false,
        },
    )
}

/// Joint step: one backbone pass feeding both heads, objective
/// `alpha·l_ssl + (1−alpha)·l_sl`.
#[allow(clippy::too_many_arguments)]
pub fn mix_step<T: Scalar>(
    model: &MixModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    task_id: usize,
    plans: &[MaskPlan],
    alpha: f64,
    loss_target: LossTarget,
    head_parallel: bool,
) -> Result<StepOutput<T>> {
    merged_step(
        model,
        StepInput {
            images,
            plans: Some(plans),
            labels: Some((labels, task_id)),
            w_ssl: alpha,
            w_sl: 1.0 - alpha,
            loss_target,
            head_parallel,
        },
    )
}
