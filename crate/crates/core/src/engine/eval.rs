use crate::data::{Batch, Dataset, Examples};
use crate::error::{Error, Result};
use crate::nn::{batch_tokens, make_mask_plan, Binder, LossTarget, MaskPlan, MixModel};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tape, Tensor};

/// Forward-only features of a stacked image batch, with the tape's MAC count.
fn features<T: Scalar>(model: &MixModel<T>, images: &Tensor<T>) -> Result<(Tape<T>, crate::tensor::Var, Tensor<T>)> {
    let tokens = batch_tokens(images, &model.config().backbone)?;
    let mut tape = Tape::new();
    let tok = tape.constant(tokens.clone());
    let f = {
        let mut b = Binder::new(&mut tape, &model.params, false);
        model.encode(&mut b, tok)?
    };
    Ok((tape, f, tokens))
}

fn chunks(n: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    let bs = batch_size.max(1);
    (0..n.div_ceil(bs)).map(move |k| (k * bs..((k + 1) * bs).min(n)).collect())
}

/// Result of an evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOutcome {
    pub value: f64,
    pub samples: u64,
    pub macs: u64,
}

/// Top-1 accuracy in percent of the head of `task_id` on a labeled dataset.
pub fn accuracy<T: Scalar>(model: &MixModel<T>, ds: &Dataset<T>, task_id: usize, batch_size: usize) -> Result<EvalOutcome> {
    if !ds.is_labeled() || ds.is_empty() {
        return Err(Error::Validation(format!("{}: accuracy needs labeled items", ds.name)));
    }
    let (mut correct, mut macs) = (0usize, 0u64);
    for idx in chunks(ds.len(), batch_size) {
        let batch = Batch::gather(ds, &idx)?;
        let (mut tape, f, _) = features(model, &batch.images)?;
        let logits = {
            let mut b = Binder::new(&mut tape, &model.params, false);
            model.classify(&mut b, f, task_id)?
        };
        let out = tape.value(logits);
        let classes = out.shape()[1];
        let labels = batch.labels.as_ref().expect("labeled");
        for (row, &y) in out.data().chunks(classes).zip(labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0;
            correct += (pred == y) as usize;
        }
        macs += tape.macs();
    }
    Ok(EvalOutcome {
        value: 100.0 * correct as f64 / ds.len() as f64,
        samples: ds.len() as u64,
        macs,
    })
}

/// Mask plans used for evaluation: fixed per sample position, independent of
/// training randomness.
pub fn eval_mask_plans(tokens: usize, ratio: f64, indices: &[usize]) -> Result<Vec<MaskPlan>> {
    indices
        .iter()
        .map(|&i| make_mask_plan(tokens, ratio, derive_seed(0, "evalmask", i as u64)))
        .collect()
}

/// Mean per-sample reconstruction MSE over every patch, with fixed masks.
pub fn reconstruction_mse<E: Examples<T> + ?Sized, T: Scalar>(
    model: &MixModel<T>,
    src: &E,
    batch_size: usize,
) -> Result<f64> {
    Ok(per_sample_mse(model, src, batch_size)?.iter().sum::<f64>() / src.count().max(1) as f64)
}

/// Reconstruction MSE of each sample (all patches, fixed masks).
pub fn per_sample_mse<E: Examples<T> + ?Sized, T: Scalar>(
    model: &MixModel<T>,
    src: &E,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(src.count());
    for idx in chunks(src.count(), batch_size) {
        let (pred, target) = reconstruct_batch(model, src, &idx)?;
        let per = pred.numel() / idx.len();
        for (p, t) in pred.data().chunks(per).zip(target.data().chunks(per)) {
            let s: f64 = p.iter().zip(t).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
            out.push(s / per as f64);
        }
    }
    Ok(out)
}

/// Decoder predictions and targets `[b, t, patch_dim]` for items `idx`.
pub fn reconstruct_batch<E: Examples<T> + ?Sized, T: Scalar>(
    model: &MixModel<T>,
    src: &E,
    idx: &[usize],
) -> Result<(Tensor<T>, Tensor<T>)> {
    let batch = Batch::gather(src, idx)?;
    let cfg = model.config();
    let plans = eval_mask_plans(cfg.backbone.tokens(), cfg.mask_ratio, idx)?;
    let (mut tape, f, tokens) = features(model, &batch.images)?;
    let pred = {
        let mut b = Binder::new(&mut tape, &model.params, false);
        model.decode(&mut b, f, &plans)?
    };
    Ok((tape.value(pred).clone(), tokens))
}

/// Engine-side reconstruction loss on the same samples, via the training loss path.
pub fn reconstruction_loss_all<E: Examples<T> + ?Sized, T: Scalar>(
    model: &MixModel<T>,
    src: &E,
    idx: &[usize],
) -> Result<f64> {
    let batch = Batch::gather(src, idx)?;
    let cfg = model.config();
    let plans = eval_mask_plans(cfg.backbone.tokens(), cfg.mask_ratio, idx)?;
    let (mut tape, f, tokens) = features(model, &batch.images)?;
    let loss = {
        let mut b = Binder::new(&mut tape, &model.params, false);
        let target = b.tape.constant(tokens);
        model.reconstruct(&mut b, f, &plans, target, LossTarget::All)?
    };
    Ok(tape.value(loss).item().as_f64())
}
