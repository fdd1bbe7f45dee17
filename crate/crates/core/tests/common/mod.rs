//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod grad;

use mixtrain::nn::{Binder, GradStore, MixModel};
use mixtrain::tensor::{Tape, Tensor, Var};
use mixtrain::Result;
use mixtrain::config::{Method, TrainConfig};
use mixtrain::data::{Dataset, SyntheticSpec};
use mixtrain::engine::{mix_step, sl_step, ssl_step, Sources};
use mixtrain::nn::{make_mask_plan, LossTarget, MaskPlan, ParamGroup};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use mixtrain::tensor::Scalar;

pub const FD_STEP: f64 = 1e-4;

/// Denominator floor for relative errors, so entries whose true gradient is
/// numerically zero are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Max relative error between tape gradients and central finite differences
/// of `f` with respect to every element of every input.
pub fn check_op(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(loss).unwrap();
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let l = f(&mut tape, &vars).unwrap();
        tape.value(l).item()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(|g| g.to_f64()).unwrap_or(vec![0.0; input.numel()]);
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

/// Central finite-difference gradient of `loss(model)` w.r.t. every parameter.
pub fn fd_param_grads(
    model: &MixModel<f64>,
    loss: &dyn Fn(&MixModel<f64>) -> f64,
) -> Vec<Vec<f64>> {
    let mut m = model.clone();
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    let mut out = Vec::new();
    for id in ids {
        let n = model.params.get(id).value.numel();
        let mut g = vec![0.0; n];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = m.params.get(id).value.data()[j];
            m.params.get_mut(id).value.data_mut()[j] = orig + FD_STEP;
            let lp = loss(&m);
            m.params.get_mut(id).value.data_mut()[j] = orig - FD_STEP;
            let lm = loss(&m);
            m.params.get_mut(id).value.data_mut()[j] = orig;
            *gj = (lp - lm) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Evaluates a loss built on one monolithic tape and returns its parameter gradients.
pub fn tape_param_grads(
    model: &MixModel<f64>,
    build: &dyn Fn(&MixModel<f64>, &mut Binder<'_, f64>) -> Result<Var>,
) -> (f64, GradStore<f64>) {
    let mut tape = Tape::new();
    let loss = {
        let mut b = Binder::new(&mut tape, &model.params, true);
        build(model, &mut b).unwrap()
    };
    let value = tape.value(loss).item();
    let mut grads = tape.backward(loss).unwrap();
    let mut store = GradStore::new(model.params.len());
    store.absorb(&tape, &mut grads).unwrap();
    (value, store)
}

/// Deterministic pseudo-random values in [lo, hi].
pub fn uniform(n: usize, seed: u64, lo: f64, hi: f64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// Small transformer config used across the suites.
pub fn tiny_cfg(method: Method) -> TrainConfig {
    TrainConfig {
        method,
        e_ssl: 2,
        e_sl: 2,
        rho: 0.5,
        batch_size: 16,
        base_lr_ssl: 1e-3,
        base_lr_sl: 1e-3,
        augment_pad: 0,
        augment_flip: false,
        patch_size: 4,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        ..Default::default()
    }
}

pub fn tiny_data<T: Scalar>(seed: u64) -> Dataset<T> {
    SyntheticSpec {
        classes: 3,
        per_class: 20,
        height: 8,
        width: 8,
        seed,
        ..Default::default()
    }
    .generate()
    .unwrap()
    .0
}

pub fn tiny_sources<T: Scalar>() -> Sources<T> {
    Sources::single(tiny_data(7), None)
}

/// 64-bit model on 8x8 inputs for step-level oracles.
pub fn toy_model(seed: u64) -> MixModel<f64> {
    let cfg = tiny_cfg(Method::MixTraining).model_config(1, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MixModel::new(cfg, &[(0, 3)], &mut rng).unwrap()
}

pub fn toy_batch(seed: u64, n: usize) -> (Tensor<f64>, Vec<usize>, Vec<MaskPlan>) {
    let images = Tensor::new(vec![n, 1, 8, 8], uniform(n * 64, seed, -1.0, 1.0)).unwrap();
    let labels = (0..n).map(|i| (i + seed as usize) % 3).collect();
    let plans = (0..n).map(|i| make_mask_plan(4, 0.5, seed * 100 + i as u64).unwrap()).collect();
    (images, labels, plans)
}

/// Max |merged − (alpha·ssl + (1−alpha)·sl)| over backbone gradients and the
/// joint loss, across `trials` random models, batches, masks and alphas.
pub fn merged_oracle_deviation(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for trial in 0..trials {
        let model = toy_model(trial);
        let (images, labels, plans) = toy_batch(trial + 1, 5);
        let alpha = uniform(1, trial + 50, 0.0, 1.0)[0];
        let mixed = mix_step(&model, &images, &labels, 0, &plans, alpha, LossTarget::Masked, false).unwrap();
        let ssl = ssl_step(&model, &images, &plans, LossTarget::Masked).unwrap();
        let sl = sl_step(&model, &images, &labels, 0).unwrap();
        for (id, p) in model.params.iter() {
            if p.group != ParamGroup::Backbone {
                continue;
            }
            let g = mixed.grads.get(id).unwrap().data();
            let a = ssl.grads.get(id).unwrap().data();
            let b = sl.grads.get(id).unwrap().data();
            for k in 0..g.len() {
                worst = worst.max((g[k] - (alpha * a[k] + (1.0 - alpha) * b[k])).abs());
            }
        }
        let want = alpha * ssl.terms.joint + (1.0 - alpha) * sl.terms.joint;
        worst = worst.max((mixed.terms.joint - want).abs());
    }
    worst
}
