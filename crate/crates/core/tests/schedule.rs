use mixtrain::config::{Method, TrainConfig};
use mixtrain::nn::{GradStore, ParamGroup, ParamId, ParamStore};
use mixtrain::schedule::{lr_at, plan, warmup_cosine, AdamW, Phase, PhaseSchedule};
use mixtrain::tensor::Tensor;
use mixtrain::Error;
use proptest::prelude::*;

#[test]
fn full_grid_satisfies_phase_invariants() {
    for e_ssl in 0..=200usize {
        for e_sl in 0..=200usize {
            for rho in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let s = PhaseSchedule::merged(e_ssl, e_sl, rho);
                // exact integer form of floor(rho * min) for quarter steps
                let q = (rho * 4.0) as usize;
                let want = if e_ssl == 0 || e_sl == 0 { 0 } else { q * e_ssl.min(e_sl) / 4 };
                assert_eq!(s.e_mix, want);
                assert_eq!(s.pure_ssl_epochs + s.e_mix, e_ssl);
                assert_eq!(s.pure_sl_epochs + s.e_mix, e_sl);
                assert_eq!(s.total_epochs, e_ssl + e_sl - s.e_mix);
                assert_eq!(s.total_epochs == e_ssl + e_sl, s.e_mix == 0);
            }
        }
    }
}

proptest! {
    #[test]
    fn schedule_slots_cover_every_epoch(e_ssl in 0usize..40, e_sl in 0usize..40, rho in 0.0f64..=1.0) {
        let s = PhaseSchedule::merged(e_ssl, e_sl, rho);
        let mut counts = [0usize; 3];
        for e in 0..s.total_epochs {
            let slot = s.slot(e).unwrap();
            prop_assert!(slot.epoch_in_phase < slot.phase_len);
            counts[match slot.phase { Phase::Ssl => 0, Phase::Mix => 1, Phase::Sl => 2 }] += 1;
        }
        prop_assert_eq!(counts, [s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs]);
        prop_assert!(s.slot(s.total_epochs).is_none());
    }

    #[test]
    fn lr_is_bounded_and_continuous_at_warmup_end(base in 1e-5f64..1.0, w in 1usize..30, extra in 1usize..100) {
        let len = w + extra;
        for e in 0..len {
            let lr = warmup_cosine(base, w, e, len);
            prop_assert!(lr > 0.0 && lr <= base * (1.0 + 1e-12));
        }
        // last warmup epoch and first cosine epoch both sit at the base rate
        prop_assert!((warmup_cosine(base, w, w - 1, len) - base).abs() <= 1e-12 * base);
        prop_assert!((warmup_cosine(base, w, w, len) - base).abs() <= 1e-12 * base);
    }
}

#[test]
fn lr_policy_per_phase() {
    let cfg = TrainConfig {
        method: Method::MixTraining,
        e_ssl: 100,
        e_sl: 100,
        warmup_ssl: Some(20),
        warmup_sl: Some(5),
        ..Default::default()
    };
    assert_eq!(lr_at(Phase::Ssl, 0, 50, &cfg), cfg.base_lr_ssl / 20.0);
    assert_eq!(lr_at(Phase::Sl, 4, 50, &cfg), cfg.base_lr_sl);
    assert_eq!(lr_at(Phase::Mix, 9, 50, &cfg), cfg.base_lr_ssl);
    assert_eq!(plan(&cfg).total_epochs, 150);
}

/// Scalar reference of the AdamW recurrence.
fn adamw_ref(w: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> f64 {
    let (mut w, mut m, mut v) = (w, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        w *= 1.0 - lr * wd;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
    }
    w
}

fn store(values: &[f64], decay: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.push("w", ParamGroup::Backbone, Tensor::new(vec![values.len()], values.to_vec()).unwrap(), decay);
    s
}

fn grads(g: &[f64]) -> GradStore<f64> {
    let mut gs = GradStore::new(1);
    gs.accumulate(ParamId(0), Tensor::new(vec![g.len()], g.to_vec()).unwrap()).unwrap();
    gs
}

#[test]
fn adamw_matches_scalar_reference() {
    let seq = [[0.5, -2.0, 1e-3], [0.1, 3.0, -1e-3], [-0.7, 0.0, 2.0]];
    let init = [1.0, -0.5, 0.25];
    let mut p = store(&init, true);
    let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.05);
    for g in &seq {
        opt.step(&mut p, &grads(g), 0.01).unwrap();
    }
    for k in 0..3 {
        let col: Vec<f64> = seq.iter().map(|g| g[k]).collect();
        let want = adamw_ref(init[k], &col, 0.01, 0.9, 0.95, 1e-8, 0.05);
        let got = p.get(ParamId(0)).value.data()[k];
        assert!((got - want).abs() <= 1e-15, "{got} vs {want}");
    }
}

#[test]
fn first_step_moves_by_about_lr_against_the_gradient() {
    let mut p = store(&[0.0, 0.0], false);
    let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.0);
    opt.step(&mut p, &grads(&[3.0, -0.2]), 0.1).unwrap();
    let w = p.get(ParamId(0)).value.data();
    assert!((w[0] + 0.1).abs() < 1e-8 && (w[1] - 0.1).abs() < 1e-8);
}

#[test]
fn zero_gradient_and_pure_decay() {
    let mut p = store(&[1.5, -2.0], false);
    let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.0);
    opt.step(&mut p, &grads(&[0.0, 0.0]), 1.0).unwrap();
    assert_eq!(p.get(ParamId(0)).value.data(), &[1.5, -2.0]);

    let mut p = store(&[1.5, -2.0], true);
    let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.1);
    opt.step(&mut p, &grads(&[0.0, 0.0]), 1.0).unwrap();
    assert_eq!(p.get(ParamId(0)).value.data(), &[1.5 * 0.9, -2.0 * 0.9]);

    // decay skipped where flagged off
    let mut p = store(&[1.5], false);
    let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.1);
    opt.step(&mut p, &grads(&[0.0]), 1.0).unwrap();
    assert_eq!(p.get(ParamId(0)).value.data(), &[1.5]);
}

#[test]
fn untouched_parameters_keep_their_state() {
    let mut p = store(&[1.0], true);
    let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.1);
    opt.step(&mut p, &GradStore::new(1), 1.0).unwrap();
    assert_eq!(p.get(ParamId(0)).value.data(), &[1.0]);
    assert_eq!(opt.steps, vec![0]);
}

#[test]
fn nan_gradient_aborts_without_side_effects() {
    let mut p = store(&[1.0, 2.0], true);
    let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.1);
    let before = (p.get(ParamId(0)).value.clone(), opt.clone());
    let err = opt.step(&mut p, &grads(&[f64::NAN, 0.0]), 0.1).unwrap_err();
    assert!(matches!(err, Error::NonFinite(m) if m.contains('w')));
    assert_eq!(before, (p.get(ParamId(0)).value.clone(), opt));
}

#[test]
fn adamw_is_deterministic() {
    let run = || {
        let mut p = store(&[0.3, -0.1, 0.7], true);
        let mut opt = AdamW::new(&p, 0.9, 0.95, 1e-8, 0.05);
        for i in 0..5 {
            opt.step(&mut p, &grads(&[0.1 * i as f64, -0.2, 0.05]), 1e-2).unwrap();
        }
        p.get(ParamId(0)).value.clone()
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.shape(), &[3]);
}
