//! Gradient checks shared by the unit suite and the acceptance harness.

use super::{check_op, fd_param_grads, rel_err, tape_param_grads, uniform};
use mixtrain::nn::{
    make_mask_plan, patchify, BackboneConfig, BackboneKind, Binder, DecoderConfig, LossTarget, MixModel, ModelConfig,
};
use mixtrain::tensor::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;

pub fn rnd(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_f64(shape.to_vec(), &uniform(n, seed, -2.0, 2.0)).unwrap()
}

/// Max relative error of every differentiable op against central differences.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let a = rnd(&[3, 4], 1);
    let b = rnd(&[3, 4], 2);
    let s = rnd(&[], 3);
    let err = check_op(&[a.clone(), b.clone()], |t, v| {
        let x = t.add(v[0], v[1])?;
        let y = t.sub(x, v[1])?;
        let z = t.mul(y, v[1])?;
        t.sum(z)
    });
    out.push(("add/sub/mul", err));
    let err = check_op(&[a.clone(), s], |t, v| {
        let x = t.mul(v[0], v[1])?;
        let y = t.add(x, v[1])?;
        let z = t.mul(y, y)?;
        t.mean(z)
    });
    out.push(("scalar broadcast", err));
    let err = check_op(&[a.clone()], |t, v| {
        let x = t.scale(v[0], 0.7)?;
        let r = t.relu(x)?;
        let g = t.gelu(x)?;
        let e = t.exp(g)?;
        let p = t.mul(r, e)?;
        t.sum(p)
    });
    out.push(("scale/relu/gelu/exp", err));
    let pos = Tensor::from_f64(vec![5], &uniform(5, 4, 0.5, 2.0)).unwrap();
    let err = check_op(&[pos], |t, v| {
        let l = t.log(v[0])?;
        let l2 = t.mul(l, l)?;
        t.sum(l2)
    });
    out.push(("log", err));

    let err = check_op(&[rnd(&[2, 3, 4], 7), rnd(&[4, 5], 8), rnd(&[5], 9)], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let y2 = t.mul(y, y)?;
        t.mean(y2)
    });
    out.push(("linear", err));

    let err = check_op(&[rnd(&[2, 3, 4], 10), rnd(&[3, 4], 11)], |t, v| {
        let y = t.add_tiled(v[0], v[1])?;
        let y2 = t.mul(y, y)?;
        t.sum(y2)
    });
    out.push(("add_tiled", err));

    let w = rnd(&[2, 3, 5], 15);
    let err = check_op(&[rnd(&[2, 3, 5], 12), rnd(&[5], 13), rnd(&[5], 14)], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
        let c = t.constant(w.clone());
        let y = t.mul(y, c)?;
        t.sum(y)
    });
    out.push(("layer_norm", err));

    let w = rnd(&[2, 4, 6], 17);
    let err = check_op(&[rnd(&[2, 4, 18], 16)], |t, v| {
        let y = t.attention(v[0], 3)?;
        let c = t.constant(w.clone());
        let y = t.mul(y, c)?;
        t.sum(y)
    });
    out.push(("attention", err));

    let w = rnd(&[2, 3], 19);
    let err = check_op(&[rnd(&[2, 4, 3], 18)], |t, v| {
        let y = t.mean_tokens(v[0])?;
        let c = t.constant(w.clone());
        let y = t.mul(y, c)?;
        t.sum(y)
    });
    out.push(("mean_tokens", err));

    let rows = [true, false, false, true, true, false];
    let w = rnd(&[2, 3, 4], 22);
    let err = check_op(&[rnd(&[2, 3, 4], 20), rnd(&[4], 21)], |t, v| {
        let y = t.replace_rows(v[0], v[1], &rows)?;
        let c = t.constant(w.clone());
        let y = t.mul(y, c)?;
        t.sum(y)
    });
    out.push(("replace_rows", err));

    let err = check_op(&[rnd(&[3, 4], 23)], |t, v| t.softmax_cross_entropy(v[0], &[0, 3, 1]));
    out.push(("cross entropy", err));

    let mask = [true, false, true, true, false, true];
    let err = check_op(&[rnd(&[2, 3], 24), rnd(&[2, 3], 25)], |t, v| t.mse(v[0], v[1], Some(&mask)));
    out.push(("mse", err));

    let err = check_op(&[rnd(&[2, 3], 26)], |t, v| {
        let r = t.reshape(v[0], &[3, 2])?;
        let c = t.constant(Tensor::from_f64(vec![2, 2], &[1.0, -1.0, 0.5, 2.0]).unwrap());
        let m = t.matmul(r, c)?;
        let m2 = t.mul(m, m)?;
        t.sum(m2)
    });
    out.push(("reshape", err));
    let err = check_op(&[rnd(&[3, 4], 5), rnd(&[4, 2], 6)], |t, v| {
        let c = t.matmul(v[0], v[1])?;
        let c2 = t.mul(c, c)?;
        t.sum(c2)
    });
    out.push(("matmul", err));
    out
}

pub fn toy_config(kind: BackboneKind) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_height: 4,
            input_width: 4,
            channels: 1,
            patch_size: 2,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            kind,
            mlp_ratio: 2,
        },
        decoder: DecoderConfig {
            embed_dim: 8,
            depth: 2,
            num_heads: 2,
        },
        mask_ratio: 0.5,
    }
}

/// Scales init so gradients are not dominated by the 0.02 init scale.
pub fn perturb(model: &mut MixModel<f64>, seed: u64) {
    let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = model.params.get_mut(id);
        let n = p.value.numel();
        let noise = uniform(n, seed + k as u64, -0.3, 0.3);
        for (v, z) in p.value.data_mut().iter_mut().zip(noise) {
            *v += z;
        }
    }
}

/// Max relative error of the parameter gradients of `alpha·ssl + (1−alpha)·sl`
/// on a two-layer, 16-wide, 4-token model.
pub fn joint_objective_error(kind: BackboneKind) -> f64 {
    let cfg = toy_config(kind);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = MixModel::<f64>::new(cfg.clone(), &[(0, 3)], &mut rng).unwrap();
    perturb(&mut model, 100);
    let images = rnd(&[2, 1, 4, 4], 30);
    let tokens = patchify(&images, &cfg.backbone).unwrap();
    let plans = vec![make_mask_plan(4, 0.5, 1).unwrap(), make_mask_plan(4, 0.5, 2).unwrap()];
    let labels = [2usize, 0];
    let alpha = 0.3;
    let build = |m: &MixModel<f64>, b: &mut Binder<'_, f64>| {
        let x = b.tape.constant(tokens.clone());
        let f = m.encode(b, x)?;
        let target = b.tape.constant(tokens.clone());
        let ssl = m.reconstruct(b, f, &plans, target, LossTarget::Masked)?;
        let logits = m.classify(b, f, 0)?;
        let sl = b.tape.softmax_cross_entropy(logits, &labels)?;
        let a = b.tape.scale(ssl, alpha)?;
        let c = b.tape.scale(sl, 1.0 - alpha)?;
        b.tape.add(a, c)
    };
    let (_, analytic) = tape_param_grads(&model, &build);
    let numeric = fd_param_grads(&model, &|m| {
        let mut tape = Tape::new();
        let mut b = Binder::new(&mut tape, &m.params, false);
        let l = build(m, &mut b).unwrap();
        tape.value(l).item()
    });
    let mut worst = 0.0f64;
    for ((id, _), num) in model.params.iter().zip(&numeric) {
        let a = analytic.get(id).expect("every parameter gets a gradient");
        for (x, y) in a.data().iter().zip(num) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    worst
}
