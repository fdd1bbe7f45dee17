use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{GradStore, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Adam with decoupled weight decay and bias-corrected moments.
///
/// Parameters without a gradient in a step are left untouched, including
/// their decay and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-parameter update counts.
    pub steps: Vec<u64>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            steps: vec![0; params.len()],
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn from_config(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.betas.0, cfg.betas.1, cfg.eps, cfg.weight_decay)
    }

    /// Applies one update. A non-finite gradient aborts before anything changes.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.steps.len() != params.len() {
            return Err(Error::Validation(format!(
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.steps.len(),
                params.len(),
                grads.len()
            )));
        }
        for (id, g) in grads.iter() {
            if let Some(g) = g {
                let p = params.get(id);
                if g.shape() != p.value.shape() {
                    return Err(Error::dim("adamw", p.value.shape(), g.shape()));
                }
                if !g.all_finite() {
                    let bad = g.data().iter().filter(|x| !x.is_finite()).count();
                    return Err(Error::NonFinite(format!(
                        "gradient of {} has {bad} non-finite entries",
                        p.name
                    )));
                }
            }
        }
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        for (id, g) in grads.iter() {
            let Some(g) = g else { continue };
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = T::lit(1.0 - self.beta1.powi(t));
            let c2 = T::lit(1.0 - self.beta2.powi(t));
            let lr_t = T::lit(lr);
            let p = params.get_mut(id);
            let shrink = if p.decay {
                T::lit(1.0 - lr * self.weight_decay)
            } else {
                one
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gk), mk), vk) in p.value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mk = b1 * *mk + (one - b1) * gk;
                *vk = b2 * *vk + (one - b2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                *w = *w * shrink - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
