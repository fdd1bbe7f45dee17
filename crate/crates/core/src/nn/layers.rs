use rand::Rng;

use super::params::{trunc_normal, Binder, ParamGroup, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let weight = store.push(
            format!("{name}.weight"),
            group,
            trunc_normal(rng, &[in_dim, out_dim], INIT_STD),
            true,
        );
        let bias = store.push(format!("{name}.bias"), group, Tensor::zeros(vec![out_dim]), false);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let w = b.param(self.weight);
        let bias = b.param(self.bias);
        b.tape.linear(x, w, Some(bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = store.push(format!("{name}.weight"), group, Tensor::full(vec![dim], T::one()), false);
        let shift = store.push(format!("{name}.bias"), group, Tensor::zeros(vec![dim]), false);
        Self { gain, shift }
    }

    pub fn forward<T: Scalar>(&self, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let g = b.param(self.gain);
        let s = b.param(self.shift);
        b.tape.layer_norm(x, g, s, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct AttentionPart {
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

/// Pre-norm residual block: optional self-attention followed by a GELU MLP.
#[derive(Clone, Debug)]
pub struct Block {
    attn: Option<AttentionPart>,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    /// `heads = None` builds an MLP-only block.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: Option<usize>,
        mlp_ratio: usize,
    ) -> Self {
        let attn = heads.map(|heads| AttentionPart {
            norm: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            qkv: Linear::new(store, rng, &format!("{name}.attn.qkv"), group, dim, 3 * dim),
            proj: Linear::new(store, rng, &format!("{name}.attn.proj"), group, dim, dim),
            heads,
        });
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), group, dim);
        let fc1 = Linear::new(store, rng, &format!("{name}.mlp.fc1"), group, dim, mlp_ratio * dim);
        let fc2 = Linear::new(store, rng, &format!("{name}.mlp.fc2"), group, mlp_ratio * dim, dim);
        Self {
            attn,
            norm2,
            fc1,
            fc2,
        }
    }

    /// `x` is `[b, t, dim]`.
    pub fn forward<T: Scalar>(&self, b: &mut Binder<'_, T>, x: Var) -> Result<Var> {
        let mut x = x;
        if let Some(a) = &self.attn {
            let h = a.norm.forward(b, x)?;
            let qkv = a.qkv.forward(b, h)?;
            let att = b.tape.attention(qkv, a.heads)?;
            let out = a.proj.forward(b, att)?;
            x = b.tape.add(x, out)?;
        }
        let h = self.norm2.forward(b, x)?;
        let h = self.fc1.forward(b, h)?;
        let h = b.tape.gelu(h)?;
        let h = self.fc2.forward(b, h)?;
        b.tape.add(x, h)
    }

    /// Forward multiply-accumulates per token for a sequence of `tokens`.
    pub fn macs_per_sample(&self, dim: usize, tokens: usize) -> u64 {
        let mut m = 2 * self.fc1.out_dim * dim;
        if self.attn.is_some() {
            m += 3 * dim * dim + dim * dim + 2 * tokens * dim;
        }
        (m * tokens) as u64
    }
}
