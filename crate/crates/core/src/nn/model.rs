use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Block, LayerNorm, Linear, INIT_STD};
use super::mask::MaskPlan;
use super::params::{trunc_normal, Binder, ParamGroup, ParamId, ParamStore};
use super::patch::{BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Which token positions contribute to the reconstruction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTarget {
    #[default]
    Masked,
    Unmasked,
    All,
}

impl std::str::FromStr for LossTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Self::Masked),
            "unmasked" => Ok(Self::Unmasked),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown loss target {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Masked => "masked",
            Self::Unmasked => "unmasked",
            Self::All => "all",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            depth: 2,
            num_heads: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub mask_ratio: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            mask_ratio: 0.75,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let d = &self.decoder;
        if d.embed_dim == 0 || d.num_heads == 0 || d.embed_dim % d.num_heads != 0 {
            return Err(Error::Config(format!(
                "decoder embed_dim {} not divisible by {} heads",
                d.embed_dim, d.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ClsHead {
    pub task_id: usize,
    pub num_classes: usize,
    linear: Linear,
}

/// Per-sample forward multiply-accumulate counts of each model part.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MacProfile {
    pub backbone_fwd: u64,
    pub backbone_bwd: u64,
    pub recon_fwd: u64,
    pub recon_bwd: u64,
    pub cls_fwd: u64,
    pub cls_bwd: u64,
}

/// Shared encoder with a reconstruction decoder and one classifier per task.
#[derive(Clone, Debug)]
pub struct MixModel<T> {
    cfg: ModelConfig,
    pub params: ParamStore<T>,
    patch_embed: Linear,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    norm: LayerNorm,
    dec_embed: Linear,
    mask_token: ParamId,
    dec_pos: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: LayerNorm,
    dec_pred: Linear,
    heads: Vec<ClsHead>,
}

impl<T: Scalar> MixModel<T> {
    /// Builds and initializes a model. `tasks` lists `(task_id, num_classes)`;
    /// heads are kept in ascending task id order.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, tasks: &[(usize, usize)], rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut tasks = tasks.to_vec();
        tasks.sort_unstable();
        if tasks.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Config("duplicate task id".into()));
        }
        if tasks.iter().any(|&(_, c)| c == 0) {
            return Err(Error::Config("task with zero classes".into()));
        }
        let bb = &cfg.backbone;
        let (t, e, pd) = (bb.tokens(), bb.embed_dim, bb.patch_dim());
        let heads = match bb.kind {
            BackboneKind::Transformer => Some(bb.num_heads),
            BackboneKind::Mlp => None,
        };
        let g = ParamGroup::Backbone;
        let mut ps = ParamStore::new();
        let patch_embed = Linear::new(&mut ps, rng, "backbone.patch_embed", g, pd, e);
        let pos_embed = ps.push("backbone.pos_embed", g, trunc_normal(rng, &[t, e], INIT_STD), true);
        let blocks = (0..bb.depth)
            .map(|i| Block::new(&mut ps, rng, &format!("backbone.blocks.{i}"), g, e, heads, bb.mlp_ratio))
            .collect();
        let norm = LayerNorm::new(&mut ps, "backbone.norm", g, e);

        let r = ParamGroup::ReconHead;
        let dc = &cfg.decoder;
        let d = dc.embed_dim;
        let dec_embed = Linear::new(&mut ps, rng, "recon.decoder_embed", r, e, d);
        let mask_token = ps.push("recon.mask_token", r, trunc_normal(rng, &[d], INIT_STD), true);
        let dec_pos = ps.push("recon.decoder_pos_embed", r, trunc_normal(rng, &[t, d], INIT_STD), true);
        let dec_blocks = (0..dc.depth)
            .map(|i| Block::new(&mut ps, rng, &format!("recon.blocks.{i}"), r, d, Some(dc.num_heads), bb.mlp_ratio))
            .collect();
        let dec_norm = LayerNorm::new(&mut ps, "recon.norm", r, d);
        let dec_pred = Linear::new(&mut ps, rng, "recon.pred", r, d, pd);

        let heads = tasks
            .iter()
            .map(|&(task_id, num_classes)| ClsHead {
                task_id,
                num_classes,
                linear: Linear::new(&mut ps, rng, &format!("cls.{task_id}"), ParamGroup::ClsHead(task_id), e, num_classes),
            })
            .collect();

        Ok(Self {
            cfg,
            params: ps,
            patch_embed,
            pos_embed,
            blocks,
            norm,
            dec_embed,
            mask_token,
            dec_pos,
            dec_blocks,
            dec_norm,
            dec_pred,
            heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn heads(&self) -> &[ClsHead] {
        &self.heads
    }

    pub fn head(&self, task_id: usize) -> Result<&ClsHead> {
        self.heads
            .iter()
            .find(|h| h.task_id == task_id)
            .ok_or_else(|| Error::Validation(format!("unknown task id {task_id}")))
    }

    /// Full (unmasked) feature sequence `[b, t, embed]` for patch tokens `[b, t, patch_dim]`.
    pub fn encode(&self, b: &mut Binder<'_, T>, tokens: Var) -> Result<Var> {
        let bb = &self.cfg.backbone;
        let shape = b.tape.value(tokens).shape().to_vec();
        if shape.len() != 3 || shape[1] != bb.tokens() || shape[2] != bb.patch_dim() {
            return Err(Error::dim("encode", &shape, &[bb.tokens(), bb.patch_dim()]));
        }
        let x = self.patch_embed.forward(b, tokens)?;
        let pos = b.param(self.pos_embed);
        let mut x = b.tape.add_tiled(x, pos)?;
        for blk in &self.blocks {
            x = blk.forward(b, x)?;
        }
        self.norm.forward(b, x)
    }

    /// Decoder prediction `[b, t, patch_dim]`; masked positions see the learned
    /// mask token instead of their encoder feature.
    pub fn decode(&self, b: &mut Binder<'_, T>, features: Var, plans: &[MaskPlan]) -> Result<Var> {
        let shape = b.tape.value(features).shape().to_vec();
        let (bs, t) = match shape.as_slice() {
            [bs, t, e] if *e == self.cfg.backbone.embed_dim => (*bs, *t),
            s => return Err(Error::dim("decode", s, &[self.cfg.backbone.embed_dim])),
        };
        if plans.len() != bs {
            return Err(Error::Validation(format!("{} mask plans for batch of {bs}", plans.len())));
        }
        let mut rows = Vec::with_capacity(bs * t);
        for p in plans {
            if p.token_count != t {
                return Err(Error::Validation(format!(
                    "mask plan covers {} tokens, features have {t}",
                    p.token_count
                )));
            }
            rows.extend(p.flags());
        }
        let x = self.dec_embed.forward(b, features)?;
        let tok = b.param(self.mask_token);
        let x = b.tape.replace_rows(x, tok, &rows)?;
        let pos = b.param(self.dec_pos);
        let mut x = b.tape.add_tiled(x, pos)?;
        for blk in &self.dec_blocks {
            x = blk.forward(b, x)?;
        }
        let x = self.dec_norm.forward(b, x)?;
        self.dec_pred.forward(b, x)
    }

    /// Reconstruction loss against `target` patches `[b, t, patch_dim]`.
    pub fn reconstruct(
        &self,
        b: &mut Binder<'_, T>,
        features: Var,
        plans: &[MaskPlan],
        target: Var,
        loss_target: LossTarget,
    ) -> Result<Var> {
        let pred = self.decode(b, features, plans)?;
        reconstruction_loss(b, pred, target, plans, loss_target)
    }

    /// Mean-pooled features through the head of `task_id`: `[b, classes]`.
    pub fn classify(&self, b: &mut Binder<'_, T>, features: Var, task_id: usize) -> Result<Var> {
        let head = self.head(task_id)?;
        let pooled = b.tape.mean_tokens(features)?;
        head.linear.forward(b, pooled)
    }

    /// Analytic multiply-accumulate counts per sample, matching what the tape
    /// executes for a training step (input tokens carry no gradient).
    pub fn mac_profile(&self, task_id: usize) -> Result<MacProfile> {
        let bb = &self.cfg.backbone;
        let (t, e, pd) = (bb.tokens() as u64, bb.embed_dim as u64, bb.patch_dim() as u64);
        let embed = t * pd * e;
        let blocks: u64 = self.blocks.iter().map(|b| b.macs_per_sample(bb.embed_dim, bb.tokens())).sum();
        let backbone_fwd = embed + blocks;
        let d = self.cfg.decoder.embed_dim as u64;
        let dec_blocks: u64 = self
            .dec_blocks
            .iter()
            .map(|b| b.macs_per_sample(self.cfg.decoder.embed_dim, bb.tokens()))
            .sum();
        let recon_fwd = t * e * d + dec_blocks + t * d * pd;
        let cls_fwd = e * self.head(task_id)?.num_classes as u64;
        Ok(MacProfile {
            backbone_fwd,
            backbone_bwd: 2 * backbone_fwd - embed,
            recon_fwd,
            recon_bwd: 2 * recon_fwd,
            cls_fwd,
            cls_bwd: 2 * cls_fwd,
        })
    }
}

/// MSE between predicted and target patches restricted to `loss_target` rows.
pub fn reconstruction_loss<T: Scalar>(
    b: &mut Binder<'_, T>,
    pred: Var,
    target: Var,
    plans: &[MaskPlan],
    loss_target: LossTarget,
) -> Result<Var> {
    let shape = b.tape.value(pred).shape().to_vec();
    let pd = *shape.last().unwrap_or(&1);
    let mask = match loss_target {
        LossTarget::All => None,
        LossTarget::Masked | LossTarget::Unmasked => {
            let want = loss_target == LossTarget::Masked;
            let mut m = Vec::with_capacity(b.tape.value(pred).numel());
            for p in plans {
                for f in p.flags() {
                    m.extend(std::iter::repeat_n(f == want, pd));
                }
            }
            Some(m)
        }
    };
    b.tape.mse(pred, target, mask.as_deref())
}

/// Stacks per-sample images and patchifies them into a constant `[b, t, pd]` tensor.
pub fn batch_tokens<T: Scalar>(images: &Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    super::patch::patchify(images, cfg)
}
