//! Model family: patch embedding, encoder backbone, reconstruction decoder,
//! classification heads and mask plans.

mod layers;
mod mask;
mod model;
mod params;
mod patch;

pub use layers::{Block, LayerNorm, Linear};
pub use mask::{make_mask_plan, MaskPlan};
pub use model::{
    batch_tokens, reconstruction_loss, ClsHead, DecoderConfig, LossTarget, MacProfile, MixModel,
    ModelConfig,
};
pub use params::{trunc_normal, Binder, GradStore, ParamGroup, ParamId, ParamStore, Parameter};
pub use patch::{patchify, unpatchify, BackboneConfig, BackboneKind};
