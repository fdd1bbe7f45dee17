use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Transformer,
    Mlp,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::Config(format!("unknown backbone kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Transformer => "transformer",
            Self::Mlp => "mlp",
        })
    }
}

/// Shape of the encoder and of its patch embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub kind: BackboneKind,
    /// Hidden width of each block's MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_height: 16,
            input_width: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 64,
            depth: 2,
            num_heads: 2,
            kind: BackboneKind::Transformer,
            mlp_ratio: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.input_height % p != 0 || self.input_width % p != 0 {
            return Err(Error::Config(format!(
                "patch size {p} must divide {}x{}",
                self.input_height, self.input_width
            )));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.depth == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("backbone extents must be positive".into()));
        }
        if self.tokens() < 2 {
            return Err(Error::Config("backbone needs at least 2 tokens".into()));
        }
        if self.kind == BackboneKind::Transformer
            && (self.num_heads == 0 || self.embed_dim % self.num_heads != 0)
        {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.input_height / self.patch_size,
            self.input_width / self.patch_size,
        )
    }

    pub fn tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Flattened length of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Splits a `[C, H, W]` (or batched `[B, C, H, W]`) image into non-overlapping
/// patches. Tokens run row-major over the patch grid; each token is laid out
/// as `(py, px, c)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let (batch, c, h, w) = match image.shape() {
        [c, h, w] => (None, *c, *h, *w),
        [b, c, h, w] => (Some(*b), *c, *h, *w),
        s => return Err(Error::dim("patchify", s, &[cfg.channels, cfg.input_height, cfg.input_width])),
    };
    let p = cfg.patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("patch size {p} does not divide {h}x{w}")));
    }
    if c != cfg.channels || h != cfg.input_height || w != cfg.input_width {
        return Err(Error::dim("patchify", image.shape(), &[cfg.channels, cfg.input_height, cfg.input_width]));
    }
    let (gh, gw) = (h / p, w / p);
    let pd = p * p * c;
    let b = batch.unwrap_or(1);
    let src = image.data();
    let mut out = vec![T::zero(); b * gh * gw * pd];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (bi * gh * gw + gy * gw + gx) * pd;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let s = ((bi * c + ch) * h + gy * p + py) * w + gx * p + px;
                            out[tok + (py * p + px) * c + ch] = src[s];
                        }
                    }
                }
            }
        }
    }
    let shape = match batch {
        Some(b) => vec![b, gh * gw, pd],
        None => vec![gh * gw, pd],
    };
    Tensor::new(shape, out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &Tensor<T>, cfg: &BackboneConfig) -> Result<Tensor<T>> {
    let (gh, gw) = cfg.grid();
    let (p, c, h, w) = (cfg.patch_size, cfg.channels, cfg.input_height, cfg.input_width);
    let pd = cfg.patch_dim();
    let (batch, t, d) = match tokens.shape() {
        [t, d] => (None, *t, *d),
        [b, t, d] => (Some(*b), *t, *d),
        s => return Err(Error::dim("unpatchify", s, &[gh * gw, pd])),
    };
    if t != gh * gw || d != pd {
        return Err(Error::dim("unpatchify", tokens.shape(), &[gh * gw, pd]));
    }
    let b = batch.unwrap_or(1);
    let src = tokens.data();
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let tok = (bi * gh * gw + gy * gw + gx) * pd;
                for py in 0..p {
                    for px in 0..p {
                        for ch in 0..c {
                            let s = ((bi * c + ch) * h + gy * p + py) * w + gx * p + px;
                            out[s] = src[tok + (py * p + px) * c + ch];
                        }
                    }
                }
            }
        }
    }
    let shape = match batch {
        Some(b) => vec![b, c, h, w],
        None => vec![c, h, w],
    };
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(c: usize, h: usize, w: usize, p: usize) -> BackboneConfig {
        BackboneConfig {
            input_height: h,
            input_width: w,
            channels: c,
            patch_size: p,
            ..Default::default()
        }
    }

    #[test]
    fn token_counts() {
        let c = cfg(1, 4, 4, 2);
        let img = Tensor::<f32>::zeros(vec![1, 4, 4]);
        assert_eq!(patchify(&img, &c).unwrap().shape(), &[4, 4]);

        let c = cfg(3, 32, 32, 2);
        let img = Tensor::<f32>::zeros(vec![3, 32, 32]);
        assert_eq!(patchify(&img, &c).unwrap().shape(), &[256, 12]);
    }

    #[test]
    fn patch_layout() {
        let c = cfg(1, 4, 4, 2);
        let img = Tensor::<f64>::from_f64(vec![1, 4, 4], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
        let p = patchify(&img, &c).unwrap();
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn indivisible_extent_is_config_error() {
        let c = cfg(1, 5, 4, 2);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let img = Tensor::<f32>::zeros(vec![1, 5, 4]);
        assert!(matches!(patchify(&img, &c), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn round_trip(b in 1usize..3, ch in 1usize..4, g in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
            let c = cfg(ch, g * p, (g + 1) * p, p);
            let n = b * ch * g * p * (g + 1) * p;
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64).collect();
            let img = Tensor::<f64>::from_f64(vec![b, ch, g * p, (g + 1) * p], &data).unwrap();
            let back = unpatchify(&patchify(&img, &c).unwrap(), &c).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
