//! Run configuration and its flat `key=value` text form.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! List values are comma separated; an empty value clears an optional field.
//! [`TrainConfig::to_kv`] writes every key, so its output reproduces a run.

use serde::{Deserialize, Serialize};

use crate::data::{Augment, Format};
use crate::error::{Error, Result};
use crate::nn::{BackboneConfig, BackboneKind, DecoderConfig, LossTarget, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Supervised training only.
    Sl,
    /// Self-supervised phase followed by a supervised phase.
    #[serde(rename = "ssl_sl")]
    SslSl,
    /// Self-supervised, merged and supervised phases.
    #[serde(rename = "mixtraining")]
    MixTraining,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sl" => Ok(Self::Sl),
            "ssl_sl" => Ok(Self::SslSl),
            "mixtraining" => Ok(Self::MixTraining),
            _ => Err(Error::Config(format!("unknown method {s:?} (sl, ssl_sl, mixtraining)"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sl => "sl",
            Self::SslSl => "ssl_sl",
            Self::MixTraining => "mixtraining",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Dtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(Error::Config(format!("unknown dtype {s:?} (f32, f64)"))),
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub e_ssl: usize,
    pub e_sl: usize,
    /// Fraction of `min(e_ssl, e_sl)` merged into the mix phase.
    pub rho: f64,
    /// Weight of the self-supervised term in the joint loss.
    pub alpha: f64,
    /// Weight of the supervised sample when mixing inputs.
    pub lambda: f64,
    /// Fraction of the labeled pool kept.
    pub p: f64,
    pub batch_size: usize,
    pub base_lr_ssl: f64,
    pub base_lr_sl: f64,
    /// `None` scales the default warmup with the phase length.
    pub warmup_ssl: Option<usize>,
    pub warmup_sl: Option<usize>,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub loss_target: LossTarget,
    pub head_parallel: bool,
    pub mask_ratio: f64,
    pub augment_pad: usize,
    pub augment_flip: bool,

    pub backbone: BackboneKind,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,

    /// Labeled source per task.
    pub data: Vec<String>,
    /// Separate unlabeled source; by default the task inputs themselves.
    pub ssl_data: Option<String>,
    /// Test split per task; a held-out split is carved out when absent.
    pub test_data: Vec<String>,
    /// Overrides format inference from file names.
    pub format: Option<Format>,
    pub holdout: f64,
    pub dtype: Dtype,
    /// Dataset label used in logs and reports; defaults to the data file stem.
    pub dataset: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::MixTraining,
            e_ssl: 100,
            e_sl: 100,
            rho: 0.5,
            alpha: 0.5,
            lambda: 0.5,
            p: 1.0,
            batch_size: 256,
            base_lr_ssl: 1.5e-4,
            base_lr_sl: 1e-3,
            warmup_ssl: None,
            warmup_sl: None,
            weight_decay: 0.05,
            betas: (0.9, 0.95),
            eps: 1e-8,
            seed: 1,
            loss_target: LossTarget::Masked,
            head_parallel: false,
            mask_ratio: 0.75,
            augment_pad: 4,
            augment_flip: true,
            backbone: BackboneKind::Transformer,
            patch_size: 4,
            embed_dim: 64,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 4,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 2,
            data: Vec::new(),
            ssl_data: None,
            test_data: Vec::new(),
            format: None,
            holdout: 0.1,
            dtype: Dtype::F32,
            dataset: None,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in echo order.
pub const KEYS: &[&str] = &[
    "method",
    "e_ssl",
    "e_sl",
    "rho",
    "alpha",
    "lambda",
    "p",
    "batch_size",
    "base_lr_ssl",
    "base_lr_sl",
    "warmup_ssl",
    "warmup_sl",
    "weight_decay",
    "betas",
    "eps",
    "seed",
    "loss_target",
    "head_parallel",
    "mask_ratio",
    "augment_pad",
    "augment_flip",
    "backbone",
    "patch_size",
    "embed_dim",
    "depth",
    "num_heads",
    "mlp_ratio",
    "decoder_dim",
    "decoder_depth",
    "decoder_heads",
    "data",
    "ssl_data",
    "test_data",
    "format",
    "holdout",
    "dtype",
    "dataset",
];

fn parse<V: std::str::FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("bad value for {key}: {v:?}")))
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}

fn opt(v: &str) -> Option<String> {
    (!v.is_empty()).then(|| v.to_string())
}

fn show_opt<V: std::fmt::Display>(v: &Option<V>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

fn format_name(f: Format) -> &'static str {
    match f {
        Format::Idx => "idx",
        Format::CifarBinary => "cifar_binary",
        Format::SyntheticSpec => "synthetic_spec",
    }
}

impl TrainConfig {
    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "method" => self.method = v.parse()?,
            "e_ssl" => self.e_ssl = parse(key, v)?,
            "e_sl" => self.e_sl = parse(key, v)?,
            "rho" => self.rho = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "p" => self.p = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "base_lr_ssl" => self.base_lr_ssl = parse(key, v)?,
            "base_lr_sl" => self.base_lr_sl = parse(key, v)?,
            "warmup_ssl" => self.warmup_ssl = opt(v).map(|s| parse(key, &s)).transpose()?,
            "warmup_sl" => self.warmup_sl = opt(v).map(|s| parse(key, &s)).transpose()?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "betas" => {
                let parts = list(v);
                let [a, b] = parts.as_slice() else {
                    return Err(Error::Config(format!("betas needs two values, got {v:?}")));
                };
                self.betas = (parse(key, a)?, parse(key, b)?);
            }
            "eps" => self.eps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "loss_target" => self.loss_target = v.parse()?,
            "head_parallel" => self.head_parallel = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "augment_pad" => self.augment_pad = parse(key, v)?,
            "augment_flip" => self.augment_flip = parse(key, v)?,
            "backbone" => self.backbone = v.parse()?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "embed_dim" => self.embed_dim = parse(key, v)?,
            "depth" => self.depth = parse(key, v)?,
            "num_heads" => self.num_heads = parse(key, v)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, v)?,
            "decoder_dim" => self.decoder_dim = parse(key, v)?,
            "decoder_depth" => self.decoder_depth = parse(key, v)?,
            "decoder_heads" => self.decoder_heads = parse(key, v)?,
            "data" => self.data = list(v),
            "ssl_data" => self.ssl_data = opt(v),
            "test_data" => self.test_data = list(v),
            "format" => self.format = opt(v).map(|s| s.parse()).transpose()?,
            "holdout" => self.holdout = parse(key, v)?,
            "dtype" => self.dtype = v.parse()?,
            "dataset" => self.dataset = opt(v),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Text form of one field.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "method" => self.method.to_string(),
            "e_ssl" => self.e_ssl.to_string(),
            "e_sl" => self.e_sl.to_string(),
            "rho" => self.rho.to_string(),
            "alpha" => self.alpha.to_string(),
            "lambda" => self.lambda.to_string(),
            "p" => self.p.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "base_lr_ssl" => self.base_lr_ssl.to_string(),
            "base_lr_sl" => self.base_lr_sl.to_string(),
            "warmup_ssl" => show_opt(&self.warmup_ssl),
            "warmup_sl" => show_opt(&self.warmup_sl),
            "weight_decay" => self.weight_decay.to_string(),
            "betas" => format!("{},{}", self.betas.0, self.betas.1),
            "eps" => self.eps.to_string(),
            "seed" => self.seed.to_string(),
            "loss_target" => self.loss_target.to_string(),
            "head_parallel" => self.head_parallel.to_string(),
            "mask_ratio" => self.mask_ratio.to_string(),
            "augment_pad" => self.augment_pad.to_string(),
            "augment_flip" => self.augment_flip.to_string(),
            "backbone" => self.backbone.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "depth" => self.depth.to_string(),
            "num_heads" => self.num_heads.to_string(),
            "mlp_ratio" => self.mlp_ratio.to_string(),
            "decoder_dim" => self.decoder_dim.to_string(),
            "decoder_depth" => self.decoder_depth.to_string(),
            "decoder_heads" => self.decoder_heads.to_string(),
            "data" => self.data.join(","),
            "ssl_data" => show_opt(&self.ssl_data),
            "test_data" => self.test_data.join(","),
            "format" => self.format.map(format_name).unwrap_or_default().to_string(),
            "holdout" => self.holdout.to_string(),
            "dtype" => self.dtype.to_string(),
            "dataset" => show_opt(&self.dataset),
            _ => return None,
        })
    }

    /// Parses a config file body on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k}={}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name}={v} outside [0, 1]")))
            }
        };
        unit("rho", self.rho)?;
        unit("alpha", self.alpha)?;
        unit("lambda", self.lambda)?;
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config(format!("p={} outside (0, 1]", self.p)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [("base_lr_ssl", self.base_lr_ssl), ("base_lr_sl", self.base_lr_sl), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name}={v} must be positive")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay={} must be non-negative", self.weight_decay)));
        }
        for b in [self.betas.0, self.betas.1] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("beta {b} outside [0, 1)")));
            }
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config(format!("holdout={} outside (0, 1)", self.holdout)));
        }
        if self.e_sl == 0 && self.method == Method::Sl {
            return Err(Error::Config("method sl needs e_sl >= 1".into()));
        }
        if !self.test_data.is_empty() && self.test_data.len() != self.data.len() {
            return Err(Error::Config(format!(
                "{} test sources for {} tasks",
                self.test_data.len(),
                self.data.len()
            )));
        }
        self.model_config(1, self.patch_size, self.patch_size * 2).validate()
    }

    /// Effective warmup epochs of the self-supervised phase.
    pub fn warmup_ssl_epochs(&self) -> usize {
        self.warmup_ssl.unwrap_or((20 * self.e_ssl).div_ceil(100))
    }

    pub fn warmup_sl_epochs(&self) -> usize {
        self.warmup_sl.unwrap_or((5 * self.e_sl).div_ceil(100))
    }

    pub fn augment(&self) -> Augment {
        Augment {
            pad: self.augment_pad,
            flip: self.augment_flip,
        }
    }

    /// Model shape for inputs of `channels × height × width`.
    pub fn model_config(&self, channels: usize, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_height: height,
                input_width: width,
                channels,
                patch_size: self.patch_size,
                embed_dim: self.embed_dim,
                depth: self.depth,
                num_heads: self.num_heads,
                kind: self.backbone,
                mlp_ratio: self.mlp_ratio,
            },
            decoder: DecoderConfig {
                embed_dim: self.decoder_dim,
                depth: self.decoder_depth,
                num_heads: self.decoder_heads,
            },
            mask_ratio: self.mask_ratio,
        }
    }

    /// Label for the dataset column of logs and reports.
    pub fn dataset_label(&self) -> String {
        if let Some(d) = &self.dataset {
            return d.clone();
        }
        let names: Vec<String> = self
            .data
            .iter()
            .map(|d| {
                std::path::Path::new(d)
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| d.clone())
            })
            .collect();
        if names.is_empty() {
            "unnamed".into()
        } else {
            names.join("+")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = TrainConfig::default();
        c.data = vec!["a.spec".into(), "b.spec".into()];
        c.warmup_sl = Some(3);
        c.format = Some(Format::Idx);
        c.rho = 0.25;
        let back = TrainConfig::from_kv(&c.to_kv()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.dataset_label(), "a+b");
    }

    #[test]
    fn range_checks() {
        let mut c = TrainConfig::default();
        c.rho = 1.3;
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("rho")));
        let mut c = TrainConfig::default();
        c.p = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn unknown_key_and_line_numbers() {
        let e = TrainConfig::from_kv("rho=0.5\nbogus=1\n").unwrap_err();
        assert!(matches!(e, Error::Config(m) if m.contains("line 2")));
    }

    #[test]
    fn default_warmups_scale() {
        let mut c = TrainConfig::default();
        assert_eq!((c.warmup_ssl_epochs(), c.warmup_sl_epochs()), (20, 5));
        c.e_ssl = 20;
        c.e_sl = 20;
        assert_eq!((c.warmup_ssl_epochs(), c.warmup_sl_epochs()), (4, 1));
    }
}
