//! Phase arithmetic, the learning-rate schedule and the optimizer.

mod adamw;

use serde::{Deserialize, Serialize};

pub use crate::config::{Method, TrainConfig};
pub use adamw::AdamW;

use crate::error::{Error, Result};

/// Training phase of an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ssl,
    Mix,
    Sl,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ssl => "ssl",
            Self::Mix => "mix",
            Self::Sl => "sl",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssl" => Ok(Self::Ssl),
            "mix" => Ok(Self::Mix),
            "sl" => Ok(Self::Sl),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

/// Epoch budget of the three phases, run in the order ssl, mix, sl.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub e_mix: usize,
    pub pure_ssl_epochs: usize,
    pub pure_sl_epochs: usize,
    pub total_epochs: usize,
}

/// Where a global epoch index falls in a schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochSlot {
    pub phase: Phase,
    pub epoch_in_phase: usize,
    pub phase_len: usize,
}

impl PhaseSchedule {
    /// Merges `floor(rho · min(e_ssl, e_sl))` epochs of each stage into one
    /// joint phase.
    pub fn merged(e_ssl: usize, e_sl: usize, rho: f64) -> Self {
        let e_mix = if e_ssl == 0 || e_sl == 0 {
            0
        } else {
            // floor of an exact product; the nudge absorbs representation error
            ((rho * e_ssl.min(e_sl) as f64) + 1e-9).floor() as usize
        };
        Self {
            e_mix,
            pure_ssl_epochs: e_ssl - e_mix,
            pure_sl_epochs: e_sl - e_mix,
            total_epochs: e_ssl + e_sl - e_mix,
        }
    }

    pub fn phases(&self) -> [(Phase, usize); 3] {
        [
            (Phase::Ssl, self.pure_ssl_epochs),
            (Phase::Mix, self.e_mix),
            (Phase::Sl, self.pure_sl_epochs),
        ]
    }

    pub fn slot(&self, epoch: usize) -> Option<EpochSlot> {
        let mut start = 0;
        for (phase, len) in self.phases() {
            if epoch < start + len {
                return Some(EpochSlot {
                    phase,
                    epoch_in_phase: epoch - start,
                    phase_len: len,
                });
            }
            start += len;
        }
        None
    }
}

/// Phase plan of a run.
pub fn plan(cfg: &TrainConfig) -> PhaseSchedule {
    match cfg.method {
        Method::Sl => PhaseSchedule::merged(0, cfg.e_sl, 0.0),
        Method::SslSl => PhaseSchedule::merged(cfg.e_ssl, cfg.e_sl, 0.0),
        Method::MixTraining => PhaseSchedule::merged(cfg.e_ssl, cfg.e_sl, cfg.rho),
    }
}

/// Linear warmup to `base` over `warmup` epochs, then cosine decay towards 0
/// at `len`.
pub fn warmup_cosine(base: f64, warmup: usize, epoch: usize, len: usize) -> f64 {
    if epoch < warmup {
        return base * (epoch + 1) as f64 / warmup as f64;
    }
    let span = (len - warmup) as f64;
    let x = (epoch - warmup) as f64 / span;
    base * (1.0 + (std::f64::consts::PI * x).cos()) / 2.0
}

/// Base rate and warmup length used in `phase` of length `phase_len`.
pub fn phase_lr_params(phase: Phase, phase_len: usize, cfg: &TrainConfig) -> (f64, usize) {
    match phase {
        Phase::Ssl => (cfg.base_lr_ssl, cfg.warmup_ssl_epochs()),
        Phase::Sl => (cfg.base_lr_sl, cfg.warmup_sl_epochs()),
        Phase::Mix => {
            let w = cfg.warmup_ssl_epochs();
            let scaled = if cfg.e_ssl == 0 {
                0
            } else {
                (w * phase_len).div_ceil(cfg.e_ssl)
            };
            (cfg.base_lr_ssl, scaled.min(phase_len))
        }
    }
}

/// Learning rate of one epoch. Each phase runs its own warmup and cosine cycle.
pub fn lr_at(phase: Phase, epoch_in_phase: usize, phase_len: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(epoch_in_phase < phase_len);
    let (base, warmup) = phase_lr_params(phase, phase_len, cfg);
    warmup_cosine(base, warmup.min(phase_len), epoch_in_phase, phase_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(method: Method, e_ssl: usize, e_sl: usize, rho: f64) -> TrainConfig {
        TrainConfig {
            method,
            e_ssl,
            e_sl,
            rho,
            ..Default::default()
        }
    }

    #[test]
    fn merged_phase_examples() {
        let s = plan(&cfg(Method::MixTraining, 100, 100, 0.5));
        assert_eq!((s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs, s.total_epochs), (50, 50, 50, 150));
        let s = plan(&cfg(Method::MixTraining, 100, 60, 0.75));
        assert_eq!((s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs), (55, 45, 15));
        let s = plan(&cfg(Method::MixTraining, 50, 50, 1.0));
        assert_eq!((s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs), (0, 50, 0));
    }

    #[test]
    fn baseline_plans() {
        let s = plan(&cfg(Method::SslSl, 10, 7, 0.9));
        assert_eq!((s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs), (10, 0, 7));
        let s = plan(&cfg(Method::Sl, 10, 7, 0.9));
        assert_eq!((s.pure_ssl_epochs, s.e_mix, s.pure_sl_epochs), (0, 0, 7));
        assert_eq!(plan(&cfg(Method::MixTraining, 0, 9, 1.0)).e_mix, 0);
    }

    #[test]
    fn slots_walk_the_phases() {
        let s = PhaseSchedule::merged(3, 2, 0.5);
        let phases: Vec<Phase> = (0..s.total_epochs).map(|e| s.slot(e).unwrap().phase).collect();
        assert_eq!(phases, vec![Phase::Ssl, Phase::Ssl, Phase::Mix, Phase::Sl]);
        assert_eq!(s.slot(2).unwrap().epoch_in_phase, 0);
        assert!(s.slot(4).is_none());
    }

    #[test]
    fn lr_examples() {
        assert_eq!(warmup_cosine(2.0, 20, 0, 100), 2.0 / 20.0);
        assert_eq!(warmup_cosine(2.0, 20, 19, 100), 2.0);
        let l = 10;
        let want = 2.0 * (1.0 + (std::f64::consts::PI * 9.0 / 10.0).cos()) / 2.0;
        assert_eq!(warmup_cosine(2.0, 0, l - 1, l), want);
        assert_eq!(warmup_cosine(2.0, 0, 0, l), 2.0);
    }

    #[test]
    fn mix_phase_uses_ssl_rate_and_scaled_warmup() {
        let c = cfg(Method::MixTraining, 100, 100, 0.5);
        assert_eq!(phase_lr_params(Phase::Mix, 50, &c), (c.base_lr_ssl, 10));
        let c = cfg(Method::MixTraining, 20, 20, 0.5);
        assert_eq!(phase_lr_params(Phase::Mix, 10, &c), (c.base_lr_ssl, 2));
        assert_eq!(phase_lr_params(Phase::Sl, 10, &c), (c.base_lr_sl, 1));
    }
}
