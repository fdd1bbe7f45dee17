//! Named random streams derived from one root seed.
//!
//! Every source of randomness in a run draws from its own stream so that
//! changing how much one component consumes never shifts another. Streams that
//! advance sequentially live in [`RngStreams`] and are checkpointed; per-epoch
//! orders are derived statelessly with [`derive_seed`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stream names, in checkpoint order.
pub const STREAMS: [&str; 5] = ["init", "subsample", "mixpair", "maskplan", "augment"];

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic 64-bit seed for `(root, tag, index)`.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ fnv1a(tag)).wrapping_add(index))
}

/// The sequential child streams of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub init: ChaCha8Rng,
    pub subsample: ChaCha8Rng,
    pub mixpair: ChaCha8Rng,
    pub maskplan: ChaCha8Rng,
    pub augment: ChaCha8Rng,
}

const STATE_BYTES: usize = 32 + 8 + 16;

fn encode_state(rng: &ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(STATE_BYTES);
    out.extend_from_slice(&rng.get_seed());
    out.extend_from_slice(&rng.get_stream().to_le_bytes());
    out.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

fn decode_state(bytes: &[u8]) -> Result<ChaCha8Rng> {
    if bytes.len() != STATE_BYTES {
        return Err(Error::Validation(format!(
            "rng state has {} bytes, expected {STATE_BYTES}",
            bytes.len()
        )));
    }
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&bytes[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(u64::from_le_bytes(bytes[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(bytes[40..56].try_into().unwrap()));
    Ok(rng)
}

impl RngStreams {
    pub fn new(root: u64) -> Self {
        let s = |name| ChaCha8Rng::seed_from_u64(derive_seed(root, name, 0));
        Self {
            init: s("init"),
            subsample: s("subsample"),
            mixpair: s("mixpair"),
            maskplan: s("maskplan"),
            augment: s("augment"),
        }
    }

    fn all(&self) -> [&ChaCha8Rng; 5] {
        [&self.init, &self.subsample, &self.mixpair, &self.maskplan, &self.augment]
    }

    /// Opaque per-stream states tagged with the stream name.
    pub fn export(&self) -> Vec<(String, Vec<u8>)> {
        STREAMS
            .iter()
            .zip(self.all())
            .map(|(n, r)| (n.to_string(), encode_state(r)))
            .collect()
    }

    pub fn import(states: &[(String, Vec<u8>)]) -> Result<Self> {
        let find = |name: &str| -> Result<ChaCha8Rng> {
            let (_, bytes) = states
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Validation(format!("missing rng stream {name}")))?;
            decode_state(bytes)
        };
        Ok(Self {
            init: find("init")?,
            subsample: find("subsample")?,
            mixpair: find("mixpair")?,
            maskplan: find("maskplan")?,
            augment: find("augment")?,
        })
    }
}
