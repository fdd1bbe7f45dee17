use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token positions hidden from the reconstruction path for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub token_count: usize,
    /// Sorted, unique, all `< token_count`.
    pub masked_indices: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Per-token flags, true where masked.
    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.token_count];
        for &i in &self.masked_indices {
            f[i] = true;
        }
        f
    }
}

/// Draws `round(mask_ratio * token_count)` distinct token positions uniformly
/// at random. The draw is a pure function of `seed`.
pub fn make_mask_plan(token_count: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::Config(format!(
            "mask ratio {mask_ratio} outside [0, 1)"
        )));
    }
    let count = (mask_ratio * token_count as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked_indices = rand::seq::index::sample(&mut rng, token_count, count).into_vec();
    masked_indices.sort_unstable();
    Ok(MaskPlan {
        token_count,
        masked_indices,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_ratio_masks_nothing() {
        assert!(make_mask_plan(16, 0.0, 1).unwrap().masked_indices.is_empty());
    }

    #[test]
    fn three_quarters_of_sixteen() {
        let plan = make_mask_plan(16, 0.75, 42).unwrap();
        assert_eq!(plan.masked_indices.len(), 12);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(make_mask_plan(64, 0.75, 9).unwrap(), make_mask_plan(64, 0.75, 9).unwrap());
        assert_ne!(make_mask_plan(64, 0.75, 9).unwrap(), make_mask_plan(64, 0.75, 10).unwrap());
    }

    #[test]
    fn ratio_out_of_range() {
        assert!(make_mask_plan(16, 1.0, 0).is_err());
        assert!(make_mask_plan(16, -0.1, 0).is_err());
    }

    proptest! {
        #[test]
        fn plan_invariants(t in 1usize..300, ratio in 0.0f64..0.999, seed: u64) {
            let plan = make_mask_plan(t, ratio, seed).unwrap();
            prop_assert_eq!(plan.masked_indices.len(), (ratio * t as f64).round() as usize);
            prop_assert!(plan.masked_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(plan.masked_indices.iter().all(|&i| i < t));
        }
    }
}
