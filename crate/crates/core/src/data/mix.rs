use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixMode {
    /// Both sources coincide; every pair is the supervised sample itself.
    Identity,
    Mixup,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixPair<T> {
    pub x_mix: Tensor<T>,
    pub y_sl: usize,
    pub task_id: usize,
    pub sl_index: usize,
    /// Partner drawn from the unlabeled pool; `None` in identity mode.
    pub ssl_index: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedDataset<T> {
    pub pairs: Vec<MixPair<T>>,
    pub lambda: f64,
    pub mode: MixMode,
}

fn same_inputs<T: Scalar>(a: &Dataset<T>, b: &Dataset<T>) -> bool {
    std::ptr::eq(a, b)
        || (a.len() == b.len() && a.items.iter().zip(&b.items).all(|(x, y)| x.image == y.image))
}

/// Builds the mixed dataset: `λ·x_sl + (1−λ)·x_ssl` with the supervised label,
/// drawing each partner uniformly with replacement from `d_ssl`.
///
/// When both datasets hold the same inputs the result is `d_sl` unchanged.
pub fn mix<T: Scalar>(d_ssl: &Dataset<T>, d_sl: &Dataset<T>, lambda: f64, seed: u64) -> Result<MixedDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MixedDataset::build(d_ssl, d_sl, lambda, 0, &mut rng)
}

impl<T: Scalar> MixedDataset<T> {
    /// As [`mix`], drawing partners from `rng` and tagging pairs with `task_id`.
    pub fn build<R: Rng + ?Sized>(
        d_ssl: &Dataset<T>,
        d_sl: &Dataset<T>,
        lambda: f64,
        task_id: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Config(format!("lambda {lambda} outside [0, 1]")));
        }
        if !d_sl.is_labeled() {
            return Err(Error::Validation(format!("{}: mixing needs a labeled dataset", d_sl.name)));
        }
        if d_sl.is_empty() {
            return Err(Error::Validation(format!("{}: empty dataset", d_sl.name)));
        }
        if let (Some(a), Some(b)) = (d_ssl.image_shape(), d_sl.image_shape()) {
            if a != b {
                return Err(Error::dim("mix", a, b));
            }
        }
        let label = |i: usize| d_sl.items[i].label.expect("labeled dataset");
        if same_inputs(d_ssl, d_sl) {
            let pairs = d_sl
                .items
                .iter()
                .enumerate()
                .map(|(i, it)| MixPair {
                    x_mix: it.image.clone(),
                    y_sl: label(i),
                    task_id,
                    sl_index: i,
                    ssl_index: None,
                })
                .collect();
            return Ok(Self {
                pairs,
                lambda,
                mode: MixMode::Identity,
            });
        }
        if d_ssl.is_empty() {
            return Err(Error::Validation(format!("{}: empty dataset", d_ssl.name)));
        }
        let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
        let pairs = d_sl
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let j = rng.gen_range(0..d_ssl.len());
                let other = d_ssl.items[j].image.data();
                let data = it.image.data().iter().zip(other).map(|(&a, &b)| l * a + r * b).collect();
                Ok(MixPair {
                    x_mix: Tensor::new(it.image.shape().to_vec(), data)?,
                    y_sl: label(i),
                    task_id,
                    sl_index: i,
                    ssl_index: Some(j),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pairs,
            lambda,
            mode: MixMode::Mixup,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}
