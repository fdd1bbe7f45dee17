use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, MixedDataset};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

/// Indexable source of training examples.
pub trait Examples<T> {
    fn count(&self) -> usize;
    fn image(&self, i: usize) -> &Tensor<T>;
    fn label(&self, i: usize) -> Option<usize>;
    fn task_id(&self, _i: usize) -> usize {
        0
    }
}

impl<T: Scalar> Examples<T> for Dataset<T> {
    fn count(&self) -> usize {
        self.len()
    }
    fn image(&self, i: usize) -> &Tensor<T> {
        &self.items[i].image
    }
    fn label(&self, i: usize) -> Option<usize> {
        self.items[i].label
    }
}

impl<T: Scalar> Examples<T> for MixedDataset<T> {
    fn count(&self) -> usize {
        self.len()
    }
    fn image(&self, i: usize) -> &Tensor<T> {
        &self.pairs[i].x_mix
    }
    fn label(&self, i: usize) -> Option<usize> {
        Some(self.pairs[i].y_sl)
    }
    fn task_id(&self, i: usize) -> usize {
        self.pairs[i].task_id
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    /// `[B, C, H, W]`
    pub images: Tensor<T>,
    /// Present when every example in the batch is labeled.
    pub labels: Option<Vec<usize>>,
    pub task_ids: Vec<usize>,
    /// Positions in the source.
    pub indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn gather<E: Examples<T> + ?Sized>(src: &E, indices: &[usize]) -> Result<Self> {
        let imgs: Vec<&Tensor<T>> = indices.iter().map(|&i| src.image(i)).collect();
        let labels: Option<Vec<usize>> = indices.iter().map(|&i| src.label(i)).collect();
        Ok(Self {
            images: Tensor::stack(&imgs)?,
            labels,
            task_ids: indices.iter().map(|&i| src.task_id(i)).collect(),
            indices: indices.to_vec(),
        })
    }
}

/// The shuffled visiting order for one epoch, keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "shuffle", epoch as u64));
    order.shuffle(&mut rng);
    order
}

pub struct Batches<'a, T, E: ?Sized> {
    src: &'a E,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar, E: Examples<T> + ?Sized> Iterator for Batches<'_, T, E> {
    type Item = Batch<T>;

    fn next(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch::gather(self.src, idx).expect("dataset items share one shape"))
    }
}

/// Shuffled mini-batches for one epoch; the last partial batch is kept.
pub fn batches<T: Scalar, E: Examples<T> + ?Sized>(
    src: &E,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Batches<'_, T, E>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if src.count() == 0 {
        return Err(Error::Validation("cannot batch an empty dataset".into()));
    }
    Ok(Batches {
        src,
        order: epoch_order(src.count(), seed, epoch),
        batch_size,
        pos: 0,
        _t: std::marker::PhantomData,
    })
}

/// Task visiting order for one epoch of per-task batches: tasks take turns,
/// and a task drops out once its batches are used up.
pub fn round_robin(task_sizes: &[usize], batch_size: usize) -> Vec<usize> {
    let mut left: Vec<usize> = task_sizes.iter().map(|n| n.div_ceil(batch_size.max(1))).collect();
    let mut seq = Vec::with_capacity(left.iter().sum());
    while left.iter().any(|&l| l > 0) {
        for (t, l) in left.iter_mut().enumerate() {
            if *l > 0 {
                *l -= 1;
                seq.push(t);
            }
        }
    }
    seq
}

/// Batch-time augmentation: zero-padded random crop and horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

impl Augment {
    pub const NONE: Augment = Augment { pad: 0, flip: false };

    pub fn is_active(&self) -> bool {
        self.pad > 0 || self.flip
    }
}

impl Default for Augment {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

/// Augments a stacked `[B, C, H, W]` batch in place. Draws nothing when inactive.
pub fn augment_batch<T: Scalar, R: Rng + ?Sized>(images: &mut Tensor<T>, aug: Augment, rng: &mut R) -> Result<()> {
    if !aug.is_active() {
        return Ok(());
    }
    let &[b, c, h, w] = images.shape() else {
        return Err(Error::Validation(format!("augment expects [B, C, H, W], got {:?}", images.shape())));
    };
    let plane = h * w;
    let mut scratch = vec![T::zero(); c * plane];
    for s in 0..b {
        let (dy, dx) = if aug.pad > 0 {
            (rng.gen_range(0..=2 * aug.pad), rng.gen_range(0..=2 * aug.pad))
        } else {
            (aug.pad, aug.pad)
        };
        let flip = aug.flip && rng.gen_bool(0.5);
        let img = &mut images.data_mut()[s * c * plane..(s + 1) * c * plane];
        for ch in 0..c {
            for y in 0..h {
                let sy = (y + dy) as isize - aug.pad as isize;
                for x in 0..w {
                    let ox = if flip { w - 1 - x } else { x };
                    let sx = (ox + dx) as isize - aug.pad as isize;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    scratch[ch * plane + y * w + x] = if inside {
                        img[ch * plane + sy as usize * w + sx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Item, Role};

    fn ds(n: usize) -> Dataset<f32> {
        let items = (0..n)
            .map(|i| Item {
                image: Tensor::full(vec![1, 1, 1], i as f32),
                label: Some(i % 3),
            })
            .collect();
        Dataset::new("d", items, Some(3), Role::Both).unwrap()
    }

    #[test]
    fn sizes_keep_last_partial() {
        let d = ds(10);
        let sizes: Vec<usize> = batches(&d, 4, 1, 0).unwrap().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let b = batches(&d, 4, 1, 0).unwrap().next().unwrap();
        assert_eq!(b.images.shape(), &[4, 1, 1, 1]);
        assert_eq!(b.labels.as_ref().unwrap().len(), 4);
    }

    #[test]
    fn order_keyed_by_seed_and_epoch() {
        let d = ds(20);
        let a: Vec<Vec<usize>> = batches(&d, 3, 5, 2).unwrap().map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = batches(&d, 3, 5, 2).unwrap().map(|b| b.indices).collect();
        assert_eq!(a, b);
        assert_ne!(epoch_order(20, 5, 0), epoch_order(20, 5, 1));
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn empty_and_zero_batch_rejected() {
        let d = ds(0);
        assert!(batches(&d, 2, 0, 0).is_err());
        assert!(batches(&ds(3), 0, 0, 0).is_err());
    }

    #[test]
    fn round_robin_traces() {
        assert_eq!(round_robin(&[4, 2], 2), vec![0, 1, 0]);
        assert_eq!(round_robin(&[6, 4], 2), vec![0, 1, 0, 1, 0]);
        assert_eq!(round_robin(&[5], 2), vec![0, 0, 0]);
    }

    #[test]
    fn flip_only_mirrors_rows() {
        let mut img = Tensor::<f64>::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let aug = Augment { pad: 0, flip: true };
        let mut seen = std::collections::HashSet::new();
        for _ in 0..16 {
            augment_batch(&mut img, aug, &mut rng).unwrap();
            let d = img.data().to_vec();
            assert!(d == [1.0, 2.0, 3.0] || d == [3.0, 2.0, 1.0]);
            seen.insert(d.iter().map(|v| *v as i64).collect::<Vec<_>>());
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn crop_preserves_shape_and_values() {
        let data: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let mut img = Tensor::new(vec![1, 1, 4, 4], data.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        augment_batch(&mut img, Augment { pad: 1, flip: false }, &mut rng).unwrap();
        assert_eq!(img.shape(), &[1, 1, 4, 4]);
        assert!(img.data().iter().all(|v| *v == 0.0 || data.contains(v)));
    }

    #[test]
    fn inactive_augment_draws_nothing() {
        let mut img = Tensor::<f32>::zeros(vec![2, 1, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let before = rng.clone();
        augment_batch(&mut img, Augment::NONE, &mut rng).unwrap();
        assert_eq!(rng, before);
    }
}
