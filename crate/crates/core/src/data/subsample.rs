use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

fn floor_frac(p: f64, n: usize) -> usize {
    // tolerate representation error such as 0.29 * 100 = 28.999999999999996
    (p * n as f64 + 1e-9).floor() as usize
}

/// Indices of a stratified (per-class) or plain random subset of `floor(p·n)` items,
/// sorted ascending.
fn select<T: Scalar>(ds: &Dataset<T>, p: f64, seed: u64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("fraction {p} outside (0, 1]")));
    }
    let total = floor_frac(p, ds.len());
    if total == 0 {
        return Err(Error::Validation(format!(
            "fraction {p} of {} items selects nothing",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(total);
    match ds.num_classes.filter(|_| ds.is_labeled()) {
        Some(classes) => {
            let mut by_class = vec![Vec::new(); classes];
            for (i, it) in ds.items.iter().enumerate() {
                by_class[it.label.expect("labeled")].push(i);
            }
            let mut take: Vec<usize> = by_class.iter().map(|c| floor_frac(p, c.len())).collect();
            let mut short = total.saturating_sub(take.iter().sum());
            // hand the remainder to the classes with the largest fractional share
            let mut order: Vec<usize> = (0..classes).collect();
            order.sort_by(|&a, &b| {
                let fa = p * by_class[a].len() as f64 - take[a] as f64;
                let fb = p * by_class[b].len() as f64 - take[b] as f64;
                fb.total_cmp(&fa).then(a.cmp(&b))
            });
            for &c in order.iter().cycle().take(classes * 2) {
                if short == 0 {
                    break;
                }
                if take[c] < by_class[c].len() {
                    take[c] += 1;
                    short -= 1;
                }
            }
            for (members, k) in by_class.iter().zip(take) {
                for j in rand::seq::index::sample(&mut rng, members.len(), k) {
                    chosen.push(members[j]);
                }
            }
        }
        None => chosen.extend(rand::seq::index::sample(&mut rng, ds.len(), total)),
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Uniform random subset of `floor(p·|ds|)` items without replacement,
/// stratified per class when labels exist. Original item order is kept.
pub fn subsample<T: Scalar>(ds: &Dataset<T>, p: f64, seed: u64) -> Result<Dataset<T>> {
    let idx = select(ds, p, seed)?;
    Ok(ds.subset(&idx))
}

/// Splits off a stratified held-out fraction; returns `(train, held_out)`.
pub fn split_holdout<T: Scalar>(ds: &Dataset<T>, frac: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    let held = select(ds, frac, seed)?;
    if held.len() == ds.len() {
        return Err(Error::Validation("held-out split leaves no training data".into()));
    }
    let mut is_held = vec![false; ds.len()];
    for &i in &held {
        is_held[i] = true;
    }
    let train: Vec<usize> = (0..ds.len()).filter(|&i| !is_held[i]).collect();
    let mut test = ds.subset(&held);
    test.name = format!("{}-heldout", ds.name);
    Ok((ds.subset(&train), test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Item, Role};
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn balanced(n: usize, classes: usize) -> Dataset<f32> {
        let items = (0..n)
            .map(|i| Item {
                image: Tensor::full(vec![1, 1, 1], i as f32),
                label: Some(i % classes),
            })
            .collect();
        Dataset::new("b", items, Some(classes), Role::Both).unwrap()
    }

    #[test]
    fn full_fraction_is_identity() {
        let ds = balanced(50, 5);
        assert_eq!(subsample(&ds, 1.0, 3).unwrap(), ds);
    }

    #[test]
    fn ten_percent_of_thousand() {
        let ds = balanced(1000, 10);
        let s = subsample(&ds, 0.1, 1).unwrap();
        assert_eq!(s.len(), 100);
        for c in 0..10 {
            assert_eq!(s.items.iter().filter(|i| i.label == Some(c)).count(), 10);
        }
    }

    #[test]
    fn empty_result_rejected() {
        let ds = balanced(5, 5);
        assert!(matches!(subsample(&ds, 0.1, 1), Err(Error::Validation(_))));
        assert!(matches!(subsample(&ds, 0.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn unlabeled_subsample() {
        let ds = balanced(40, 4).unlabeled();
        let s = subsample(&ds, 0.25, 9).unwrap();
        assert_eq!(s.len(), 10);
        assert_eq!(subsample(&ds, 0.25, 9).unwrap(), s);
    }

    #[test]
    fn holdout_partitions() {
        let ds = balanced(100, 10);
        let (train, test) = split_holdout(&ds, 0.1, 4).unwrap();
        assert_eq!(train.len(), 90);
        assert_eq!(test.len(), 10);
        let mut all: Vec<f32> = train.items.iter().chain(&test.items).map(|i| i.image.item()).collect();
        all.sort_by(f32::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f32).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn size_is_floor_and_stable_under_full_pass(n in 10usize..300, classes in 1usize..7, p in 0.05f64..1.0, seed: u64) {
            // unbalanced labels
            let items = (0..n).map(|i| Item { image: Tensor::full(vec![1, 1, 1], 0.0f32), label: Some((i * i) % classes) }).collect();
            let ds = Dataset::new("u", items, Some(classes), Role::Both).unwrap();
            let want = (p * n as f64 + 1e-9).floor() as usize;
            prop_assume!(want >= 1);
            let direct = subsample(&ds, p, seed).unwrap();
            prop_assert_eq!(direct.len(), want);
            let twice = subsample(&subsample(&ds, 1.0, seed).unwrap(), p, seed).unwrap();
            prop_assert_eq!(twice.len(), direct.len());
        }
    }
}
