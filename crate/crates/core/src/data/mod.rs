//! Dataset ingestion, stratified subsampling, the mixing function and batching.

mod batch;
mod formats;
mod mix;
mod subsample;
mod synthetic;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use batch::{augment_batch, batches, epoch_order, round_robin, Augment, Batch, Batches, Examples};
pub use formats::{load_cifar_binary, load_idx, parse_idx, CIFAR_RECORD_BYTES};
pub use mix::{mix, MixMode, MixPair, MixedDataset};
pub use subsample::{split_holdout, subsample};
pub use synthetic::SyntheticSpec;

/// What a dataset may be used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Unlabeled, self-supervised only.
    Ssl,
    Sl,
    Both,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item<T> {
    /// `[C, H, W]`
    pub image: Tensor<T>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub items: Vec<Item<T>>,
    pub num_classes: Option<usize>,
    pub role: Role,
}

impl<T: Scalar> Dataset<T> {
    /// Builds a dataset, checking the shared-shape and label invariants.
    pub fn new(name: impl Into<String>, items: Vec<Item<T>>, num_classes: Option<usize>, role: Role) -> Result<Self> {
        let name = name.into();
        if let Some(first) = items.first() {
            if first.image.shape().len() != 3 {
                return Err(Error::Validation(format!("{name}: images must be [C, H, W]")));
            }
            if let Some(bad) = items.iter().find(|i| i.image.shape() != first.image.shape()) {
                return Err(Error::dim("dataset", first.image.shape(), bad.image.shape()));
            }
        }
        if role != Role::Ssl {
            let c = num_classes
                .ok_or_else(|| Error::Validation(format!("{name}: labeled dataset without class count")))?;
            for it in &items {
                match it.label {
                    Some(y) if y < c => {}
                    Some(y) => {
                        return Err(Error::Validation(format!("{name}: label {y} out of range for {c} classes")))
                    }
                    None => return Err(Error::Validation(format!("{name}: unlabeled item in labeled dataset"))),
                }
            }
        }
        Ok(Self {
            name,
            items,
            num_classes,
            role,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.role != Role::Ssl
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.items.first().map(|i| i.image.shape())
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
            num_classes: self.num_classes,
            role: self.role,
        }
    }

    /// Same images, labels dropped.
    pub fn unlabeled(&self) -> Self {
        Self {
            name: self.name.clone(),
            items: self
                .items
                .iter()
                .map(|i| Item {
                    image: i.image.clone(),
                    label: None,
                })
                .collect(),
            num_classes: None,
            role: Role::Ssl,
        }
    }

    /// Concatenates datasets of equal image shape; labels are dropped.
    pub fn union_unlabeled(name: &str, parts: &[&Dataset<T>]) -> Result<Self> {
        let items = parts.iter().flat_map(|d| d.unlabeled().items).collect();
        Self::new(name, items, None, Role::Ssl)
    }
}

/// On-disk dataset encodings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Idx,
    CifarBinary,
    SyntheticSpec,
}

impl Format {
    /// Guesses the format from a file name.
    pub fn infer(path: &Path) -> Option<Self> {
        let name = path.file_name()?.to_string_lossy().to_ascii_lowercase();
        if name.ends_with(".spec") {
            Some(Self::SyntheticSpec)
        } else if name.contains("idx") {
            Some(Self::Idx)
        } else if name.ends_with(".bin") {
            Some(Self::CifarBinary)
        } else {
            None
        }
    }
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idx" => Ok(Self::Idx),
            "cifar_binary" => Ok(Self::CifarBinary),
            "synthetic_spec" | "synthetic" => Ok(Self::SyntheticSpec),
            _ => Err(Error::Config(format!("unknown dataset format {s:?}"))),
        }
    }
}

/// Fixed per-dataset normalization applied to 8-bit pixels: `(v/255 - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self { mean: 0.5, std: 0.5 }
    }
}

impl Normalization {
    pub fn apply<T: Scalar>(&self, byte: u8) -> T {
        T::lit((byte as f64 / 255.0 - self.mean) / self.std)
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}

/// Loads a dataset with default normalization.
///
/// For `idx`, `path` is the image file; a sibling label file is picked up when
/// the name contains `images-idx3` and the matching `labels-idx1` file exists.
pub fn load<T: Scalar>(path: &Path, format: Format) -> Result<Dataset<T>> {
    load_with(path, format, Normalization::default())
}

pub fn load_with<T: Scalar>(path: &Path, format: Format, norm: Normalization) -> Result<Dataset<T>> {
    match format {
        Format::Idx => {
            let labels = formats::sibling_label_file(path);
            load_idx(path, labels.as_deref(), norm)
        }
        Format::CifarBinary => load_cifar_binary(path, norm),
        Format::SyntheticSpec => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec: SyntheticSpec = text.parse().map_err(|e: Error| match e {
                Error::Config(m) => Error::format(path, m),
                other => other,
            })?;
            Ok(spec.generate()?.0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(v: f32) -> Tensor<f32> {
        Tensor::full(vec![1, 2, 2], v)
    }

    #[test]
    fn invariants_enforced() {
        let ok = Dataset::new("d", vec![Item { image: img(0.0), label: Some(1) }], Some(2), Role::Sl);
        assert!(ok.is_ok());
        let bad_label = Dataset::new("d", vec![Item { image: img(0.0), label: Some(2) }], Some(2), Role::Sl);
        assert!(matches!(bad_label, Err(Error::Validation(_))));
        let unlabeled = Dataset::new("d", vec![Item { image: img(0.0), label: None }], Some(2), Role::Both);
        assert!(unlabeled.is_err());
        let shapes = Dataset::new(
            "d",
            vec![
                Item { image: img(0.0), label: None },
                Item { image: Tensor::zeros(vec![1, 3, 3]), label: None },
            ],
            None,
            Role::Ssl,
        );
        assert!(matches!(shapes, Err(Error::Dimension { .. })));
    }

    #[test]
    fn format_inference() {
        assert_eq!(Format::infer(Path::new("a/tiny.spec")), Some(Format::SyntheticSpec));
        assert_eq!(Format::infer(Path::new("train-images-idx3-ubyte")), Some(Format::Idx));
        assert_eq!(Format::infer(Path::new("data_batch_1.bin")), Some(Format::CifarBinary));
    }
}
