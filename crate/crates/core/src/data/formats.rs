//! IDX (MNIST-style) and CIFAR-10 binary readers.

use std::path::{Path, PathBuf};

use super::{Dataset, Item, Normalization, Role};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One label byte followed by a 3×32×32 channel-major image.
pub const CIFAR_RECORD_BYTES: usize = 3073;
const CIFAR_CLASSES: usize = 10;

const IDX_UBYTE: u8 = 0x08;

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an unsigned-byte IDX buffer into its dimensions and payload.
pub fn parse_idx<'a>(path: &Path, bytes: &'a [u8]) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::format(path, "truncated idx header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != IDX_UBYTE {
        return Err(Error::format(
            path,
            format!("bad idx magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3]),
        ));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err(Error::format(path, "truncated idx header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("idx payload has {} bytes, header implies {expected}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

pub(super) fn sibling_label_file(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    if !name.contains("images-idx3") {
        return None;
    }
    let candidate = images.with_file_name(name.replace("images-idx3", "labels-idx1"));
    candidate.exists().then_some(candidate)
}

/// Reads an IDX image file (magic `0x00000803`) and optional label file
/// (magic `0x00000801`).
pub fn load_idx<T: Scalar>(images: &Path, labels: Option<&Path>, norm: Normalization) -> Result<Dataset<T>> {
    let bytes = read(images)?;
    let (dims, pixels) = parse_idx(images, &bytes)?;
    let (n, shape) = match dims.as_slice() {
        [n, h, w] => (*n, vec![1, *h, *w]),
        [n, c, h, w] => (*n, vec![*c, *h, *w]),
        _ => return Err(Error::format(images, format!("expected 3 or 4 idx dims, got {dims:?}"))),
    };
    let per: usize = shape.iter().product();
    let label_vals = match labels {
        Some(lp) => {
            let lb = read(lp)?;
            let (ldims, lpay) = parse_idx(lp, &lb)?;
            if ldims.len() != 1 || ldims[0] != n {
                return Err(Error::format(lp, format!("label dims {ldims:?} do not match {n} images")));
            }
            Some(lpay.iter().map(|&b| b as usize).collect::<Vec<_>>())
        }
        None => None,
    };
    let items = (0..n)
        .map(|i| {
            let data = pixels[i * per..(i + 1) * per].iter().map(|&b| norm.apply(b)).collect();
            Ok(Item {
                image: Tensor::new(shape.clone(), data)?,
                label: label_vals.as_ref().map(|l| l[i]),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = images.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match label_vals {
        Some(l) => {
            let classes = l.iter().max().map(|m| m + 1).unwrap_or(0);
            Dataset::new(name, items, Some(classes), Role::Both)
        }
        None => Dataset::new(name, items, None, Role::Ssl),
    }
}

/// Reads a CIFAR-10 binary batch.
pub fn load_cifar_binary<T: Scalar>(path: &Path, norm: Normalization) -> Result<Dataset<T>> {
    let bytes = read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::format(
            path,
            format!("file size {} is not a multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    let items = bytes
        .chunks_exact(CIFAR_RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::format(path, format!("record {i}: label {label} out of range")));
            }
            let data = rec[1..].iter().map(|&b| norm.apply(b)).collect();
            Ok(Item {
                image: Tensor::new(vec![3, 32, 32], data)?,
                label: Some(label),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, items, Some(CIFAR_CLASSES), Role::Both)
}
