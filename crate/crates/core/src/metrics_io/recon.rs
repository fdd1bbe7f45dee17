//! Reconstruction dumps: original / reconstructed image pairs as binary PPM
//! plus a CSV of per-sample MSE.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Batch, Dataset, Normalization};
use crate::engine::reconstruct_batch;
use crate::error::{Error, Result};
use crate::nn::{unpatchify, MixModel};
use crate::tensor::{Scalar, Tensor};

/// Anything that maps dataset items to reconstructed images `[B, C, H, W]`.
pub trait Reconstruct<T: Scalar> {
    fn reconstruct(&self, src: &Dataset<T>, idx: &[usize]) -> Result<Tensor<T>>;
}

/// The model's reconstruction head under the fixed evaluation masks, with
/// every patch predicted (visible ones included).
impl<T: Scalar> Reconstruct<T> for MixModel<T> {
    fn reconstruct(&self, src: &Dataset<T>, idx: &[usize]) -> Result<Tensor<T>> {
        let (pred, _) = reconstruct_batch(self, src, idx)?;
        unpatchify(&pred, &self.config().backbone)
    }
}

fn to_byte(norm: &Normalization, v: f64) -> u8 {
    (norm.invert(v) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes one `[C, H, W]` image as binary PPM. One channel is replicated to
/// gray; three are taken as RGB.
pub fn encode_ppm<T: Scalar>(image: &[T], c: usize, h: usize, w: usize, norm: &Normalization) -> Result<Vec<u8>> {
    if c != 1 && c != 3 {
        return Err(Error::Validation(format!("cannot write {c}-channel images as PPM")));
    }
    if image.len() != c * h * w {
        return Err(Error::Validation(format!("image has {} values, expected {}", image.len(), c * h * w)));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let ch = if c == 1 { 0 } else { k };
                out.push(to_byte(norm, image[(ch * h + y) * w + x].as_f64()));
            }
        }
    }
    Ok(out)
}

/// Writes `NNNN_orig.ppm` / `NNNN_recon.ppm` for each index, `grid.ppm`
/// (originals on top, reconstructions below) and `mse.csv`. Returns the
/// per-sample MSE in normalized pixel units.
pub fn dump_reconstructions<T: Scalar, R: Reconstruct<T> + ?Sized>(
    model: &R,
    src: &Dataset<T>,
    idx: &[usize],
    norm: &Normalization,
    dir: &Path,
) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(Error::Validation("no samples to reconstruct".into()));
    }
    let orig = Batch::gather(src, idx)?.images;
    let recon = model.reconstruct(src, idx)?;
    if recon.shape() != orig.shape() {
        return Err(Error::dim("reconstruct", recon.shape(), orig.shape()));
    }
    let [b, c, h, w] = orig.shape()[..] else {
        return Err(Error::Validation("expected a [B, C, H, W] batch".into()));
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per = c * h * w;
    let mut csv = String::from("index,mse\n");
    let mut mses = Vec::with_capacity(b);
    let mut grid = vec![T::zero(); 2 * b * per];
    for (k, &i) in idx.iter().enumerate() {
        let (o, r) = (&orig.data()[k * per..(k + 1) * per], &recon.data()[k * per..(k + 1) * per]);
        let mse = o.iter().zip(r).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / per as f64;
        mses.push(mse);
        writeln!(csv, "{i},{mse}").expect("string write");
        for (tag, img) in [("orig", o), ("recon", r)] {
            let path = dir.join(format!("{i:04}_{tag}.ppm"));
            std::fs::write(&path, encode_ppm(img, c, h, w, norm)?).map_err(|e| Error::io(&path, e))?;
        }
        // grid layout [C, 2H, B·W]
        for ch in 0..c {
            for y in 0..h {
                for (row, img) in [(y, o), (h + y, r)] {
                    let dst = (ch * 2 * h + row) * b * w + k * w;
                    grid[dst..dst + w].copy_from_slice(&img[(ch * h + y) * w..(ch * h + y + 1) * w]);
                }
            }
        }
    }
    let path = dir.join("grid.ppm");
    std::fs::write(&path, encode_ppm(&grid, c, 2 * h, b * w, norm)?).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("mse.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    Ok(mses)
}
