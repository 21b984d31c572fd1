//! The frozen stand-in feature extractor.
//!
//! Each `p × p` patch (`3p²` values) is mapped to `C ≥ 3p²` features by a
//! matrix with orthonormal rows, drawn once from the seed. The decoder is its
//! transpose, so decoding clean features reproduces the clean image exactly
//! and any feature error becomes a pixel error of the same L2 size.

use nalgebra::DMatrix;

use crate::degrade::ImageRGB;
use crate::error::{Error, Result};
use crate::nn::{patchify, unpatchify};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub patch: usize,
    pub channels: usize,
    /// `[3p², C]`, orthonormal rows.
    pub encoder: Tensor,
}

impl Backbone {
    pub fn new(patch: usize, channels: usize, seed: u64) -> Result<Self> {
        let rows = 3 * patch * patch;
        if patch == 0 || channels < rows {
            return Err(Error::Config(format!(
                "backbone needs at least {rows} channels for patch {patch}, got {channels}"
            )));
        }
        let mut rng = SeededRng::new(seed);
        let g = DMatrix::from_fn(channels, rows, |_, _| rng.normal());
        // Q is C × 3p² with orthonormal columns; the encoder is Qᵀ.
        let q = g.qr().q();
        let mut data = Vec::with_capacity(rows * channels);
        for r in 0..rows {
            for c in 0..channels {
                data.push(q[(c, r)]);
            }
        }
        Ok(Self {
            patch,
            channels,
            encoder: Tensor::new(vec![rows, channels], data)?,
        })
    }

    /// Token grid side lengths for an image.
    pub fn grid(&self, img: &ImageRGB) -> (usize, usize) {
        (img.height() / self.patch, img.width() / self.patch)
    }

    /// Features `[tokens, C]`, tokens row-major over the patch grid.
    pub fn encode(&self, img: &ImageRGB) -> Result<Tensor> {
        let p = patchify(img.data(), img.height(), img.width(), self.patch)?;
        let rows = p.shape()[0];
        Tensor::new(
            vec![rows, self.channels],
            matmul(
                p.data(),
                self.encoder.data(),
                rows,
                3 * self.patch * self.patch,
                self.channels,
                false,
            ),
        )
    }

    /// Image from features, clipped to `[0, 1]`.
    pub fn decode(&self, features: &Tensor, height: usize, width: usize) -> Result<ImageRGB> {
        let k = 3 * self.patch * self.patch;
        if features.rank() != 2 || features.shape()[1] != self.channels {
            return Err(Error::shape(
                "backbone-decode",
                format!("{:?}", features.shape()),
            ));
        }
        let rows = features.shape()[0];
        let patches = Tensor::new(
            vec![rows, k],
            matmul(
                features.data(),
                self.encoder.data(),
                rows,
                self.channels,
                k,
                true,
            ),
        )?;
        ImageRGB::from_clipped(
            height,
            width,
            unpatchify(&patches, height, width, self.patch)?,
        )
    }
}

/// `a [m, k] · b [k, n]`, or `a [m, k] · bᵀ` with `b [n, k]` when `transpose_b`.
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, transpose_b: bool) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k)
                .map(|t| {
                    a[i * k + t]
                        * if transpose_b {
                            b[j * k + t]
                        } else {
                            b[t * n + j]
                        }
                })
                .sum();
        }
    }
    out
}
