//! Small layer building blocks over the tape.

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±gain / sqrt(fan_in)`.
    Uniform {
        gain: f64,
    },
    Zeros,
}

impl Init {
    pub const DEFAULT: Init = Init::Uniform { gain: 1.0 };

    pub fn tensor(self, shape: &[usize], fan_in: usize, rng: &mut SeededRng) -> Result<Tensor> {
        match self {
            Init::Zeros => Tensor::zeros(shape.to_vec()),
            Init::Uniform { gain } => {
                let bound = gain / (fan_in as f64).sqrt();
                Tensor::from_fn(shape.to_vec(), |_| rng.uniform_range(-bound, bound))
            }
        }
    }
}

/// `x · W + b` over rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            init.tensor(&[in_dim, out_dim], in_dim, rng)?,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])?)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!("expected [_, {}], got {shape:?}", self.in_dim),
            ));
        }
        let y = x.matmul(tape.param(store, self.weight)?)?;
        match self.bias {
            Some(b) => y.add(tape.param(store, b)?),
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Two linear layers with a SiLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        last_init: Init,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(Self {
            first: Linear::new(
                store,
                &format!("{name}.0"),
                dims.0,
                dims.1,
                Init::DEFAULT,
                true,
                rng,
            )?,
            second: Linear::new(
                store,
                &format!("{name}.1"),
                dims.1,
                dims.2,
                last_init,
                true,
                rng,
            )?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.first.forward(tape, store, x)?.silu()?;
        self.second.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.first.params();
        v.extend(self.second.params());
        v
    }
}

/// Layer normalization over the last axis with a learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(vec![dim])?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![dim])?)?,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(Self::EPS)?
            .mul(tape.param(store, self.gamma)?)?
            .add(tape.param(store, self.beta)?)
    }
}

/// Splits an image-like `[H, W, 3]` row-major buffer into non-overlapping
/// `patch × patch` tiles, one flattened tile per row.
pub fn patchify(data: &[f64], height: usize, width: usize, patch: usize) -> Result<Tensor> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::shape(
            "patchify",
            format!("{height}x{width} is not divisible by patch {patch}"),
        ));
    }
    let (ph, pw) = (height / patch, width / patch);
    let row = patch * patch * 3;
    let mut out = Vec::with_capacity(ph * pw * row);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * width + px * patch) * 3;
                out.extend_from_slice(&data[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![ph * pw, row], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, patch: usize) -> Result<Vec<f64>> {
    let (ph, pw) = (height / patch, width / patch);
    let row = patch * patch * 3;
    if patches.shape() != [ph * pw, row] {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for {height}x{width}/{patch}", patches.shape()),
        ));
    }
    let mut out = vec![0.0; height * width * 3];
    let d = patches.data();
    for py in 0..ph {
        for px in 0..pw {
            let base = (py * pw + px) * row;
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * width + px * patch) * 3;
                out[start..start + patch * 3]
                    .copy_from_slice(&d[base + dy * patch * 3..base + (dy + 1) * patch * 3]);
            }
        }
    }
    Ok(out)
}
