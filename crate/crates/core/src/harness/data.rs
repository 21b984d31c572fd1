//! Clean-image sources and the degraded training corpora built from them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::degrade::{
    read_ppm, synthesize_pair, DegradationKind, DegradationSpec, ImageRGB, NUM_KINDS,
};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// A procedural "natural-ish" image: a two-colour gradient background, a few
/// flat rectangles and discs, and a faint sinusoidal texture.
pub fn synthetic_image(size: usize, rng: &mut SeededRng) -> Result<ImageRGB> {
    let mut colour = || {
        [
            rng.uniform_range(0.1, 0.9),
            rng.uniform_range(0.1, 0.9),
            rng.uniform_range(0.1, 0.9),
        ]
    };
    let (c0, c1) = (colour(), colour());
    let mut data = vec![0.0; size * size * 3];
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let freq = rng.uniform_range(0.2, 0.8);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let t = (0.5 + ca * u + sa * v).clamp(0.0, 1.0);
            let tex = 0.04 * (freq * (x as f64 * ca - y as f64 * sa) + phase).sin();
            for c in 0..3 {
                data[(y * size + x) * 3 + c] = (1.0 - t) * c0[c] + t * c1[c] + tex;
            }
        }
    }
    let shapes = 2 + rng.below(4);
    for _ in 0..shapes {
        let col = [
            rng.uniform_range(0.05, 0.95),
            rng.uniform_range(0.05, 0.95),
            rng.uniform_range(0.05, 0.95),
        ];
        let cx = rng.uniform() * s;
        let cy = rng.uniform() * s;
        let r = rng.uniform_range(0.08, 0.25) * s;
        let disc = rng.coin();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= 0.7 * r
                };
                if inside {
                    data[(y * size + x) * 3..(y * size + x + 1) * 3].copy_from_slice(&col);
                }
            }
        }
    }
    ImageRGB::from_clipped(size, size, data)
}

/// `count` synthetic images, image `i` drawn from stream `split(i)`.
pub fn synthetic_images(count: usize, size: usize, seed: u64) -> Result<Vec<ImageRGB>> {
    let root = SeededRng::new(seed);
    (0..count)
        .map(|i| synthetic_image(size, &mut root.split(i as u64)))
        .collect()
}

/// PPM files in `dir`, sorted by file name.
pub fn list_ppm(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("cannot read directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    files.sort();
    Ok(files)
}

/// Every PPM image in `dir`, in file-name order.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, ImageRGB)>> {
    let files = list_ppm(dir)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no .ppm images in {}", dir.display())));
    }
    files
        .into_iter()
        .map(|p| {
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let img = read_ppm(&p).map_err(|e| Error::Data(format!("{}: {e}", p.display())))?;
            Ok((name, img))
        })
        .collect()
}

/// Maps `u ∈ [0, 1)` into the closed severity range.
pub fn severity_in(range: (f64, f64), u: f64) -> f64 {
    range.0 + (range.1 - range.0) * u
}

/// One labelled training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub clean: usize,
    pub spec: DegradationSpec,
    pub degraded: ImageRGB,
}

impl Sample {
    pub fn label(&self) -> usize {
        self.spec.kind.label()
    }
}

/// Degraded corpus over a set of clean images. Sample `i` uses clean image
/// `i mod n` and kind `i mod 6`; severity and seed come from stream
/// `split(i)` of the corpus seed.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub clean: Vec<ImageRGB>,
    pub samples: Vec<Sample>,
}

impl Corpus {
    pub fn build(
        clean: Vec<ImageRGB>,
        count: usize,
        severity: (f64, f64),
        seed: u64,
    ) -> Result<Self> {
        if clean.is_empty() {
            return Err(Error::Data("corpus needs at least one clean image".into()));
        }
        let root = SeededRng::new(seed);
        let samples = (0..count)
            .map(|i| {
                let mut rng = root.split(i as u64);
                let kind = DegradationKind::ALL[i % NUM_KINDS];
                let spec = DegradationSpec::new(
                    kind,
                    severity_in(severity, rng.uniform()),
                    rng.split(0).seed(),
                )?;
                let c = i % clean.len();
                let (degraded, _) = synthesize_pair(&clean[c], &spec)?;
                Ok(Sample {
                    clean: c,
                    spec,
                    degraded,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clean, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by label.
    pub fn by_label(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); NUM_KINDS];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.label()].push(i);
        }
        groups
    }

    /// `per_class` distinct samples from every label that has enough of them.
    pub fn balanced_batch(&self, per_class: usize, rng: &mut SeededRng) -> Vec<usize> {
        let mut out = Vec::new();
        for group in self.by_label() {
            if group.len() < per_class {
                continue;
            }
            let mut picked: Vec<usize> = Vec::with_capacity(per_class);
            while picked.len() < per_class {
                let j = group[rng.below(group.len())];
                if !picked.contains(&j) {
                    picked.push(j);
                }
            }
            out.extend(picked);
        }
        out
    }
}

/// Two overlapping square crops of side `crop` from `img`; the second is
/// shifted by at most `max_shift` pixels per axis from the first.
pub fn view_pair(
    img: &ImageRGB,
    crop: usize,
    max_shift: usize,
    rng: &mut SeededRng,
) -> Result<[(usize, usize); 2]> {
    if crop > img.height() || crop > img.width() {
        return Err(Error::Config(format!(
            "crop {crop} larger than image {}x{}",
            img.height(),
            img.width()
        )));
    }
    let (ry, rx) = (img.height() - crop, img.width() - crop);
    let y0 = rng.below(ry + 1);
    let x0 = rng.below(rx + 1);
    let mut shifted = |p: usize, room: usize| {
        let lo = p.saturating_sub(max_shift);
        let hi = (p + max_shift).min(room);
        lo + rng.below(hi - lo + 1)
    };
    let y1 = shifted(y0, ry);
    let x1 = shifted(x0, rx);
    Ok([(y0, x0), (y1, x1)])
}

/// Fraction of the crop area shared by two crops of side `crop`.
pub fn overlap_fraction(a: (usize, usize), b: (usize, usize), crop: usize) -> f64 {
    let oy = crop.saturating_sub(a.0.abs_diff(b.0));
    let ox = crop.saturating_sub(a.1.abs_diff(b.1));
    (oy * ox) as f64 / (crop * crop) as f64
}
