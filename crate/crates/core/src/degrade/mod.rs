//! Synthetic degradations: six procedural corruptions, the labelled pair
//! generator used by training, and PPM image I/O.

mod image;
mod ops;
mod ppm;

use std::fmt;
use std::str::FromStr;

pub use image::ImageRGB;
pub use ops::{
    apply_contrast, apply_dark, apply_fog, apply_impulse_noise,
    apply_impulse_noise_with_probability, apply_rain, apply_snow, bresenham, contrast_factor,
    dark_factor, fog_transmission, impulse_probability, rain_streak_count, sample_discs,
    sample_streaks, snow_disc_count, Disc, Streak, FOG_AIRLIGHT, RAIN_BRIGHTNESS, SNOW_ALPHA,
};
pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// The six degradation classes. The discriminant is the class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Dark = 0,
    Fog = 1,
    Contrast = 2,
    Snow = 3,
    Rain = 4,
    ImpulseNoise = 5,
}

pub const NUM_KINDS: usize = 6;

impl DegradationKind {
    pub const ALL: [DegradationKind; NUM_KINDS] = [
        DegradationKind::Dark,
        DegradationKind::Fog,
        DegradationKind::Contrast,
        DegradationKind::Snow,
        DegradationKind::Rain,
        DegradationKind::ImpulseNoise,
    ];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Result<Self> {
        Self::ALL.get(label).copied().ok_or_else(|| {
            Error::invalid(format!("degradation label {label} outside 0..{NUM_KINDS}"))
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Dark => "dark",
            DegradationKind::Fog => "fog",
            DegradationKind::Contrast => "contrast",
            DegradationKind::Snow => "snow",
            DegradationKind::Rain => "rain",
            DegradationKind::ImpulseNoise => "impulse-noise",
        }
    }

    pub fn apply(self, img: &ImageRGB, severity: f64, rng: &mut SeededRng) -> Result<ImageRGB> {
        match self {
            DegradationKind::Dark => apply_dark(img, severity, rng),
            DegradationKind::Fog => apply_fog(img, severity, rng),
            DegradationKind::Contrast => apply_contrast(img, severity, rng),
            DegradationKind::Snow => apply_snow(img, severity, rng),
            DegradationKind::Rain => apply_rain(img, severity, rng),
            DegradationKind::ImpulseNoise => apply_impulse_noise(img, severity, rng),
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown degradation kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub severity: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn new(kind: DegradationKind, severity: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&severity) {
            return Err(Error::invalid(format!(
                "severity {severity} outside [0, 1]"
            )));
        }
        Ok(Self {
            kind,
            severity,
            seed,
        })
    }
}

/// Degrades `clean` according to `spec`; returns the image and its class label.
pub fn synthesize_pair(clean: &ImageRGB, spec: &DegradationSpec) -> Result<(ImageRGB, usize)> {
    let mut rng = SeededRng::new(spec.seed);
    let out = spec.kind.apply(clean, spec.severity, &mut rng)?;
    Ok((out, spec.kind.label()))
}
