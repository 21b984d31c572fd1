//! The six degradation recipes.
//!
//! Every recipe maps `(image, severity, rng)` to a new image with values
//! clipped into `[0, 1]`. Severity is a single knob in `[0, 1]`.

use super::image::ImageRGB;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

fn check_severity(severity: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::invalid(format!(
            "severity {severity} outside [0, 1]"
        )));
    }
    Ok(())
}

fn map_pixels(img: &ImageRGB, f: impl Fn(f64) -> f64) -> Result<ImageRGB> {
    let data = img.data().iter().map(|&v| f(v)).collect();
    ImageRGB::from_clipped(img.height(), img.width(), data)
}

/// Brightness factor of the dark recipe.
pub fn dark_factor(severity: f64) -> f64 {
    0.5 - 0.3 * severity
}

/// `I' = clip(b·I)` with `b = 0.5 − 0.3·severity`.
pub fn apply_dark(img: &ImageRGB, severity: f64, _rng: &mut SeededRng) -> Result<ImageRGB> {
    check_severity(severity)?;
    let b = dark_factor(severity);
    map_pixels(img, |v| b * v)
}

pub const FOG_AIRLIGHT: f64 = 0.9;

pub fn fog_transmission(severity: f64) -> f64 {
    0.7 - 0.4 * severity
}

/// `I' = t·I + (1 − t)·A` with `A = 0.9` and `t = 0.7 − 0.4·severity`.
pub fn apply_fog(img: &ImageRGB, severity: f64, _rng: &mut SeededRng) -> Result<ImageRGB> {
    check_severity(severity)?;
    let t = fog_transmission(severity);
    map_pixels(img, |v| t * v + (1.0 - t) * FOG_AIRLIGHT)
}

pub fn contrast_factor(severity: f64) -> f64 {
    0.5 - 0.3 * severity
}

/// `I' = clip((I − 0.5)·c + 0.5)` with `c = 0.5 − 0.3·severity`.
pub fn apply_contrast(img: &ImageRGB, severity: f64, _rng: &mut SeededRng) -> Result<ImageRGB> {
    check_severity(severity)?;
    let c = contrast_factor(severity);
    map_pixels(img, |v| (v - 0.5) * c + 0.5)
}

pub const SNOW_ALPHA: f64 = 0.8;

pub fn snow_disc_count(severity: f64) -> usize {
    (5.0 + 45.0 * severity).round() as usize
}

/// A snow flake: filled disc centred at `(cx, cy)` (pixel units).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Disc {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

/// Disc parameters drawn in order `cx, cy, radius` per disc.
pub fn sample_discs(height: usize, width: usize, severity: f64, rng: &mut SeededRng) -> Vec<Disc> {
    (0..snow_disc_count(severity))
        .map(|_| {
            let cx = rng.uniform() * width as f64;
            let cy = rng.uniform() * height as f64;
            let radius = rng.uniform_range(1.0, 3.0);
            Disc { cx, cy, radius }
        })
        .collect()
}

/// Blends each disc toward white with `α = 0.8`; pixel `(x, y)` is inside
/// when `(x − cx)² + (y − cy)² ≤ r²`. Discs are applied in order.
pub fn apply_snow(img: &ImageRGB, severity: f64, rng: &mut SeededRng) -> Result<ImageRGB> {
    check_severity(severity)?;
    if img.height() < 4 || img.width() < 4 {
        return Err(Error::invalid("snow needs an image of at least 4x4"));
    }
    let (h, w) = (img.height(), img.width());
    let mut data = img.data().to_vec();
    for disc in sample_discs(h, w, severity, rng) {
        let y0 = (disc.cy - disc.radius).floor().max(0.0) as usize;
        let y1 = ((disc.cy + disc.radius).ceil() as usize).min(h - 1);
        let x0 = (disc.cx - disc.radius).floor().max(0.0) as usize;
        let x1 = ((disc.cx + disc.radius).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 - disc.cx, y as f64 - disc.cy);
                if dx * dx + dy * dy <= disc.radius * disc.radius {
                    for v in &mut data[(y * w + x) * 3..(y * w + x + 1) * 3] {
                        *v = (1.0 - SNOW_ALPHA) * *v + SNOW_ALPHA;
                    }
                }
            }
        }
    }
    ImageRGB::from_clipped(h, w, data)
}

pub const RAIN_BRIGHTNESS: f64 = 0.4;

pub fn rain_streak_count(severity: f64) -> usize {
    (10.0 + 90.0 * severity).round() as usize
}

/// A rain streak between two integer endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streak {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

/// Streak parameters drawn in order `x, y, angle, length` per streak.
/// Angles lie in `[−30°, −10°]` from vertical, lengths in `[6, 12]` pixels.
pub fn sample_streaks(
    height: usize,
    width: usize,
    severity: f64,
    rng: &mut SeededRng,
) -> Vec<Streak> {
    (0..rain_streak_count(severity))
        .map(|_| {
            let x = rng.uniform() * width as f64;
            let y = rng.uniform() * height as f64;
            let angle = rng.uniform_range(-30.0, -10.0).to_radians();
            let length = rng.uniform_range(6.0, 12.0);
            Streak {
                x0: x.round() as i64,
                y0: y.round() as i64,
                x1: (x + length * angle.sin()).round() as i64,
                y1: (y + length * angle.cos()).round() as i64,
            }
        })
        .collect()
}

/// Integer Bresenham rasterization, endpoints included.
pub fn bresenham(s: Streak) -> Vec<(i64, i64)> {
    let dx = (s.x1 - s.x0).abs();
    let dy = -(s.y1 - s.y0).abs();
    let sx = if s.x0 < s.x1 { 1 } else { -1 };
    let sy = if s.y0 < s.y1 { 1 } else { -1 };
    let (mut x, mut y) = (s.x0, s.y0);
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx - dy + 1) as usize);
    loop {
        out.push((x, y));
        if x == s.x1 && y == s.y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

/// Adds `+0.4` along each rasterized streak (overlaps add up), then clips.
pub fn apply_rain(img: &ImageRGB, severity: f64, rng: &mut SeededRng) -> Result<ImageRGB> {
    check_severity(severity)?;
    let (h, w) = (img.height(), img.width());
    let mut data = img.data().to_vec();
    for streak in sample_streaks(h, w, severity, rng) {
        for (x, y) in bresenham(streak) {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                continue;
            }
            let i = (y as usize * w + x as usize) * 3;
            for v in &mut data[i..i + 3] {
                *v += RAIN_BRIGHTNESS;
            }
        }
    }
    ImageRGB::from_clipped(h, w, data)
}

pub fn impulse_probability(severity: f64) -> f64 {
    0.02 + 0.08 * severity
}

/// Impulse noise at `p = 0.02 + 0.08·severity`.
pub fn apply_impulse_noise(img: &ImageRGB, severity: f64, rng: &mut SeededRng) -> Result<ImageRGB> {
    check_severity(severity)?;
    apply_impulse_noise_with_probability(img, impulse_probability(severity), rng)
}

/// Each pixel, independently with probability `p`, has all three channels
/// set to 0 or 1 (equal odds). Every pixel takes two draws, one deciding
/// corruption and one the value.
pub fn apply_impulse_noise_with_probability(
    img: &ImageRGB,
    p: f64,
    rng: &mut SeededRng,
) -> Result<ImageRGB> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
    }
    let mut data = img.data().to_vec();
    // Both draws happen for every pixel, so for a fixed seed the corrupted
    // set only grows with `p`.
    for px in data.chunks_exact_mut(3) {
        let hit = rng.uniform() < p;
        let v = if rng.coin() { 0.0 } else { 1.0 };
        if hit {
            px.iter_mut().for_each(|c| *c = v);
        }
    }
    ImageRGB::from_clipped(img.height(), img.width(), data)
}
