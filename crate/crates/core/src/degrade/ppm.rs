//! Binary PPM (P6, maxval 255) reading and writing.
//!
//! Values are quantized as `round(255·v)` on write and read back as
//! `byte / 255`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::image::ImageRGB;
use crate::error::{Error, Result};

pub fn encode_ppm(img: &ImageRGB) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|&v| (255.0 * v).round() as u8));
    out
}

/// Index of the next non-whitespace, non-comment byte at or after `pos`.
fn skip_space(bytes: &[u8], mut pos: usize) -> usize {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            return pos;
        }
    }
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    *pos = skip_space(bytes, *pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("malformed PPM header".into()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageRGB> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Format("not a binary PPM (missing P6 magic)".into()));
    }
    let mut pos = 2;
    let width = header_number(bytes, &mut pos)?;
    let height = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("malformed PPM header".into()));
    }
    pos += 1;
    let need = width * height * 3;
    let pixels = &bytes[pos..];
    if pixels.len() < need {
        return Err(Error::Format(format!(
            "PPM truncated: need {need} bytes, have {}",
            pixels.len()
        )));
    }
    let data = pixels[..need].iter().map(|&b| b as f64 / 255.0).collect();
    ImageRGB::new(height, width, data)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageRGB) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(img))?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageRGB> {
    decode_ppm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let img = ImageRGB::new(1, 2, vec![0.0, 0.5, 1.0, 0.2, 0.4, 0.6]).unwrap();
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 128, 255, 51, 102, 153]);
    }

    #[test]
    fn comments_and_errors() {
        let mut bytes = b"P6 # comment\n1 1\n255\n".to_vec();
        bytes.extend([10, 20, 30]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.data(), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
        assert!(decode_ppm(b"P5\n1 1\n255\n\0").is_err());
        assert!(decode_ppm(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
    }

    #[test]
    fn quantized_images_round_trip_bit_exactly() {
        let data: Vec<f64> = (0..4 * 3 * 3)
            .map(|i| ((i * 37) % 256) as f64 / 255.0)
            .collect();
        let img = ImageRGB::new(4, 3, data).unwrap();
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        assert_eq!(img, back);
        assert_eq!(encode_ppm(&back), encode_ppm(&img));
    }
}
