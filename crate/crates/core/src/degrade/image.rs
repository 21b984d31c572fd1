use crate::error::{Error, Result};

/// RGB image with values in `[0, 1]`, stored row-major as `[y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageRGB {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image", format!("{height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!(
                    "{height}x{width}x3 needs {} values, got {}",
                    height * width * 3,
                    data.len()
                ),
            ));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image by clipping every value into `[0, 1]`.
    pub fn from_clipped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image" });
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_size(&self, other: &ImageRGB) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Sub-image with top-left corner `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, height: usize, width: usize) -> Result<ImageRGB> {
        if y + height > self.height || x + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(
                "crop",
                format!(
                    "{height}x{width} at ({y},{x}) in {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for row in y..y + height {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(ImageRGB {
            height,
            width,
            data,
        })
    }

    /// Luma `0.299 R + 0.587 G + 0.114 B`, row-major.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }
}
