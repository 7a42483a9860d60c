//! Grayscale images and capture-side normalization.
//!
//! Capture devices are heterogeneous, so every image entering the system is
//! first turned into a canonical [`FaceRaster`]: square, bilinearly resampled
//! to the configured size, intensities min-max rescaled into `[0, 1]`.

use thiserror::Error;

/// Default edge length for normalized rasters.
pub const DEFAULT_RASTER_SIZE: u32 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum RasterError {
    #[error("image has no pixels")]
    InvalidImage,
    #[error("pixel buffer holds {got} values, expected {expected}")]
    PixelCountMismatch { expected: usize, got: usize },
    #[error("intensity {value} outside [0, 1] at index {index}")]
    IntensityOutOfRange { index: usize, value: f64 },
}

/// Grayscale image of arbitrary dimensions; intensities are reals with no
/// range constraint until normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: u32,
    height: u32,
    pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: u32, height: u32, pixels: Vec<f64>) -> Result<Self, RasterError> {
        let expected = width as usize * height as usize;
        if expected == 0 {
            return Err(RasterError::InvalidImage);
        }
        if pixels.len() != expected {
            return Err(RasterError::PixelCountMismatch {
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    fn at(&self, x: u32, y: u32) -> f64 {
        self.pixels[y as usize * self.width as usize + x as usize]
    }
}

/// Square raster with intensities in `[0, 1]`, row-major; the unit of
/// capture for everything downstream.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceRaster {
    size: u32,
    pixels: Vec<f64>,
}

impl FaceRaster {
    /// Builds a raster from already-normalized pixels, enforcing the square
    /// shape and intensity range.
    pub fn from_pixels(size: u32, pixels: Vec<f64>) -> Result<Self, RasterError> {
        let expected = size as usize * size as usize;
        if expected == 0 {
            return Err(RasterError::InvalidImage);
        }
        if pixels.len() != expected {
            return Err(RasterError::PixelCountMismatch {
                expected,
                got: pixels.len(),
            });
        }
        for (index, &value) in pixels.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(RasterError::IntensityOutOfRange { index, value });
            }
        }
        Ok(Self { size, pixels })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn mean_intensity(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }
}

/// Resamples `raw` to `size x size` with bilinear interpolation, then
/// rescales intensities so the minimum maps to 0 and the maximum to 1. A
/// constant image maps to all zeros.
pub fn normalize_raster(raw: &GrayImage, size: u32) -> Result<FaceRaster, RasterError> {
    if raw.pixels.is_empty() || size == 0 {
        return Err(RasterError::InvalidImage);
    }

    let n = size as usize;
    let mut resampled = Vec::with_capacity(n * n);
    let sx = raw.width as f64 / size as f64;
    let sy = raw.height as f64 / size as f64;
    for ty in 0..size {
        // Pixel centers align: target center (t + 0.5) maps onto the source
        // grid, clamped at the borders.
        let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (raw.height - 1) as f64);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(raw.height - 1);
        let wy = fy - y0 as f64;
        for tx in 0..size {
            let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (raw.width - 1) as f64);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(raw.width - 1);
            let wx = fx - x0 as f64;
            let top = raw.at(x0, y0) * (1.0 - wx) + raw.at(x1, y0) * wx;
            let bottom = raw.at(x0, y1) * (1.0 - wx) + raw.at(x1, y1) * wx;
            resampled.push(top * (1.0 - wy) + bottom * wy);
        }
    }

    let min = resampled.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = resampled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let pixels = if range > 0.0 {
        resampled.iter().map(|v| (v - min) / range).collect()
    } else {
        vec![0.0; resampled.len()]
    };
    Ok(FaceRaster { size, pixels })
}
