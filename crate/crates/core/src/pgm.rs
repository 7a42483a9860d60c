//! Binary PGM (P5) reading and writing — the sole image interchange format.
//!
//! Readers accept `#` comments in the header and any maxval up to 255;
//! writers always emit maxval 255 with a canonical single-newline header so
//! files byte-compare across nodes.

use crate::raster::{FaceRaster, GrayImage, RasterError};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PgmError {
    #[error("not a binary PGM: missing P5 magic")]
    NotP5,
    #[error("malformed PGM header")]
    BadHeader,
    #[error("unsupported maxval {0} (expected 1..=255)")]
    BadMaxval(u32),
    #[error("raster data truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("{0} trailing bytes after raster data")]
    TrailingData(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// Parses a binary PGM into a gray image with intensities in `[0, 1]`.
pub fn parse(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(PgmError::NotP5);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for field in fields.iter_mut() {
        *field = next_header_token(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if !(1..=255).contains(&maxval) {
        return Err(PgmError::BadMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the raster.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PgmError::BadHeader),
    }

    let expected = width as usize * height as usize;
    if expected == 0 {
        return Err(PgmError::Raster(RasterError::InvalidImage));
    }
    let raster = &bytes[pos..];
    if raster.len() < expected {
        return Err(PgmError::Truncated {
            expected,
            got: raster.len(),
        });
    }
    if raster.len() > expected {
        return Err(PgmError::TrailingData(raster.len() - expected));
    }
    let scale = maxval as f64;
    let pixels = raster.iter().map(|&b| b as f64 / scale).collect();
    Ok(GrayImage::new(width, height, pixels)?)
}

fn next_header_token(bytes: &[u8], pos: &mut usize) -> Result<u32, PgmError> {
    // Skip whitespace and '#' comments running to end of line.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            _ => break,
        }
    }
    let start = *pos;
    while matches!(bytes.get(*pos), Some(b) if b.is_ascii_digit()) {
        *pos += 1;
    }
    if *pos == start {
        return Err(PgmError::BadHeader);
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or(PgmError::BadHeader)
}

/// Encodes a normalized raster as a canonical maxval-255 binary PGM.
pub fn raster_to_pgm(raster: &FaceRaster) -> Vec<u8> {
    encode(raster.size(), raster.size(), raster.pixels())
}

/// Encodes an arbitrary gray image, clamping intensities into `[0, 1]`.
pub fn gray_to_pgm(image: &GrayImage) -> Vec<u8> {
    encode(image.width(), image.height(), image.pixels())
}

fn encode(width: u32, height: u32, pixels: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_image() {
        let img = GrayImage::new(3, 2, vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let bytes = gray_to_pgm(&img);
        let back = parse(&bytes).unwrap();
        assert_eq!(back.width(), 3);
        assert_eq!(back.height(), 2);
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0);
        }
    }

    #[test]
    fn golden_header_layout() {
        let raster = FaceRaster::from_pixels(2, vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let bytes = raster_to_pgm(&raster);
        assert_eq!(&bytes[..9], b"P5\n2 2\n25");
        assert_eq!(bytes, b"P5\n2 2\n255\n\x00\xff\x80\x40".to_vec());
    }

    #[test]
    fn comments_and_split_whitespace_are_accepted() {
        let mut bytes = b"P5 # camera-a\n# frame 7\n 4\n2 #x\n255\n".to_vec();
        bytes.extend([0u8; 8]);
        let img = parse(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (4, 2));
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(parse(b"P6\n1 1\n255\n\x00"), Err(PgmError::NotP5));
        assert_eq!(
            parse(b"P5\n2 2\n255\n\x00\x00"),
            Err(PgmError::Truncated {
                expected: 4,
                got: 2
            })
        );
        assert_eq!(
            parse(b"P5\n1 1\n255\n\x00\x00"),
            Err(PgmError::TrailingData(1))
        );
        assert_eq!(parse(b"P5\n1 1\n999\n\x00"), Err(PgmError::BadMaxval(999)));
        assert_eq!(parse(b"P5\nx 1\n255\n\x00"), Err(PgmError::BadHeader));
    }
}
