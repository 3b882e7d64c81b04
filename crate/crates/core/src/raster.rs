//! Grayscale raster images: float `[0,1]` in memory, 8-bit binary PGM on
//! disk, plus bilinear resampling shared by heat-map resizing and cropping.

use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a binary PGM (P5) file")]
    BadFormat,
    #[error("unsupported PGM maxval {0} (only 255)")]
    BadMaxVal(u32),
    #[error("pixel payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("empty image dimensions {width}x{height}")]
    EmptyImage { width: usize, height: usize },
}

/// Row-major grayscale image with values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Result<Self, RasterError> {
        if width == 0 || height == 0 {
            return Err(RasterError::EmptyImage { width, height });
        }
        Ok(Self {
            width,
            height,
            data: vec![0.0; width * height],
        })
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self, RasterError> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(RasterError::EmptyImage { width, height });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    /// Quantizes to the on-disk 8-bit representation.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self, RasterError> {
        if bytes.len() != width * height {
            return Err(RasterError::Truncated {
                expected: width * height,
                got: bytes.len(),
            });
        }
        Self::from_data(
            width,
            height,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Bilinear resample to `(new_width, new_height)` with pixel-center
    /// alignment. Constant images stay constant; outputs never leave the
    /// source value range.
    pub fn resize(&self, new_width: usize, new_height: usize) -> Result<Self, RasterError> {
        if new_width == 0 || new_height == 0 {
            return Err(RasterError::EmptyImage {
                width: new_width,
                height: new_height,
            });
        }
        let mut out = GrayImage::new(new_width, new_height)?;
        let sx = self.width as f32 / new_width as f32;
        let sy = self.height as f32 / new_height as f32;
        for y in 0..new_height {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let dy = fy - y0 as f32;
            for x in 0..new_width {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let dx = fx - x0 as f32;
                let top = self.get(x0, y0) * (1.0 - dx) + self.get(x1, y0) * dx;
                let bot = self.get(x0, y1) * (1.0 - dx) + self.get(x1, y1) * dx;
                out.set(x, y, top * (1.0 - dy) + bot * dy);
            }
        }
        Ok(out)
    }

    /// Writes binary PGM (P5, maxval 255). The 8-bit payload round-trips
    /// losslessly.
    pub fn write_pgm(&self, path: &Path) -> Result<(), RasterError> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.to_u8())?;
        Ok(())
    }

    pub fn read_pgm(path: &Path) -> Result<Self, RasterError> {
        let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 2];
        reader.read_exact(&mut magic)?;
        if &magic != b"P5" {
            return Err(RasterError::BadFormat);
        }
        let mut fields = Vec::new();
        while fields.len() < 3 {
            let tok = read_pnm_token(&mut reader)?;
            fields.push(
                tok.parse::<u32>()
                    .map_err(|_| RasterError::BadFormat)?,
            );
        }
        let (width, height, maxval) = (fields[0] as usize, fields[1] as usize, fields[2]);
        if maxval != 255 {
            return Err(RasterError::BadMaxVal(maxval));
        }
        let mut bytes = vec![0u8; width * height];
        reader.read_exact(&mut bytes).map_err(|_| RasterError::Truncated {
            expected: width * height,
            got: 0,
        })?;
        Self::from_u8(width, height, &bytes)
    }
}

/// Reads one whitespace-delimited PNM header token, skipping `#` comments.
fn read_pnm_token<R: BufRead>(reader: &mut R) -> Result<String, RasterError> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte)?;
        let c = byte[0] as char;
        if c == '#' {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> GrayImage {
        GrayImage::from_data(
            w,
            h,
            (0..w * h).map(|i| i as f32 / (w * h) as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pgm_round_trip_is_lossless_at_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let img = ramp(13, 7);
        img.write_pgm(&path).unwrap();
        let back = GrayImage::read_pgm(&path).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
        // and writing again produces identical bytes
        let path2 = dir.path().join("img2.pgm");
        back.write_pgm(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = GrayImage::from_data(5, 4, vec![0.37; 20]).unwrap();
        let out = img.resize(11, 3).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_never_exceeds_source_range() {
        let img = ramp(8, 8);
        let (lo, hi) = (0.0f32, img.data().iter().cloned().fold(0.0, f32::max));
        for (w, h) in [(17, 3), (2, 2), (31, 31)] {
            let out = img.resize(w, h).unwrap();
            for &v in out.data() {
                assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
            }
        }
    }

    #[test]
    fn upscale_of_step_rows_is_monotone() {
        // [[0,1],[0,1]] widened to 2x4: each row non-decreasing.
        let img = GrayImage::from_data(2, 2, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = img.resize(4, 2).unwrap();
        for y in 0..2 {
            for x in 1..4 {
                assert!(out.get(x, y) >= out.get(x - 1, y));
            }
        }
    }

    #[test]
    fn zero_dims_are_rejected() {
        assert!(GrayImage::new(0, 5).is_err());
        assert!(ramp(4, 4).resize(0, 2).is_err());
    }
}
