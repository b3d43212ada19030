//! RGB float images and binary portable pixmap (P6) I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene_graph::PixelRect;

/// Row-major RGB image with channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![rgb; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
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

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> [f64; 3] {
        self.data[j * self.width + i]
    }

    pub fn set(&mut self, i: usize, j: usize, rgb: [f64; 3]) {
        self.data[j * self.width + i] = rgb;
    }

    pub fn same_size(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn full_rect(&self) -> PixelRect {
        PixelRect {
            x0: 0,
            y0: 0,
            x1: self.width,
            y1: self.height,
        }
    }

    /// Mean of `(r + g + b) / 3` over pixels where `mask` is true.
    pub fn mean_luminance_where(&self, mask: impl Fn(usize, usize) -> bool) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for j in 0..self.height {
            for i in 0..self.width {
                if mask(i, j) {
                    let p = self.get(i, j);
                    sum += (p[0] + p[1] + p[2]) / 3.0;
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    pub fn crop(&self, rect: &PixelRect) -> ImageBuffer {
        let data = rect.pixels().map(|(i, j)| self.get(i, j)).collect();
        ImageBuffer {
            width: rect.x1 - rect.x0,
            height: rect.y1 - rect.y0,
            data,
        }
    }

    /// 8-bit quantization, rounding half up and clamping to `[0, 255]`.
    pub fn quantize(v: f64) -> u8 {
        (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len() * 3);
        for p in &self.data {
            out.extend(p.iter().map(|&v| Self::quantize(v)));
        }
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let (width, height, maxval, offset) = parse_ppm_header(bytes)?;
        let body = &bytes[offset..];
        if body.len() < width * height * 3 {
            return Err(Error::validation("pixmap", "truncated pixel data"));
        }
        let scale = maxval as f64;
        let data = body[..width * height * 3]
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / scale, c[1] as f64 / scale, c[2] as f64 / scale])
            .collect();
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_ppm(&bytes).map_err(|e| Error::validation(path.display().to_string(), e.to_string()))
    }
}

/// Width and height from a P6 header, without reading pixel data.
pub fn ppm_dimensions(path: &Path) -> Result<(usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, _, _) = parse_ppm_header(&bytes)
        .map_err(|e| Error::validation(path.display().to_string(), e.to_string()))?;
    Ok((w, h))
}

fn parse_ppm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::validation("pixmap", "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::validation("pixmap", format!("unsupported magic {}", fields[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::validation("pixmap", format!("bad header field {s}")))
    };
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::validation("pixmap", "only 8-bit pixmaps are supported"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((w, h, maxval, pos + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(ImageBuffer::quantize(0.0), 0);
        assert_eq!(ImageBuffer::quantize(1.0), 255);
        assert_eq!(ImageBuffer::quantize(0.5), 128);
        assert_eq!(ImageBuffer::quantize(-0.2), 0);
        assert_eq!(ImageBuffer::quantize(1.7), 255);
        assert_eq!(ImageBuffer::quantize(2.5 / 255.0), 3);
    }

    #[test]
    fn ppm_round_trip_of_quantized_values() {
        let mut img = ImageBuffer::new(3, 2);
        img.set(0, 0, [1.0, 0.0, 0.5]);
        img.set(2, 1, [0.2, 0.4, 0.6]);
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        let back = ImageBuffer::from_ppm(&bytes).unwrap();
        assert_eq!(back.width(), 3);
        assert_eq!(back.to_ppm(), bytes);
        assert!((back.get(2, 1)[1] - 102.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P6 # comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let img = ImageBuffer::from_ppm(&bytes).unwrap();
        assert_eq!(img.get(1, 0), [0.0, 1.0, 0.0]);
        assert!(ImageBuffer::from_ppm(b"P3\n1 1\n255\n").is_err());
        assert!(ImageBuffer::from_ppm(b"P6\n2 2\n255\n\x00").is_err());
    }
}
