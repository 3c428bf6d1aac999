//! Grayscale raster images with real-valued pixels.

use crate::numerics::{FormatError, Scalar, Tensor, TensorError};

/// Row-major grayscale image; `data[y * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if width == 0 || height == 0 {
            return Err(TensorError::InvalidShape {
                shape: vec![height, width],
                reason: "image extents must be positive",
            });
        }
        if data.len() != width * height {
            return Err(TensorError::ShapeMismatch {
                op: "gray_image",
                lhs: vec![height, width],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, TensorError> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    /// Luma (BT.601) of interleaved RGB pixels.
    pub fn from_rgb(width: usize, height: usize, rgb: &[f64]) -> Result<Self, TensorError> {
        if rgb.len() != 3 * width * height {
            return Err(TensorError::ShapeMismatch {
                op: "gray_image.from_rgb",
                lhs: vec![height, width, 3],
                rhs: vec![rgb.len()],
            });
        }
        let data = rgb
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Bilinear sample at real pixel coordinates (pixel centres on integers).
    /// Taps falling outside the image read `fill`.
    pub fn sample(&self, x: f64, y: f64, fill: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let tap = |xi: f64, yi: f64| {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                fill
            } else {
                self.get(xi as usize, yi as usize)
            }
        };
        let top = tap(x0, y0) * (1.0 - fx) + tap(x0 + 1.0, y0) * fx;
        let bottom = tap(x0, y0 + 1.0) * (1.0 - fx) + tap(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Bilinear resize with half-pixel alignment and edge clamping.
    pub fn resize(&self, width: usize, height: usize) -> Result<Self, TensorError> {
        if width == self.width && height == self.height {
            return Ok(self.clone());
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        Self::from_fn(width, height, |x, y| {
            let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            self.sample(u, v, 0.0)
        })
    }

    /// `H × W` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            &[self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
        .expect("image extents are positive")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self, TensorError> {
        if t.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "gray_image.from_tensor",
                expected: 2,
                shape: t.shape().to_vec(),
            });
        }
        Self::new(t.cols(), t.rows(), t.data().iter().map(|&v| Scalar::to_f64(v)).collect())
    }

    /// Binary 8-bit PGM (`P5`), values rounded and clamped to `0..=255`.
    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
        out
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self, FormatError> {
        let bad = |msg: &str| FormatError::Invalid(format!("pgm: {msg}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("only binary P5 is supported"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("only 8-bit maxval is supported"));
        }
        let payload = &bytes[(pos + 1).min(bytes.len())..];
        if payload.len() != w * h {
            return Err(FormatError::Truncated {
                expected: w * h,
                found: payload.len(),
            });
        }
        let scale = 255.0 / maxval as f64;
        Ok(Self::new(w, h, payload.iter().map(|&b| b as f64 * scale).collect())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let img = GrayImage::from_fn(5, 4, |x, y| (x * 10 + y) as f64).unwrap();
        assert_eq!(img.resize(5, 4).unwrap(), img);
        let flat = GrayImage::filled(7, 3, 42.0).unwrap();
        assert!(flat.resize(11, 13).unwrap().data().iter().all(|&v| (v - 42.0).abs() < 1e-12));
    }

    #[test]
    fn resize_preserves_linear_ramps_in_the_interior() {
        let img = GrayImage::from_fn(8, 8, |x, _| x as f64).unwrap();
        let up = img.resize(16, 16).unwrap();
        // Output pixel 5 maps to source 5.5 · 0.5 − 0.5 = 2.25.
        assert!((up.get(5, 3) - 2.25).abs() < 1e-12);
    }

    #[test]
    fn sample_uses_fill_outside() {
        let img = GrayImage::filled(3, 3, 1.0).unwrap();
        assert_eq!(img.sample(-5.0, 1.0, 9.0), 9.0);
        assert!((img.sample(-0.5, 1.0, 9.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trip() {
        let img = GrayImage::from_fn(4, 3, |x, y| (x * 60 + y * 5) as f64).unwrap();
        let back = GrayImage::decode_pgm(&img.encode_pgm()).unwrap();
        assert_eq!(back, img);
        assert!(GrayImage::decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(GrayImage::decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn luma_weights() {
        let g = GrayImage::from_rgb(1, 1, &[100.0, 100.0, 100.0]).unwrap();
        assert!((g.get(0, 0) - 100.0).abs() < 1e-12);
    }
}
