//! Prediction head, box coding and the Hann window penalty.

use super::geometry::BBox;
use super::PipelineError;
use crate::numerics::kernels::linear;
use crate::numerics::{Scalar, Tensor, TensorError};

/// One linear layer per branch: classification `C → 1`, regression `C → 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T = f64> {
    pub cls_w: Tensor<T>,
    pub cls_b: Tensor<T>,
    pub reg_w: Tensor<T>,
    pub reg_b: Tensor<T>,
}

impl<T: Scalar> HeadWeights<T> {
    pub fn zeros(channels: usize) -> Result<Self, TensorError> {
        Ok(Self {
            cls_w: Tensor::zeros(&[channels, 1])?,
            cls_b: Tensor::zeros(&[1])?,
            reg_w: Tensor::zeros(&[channels, 4])?,
            reg_b: Tensor::zeros(&[4])?,
        })
    }

    pub fn cast<U: Scalar>(&self) -> HeadWeights<U> {
        HeadWeights {
            cls_w: self.cls_w.cast(),
            cls_b: self.cls_b.cast(),
            reg_w: self.reg_w.cast(),
            reg_b: self.reg_b.cast(),
        }
    }
}

/// Per-location confidence and side distances over the search grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// `H × W`, values in `(0, 1)`.
    pub scores: Tensor<f64>,
    /// `H × W × 4` distances `(l, t, r, b)` in search-patch pixels.
    pub offsets: Tensor<f64>,
}

impl Prediction {
    pub fn ltrb(&self, gy: usize, gx: usize) -> [f64; 4] {
        let w = self.scores.cols();
        let base = (gy * w + gx) * 4;
        let d = &self.offsets.data()[base..base + 4];
        [d[0], d[1], d[2], d[3]]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn predict<T: Scalar>(
    x_dec: &Tensor<T>,
    head: &HeadWeights<T>,
    height: usize,
    width: usize,
) -> Result<Prediction, PipelineError> {
    if x_dec.rank() != 2 || x_dec.rows() != height * width {
        return Err(TensorError::ShapeMismatch {
            op: "predict",
            lhs: x_dec.shape().to_vec(),
            rhs: vec![height * width, head.cls_w.rows()],
        }
        .into());
    }
    let logits = linear(x_dec, &head.cls_w, Some(&head.cls_b))?;
    let reg = linear(x_dec, &head.reg_w, Some(&head.reg_b))?;
    let scores = Tensor::new(
        &[height, width],
        logits.data().iter().map(|&v| sigmoid(Scalar::to_f64(v))).collect(),
    )?;
    let offsets = Tensor::new(
        &[height, width, 4],
        reg.data().iter().map(|&v| Scalar::to_f64(v).max(0.0)).collect(),
    )?;
    Ok(Prediction { scores, offsets })
}

/// Pixel coordinate of grid cell `g` when cells are `stride` pixels wide.
pub fn cell_center(g: usize, stride: f64) -> f64 {
    (g as f64 + 0.5) * stride
}

/// Box from side distances measured at cell `(gx, gy)`. Degenerate
/// (zero-extent) boxes are reported as errors.
pub fn decode_box(gx: usize, gy: usize, ltrb: [f64; 4], stride: f64) -> Result<BBox, PipelineError> {
    let (px, py) = (cell_center(gx, stride), cell_center(gy, stride));
    BBox::from_corners(px - ltrb[0], py - ltrb[1], px + ltrb[2], py + ltrb[3])
}

pub fn encode_box(b: &BBox, gx: usize, gy: usize, stride: f64) -> [f64; 4] {
    let (px, py) = (cell_center(gx, stride), cell_center(gy, stride));
    [px - b.left(), py - b.top(), b.right() - px, b.bottom() - py]
}

fn hann_1d(n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (k + 1) as f64 / (n + 1) as f64).cos())
        .collect();
    let max = w.iter().cloned().fold(f64::MIN, f64::max);
    w.into_iter().map(|v| v / max).collect()
}

/// Outer product of 1-D Hann windows, scaled so its maximum is 1.
pub fn hann_window(height: usize, width: usize) -> Result<Tensor<f64>, TensorError> {
    let (wy, wx) = (hann_1d(height), hann_1d(width));
    Tensor::from_fn(&[height, width], |i| wy[i / width] * wx[i % width])
}

/// `(1 − λ)·s + λ·hann`.
pub fn window_penalty(scores: &Tensor<f64>, lambda: f64) -> Result<Tensor<f64>, PipelineError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(PipelineError::Config(format!("window weight {lambda} outside [0, 1]")));
    }
    let hann = hann_window(scores.rows(), scores.cols())?;
    Ok(scores.zip_with(&hann, "window_penalty", |s, h| (1.0 - lambda) * s + lambda * h)?)
}

/// Row-major argmax `(gy, gx, value)`; the first maximum wins ties.
pub fn argmax(map: &Tensor<f64>) -> (usize, usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in map.data().iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    (best.0 / map.cols(), best.0 % map.cols(), best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::random_tensor;

    #[test]
    fn zero_head_is_half_and_zero() {
        let head = HeadWeights::<f64>::zeros(8).unwrap();
        let p = predict(&random_tensor(&[12, 8], 1), &head, 3, 4).unwrap();
        assert!(p.scores.data().iter().all(|&s| s == 0.5));
        assert!(p.offsets.data().iter().all(|&o| o == 0.0));
        assert!(decode_box(1, 1, p.ltrb(1, 1), 8.0).is_err());
    }

    #[test]
    fn dominant_location_wins_argmax() {
        let mut head = HeadWeights::<f64>::zeros(4).unwrap();
        head.cls_w.data_mut()[2] = 5.0;
        let mut x = Tensor::<f64>::zeros(&[9, 4]).unwrap();
        x.row_mut(7)[2] = 1.0;
        let p = predict(&x, &head, 3, 3).unwrap();
        assert_eq!(argmax(&p.scores), (2, 1, p.scores.at(2, 1)));
    }

    #[test]
    fn box_coding_round_trip() {
        let b = BBox::new(37.25, 51.5, 20.0, 12.5).unwrap();
        let (gx, gy) = (4, 6);
        let back = decode_box(gx, gy, encode_box(&b, gx, gy, 8.0), 8.0).unwrap();
        for (a, c) in back.to_array().iter().zip(b.to_array()) {
            assert!((a - c).abs() <= 1e-6);
        }
    }

    #[test]
    fn window_penalty_cases() {
        let s = random_tensor(&[5, 5], 3).map(|v| 0.5 + 0.4 * v);
        assert_eq!(window_penalty(&s, 0.0).unwrap(), s);
        assert_eq!(window_penalty(&s, 1.0).unwrap(), hann_window(5, 5).unwrap());
        let uniform = Tensor::full(&[7, 7], 0.3).unwrap();
        let (gy, gx, _) = argmax(&window_penalty(&uniform, 0.5).unwrap());
        assert_eq!((gy, gx), (3, 3));
        assert!(window_penalty(&s, 1.5).is_err());
        let h = hann_window(4, 6).unwrap();
        assert!((h.max_abs() - 1.0).abs() < 1e-12);
    }
}
