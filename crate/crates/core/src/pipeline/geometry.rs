//! Boxes and Siamese-style square cropping.

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::image::GrayImage;

/// Axis-aligned box given by centre and extent, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, PipelineError> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, PipelineError> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let finite = [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(PipelineError::InvalidBox(*self));
        }
        Ok(())
    }

    pub fn left(&self) -> f64 {
        self.cx - self.w / 2.0
    }

    pub fn top(&self) -> f64 {
        self.cy - self.h / 2.0
    }

    pub fn right(&self) -> f64 {
        self.cx + self.w / 2.0
    }

    pub fn bottom(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// `[cx, cy, w, h]`.
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self, PipelineError> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        self.left() >= 0.0
            && self.top() >= 0.0
            && self.right() <= width as f64
            && self.bottom() <= height as f64
    }
}

/// Side of the square context crop: `√((w + p)(h + p))` with `p = context · (w + h)`.
pub fn context_side(b: &BBox, context_amount: f64) -> f64 {
    let p = context_amount * (b.w + b.h);
    ((b.w + p) * (b.h + p)).sqrt()
}

/// Square crop of side `side` centred at `(cx, cy)`, bilinearly resampled to
/// `out_size × out_size`. Samples outside the frame read `fill`.
pub fn crop_square(
    frame: &GrayImage,
    cx: f64,
    cy: f64,
    side: f64,
    out_size: usize,
    fill: f64,
) -> Result<GrayImage, PipelineError> {
    if out_size < 2 || !(side.is_finite() && side > 0.0) {
        return Err(PipelineError::Config(format!(
            "crop of side {side} to {out_size} pixels is degenerate"
        )));
    }
    let step = side / out_size as f64;
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    Ok(GrayImage::from_fn(out_size, out_size, |x, y| {
        let u = x0 + (x as f64 + 0.5) * step - 0.5;
        let v = y0 + (y as f64 + 0.5) * step - 0.5;
        frame.sample(u, v, fill)
    })?)
}

/// Template-style crop around `b`, padded with the frame mean.
pub fn crop_patch(
    frame: &GrayImage,
    b: &BBox,
    context_amount: f64,
    out_size: usize,
) -> Result<GrayImage, PipelineError> {
    b.validate()?;
    crop_square(frame, b.cx, b.cy, context_side(b, context_amount), out_size, frame.mean())
}

/// Search crop: the template context side scaled by `search_patch / template_patch`.
/// Returns the patch and its side length in frame pixels.
pub fn crop_search(
    frame: &GrayImage,
    b: &BBox,
    context_amount: f64,
    template_patch: usize,
    search_patch: usize,
) -> Result<(GrayImage, f64), PipelineError> {
    b.validate()?;
    let side = context_side(b, context_amount) * search_patch as f64 / template_patch as f64;
    let patch = crop_square(frame, b.cx, b.cy, side, search_patch, frame.mean())?;
    Ok((patch, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_frame_gives_uniform_patch() {
        let frame = GrayImage::filled(200, 200, 77.0).unwrap();
        let b = BBox::new(100.0, 100.0, 20.0, 30.0).unwrap();
        let p = crop_patch(&frame, &b, 0.5, 31).unwrap();
        assert!(p.data().iter().all(|&v| (v - 77.0).abs() < 1e-12));
    }

    #[test]
    fn unscaled_interior_crop_copies_pixels() {
        let frame = GrayImage::from_fn(100, 100, |x, y| (x * 3 + y * 7) as f64).unwrap();
        // w = h = 10, context 0.5 → side 20.
        let b = BBox::new(50.0, 40.0, 10.0, 10.0).unwrap();
        assert_eq!(context_side(&b, 0.5), 20.0);
        let p = crop_patch(&frame, &b, 0.5, 20).unwrap();
        for y in 0..20 {
            for x in 0..20 {
                assert_eq!(p.get(x, y), frame.get(40 + x, 30 + y));
            }
        }
    }

    #[test]
    fn corner_crop_pads_with_frame_mean() {
        let frame = GrayImage::from_fn(30, 20, |x, y| ((x * 13 + y * 29) % 251) as f64).unwrap();
        let mean = frame.mean();
        let b = BBox::new(0.0, 0.0, 8.0, 8.0).unwrap();
        let p = crop_patch(&frame, &b, 0.5, 16).unwrap();
        // Side 16 → crop origin (−8, −8), one frame pixel per output pixel.
        for y in 0..16 {
            for x in 0..16 {
                let (fx, fy) = (x as i64 - 8, y as i64 - 8);
                let want = if fx < 0 || fy < 0 { mean } else { frame.get(fx as usize, fy as usize) };
                assert!((p.get(x, y) - want).abs() < 1e-12, "({x},{y})");
            }
        }
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        let frame = GrayImage::filled(4, 4, 0.0).unwrap();
        let bad = BBox { cx: 1.0, cy: 1.0, w: -1.0, h: 1.0 };
        assert!(crop_patch(&frame, &bad, 0.5, 8).is_err());
    }
}
