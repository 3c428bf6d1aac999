//! Feature extraction interface and the deterministic reference extractor.

use super::PipelineError;
use crate::image::GrayImage;
use crate::numerics::init::{scaled_uniform, seeded_rng};
use crate::numerics::{FeatureMap, LayerNormParams, Scalar, Tensor};

/// Image patch → `grid × grid × C` feature map. Implementations must be
/// deterministic.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn id(&self) -> &str;
    fn channels(&self) -> usize;
    fn extract(&self, patch: &GrayImage, grid: usize) -> Result<FeatureMap<T>, PipelineError>;
}

/// Contrast normalisation never divides by less than this pixel std.
pub const PIXEL_STD_FLOOR: f64 = 1.0;

/// Window-pooling extractor.
///
/// The patch is resized to `grid · cell` pixels square with
/// `cell = round(side / grid)`, normalised to zero mean and unit standard
/// deviation, and cut into `grid × grid` cells. Each cell is described by the
/// `window`-pixel square centred on it (the cell itself when `window` is 0),
/// reduced to
/// `sub_blocks × sub_blocks` block means (pixels outside the patch read as
/// the mean), mapped to `C` channels by `projection` plus `bias`, and
/// layer-normalised per cell. Block pooling followed by `projection` is itself
/// a fixed linear map of the window.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceExtractor {
    pub sub_blocks: usize,
    /// Window side in resized-patch pixels; 0 uses the cell.
    pub window: usize,
    /// `sub_blocks² × C`.
    pub projection: Tensor<f64>,
    pub bias: Tensor<f64>,
    pub norm: LayerNormParams<f64>,
}

pub const REFERENCE_EXTRACTOR_ID: &str = "reference";

impl ReferenceExtractor {
    /// Scaled-uniform projection, zero bias, identity norm, cell windows.
    pub fn seeded(channels: usize, sub_blocks: usize, seed: u64) -> Result<Self, PipelineError> {
        let mut rng = seeded_rng(seed);
        Ok(Self {
            sub_blocks,
            window: 0,
            projection: scaled_uniform(&[sub_blocks * sub_blocks, channels], &mut rng)?,
            bias: Tensor::zeros(&[channels])?,
            norm: LayerNormParams::identity(channels)?,
        })
    }

    pub fn cell_size(side: usize, grid: usize) -> usize {
        ((side as f64 / grid as f64).round() as usize).max(1)
    }

    /// Per-cell block means of the normalised, resized patch; `grid² × sub²`.
    pub fn cell_descriptors(&self, patch: &GrayImage, grid: usize) -> Result<Tensor<f64>, PipelineError> {
        let cell = Self::cell_size(patch.width().max(patch.height()), grid);
        let sub = self.sub_blocks;
        let span = if self.window == 0 { cell } else { self.window };
        if span < sub {
            return Err(PipelineError::Config(format!(
                "{span}-pixel windows cannot hold {sub}×{sub} blocks"
            )));
        }
        let side = cell * grid;
        let img = patch.resize(side, side)?;
        let mean = img.mean();
        let var = img.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64;
        let inv = 1.0 / var.sqrt().max(PIXEL_STD_FLOOR);
        // Summed-area table of the centred image, one row and column of padding.
        let w = side + 1;
        let mut sat = vec![0.0; w * w];
        for y in 0..side {
            let mut row = 0.0;
            for x in 0..side {
                row += img.get(x, y) - mean;
                sat[(y + 1) * w + x + 1] = sat[y * w + x + 1] + row;
            }
        }
        let clamp = |v: isize| v.clamp(0, side as isize) as usize;
        let rect = |x0: isize, y0: isize, x1: isize, y1: isize| {
            let (x0, y0, x1, y1) = (clamp(x0), clamp(y0), clamp(x1), clamp(y1));
            sat[y1 * w + x1] - sat[y0 * w + x1] - sat[y1 * w + x0] + sat[y0 * w + x0]
        };
        let bounds: Vec<isize> = (0..=sub).map(|k| (k * span / sub) as isize).collect();
        let reach = (span as isize - cell as isize) / 2;
        let mut out = Vec::with_capacity(grid * grid * sub * sub);
        for gy in 0..grid {
            for gx in 0..grid {
                let (ox, oy) = ((gx * cell) as isize - reach, (gy * cell) as isize - reach);
                for by in 0..sub {
                    for bx in 0..sub {
                        let (y0, y1) = (oy + bounds[by], oy + bounds[by + 1]);
                        let (x0, x1) = (ox + bounds[bx], ox + bounds[bx + 1]);
                        let area = ((y1 - y0) * (x1 - x0)) as f64;
                        out.push(rect(x0, y0, x1, y1) * inv / area);
                    }
                }
            }
        }
        Ok(Tensor::new(&[grid * grid, sub * sub], out)?)
    }
}

impl<T: Scalar> FeatureExtractor<T> for ReferenceExtractor {
    fn id(&self) -> &str {
        REFERENCE_EXTRACTOR_ID
    }

    fn channels(&self) -> usize {
        self.projection.cols()
    }

    fn extract(&self, patch: &GrayImage, grid: usize) -> Result<FeatureMap<T>, PipelineError> {
        let cells = self.cell_descriptors(patch, grid)?;
        let projected = crate::numerics::linear(&cells, &self.projection, Some(&self.bias))?;
        let tokens = self.norm.apply(&projected)?;
        Ok(FeatureMap::from_tokens(tokens.cast::<T>(), grid, grid)?)
    }
}
