//! Two-dimensional sine/cosine positional encoding.
//!
//! For a grid of `H × W` positions and `C` channels (`C % 4 == 0`), let
//! `D = C / 2` and `ω_i = 10000^(−2i / D)` for `i in 0..D/2`. The entry for
//! grid row `r`, column `x` is
//!
//! ```text
//! ch 2i         = sin(r · ω_i)      ch D + 2i     = sin(x · ω_i)
//! ch 2i + 1     = cos(r · ω_i)      ch D + 2i + 1 = cos(x · ω_i)
//! ```
//!
//! i.e. the first half of the channels encodes the row coordinate, the second
//! half the column coordinate, with sine/cosine interleaved. Coordinates are
//! raw (unnormalised) integer grid indices, so position `(0, 0)` has every
//! sine channel at 0 and every cosine channel at 1. Token order in the table
//! is row-major: token `r · W + x`.

use super::{Scalar, Tensor, TensorError};

pub const PE_TEMPERATURE: f64 = 10000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding<T = f64> {
    height: usize,
    width: usize,
    table: Tensor<T>,
}

impl<T: Scalar> PositionalEncoding<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.table.cols()
    }

    /// `(H·W) × C` table.
    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn matches(&self, height: usize, width: usize, channels: usize) -> bool {
        self.height == height && self.width == width && self.channels() == channels
    }
}

/// Angular frequency of sine/cosine pair `pair` when each axis gets `axis_channels`.
pub fn pe_frequency(pair: usize, axis_channels: usize) -> f64 {
    PE_TEMPERATURE.powf(-2.0 * pair as f64 / axis_channels as f64)
}

/// Value of a single table entry, computed directly in f64.
pub fn pe_entry(row: usize, col: usize, channel: usize, channels: usize) -> f64 {
    let d = channels / 2;
    let (coord, local) = if channel < d {
        (row as f64, channel)
    } else {
        (col as f64, channel - d)
    };
    let angle = coord * pe_frequency(local / 2, d);
    if local % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub fn sinusoidal_pe<T: Scalar>(
    height: usize,
    width: usize,
    channels: usize,
) -> Result<PositionalEncoding<T>, TensorError> {
    if channels == 0 || channels % 4 != 0 {
        return Err(TensorError::Contract(format!(
            "positional encoding needs a channel count divisible by 4, got {channels}"
        )));
    }
    let table = Tensor::from_fn(&[height * width, channels], |i| {
        let (tok, ch) = (i / channels, i % channels);
        T::from_f64(pe_entry(tok / width, tok % width, ch, channels))
    })?;
    Ok(PositionalEncoding {
        height,
        width,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_is_sin_zero_cos_one() {
        let pe = sinusoidal_pe::<f64>(6, 6, 256).unwrap();
        for (ch, &v) in pe.table().row(0).iter().enumerate() {
            let expected = if ch % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(v, expected, "channel {ch}");
        }
    }

    #[test]
    fn range_is_unit_interval() {
        let pe = sinusoidal_pe::<f64>(6, 6, 256).unwrap();
        assert!(pe.table().data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn spot_values_match_hand_evaluation() {
        // C = 8 → D = 4, ω_0 = 1, ω_1 = 10000^(-1/2) = 0.01.
        let pe = sinusoidal_pe::<f64>(4, 5, 8).unwrap();
        let tok = 2 * 5 + 3;
        let row = pe.table().row(tok);
        let expected = [
            2f64.sin(),
            2f64.cos(),
            (0.02f64).sin(),
            (0.02f64).cos(),
            3f64.sin(),
            3f64.cos(),
            (0.03f64).sin(),
            (0.03f64).cos(),
        ];
        for (a, b) in row.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_indivisible_channels() {
        assert!(sinusoidal_pe::<f64>(2, 2, 6).is_err());
    }

    #[test]
    fn deterministic() {
        let a = sinusoidal_pe::<f32>(3, 7, 16).unwrap();
        let b = sinusoidal_pe::<f32>(3, 7, 16).unwrap();
        assert_eq!(a, b);
    }
}
