//! Reference dense kernels.
//!
//! Every reduction accumulates in ascending index order starting from zero,
//! so results are bit-stable across runs and match a naive triple loop.

use super::{Scalar, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `a · b` for `a: M×K`, `b: K×N`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, k) = a.expect_rank2("matmul")?;
    let (kb, n) = b.expect_rank2("matmul")?;
    if k != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    // i-k-j order: each out[i][j] still sees its k terms in ascending order.
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = ad[i * k + kk];
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aik * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (_, k) = a.expect_rank2("matmul_nt")?;
    let (_, kb) = b.expect_rank2("matmul_nt")?;
    if k != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_nt",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    matmul(a, &b.transpose()?)
}

/// Row-wise softmax of `m / scale`, stabilised by subtracting the row max.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>, scale: T) -> Result<Tensor<T>, TensorError> {
    let (r, c) = m.expect_rank2("softmax_rows")?;
    if !(scale > T::zero()) {
        return Err(TensorError::Contract(format!(
            "softmax scale must be positive, got {scale}"
        )));
    }
    let mut out = m.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = ((*v - max) / scale).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    debug_assert_eq!(out.cols(), c);
    Ok(out)
}

/// Affine parameters of a layer normalisation over the channel axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = f64> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn identity(channels: usize) -> Result<Self, TensorError> {
        Ok(Self {
            gamma: Tensor::full(&[channels], T::one())?,
            beta: Tensor::zeros(&[channels])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        layer_norm(x, &self.gamma, &self.beta, T::from_f64(LAYER_NORM_EPS))
    }
}

/// Per-row statistics used by both the forward pass and its VJP.
pub(crate) fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut sq = T::zero();
    for &v in row {
        let d = v - mean;
        sq = sq + d * d;
    }
    (mean, sq / n)
}

/// `(x − mean) / sqrt(var + eps) · gamma + beta` per row, biased variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, TensorError> {
    let (r, c) = x.expect_rank2("layer_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    if !(eps > T::zero()) {
        return Err(TensorError::Contract(format!(
            "layer_norm eps must be positive, got {eps}"
        )));
    }
    let mut out = x.clone();
    for i in 0..r {
        let row = out.row_mut(i);
        let (mean, var) = row_moments(row);
        let inv = (var + eps).sqrt().recip();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok(out)
}

/// `x · w (+ b)` with the bias broadcast over rows.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>, TensorError> {
    let mut out = matmul(x, w)?;
    if let Some(b) = b {
        add_bias(&mut out, b)?;
    }
    Ok(out)
}

pub(crate) fn add_bias<T: Scalar>(out: &mut Tensor<T>, b: &Tensor<T>) -> Result<(), TensorError> {
    let n = out.cols();
    if b.shape() != [n] {
        return Err(TensorError::ShapeMismatch {
            op: "bias",
            lhs: out.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    for i in 0..out.rows() {
        for (o, &bv) in out.row_mut(i).iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
    }
    Ok(())
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Two-layer position-wise feed-forward block.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnWeights<T = f64> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FfnWeights<T> {
    pub fn zeros(channels: usize, hidden: usize) -> Result<Self, TensorError> {
        Ok(Self {
            w1: Tensor::zeros(&[channels, hidden])?,
            b1: Tensor::zeros(&[hidden])?,
            w2: Tensor::zeros(&[hidden, channels])?,
            b2: Tensor::zeros(&[channels])?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.b1.len()
    }
}

/// `relu(x·w1 + b1)·w2 + b2`.
pub fn ffn<T: Scalar>(x: &Tensor<T>, w: &FfnWeights<T>) -> Result<Tensor<T>, TensorError> {
    let hidden = relu(&linear(x, &w.w1, Some(&w.b1))?);
    linear(&hidden, &w.w2, Some(&w.b2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::random_tensor;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a.at(i, kk) * b.at(kk, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::new(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = random_tensor(&[3, 3], 1);
        let i3 = Tensor::identity(3).unwrap();
        assert_eq!(matmul(&i3, &a).unwrap(), a);
        let z = Tensor::zeros(&[3, 3]).unwrap();
        assert_eq!(matmul(&z, &a).unwrap(), z);
    }

    #[test]
    fn matmul_matches_triple_loop_bitwise() {
        let a = random_tensor(&[3, 4], 2);
        let b = random_tensor(&[4, 2], 3);
        assert_eq!(matmul(&a, &b).unwrap().data(), naive_matmul(&a, &b).data());
        let a32: Tensor<f32> = a.cast();
        let b32: Tensor<f32> = b.cast();
        let c32 = matmul(&a32, &b32).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f32;
                for k in 0..4 {
                    s += a32.at(i, k) * b32.at(k, j);
                }
                assert_eq!(c32.at(i, j).to_bits(), s.to_bits());
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(&[4, 2]).unwrap();
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_nt_matches_transpose_route() {
        let a = random_tensor(&[5, 4], 4);
        let b = random_tensor(&[3, 4], 5);
        let lhs = matmul_nt(&a, &b).unwrap();
        let rhs = matmul(&a, &b.transpose().unwrap()).unwrap();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn softmax_closed_forms() {
        let c = Tensor::<f64>::full(&[2, 4], 3.0).unwrap();
        let s = softmax_rows(&c, 1.0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let m = Tensor::<f64>::from_f64s(&[1, 2], &[0.0, 3f64.ln()]).unwrap();
        let s = softmax_rows(&m, 1.0).unwrap();
        assert!((s.at(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.at(0, 1) - 0.75).abs() < 1e-15);

        assert!(softmax_rows(&m, 0.0).is_err());
    }

    #[test]
    fn softmax_matches_unstabilised_formula() {
        let m = random_tensor(&[5, 7], 6);
        let scale = 1.7;
        let s = softmax_rows(&m, scale).unwrap();
        for i in 0..5 {
            let denom: f64 = m.row(i).iter().map(|v| (v / scale).exp()).sum();
            for j in 0..7 {
                let direct = (m.at(i, j) / scale).exp() / denom;
                assert!((s.at(i, j) - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_fixed_point_and_constant_row() {
        let row = [1.0, -1.0, 1.0, -1.0];
        let x = Tensor::<f64>::from_f64s(&[1, 4], &row).unwrap();
        let p = LayerNormParams::identity(4).unwrap();
        let y = p.apply(&x).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);

        let c = Tensor::<f64>::full(&[2, 4], 7.5).unwrap();
        let y = p.apply(&c).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let x = random_tensor(&[4, 8], 7);
        let g = random_tensor(&[8], 8);
        let b = random_tensor(&[8], 9);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for i in 0..4 {
            let mean = x.row(i).iter().sum::<f64>() / 8.0;
            let var = x.row(i).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for j in 0..8 {
                let d = (x.at(i, j) - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
                assert!((y.at(i, j) - d).abs() <= 1e-6 * d.abs().max(1.0));
            }
        }
    }

    #[test]
    fn linear_cases() {
        let x = random_tensor(&[3, 4], 10);
        let id = Tensor::identity(4).unwrap();
        assert_eq!(linear(&x, &id, None).unwrap(), x);

        let b = random_tensor(&[2], 11);
        let w = random_tensor(&[4, 2], 12);
        let z = Tensor::zeros(&[3, 4]).unwrap();
        let y = linear(&z, &w, Some(&b)).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), b.data());
        }
        assert_eq!(linear(&z, &w, None).unwrap(), Tensor::zeros(&[3, 2]).unwrap());

        let y = linear(&x, &w, Some(&b)).unwrap();
        let mut oracle = naive_matmul(&x, &w);
        for i in 0..3 {
            for j in 0..2 {
                oracle.row_mut(i)[j] += b.data()[j];
            }
        }
        assert_eq!(y, oracle);
    }

    #[test]
    fn ffn_cases() {
        let x = random_tensor(&[3, 4], 13);
        let zero = FfnWeights::zeros(4, 16).unwrap();
        assert_eq!(ffn(&x, &zero).unwrap(), Tensor::zeros(&[3, 4]).unwrap());

        let pass = FfnWeights {
            w1: Tensor::identity(4).unwrap(),
            b1: Tensor::zeros(&[4]).unwrap(),
            w2: Tensor::identity(4).unwrap(),
            b2: Tensor::zeros(&[4]).unwrap(),
        };
        let nonneg = x.map(f64::abs);
        assert_eq!(ffn(&nonneg, &pass).unwrap(), nonneg);

        let w = FfnWeights {
            w1: random_tensor(&[4, 6], 14),
            b1: random_tensor(&[6], 15),
            w2: random_tensor(&[6, 4], 16),
            b2: random_tensor(&[4], 17),
        };
        let mut h = naive_matmul(&x, &w.w1);
        for i in 0..3 {
            for j in 0..6 {
                let v = h.at(i, j) + w.b1.data()[j];
                h.row_mut(i)[j] = if v > 0.0 { v } else { 0.0 };
            }
        }
        let mut o = naive_matmul(&h, &w.w2);
        for i in 0..3 {
            for j in 0..4 {
                o.row_mut(i)[j] += w.b2.data()[j];
            }
        }
        assert_eq!(ffn(&x, &w).unwrap(), o);
    }
}
