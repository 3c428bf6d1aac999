//! Vector-Jacobian products of the reference kernels.

use std::fmt;
use std::str::FromStr;

use super::kernels::{self, row_moments, FfnWeights};
use super::{Scalar, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpId {
    Matmul,
    SoftmaxRows,
    LayerNorm,
    Linear,
    Ffn,
}

impl OpId {
    pub const ALL: [OpId; 5] = [
        OpId::Matmul,
        OpId::SoftmaxRows,
        OpId::LayerNorm,
        OpId::Linear,
        OpId::Ffn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpId::Matmul => "matmul",
            OpId::SoftmaxRows => "softmax_rows",
            OpId::LayerNorm => "layer_norm",
            OpId::Linear => "linear",
            OpId::Ffn => "ffn",
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpId {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpId::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// A kernel invocation with owned inputs.
///
/// Differentiable inputs are listed by [`Op::inputs`] in the same order
/// [`vjp`] returns their cotangents. Scalar hyper-parameters (softmax scale,
/// layer-norm eps) are held fixed.
#[derive(Clone, Debug)]
pub enum Op<T: Scalar = f64> {
    Matmul { a: Tensor<T>, b: Tensor<T> },
    SoftmaxRows { m: Tensor<T>, scale: T },
    LayerNorm { x: Tensor<T>, gamma: Tensor<T>, beta: Tensor<T>, eps: T },
    Linear { x: Tensor<T>, w: Tensor<T>, b: Option<Tensor<T>> },
    Ffn { x: Tensor<T>, weights: FfnWeights<T> },
}

impl<T: Scalar> Op<T> {
    pub fn id(&self) -> OpId {
        match self {
            Op::Matmul { .. } => OpId::Matmul,
            Op::SoftmaxRows { .. } => OpId::SoftmaxRows,
            Op::LayerNorm { .. } => OpId::LayerNorm,
            Op::Linear { .. } => OpId::Linear,
            Op::Ffn { .. } => OpId::Ffn,
        }
    }

    pub fn forward(&self) -> Result<Tensor<T>, TensorError> {
        match self {
            Op::Matmul { a, b } => kernels::matmul(a, b),
            Op::SoftmaxRows { m, scale } => kernels::softmax_rows(m, *scale),
            Op::LayerNorm { x, gamma, beta, eps } => kernels::layer_norm(x, gamma, beta, *eps),
            Op::Linear { x, w, b } => kernels::linear(x, w, b.as_ref()),
            Op::Ffn { x, weights } => kernels::ffn(x, weights),
        }
    }

    pub fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Matmul { a, b } => vec![a, b],
            Op::SoftmaxRows { m, .. } => vec![m],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b.as_ref());
                v
            }
            Op::Ffn { x, weights } => vec![x, &weights.w1, &weights.b1, &weights.w2, &weights.b2],
        }
    }

    pub fn inputs_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Op::Matmul { a, b } => vec![a, b],
            Op::SoftmaxRows { m, .. } => vec![m],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Linear { x, w, b } => {
                let mut v = vec![x, w];
                v.extend(b.as_mut());
                v
            }
            Op::Ffn { x, weights } => vec![
                x,
                &mut weights.w1,
                &mut weights.b1,
                &mut weights.w2,
                &mut weights.b2,
            ],
        }
    }
}

/// Returns one cotangent per entry of [`Op::inputs`].
pub fn vjp<T: Scalar>(op: &Op<T>, cotangent: &Tensor<T>) -> Result<Vec<Tensor<T>>, TensorError> {
    match op {
        Op::Matmul { a, b } => {
            let (ga, gb) = matmul_vjp(a, b, cotangent)?;
            Ok(vec![ga, gb])
        }
        Op::SoftmaxRows { m, scale } => {
            let y = kernels::softmax_rows(m, *scale)?;
            Ok(vec![softmax_rows_vjp(&y, cotangent, *scale)?])
        }
        Op::LayerNorm { x, gamma, eps, .. } => {
            let (gx, gg, gb) = layer_norm_vjp(x, gamma, *eps, cotangent)?;
            Ok(vec![gx, gg, gb])
        }
        Op::Linear { x, w, b } => {
            let (gx, gw, gb) = linear_vjp(x, w, cotangent)?;
            let mut out = vec![gx, gw];
            if b.is_some() {
                out.push(gb);
            }
            Ok(out)
        }
        Op::Ffn { x, weights } => {
            let g = ffn_vjp(x, weights, cotangent)?;
            Ok(vec![g.x, g.w1, g.b1, g.w2, g.b2])
        }
    }
}

fn expect_same(op: &'static str, a: &Tensor<impl Scalar>, shape: &[usize]) -> Result<(), TensorError> {
    if a.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

/// `(G·bᵀ, aᵀ·G)`.
pub fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let ga = kernels::matmul_nt(g, b)?;
    let gb = kernels::matmul(&a.transpose()?, g)?;
    Ok((ga, gb))
}

/// Cotangent of the softmax input given its output `y`.
pub fn softmax_rows_vjp<T: Scalar>(
    y: &Tensor<T>,
    g: &Tensor<T>,
    scale: T,
) -> Result<Tensor<T>, TensorError> {
    expect_same("softmax_rows_vjp", g, y.shape())?;
    let mut out = g.clone();
    for i in 0..y.rows() {
        let yr = y.row(i);
        let mut dot = T::zero();
        for (&gv, &yv) in g.row(i).iter().zip(yr) {
            dot = dot + gv * yv;
        }
        for (o, &yv) in out.row_mut(i).iter_mut().zip(yr) {
            *o = yv * (*o - dot) / scale;
        }
    }
    Ok(out)
}

/// Cotangents `(x, gamma, beta)` of a layer normalisation.
pub fn layer_norm_vjp<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let (r, c) = x.expect_rank2("layer_norm_vjp")?;
    expect_same("layer_norm_vjp", g, x.shape())?;
    let n = T::from_f64(c as f64);
    let mut gx = x.clone();
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut xhat = vec![T::zero(); c];
    let mut dxhat = vec![T::zero(); c];
    for i in 0..r {
        let (mean, var) = row_moments(x.row(i));
        let inv = (var + eps).sqrt().recip();
        let gr = g.row(i);
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..c {
            xhat[j] = (x.at(i, j) - mean) * inv;
            dxhat[j] = gr[j] * gamma.data()[j];
            gg[j] = gg[j] + gr[j] * xhat[j];
            gb[j] = gb[j] + gr[j];
            sum_d = sum_d + dxhat[j];
            sum_dx = sum_dx + dxhat[j] * xhat[j];
        }
        let (mean_d, mean_dx) = (sum_d / n, sum_dx / n);
        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
            *o = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    Ok((gx, Tensor::new(&[c], gg)?, Tensor::new(&[c], gb)?))
}

pub(crate) fn column_sums<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let c = g.cols();
    let mut out = vec![T::zero(); c];
    for i in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row(i)) {
            *o = *o + v;
        }
    }
    Tensor::new(&[c], out)
}

/// Cotangents `(x, w, b)` of `x·w + b`. The bias cotangent is returned even
/// when the forward pass had no bias.
pub fn linear_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let (gx, gw) = matmul_vjp(x, w, g)?;
    Ok((gx, gw, column_sums(g)?))
}

#[derive(Clone, Debug)]
pub struct FfnGrads<T: Scalar = f64> {
    pub x: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

pub fn ffn_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &FfnWeights<T>,
    g: &Tensor<T>,
) -> Result<FfnGrads<T>, TensorError> {
    let pre = kernels::linear(x, &w.w1, Some(&w.b1))?;
    let hidden = kernels::relu(&pre);
    let (gh, gw2, gb2) = linear_vjp(&hidden, &w.w2, g)?;
    let gpre = gh.zip_with(&pre, "ffn_vjp", |gv, p| if p > T::zero() { gv } else { T::zero() })?;
    let (gx, gw1, gb1) = linear_vjp(x, &w.w1, &gpre)?;
    Ok(FfnGrads {
        x: gx,
        w1: gw1,
        b1: gb1,
        w2: gw2,
        b2: gb2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_vjp, vjp_rel_err};
    use crate::numerics::testutil::{random_tensor, TestRng};

    fn check(op: Op<f64>, seed: u64) -> f64 {
        let y = op.forward().unwrap();
        let cot = random_tensor(y.shape(), seed);
        let analytic = vjp(&op, &cot).unwrap();
        let inputs: Vec<Tensor<f64>> = op.inputs().into_iter().cloned().collect();
        let numeric = finite_difference_vjp(
            |xs| {
                let mut o = op.clone();
                for (slot, v) in o.inputs_mut().into_iter().zip(xs) {
                    *slot = v.clone();
                }
                o.forward()
            },
            &inputs,
            &cot,
            1e-6,
        )
        .unwrap();
        vjp_rel_err(&analytic, &numeric).unwrap()
    }

    #[test]
    fn matmul_closed_form() {
        let a = random_tensor(&[3, 4], 1);
        let b = random_tensor(&[4, 2], 2);
        let g = random_tensor(&[3, 2], 3);
        let (ga, gb) = matmul_vjp(&a, &b, &g).unwrap();
        assert_eq!(ga, kernels::matmul(&g, &b.transpose().unwrap()).unwrap());
        assert_eq!(gb, kernels::matmul(&a.transpose().unwrap(), &g).unwrap());
    }

    #[test]
    fn softmax_single_row_matches_fd() {
        let m = random_tensor(&[1, 6], 4);
        let err = check(Op::SoftmaxRows { m, scale: 1.3 }, 5);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn layer_norm_matches_fd() {
        let op = Op::LayerNorm {
            x: random_tensor(&[3, 5], 6),
            gamma: random_tensor(&[5], 7),
            beta: random_tensor(&[5], 8),
            eps: 1e-5,
        };
        let err = check(op, 9);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn every_op_matches_fd_on_random_shapes() {
        let mut rng = TestRng::new(42);
        for trial in 0..100u64 {
            let r = 1 + rng.below(8);
            let k = 1 + rng.below(8);
            let n = 1 + rng.below(8);
            let s = trial * 17;
            let ops = [
                Op::Matmul {
                    a: random_tensor(&[r, k], s),
                    b: random_tensor(&[k, n], s + 1),
                },
                Op::SoftmaxRows {
                    m: random_tensor(&[r, k], s + 2),
                    scale: 0.5 + rng.unit(),
                },
                Op::LayerNorm {
                    x: random_tensor(&[r, k.max(2)], s + 3),
                    gamma: random_tensor(&[k.max(2)], s + 4),
                    beta: random_tensor(&[k.max(2)], s + 5),
                    eps: 1e-5,
                },
                Op::Linear {
                    x: random_tensor(&[r, k], s + 6),
                    w: random_tensor(&[k, n], s + 7),
                    b: Some(random_tensor(&[n], s + 8)),
                },
                Op::Ffn {
                    x: random_tensor(&[r, k], s + 9),
                    weights: FfnWeights {
                        w1: random_tensor(&[k, n], s + 10),
                        b1: random_tensor(&[n], s + 11),
                        w2: random_tensor(&[n, k], s + 12),
                        b2: random_tensor(&[k], s + 13),
                    },
                },
            ];
            for op in ops {
                let id = op.id();
                let err = check(op, s + 99);
                assert!(err <= 1e-6, "trial {trial} {id}: {err}");
            }
        }
    }

    #[test]
    fn unknown_op_id() {
        assert!(matches!("conv2d".parse::<OpId>(), Err(TensorError::UnknownOp(_))));
        for op in OpId::ALL {
            assert_eq!(op.name().parse::<OpId>().unwrap(), op);
        }
    }
}
