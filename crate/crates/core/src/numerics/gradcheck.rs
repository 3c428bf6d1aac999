//! Central finite differences, used as the independent oracle for every VJP.

use super::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-6;

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Numerical `⟨cotangent, ∂f/∂input⟩` for every element of every input.
pub fn finite_difference_vjp<F>(
    f: F,
    inputs: &[Tensor<f64>],
    cotangent: &Tensor<f64>,
    step: f64,
) -> Result<Vec<Tensor<f64>>, TensorError>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>,
{
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (e, slot) in g.iter_mut().enumerate() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = dot(cotangent, &f(&work)?);
            work[i].data_mut()[e] = orig - step;
            let minus = dot(cotangent, &f(&work)?);
            work[i].data_mut()[e] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        grads.push(Tensor::new(inputs[i].shape(), g)?);
    }
    Ok(grads)
}

/// Norm-wise relative error over all cotangents of one op, treated as one
/// concatenated vector: `‖a − n‖ / max(‖a‖, ‖n‖)`.
///
/// Pooling the inputs keeps inputs whose cotangent is vanishingly small
/// (e.g. a saturated two-channel layer norm) from turning finite-difference
/// round-off into a spurious failure.
pub fn vjp_rel_err(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> Result<f64, TensorError> {
    if analytic.len() != numeric.len() {
        return Err(TensorError::Contract(format!(
            "{} analytic cotangents vs {} numeric",
            analytic.len(),
            numeric.len()
        )));
    }
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (a, n) in analytic.iter().zip(numeric) {
        let d = a.sub(n)?.norm();
        diff += d * d;
        na += a.norm().powi(2);
        nn += n.norm().powi(2);
    }
    let scale = na.max(nn).sqrt();
    Ok(if scale == 0.0 { diff.sqrt() } else { diff.sqrt() / scale })
}
