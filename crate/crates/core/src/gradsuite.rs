//! Finite-difference audit of every analytic gradient in the crate.

use serde::Serialize;

use crate::attention::{mha, mha_vjp, mta, mta_vjp, MhaWeights, MtaWeights};
use crate::mtt::{decode, decode_vjp, DecoderWeights, EncodedCollection};
use crate::numerics::gradcheck::{finite_difference_vjp, vjp_rel_err, DEFAULT_STEP};
use crate::numerics::init::{seeded_rng, uniform, SeededRng};
use crate::numerics::{sinusoidal_pe, vjp, FeatureMap, FfnWeights, Op, OpId, Tensor, TensorError};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;

/// Report order; each name appears exactly once.
pub const CHECKED_OPS: [&str; 8] = [
    "matmul",
    "softmax_rows",
    "layer_norm",
    "linear",
    "ffn",
    "mha",
    "mta",
    "decode",
];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheck {
    pub op: &'static str,
    pub composite: bool,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance
    }
}

/// Problem size: token count and channel width. Channels must be a multiple of 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSizes {
    pub tokens: usize,
    pub channels: usize,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self { tokens: 3, channels: 8 }
    }
}

struct Gen(SeededRng);

impl Gen {
    fn t(&mut self, shape: &[usize]) -> Result<Tensor<f64>, TensorError> {
        uniform(shape, 1.0, &mut self.0)
    }
}

fn perturb(grads: &mut [Tensor<f64>]) {
    if let Some(v) = grads.first_mut().and_then(|g| g.data_mut().first_mut()) {
        *v += 1.0;
    }
}

fn kernel_check(op: Op<f64>, g: &mut Gen, corrupt: bool) -> Result<f64, TensorError> {
    let y = op.forward()?;
    let cot = g.t(y.shape())?;
    let mut analytic = vjp(&op, &cot)?;
    if corrupt {
        perturb(&mut analytic);
    }
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
        DEFAULT_STEP,
    )?;
    vjp_rel_err(&analytic, &numeric)
}

fn kernel_op(id: OpId, s: SuiteSizes, g: &mut Gen) -> Result<Op<f64>, TensorError> {
    let (n, c) = (s.tokens, s.channels);
    Ok(match id {
        OpId::Matmul => Op::Matmul { a: g.t(&[n, c])?, b: g.t(&[c, n + 1])? },
        OpId::SoftmaxRows => Op::SoftmaxRows { m: g.t(&[n, c])?, scale: 1.7 },
        OpId::LayerNorm => Op::LayerNorm {
            x: g.t(&[n, c])?,
            gamma: g.t(&[c])?.map(|v| 1.0 + 0.5 * v),
            beta: g.t(&[c])?,
            eps: 1e-5,
        },
        OpId::Linear => Op::Linear { x: g.t(&[n, c])?, w: g.t(&[c, c / 2])?, b: Some(g.t(&[c / 2])?) },
        OpId::Ffn => Op::Ffn {
            x: g.t(&[n, c])?,
            weights: FfnWeights { w1: g.t(&[c, 2 * c])?, b1: g.t(&[2 * c])?, w2: g.t(&[2 * c, c])?, b2: g.t(&[c])? },
        },
    })
}

fn mha_check(s: SuiteSizes, g: &mut Gen, corrupt: bool) -> Result<f64, TensorError> {
    let c = s.channels;
    let w = MhaWeights::new(2, g.t(&[c, c])?, g.t(&[c, c])?, g.t(&[c, c])?, g.t(&[c, c])?)?;
    let (q, k, v) = (g.t(&[s.tokens, c])?, g.t(&[s.tokens + 1, c])?, g.t(&[s.tokens + 1, c])?);
    let cot = g.t(&[s.tokens, c])?;
    let (gq, gk, gv) = mha_vjp(&q, &k, &v, &w, &cot)?;
    let mut analytic = vec![gq, gk, gv];
    if corrupt {
        perturb(&mut analytic);
    }
    let numeric = finite_difference_vjp(|xs| mha(&xs[0], &xs[1], &xs[2], &w), &[q, k, v], &cot, DEFAULT_STEP)?;
    vjp_rel_err(&analytic, &numeric)
}

fn mta_check(s: SuiteSizes, g: &mut Gen, corrupt: bool) -> Result<f64, TensorError> {
    let (c, groups) = (s.channels, 2);
    let gw = c / groups;
    let wk = (0..groups).map(|_| g.t(&[c, gw])).collect::<Result<Vec<_>, _>>()?;
    let wv = (0..groups).map(|_| g.t(&[c, gw])).collect::<Result<Vec<_>, _>>()?;
    let w = MtaWeights::new(4, g.t(&[c, c])?, wk, wv, g.t(&[c, c])?)?;
    let x = g.t(&[s.tokens, c])?;
    let templates = (0..groups).map(|_| g.t(&[s.tokens + 1, c])).collect::<Result<Vec<_>, _>>()?;
    let cot = g.t(&[s.tokens, c])?;
    let (gx, gt) = mta_vjp(&x, &templates, &w, &cot)?;
    let mut analytic = vec![gx];
    analytic.extend(gt);
    if corrupt {
        perturb(&mut analytic);
    }
    let mut inputs = vec![x];
    inputs.extend(templates);
    let numeric = finite_difference_vjp(|xs| mta(&xs[0], &xs[1..], &w), &inputs, &cot, DEFAULT_STEP)?;
    vjp_rel_err(&analytic, &numeric)
}

fn decode_check(s: SuiteSizes, g: &mut Gen, corrupt: bool) -> Result<f64, TensorError> {
    let (c, groups) = (s.channels, 4);
    let mut w = DecoderWeights::<f64>::random(c, 4, groups, 2 * c, &mut g.0)?;
    w.norm2.gamma = g.t(&[c])?.map(|v| 1.0 + 0.5 * v);
    w.norm2.beta = g.t(&[c])?.scale(0.3);
    let pe = sinusoidal_pe(2, 2, c)?;
    let tokens = g.t(&[4, c])?;
    let enc = (0..groups).map(|_| g.t(&[4, c])).collect::<Result<Vec<_>, _>>()?;
    let cot = g.t(&[4, c])?;
    let f = FeatureMap::from_tokens(tokens.clone(), 2, 2)?;
    let grads = decode_vjp(&f, &pe, &EncodedCollection::new(enc.clone())?, std::slice::from_ref(&w), &cot)?;
    let mut analytic = vec![grads.search];
    analytic.extend(grads.encodings);
    if corrupt {
        perturb(&mut analytic);
    }
    let mut inputs = vec![tokens];
    inputs.extend(enc);
    let numeric = finite_difference_vjp(
        |xs| {
            let f = FeatureMap::from_tokens(xs[0].clone(), 2, 2)?;
            decode(&f, &pe, &EncodedCollection::new(xs[1..].to_vec())?, std::slice::from_ref(&w))
        },
        &inputs,
        &cot,
        DEFAULT_STEP,
    )?;
    vjp_rel_err(&analytic, &numeric)
}

/// Checks every op in [`CHECKED_OPS`] order. `corrupt` names one op whose
/// analytic gradient is deliberately perturbed before comparison.
pub fn run_suite(seed: u64, sizes: SuiteSizes, corrupt: Option<&str>) -> Result<Vec<GradCheck>, TensorError> {
    if sizes.channels == 0 || sizes.channels % 4 != 0 || sizes.tokens == 0 {
        return Err(TensorError::Contract(format!(
            "gradient suite needs tokens ≥ 1 and channels a positive multiple of 4, got {sizes:?}"
        )));
    }
    if let Some(name) = corrupt {
        if !CHECKED_OPS.contains(&name) {
            return Err(TensorError::UnknownOp(name.to_string()));
        }
    }
    let mut g = Gen(seeded_rng(seed));
    let mut out = Vec::with_capacity(CHECKED_OPS.len());
    for op in CHECKED_OPS {
        let bad = corrupt == Some(op);
        let rel_err = match op {
            "mha" => mha_check(sizes, &mut g, bad)?,
            "mta" => mta_check(sizes, &mut g, bad)?,
            "decode" => decode_check(sizes, &mut g, bad)?,
            name => {
                let id: OpId = name.parse()?;
                let k = kernel_op(id, sizes, &mut g)?;
                kernel_check(k, &mut g, bad)?
            }
        };
        let composite = op == "decode";
        out.push(GradCheck {
            op,
            composite,
            rel_err,
            tolerance: if composite { COMPOSITE_TOLERANCE } else { PRIMITIVE_TOLERANCE },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes_and_lists_each_op_once() {
        let report = run_suite(0, SuiteSizes::default(), None).unwrap();
        let names: Vec<_> = report.iter().map(|r| r.op).collect();
        assert_eq!(names, CHECKED_OPS);
        for r in &report {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn corruption_is_caught() {
        let report = run_suite(0, SuiteSizes::default(), Some("layer_norm")).unwrap();
        let failed: Vec<_> = report.iter().filter(|r| !r.passed()).map(|r| r.op).collect();
        assert_eq!(failed, ["layer_norm"]);
        assert!(run_suite(0, SuiteSizes::default(), Some("nope")).is_err());
        assert!(run_suite(0, SuiteSizes { tokens: 2, channels: 6 }, None).is_err());
    }
}
