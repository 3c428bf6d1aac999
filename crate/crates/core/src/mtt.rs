//! Mixed-temporal transformer: a shared template encoder and a decoder whose
//! cross-attention mixes every template of the collection.
//!
//! Encoder layer, with `E = F′ + P`:
//!
//! ```text
//! X̂ = Norm(MSA(E, E, E) + E)
//! X  = Norm(FFN(X̂) + X̂)
//! ```
//!
//! Decoder layer over search tokens `S = F′_x + P_x` and encodings `enc`:
//!
//! ```text
//! X_x   = Norm(MSA(S, S, S) + S)
//! X̂_dec = Norm(MTA(X_x, enc) + X_x)
//! X_dec = Norm(FFN(X̂_dec) + X̂_dec)
//! ```
//!
//! Stacked layers feed each output into the next; the positional encoding is
//! added once, before the first layer.

use crate::attention::{mha, mha_vjp, mta, mta_vjp, MhaWeights, MtaWeights};
use crate::numerics::init::{scaled_uniform, SeededRng};
use crate::numerics::kernels::ffn;
use crate::numerics::vjp::{ffn_vjp, layer_norm_vjp};
use crate::numerics::{
    FeatureMap, FfnWeights, LayerNormParams, PositionalEncoding, Scalar, Tensor, TensorError,
    LAYER_NORM_EPS,
};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T = f64> {
    pub msa: MhaWeights<T>,
    pub ffn: FfnWeights<T>,
    pub norm1: LayerNormParams<T>,
    pub norm2: LayerNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights<T = f64> {
    pub msa: MhaWeights<T>,
    pub mta: MtaWeights<T>,
    pub ffn: FfnWeights<T>,
    pub norm1: LayerNormParams<T>,
    pub norm2: LayerNormParams<T>,
    pub norm3: LayerNormParams<T>,
}

fn random_mha<T: Scalar>(c: usize, heads: usize, rng: &mut SeededRng) -> Result<MhaWeights<T>, TensorError> {
    MhaWeights::new(
        heads,
        scaled_uniform(&[c, c], rng)?,
        scaled_uniform(&[c, c], rng)?,
        scaled_uniform(&[c, c], rng)?,
        scaled_uniform(&[c, c], rng)?,
    )
}

fn random_ffn<T: Scalar>(c: usize, hidden: usize, rng: &mut SeededRng) -> Result<FfnWeights<T>, TensorError> {
    Ok(FfnWeights {
        w1: scaled_uniform(&[c, hidden], rng)?,
        b1: Tensor::zeros(&[hidden])?,
        w2: scaled_uniform(&[hidden, c], rng)?,
        b2: Tensor::zeros(&[c])?,
    })
}

impl<T: Scalar> EncoderWeights<T> {
    /// Scaled-uniform projections (bound `√(3 / fan_in)`), zero biases, identity norms.
    pub fn random(c: usize, heads: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self, TensorError> {
        Ok(Self {
            msa: random_mha(c, heads, rng)?,
            ffn: random_ffn(c, hidden, rng)?,
            norm1: LayerNormParams::identity(c)?,
            norm2: LayerNormParams::identity(c)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.msa.channels()
    }
}

impl<T: Scalar> DecoderWeights<T> {
    pub fn random(
        c: usize,
        heads: usize,
        groups: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Result<Self, TensorError> {
        let msa = random_mha(c, heads, rng)?;
        let wq = scaled_uniform(&[c, c], rng)?;
        let mut wk = Vec::with_capacity(groups);
        let mut wv = Vec::with_capacity(groups);
        for _ in 0..groups {
            wk.push(scaled_uniform(&[c, c / groups], rng)?);
            wv.push(scaled_uniform(&[c, c / groups], rng)?);
        }
        let mta = MtaWeights::new(heads, wq, wk, wv, scaled_uniform(&[c, c], rng)?)?;
        Ok(Self {
            msa,
            mta,
            ffn: random_ffn(c, hidden, rng)?,
            norm1: LayerNormParams::identity(c)?,
            norm2: LayerNormParams::identity(c)?,
            norm3: LayerNormParams::identity(c)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.msa.channels()
    }

    pub fn groups(&self) -> usize {
        self.mta.groups()
    }
}

/// Encoded templates `X_z^0 … X_z^N`, slot 0 being the initial template.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCollection<T = f64> {
    encodings: Vec<Tensor<T>>,
}

impl<T: Scalar> EncodedCollection<T> {
    pub fn new(encodings: Vec<Tensor<T>>) -> Result<Self, TensorError> {
        let first = encodings
            .first()
            .ok_or_else(|| TensorError::Contract("empty encoded collection".into()))?;
        for e in &encodings[1..] {
            if e.shape() != first.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "encoded_collection",
                    lhs: first.shape().to_vec(),
                    rhs: e.shape().to_vec(),
                });
            }
        }
        Ok(Self { encodings })
    }

    pub fn len(&self) -> usize {
        self.encodings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encodings.is_empty()
    }

    pub fn as_slice(&self) -> &[Tensor<T>] {
        &self.encodings
    }

    pub fn into_inner(self) -> Vec<Tensor<T>> {
        self.encodings
    }
}

fn add_positional<T: Scalar>(f: &FeatureMap<T>, pe: &PositionalEncoding<T>) -> Result<Tensor<T>, TensorError> {
    if !pe.matches(f.height(), f.width(), f.channels()) {
        return Err(TensorError::ShapeMismatch {
            op: "positional_encoding",
            lhs: f.tensor().shape().to_vec(),
            rhs: vec![pe.height(), pe.width(), pe.channels()],
        });
    }
    f.tokens().add(pe.table())
}

fn nonempty<W>(layers: &[W], what: &str) -> Result<(), TensorError> {
    if layers.is_empty() {
        return Err(TensorError::Contract(format!("{what} needs at least one layer")));
    }
    Ok(())
}

/// One encoder layer on tokens that already include the positional encoding.
pub fn encoder_layer<T: Scalar>(x: &Tensor<T>, w: &EncoderWeights<T>) -> Result<Tensor<T>, TensorError> {
    let xh = w.norm1.apply(&mha(x, x, x, &w.msa)?.add(x)?)?;
    w.norm2.apply(&ffn(&xh, &w.ffn)?.add(&xh)?)
}

/// Encodes one template feature map to `(H_z·W_z) × C` tokens.
pub fn encode_template<T: Scalar>(
    f_z: &FeatureMap<T>,
    pe: &PositionalEncoding<T>,
    layers: &[EncoderWeights<T>],
) -> Result<Tensor<T>, TensorError> {
    nonempty(layers, "encoder")?;
    let mut x = add_positional(f_z, pe)?;
    for w in layers {
        x = encoder_layer(&x, w)?;
    }
    Ok(x)
}

/// Encodes every template independently with the shared weights.
pub fn encode_collection<T: Scalar>(
    features: &[FeatureMap<T>],
    pe: &PositionalEncoding<T>,
    layers: &[EncoderWeights<T>],
    groups: usize,
) -> Result<EncodedCollection<T>, TensorError> {
    if features.len() != groups {
        return Err(TensorError::Contract(format!(
            "expected {groups} template feature maps, got {}",
            features.len()
        )));
    }
    let encodings = features
        .iter()
        .map(|f| encode_template(f, pe, layers))
        .collect::<Result<Vec<_>, _>>()?;
    EncodedCollection::new(encodings)
}

/// Intermediates of one decoder layer, kept for the backward pass.
struct DecoderLayerTrace<T> {
    input: Tensor<T>,
    s1: Tensor<T>,
    x1: Tensor<T>,
    s2: Tensor<T>,
    x2: Tensor<T>,
    s3: Tensor<T>,
    out: Tensor<T>,
}

fn decoder_layer_traced<T: Scalar>(
    x: &Tensor<T>,
    enc: &[Tensor<T>],
    w: &DecoderWeights<T>,
) -> Result<DecoderLayerTrace<T>, TensorError> {
    let s1 = mha(x, x, x, &w.msa)?.add(x)?;
    let x1 = w.norm1.apply(&s1)?;
    let s2 = mta(&x1, enc, &w.mta)?.add(&x1)?;
    let x2 = w.norm2.apply(&s2)?;
    let s3 = ffn(&x2, &w.ffn)?.add(&x2)?;
    let out = w.norm3.apply(&s3)?;
    Ok(DecoderLayerTrace {
        input: x.clone(),
        s1,
        x1,
        s2,
        x2,
        s3,
        out,
    })
}

/// One decoder layer on search tokens that already include the positional encoding.
pub fn decoder_layer<T: Scalar>(
    x: &Tensor<T>,
    enc: &EncodedCollection<T>,
    w: &DecoderWeights<T>,
) -> Result<Tensor<T>, TensorError> {
    Ok(decoder_layer_traced(x, enc.as_slice(), w)?.out)
}

fn check_groups<T: Scalar>(enc: &EncodedCollection<T>, layers: &[DecoderWeights<T>]) -> Result<(), TensorError> {
    nonempty(layers, "decoder")?;
    for w in layers {
        if w.groups() != enc.len() {
            return Err(TensorError::Contract(format!(
                "decoder has {} head groups but the collection holds {} encodings",
                w.groups(),
                enc.len()
            )));
        }
    }
    Ok(())
}

/// Mixed-temporal feature `X_dec`, `(H_x·W_x) × C`.
pub fn decode<T: Scalar>(
    f_x: &FeatureMap<T>,
    pe_x: &PositionalEncoding<T>,
    enc: &EncodedCollection<T>,
    layers: &[DecoderWeights<T>],
) -> Result<Tensor<T>, TensorError> {
    check_groups(enc, layers)?;
    let mut x = add_positional(f_x, pe_x)?;
    for w in layers {
        x = decoder_layer(&x, enc, w)?;
    }
    Ok(x)
}

/// Cotangents of [`decode`] with respect to the search tokens and each encoding.
#[derive(Clone, Debug)]
pub struct DecodeGrads<T = f64> {
    /// `(H_x·W_x) × C`, token layout of the search feature map.
    pub search: Tensor<T>,
    pub encodings: Vec<Tensor<T>>,
}

fn norm_vjp<T: Scalar>(
    x: &Tensor<T>,
    p: &LayerNormParams<T>,
    g: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    Ok(layer_norm_vjp(x, &p.gamma, T::from_f64(LAYER_NORM_EPS), g)?.0)
}

pub fn decode_vjp<T: Scalar>(
    f_x: &FeatureMap<T>,
    pe_x: &PositionalEncoding<T>,
    enc: &EncodedCollection<T>,
    layers: &[DecoderWeights<T>],
    g: &Tensor<T>,
) -> Result<DecodeGrads<T>, TensorError> {
    check_groups(enc, layers)?;
    let mut traces = Vec::with_capacity(layers.len());
    let mut x = add_positional(f_x, pe_x)?;
    for w in layers {
        let tr = decoder_layer_traced(&x, enc.as_slice(), w)?;
        x = tr.out.clone();
        traces.push(tr);
    }
    let mut genc: Vec<Tensor<T>> = enc
        .as_slice()
        .iter()
        .map(|e| Tensor::zeros(e.shape()))
        .collect::<Result<_, _>>()?;
    let mut gout = g.clone();
    for (tr, w) in traces.iter().zip(layers).rev() {
        let gs3 = norm_vjp(&tr.s3, &w.norm3, &gout)?;
        let gx2 = gs3.add(&ffn_vjp(&tr.x2, &w.ffn, &gs3)?.x)?;
        let gs2 = norm_vjp(&tr.s2, &w.norm2, &gx2)?;
        let (gx1_attn, gt) = mta_vjp(&tr.x1, enc.as_slice(), &w.mta, &gs2)?;
        for (acc, gk) in genc.iter_mut().zip(&gt) {
            *acc = acc.add(gk)?;
        }
        let gx1 = gs2.add(&gx1_attn)?;
        let gs1 = norm_vjp(&tr.s1, &w.norm1, &gx1)?;
        let x0 = &tr.input;
        let (gq, gk, gv) = mha_vjp(x0, x0, x0, &w.msa, &gs1)?;
        gout = gs1.add(&gq)?.add(&gk)?.add(&gv)?;
    }
    Ok(DecodeGrads {
        search: gout,
        encodings: genc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{finite_difference_vjp, vjp_rel_err};
    use crate::numerics::init::seeded_rng;
    use crate::numerics::kernels::{layer_norm, linear, matmul, relu, softmax_rows};
    use crate::numerics::sinusoidal_pe;
    use crate::numerics::testutil::random_tensor;

    fn fmap(h: usize, w: usize, c: usize, seed: u64) -> FeatureMap<f64> {
        FeatureMap::from_tokens(random_tensor(&[h * w, c], seed), h, w).unwrap()
    }

    fn with_random_norms(p: &mut LayerNormParams<f64>, seed: u64) {
        let c = p.channels();
        p.gamma = random_tensor(&[c], seed).map(|v| 1.0 + 0.5 * v);
        p.beta = random_tensor(&[c], seed + 1).scale(0.3);
    }

    fn oracle_mha(x: &Tensor<f64>, w: &MhaWeights<f64>) -> Tensor<f64> {
        let dk = w.head_dim();
        let q = matmul(x, &w.wq).unwrap();
        let k = matmul(x, &w.wk).unwrap();
        let v = matmul(x, &w.wv).unwrap();
        let mut heads = Vec::new();
        for h in 0..w.heads() {
            let qs = q.slice_cols(h * dk, (h + 1) * dk).unwrap();
            let ks = k.slice_cols(h * dk, (h + 1) * dk).unwrap();
            let vs = v.slice_cols(h * dk, (h + 1) * dk).unwrap();
            let a = softmax_rows(&matmul(&qs, &ks.transpose().unwrap()).unwrap(), (dk as f64).sqrt()).unwrap();
            heads.push(matmul(&a, &vs).unwrap());
        }
        matmul(&Tensor::concat_cols(&heads).unwrap(), &w.wo).unwrap()
    }

    fn oracle_ffn(x: &Tensor<f64>, w: &FfnWeights<f64>) -> Tensor<f64> {
        let h = relu(&linear(x, &w.w1, Some(&w.b1)).unwrap());
        linear(&h, &w.w2, Some(&w.b2)).unwrap()
    }

    fn oracle_norm(x: &Tensor<f64>, p: &LayerNormParams<f64>) -> Tensor<f64> {
        layer_norm(x, &p.gamma, &p.beta, 1e-5).unwrap()
    }

    #[test]
    fn encoder_matches_step_by_step_composition() {
        let mut rng = seeded_rng(1);
        let mut w = EncoderWeights::<f64>::random(4, 2, 16, &mut rng).unwrap();
        with_random_norms(&mut w.norm1, 10);
        with_random_norms(&mut w.norm2, 20);
        let f = fmap(2, 2, 4, 5);
        let pe = sinusoidal_pe(2, 2, 4).unwrap();
        let got = encode_template(&f, &pe, std::slice::from_ref(&w)).unwrap();

        let e = f.tokens().add(pe.table()).unwrap();
        let xh = oracle_norm(&oracle_mha(&e, &w.msa).add(&e).unwrap(), &w.norm1);
        let want = oracle_norm(&oracle_ffn(&xh, &w.ffn).add(&xh).unwrap(), &w.norm2);
        assert!(got.rel_err(&want).unwrap() <= 1e-6);

        let again = encode_template(&f, &pe, std::slice::from_ref(&w)).unwrap();
        assert_eq!(got, again);
    }

    #[test]
    fn default_dimension_shapes() {
        let mut rng = seeded_rng(2);
        let enc_w = EncoderWeights::<f64>::random(256, 8, 1024, &mut rng).unwrap();
        let dec_w = DecoderWeights::<f64>::random(256, 8, 4, 1024, &mut rng).unwrap();
        let pe_z = sinusoidal_pe(6, 6, 256).unwrap();
        let pe_x = sinusoidal_pe(26, 26, 256).unwrap();
        let z: Vec<_> = (0..4).map(|k| fmap(6, 6, 256, 100 + k)).collect();
        let enc = encode_collection(&z, &pe_z, std::slice::from_ref(&enc_w), 4).unwrap();
        assert_eq!(enc.len(), 4);
        assert!(enc.as_slice().iter().all(|e| e.shape() == [36, 256]));
        let out = decode(&fmap(26, 26, 256, 7), &pe_x, &enc, std::slice::from_ref(&dec_w)).unwrap();
        assert_eq!(out.shape(), &[676, 256]);
    }

    #[test]
    fn collection_encoding_shares_weights_and_preserves_order() {
        let mut rng = seeded_rng(3);
        let w = EncoderWeights::<f64>::random(8, 2, 16, &mut rng).unwrap();
        let pe = sinusoidal_pe(2, 3, 8).unwrap();
        let a = fmap(2, 3, 8, 1);
        let same = encode_collection(&vec![a.clone(); 4], &pe, std::slice::from_ref(&w), 4).unwrap();
        for e in &same.as_slice()[1..] {
            assert_eq!(e, &same.as_slice()[0]);
        }
        let maps: Vec<_> = (0..4).map(|k| fmap(2, 3, 8, 10 + k)).collect();
        let enc = encode_collection(&maps, &pe, std::slice::from_ref(&w), 4).unwrap();
        let perm = [maps[0].clone(), maps[3].clone(), maps[1].clone(), maps[2].clone()];
        let penc = encode_collection(&perm, &pe, std::slice::from_ref(&w), 4).unwrap();
        assert_eq!(penc.as_slice()[1], enc.as_slice()[3]);
        assert_eq!(penc.as_slice()[2], enc.as_slice()[1]);
        assert_eq!(penc.as_slice()[3], enc.as_slice()[2]);
        assert!(encode_collection(&maps[..3], &pe, std::slice::from_ref(&w), 4).is_err());
    }

    #[test]
    fn decoder_matches_step_by_step_composition() {
        let mut rng = seeded_rng(4);
        let mut w = DecoderWeights::<f64>::random(8, 4, 2, 12, &mut rng).unwrap();
        with_random_norms(&mut w.norm1, 1);
        with_random_norms(&mut w.norm2, 3);
        with_random_norms(&mut w.norm3, 5);
        let f = fmap(2, 3, 8, 9);
        let pe = sinusoidal_pe(2, 3, 8).unwrap();
        let enc = EncodedCollection::new(vec![random_tensor(&[4, 8], 11), random_tensor(&[4, 8], 12)]).unwrap();
        let got = decode(&f, &pe, &enc, std::slice::from_ref(&w)).unwrap();

        let s = f.tokens().add(pe.table()).unwrap();
        let xx = oracle_norm(&oracle_mha(&s, &w.msa).add(&s).unwrap(), &w.norm1);
        let m = &w.mta;
        let q = matmul(&xx, &m.wq).unwrap();
        let (gw, dk) = (m.group_width(), m.head_dim());
        let mut heads = Vec::new();
        for g in 0..m.groups() {
            let k = matmul(&enc.as_slice()[g], &m.wk[g]).unwrap();
            let v = matmul(&enc.as_slice()[g], &m.wv[g]).unwrap();
            for h in 0..m.heads_per_group() {
                let lo = h * dk;
                let qs = q.slice_cols(g * gw + lo, g * gw + lo + dk).unwrap();
                let a = softmax_rows(
                    &matmul(&qs, &k.slice_cols(lo, lo + dk).unwrap().transpose().unwrap()).unwrap(),
                    (dk as f64).sqrt(),
                )
                .unwrap();
                heads.push(matmul(&a, &v.slice_cols(lo, lo + dk).unwrap()).unwrap());
            }
        }
        let attn = matmul(&Tensor::concat_cols(&heads).unwrap(), &m.wo).unwrap();
        let xd = oracle_norm(&attn.add(&xx).unwrap(), &w.norm2);
        let want = oracle_norm(&oracle_ffn(&xd, &w.ffn).add(&xd).unwrap(), &w.norm3);
        assert!(got.rel_err(&want).unwrap() <= 1e-6);
    }

    #[test]
    fn initial_template_only_arm_runs_deterministically() {
        let mut rng = seeded_rng(5);
        let w = DecoderWeights::<f64>::random(8, 8, 4, 16, &mut rng).unwrap();
        let z0 = random_tensor(&[4, 8], 1);
        let enc = EncodedCollection::new(vec![z0; 4]).unwrap();
        let pe = sinusoidal_pe(3, 3, 8).unwrap();
        let f = fmap(3, 3, 8, 2);
        let a = decode(&f, &pe, &enc, std::slice::from_ref(&w)).unwrap();
        let b = decode(&f, &pe, &enc, std::slice::from_ref(&w)).unwrap();
        assert_eq!(a, b);
        assert!(a.all_finite());
        let short = EncodedCollection::new(vec![random_tensor(&[4, 8], 1); 3]).unwrap();
        assert!(decode(&f, &pe, &short, std::slice::from_ref(&w)).is_err());
    }

    #[test]
    fn swapping_templates_with_their_groups_is_invariant() {
        let mut rng = seeded_rng(6);
        let w = DecoderWeights::<f64>::random(16, 8, 4, 16, &mut rng).unwrap();
        let enc: Vec<_> = (0..4).map(|k| random_tensor(&[4, 16], 30 + k)).collect();
        let pe = sinusoidal_pe(2, 2, 16).unwrap();
        let f = fmap(2, 2, 16, 3);
        let base = decode(&f, &pe, &EncodedCollection::new(enc.clone()).unwrap(), std::slice::from_ref(&w)).unwrap();

        let (i, j) = (1, 3);
        let gw = w.mta.group_width();
        let mut sw = w.clone();
        sw.mta.wk.swap(i, j);
        sw.mta.wv.swap(i, j);
        let qi = w.mta.wq.slice_cols(i * gw, (i + 1) * gw).unwrap();
        let qj = w.mta.wq.slice_cols(j * gw, (j + 1) * gw).unwrap();
        sw.mta.wq.set_cols(i * gw, &qj).unwrap();
        sw.mta.wq.set_cols(j * gw, &qi).unwrap();
        for r in 0..gw {
            let a = w.mta.wo.row(i * gw + r).to_vec();
            let b = w.mta.wo.row(j * gw + r).to_vec();
            sw.mta.wo.row_mut(i * gw + r).copy_from_slice(&b);
            sw.mta.wo.row_mut(j * gw + r).copy_from_slice(&a);
        }
        let mut penc = enc;
        penc.swap(i, j);
        let got = decode(&f, &pe, &EncodedCollection::new(penc).unwrap(), std::slice::from_ref(&sw)).unwrap();
        assert!(got.rel_err(&base).unwrap() <= 1e-6);
    }

    #[test]
    fn decode_vjp_matches_fd() {
        let mut rng = seeded_rng(7);
        let mut w = DecoderWeights::<f64>::random(8, 4, 4, 16, &mut rng).unwrap();
        with_random_norms(&mut w.norm2, 40);
        let pe = sinusoidal_pe(2, 2, 8).unwrap();
        let tokens = random_tensor(&[4, 8], 41);
        let enc: Vec<_> = (0..4).map(|k| random_tensor(&[4, 8], 50 + k)).collect();
        let g = random_tensor(&[4, 8], 60);
        let f = FeatureMap::from_tokens(tokens.clone(), 2, 2).unwrap();
        let grads = decode_vjp(&f, &pe, &EncodedCollection::new(enc.clone()).unwrap(), std::slice::from_ref(&w), &g).unwrap();
        let mut inputs = vec![tokens];
        inputs.extend(enc);
        let fd = finite_difference_vjp(
            |xs| {
                let f = FeatureMap::from_tokens(xs[0].clone(), 2, 2)?;
                decode(&f, &pe, &EncodedCollection::new(xs[1..].to_vec())?, std::slice::from_ref(&w))
            },
            &inputs,
            &g,
            1e-6,
        )
        .unwrap();
        let mut analytic = vec![grads.search];
        analytic.extend(grads.encodings);
        let err = vjp_rel_err(&analytic, &fd).unwrap();
        assert!(err <= 1e-5, "{err}");
    }
}
