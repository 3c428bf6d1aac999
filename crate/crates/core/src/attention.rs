//! Multi-head attention and mixed-temporal (grouped) attention.
//!
//! Mixed-temporal attention partitions the `h` heads into `G` groups, one per
//! template of the appearance collection. With `Q = search · W^Q` split into
//! `G` contiguous channel chunks of width `C/G`, group `k` runs `h/G`-head
//! scaled dot-product attention of `Q_k` against
//! `K_k = templates[k] · W^K_k` and `V_k = templates[k] · W^V_k`. Each head
//! has dimension `d_k = C/h` and scale `√d_k`. Group outputs are concatenated
//! in group order and projected by `W^0`.
//!
//! Because each group only sees `C/G` query channels, the score and
//! weighted-sum stages cost exactly as much as single-template attention; see
//! [`attention_flops`].

use crate::numerics::kernels::{matmul, matmul_nt, softmax_rows};
use crate::numerics::vjp::{matmul_vjp, softmax_rows_vjp};
use crate::numerics::{Scalar, Tensor, TensorError};

fn check_square(name: &'static str, w: &Tensor<impl Scalar>, c: usize) -> Result<(), TensorError> {
    if w.shape() != [c, c] {
        return Err(TensorError::ShapeMismatch {
            op: name,
            lhs: w.shape().to_vec(),
            rhs: vec![c, c],
        });
    }
    Ok(())
}

fn check_channels(op: &'static str, x: &Tensor<impl Scalar>, c: usize) -> Result<(), TensorError> {
    if x.rank() != 2 || x.cols() != c {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![x.rows(), c],
        });
    }
    Ok(())
}

/// Projections of standard `h`-head attention; all `C × C`, bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights<T = f64> {
    heads: usize,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> MhaWeights<T> {
    pub fn new(
        heads: usize,
        wq: Tensor<T>,
        wk: Tensor<T>,
        wv: Tensor<T>,
        wo: Tensor<T>,
    ) -> Result<Self, TensorError> {
        let c = wq.rows();
        if heads == 0 || c % heads != 0 {
            return Err(TensorError::Contract(format!(
                "{c} channels are not divisible into {heads} heads"
            )));
        }
        check_square("mha.wq", &wq, c)?;
        check_square("mha.wk", &wk, c)?;
        check_square("mha.wv", &wv, c)?;
        check_square("mha.wo", &wo, c)?;
        Ok(Self {
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// Projections of mixed-temporal attention.
///
/// `wk[k]`, `wv[k]` are `C × C/G`; `wq` and `wo` are `C × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct MtaWeights<T = f64> {
    groups: usize,
    heads: usize,
    pub wq: Tensor<T>,
    pub wk: Vec<Tensor<T>>,
    pub wv: Vec<Tensor<T>>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> MtaWeights<T> {
    pub fn new(
        heads: usize,
        wq: Tensor<T>,
        wk: Vec<Tensor<T>>,
        wv: Vec<Tensor<T>>,
        wo: Tensor<T>,
    ) -> Result<Self, TensorError> {
        let c = wq.rows();
        let groups = wk.len();
        check_grouping(c, groups, heads)?;
        if wv.len() != groups {
            return Err(TensorError::Contract(format!(
                "{} key projections but {} value projections",
                groups,
                wv.len()
            )));
        }
        check_square("mta.wq", &wq, c)?;
        check_square("mta.wo", &wo, c)?;
        for w in wk.iter().chain(&wv) {
            if w.shape() != [c, c / groups] {
                return Err(TensorError::ShapeMismatch {
                    op: "mta.group_projection",
                    lhs: w.shape().to_vec(),
                    rhs: vec![c, c / groups],
                });
            }
        }
        Ok(Self {
            groups,
            heads,
            wq,
            wk,
            wv,
            wo,
        })
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn channels(&self) -> usize {
        self.wq.rows()
    }

    pub fn group_width(&self) -> usize {
        self.channels() / self.groups
    }

    pub fn heads_per_group(&self) -> usize {
        self.heads / self.groups
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

/// Divisibility rules shared by weights and FLOP accounting.
pub fn check_grouping(channels: usize, groups: usize, heads: usize) -> Result<(), TensorError> {
    if groups == 0 || heads == 0 {
        return Err(TensorError::Contract("groups and heads must be positive".into()));
    }
    if heads % groups != 0 {
        return Err(TensorError::Contract(format!(
            "{heads} heads cannot be split into {groups} groups"
        )));
    }
    if channels % groups != 0 || (channels / groups) % (heads / groups) != 0 {
        return Err(TensorError::Contract(format!(
            "{channels} channels incompatible with {groups} groups of {} heads",
            heads / groups
        )));
    }
    Ok(())
}

/// Scaled dot-product attention with `heads` heads over equal-width q/k/v.
struct HeadedAttention<T> {
    out: Tensor<T>,
    attn: Vec<Tensor<T>>,
}

fn headed_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<HeadedAttention<T>, TensorError> {
    let dk = q.cols() / heads;
    let scale = T::from_f64((dk as f64).sqrt());
    let mut parts = Vec::with_capacity(heads);
    let mut attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let scores = matmul_nt(&q.slice_cols(lo, hi)?, &k.slice_cols(lo, hi)?)?;
        let a = softmax_rows(&scores, scale)?;
        parts.push(matmul(&a, &v.slice_cols(lo, hi)?)?);
        attn.push(a);
    }
    Ok(HeadedAttention {
        out: Tensor::concat_cols(&parts)?,
        attn,
    })
}

/// Cotangents `(q, k, v)` of [`headed_attention`] given its attention maps.
fn headed_attention_vjp<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    attn: &[Tensor<T>],
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let heads = attn.len();
    let dk = q.cols() / heads;
    let scale = T::from_f64((dk as f64).sqrt());
    let mut gq = Tensor::zeros(q.shape())?;
    let mut gk = Tensor::zeros(k.shape())?;
    let mut gv = Tensor::zeros(v.shape())?;
    for (h, a) in attn.iter().enumerate() {
        let (lo, hi) = (h * dk, (h + 1) * dk);
        let (ga, gvh) = matmul_vjp(a, &v.slice_cols(lo, hi)?, &g.slice_cols(lo, hi)?)?;
        let gs = softmax_rows_vjp(a, &ga, scale)?;
        let kh = k.slice_cols(lo, hi)?;
        let qh = q.slice_cols(lo, hi)?;
        gq.set_cols(lo, &matmul(&gs, &kh)?)?;
        gk.set_cols(lo, &matmul(&gs.transpose()?, &qh)?)?;
        gv.set_cols(lo, &gvh)?;
    }
    Ok((gq, gk, gv))
}

/// Intermediates of one [`mha`] evaluation.
#[derive(Clone, Debug)]
pub struct MhaTrace<T = f64> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Per-head attention weights, `Lq × Lk`, rows summing to one.
    pub attn: Vec<Tensor<T>>,
    pub concat: Tensor<T>,
    pub out: Tensor<T>,
}

pub fn mha_traced<T: Scalar>(
    q_in: &Tensor<T>,
    k_in: &Tensor<T>,
    v_in: &Tensor<T>,
    w: &MhaWeights<T>,
) -> Result<MhaTrace<T>, TensorError> {
    let c = w.channels();
    check_channels("mha.query", q_in, c)?;
    check_channels("mha.key", k_in, c)?;
    check_channels("mha.value", v_in, c)?;
    if k_in.rows() != v_in.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "mha.key_value",
            lhs: k_in.shape().to_vec(),
            rhs: v_in.shape().to_vec(),
        });
    }
    let q = matmul(q_in, &w.wq)?;
    let k = matmul(k_in, &w.wk)?;
    let v = matmul(v_in, &w.wv)?;
    let HeadedAttention { out: concat, attn } = headed_attention(&q, &k, &v, w.heads)?;
    let out = matmul(&concat, &w.wo)?;
    Ok(MhaTrace {
        q,
        k,
        v,
        attn,
        concat,
        out,
    })
}

/// Standard multi-head attention, `Lq × C`.
pub fn mha<T: Scalar>(
    q_in: &Tensor<T>,
    k_in: &Tensor<T>,
    v_in: &Tensor<T>,
    w: &MhaWeights<T>,
) -> Result<Tensor<T>, TensorError> {
    Ok(mha_traced(q_in, k_in, v_in, w)?.out)
}

/// Cotangents `(q_in, k_in, v_in)` of [`mha`].
pub fn mha_vjp<T: Scalar>(
    q_in: &Tensor<T>,
    k_in: &Tensor<T>,
    v_in: &Tensor<T>,
    w: &MhaWeights<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let tr = mha_traced(q_in, k_in, v_in, w)?;
    let (gconcat, _) = matmul_vjp(&tr.concat, &w.wo, g)?;
    let (gq, gk, gv) = headed_attention_vjp(&tr.q, &tr.k, &tr.v, &tr.attn, &gconcat)?;
    Ok((
        matmul_nt(&gq, &w.wq)?,
        matmul_nt(&gk, &w.wk)?,
        matmul_nt(&gv, &w.wv)?,
    ))
}

/// Intermediates of one [`mta`] evaluation.
#[derive(Clone, Debug)]
pub struct MtaTrace<T = f64> {
    pub q: Tensor<T>,
    pub keys: Vec<Tensor<T>>,
    pub values: Vec<Tensor<T>>,
    /// `attn[group][head]`, each `Lx × Lz`.
    pub attn: Vec<Vec<Tensor<T>>>,
    /// Pre-projection group outputs `Y_k`, each `Lx × C/G`.
    pub group_outputs: Vec<Tensor<T>>,
    pub out: Tensor<T>,
}

pub fn mta_traced<T: Scalar>(
    search: &Tensor<T>,
    templates: &[Tensor<T>],
    w: &MtaWeights<T>,
) -> Result<MtaTrace<T>, TensorError> {
    let c = w.channels();
    if templates.len() != w.groups {
        return Err(TensorError::Contract(format!(
            "mixed-temporal attention with {} groups received {} templates",
            w.groups,
            templates.len()
        )));
    }
    check_channels("mta.search", search, c)?;
    for t in templates {
        check_channels("mta.template", t, c)?;
    }
    let gw = w.group_width();
    let q = matmul(search, &w.wq)?;
    let mut keys = Vec::with_capacity(w.groups);
    let mut values = Vec::with_capacity(w.groups);
    let mut attn = Vec::with_capacity(w.groups);
    let mut group_outputs = Vec::with_capacity(w.groups);
    for (g, t) in templates.iter().enumerate() {
        let qk = q.slice_cols(g * gw, (g + 1) * gw)?;
        let k = matmul(t, &w.wk[g])?;
        let v = matmul(t, &w.wv[g])?;
        let HeadedAttention { out, attn: a } = headed_attention(&qk, &k, &v, w.heads_per_group())?;
        keys.push(k);
        values.push(v);
        attn.push(a);
        group_outputs.push(out);
    }
    let out = matmul(&Tensor::concat_cols(&group_outputs)?, &w.wo)?;
    Ok(MtaTrace {
        q,
        keys,
        values,
        attn,
        group_outputs,
        out,
    })
}

/// Mixed-temporal attention of the search tokens over `G` templates, `Lx × C`.
pub fn mta<T: Scalar>(
    search: &Tensor<T>,
    templates: &[Tensor<T>],
    w: &MtaWeights<T>,
) -> Result<Tensor<T>, TensorError> {
    Ok(mta_traced(search, templates, w)?.out)
}

/// Cotangents of [`mta`] with respect to the search tokens and each template.
pub fn mta_vjp<T: Scalar>(
    search: &Tensor<T>,
    templates: &[Tensor<T>],
    w: &MtaWeights<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Tensor<T>>), TensorError> {
    let tr = mta_traced(search, templates, w)?;
    let gw = w.group_width();
    let concat = Tensor::concat_cols(&tr.group_outputs)?;
    let (gconcat, _) = matmul_vjp(&concat, &w.wo, g)?;
    let mut gq = Tensor::zeros(tr.q.shape())?;
    let mut gtemplates = Vec::with_capacity(w.groups);
    for (k, t) in templates.iter().enumerate() {
        let (lo, hi) = (k * gw, (k + 1) * gw);
        let (gqk, gkk, gvk) = headed_attention_vjp(
            &tr.q.slice_cols(lo, hi)?,
            &tr.keys[k],
            &tr.values[k],
            &tr.attn[k],
            &gconcat.slice_cols(lo, hi)?,
        )?;
        gq.set_cols(lo, &gqk)?;
        let gt = matmul_nt(&gkk, &w.wk[k])?.add(&matmul_nt(&gvk, &w.wv[k])?)?;
        debug_assert_eq!(gt.shape(), t.shape());
        gtemplates.push(gt);
    }
    Ok((matmul_nt(&gq, &w.wq)?, gtemplates))
}

/// Attention problem size for FLOP accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionShape {
    /// Query tokens `Lx`.
    pub query_len: usize,
    /// Tokens per template `Lz`.
    pub key_len: usize,
    pub channels: usize,
    /// `G`; `1` means standard attention run once per template.
    pub groups: usize,
    pub heads: usize,
    pub templates: usize,
}

/// Multiply-add counts per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopCounts {
    /// `Q_h · K_hᵀ` products.
    pub score: u64,
    /// `A_h · V_h` products.
    pub weighted_sum: u64,
    /// Input and output projections.
    pub projections: u64,
}

impl FlopCounts {
    pub fn total(&self) -> u64 {
        self.score + self.weighted_sum + self.projections
    }
}

/// Counts multiply-adds following the loop structure of [`mha`] / [`mta`].
///
/// With `groups == 1` every template gets its own full `h`-head attention
/// (query, key, value and output projections included). With `groups > 1`
/// the shape describes one [`mta`] call and `templates` must equal `groups`.
pub fn attention_flops(shape: &AttentionShape) -> Result<FlopCounts, TensorError> {
    let AttentionShape {
        query_len: lx,
        key_len: lz,
        channels: c,
        groups,
        heads,
        templates,
    } = *shape;
    check_grouping(c, groups, heads)?;
    let (lx, lz, c64) = (lx as u64, lz as u64, c as u64);
    let dk = (c / heads) as u64;
    let mut counts = FlopCounts::default();
    if groups == 1 {
        for _ in 0..templates {
            for _ in 0..heads {
                counts.score += lx * lz * dk;
                counts.weighted_sum += lx * lz * dk;
            }
            counts.projections += lx * c64 * c64 + 2 * lz * c64 * c64 + lx * c64 * c64;
        }
        return Ok(counts);
    }
    if templates != groups {
        return Err(TensorError::Contract(format!(
            "{groups} head groups need exactly {groups} templates, got {templates}"
        )));
    }
    let gw = (c / groups) as u64;
    counts.projections += lx * c64 * c64;
    for _ in 0..groups {
        counts.projections += 2 * lz * c64 * gw;
        for _ in 0..heads / groups {
            counts.score += lx * lz * dk;
            counts.weighted_sum += lx * lz * dk;
        }
    }
    counts.projections += lx * c64 * c64;
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::random_tensor;

    fn random_mha(c: usize, heads: usize, seed: u64) -> MhaWeights<f64> {
        MhaWeights::new(
            heads,
            random_tensor(&[c, c], seed),
            random_tensor(&[c, c], seed + 1),
            random_tensor(&[c, c], seed + 2),
            random_tensor(&[c, c], seed + 3),
        )
        .unwrap()
    }

    #[test]
    fn single_key_returns_value_row() {
        let id = Tensor::<f64>::identity(4).unwrap();
        let w = MhaWeights::new(1, id.clone(), id.clone(), id.clone(), id).unwrap();
        let q = random_tensor(&[3, 4], 1);
        let kv = random_tensor(&[1, 4], 2);
        let out = mha(&q, &kv, &kv, &w).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), kv.row(0));
        }
    }

    #[test]
    fn two_by_two_hand_case() {
        // h = 1, C = 2, identity projections, scale √2.
        let id = Tensor::<f64>::identity(2).unwrap();
        let w = MhaWeights::new(1, id.clone(), id.clone(), id.clone(), id).unwrap();
        let q = Tensor::from_f64s(&[2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap();
        let kv = Tensor::from_f64s(&[2, 2], &[1.0, 1.0, -1.0, 0.5]).unwrap();
        let out = mha(&q, &kv, &kv, &w).unwrap();
        // Row 0 scores: [1, -1] / √2; row 1 scores: [2, 1] / √2.
        let s = 2f64.sqrt();
        let expect = |s0: f64, s1: f64| {
            let (e0, e1) = ((s0 / s).exp(), (s1 / s).exp());
            let (a0, a1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            [a0 * 1.0 + a1 * -1.0, a0 * 1.0 + a1 * 0.5]
        };
        let r0 = expect(1.0, -1.0);
        let r1 = expect(2.0, 1.0);
        for (got, want) in out.data().iter().zip(r0.iter().chain(&r1)) {
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let t = Tensor::<f64>::zeros(&[6, 6]).unwrap();
        assert!(MhaWeights::new(4, t.clone(), t.clone(), t.clone(), t).is_err());
        assert!(check_grouping(256, 4, 8).is_ok());
        assert!(check_grouping(256, 3, 8).is_err());
        assert!(check_grouping(12, 4, 8).is_err());
    }

    #[test]
    fn mta_default_dimensions() {
        let (c, g, h) = (256, 4, 8);
        let mut rng = crate::numerics::init::seeded_rng(3);
        let mut u = |s: &[usize]| crate::numerics::init::scaled_uniform::<f64>(s, &mut rng).unwrap();
        let w = MtaWeights::new(
            h,
            u(&[c, c]),
            (0..g).map(|_| u(&[c, c / g])).collect(),
            (0..g).map(|_| u(&[c, c / g])).collect(),
            u(&[c, c]),
        )
        .unwrap();
        let search = random_tensor(&[676, c], 10);
        let templates: Vec<_> = (0..g).map(|k| random_tensor(&[36, c], 20 + k as u64)).collect();
        let tr = mta_traced(&search, &templates, &w).unwrap();
        assert_eq!(tr.out.shape(), &[676, 256]);
        assert_eq!(w.head_dim(), 32);
        assert_eq!(w.heads_per_group(), 2);
        for a in tr.attn.iter().flatten() {
            for r in 0..a.rows() {
                let s: f64 = a.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mta_rejects_wrong_template_count() {
        let c = 8;
        let w = MtaWeights::new(
            4,
            random_tensor(&[c, c], 1),
            (0..2).map(|k| random_tensor(&[c, c / 2], 2 + k)).collect(),
            (0..2).map(|k| random_tensor(&[c, c / 2], 4 + k)).collect(),
            random_tensor(&[c, c], 6),
        )
        .unwrap();
        let s = random_tensor(&[3, c], 7);
        let t = random_tensor(&[2, c], 8);
        assert!(mta(&s, &[t.clone()], &w).is_err());
        assert!(mta(&s, &[t.clone(), t], &w).is_ok());
    }

    #[test]
    fn symmetric_groups_give_identical_outputs() {
        let (c, g, h) = (16, 4, 8);
        let gw = c / g;
        let chunk = random_tensor(&[c, gw], 1);
        let mut wq = Tensor::zeros(&[c, c]).unwrap();
        for k in 0..g {
            wq.set_cols(k * gw, &chunk).unwrap();
        }
        let wk = random_tensor(&[c, gw], 2);
        let wv = random_tensor(&[c, gw], 3);
        let w = MtaWeights::new(h, wq, vec![wk; g], vec![wv; g], random_tensor(&[c, c], 4)).unwrap();
        let s = random_tensor(&[5, c], 5);
        let t = random_tensor(&[3, c], 6);
        let tr = mta_traced(&s, &vec![t; g], &w).unwrap();
        for y in &tr.group_outputs[1..] {
            assert_eq!(y, &tr.group_outputs[0]);
        }
    }

    #[test]
    fn mha_vjp_matches_fd() {
        use crate::numerics::gradcheck::{finite_difference_vjp, vjp_rel_err};
        let w = random_mha(8, 2, 30);
        let q = random_tensor(&[3, 8], 31);
        let k = random_tensor(&[4, 8], 32);
        let v = random_tensor(&[4, 8], 33);
        let g = random_tensor(&[3, 8], 34);
        let (gq, gk, gv) = mha_vjp(&q, &k, &v, &w, &g).unwrap();
        let fd = finite_difference_vjp(
            |xs| mha(&xs[0], &xs[1], &xs[2], &w),
            &[q, k, v],
            &g,
            1e-6,
        )
        .unwrap();
        let err = vjp_rel_err(&[gq, gk, gv], &fd).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn flops_degenerate_grouping_and_linearity() {
        let base = AttentionShape {
            query_len: 676,
            key_len: 36,
            channels: 256,
            groups: 4,
            heads: 8,
            templates: 4,
        };
        let mha1 = AttentionShape {
            groups: 1,
            templates: 1,
            ..base
        };
        let mta4 = attention_flops(&base).unwrap();
        let single = attention_flops(&mha1).unwrap();
        assert_eq!(mta4.score, single.score);
        assert_eq!(mta4.weighted_sum, single.weighted_sum);
        assert_eq!(mta4.score, 676 * 36 * 256);

        let doubled = attention_flops(&AttentionShape {
            key_len: 72,
            ..base
        })
        .unwrap();
        assert_eq!(doubled.score, 2 * mta4.score);
        assert_eq!(doubled.weighted_sum, 2 * mta4.weighted_sum);

        assert!(attention_flops(&AttentionShape {
            templates: 3,
            ..base
        })
        .is_err());
    }
}
