//! Model weights, their on-disk bundle, and the two seeded constructions.
//!
//! A bundle is a directory holding `manifest.json` and one tensor file per
//! weight. The manifest records the model dimensions and, for every tensor,
//! its name, role, file and shape.
//!
//! [`WeightBundle::random`] draws every projection from a seeded scaled-uniform
//! distribution. [`WeightBundle::reference`] builds weights by hand so that the
//! untrained transformer behaves as a template matcher:
//!
//! * the extractor writes a contrast-normalised cell descriptor into a few
//!   content channels that coincide with the slowest positional sine
//!   channels (where the encoding is close to zero), plus a constant anchor
//!   channel;
//! * self-attention and feed-forward blocks are inert (zero output
//!   projections), so encoders and decoders reduce to their norms;
//! * each head group matches search descriptors against the descriptors of
//!   its template and reads, from the positional channels of the matched
//!   template tokens, how central they are and where they sit relative to
//!   the template centre;
//! * the output projection averages those readouts over groups into three
//!   channels, which the head turns into a score and side distances.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::extractor::{FeatureExtractor, ReferenceExtractor};
use super::head::HeadWeights;
use super::PipelineError;
use crate::attention::{check_grouping, MhaWeights, MtaWeights};
use crate::image::GrayImage;
use crate::mtt::{encode_template, DecoderWeights, EncoderWeights};
use crate::numerics::codec::{decode_tensor, encode_tensor};
use crate::numerics::init::{scaled_uniform, seeded_rng, SeededRng};
use crate::numerics::pe::pe_frequency;
use crate::numerics::{sinusoidal_pe, FfnWeights, FormatError, LayerNormParams, Scalar, Tensor};

pub const BUNDLE_FORMAT: &str = "bactrack-weights";
pub const BUNDLE_VERSION: u32 = 1;
pub const BUNDLE_MANIFEST: &str = "manifest.json";

/// Reference weights for [`TrackerConfig::desk`](super::TrackerConfig::desk), shipped with the crate.
pub fn shipped_desk_weights() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/reference-desk")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub heads: usize,
    pub groups: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub template_grid: usize,
    pub search_grid: usize,
    pub template_patch: usize,
    pub search_patch: usize,
    pub sub_blocks: usize,
    /// Extractor window side in patch pixels; 0 uses the cell.
    #[serde(default)]
    pub window: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), PipelineError> {
        check_grouping(self.channels, self.groups, self.heads)?;
        if self.channels % self.heads != 0 {
            return Err(PipelineError::Config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.channels % 4 != 0 {
            return Err(PipelineError::Config(format!(
                "positional encoding needs channels divisible by 4, got {}",
                self.channels
            )));
        }
        let positive = [
            self.ffn_hidden,
            self.encoder_layers,
            self.decoder_layers,
            self.template_grid,
            self.search_grid,
            self.sub_blocks,
        ];
        if positive.contains(&0) {
            return Err(PipelineError::Config("model dimensions must be positive".into()));
        }
        if self.template_patch < 2 || self.search_patch < 2 {
            return Err(PipelineError::Config("patch sizes must be at least 2".into()));
        }
        Ok(())
    }

    /// Search-grid stride in search-patch pixels.
    pub fn search_stride(&self) -> f64 {
        self.search_patch as f64 / self.search_grid as f64
    }
}

/// Transformer and head weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T = f64> {
    pub encoder: Vec<EncoderWeights<T>>,
    pub decoder: Vec<DecoderWeights<T>>,
    pub head: HeadWeights<T>,
}

struct Named<T> {
    name: String,
    role: String,
    tensor: Tensor<T>,
}

fn named<T: Scalar>(out: &mut Vec<Named<T>>, name: String, role: &str, t: &Tensor<T>) {
    out.push(Named {
        name,
        role: role.to_string(),
        tensor: t.clone(),
    });
}

fn push_mha<T: Scalar>(out: &mut Vec<Named<T>>, p: &str, w: &MhaWeights<T>, what: &str) {
    named(out, format!("{p}.wq"), &format!("{what} query projection"), &w.wq);
    named(out, format!("{p}.wk"), &format!("{what} key projection"), &w.wk);
    named(out, format!("{p}.wv"), &format!("{what} value projection"), &w.wv);
    named(out, format!("{p}.wo"), &format!("{what} output projection"), &w.wo);
}

fn push_ffn<T: Scalar>(out: &mut Vec<Named<T>>, p: &str, w: &FfnWeights<T>) {
    named(out, format!("{p}.w1"), "feed-forward first layer", &w.w1);
    named(out, format!("{p}.b1"), "feed-forward first bias", &w.b1);
    named(out, format!("{p}.w2"), "feed-forward second layer", &w.w2);
    named(out, format!("{p}.b2"), "feed-forward second bias", &w.b2);
}

fn push_norm<T: Scalar>(out: &mut Vec<Named<T>>, p: &str, w: &LayerNormParams<T>) {
    named(out, format!("{p}.gamma"), "layer-norm scale", &w.gamma);
    named(out, format!("{p}.beta"), "layer-norm shift", &w.beta);
}

struct TensorStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> TensorStore<T> {
    fn take(&mut self, name: &str) -> Result<Tensor<T>, PipelineError> {
        self.map
            .remove(name)
            .ok_or_else(|| PipelineError::Format(FormatError::Invalid(format!("weight bundle lacks tensor {name}"))))
    }

    fn mha(&mut self, p: &str, heads: usize) -> Result<MhaWeights<T>, PipelineError> {
        Ok(MhaWeights::new(
            heads,
            self.take(&format!("{p}.wq"))?,
            self.take(&format!("{p}.wk"))?,
            self.take(&format!("{p}.wv"))?,
            self.take(&format!("{p}.wo"))?,
        )?)
    }

    fn ffn(&mut self, p: &str) -> Result<FfnWeights<T>, PipelineError> {
        Ok(FfnWeights {
            w1: self.take(&format!("{p}.w1"))?,
            b1: self.take(&format!("{p}.b1"))?,
            w2: self.take(&format!("{p}.w2"))?,
            b2: self.take(&format!("{p}.b2"))?,
        })
    }

    fn norm(&mut self, p: &str) -> Result<LayerNormParams<T>, PipelineError> {
        Ok(LayerNormParams {
            gamma: self.take(&format!("{p}.gamma"))?,
            beta: self.take(&format!("{p}.beta"))?,
        })
    }
}

impl<T: Scalar> ModelWeights<T> {
    fn to_named(&self) -> Vec<Named<T>> {
        let mut out = Vec::new();
        for (l, e) in self.encoder.iter().enumerate() {
            push_mha(&mut out, &format!("encoder.{l}.msa"), &e.msa, "encoder self-attention");
            push_ffn(&mut out, &format!("encoder.{l}.ffn"), &e.ffn);
            push_norm(&mut out, &format!("encoder.{l}.norm1"), &e.norm1);
            push_norm(&mut out, &format!("encoder.{l}.norm2"), &e.norm2);
        }
        for (l, d) in self.decoder.iter().enumerate() {
            push_mha(&mut out, &format!("decoder.{l}.msa"), &d.msa, "decoder self-attention");
            named(&mut out, format!("decoder.{l}.mta.wq"), "mixed-temporal query projection", &d.mta.wq);
            for (k, w) in d.mta.wk.iter().enumerate() {
                named(&mut out, format!("decoder.{l}.mta.wk.{k}"), "head-group key projection", w);
            }
            for (k, w) in d.mta.wv.iter().enumerate() {
                named(&mut out, format!("decoder.{l}.mta.wv.{k}"), "head-group value projection", w);
            }
            named(&mut out, format!("decoder.{l}.mta.wo"), "mixed-temporal output projection", &d.mta.wo);
            push_ffn(&mut out, &format!("decoder.{l}.ffn"), &d.ffn);
            push_norm(&mut out, &format!("decoder.{l}.norm1"), &d.norm1);
            push_norm(&mut out, &format!("decoder.{l}.norm2"), &d.norm2);
            push_norm(&mut out, &format!("decoder.{l}.norm3"), &d.norm3);
        }
        named(&mut out, "head.cls_w".into(), "classification weights", &self.head.cls_w);
        named(&mut out, "head.cls_b".into(), "classification bias", &self.head.cls_b);
        named(&mut out, "head.reg_w".into(), "regression weights", &self.head.reg_w);
        named(&mut out, "head.reg_b".into(), "regression bias", &self.head.reg_b);
        out
    }

    fn from_store(dims: &ModelDims, store: &mut TensorStore<T>) -> Result<Self, PipelineError> {
        let mut encoder = Vec::with_capacity(dims.encoder_layers);
        for l in 0..dims.encoder_layers {
            encoder.push(EncoderWeights {
                msa: store.mha(&format!("encoder.{l}.msa"), dims.heads)?,
                ffn: store.ffn(&format!("encoder.{l}.ffn"))?,
                norm1: store.norm(&format!("encoder.{l}.norm1"))?,
                norm2: store.norm(&format!("encoder.{l}.norm2"))?,
            });
        }
        let mut decoder = Vec::with_capacity(dims.decoder_layers);
        for l in 0..dims.decoder_layers {
            let msa = store.mha(&format!("decoder.{l}.msa"), dims.heads)?;
            let wq = store.take(&format!("decoder.{l}.mta.wq"))?;
            let wk = (0..dims.groups)
                .map(|k| store.take(&format!("decoder.{l}.mta.wk.{k}")))
                .collect::<Result<Vec<_>, _>>()?;
            let wv = (0..dims.groups)
                .map(|k| store.take(&format!("decoder.{l}.mta.wv.{k}")))
                .collect::<Result<Vec<_>, _>>()?;
            let wo = store.take(&format!("decoder.{l}.mta.wo"))?;
            decoder.push(DecoderWeights {
                msa,
                mta: MtaWeights::new(dims.heads, wq, wk, wv, wo)?,
                ffn: store.ffn(&format!("decoder.{l}.ffn"))?,
                norm1: store.norm(&format!("decoder.{l}.norm1"))?,
                norm2: store.norm(&format!("decoder.{l}.norm2"))?,
                norm3: store.norm(&format!("decoder.{l}.norm3"))?,
            });
        }
        let head = HeadWeights {
            cls_w: store.take("head.cls_w")?,
            cls_b: store.take("head.cls_b")?,
            reg_w: store.take("head.reg_w")?,
            reg_b: store.take("head.reg_b")?,
        };
        Ok(Self { encoder, decoder, head })
    }

    pub fn cast<U: Scalar>(&self, dims: &ModelDims) -> Result<ModelWeights<U>, PipelineError> {
        let map = self
            .to_named()
            .into_iter()
            .map(|n| (n.name, n.tensor.cast::<U>()))
            .collect();
        ModelWeights::from_store(dims, &mut TensorStore { map })
    }
}

/// Constants of the hand-built reference weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceParams {
    /// Descriptor channels per cell.
    pub content_channels: usize,
    /// Extractor layer-norm gain on content and anchor channels.
    pub feature_gain: f64,
    /// Constant pre-norm value of the anchor channel; sets the contrast
    /// below which a cell reads as flat.
    pub anchor: f64,
    /// Multiplier on query and key descriptors in scoring heads.
    pub match_sharpness: f64,
    /// The same for localising heads.
    pub offset_sharpness: f64,
    /// Width, in template cells, of the centrality profile.
    pub center_sigma: f64,
    /// Logit slope of the score against averaged centrality.
    pub score_gain: f64,
    /// Averaged centrality at which the score is 0.5.
    pub score_center: f64,
    /// Gain on the position readout in the regression branch.
    pub offset_gain: f64,
    /// Logit slope of the score against the descriptor agreement between a
    /// search cell and its attended template content.
    #[serde(default)]
    pub agreement_gain: f64,
    /// Logit bonus with which localising heads prefer template cells near the
    /// template centre.
    #[serde(default)]
    pub locate_prior: f64,
    /// Fraction of the merged attention output taken from the initial
    /// template's group; 0 weighs all groups equally.
    #[serde(default)]
    pub initial_share: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            content_channels: 16,
            feature_gain: 1.0,
            anchor: 1.0,
            match_sharpness: 0.7,
            offset_sharpness: 1.0,
            center_sigma: 2.0,
            score_gain: 8.0,
            score_center: 0.2,
            offset_gain: 1.3,
            agreement_gain: 0.0,
            locate_prior: 10.0,
            initial_share: 0.0,
        }
    }
}

fn group_weight(g: usize, groups: usize, initial_share: f64) -> f64 {
    if initial_share <= 0.0 || groups == 1 {
        1.0 / groups as f64
    } else if g == 0 {
        initial_share
    } else {
        (1.0 - initial_share) / (groups - 1) as f64
    }
}

/// Where the reference construction places its signals.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPlan {
    pub content: Vec<usize>,
    pub anchor: usize,
    pub score: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub reference: usize,
    /// Attended template content, one channel per leading descriptor channel.
    pub attended: Vec<usize>,
    pub agreement: usize,
}

impl ChannelPlan {
    /// Content on the slowest sine channels of both axes, outputs on the
    /// slowest cosine channels of the row axis, attended content and the
    /// agreement on the remaining slow cosine channels.
    pub fn new(channels: usize, content: usize, attended: usize) -> Result<Self, PipelineError> {
        let pairs = channels / 4;
        let per_axis = content.div_ceil(2);
        let half = channels / 2;
        let slow = pairs / 2;
        let mut spare: Vec<usize> = (slow..pairs).rev().map(|p| half + 2 * p + 1).collect();
        spare.extend((slow..pairs.saturating_sub(4)).rev().map(|p| 2 * p + 1));
        if content == 0 || pairs < per_axis.max(4) + 1 || (attended > 0 && spare.len() < attended + 1) {
            return Err(PipelineError::Config(format!(
                "{channels} channels cannot host {content} descriptor channels"
            )));
        }
        let mut c = Vec::with_capacity(content);
        for k in 0..content {
            let pair = pairs - 1 - k / 2;
            c.push(if k % 2 == 0 { 2 * pair } else { half + 2 * pair });
        }
        let cos_row = |pair: usize| 2 * pair + 1;
        Ok(Self {
            content: c,
            anchor: 2 * (pairs - 1 - per_axis),
            score: cos_row(pairs - 1),
            offset_x: cos_row(pairs - 2),
            offset_y: cos_row(pairs - 3),
            reference: cos_row(pairs - 4),
            attended: spare[..attended].to_vec(),
            agreement: if attended == 0 { cos_row(pairs - 4) } else { spare[attended] },
        })
    }

    fn is_signal(&self, ch: usize) -> bool {
        self.content.contains(&ch) || ch == self.anchor
    }
}

/// Extractor plus model weights, as stored in a bundle directory.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightBundle<T = f64> {
    pub dims: ModelDims,
    pub extractor: ReferenceExtractor,
    pub model: ModelWeights<T>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: String,
    file: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    format: String,
    version: u32,
    dims: ModelDims,
    extractor: String,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn random_mha<T: Scalar>(c: usize, heads: usize, rng: &mut SeededRng, zero_out: bool) -> Result<MhaWeights<T>, PipelineError> {
    let wo = if zero_out {
        Tensor::zeros(&[c, c])?
    } else {
        scaled_uniform(&[c, c], rng)?
    };
    Ok(MhaWeights::new(
        heads,
        scaled_uniform(&[c, c], rng)?,
        scaled_uniform(&[c, c], rng)?,
        scaled_uniform(&[c, c], rng)?,
        wo,
    )?)
}

fn random_ffn<T: Scalar>(c: usize, hidden: usize, rng: &mut SeededRng, zero_out: bool) -> Result<FfnWeights<T>, PipelineError> {
    let w2 = if zero_out {
        Tensor::zeros(&[hidden, c])?
    } else {
        scaled_uniform(&[hidden, c], rng)?
    };
    Ok(FfnWeights {
        w1: scaled_uniform(&[c, hidden], rng)?,
        b1: Tensor::zeros(&[hidden])?,
        w2,
        b2: Tensor::zeros(&[c])?,
    })
}

impl WeightBundle<f64> {
    /// Every projection scaled-uniform from `seed`; zero biases, identity norms.
    pub fn random(dims: ModelDims, seed: u64) -> Result<Self, PipelineError> {
        dims.validate()?;
        let c = dims.channels;
        let mut rng = seeded_rng(seed);
        let mut extractor = ReferenceExtractor::seeded(c, dims.sub_blocks, rng.gen())?;
        extractor.window = dims.window;
        let encoder = (0..dims.encoder_layers)
            .map(|_| EncoderWeights::random(c, dims.heads, dims.ffn_hidden, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let decoder = (0..dims.decoder_layers)
            .map(|_| DecoderWeights::random(c, dims.heads, dims.groups, dims.ffn_hidden, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let head = HeadWeights {
            cls_w: scaled_uniform(&[c, 1], &mut rng)?,
            cls_b: Tensor::zeros(&[1])?,
            reg_w: scaled_uniform(&[c, 4], &mut rng)?,
            reg_b: Tensor::full(&[4], dims.template_patch as f64 / 4.0)?,
        };
        Ok(Self {
            dims,
            extractor,
            model: ModelWeights { encoder, decoder, head },
            meta: serde_json::json!({ "construction": "random", "seed": seed }),
        })
    }

    /// Hand-built template-matching weights; see the module docs.
    pub fn reference(dims: ModelDims, seed: u64, params: ReferenceParams) -> Result<Self, PipelineError> {
        dims.validate()?;
        let c = dims.channels;
        let dk = c / dims.heads;
        let d = params.content_channels;
        if dk < d.max(3) {
            return Err(PipelineError::Config(format!(
                "head dimension {dk} is too small for {d} descriptor channels"
            )));
        }
        if !(0.0..1.0).contains(&params.initial_share) {
            return Err(PipelineError::Config(format!(
                "initial_share must lie in [0, 1), got {}",
                params.initial_share
            )));
        }
        let attended = d.min(dk - 1);
        let plan = ChannelPlan::new(c, d, attended)?;
        let mut rng = seeded_rng(seed);

        let blocks = dims.sub_blocks * dims.sub_blocks;
        let mut projection = Tensor::zeros(&[blocks, c])?;
        let scale = 1.0 / (blocks as f64).sqrt();
        for b in 0..blocks {
            let mut row: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0) * scale * 3f64.sqrt()).collect();
            let mean = row.iter().sum::<f64>() / d as f64;
            row.iter_mut().for_each(|v| *v -= mean);
            for (k, &ch) in plan.content.iter().enumerate() {
                projection.row_mut(b)[ch] = row[k];
            }
        }
        let mut bias = Tensor::zeros(&[c])?;
        bias.data_mut()[plan.anchor] = params.anchor;
        let gamma = Tensor::from_fn(&[c], |ch| if plan.is_signal(ch) { params.feature_gain } else { 0.0 })?;
        let extractor = ReferenceExtractor {
            sub_blocks: dims.sub_blocks,
            window: dims.window,
            projection,
            bias,
            norm: LayerNormParams {
                gamma,
                beta: Tensor::zeros(&[c])?,
            },
        };

        let mut encoder = Vec::with_capacity(dims.encoder_layers);
        for _ in 0..dims.encoder_layers {
            encoder.push(EncoderWeights {
                msa: random_mha(c, dims.heads, &mut rng, true)?,
                ffn: random_ffn(c, dims.ffn_hidden, &mut rng, true)?,
                norm1: LayerNormParams::identity(c)?,
                norm2: LayerNormParams::identity(c)?,
            });
        }

        let readout = fit_position_readout(&dims, &plan, &params, &extractor, &encoder, &mut rng)?;

        let groups = dims.groups;
        let gw = c / groups;
        let hpg = dims.heads / groups;
        // With two or more heads per group, even heads score and odd heads
        // localise; a single head does both.
        let scores_in = |h: usize| hpg == 1 || h % 2 == 0;
        let locates_in = |h: usize| hpg == 1 || h % 2 == 1;
        let score_heads = (0..hpg).filter(|&h| scores_in(h)).count();
        let offset_heads = (0..hpg).filter(|&h| locates_in(h)).count();
        let mut decoder = Vec::with_capacity(dims.decoder_layers);
        for _ in 0..dims.decoder_layers {
            let msa = random_mha(c, dims.heads, &mut rng, true)?;
            let ffn = agreement_ffn(c, dims.ffn_hidden, &plan)?;
            let mut wq = Tensor::zeros(&[c, c])?;
            let mut wk_one = Tensor::zeros(&[c, gw])?;
            let mut wv_one = Tensor::zeros(&[c, gw])?;
            for h in 0..hpg {
                let beta = if scores_in(h) {
                    params.match_sharpness
                } else {
                    params.offset_sharpness
                };
                // A localising head with a centre prior gives its last
                // dimension to the prior.
                let prior = locates_in(h) && !scores_in(h) && params.locate_prior != 0.0;
                let used = if prior { d.min(dk - 1) } else { d };
                for (i, &ci) in plan.content.iter().take(used).enumerate() {
                    for j in 0..used {
                        let centring = if i == j { 1.0 } else { 0.0 } - 1.0 / used as f64;
                        let col = h * dk + j;
                        wk_one.row_mut(ci)[col] = beta * centring;
                        for g in 0..groups {
                            wq.row_mut(ci)[g * gw + col] = beta * centring;
                        }
                    }
                }
                if prior {
                    // cos(ω(x − x₀)) + cos(ω(y − y₀)) over the template grid,
                    // from the positional pair whose ω is nearest one radian
                    // per search cell.
                    let col = h * dk + dk - 1;
                    let half = c / 2;
                    let per_search_cell = dims.search_stride() * dims.template_grid as f64 / dims.template_patch as f64;
                    let pair = (0..half / 2)
                        .min_by(|&a, &b| {
                            let da = (pe_frequency(a, half) * per_search_cell - 1.0).abs();
                            let db = (pe_frequency(b, half) * per_search_cell - 1.0).abs();
                            da.total_cmp(&db)
                        })
                        .expect("at least one positional pair");
                    let w = pe_frequency(pair, half);
                    let x0 = (dims.template_grid as f64 - 1.0) / 2.0;
                    let (sin0, cos0) = (w * x0).sin_cos();
                    for base in [2 * pair, half + 2 * pair] {
                        wk_one.row_mut(base)[col] = params.locate_prior * sin0;
                        wk_one.row_mut(base + 1)[col] = params.locate_prior * cos0;
                    }
                    for g in 0..groups {
                        wq.row_mut(plan.reference)[g * gw + col] = 1.0;
                    }
                }
                if scores_in(h) {
                    for (i, &ci) in plan.content.iter().take(attended).enumerate() {
                        wv_one.row_mut(ci)[h * dk + 1 + i] = 1.0;
                    }
                }
                for ch in 0..c {
                    if scores_in(h) {
                        wv_one.row_mut(ch)[h * dk] = readout[0][ch];
                    }
                    if locates_in(h) {
                        wv_one.row_mut(ch)[h * dk + 1] = readout[1][ch];
                        wv_one.row_mut(ch)[h * dk + 2] = readout[2][ch];
                    }
                }
            }
            let mut wo = Tensor::zeros(&[c, c])?;
            for g in 0..groups {
                let weight = group_weight(g, groups, params.initial_share);
                for h in 0..hpg {
                    let base = g * gw + h * dk;
                    if scores_in(h) {
                        let share = weight / score_heads as f64;
                        wo.row_mut(base)[plan.score] = share;
                        for (i, &ch) in plan.attended.iter().enumerate() {
                            wo.row_mut(base + 1 + i)[ch] = share;
                        }
                    }
                    if locates_in(h) {
                        let share = weight / offset_heads as f64;
                        wo.row_mut(base + 1)[plan.offset_x] = share;
                        wo.row_mut(base + 2)[plan.offset_y] = share;
                    }
                }
            }
            let mta = MtaWeights::new(dims.heads, wq, vec![wk_one.clone(); groups], vec![wv_one.clone(); groups], wo)?;
            decoder.push(DecoderWeights {
                msa,
                mta,
                ffn,
                norm1: LayerNormParams::identity(c)?,
                norm2: LayerNormParams::identity(c)?,
                norm3: LayerNormParams::identity(c)?,
            });
        }

        let mut head = HeadWeights::zeros(c)?;
        head.cls_w.data_mut()[plan.score] = params.score_gain;
        head.cls_w.data_mut()[plan.reference] = -params.score_gain;
        head.cls_b.data_mut()[0] = -params.score_gain * params.score_center;
        head.cls_w.data_mut()[plan.agreement] += params.agreement_gain;
        head.cls_w.data_mut()[plan.reference] -= params.agreement_gain;
        let cell_px = dims.template_patch as f64 / dims.template_grid as f64;
        let k = params.offset_gain * cell_px;
        let reg = head.reg_w.data_mut();
        // Columns l, t, r, b; a token matched to offset o votes for centre p − o.
        reg[plan.offset_x * 4] = k;
        reg[plan.reference * 4] = -k;
        reg[plan.offset_y * 4 + 1] = k;
        reg[plan.reference * 4 + 1] -= k;
        reg[plan.offset_x * 4 + 2] = -k;
        reg[plan.reference * 4 + 2] += k;
        reg[plan.offset_y * 4 + 3] = -k;
        reg[plan.reference * 4 + 3] += k;
        let half = dims.template_patch as f64 / 4.0;
        head.reg_b = Tensor::full(&[4], half)?;

        Ok(Self {
            dims,
            extractor,
            model: ModelWeights { encoder, decoder, head },
            meta: serde_json::json!({
                "construction": "reference",
                "seed": seed,
                "params": params,
            }),
        })
    }
}

/// Feed-forward block writing `Σ_i |q_i + m_i| − |q_i − m_i|` over the
/// leading descriptor channels `q` and the attended content `m`, scaled by
/// `1 / len`, onto the agreement channel. The attended and agreement channels
/// sit on cosine channels that read as the reference channel plus signal.
fn agreement_ffn(c: usize, hidden: usize, plan: &ChannelPlan) -> Result<FfnWeights<f64>, PipelineError> {
    let n = plan.attended.len();
    if hidden < 4 * n {
        return Err(PipelineError::Config(format!(
            "{hidden} hidden units cannot compare {n} descriptor channels"
        )));
    }
    let mut w1 = Tensor::zeros(&[c, hidden])?;
    let mut w2 = Tensor::zeros(&[hidden, c])?;
    let out = 1.0 / n.max(1) as f64;
    for (i, (&q, &m)) in plan.content.iter().zip(&plan.attended).enumerate() {
        // (sign on q, sign on m, output sign)
        for (k, (sq, sm, so)) in [(1.0, 1.0, 1.0), (-1.0, -1.0, 1.0), (1.0, -1.0, -1.0), (-1.0, 1.0, -1.0)]
            .into_iter()
            .enumerate()
        {
            let u = 4 * i + k;
            w1.row_mut(q)[u] += sq;
            w1.row_mut(m)[u] += sm;
            w1.row_mut(plan.reference)[u] -= sm;
            w2.row_mut(u)[plan.agreement] = so * out;
        }
    }
    Ok(FfnWeights {
        w1,
        b1: Tensor::zeros(&[hidden])?,
        w2,
        b2: Tensor::zeros(&[c])?,
    })
}

/// Readout vectors (centrality, x offset, y offset) over the positional
/// channels of template encodings, fitted by minimum-norm least squares on
/// encodings of random-texture templates. Rows are centred first, so the
/// readouts ignore any per-token shift.
fn fit_position_readout(
    dims: &ModelDims,
    plan: &ChannelPlan,
    params: &ReferenceParams,
    extractor: &ReferenceExtractor,
    encoder: &[EncoderWeights<f64>],
    rng: &mut SeededRng,
) -> Result<[Vec<f64>; 3], PipelineError> {
    let c = dims.channels;
    let g = dims.template_grid;
    let pe = sinusoidal_pe::<f64>(g, g, c)?;
    let cols: Vec<usize> = (0..c).filter(|&ch| !plan.is_signal(ch)).collect();
    let samples = 4;
    let n = samples * g * g;
    let mut design = DMatrix::<f64>::zeros(n, cols.len());
    let mut target = DMatrix::<f64>::zeros(n, 3);
    let centre = (g as f64 - 1.0) / 2.0;
    for s in 0..samples {
        let patch = GrayImage::from_fn(dims.template_patch, dims.template_patch, |_, _| rng.gen_range(0.0..255.0))?;
        let f = FeatureExtractor::<f64>::extract(extractor, &patch, g)?;
        let enc = encode_template(&f, &pe, encoder)?;
        for tok in 0..g * g {
            let r = s * g * g + tok;
            let row = enc.row(tok);
            let m = cols.iter().map(|&ch| row[ch]).sum::<f64>() / cols.len() as f64;
            for (j, &ch) in cols.iter().enumerate() {
                design[(r, j)] = row[ch] - m;
            }
            let (gy, gx) = ((tok / g) as f64, (tok % g) as f64);
            let (dx, dy) = (gx - centre, gy - centre);
            target[(r, 0)] = (-(dx * dx + dy * dy) / (2.0 * params.center_sigma.powi(2))).exp();
            target[(r, 1)] = dx;
            target[(r, 2)] = dy;
        }
    }
    let solved = design
        .svd(true, true)
        .solve(&target, 1e-8)
        .map_err(|e| PipelineError::Config(format!("readout fit failed: {e}")))?;
    let mut out = [vec![0.0; c], vec![0.0; c], vec![0.0; c]];
    for (o, readout) in out.iter_mut().enumerate() {
        let mean = (0..cols.len()).map(|j| solved[(j, o)]).sum::<f64>() / cols.len() as f64;
        for (j, &ch) in cols.iter().enumerate() {
            readout[ch] = solved[(j, o)] - mean;
        }
    }
    Ok(out)
}

impl<T: Scalar> WeightBundle<T> {
    pub fn cast<U: Scalar>(&self) -> Result<WeightBundle<U>, PipelineError> {
        Ok(WeightBundle {
            dims: self.dims,
            extractor: self.extractor.clone(),
            model: self.model.cast(&self.dims)?,
            meta: self.meta.clone(),
        })
    }

    fn extractor_named(&self) -> Vec<Named<f64>> {
        let mut out = Vec::new();
        let e = &self.extractor;
        named(&mut out, "extractor.projection".into(), "cell block-mean projection", &e.projection);
        named(&mut out, "extractor.bias".into(), "cell projection bias", &e.bias);
        push_norm(&mut out, "extractor.norm", &e.norm);
        out
    }

    /// Manifest bytes and tensor files, keyed by file name.
    pub fn to_files(&self) -> (Vec<u8>, BTreeMap<String, Vec<u8>>) {
        let mut files = BTreeMap::new();
        let mut entries = Vec::new();
        let mut add = |name: String, role: String, bytes: Vec<u8>, shape: Vec<usize>| {
            let file = format!("{name}.bact");
            files.insert(file.clone(), bytes);
            entries.push(TensorEntry { name, role, file, shape });
        };
        for n in self.extractor_named() {
            let shape = n.tensor.shape().to_vec();
            add(n.name, n.role, encode_tensor(&n.tensor), shape);
        }
        for n in self.model.to_named() {
            let shape = n.tensor.shape().to_vec();
            add(n.name, n.role, encode_tensor(&n.tensor), shape);
        }
        let manifest = BundleManifest {
            format: BUNDLE_FORMAT.into(),
            version: BUNDLE_VERSION,
            dims: self.dims,
            extractor: super::extractor::REFERENCE_EXTRACTOR_ID.into(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serialises");
        bytes.push(b'\n');
        (bytes, files)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        let (manifest, files) = self.to_files();
        let p = dir.join(BUNDLE_MANIFEST);
        fs::write(&p, manifest).map_err(|e| FormatError::io(&p, e))?;
        for (name, bytes) in files {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| FormatError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let dir = dir.as_ref();
        let p = dir.join(BUNDLE_MANIFEST);
        let bytes = fs::read(&p).map_err(|e| FormatError::io(&p, e))?;
        let manifest: BundleManifest = serde_json::from_slice(&bytes).map_err(|e| FormatError::json(&p, e))?;
        if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
            return Err(FormatError::Invalid(format!(
                "{}: not a version-{BUNDLE_VERSION} weight bundle",
                p.display()
            ))
            .into());
        }
        manifest.dims.validate()?;
        let mut ext = BTreeMap::new();
        let mut model = BTreeMap::new();
        for e in &manifest.tensors {
            if e.file.contains('/') || e.file.contains('\\') || e.file.contains("..") {
                return Err(FormatError::Invalid(format!("tensor file {} escapes the bundle", e.file)).into());
            }
            let fp = dir.join(&e.file);
            let data = fs::read(&fp).map_err(|err| FormatError::io(&fp, err))?;
            if e.name.starts_with("extractor.") {
                ext.insert(e.name.clone(), decode_tensor::<f64>(&data)?);
            } else {
                let t = decode_tensor::<T>(&data)?;
                if t.shape() != e.shape.as_slice() {
                    return Err(FormatError::Invalid(format!(
                        "{}: shape {:?} does not match manifest {:?}",
                        fp.display(),
                        t.shape(),
                        e.shape
                    ))
                    .into());
                }
                model.insert(e.name.clone(), t);
            }
        }
        let mut ext = TensorStore { map: ext };
        let projection = ext.take("extractor.projection")?;
        if projection.rows() != manifest.dims.sub_blocks.pow(2) || projection.cols() != manifest.dims.channels {
            return Err(FormatError::Invalid("extractor projection does not match the model dimensions".into()).into());
        }
        let extractor = ReferenceExtractor {
            sub_blocks: manifest.dims.sub_blocks,
            window: manifest.dims.window,
            projection,
            bias: ext.take("extractor.bias")?,
            norm: ext.norm("extractor.norm")?,
        };
        let mut store = TensorStore { map: model };
        let model = ModelWeights::from_store(&manifest.dims, &mut store)?;
        if let Some(extra) = store.map.keys().next() {
            return Err(FormatError::Invalid(format!("unexpected tensor {extra} in weight bundle")).into());
        }
        Ok(Self {
            dims: manifest.dims,
            extractor,
            model,
            meta: manifest.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::TrackerConfig;

    fn small_dims() -> ModelDims {
        ModelDims {
            channels: 64,
            heads: 2,
            groups: 2,
            ffn_hidden: 64,
            template_grid: 4,
            search_grid: 6,
            template_patch: 20,
            search_patch: 36,
            sub_blocks: 2,
            ..TrackerConfig::desk().dims()
        }
    }

    #[test]
    fn channel_plan_is_disjoint() {
        let p = ChannelPlan::new(128, 16, 15).unwrap();
        let mut all = p.content.clone();
        all.extend([p.anchor, p.score, p.offset_x, p.offset_y, p.reference, p.agreement]);
        all.extend(&p.attended);
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        assert!(all.iter().all(|&ch| ch < 128));
        assert!(ChannelPlan::new(16, 16, 0).is_err());
    }

    #[test]
    fn bundle_round_trips_byte_identically() {
        let b = WeightBundle::reference(small_dims(), 3, ReferenceParams { content_channels: 8, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        b.write_dir(dir.path()).unwrap();
        let back = WeightBundle::<f64>::read_dir(dir.path()).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.to_files(), b.to_files());
        let narrow = WeightBundle::<f32>::read_dir(dir.path()).unwrap();
        assert_eq!(narrow.model, b.model.cast::<f32>(&b.dims).unwrap());
    }

    #[test]
    fn reference_rejects_bad_params() {
        let d = small_dims();
        assert!(WeightBundle::reference(d, 0, ReferenceParams { content_channels: 40, ..Default::default() }).is_err());
        let share = ReferenceParams { content_channels: 8, initial_share: 1.0, ..Default::default() };
        assert!(WeightBundle::reference(d, 0, share).is_err());
    }

    #[test]
    fn group_weights_sum_to_one() {
        for (groups, share) in [(1, 0.0), (4, 0.0), (4, 0.55), (2, 0.3)] {
            let total: f64 = (0..groups).map(|g| group_weight(g, groups, share)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shipped_bundle_regenerates() {
        let cfg = TrackerConfig::desk();
        let fresh = WeightBundle::reference(cfg.dims(), cfg.seed, ReferenceParams::default()).unwrap();
        let shipped = WeightBundle::<f64>::read_dir(shipped_desk_weights()).unwrap();
        assert_eq!(shipped.dims, fresh.dims);
        assert_eq!(shipped.meta, fresh.meta);
        let (a, b) = (shipped.model.to_named(), fresh.model.to_named());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.name, y.name);
            assert!(x.tensor.sub(&y.tensor).unwrap().max_abs() <= 1e-9, "{}", x.name);
        }
        assert_eq!(shipped.extractor.projection, fresh.extractor.projection);
    }

    #[test]
    fn random_bundle_is_seeded() {
        let a = WeightBundle::random(small_dims(), 5).unwrap();
        assert_eq!(a, WeightBundle::random(small_dims(), 5).unwrap());
        assert_ne!(a.model, WeightBundle::random(small_dims(), 6).unwrap().model);
    }
}
