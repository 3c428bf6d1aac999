//! Tracker configuration, state and the per-frame loop.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::extractor::{FeatureExtractor, REFERENCE_EXTRACTOR_ID};
use super::geometry::{crop_patch, crop_search, BBox};
use super::head::{argmax, cell_center, predict, window_penalty};
use super::weights::{ModelDims, ModelWeights, ReferenceParams, WeightBundle};
use super::PipelineError;
use crate::appearance::{
    AdMode, AppearanceCollection, AppearanceDiscriminator, AppearanceError, Decision, SsimConstants, TemplateEntry,
    UpdatePolicy,
};
use crate::image::GrayImage;
use crate::mtt::{decode, encode_template, EncodedCollection};
use crate::numerics::{sinusoidal_pe, PositionalEncoding, Scalar};

/// Every tunable of one tracker. Serialised flat, one key per field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Temporal template capacity.
    pub n_templates: usize,
    pub groups: usize,
    pub heads: usize,
    pub channels: usize,
    pub template_patch: usize,
    pub search_patch: usize,
    pub template_grid: usize,
    pub search_grid: usize,
    pub ffn_hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub sub_blocks: usize,
    /// Extractor window side in patch pixels; 0 uses the cell.
    pub window: usize,
    pub tau0: f64,
    pub w1: f64,
    pub w2: f64,
    pub tau_si: f64,
    pub window_weight: f64,
    pub context_amount: f64,
    /// Largest per-frame growth or shrink factor of the box extent; `None`
    /// disables clipping.
    pub scale_clip: Option<f64>,
    pub extractor: String,
    /// Weight bundle directory; `None` builds reference weights from `seed`.
    pub weights: Option<PathBuf>,
    pub seed: u64,
    pub ad_mode: AdMode,
    /// Dynamic range of pixel values, used by the SSIM constants.
    pub pixel_range: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            n_templates: 3,
            groups: 4,
            heads: 8,
            channels: 256,
            template_patch: 127,
            search_patch: 287,
            template_grid: 6,
            search_grid: 26,
            ffn_hidden: 1024,
            encoder_layers: 1,
            decoder_layers: 1,
            sub_blocks: 3,
            window: 0,
            tau0: 1.8,
            w1: 0.95,
            w2: 0.9,
            tau_si: 0.42,
            window_weight: 0.49,
            context_amount: 0.5,
            scale_clip: Some(1.5),
            extractor: REFERENCE_EXTRACTOR_ID.to_string(),
            weights: None,
            seed: 0,
            ad_mode: AdMode::Full,
            pixel_range: 255.0,
        }
    }
}

impl TrackerConfig {
    /// Desk-scale model: 10 px search cells, 5 px template cells, and
    /// 30 px descriptor windows on both.
    pub fn desk() -> Self {
        Self {
            channels: 128,
            template_patch: 60,
            search_patch: 140,
            template_grid: 12,
            search_grid: 14,
            ffn_hidden: 256,
            sub_blocks: 4,
            window: 30,
            ..Self::default()
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            channels: self.channels,
            heads: self.heads,
            groups: self.groups,
            ffn_hidden: self.ffn_hidden,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            template_grid: self.template_grid,
            search_grid: self.search_grid,
            template_patch: self.template_patch,
            search_patch: self.search_patch,
            sub_blocks: self.sub_blocks,
            window: self.window,
        }
    }

    pub fn policy(&self) -> Result<UpdatePolicy, PipelineError> {
        Ok(UpdatePolicy::new(self.tau0, self.w1, self.w2, self.tau_si)?)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.dims().validate()?;
        self.policy()?;
        if self.groups < self.n_templates + 1 {
            return Err(PipelineError::Config(format!(
                "{} head groups cannot hold {} temporal templates plus the initial one",
                self.groups, self.n_templates
            )));
        }
        if self.extractor != REFERENCE_EXTRACTOR_ID {
            return Err(PipelineError::Config(format!("unknown extractor `{}`", self.extractor)));
        }
        if !(self.context_amount.is_finite() && self.context_amount >= 0.0) {
            return Err(PipelineError::Config(format!(
                "context_amount must be non-negative, got {}",
                self.context_amount
            )));
        }
        if let Some(c) = self.scale_clip {
            if !(c.is_finite() && c >= 1.0) {
                return Err(PipelineError::Config(format!("scale_clip must be at least 1, got {c}")));
            }
        }
        if !(self.pixel_range.is_finite() && self.pixel_range > 0.0) {
            return Err(PipelineError::Config(format!("pixel_range must be positive, got {}", self.pixel_range)));
        }
        if !(0.0..=1.0).contains(&self.window_weight) {
            return Err(PipelineError::Config(format!(
                "window weight {} outside [0, 1]",
                self.window_weight
            )));
        }
        Ok(())
    }

    /// Loads the configured bundle, or builds reference weights from `seed`.
    pub fn load_bundle(&self) -> Result<WeightBundle<f64>, PipelineError> {
        match &self.weights {
            Some(dir) => WeightBundle::read_dir(dir),
            None => WeightBundle::reference(self.dims(), self.seed, ReferenceParams::default()),
        }
    }
}

/// Weights, extractor and positional tables shared by any number of trackers.
pub struct TrackerModel<T: Scalar = f64> {
    pub dims: ModelDims,
    pub extractor: Arc<dyn FeatureExtractor<T>>,
    pub weights: ModelWeights<T>,
    pe_template: PositionalEncoding<T>,
    pe_search: PositionalEncoding<T>,
}

impl<T: Scalar> TrackerModel<T> {
    pub fn new(
        dims: ModelDims,
        extractor: Arc<dyn FeatureExtractor<T>>,
        weights: ModelWeights<T>,
    ) -> Result<Self, PipelineError> {
        dims.validate()?;
        if extractor.channels() != dims.channels {
            return Err(PipelineError::Config(format!(
                "extractor emits {} channels, model expects {}",
                extractor.channels(),
                dims.channels
            )));
        }
        Ok(Self {
            dims,
            extractor,
            weights,
            pe_template: sinusoidal_pe(dims.template_grid, dims.template_grid, dims.channels)?,
            pe_search: sinusoidal_pe(dims.search_grid, dims.search_grid, dims.channels)?,
        })
    }

    pub fn from_bundle(bundle: &WeightBundle<f64>) -> Result<Self, PipelineError> {
        Self::new(
            bundle.dims,
            Arc::new(bundle.extractor.clone()),
            bundle.model.cast(&bundle.dims)?,
        )
    }

    pub fn encode(&self, features: &crate::numerics::FeatureMap<T>) -> Result<crate::numerics::Tensor<T>, PipelineError> {
        Ok(encode_template(features, &self.pe_template, &self.weights.encoder)?)
    }
}

/// One telemetry line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Post-penalty peak score; absent for the initial frame.
    pub score: Option<f64>,
    pub tau: Option<f64>,
    pub ssim: Option<f64>,
    pub decision: Decision,
}

/// Accumulated wall-clock time per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub frames: usize,
    pub extract: Duration,
    pub encode: Duration,
    pub decode: Duration,
    pub predict: Duration,
    pub ad: Duration,
    pub total: Duration,
}

impl StageTimings {
    pub fn stages_sum(&self) -> Duration {
        self.extract + self.encode + self.decode + self.predict + self.ad
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackState<T: Scalar = f64> {
    pub bbox: BBox,
    pub t: usize,
    pub collection: AppearanceCollection<T>,
}

pub struct Tracker<T: Scalar = f64> {
    config: TrackerConfig,
    model: Arc<TrackerModel<T>>,
    ad: AppearanceDiscriminator,
    state: Option<TrackState<T>>,
    records: Vec<FrameRecord>,
    timings: StageTimings,
}

impl<T: Scalar> Tracker<T> {
    pub fn new(config: TrackerConfig, model: Arc<TrackerModel<T>>) -> Result<Self, PipelineError> {
        config.validate()?;
        if config.dims() != model.dims {
            return Err(PipelineError::Config(format!(
                "configured model dimensions {:?} differ from the weights' {:?}",
                config.dims(),
                model.dims
            )));
        }
        let ad = AppearanceDiscriminator::new(
            config.policy()?,
            SsimConstants::for_range(config.pixel_range),
            config.ad_mode,
        )?;
        Ok(Self {
            config,
            model,
            ad,
            state: None,
            records: Vec::new(),
            timings: StageTimings::default(),
        })
    }

    /// Builds the model named by `config` and a tracker on top of it.
    pub fn from_config(config: TrackerConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let model = TrackerModel::from_bundle(&config.load_bundle()?)?;
        Self::new(config, Arc::new(model))
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn state(&self) -> Option<&TrackState<T>> {
        self.state.as_ref()
    }

    pub fn telemetry(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn timings(&self) -> StageTimings {
        self.timings
    }

    /// Starts a track from the annotated first frame; resets any prior state.
    pub fn init(&mut self, frame: &GrayImage, bbox: BBox) -> Result<FrameRecord, PipelineError> {
        bbox.validate()?;
        if !bbox.within(frame.width(), frame.height()) {
            return Err(PipelineError::InvalidBox(bbox));
        }
        let cfg = &self.config;
        let patch = crop_patch(frame, &bbox, cfg.context_amount, cfg.template_patch)?;
        let features = self.model.extractor.extract(&patch, cfg.template_grid)?;
        let mut entry = TemplateEntry::new(patch, features, None, 0);
        entry.encoding = Some(self.model.encode(&entry.features)?);
        self.ad.policy.warmup_scores.clear();
        self.state = Some(TrackState {
            bbox,
            t: 0,
            collection: AppearanceCollection::new(entry, cfg.n_templates),
        });
        self.records.clear();
        self.timings = StageTimings::default();
        let rec = FrameRecord {
            t: 0,
            bbox: bbox.to_array(),
            score: None,
            tau: None,
            ssim: None,
            decision: Decision::None,
        };
        self.records.push(rec.clone());
        Ok(rec)
    }

    /// Localises the target in the next frame and gates a template update.
    pub fn track(&mut self, frame: &GrayImage) -> Result<FrameRecord, PipelineError> {
        let start = Instant::now();
        let cfg = &self.config;
        let model = &self.model;
        let state = self.state.as_mut().ok_or(PipelineError::NotInitialized)?;
        let t = state.t + 1;
        let prev = state.bbox;

        let stage = Instant::now();
        let (search, side) = crop_search(frame, &prev, cfg.context_amount, cfg.template_patch, cfg.search_patch)?;
        let f_x = model.extractor.extract(&search, cfg.search_grid)?;
        self.timings.extract += stage.elapsed();

        let stage = Instant::now();
        let collection = &mut state.collection;
        if collection.initial().encoding.is_none() {
            let e = model.encode(&collection.initial().features)?;
            collection.initial_mut().encoding = Some(e);
        }
        for entry in collection.temporal_mut() {
            if entry.encoding.is_none() {
                entry.encoding = Some(model.encode(&entry.features)?);
            }
        }
        let encodings = collection
            .slots(cfg.groups)?
            .into_iter()
            .map(|e| e.encoding.clone().expect("encodings filled above"))
            .collect();
        let enc = EncodedCollection::new(encodings)?;
        self.timings.encode += stage.elapsed();

        let stage = Instant::now();
        let x_dec = decode(&f_x, &model.pe_search, &enc, &model.weights.decoder)?;
        self.timings.decode += stage.elapsed();

        let stage = Instant::now();
        let g = cfg.search_grid;
        let pred = predict(&x_dec, &model.weights.head, g, g)?;
        let penalized = window_penalty(&pred.scores, cfg.window_weight)?;
        let (gy, gx, score) = argmax(&penalized);
        let bbox = self.locate(&prev, side, frame, gx, gy, pred.ltrb(gy, gx))?;
        self.timings.predict += stage.elapsed();

        let stage = Instant::now();
        let candidate = crop_patch(frame, &bbox, cfg.context_amount, cfg.template_patch)?;
        let extractor = &model.extractor;
        let grid = cfg.template_grid;
        let state = self.state.as_mut().expect("checked above");
        let outcome = self.ad.consider_update(t, candidate, score, &mut state.collection, |p| {
            extractor.extract(p, grid).map_err(|e| match e {
                PipelineError::Tensor(e) => AppearanceError::Tensor(e),
                other => AppearanceError::Policy(other.to_string()),
            })
        })?;
        self.timings.ad += stage.elapsed();

        state.t = t;
        state.bbox = bbox;
        let rec = FrameRecord {
            t,
            bbox: bbox.to_array(),
            score: Some(score),
            tau: outcome.tau,
            ssim: outcome.ssim,
            decision: outcome.decision,
        };
        self.records.push(rec.clone());
        self.timings.frames += 1;
        self.timings.total += start.elapsed();
        Ok(rec)
    }

    /// One-pass run: initialise on `frames[0]` with `first`, then track the rest.
    pub fn run(&mut self, frames: &[GrayImage], first: BBox) -> Result<&[FrameRecord], PipelineError> {
        let (head, rest) = frames
            .split_first()
            .ok_or_else(|| PipelineError::Config("sequence has no frames".into()))?;
        self.init(head, first)?;
        for f in rest {
            self.track(f)?;
        }
        Ok(&self.records)
    }

    /// Maps side distances at search cell `(gx, gy)` to a frame box, with
    /// the extent change clipped and the centre kept inside the frame.
    fn locate(
        &self,
        prev: &BBox,
        side: f64,
        frame: &GrayImage,
        gx: usize,
        gy: usize,
        ltrb: [f64; 4],
    ) -> Result<BBox, PipelineError> {
        let cfg = &self.config;
        let stride = cfg.search_patch as f64 / cfg.search_grid as f64;
        let scale = side / cfg.search_patch as f64;
        let half = cfg.search_patch as f64 / 2.0;
        let (px, py) = (cell_center(gx, stride), cell_center(gy, stride));
        let cx = prev.cx + (px + (ltrb[2] - ltrb[0]) / 2.0 - half) * scale;
        let cy = prev.cy + (py + (ltrb[3] - ltrb[1]) / 2.0 - half) * scale;
        let mut w = (ltrb[0] + ltrb[2]) * scale;
        let mut h = (ltrb[1] + ltrb[3]) * scale;
        match cfg.scale_clip {
            Some(c) => {
                w = w.clamp(prev.w / c, prev.w * c);
                h = h.clamp(prev.h / c, prev.h * c);
            }
            None => {
                if !(w > 0.0 && w.is_finite()) {
                    w = prev.w;
                }
                if !(h > 0.0 && h.is_finite()) {
                    h = prev.h;
                }
            }
        }
        let cx = cx.clamp(0.0, frame.width() as f64);
        let cy = cy.clamp(0.0, frame.height() as f64);
        BBox::new(cx, cy, w, h)
    }
}
