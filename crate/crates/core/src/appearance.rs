//! Appearance collection and the discriminator deciding which tracked frames
//! become temporal templates.
//!
//! Admission needs two things. The frame's confidence must beat an adaptive
//! threshold (reliability), and its patch must differ enough from the newest
//! temporal template by global SSIM (diversity). The threshold for frame `t` is
//!
//! ```text
//! τ_t = τ₀                              t ≤ 5
//! τ_t = w₁ · mean(s₁ … s₅)              t > 5, n_t < N
//! τ_t = w₂ · mean(scores of residents)  t > 5, n_t ≥ N
//! ```
//!
//! where `n_t` is the current temporal length and residents are the temporal
//! entries now in the collection. The temporal part is a FIFO of capacity
//! `N`; the initial template is never evicted.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::image::GrayImage;
use crate::numerics::codec::{decode_tensor, encode_tensor, peek_precision};
use crate::numerics::{FeatureMap, FormatError, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AppearanceError {
    #[error("threshold for frame {t} needs {needed} warm-up scores, only {recorded} recorded")]
    MissingWarmup { t: usize, needed: usize, recorded: usize },
    #[error("no resident temporal scores to average")]
    NoResidentScores,
    #[error("non-finite confidence score {0}")]
    NonFiniteScore(f64),
    #[error("template frame index {new} does not follow {last}")]
    FrameOrder { last: usize, new: usize },
    #[error("patch shape {got:?} differs from collection patch shape {expected:?}")]
    PatchShape { expected: [usize; 2], got: [usize; 2] },
    #[error("invalid update policy: {0}")]
    Policy(String),
    #[error("{count} views requested but the collection holds {held} templates")]
    TooFewSlots { count: usize, held: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One collection slot.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateEntry<T = f64> {
    pub patch: GrayImage,
    pub features: FeatureMap<T>,
    /// Confidence at admission; `None` for the initial template.
    pub score: Option<f64>,
    pub frame_index: usize,
    /// Encoder output for `features`, filled once by the tracker.
    pub encoding: Option<Tensor<T>>,
}

impl<T: Scalar> TemplateEntry<T> {
    pub fn new(patch: GrayImage, features: FeatureMap<T>, score: Option<f64>, frame_index: usize) -> Self {
        Self {
            patch,
            features,
            score,
            frame_index,
            encoding: None,
        }
    }
}

fn patch_dims(p: &GrayImage) -> [usize; 2] {
    [p.height(), p.width()]
}

/// `z₀` plus a FIFO of at most `capacity` temporal templates.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceCollection<T = f64> {
    initial: TemplateEntry<T>,
    temporal: VecDeque<TemplateEntry<T>>,
    capacity: usize,
}

impl<T: Scalar> AppearanceCollection<T> {
    pub fn new(initial: TemplateEntry<T>, capacity: usize) -> Self {
        Self {
            initial,
            temporal: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn initial(&self) -> &TemplateEntry<T> {
        &self.initial
    }

    pub fn initial_mut(&mut self) -> &mut TemplateEntry<T> {
        &mut self.initial
    }

    /// Temporal entries, oldest first.
    pub fn temporal(&self) -> impl ExactSizeIterator<Item = &TemplateEntry<T>> {
        self.temporal.iter()
    }

    pub fn temporal_mut(&mut self) -> impl ExactSizeIterator<Item = &mut TemplateEntry<T>> {
        self.temporal.iter_mut()
    }

    pub fn temporal_len(&self) -> usize {
        self.temporal.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Most recent temporal entry, or `z₀` when the temporal list is empty.
    pub fn latest(&self) -> &TemplateEntry<T> {
        self.temporal.back().unwrap_or(&self.initial)
    }

    pub fn temporal_scores(&self) -> Vec<f64> {
        self.temporal.iter().filter_map(|e| e.score).collect()
    }

    /// Appends a temporal entry, evicting the oldest one when full.
    pub fn push(&mut self, entry: TemplateEntry<T>) -> Result<Option<TemplateEntry<T>>, AppearanceError> {
        if self.capacity == 0 {
            return Ok(None);
        }
        let last = self.latest().frame_index;
        if !self.temporal.is_empty() && entry.frame_index <= last {
            return Err(AppearanceError::FrameOrder {
                last,
                new: entry.frame_index,
            });
        }
        if !entry.patch.same_shape(&self.initial.patch) {
            return Err(AppearanceError::PatchShape {
                expected: patch_dims(&self.initial.patch),
                got: patch_dims(&entry.patch),
            });
        }
        let evicted = if self.temporal.len() == self.capacity {
            self.temporal.pop_front()
        } else {
            None
        };
        self.temporal.push_back(entry);
        Ok(evicted)
    }

    /// Exactly `count` slots: `z₀`, the temporal entries in FIFO order, then
    /// copies of `z₀` for the unfilled remainder.
    pub fn slots(&self, count: usize) -> Result<Vec<&TemplateEntry<T>>, AppearanceError> {
        let held = 1 + self.temporal.len();
        if count < held {
            return Err(AppearanceError::TooFewSlots { count, held });
        }
        let mut out = Vec::with_capacity(count);
        out.push(&self.initial);
        out.extend(self.temporal.iter());
        out.resize(count, &self.initial);
        Ok(out)
    }
}

/// The `capacity + 1` feature maps handed to the transformer.
pub fn collection_views<T: Scalar>(collection: &AppearanceCollection<T>) -> Vec<&FeatureMap<T>> {
    collection
        .slots(collection.capacity() + 1)
        .expect("temporal length never exceeds capacity")
        .into_iter()
        .map(|e| &e.features)
        .collect()
}

/// Threshold parameters plus the warm-up scores `s₁ … s₅`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdatePolicy {
    pub tau0: f64,
    pub w1: f64,
    pub w2: f64,
    pub tau_si: f64,
    pub warmup_frames: usize,
    #[serde(default)]
    pub warmup_scores: Vec<f64>,
}

impl Default for UpdatePolicy {
    fn default() -> Self {
        Self {
            tau0: 1.8,
            w1: 0.95,
            w2: 0.9,
            tau_si: 0.42,
            warmup_frames: 5,
            warmup_scores: Vec::new(),
        }
    }
}

impl UpdatePolicy {
    pub fn new(tau0: f64, w1: f64, w2: f64, tau_si: f64) -> Result<Self, AppearanceError> {
        let p = Self {
            tau0,
            w1,
            w2,
            tau_si,
            ..Self::default()
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AppearanceError> {
        for (name, v) in [("tau0", self.tau0), ("w1", self.w1), ("w2", self.w2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(AppearanceError::Policy(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tau_si > 0.0 && self.tau_si <= 1.0) {
            return Err(AppearanceError::Policy(format!(
                "tau_si must lie in (0, 1], got {}",
                self.tau_si
            )));
        }
        if self.warmup_frames == 0 {
            return Err(AppearanceError::Policy("warmup_frames must be positive".into()));
        }
        Ok(())
    }

    /// Records `s_t` for warm-up frames `1..=warmup_frames`.
    pub fn observe(&mut self, t: usize, score: f64) {
        if t >= 1 && t <= self.warmup_frames && self.warmup_scores.len() < self.warmup_frames {
            self.warmup_scores.push(score);
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Adaptive confidence threshold `τ_t`.
pub fn compute_threshold<T: Scalar>(
    t: usize,
    policy: &UpdatePolicy,
    collection: &AppearanceCollection<T>,
) -> Result<f64, AppearanceError> {
    if t <= policy.warmup_frames {
        return Ok(policy.tau0);
    }
    if policy.warmup_scores.len() < policy.warmup_frames {
        return Err(AppearanceError::MissingWarmup {
            t,
            needed: policy.warmup_frames,
            recorded: policy.warmup_scores.len(),
        });
    }
    if collection.temporal_len() < collection.capacity() {
        return Ok(policy.w1 * mean(&policy.warmup_scores));
    }
    let resident = collection.temporal_scores();
    if resident.is_empty() {
        return Err(AppearanceError::NoResidentScores);
    }
    Ok(policy.w2 * mean(&resident))
}

/// SSIM stabilisers for pixel range `L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub range: f64,
}

impl SsimConstants {
    /// `c1 = (0.01 L)²`, `c2 = (0.03 L)²`.
    pub fn for_range(range: f64) -> Self {
        Self {
            c1: (0.01 * range).powi(2),
            c2: (0.03 * range).powi(2),
            range,
        }
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        Self::for_range(255.0)
    }
}

/// Global (whole-patch) SSIM with biased moments.
///
/// `(2 μa μb + c1)(2 σab + c2) / ((μa² + μb² + c1)(σa² + σb² + c2))`
pub fn ssim(a: &GrayImage, b: &GrayImage, k: &SsimConstants) -> Result<f64, AppearanceError> {
    if !a.same_shape(b) {
        return Err(AppearanceError::PatchShape {
            expected: patch_dims(a),
            got: patch_dims(b),
        });
    }
    if a.len() < 2 {
        return Err(TensorError::InvalidShape {
            shape: patch_dims(a).to_vec(),
            reason: "ssim needs at least two pixels",
        }
        .into());
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.mean(), b.mean());
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    Ok((2.0 * ma * mb + k.c1) * (2.0 * cov + k.c2) / ((ma * ma + mb * mb + k.c1) * (va + vb + k.c2)))
}

/// Which constraints gate admission.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdMode {
    #[default]
    Full,
    #[serde(alias = "au")]
    AlwaysUpdate,
    #[serde(alias = "rp")]
    ReliabilityOnly,
    #[serde(alias = "dp")]
    DiversityOnly,
}

impl AdMode {
    pub fn name(self) -> &'static str {
        match self {
            AdMode::Full => "full",
            AdMode::AlwaysUpdate => "always-update",
            AdMode::ReliabilityOnly => "reliability-only",
            AdMode::DiversityOnly => "diversity-only",
        }
    }
}

impl fmt::Display for AdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" | "ac" => Ok(AdMode::Full),
            "au" | "always-update" => Ok(AdMode::AlwaysUpdate),
            "rp" | "reliability-only" => Ok(AdMode::ReliabilityOnly),
            "dp" | "diversity-only" => Ok(AdMode::DiversityOnly),
            other => Err(format!("unknown appearance-discriminator mode '{other}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Admitted,
    RejectedReliability,
    RejectedDiversity,
    /// No decision taken (initial frame, or a collection without temporal slots).
    None,
}

impl Decision {
    pub fn name(self) -> &'static str {
        match self {
            Decision::Admitted => "admitted",
            Decision::RejectedReliability => "rejected-reliability",
            Decision::RejectedDiversity => "rejected-diversity",
            Decision::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome<T = f64> {
    pub decision: Decision,
    pub tau: Option<f64>,
    /// SSIM against the newest template, when it was evaluated.
    pub ssim: Option<f64>,
    pub evicted: Option<TemplateEntry<T>>,
}

/// Update policy state plus gating mode.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceDiscriminator {
    pub policy: UpdatePolicy,
    pub ssim: SsimConstants,
    pub mode: AdMode,
}

impl AppearanceDiscriminator {
    pub fn new(policy: UpdatePolicy, ssim: SsimConstants, mode: AdMode) -> Result<Self, AppearanceError> {
        policy.validate()?;
        Ok(Self { policy, ssim, mode })
    }

    /// Gates frame `t` with confidence `score` and patch `patch`. `features`
    /// runs only when the frame is admitted.
    pub fn consider_update<T, F>(
        &mut self,
        t: usize,
        patch: GrayImage,
        score: f64,
        collection: &mut AppearanceCollection<T>,
        features: F,
    ) -> Result<UpdateOutcome<T>, AppearanceError>
    where
        T: Scalar,
        F: FnOnce(&GrayImage) -> Result<FeatureMap<T>, AppearanceError>,
    {
        let k = self.ssim;
        let reference = collection.latest().patch.clone();
        if !patch.same_shape(&reference) {
            return Err(AppearanceError::PatchShape {
                expected: patch_dims(&reference),
                got: patch_dims(&patch),
            });
        }
        let sim_patch = patch.clone();
        self.consider_with(
            t,
            score,
            collection,
            |latest| ssim(&sim_patch, &latest.patch, &k),
            move || {
                let f = features(&patch)?;
                Ok(TemplateEntry::new(patch, f, Some(score), t))
            },
        )
    }

    /// Same state transition as [`consider_update`](Self::consider_update),
    /// with the similarity to the newest template and the candidate entry
    /// supplied by the caller.
    pub fn consider_with<T, S, B>(
        &mut self,
        t: usize,
        score: f64,
        collection: &mut AppearanceCollection<T>,
        similarity: S,
        build: B,
    ) -> Result<UpdateOutcome<T>, AppearanceError>
    where
        T: Scalar,
        S: FnOnce(&TemplateEntry<T>) -> Result<f64, AppearanceError>,
        B: FnOnce() -> Result<TemplateEntry<T>, AppearanceError>,
    {
        if !score.is_finite() {
            return Err(AppearanceError::NonFiniteScore(score));
        }
        self.policy.observe(t, score);
        if collection.capacity() == 0 {
            return Ok(UpdateOutcome {
                decision: Decision::None,
                tau: None,
                ssim: None,
                evicted: None,
            });
        }
        let tau = compute_threshold(t, &self.policy, collection)?;
        let reliable = score > tau;
        let mut sim = None;
        let decision = match self.mode {
            AdMode::AlwaysUpdate => Decision::Admitted,
            AdMode::ReliabilityOnly if reliable => Decision::Admitted,
            AdMode::Full | AdMode::ReliabilityOnly if !reliable => Decision::RejectedReliability,
            _ => {
                let s = similarity(collection.latest())?;
                sim = Some(s);
                if s < self.policy.tau_si {
                    Decision::Admitted
                } else {
                    Decision::RejectedDiversity
                }
            }
        };
        let evicted = if decision == Decision::Admitted {
            collection.push(build()?)?
        } else {
            None
        };
        Ok(UpdateOutcome {
            decision,
            tau: Some(tau),
            ssim: sim,
            evicted,
        })
    }
}

/// One slot of a collection snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub frame_index: usize,
    pub score: Option<f64>,
    pub patch_file: String,
    pub features_file: String,
}

/// Manifest of a collection snapshot; entry 0 is the initial template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotManifest {
    pub capacity: usize,
    pub entries: Vec<SnapshotEntry>,
}

pub const SNAPSHOT_MANIFEST: &str = "collection.json";

/// Manifest plus encoded tensor files, keyed by file name.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub manifest: SnapshotManifest,
    pub files: BTreeMap<String, Vec<u8>>,
}

impl Snapshot {
    pub fn capture<T: Scalar>(collection: &AppearanceCollection<T>) -> Self {
        let mut files = BTreeMap::new();
        let mut entries = Vec::with_capacity(1 + collection.temporal_len());
        let all = std::iter::once(collection.initial()).chain(collection.temporal());
        for (i, e) in all.enumerate() {
            let patch_file = format!("entry_{i:03}_patch.bact");
            let features_file = format!("entry_{i:03}_features.bact");
            files.insert(patch_file.clone(), encode_tensor(&e.patch.to_tensor::<f64>()));
            files.insert(features_file.clone(), encode_tensor(e.features.tensor()));
            entries.push(SnapshotEntry {
                frame_index: e.frame_index,
                score: e.score,
                patch_file,
                features_file,
            });
        }
        Self {
            manifest: SnapshotManifest {
                capacity: collection.capacity(),
                entries,
            },
            files,
        }
    }

    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(&self.manifest).expect("manifest serialises");
        out.push(b'\n');
        out
    }

    pub fn from_parts(manifest_bytes: &[u8], files: BTreeMap<String, Vec<u8>>) -> Result<Self, FormatError> {
        let manifest: SnapshotManifest = serde_json::from_slice(manifest_bytes)
            .map_err(|e| FormatError::json(SNAPSHOT_MANIFEST, e))?;
        Ok(Self { manifest, files })
    }

    fn file(&self, name: &str) -> Result<&[u8], FormatError> {
        self.files
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| FormatError::Invalid(format!("snapshot references missing file {name}")))
    }

    /// Precision byte of the stored feature tensors.
    pub fn precision(&self) -> Result<u8, FormatError> {
        let first = self
            .manifest
            .entries
            .first()
            .ok_or_else(|| FormatError::Invalid("snapshot has no entries".into()))?;
        peek_precision(self.file(&first.features_file)?)
    }

    pub fn restore<T: Scalar>(&self) -> Result<AppearanceCollection<T>, FormatError> {
        let m = &self.manifest;
        if m.entries.is_empty() || m.entries.len() > m.capacity + 1 {
            return Err(FormatError::Invalid(format!(
                "snapshot holds {} entries for capacity {}",
                m.entries.len(),
                m.capacity
            )));
        }
        let load = |e: &SnapshotEntry| -> Result<TemplateEntry<T>, FormatError> {
            let patch = GrayImage::from_tensor(&decode_tensor::<f64>(self.file(&e.patch_file)?)?)?;
            let features = FeatureMap::new(decode_tensor::<T>(self.file(&e.features_file)?)?)?;
            Ok(TemplateEntry::new(patch, features, e.score, e.frame_index))
        };
        let mut c = AppearanceCollection::new(load(&m.entries[0])?, m.capacity);
        for e in &m.entries[1..] {
            c.push(load(e)?).map_err(|err| FormatError::Invalid(err.to_string()))?;
        }
        Ok(c)
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), FormatError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        let manifest = dir.join(SNAPSHOT_MANIFEST);
        fs::write(&manifest, self.manifest_bytes()).map_err(|e| FormatError::io(&manifest, e))?;
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| FormatError::io(&p, e))?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self, FormatError> {
        let dir = dir.as_ref();
        let manifest = dir.join(SNAPSHOT_MANIFEST);
        let bytes = fs::read(&manifest).map_err(|e| FormatError::io(&manifest, e))?;
        let mut snap = Self::from_parts(&bytes, BTreeMap::new())?;
        let names: Vec<String> = snap
            .manifest
            .entries
            .iter()
            .flat_map(|e| [e.patch_file.clone(), e.features_file.clone()])
            .collect();
        for name in names {
            if name.contains('/') || name.contains('\\') || name.contains("..") {
                return Err(FormatError::Invalid(format!("snapshot file name {name} escapes the directory")));
            }
            let p = dir.join(&name);
            let data = fs::read(&p).map_err(|e| FormatError::io(&p, e))?;
            snap.files.insert(name, data);
        }
        Ok(snap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::testutil::{random_tensor, TestRng};

    fn entry(frame: usize, score: Option<f64>, seed: u64) -> TemplateEntry<f64> {
        let patch = GrayImage::new(4, 4, random_tensor(&[16], seed).map(|v| 128.0 + 100.0 * v).into_data()).unwrap();
        let features = FeatureMap::new(random_tensor(&[2, 2, 4], seed + 1)).unwrap();
        TemplateEntry::new(patch, features, score, frame)
    }

    fn collection_with(scores: &[f64], capacity: usize) -> AppearanceCollection<f64> {
        let mut c = AppearanceCollection::new(entry(0, None, 1), capacity);
        for (i, &s) in scores.iter().enumerate() {
            c.push(entry(i + 1, Some(s), 10 + i as u64)).unwrap();
        }
        c
    }

    #[test]
    fn threshold_branches() {
        let mut p = UpdatePolicy::default();
        let c = collection_with(&[0.5], 3);
        assert_eq!(compute_threshold(3, &p, &c).unwrap(), 1.8);
        assert!(matches!(
            compute_threshold(6, &p, &c),
            Err(AppearanceError::MissingWarmup { recorded: 0, .. })
        ));
        for t in 1..=5 {
            p.observe(t, 1.0);
        }
        p.observe(6, 123.0);
        assert_eq!(p.warmup_scores.len(), 5);
        assert!((compute_threshold(6, &p, &c).unwrap() - 0.95).abs() <= 1e-12);
        let full = collection_with(&[0.8, 0.9, 1.0], 3);
        assert!((compute_threshold(100, &p, &full).unwrap() - 0.81).abs() <= 1e-12);
    }

    #[test]
    fn ssim_closed_forms() {
        let k = SsimConstants::for_range(255.0);
        let x = GrayImage::from_fn(8, 8, |x, y| ((x * 37 + y * 11) % 256) as f64).unwrap();
        assert!((ssim(&x, &x, &k).unwrap() - 1.0).abs() <= 1e-12);
        let zero = GrayImage::filled(8, 8, 0.0).unwrap();
        let full = GrayImage::filled(8, 8, 255.0).unwrap();
        let want = k.c1 / (255.0f64.powi(2) + k.c1);
        assert!((ssim(&zero, &full, &k).unwrap() - want).abs() <= 1e-12);
        assert!(ssim(&zero, &GrayImage::filled(4, 4, 0.0).unwrap(), &k).is_err());
    }

    #[test]
    fn views_fill_with_initial() {
        let fresh = collection_with(&[], 3);
        let v = collection_views(&fresh);
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|f| *f == &fresh.initial().features));

        let two = collection_with(&[0.5, 0.6], 3);
        let v = collection_views(&two);
        let t: Vec<_> = two.temporal().collect();
        assert_eq!(v[0], &two.initial().features);
        assert_eq!(v[1], &t[0].features);
        assert_eq!(v[2], &t[1].features);
        assert_eq!(v[3], &two.initial().features);

        let three = collection_with(&[0.5, 0.6, 0.7], 3);
        let v = collection_views(&three);
        let t: Vec<_> = three.temporal().collect();
        assert_eq!(v[1..], [&t[0].features, &t[1].features, &t[2].features]);
    }

    #[test]
    fn gating_examples() {
        let mut p = UpdatePolicy::default();
        for t in 1..=5 {
            p.observe(t, 1.0);
        }
        let mut ad = AppearanceDiscriminator::new(p, SsimConstants::default(), AdMode::Full).unwrap();
        let mut c = collection_with(&[0.8, 0.9, 1.0], 3);
        let before = c.clone();

        let out = ad
            .consider_with(100, 0.5, &mut c, |_| Ok(0.0), || Ok(entry(100, Some(0.5), 7)))
            .unwrap();
        assert_eq!(out.decision, Decision::RejectedReliability);
        assert_eq!(out.ssim, None);
        assert_eq!(c, before);

        let out = ad
            .consider_with(101, 0.9, &mut c, |_| Ok(0.9), || Ok(entry(101, Some(0.9), 7)))
            .unwrap();
        assert_eq!(out.decision, Decision::RejectedDiversity);
        assert_eq!(c, before);

        let out = ad
            .consider_with(102, 0.9, &mut c, |_| Ok(0.1), || Ok(entry(102, Some(0.9), 7)))
            .unwrap();
        assert_eq!(out.decision, Decision::Admitted);
        assert_eq!(out.evicted.unwrap().frame_index, 1);
        assert_eq!(c.initial(), before.initial());
        assert_eq!(c.latest().frame_index, 102);
        assert_eq!(c.temporal_len(), 3);
    }

    #[test]
    fn diversity_checks_initial_when_temporal_is_empty() {
        let mut p = UpdatePolicy::default();
        for t in 1..=5 {
            p.observe(t, 1.0);
        }
        let mut ad = AppearanceDiscriminator::new(p, SsimConstants::default(), AdMode::Full).unwrap();
        let mut c = collection_with(&[], 3);
        let z0 = c.initial().patch.clone();
        let out = ad
            .consider_update(6, z0, 2.0, &mut c, |_| unreachable!("identical patch is never admitted"))
            .unwrap();
        assert_eq!(out.decision, Decision::RejectedDiversity);
        assert!((out.ssim.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn always_update_cycles_with_period_one() {
        let mut ad = AppearanceDiscriminator::new(UpdatePolicy::default(), SsimConstants::default(), AdMode::AlwaysUpdate)
            .unwrap();
        let mut c = collection_with(&[], 3);
        for t in 1..=10 {
            let out = ad
                .consider_with(t, 0.1, &mut c, |_| Ok(1.0), || Ok(entry(t, Some(0.1), t as u64)))
                .unwrap();
            assert_eq!(out.decision, Decision::Admitted);
            assert_eq!(c.temporal_len(), t.min(3));
            assert_eq!(c.latest().frame_index, t);
        }
    }

    #[test]
    fn zero_capacity_never_decides() {
        let mut ad = AppearanceDiscriminator::new(UpdatePolicy::default(), SsimConstants::default(), AdMode::AlwaysUpdate)
            .unwrap();
        let mut c = collection_with(&[], 0);
        let out = ad
            .consider_with(7, 5.0, &mut c, |_| Ok(0.0), || Ok(entry(7, Some(5.0), 1)))
            .unwrap();
        assert_eq!(out.decision, Decision::None);
        assert_eq!(c.temporal_len(), 0);
        assert_eq!(collection_views(&c).len(), 1);
    }

    #[test]
    fn snapshot_round_trip_is_byte_identical() {
        let mut rng = TestRng::new(9);
        for round in 0..20 {
            let n = rng.below(4);
            let scores: Vec<f64> = (0..n).map(|_| rng.unit()).collect();
            let c = collection_with(&scores, 3);
            let snap = Snapshot::capture(&c);
            let parsed = Snapshot::from_parts(&snap.manifest_bytes(), snap.files.clone()).unwrap();
            let back: AppearanceCollection<f64> = parsed.restore().unwrap();
            let again = Snapshot::capture(&back);
            assert_eq!(again.manifest_bytes(), snap.manifest_bytes(), "round {round}");
            assert_eq!(again.files, snap.files);
        }
    }

    #[test]
    fn mode_names_parse() {
        for m in [AdMode::Full, AdMode::AlwaysUpdate, AdMode::ReliabilityOnly, AdMode::DiversityOnly] {
            assert_eq!(m.name().parse::<AdMode>().unwrap(), m);
        }
        assert_eq!("au".parse::<AdMode>().unwrap(), AdMode::AlwaysUpdate);
        assert!("xx".parse::<AdMode>().is_err());
        assert_eq!(serde_json::to_string(&Decision::RejectedDiversity).unwrap(), "\"rejected-diversity\"");
    }
}
