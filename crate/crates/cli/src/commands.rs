//! Command implementations, independent of argument parsing.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use bactrack::appearance::{AdMode, Decision, Snapshot};
use bactrack::attention::{attention_flops, AttentionShape, FlopCounts};
use bactrack::evalsim::{generate_sequence, ope_metrics, parse_groundtruth, OpeMetrics, Sequence, SyntheticConfig};
use bactrack::gradsuite::{run_suite, GradCheck, SuiteSizes};
use bactrack::image::GrayImage;
use bactrack::numerics::Scalar;
use bactrack::pipeline::{BBox, FrameRecord, StageTimings, Tracker, TrackerConfig, TrackerModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{worker_pool, Precision};
use crate::error::{CliError, CliResult, DataContext};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub frames: usize,
    /// Mean post-penalty peak score over tracked frames.
    pub mean_score: f64,
    pub updates: usize,
    pub fps: f64,
}

#[derive(Clone, Debug)]
pub struct TrackRun {
    pub records: Vec<FrameRecord>,
    pub timings: StageTimings,
    pub snapshot: Snapshot,
}

impl TrackRun {
    pub fn summary(&self) -> TrackSummary {
        let scores: Vec<f64> = self.records.iter().filter_map(|r| r.score).collect();
        let mean_score = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
        let secs = self.timings.total.as_secs_f64();
        TrackSummary {
            frames: self.records.len(),
            mean_score,
            updates: self.records.iter().filter(|r| r.decision == Decision::Admitted).count(),
            fps: if secs > 0.0 { self.timings.frames as f64 / secs } else { 0.0 },
        }
    }

    pub fn boxes(&self) -> Vec<BBox> {
        boxes_of(&self.records)
    }
}

fn boxes_of(records: &[FrameRecord]) -> Vec<BBox> {
    records
        .iter()
        .map(|r| BBox::from_array(r.bbox).expect("tracker boxes have positive extent"))
        .collect()
}

fn build_model<T: Scalar>(cfg: &TrackerConfig) -> CliResult<Arc<TrackerModel<T>>> {
    let bundle = cfg.load_bundle().map_err(CliError::data)?;
    Ok(Arc::new(TrackerModel::from_bundle(&bundle).map_err(CliError::data)?))
}

fn run_with<T: Scalar>(
    cfg: &TrackerConfig,
    model: Arc<TrackerModel<T>>,
    frames: &[GrayImage],
    first: BBox,
) -> CliResult<TrackRun> {
    let mut tracker = Tracker::new(cfg.clone(), model).map_err(CliError::usage)?;
    tracker.run(frames, first).map_err(CliError::data)?;
    let state = tracker.state().expect("run initialises the tracker");
    Ok(TrackRun {
        records: tracker.telemetry().to_vec(),
        timings: tracker.timings(),
        snapshot: Snapshot::capture(&state.collection),
    })
}

/// Tracks `frames` from the annotated first box.
pub fn track_frames(cfg: &TrackerConfig, precision: Precision, frames: &[GrayImage], first: BBox) -> CliResult<TrackRun> {
    match precision {
        Precision::F32 => run_with(cfg, build_model::<f32>(cfg)?, frames, first),
        Precision::F64 => run_with(cfg, build_model::<f64>(cfg)?, frames, first),
    }
}

pub fn track_sequence(cfg: &TrackerConfig, precision: Precision, seq: &Sequence) -> CliResult<TrackRun> {
    let first = *seq
        .groundtruth
        .first()
        .ok_or_else(|| CliError::data(anyhow::anyhow!("sequence has no frames")))?;
    track_frames(cfg, precision, &seq.frames, first)
}

pub fn read_sequence(path: &Path) -> CliResult<Sequence> {
    Sequence::read(path).data_ctx(|| format!("cannot load sequence {}", path.display()))
}

/// One JSON object per line, in frame order.
pub fn telemetry_jsonl(records: &[FrameRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("records serialise"));
        s.push('\n');
    }
    s
}

pub fn parse_telemetry(text: &str) -> CliResult<Vec<FrameRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).data_ctx(|| format!("telemetry line {}", i + 1)))
        .collect()
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).data_ctx(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, contents).data_ctx(|| format!("cannot write {}", path.display()))
}

pub fn pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialise");
    s.push('\n');
    s
}

pub fn write_track_outputs(dir: &Path, run: &TrackRun) -> CliResult<()> {
    write_file(&dir.join("telemetry.jsonl"), telemetry_jsonl(&run.records))?;
    write_file(&dir.join("summary.json"), pretty_json(&run.summary()))
}

/// Ground truth from a `cx,cy,w,h` text file, a sequence directory or its manifest.
pub fn read_groundtruth(path: &Path) -> CliResult<Vec<BBox>> {
    let is_text = path.is_file() && path.extension().is_none_or(|e| e != "json");
    if is_text {
        let text = fs::read_to_string(path).data_ctx(|| format!("cannot read {}", path.display()))?;
        parse_groundtruth(&text).data_ctx(|| format!("invalid ground truth {}", path.display()))
    } else {
        Ok(read_sequence(path)?.groundtruth)
    }
}

/// Scores telemetry against ground truth. Records may arrive in any order
/// but must cover frames `0..n` exactly once.
pub fn eval_records(records: &[FrameRecord], truth: &[BBox]) -> CliResult<OpeMetrics> {
    let mut sorted: Vec<&FrameRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.t);
    let frames: BTreeSet<usize> = sorted.iter().map(|r| r.t).collect();
    if frames.len() != sorted.len() || sorted.iter().enumerate().any(|(i, r)| r.t != i) {
        return Err(CliError::data(anyhow::anyhow!("telemetry must hold frames 0..n exactly once")));
    }
    let pred: Vec<BBox> = sorted
        .iter()
        .map(|r| BBox::from_array(r.bbox))
        .collect::<Result<_, _>>()
        .data_ctx(|| "telemetry holds a degenerate box".into())?;
    ope_metrics(&pred, truth).data()
}

/// One ablation arm: an update mode and optionally a temporal capacity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    pub ad_mode: AdMode,
    pub n_templates: Option<usize>,
}

impl FromStr for ArmSpec {
    type Err = String;

    /// `ac`, `au`, `rp`, `dp` (or the long mode names), `n0` for the
    /// initial template alone, and `MODE:N` to also set the capacity.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("n0") {
            return Ok(Self { name: "N0".into(), ad_mode: AdMode::Full, n_templates: Some(0) });
        }
        let (mode, n) = match s.split_once(':') {
            Some((m, n)) => (m, Some(n.parse::<usize>().map_err(|_| format!("bad template count in arm `{s}`"))?)),
            None => (s, None),
        };
        let ad_mode: AdMode = mode.to_ascii_lowercase().parse()?;
        let short = match ad_mode {
            AdMode::Full => "AC",
            AdMode::AlwaysUpdate => "AU",
            AdMode::ReliabilityOnly => "RP",
            AdMode::DiversityOnly => "DP",
        };
        let name = match n {
            Some(n) => format!("{short}:{n}"),
            None => short.to_string(),
        };
        Ok(Self { name, ad_mode, n_templates: n })
    }
}

impl ArmSpec {
    pub fn config(&self, base: &TrackerConfig) -> TrackerConfig {
        TrackerConfig {
            ad_mode: self.ad_mode,
            n_templates: self.n_templates.unwrap_or(base.n_templates),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub success_auc: f64,
    pub precision_at_20: f64,
    pub updates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub ad_mode: AdMode,
    pub n_templates: usize,
    pub seeds: Vec<SeedResult>,
    pub success_mean: f64,
    pub success_sd: f64,
    pub precision_mean: f64,
    pub precision_sd: f64,
}

/// Published full-scale numbers, shown next to results for orientation only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublishedValue {
    pub arm: String,
    pub success_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub arms: Vec<ArmRow>,
    pub published: Vec<PublishedValue>,
}

pub fn published_values() -> Vec<PublishedValue> {
    vec![
        PublishedValue { arm: "AU".into(), success_auc: 0.594 },
        PublishedValue { arm: "AC".into(), success_auc: 0.627 },
    ]
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

fn seed_result(seed: u64, run: &TrackRun, seq: &Sequence) -> CliResult<SeedResult> {
    let m = ope_metrics(&run.boxes(), &seq.groundtruth).data()?;
    Ok(SeedResult {
        seed,
        success_auc: m.success_auc,
        precision_at_20: m.precision_at_20,
        updates: run.summary().updates,
    })
}

fn ablate_typed<T: Scalar>(
    base: &TrackerConfig,
    arms: &[ArmSpec],
    seeds: &[u64],
    sim: &(dyn Fn(u64) -> SyntheticConfig + Sync),
) -> CliResult<Vec<Vec<SeedResult>>> {
    let configs: Vec<TrackerConfig> = arms.iter().map(|a| a.config(base)).collect();
    for c in &configs {
        c.validate().map_err(CliError::usage)?;
    }
    let model = build_model::<T>(base)?;
    let pool = worker_pool()?;
    let per_seed: Vec<Vec<SeedResult>> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let seq = generate_sequence(&sim(seed)).map_err(CliError::usage)?;
                configs
                    .iter()
                    .map(|c| {
                        let run = run_with(c, model.clone(), &seq.frames, seq.groundtruth[0])?;
                        seed_result(seed, &run, &seq)
                    })
                    .collect::<CliResult<Vec<_>>>()
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    Ok((0..arms.len()).map(|a| per_seed.iter().map(|row| row[a].clone()).collect()).collect())
}

/// Runs every arm on every seeded sequence. Each (seed) worker owns its
/// sequence and trackers; rows come back in arm order, entries in seed order.
pub fn ablate(
    base: &TrackerConfig,
    precision: Precision,
    arms: &[ArmSpec],
    seeds: &[u64],
    sim: &(dyn Fn(u64) -> SyntheticConfig + Sync),
) -> CliResult<AblationReport> {
    if arms.is_empty() || seeds.is_empty() {
        return Err(CliError::usage(anyhow::anyhow!("ablation needs at least one arm and one seed")));
    }
    let results = match precision {
        Precision::F32 => ablate_typed::<f32>(base, arms, seeds, sim)?,
        Precision::F64 => ablate_typed::<f64>(base, arms, seeds, sim)?,
    };
    let rows = arms
        .iter()
        .zip(results)
        .map(|(arm, seeds)| {
            let (success_mean, success_sd) = mean_sd(&seeds.iter().map(|s| s.success_auc).collect::<Vec<_>>());
            let (precision_mean, precision_sd) = mean_sd(&seeds.iter().map(|s| s.precision_at_20).collect::<Vec<_>>());
            ArmRow {
                arm: arm.name.clone(),
                ad_mode: arm.ad_mode,
                n_templates: arm.config(base).n_templates,
                seeds,
                success_mean,
                success_sd,
                precision_mean,
                precision_sd,
            }
        })
        .collect();
    Ok(AblationReport { arms: rows, published: published_values() })
}

pub fn render_table(report: &AblationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<8} {:<18} {:>3} {:>6} {:>17} {:>17}", "arm", "mode", "N", "seeds", "success", "precision@20");
    for r in &report.arms {
        let _ = writeln!(
            s,
            "{:<8} {:<18} {:>3} {:>6} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
            r.arm,
            r.ad_mode.name(),
            r.n_templates,
            r.seeds.len(),
            r.success_mean,
            r.success_sd,
            r.precision_mean,
            r.precision_sd
        );
    }
    let published: Vec<String> = report.published.iter().map(|p| format!("{} {:.3}", p.arm, p.success_auc)).collect();
    let _ = writeln!(s, "published full-scale success (context only): {}", published.join(", "));
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub seed: u64,
    pub tokens: usize,
    pub channels: usize,
    pub checks: Vec<GradCheckRow>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub op: String,
    pub composite: bool,
    pub rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl From<&GradCheck> for GradCheckRow {
    fn from(c: &GradCheck) -> Self {
        Self {
            op: c.op.to_string(),
            composite: c.composite,
            rel_err: c.rel_err,
            tolerance: c.tolerance,
            passed: c.passed(),
        }
    }
}

pub fn gradcheck(seed: u64, sizes: SuiteSizes, corrupt: Option<&str>) -> CliResult<GradReport> {
    let checks = run_suite(seed, sizes, corrupt).map_err(CliError::usage)?;
    let checks: Vec<GradCheckRow> = checks.iter().map(GradCheckRow::from).collect();
    Ok(GradReport {
        seed,
        tokens: sizes.tokens,
        channels: sizes.channels,
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Mean wall-clock milliseconds per tracked frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMillis {
    pub extract: f64,
    pub encode: f64,
    pub decode: f64,
    pub predict: f64,
    pub ad: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub shape: AttentionShape,
    pub mta: FlopCounts,
    /// Standard attention against one template at the same sizes.
    pub single_template_mha: FlopCounts,
    /// Standard attention run once per template.
    pub per_template_mha: FlopCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub frames: usize,
    pub fps: f64,
    pub stage_ms: StageMillis,
    pub flops: FlopReport,
}

pub const MIN_BENCH_FRAMES: usize = 100;

pub fn flop_report(cfg: &TrackerConfig) -> CliResult<FlopReport> {
    let shape = AttentionShape {
        query_len: cfg.search_grid * cfg.search_grid,
        key_len: cfg.template_grid * cfg.template_grid,
        channels: cfg.channels,
        groups: cfg.groups,
        heads: cfg.heads,
        templates: cfg.groups,
    };
    let single = AttentionShape { groups: 1, templates: 1, ..shape };
    let each = AttentionShape { groups: 1, ..shape };
    let f = |s: &AttentionShape| attention_flops(s).map_err(CliError::usage);
    Ok(FlopReport { mta: f(&shape)?, single_template_mha: f(&single)?, per_template_mha: f(&each)?, shape })
}

/// Tracks `frames` synthetic frames after initialisation and reports timings.
pub fn bench(cfg: &TrackerConfig, precision: Precision, frames: usize, sim: &SyntheticConfig) -> CliResult<BenchReport> {
    if frames < MIN_BENCH_FRAMES {
        return Err(CliError::usage(anyhow::anyhow!("bench needs at least {MIN_BENCH_FRAMES} frames")));
    }
    let seq = generate_sequence(&SyntheticConfig { length: frames + 1, ..sim.clone() }).map_err(CliError::usage)?;
    let run = track_sequence(cfg, precision, &seq)?;
    let t = run.timings;
    let per = |d: std::time::Duration| d.as_secs_f64() * 1e3 / t.frames as f64;
    Ok(BenchReport {
        frames: t.frames,
        fps: run.summary().fps,
        stage_ms: StageMillis {
            extract: per(t.extract),
            encode: per(t.encode),
            decode: per(t.decode),
            predict: per(t.predict),
            ad: per(t.ad),
            total: per(t.total),
        },
        flops: flop_report(cfg)?,
    })
}
