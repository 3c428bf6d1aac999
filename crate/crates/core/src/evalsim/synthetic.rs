//! Seeded synthetic sequences: a textured square target that drifts in
//! appearance over a textured background, with optional occluders,
//! distractors, illumination change and sensor noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sequence::Sequence;
use super::SimError;
use crate::image::GrayImage;
use crate::pipeline::BBox;

/// An occluder laid over the target's leftmost `coverage` fraction from
/// `start` to `end` inclusive, which then slides off at `exit_velocity`
/// pixels per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occlusion {
    pub start: usize,
    pub end: usize,
    pub coverage: f64,
    #[serde(default)]
    pub exit_velocity: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub seed: u64,
    /// Target width and height in pixels.
    pub target_size: [usize; 2],
    /// Lattice spacing of the target texture in pixels.
    pub texture_cell: usize,
    pub background_cell: usize,
    pub target_contrast: f64,
    pub background_contrast: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Target appearance moves this far per frame along a chain of random
    /// keyframe textures (1.0 = one full keyframe).
    pub drift_rate: f64,
    pub velocity: [f64; 2],
    /// Standard deviation of per-frame positional noise.
    pub jitter: f64,
    pub occlusions: Vec<Occlusion>,
    pub distractors: usize,
    /// Correlation of distractor texture with the target's first keyframe.
    pub distractor_similarity: f64,
    /// Brightness gain grows linearly from 1 to `1 + illumination`.
    pub illumination: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 200,
            height: 200,
            length: 100,
            seed: 0,
            target_size: [30, 30],
            texture_cell: 8,
            background_cell: 16,
            target_contrast: 60.0,
            background_contrast: 25.0,
            pixel_noise: 0.0,
            drift_rate: 0.0,
            velocity: [1.0, 0.0],
            jitter: 0.0,
            occlusions: Vec::new(),
            distractors: 0,
            distractor_similarity: 0.0,
            illumination: 0.0,
        }
    }
}

const MEAN_LEVEL: f64 = 128.0;

// Independent random streams, so that changing one ingredient leaves the
// others bit-identical.
const STREAM_BACKGROUND: u64 = 1;
const STREAM_TEXTURE: u64 = 2;
const STREAM_MOTION: u64 = 3;
const STREAM_OCCLUDER: u64 = 4;
const STREAM_DISTRACTOR: u64 = 5;
const STREAM_NOISE: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Smooth texture: random values in `[-1, 1]` on a lattice of spacing
/// `cell`, bilinearly interpolated.
#[derive(Clone, Debug)]
struct Texture {
    cols: usize,
    cell: usize,
    values: Vec<f64>,
}

impl Texture {
    fn random(w: usize, h: usize, cell: usize, rng: &mut ChaCha8Rng) -> Self {
        let cols = w.div_ceil(cell) + 1;
        let rows = h.div_ceil(cell) + 1;
        Self {
            cols,
            cell,
            values: (0..cols * rows).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    fn blend(a: &Self, b: &Self, wa: f64, wb: f64) -> Self {
        Self {
            cols: a.cols,
            cell: a.cell,
            values: a.values.iter().zip(&b.values).map(|(x, y)| wa * x + wb * y).collect(),
        }
    }

    fn at(&self, u: usize, v: usize) -> f64 {
        let fx = (u as f64 + 0.5) / self.cell as f64;
        let fy = (v as f64 + 0.5) / self.cell as f64;
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let g = |x: usize, y: usize| self.values[y * self.cols + x];
        let top = g(x0, y0) * (1.0 - ax) + g(x0 + 1, y0) * ax;
        let bottom = g(x0, y0 + 1) * (1.0 - ax) + g(x0 + 1, y0 + 1) * ax;
        top * (1.0 - ay) + bottom * ay
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let [tw, th] = self.target_size;
        if self.length < 2 {
            return Err(SimError::Config(format!("length must be at least 2, got {}", self.length)));
        }
        if tw == 0 || th == 0 || self.texture_cell == 0 || self.background_cell == 0 {
            return Err(SimError::Config("target size and texture cell must be positive".into()));
        }
        if self.width < tw + 2 || self.height < th + 2 {
            return Err(SimError::Config(format!(
                "{}×{} frame cannot hold a {tw}×{th} target",
                self.width, self.height
            )));
        }
        let rates = [
            self.target_contrast,
            self.background_contrast,
            self.pixel_noise,
            self.drift_rate,
            self.velocity[0],
            self.velocity[1],
            self.jitter,
            self.distractor_similarity,
            self.illumination,
        ];
        if rates.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Config("all rates must be finite".into()));
        }
        if self.pixel_noise < 0.0 || self.drift_rate < 0.0 || self.jitter < 0.0 {
            return Err(SimError::Config("noise, drift and jitter must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_similarity) {
            return Err(SimError::Config("distractor_similarity must lie in [0, 1]".into()));
        }
        for o in &self.occlusions {
            if o.start > o.end || !(0.0..=1.0).contains(&o.coverage) || o.exit_velocity.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Config(format!("invalid occlusion window {o:?}")));
            }
        }
        Ok(())
    }

    /// Scenario in which the initial template decays: the target texture
    /// drifts two percent of a keyframe per frame under strong sensor noise
    /// and a slow illumination ramp.
    pub fn drift_benchmark(seed: u64) -> Self {
        Self {
            length: 90,
            seed,
            texture_cell: 12,
            pixel_noise: 24.0,
            drift_rate: 0.02,
            velocity: [0.8, 0.5],
            jitter: 0.6,
            illumination: 0.2,
            ..Self::default()
        }
    }
}

/// Top-left corners per frame, reflected off the frame border.
fn trajectory(cfg: &SyntheticConfig, size: [usize; 2], start: [f64; 2], velocity: [f64; 2], jitter: f64, rng: &mut ChaCha8Rng) -> Vec<[i64; 2]> {
    let lim = [
        (cfg.width - size[0] - 1) as f64,
        (cfg.height - size[1] - 1) as f64,
    ];
    let mut pos = start;
    let mut vel = velocity;
    let mut out = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        if t > 0 {
            for a in 0..2 {
                let noise: f64 = if jitter > 0.0 { rng.sample::<f64, _>(StandardNormal) * jitter } else { 0.0 };
                pos[a] += vel[a] + noise;
                if pos[a] < 1.0 {
                    pos[a] = 2.0 - pos[a];
                    vel[a] = -vel[a];
                }
                if pos[a] > lim[a] {
                    pos[a] = 2.0 * lim[a] - pos[a];
                    vel[a] = -vel[a];
                }
                pos[a] = pos[a].clamp(1.0, lim[a]);
            }
        }
        out.push([pos[0].round() as i64, pos[1].round() as i64]);
    }
    out
}

fn paint(img: &mut GrayImage, x0: i64, y0: i64, w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) {
    for v in 0..h {
        let y = y0 + v as i64;
        if y < 0 || y >= img.height() as i64 {
            continue;
        }
        for u in 0..w {
            let x = x0 + u as i64;
            if x < 0 || x >= img.width() as i64 {
                continue;
            }
            img.set(x as usize, y as usize, f(u, v));
        }
    }
}

pub fn generate_sequence(cfg: &SyntheticConfig) -> Result<Sequence, SimError> {
    cfg.validate()?;
    let [tw, th] = cfg.target_size;
    let cell = cfg.texture_cell;

    let mut rng = stream(cfg.seed, STREAM_BACKGROUND);
    let bg_tex = Texture::random(cfg.width, cfg.height, cfg.background_cell, &mut rng);
    let background = GrayImage::from_fn(cfg.width, cfg.height, |x, y| {
        MEAN_LEVEL + cfg.background_contrast * bg_tex.at(x, y)
    })?;

    let mut rng = stream(cfg.seed, STREAM_TEXTURE);
    let keyframes = (cfg.drift_rate * cfg.length as f64).ceil() as usize + 2;
    let keys: Vec<Texture> = (0..keyframes).map(|_| Texture::random(tw, th, cell, &mut rng)).collect();
    let appearance = |t: usize| -> Texture {
        let phase = cfg.drift_rate * t as f64;
        let k = phase.floor() as usize;
        let f = phase - k as f64;
        let a = std::f64::consts::FRAC_PI_2 * f;
        Texture::blend(&keys[k], &keys[k + 1], a.cos(), a.sin())
    };

    let mut rng = stream(cfg.seed, STREAM_MOTION);
    let start = [
        ((cfg.width - tw) / 2) as f64,
        ((cfg.height - th) / 2) as f64,
    ];
    let target = trajectory(cfg, cfg.target_size, start, cfg.velocity, cfg.jitter, &mut rng);

    let mut rng = stream(cfg.seed, STREAM_OCCLUDER);
    let occluder_tex: Vec<Texture> = cfg.occlusions.iter().map(|_| Texture::random(tw, th, cell, &mut rng)).collect();

    let mut rng = stream(cfg.seed, STREAM_DISTRACTOR);
    let sim = cfg.distractor_similarity;
    let speed = cfg.velocity[0].hypot(cfg.velocity[1]).max(0.5);
    let distractors: Vec<(Texture, Vec<[i64; 2]>)> = (0..cfg.distractors)
        .map(|_| {
            let own = Texture::random(tw, th, cell, &mut rng);
            let tex = Texture::blend(&keys[0], &own, sim, (1.0 - sim * sim).sqrt());
            let start = [
                rng.gen_range(1.0..(cfg.width - tw - 1) as f64),
                rng.gen_range(1.0..(cfg.height - th - 1) as f64),
            ];
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let vel = [speed * angle.cos(), speed * angle.sin()];
            let path = trajectory(cfg, cfg.target_size, start, vel, 0.0, &mut rng);
            (tex, path)
        })
        .collect();

    let mut noise = stream(cfg.seed, STREAM_NOISE);
    let mut frames = Vec::with_capacity(cfg.length);
    let mut groundtruth = Vec::with_capacity(cfg.length);
    for t in 0..cfg.length {
        let mut img = background.clone();
        for (tex, path) in &distractors {
            let [x, y] = path[t];
            paint(&mut img, x, y, tw, th, |u, v| MEAN_LEVEL + cfg.target_contrast * tex.at(u, v));
        }
        let [x, y] = target[t];
        let tex = appearance(t);
        paint(&mut img, x, y, tw, th, |u, v| MEAN_LEVEL + cfg.target_contrast * tex.at(u, v));
        for (o, otex) in cfg.occlusions.iter().zip(&occluder_tex) {
            if t < o.start {
                continue;
            }
            let ow = ((o.coverage * tw as f64).round() as usize).min(tw);
            let anchor = target[t.min(o.end)];
            let dt = t.saturating_sub(o.end) as f64;
            let ox = anchor[0] + (o.exit_velocity[0] * dt).round() as i64;
            let oy = anchor[1] + (o.exit_velocity[1] * dt).round() as i64;
            paint(&mut img, ox, oy, ow, th, |u, v| MEAN_LEVEL + cfg.target_contrast * otex.at(u, v));
        }
        let gain = 1.0 + cfg.illumination * t as f64 / (cfg.length - 1) as f64;
        for p in img.data_mut() {
            let n: f64 = if cfg.pixel_noise > 0.0 {
                noise.sample::<f64, _>(StandardNormal) * cfg.pixel_noise
            } else {
                0.0
            };
            *p = (*p * gain + n).round().clamp(0.0, 255.0);
        }
        frames.push(img);
        groundtruth.push(BBox::new(
            x as f64 + tw as f64 / 2.0,
            y as f64 + th as f64 / 2.0,
            tw as f64,
            th as f64,
        )?);
    }
    let meta = serde_json::json!({ "generator": "synthetic", "config": cfg });
    Ok(Sequence {
        frames,
        groundtruth,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plain(length: usize) -> SyntheticConfig {
        SyntheticConfig {
            width: 96,
            height: 80,
            length,
            target_size: [16, 12],
            velocity: [2.0, 1.0],
            ..SyntheticConfig::default()
        }
    }

    fn patch(img: &GrayImage, b: &BBox) -> Vec<f64> {
        let (x0, y0) = (b.left() as usize, b.top() as usize);
        let mut out = Vec::new();
        for y in y0..y0 + b.h as usize {
            for x in x0..x0 + b.w as usize {
                out.push(img.get(x, y));
            }
        }
        out
    }

    #[test]
    fn static_appearance_only_translates() {
        let s = generate_sequence(&plain(12)).unwrap();
        let first = patch(&s.frames[0], &s.groundtruth[0]);
        for t in 1..12 {
            let (a, b) = (&s.groundtruth[t - 1], &s.groundtruth[t]);
            assert_eq!((b.cx - a.cx, b.cy - a.cy), (2.0, 1.0), "frame {t}");
            assert_eq!(patch(&s.frames[t], b), first);
        }
        // Pixels outside both target boxes keep the background.
        let (a, b) = (&s.groundtruth[0], &s.groundtruth[5]);
        let inside = |bb: &BBox, x: usize, y: usize| {
            (x as f64) >= bb.left() && (x as f64) < bb.right() && (y as f64) >= bb.top() && (y as f64) < bb.bottom()
        };
        for y in 0..80 {
            for x in 0..96 {
                if !inside(a, x, y) && !inside(b, x, y) {
                    assert_eq!(s.frames[0].get(x, y), s.frames[5].get(x, y));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = SyntheticConfig::drift_benchmark(9);
        let cfg = SyntheticConfig { length: 20, ..cfg };
        let a = generate_sequence(&cfg).unwrap();
        let b = generate_sequence(&cfg).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.groundtruth, b.groundtruth);
        let c = generate_sequence(&SyntheticConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn full_occlusion_replaces_target_pixels() {
        let occluded = |drift: f64| SyntheticConfig {
            length: 40,
            drift_rate: drift,
            occlusions: vec![Occlusion {
                start: 20,
                end: 30,
                coverage: 1.0,
                exit_velocity: [0.0, 30.0],
            }],
            ..plain(40)
        };
        // Two sequences differing only in target appearance: inside the
        // occlusion window no target pixel may differ.
        let a = generate_sequence(&occluded(0.0)).unwrap();
        let b = generate_sequence(&occluded(0.5)).unwrap();
        for t in 0..40 {
            let gt = &a.groundtruth[t];
            assert_eq!(gt, &b.groundtruth[t]);
            let differing = patch(&a.frames[t], gt)
                .iter()
                .zip(patch(&b.frames[t], gt))
                .filter(|(x, y)| **x != *y)
                .count();
            if (20..=30).contains(&t) {
                assert_eq!(differing, 0, "frame {t}");
            } else if t > 0 {
                assert!(differing > 0, "frame {t}");
            }
        }
    }

    #[test]
    fn boxes_stay_inside() {
        let cfg = SyntheticConfig {
            length: 300,
            velocity: [7.0, -5.0],
            jitter: 2.0,
            ..SyntheticConfig::drift_benchmark(3)
        };
        let s = generate_sequence(&cfg).unwrap();
        assert_eq!(s.frames.len(), s.groundtruth.len());
        for b in &s.groundtruth {
            assert!(b.within(cfg.width, cfg.height));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate_sequence(&SyntheticConfig { length: 1, ..plain(1) }).is_err());
        assert!(generate_sequence(&SyntheticConfig { width: 10, ..plain(5) }).is_err());
        assert!(generate_sequence(&SyntheticConfig { drift_rate: f64::NAN, ..plain(5) }).is_err());
    }
}
