//! Sequences on disk: a manifest, one image file per frame and a
//! ground-truth text file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::image::GrayImage;
use crate::numerics::codec::{read_tensor, write_tensor};
use crate::numerics::FormatError;
use crate::pipeline::BBox;

pub const SEQUENCE_MANIFEST: &str = "manifest.json";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub frames: Vec<GrayImage>,
    pub groundtruth: Vec<BBox>,
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub frames: Vec<String>,
    pub groundtruth: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// On-disk frame encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrameFormat {
    /// 8-bit binary PGM.
    #[default]
    Pgm,
    /// `H × W` tensor file.
    Tensor,
}

/// One `cx,cy,w,h` line per box.
pub fn format_groundtruth(boxes: &[BBox]) -> String {
    let mut s = String::new();
    for b in boxes {
        s.push_str(&format!("{},{},{},{}\n", b.cx, b.cy, b.w, b.h));
    }
    s
}

pub fn parse_groundtruth(text: &str) -> Result<Vec<BBox>, FormatError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| FormatError::Invalid(format!("ground truth line {}: {e}", i + 1)))?;
        if vals.len() != 4 {
            return Err(FormatError::Invalid(format!(
                "ground truth line {}: expected 4 values, found {}",
                i + 1,
                vals.len()
            )));
        }
        let b = BBox::new(vals[0], vals[1], vals[2], vals[3])
            .map_err(|_| FormatError::Invalid(format!("ground truth line {}: degenerate box", i + 1)))?;
        out.push(b);
    }
    Ok(out)
}

fn is_plain_name(name: &str) -> bool {
    !(name.is_empty() || name.contains('/') || name.contains('\\') || name == "..")
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>, format: FrameFormat) -> Result<(), FormatError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
        let mut names = Vec::with_capacity(self.frames.len());
        for (t, f) in self.frames.iter().enumerate() {
            let name = match format {
                FrameFormat::Pgm => {
                    let name = format!("frame_{t:05}.pgm");
                    let p = dir.join(&name);
                    fs::write(&p, f.encode_pgm()).map_err(|e| FormatError::io(&p, e))?;
                    name
                }
                FrameFormat::Tensor => {
                    let name = format!("frame_{t:05}.bact");
                    write_tensor(dir.join(&name), &f.to_tensor::<f64>())?;
                    name
                }
            };
            names.push(name);
        }
        let gt = dir.join(GROUNDTRUTH_FILE);
        fs::write(&gt, format_groundtruth(&self.groundtruth)).map_err(|e| FormatError::io(&gt, e))?;
        let manifest = SequenceManifest {
            frames: names,
            groundtruth: GROUNDTRUTH_FILE.into(),
            meta: self.meta.clone(),
        };
        let p = dir.join(SEQUENCE_MANIFEST);
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| FormatError::json(&p, e))?;
        bytes.push(b'\n');
        fs::write(&p, bytes).map_err(|e| FormatError::io(&p, e))
    }

    /// Reads a sequence from its directory, or from a manifest path.
    pub fn read(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        let path = path.as_ref();
        let (dir, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(SEQUENCE_MANIFEST))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let bytes = fs::read(&manifest_path).map_err(|e| FormatError::io(&manifest_path, e))?;
        let manifest: SequenceManifest =
            serde_json::from_slice(&bytes).map_err(|e| FormatError::json(&manifest_path, e))?;
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for name in manifest.frames.iter().chain(std::iter::once(&manifest.groundtruth)) {
            if !is_plain_name(name) {
                return Err(FormatError::Invalid(format!("{name}: file names must not contain paths")));
            }
        }
        for name in &manifest.frames {
            let p = dir.join(name);
            let img = if name.ends_with(".pgm") {
                let b = fs::read(&p).map_err(|e| FormatError::io(&p, e))?;
                GrayImage::decode_pgm(&b).map_err(|e| FormatError::Invalid(format!("{}: {e}", p.display())))?
            } else {
                GrayImage::from_tensor(&read_tensor::<f64>(&p)?)?
            };
            frames.push(img);
        }
        let gt_path = dir.join(&manifest.groundtruth);
        let text = fs::read_to_string(&gt_path).map_err(|e| FormatError::io(&gt_path, e))?;
        let groundtruth = parse_groundtruth(&text)?;
        if groundtruth.len() != frames.len() {
            return Err(FormatError::Invalid(format!(
                "{}: {} boxes for {} frames",
                gt_path.display(),
                groundtruth.len(),
                frames.len()
            )));
        }
        Ok(Self {
            frames,
            groundtruth,
            meta: manifest.meta,
        })
    }
}
