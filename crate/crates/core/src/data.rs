//! Synthetic motion-direction videos and CSV dataset manifests.
//!
//! A synthetic video is a single bright Gaussian blob drifting across a
//! toroidal frame with a class-specific direction, plus white noise. The
//! starting position is uniform on the torus, so any single frame has the
//! same distribution for every class: only the order of frames carries the
//! label.
//!
//! Manifests are plain text:
//!
//! ```text
//! # classes=4
//! # split=train
//! # kind=frames
//! train/video_00000.fvnt,0
//! train/video_00001.fvnt,1
//! ```
//!
//! Header lines are optional. Paths are resolved relative to the manifest's
//! directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::extract::lcn;
use crate::rng;
use crate::tensor::{read_tensor, write_tensor, DType, Tensor4};

/// Unit motion per class: up, down, left, right, then the four diagonals.
const DIRECTIONS: [(f64, f64); 8] = [
    (-1.0, 0.0),
    (1.0, 0.0),
    (0.0, -1.0),
    (0.0, 1.0),
    (-1.0, -1.0),
    (-1.0, 1.0),
    (1.0, -1.0),
    (1.0, 1.0),
];

pub const MIN_FRAMES: usize = 15;
pub const MIN_SIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// What the manifest's tensor files hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputKind {
    /// Raw frames `(L, H, W, channels)`, fed through the conv extractor.
    #[default]
    Frames,
    /// Precomputed feature maps `(L, F_h, F_w, d)`.
    Features,
}

impl InputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InputKind::Frames => "frames",
            InputKind::Features => "features",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Blob displacement per frame, in pixels.
    pub speed: f64,
    /// Blob standard deviation, in pixels.
    pub blob_sigma: f64,
    pub blob_amplitude: f64,
    pub noise_std: f64,
}

impl SyntheticConfig {
    pub fn new(seed: u64, classes: usize, per_class: usize, frames: usize, height: usize, width: usize) -> Self {
        SyntheticConfig {
            seed,
            classes,
            per_class,
            frames,
            height,
            width,
            speed: 1.0,
            blob_sigma: 2.5,
            blob_amplitude: 1.0,
            noise_std: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.classes) {
            return Err(Error::config(format!("classes must be in 2..=8, got {}", self.classes)));
        }
        if self.height < MIN_SIDE || self.width < MIN_SIDE {
            return Err(Error::config(format!(
                "frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames < MIN_FRAMES {
            return Err(Error::config(format!(
                "videos need at least {MIN_FRAMES} frames, got {}",
                self.frames
            )));
        }
        let finite = [self.speed, self.blob_sigma, self.blob_amplitude, self.noise_std];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || self.blob_sigma == 0.0 {
            return Err(Error::config("speed, blob_sigma, blob_amplitude and noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Input preprocessing applied before the extractor.
pub fn prepare(kind: InputKind, raw: &Tensor4) -> Tensor4 {
    match kind {
        InputKind::Frames => lcn(raw),
        InputKind::Features => raw.clone().with_dtype(DType::F64),
    }
}

#[derive(Debug, Clone)]
pub struct VideoSample {
    pub video: Tensor4,
    pub label: usize,
}

fn torus_delta(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Render one video of class `label`. Videos are drawn from an independent
/// stream keyed by `index`.
pub fn render_video(cfg: &SyntheticConfig, label: usize, index: u64) -> Tensor4 {
    let mut rng = rng::stream(cfg.seed, index);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let start_y = rng.random::<f64>() * h;
    let start_x = rng.random::<f64>() * w;
    let (dy, dx) = DIRECTIONS[label];
    let norm = (dy * dy + dx * dx).sqrt();
    let (vy, vx) = (cfg.speed * dy / norm, cfg.speed * dx / norm);
    let inv_two_var = 1.0 / (2.0 * cfg.blob_sigma * cfg.blob_sigma);

    let dims = [cfg.frames, cfg.height, cfg.width, 1];
    let mut video = Tensor4::zeros(dims);
    let data = video.data_mut();
    let mut i = 0;
    for f in 0..cfg.frames {
        let cy = start_y + vy * f as f64;
        let cx = start_x + vx * f as f64;
        for y in 0..cfg.height {
            let ddy = torus_delta(y as f64, cy, h);
            for x in 0..cfg.width {
                let ddx = torus_delta(x as f64, cx, w);
                let blob = cfg.blob_amplitude * (-(ddy * ddy + ddx * ddx) * inv_two_var).exp();
                let noise: f64 = StandardNormal.sample(&mut rng);
                data[i] = blob + cfg.noise_std * noise;
                i += 1;
            }
        }
    }
    video.with_dtype(DType::F32)
}

/// Class-interleaved samples: index `i` has label `i % classes`.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<Vec<VideoSample>> {
    cfg.validate()?;
    let total = cfg.classes * cfg.per_class;
    Ok((0..total)
        .map(|i| {
            let label = i % cfg.classes;
            VideoSample {
                video: render_video(cfg, label, i as u64),
                label,
            }
        })
        .collect())
}

/// Write a synthetic split under `out_dir` as `<split>/video_XXXXX.fvnt`
/// plus `<split>.csv`, and return the manifest.
pub fn generate_synthetic(cfg: &SyntheticConfig, split: Split, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let samples = synthesize(cfg)?;
    let video_dir = out_dir.join(split.as_str());
    fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let rel = PathBuf::from(split.as_str()).join(format!("video_{i:05}.fvnt"));
        write_tensor(out_dir.join(&rel), &sample.video)?;
        entries.push(ManifestEntry {
            path: rel,
            label: sample.label,
        });
    }
    let manifest = DatasetManifest {
        entries,
        classes: cfg.classes,
        split: Some(split),
        kind: InputKind::Frames,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join(format!("{}.csv", split.as_str())))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub classes: usize,
    pub split: Option<Split>,
    pub kind: InputKind,
    /// Directory that relative entry paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }

    pub fn load_video(&self, entry: &ManifestEntry) -> Result<Tensor4> {
        read_tensor(self.resolve(entry))
    }

    /// Load every entry ready for the network: raw frames get local contrast
    /// normalization, precomputed features are passed through.
    pub fn load_samples(&self) -> Result<Vec<VideoSample>> {
        self.entries
            .par_iter()
            .map(|e| {
                let raw = self.load_video(e)?;
                Ok(VideoSample {
                    video: prepare(self.kind, &raw),
                    label: e.label,
                })
            })
            .collect()
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut entries = Vec::new();
        let mut classes = None;
        let mut split = None;
        let mut kind = InputKind::Frames;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Manifest { line: line_no, msg };
            if let Some(header) = line.strip_prefix('#') {
                let Some((key, value)) = header.split_once('=') else {
                    continue;
                };
                let value = value.trim();
                match key.trim() {
                    "classes" => {
                        classes = Some(value.parse::<usize>().map_err(|_| err(format!("bad class count {value:?}")))?)
                    }
                    "split" => split = Some(Split::parse(value).ok_or_else(|| err(format!("unknown split {value:?}")))?),
                    "kind" => {
                        kind = match value {
                            "frames" => InputKind::Frames,
                            "features" => InputKind::Features,
                            other => return Err(err(format!("unknown kind {other:?}"))),
                        }
                    }
                    other => return Err(err(format!("unknown header key {other:?}"))),
                }
                continue;
            }
            let (path, label) = line
                .rsplit_once(',')
                .ok_or_else(|| err("expected \"path,label\"".into()))?;
            let path = path.trim();
            if path.is_empty() {
                return Err(err("empty path".into()));
            }
            let label = label
                .trim()
                .parse::<usize>()
                .map_err(|_| err(format!("bad label {:?}", label.trim())))?;
            entries.push(ManifestEntry {
                path: PathBuf::from(path),
                label,
            });
        }
        let max_label = entries.iter().map(|e| e.label + 1).max().unwrap_or(0);
        let classes = match classes {
            Some(m) => {
                if let Some(bad) = entries.iter().find(|e| e.label >= m) {
                    return Err(Error::Validation(format!(
                        "label {} of {} is not below class count {m}",
                        bad.label,
                        bad.path.display()
                    )));
                }
                m
            }
            None => max_label,
        };
        Ok(DatasetManifest {
            entries,
            classes,
            split,
            kind,
            base_dir: base_dir.into(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# classes={}", self.classes).unwrap();
        if let Some(split) = self.split {
            writeln!(out, "# split={}", split.as_str()).unwrap();
        }
        writeln!(out, "# kind={}", self.kind.as_str()).unwrap();
        for e in &self.entries {
            writeln!(out, "{},{}", e.path.display(), e.label).unwrap();
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, base)
}
