//! Synthetic gesture corpus, temporal windowing/chunking, input crops,
//! augmentation and the `.gkdd` dataset file.

mod augment;
mod io;
mod synth;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar, Tensor};

pub use augment::{apply_affine, augment, augment_with, AffineDraw, AugmentConfig};
pub use io::{decode_dataset, encode_dataset, load, save};
pub use synth::{generate_sample, synth_generate, CLASS_NAMES, MAX_FRAMES, MIN_FRAMES, NOISE_SIGMA};

pub const FRAME_SIZE: usize = 64;
pub const FRAME_CHANNELS: usize = 2;
pub const FRAME_PIXELS: usize = FRAME_SIZE * FRAME_SIZE;
pub const FRAME_BYTES: usize = FRAME_CHANNELS * FRAME_PIXELS;
pub const CLIP_FRAMES: usize = 32;
pub const CHUNK_FRAMES: usize = 4;
pub const HAND_CROP: usize = 32;

// ── Samples ─────────────────────────────────────────────────────────────

/// One video: `T` two-channel 64×64 frames stored as u8, channel 0 gray and
/// channel 1 depth, plus a per-frame `(x, y)` blob keypoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GestureSample {
    pub id: u32,
    pub label: u16,
    pub keypoints: Vec<[u8; 2]>,
    /// `T×2×64×64`, row-major.
    pub pixels: Vec<u8>,
}

impl GestureSample {
    pub fn new(id: u32, label: u16, keypoints: Vec<[u8; 2]>, pixels: Vec<u8>) -> Result<Self> {
        if pixels.is_empty() || !pixels.len().is_multiple_of(FRAME_BYTES) {
            return Err(Error::shape(format!(
                "sample {id}: {} pixel bytes is not a positive multiple of {FRAME_BYTES}",
                pixels.len()
            )));
        }
        let t = pixels.len() / FRAME_BYTES;
        if !keypoints.is_empty() && keypoints.len() != t {
            return Err(Error::shape(format!(
                "sample {id}: {} keypoints for {t} frames",
                keypoints.len()
            )));
        }
        if keypoints.iter().flatten().any(|&k| k as usize >= FRAME_SIZE) {
            return Err(Error::invalid(format!("sample {id}: keypoint outside frame")));
        }
        Ok(GestureSample {
            id,
            label,
            keypoints,
            pixels,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.pixels.len() / FRAME_BYTES
    }

    pub fn label(&self) -> usize {
        self.label as usize
    }

    /// Channel `c` of frame `t` as a 64×64 plane.
    pub fn plane(&self, t: usize, c: usize) -> &[u8] {
        let start = t * FRAME_BYTES + c * FRAME_PIXELS;
        &self.pixels[start..start + FRAME_PIXELS]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Hand,
    #[default]
    UpperBody,
    Combined,
}

impl InputMode {
    pub fn channels(self) -> usize {
        match self {
            InputMode::Combined => 2 * FRAME_CHANNELS,
            _ => FRAME_CHANNELS,
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Hand => "hand",
            InputMode::UpperBody => "upper_body",
            InputMode::Combined => "combined",
        })
    }
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hand" => Ok(InputMode::Hand),
            "upper_body" => Ok(InputMode::UpperBody),
            "combined" => Ok(InputMode::Combined),
            _ => Err(Error::invalid(format!(
                "unknown input mode {s:?} (expected hand, upper_body or combined)"
            ))),
        }
    }
}

// ── Model inputs ────────────────────────────────────────────────────────

fn to_unit(v: u8) -> f32 {
    v as f32 / 255.0
}

/// Bilinear zoom of the 32×32 window at `(x0, y0)` to 64×64 with half-pixel
/// centers, clamping to the window edge.
fn resize_crop(plane: &[u8], x0: usize, y0: usize, out: &mut [f32]) {
    let scale = HAND_CROP as f32 / FRAME_SIZE as f32;
    let max = (HAND_CROP - 1) as f32;
    let coord = |u: usize| ((u as f32 + 0.5) * scale - 0.5).clamp(0.0, max);
    for v in 0..FRAME_SIZE {
        let sy = coord(v);
        let (y, fy) = (sy.floor() as usize, sy.fract());
        let y1 = (y + 1).min(HAND_CROP - 1);
        for u in 0..FRAME_SIZE {
            let sx = coord(u);
            let (x, fx) = (sx.floor() as usize, sx.fract());
            let x1 = (x + 1).min(HAND_CROP - 1);
            let px = |yy: usize, xx: usize| to_unit(plane[(y0 + yy) * FRAME_SIZE + x0 + xx]);
            let top = px(y, x) * (1.0 - fx) + px(y, x1) * fx;
            let bottom = px(y1, x) * (1.0 - fx) + px(y1, x1) * fx;
            out[v * FRAME_SIZE + u] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

/// Top-left corner of the hand window around keypoint `k`, kept inside the frame.
pub fn hand_window(k: [u8; 2]) -> (usize, usize) {
    let corner = |c: u8| (c as usize).saturating_sub(HAND_CROP / 2).min(FRAME_SIZE - HAND_CROP);
    (corner(k[0]), corner(k[1]))
}

/// Per-frame image stack as a `C×T×64×64` tensor in `[0, 1]`: the full
/// frame, the resized hand window, or both concatenated along channels.
pub fn make_input(sample: &GestureSample, mode: InputMode) -> Result<Tensor<f32>> {
    let t = sample.frame_count();
    if mode != InputMode::UpperBody && sample.keypoints.len() != t {
        return Err(Error::invalid(format!(
            "sample {}: input mode {mode} needs keypoints",
            sample.id
        )));
    }
    let channels = mode.channels();
    let mut data = vec![0f32; channels * t * FRAME_PIXELS];
    let plane_at = |c: usize, f: usize| (c * t + f) * FRAME_PIXELS;
    for f in 0..t {
        for c in 0..FRAME_CHANNELS {
            let src = sample.plane(f, c);
            if mode != InputMode::Hand {
                let o = plane_at(c, f);
                for (d, &s) in data[o..o + FRAME_PIXELS].iter_mut().zip(src) {
                    *d = to_unit(s);
                }
            }
            if mode != InputMode::UpperBody {
                let hc = if mode == InputMode::Combined {
                    c + FRAME_CHANNELS
                } else {
                    c
                };
                let (x0, y0) = hand_window(sample.keypoints[f]);
                let o = plane_at(hc, f);
                resize_crop(src, x0, y0, &mut data[o..o + FRAME_PIXELS]);
            }
        }
    }
    Tensor::new(vec![channels, t, FRAME_SIZE, FRAME_SIZE], data)
}

/// Source frame for each of `frames` output positions of a centered window
/// over a `t`-frame video; `None` marks zero padding.
pub fn window_sources(t: usize, frames: usize) -> Vec<Option<usize>> {
    if t >= frames {
        let start = (t - frames) / 2;
        (start..start + frames).map(Some).collect()
    } else {
        let before = (frames - t) / 2;
        (0..frames).map(|i| i.checked_sub(before).filter(|&s| s < t)).collect()
    }
}

fn check_video<T: Scalar>(video: &Tensor<T>) -> Result<[usize; 4]> {
    match *video.shape() {
        [c, t, h, w] => Ok([c, t, h, w]),
        _ => Err(Error::shape(format!("video must be C×T×H×W, got {:?}", video.shape()))),
    }
}

/// Gathers frames of a `C×T×H×W` video by source index, zero where `None`.
fn gather_frames<T: Scalar>(video: &Tensor<T>, sources: &[Option<usize>]) -> Result<Tensor<T>> {
    let [c, t, h, w] = check_video(video)?;
    let plane = h * w;
    let mut out = vec![T::zero(); c * sources.len() * plane];
    for ch in 0..c {
        for (i, s) in sources.iter().enumerate() {
            if let Some(s) = *s {
                let src = (ch * t + s) * plane;
                let dst = (ch * sources.len() + i) * plane;
                out[dst..dst + plane].copy_from_slice(&video.data()[src..src + plane]);
            }
        }
    }
    Tensor::new(vec![c, sources.len(), h, w], out)
}

/// Central `frames`-frame window, zero padding split before/after
/// (the extra frame goes after).
pub fn center_window<T: Scalar>(video: &Tensor<T>, frames: usize) -> Result<Tensor<T>> {
    let [_, t, _, _] = check_video(video)?;
    gather_frames(video, &window_sources(t, frames))
}

pub fn center_window_32<T: Scalar>(video: &Tensor<T>) -> Result<Tensor<T>> {
    center_window(video, CLIP_FRAMES)
}

/// Consecutive `frames`-frame blocks; the last one is zero padded at the end.
pub fn chunk_blocks<T: Scalar>(video: &Tensor<T>, frames: usize) -> Result<Vec<Tensor<T>>> {
    let [_, t, _, _] = check_video(video)?;
    (0..t.div_ceil(frames))
        .map(|b| {
            let sources: Vec<Option<usize>> = (b * frames..(b + 1) * frames).map(|s| (s < t).then_some(s)).collect();
            gather_frames(video, &sources)
        })
        .collect()
}

pub fn chunk4<T: Scalar>(video: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    chunk_blocks(video, CHUNK_FRAMES)
}

// ── Datasets ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    /// Sample-index range of a split; ids are assigned train, val, test.
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.train,
            Split::Val => self.train..self.train + self.val,
            Split::Test => self.train + self.val..self.total(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_count: usize,
    pub counts: SplitCounts,
    pub seed: u64,
    pub augmentation: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<GestureSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[GestureSample] {
        &self.samples[self.manifest.counts.range(split)]
    }

    pub fn class_count(&self) -> usize {
        self.manifest.class_count
    }

    /// Per-class sample counts of a split.
    pub fn class_histogram(&self, split: Split) -> Vec<usize> {
        let mut h = vec![0; self.class_count()];
        for s in self.split(split) {
            h[s.label()] += 1;
        }
        h
    }
}
