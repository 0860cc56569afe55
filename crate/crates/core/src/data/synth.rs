use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{
    AugmentConfig, Dataset, DatasetManifest, GestureSample, SplitCounts, FRAME_BYTES, FRAME_PIXELS, FRAME_SIZE,
};
use crate::exec::{map_range, Parallelism};
use crate::{Error, Result};

pub const CLASS_NAMES: [&str; 8] = [
    "up",
    "down",
    "left",
    "right",
    "clockwise",
    "counter_clockwise",
    "expand",
    "contract",
];
pub const MIN_FRAMES: usize = 16;
pub const MAX_FRAMES: usize = 48;
pub const NOISE_SIGMA: f64 = 0.05;

const CENTER: f64 = (FRAME_SIZE as f64 - 1.0) / 2.0;

/// Blob state at one frame.
struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
}

/// Gray intensity profile along one axis, peak 1.
fn profile(center: f64, sigma: f64) -> [f64; FRAME_SIZE] {
    let k = -0.5 / (sigma * sigma);
    std::array::from_fn(|i| {
        let d = i as f64 - center;
        (k * d * d).exp()
    })
}

/// Depth value of the blob: larger blobs read as closer, i.e. darker.
fn depth_intensity(sigma: f64) -> f64 {
    (1.1 - sigma / 10.0).clamp(0.1, 1.0)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders sample `id`; depends only on `(seed, id)`.
pub fn generate_sample(seed: u64, id: u32, class_count: usize) -> Result<GestureSample> {
    if class_count != CLASS_NAMES.len() {
        return Err(Error::invalid(format!(
            "synthetic corpus has exactly {} classes, requested {class_count}",
            CLASS_NAMES.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    let label = id as usize % class_count;

    let frames = rng.random_range(MIN_FRAMES..=MAX_FRAMES);
    let cx = CENTER + rng.random_range(-6.0..6.0);
    let cy = CENTER + rng.random_range(-6.0..6.0);
    let extent = rng.random_range(14.0..22.0);
    let radius = rng.random_range(10.0..15.0);
    let phase = rng.random_range(0.0..TAU);
    let turns = rng.random_range(0.75..1.0);
    let speed = rng.random_range(0.8..1.2);
    let sigma0 = rng.random_range(3.5..5.0);
    let gray = rng.random_range(0.7..1.0);

    let blob_at = |f: usize| -> Blob {
        // progress in [-speed/2, speed/2]
        let p = speed * (f as f64 / (frames - 1) as f64 - 0.5);
        let (mut x, mut y, mut sigma) = (cx, cy, sigma0);
        match label {
            0 => y -= extent * p,
            1 => y += extent * p,
            2 => x -= extent * p,
            3 => x += extent * p,
            4 | 5 => {
                // image y points down, so increasing angle turns clockwise on screen
                let dir = if label == 4 { 1.0 } else { -1.0 };
                let a = phase + dir * TAU * turns * (p + 0.5);
                x += radius * a.cos();
                y += radius * a.sin();
            }
            6 => sigma *= (0.8 * p).exp(),
            _ => sigma *= (-0.8 * p).exp(),
        }
        Blob { x, y, sigma }
    };

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut pixels = Vec::with_capacity(frames * FRAME_BYTES);
    let mut keypoints = Vec::with_capacity(frames);
    for f in 0..frames {
        let b = blob_at(f);
        let px = profile(b.x, b.sigma);
        let py = profile(b.y, b.sigma);
        let depth = depth_intensity(b.sigma);
        for level in [gray, depth] {
            for row in py {
                for col in px {
                    let v = level * row * col + noise.sample(&mut rng);
                    pixels.push(quantize(v));
                }
            }
        }
        let kp = |c: f64| c.round().clamp(0.0, (FRAME_SIZE - 1) as f64) as u8;
        keypoints.push([kp(b.x), kp(b.y)]);
    }
    debug_assert_eq!(pixels.len(), frames * 2 * FRAME_PIXELS);
    GestureSample::new(id, label as u16, keypoints, pixels)
}

/// Balanced corpus with sample ids `0..total`, assigned to train, val and
/// test in that order.
pub fn synth_generate(class_count: usize, counts: SplitCounts, seed: u64, par: Parallelism) -> Result<Dataset> {
    if counts.train == 0 || counts.val == 0 || counts.test == 0 {
        return Err(Error::invalid("every split needs at least one sample"));
    }
    let total = counts.total();
    if total > u32::MAX as usize {
        return Err(Error::invalid("too many samples"));
    }
    let samples = map_range(par, total, |i| generate_sample(seed, i as u32, class_count))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            class_count,
            counts,
            seed,
            augmentation: AugmentConfig::default(),
        },
        samples,
    })
}
