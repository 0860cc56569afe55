use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GestureSample, FRAME_CHANNELS, FRAME_PIXELS, FRAME_SIZE};

const CENTER: f64 = (FRAME_SIZE as f64 - 1.0) / 2.0;

/// Ranges for the per-sample random affine transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub max_rotation_deg: f64,
    pub max_shift_px: f64,
    pub min_zoom: f64,
    pub max_zoom: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            max_rotation_deg: 10.0,
            max_shift_px: 4.0,
            min_zoom: 0.9,
            max_zoom: 1.1,
        }
    }
}

/// One concrete transform: rotate by `angle_deg` and scale by `zoom` about
/// the frame center, then shift by `shift` pixels (x, y).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineDraw {
    pub angle_deg: f64,
    pub shift: [f64; 2],
    pub zoom: f64,
}

impl AffineDraw {
    pub const IDENTITY: AffineDraw = AffineDraw {
        angle_deg: 0.0,
        shift: [0.0, 0.0],
        zoom: 1.0,
    };

    fn rotation(&self) -> (f64, f64) {
        let r = self.angle_deg.to_radians();
        (r.cos(), r.sin())
    }

    /// Destination of source point `(x, y)`.
    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = self.rotation();
        let (dx, dy) = (x - CENTER, y - CENTER);
        (
            CENTER + self.zoom * (c * dx - s * dy) + self.shift[0],
            CENTER + self.zoom * (s * dx + c * dy) + self.shift[1],
        )
    }

    /// Source of destination point `(x, y)`.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (c, s) = self.rotation();
        let (dx, dy) = (x - CENTER - self.shift[0], y - CENTER - self.shift[1]);
        (
            CENTER + (c * dx + s * dy) / self.zoom,
            CENTER + (-s * dx + c * dy) / self.zoom,
        )
    }
}

impl AugmentConfig {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineDraw {
        let sym = |rng: &mut R, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let angle_deg = sym(rng, self.max_rotation_deg);
        let shift = [sym(rng, self.max_shift_px), sym(rng, self.max_shift_px)];
        let zoom = if self.max_zoom > self.min_zoom {
            rng.random_range(self.min_zoom..=self.max_zoom)
        } else {
            self.min_zoom
        };
        AffineDraw { angle_deg, shift, zoom }
    }
}

/// Bilinear sample with zero outside the frame.
fn sample_plane(plane: &[u8], x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= FRAME_SIZE as f64 || yi >= FRAME_SIZE as f64 {
            0.0
        } else {
            plane[yi as usize * FRAME_SIZE + xi as usize] as f64
        }
    };
    let mut v = 0.0;
    for (wy, yi) in [(1.0 - fy, y0), (fy, y0 + 1.0)] {
        for (wx, xi) in [(1.0 - fx, x0), (fx, x0 + 1.0)] {
            let w = wx * wy;
            if w != 0.0 {
                v += w * at(xi, yi);
            }
        }
    }
    v
}

/// Applies one transform to every frame and channel of a sample.
pub fn apply_affine(sample: &GestureSample, draw: &AffineDraw) -> GestureSample {
    let sources: Vec<(f64, f64)> = (0..FRAME_PIXELS)
        .map(|i| draw.inverse((i % FRAME_SIZE) as f64, (i / FRAME_SIZE) as f64))
        .collect();
    let mut pixels = Vec::with_capacity(sample.pixels.len());
    for t in 0..sample.frame_count() {
        for c in 0..FRAME_CHANNELS {
            let plane = sample.plane(t, c);
            pixels.extend(
                sources
                    .iter()
                    .map(|&(x, y)| sample_plane(plane, x, y).round().clamp(0.0, 255.0) as u8),
            );
        }
    }
    let keypoints = sample
        .keypoints
        .iter()
        .map(|&[x, y]| {
            let (nx, ny) = draw.forward(x as f64, y as f64);
            let clamp = |v: f64| v.round().clamp(0.0, (FRAME_SIZE - 1) as f64) as u8;
            [clamp(nx), clamp(ny)]
        })
        .collect();
    GestureSample {
        id: sample.id,
        label: sample.label,
        keypoints,
        pixels,
    }
}

pub fn augment_with<R: Rng + ?Sized>(sample: &GestureSample, config: &AugmentConfig, rng: &mut R) -> GestureSample {
    apply_affine(sample, &config.draw(rng))
}

/// Random rotation, translation and zoom with the default ranges.
pub fn augment<R: Rng + ?Sized>(sample: &GestureSample, rng: &mut R) -> GestureSample {
    augment_with(sample, &AugmentConfig::default(), rng)
}
