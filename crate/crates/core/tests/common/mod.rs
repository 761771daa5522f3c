//! Synthetic low-light pairs for the integration and acceptance tests.
#![allow(dead_code)]

use evrwkv::events::{Event, EventStream};
use evrwkv::model::event_voxels;
use evrwkv::train::ToyPair;
use evrwkv::{RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct Synthetic {
    pub sharp: Tensor,
    pub low: Tensor,
    pub events: EventStream,
}

/// Smooth colour field: a few random Gaussian blobs per channel on a
/// gradient, in `[0.05, 0.95]`.
pub fn sharp_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let blobs: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.random_range(0.0..h as f64),
                    rng.random_range(0.0..w as f64),
                    rng.random_range(0.1..0.3) * h as f64,
                    rng.random_range(-0.5..0.6),
                )
            })
            .collect();
        let (gy, gx) = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
                let mut v = 0.45 + gy * (fy - 0.5) + gx * (fx - 0.5);
                for &(cy, cx, s, a) in &blobs {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    v += a * (-d2 / (2.0 * s * s)).exp();
                }
                data[(c * h + y) * w + x] = v.clamp(0.05, 0.95);
            }
        }
    }
    Tensor::new(&[3, h, w], data).unwrap()
}

/// `0.25·x^2.2` plus Gaussian noise of standard deviation 0.01, clamped.
pub fn darken(img: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut out = img.map(|v| 0.25 * v.powf(2.2));
    for v in out.data_mut() {
        *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

fn luma(img: &Tensor, y: isize, x: isize) -> f64 {
    let (_, h, w) = img.dims3().unwrap();
    let y = y.clamp(0, h as isize - 1) as usize;
    let x = x.clamp(0, w as isize - 1) as usize;
    let d = img.data();
    let p = h * w;
    0.299 * d[y * w + x] + 0.587 * d[p + y * w + x] + 0.114 * d[2 * p + y * w + x]
}

/// Events from a horizontal sweep: the sharp image is shifted by one pixel
/// per frame and every log-intensity change of `threshold` fires one event.
pub fn sweep_events(img: &Tensor, frames: usize, threshold: f64, frame_us: u64) -> EventStream {
    let (_, h, w) = img.dims3().unwrap();
    let mut events = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut reference = luma(img, y as isize, x as isize).max(1e-3).ln();
            for f in 1..=frames {
                let cur = luma(img, y as isize, x as isize - f as isize).max(1e-3).ln();
                let delta = cur - reference;
                let n = (delta.abs() / threshold).floor() as u64;
                for k in 0..n {
                    let t = (f as u64 - 1) * frame_us + (k + 1) * frame_us / (n + 1);
                    events.push(Event {
                        t,
                        x: x as u16,
                        y: y as u16,
                        polarity: if delta > 0.0 { 1 } else { -1 },
                    });
                }
                reference += delta.signum() * n as f64 * threshold;
            }
        }
    }
    EventStream::new(events, Some((h, w))).unwrap()
}

pub fn synthetic(h: usize, w: usize, seed: u64) -> Synthetic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sharp = sharp_image(h, w, &mut rng);
    let low = darken(&sharp, &mut rng);
    let events = sweep_events(&sharp, 4, 0.05, 1000);
    Synthetic { sharp, low, events }
}

pub fn toy_pair(cfg: &RunConfig, seed: u64) -> ToyPair {
    let s = synthetic(cfg.image_size, cfg.image_size, seed);
    let voxels = event_voxels(&s.events, cfg, None, cfg.image_size, cfg.image_size).unwrap();
    ToyPair { low: s.low, gt: s.sharp, voxels }
}
