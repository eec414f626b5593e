//! Procedural scenes and low-light renderings of them, for smoke runs,
//! tests and benchmarks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::image::ImageTensor;
use crate::nn::stream_rng;

/// Smooth colour gradients overlaid with a few flat rectangles and discs.
pub fn scene(h: usize, w: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = stream_rng(seed, &[0x7363_656e]);
    let base: [[f32; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(0.15..0.85)));
    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(3..7) {
        let cy = rng.random_range(0.0..h as f32);
        let cx = rng.random_range(0.0..w as f32);
        let r = rng.random_range(0.08..0.3) * h.min(w) as f32;
        let disc = rng.random_bool(0.5);
        let col: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        shapes.push((cy, cx, r, disc, col));
    }
    ImageTensor::from_fn(h, w, 3, |(y, x, c)| {
        let (fy, fx) = (y as f32 / h as f32, x as f32 / w as f32);
        let mut v = base[0][c] * (1.0 - fx) + base[1][c] * fx + (base[2][c] - 0.5) * fy;
        for &(cy, cx, r, disc, col) in &shapes {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let inside = if disc {
                dy * dy + dx * dx <= r * r
            } else {
                dy.abs() <= r && dx.abs() <= r * 0.6
            };
            if inside {
                v = col[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// Darkens `gt` by `gain`, adds Gaussian noise of std `noise` and rounds to
/// 8 bits.
pub fn darken(gt: &ImageTensor, gain: f32, noise: f64, seed: u64) -> Result<ImageTensor> {
    let mut rng = stream_rng(seed, &[0x6461_726b]);
    let n = Normal::new(0.0, noise.max(0.0)).expect("non-negative std");
    let mut data = gt.data().mapv(|v| v * gain);
    data.mapv_inplace(|v| {
        let noisy = v + n.sample(&mut rng) as f32;
        (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0
    });
    ImageTensor::from_clamped(data)
}

/// `n` (low, ground truth) pairs of size `h` x `w`.
pub fn low_light_pairs(n: usize, h: usize, w: usize, seed: u64) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    (0..n)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let gt = scene(h, w, s)?;
            let gain = 0.08 + 0.1 * (i % 5) as f32 / 4.0;
            Ok((darken(&gt, gain, 0.01, s)?, gt))
        })
        .collect()
}
