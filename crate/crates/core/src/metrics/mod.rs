//! Full-reference (PSNR, SSIM) and no-reference (NIQE) quality metrics.

pub mod niqe;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use niqe::{fit_niqe_model, niqe, NiqeModel};

/// PSNR returned for identical images.
pub const PSNR_CAP: f64 = 100.0;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` in dB for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Average-pool both images by `max(1, round(min(H, W) / 256))` first,
    /// as the original reference script does.
    pub auto_downsample: bool,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            auto_downsample: false,
        }
    }
}

/// Mean SSIM, averaged over channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    ssim_with(a, b, &SsimOptions::default())
}

pub fn ssim_with(a: &ImageTensor, b: &ImageTensor, opts: &SsimOptions) -> Result<f64> {
    same_shape(a, b)?;
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (x, y) = if opts.auto_downsample {
            let f = ((a.height().min(a.width()) as f64 / 256.0).round() as usize).max(1);
            (box_downsample(a.channel(c), f), box_downsample(b.channel(c), f))
        } else {
            (a.channel(c).mapv(f64::from), b.channel(c).mapv(f64::from))
        };
        total += ssim_plane(x.view(), y.view(), opts)?;
    }
    Ok(total / a.channels() as f64)
}

fn box_downsample(p: ArrayView2<'_, f32>, f: usize) -> Array2<f64> {
    if f == 1 {
        return p.mapv(f64::from);
    }
    // same-size f x f mean filter (symmetric edges), then every f-th sample
    let (h, w) = p.dim();
    let r = (f - 1) / 2;
    let at = |i: isize, n: usize| crate::image::reflect_index(i, n);
    let filtered = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut s = 0.0;
        for dy in 0..f {
            for dx in 0..f {
                let yy = at(y as isize + dy as isize - r as isize, h);
                let xx = at(x as isize + dx as isize - r as isize, w);
                s += p[[yy, xx]] as f64;
            }
        }
        s / (f * f) as f64
    });
    Array2::from_shape_fn((h.div_ceil(f), w.div_ceil(f)), |(y, x)| filtered[[y * f, x * f]])
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering.
fn filter_valid(p: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = p.dim();
    let rows = Array2::from_shape_fn((h, w + 1 - k), |(y, x)| (0..k).map(|i| taps[i] * p[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((h + 1 - k, w + 1 - k), |(y, x)| {
        (0..k).map(|i| taps[i] * rows[[y + i, x]]).sum::<f64>()
    })
}

fn ssim_plane(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, o: &SsimOptions) -> Result<f64> {
    let (h, w) = x.dim();
    if h < o.window || w < o.window {
        return Err(Error::TooSmall(format!("{h}x{w} smaller than SSIM window {}", o.window)));
    }
    let taps = gaussian_taps(o.window, o.sigma);
    let x = x.to_owned();
    let y = y.to_owned();
    let mx = filter_valid(&x, &taps);
    let my = filter_valid(&y, &taps);
    let sxx = filter_valid(&(&x * &x), &taps);
    let syy = filter_valid(&(&y * &y), &taps);
    let sxy = filter_valid(&(&x * &y), &taps);
    let c1 = o.k1 * o.k1;
    let c2 = o.k2 * o.k2;
    let mut acc = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx.as_slice().unwrap()[i], my.as_slice().unwrap()[i]);
        let vx = sxx.as_slice().unwrap()[i] - ux * ux;
        let vy = syy.as_slice().unwrap()[i] - uy * uy;
        let cxy = sxy.as_slice().unwrap()[i] - ux * uy;
        acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(acc / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noisy(img: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
        use rand_distr::{Distribution, Normal};
        let mut rng = crate::nn::stream_rng(seed, &[]);
        let n = Normal::new(0.0, sigma).unwrap();
        let d = img.data().mapv(|v| (v as f64 + n.sample(&mut rng)) as f32);
        ImageTensor::from_clamped(d).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(8, 8, 3, 0.5).unwrap();
        let b = ImageTensor::filled(8, 8, 3, 0.25).unwrap();
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((psnr(&a, &b).unwrap() - 10.0 * 16f64.log10()).abs() < 1e-9);
        assert!((psnr(&a, &b).unwrap() - 12.04).abs() < 0.005);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &ImageTensor::filled(4, 8, 3, 0.5).unwrap()).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let img = ImageTensor::from_fn(32, 32, 3, |(y, x, c)| 0.3 + 0.4 * ((y + 2 * x + c) % 16) as f32 / 16.0).unwrap();
        let p: Vec<f64> = [0.01, 0.05, 0.1]
            .iter()
            .map(|&s| psnr(&img, &noisy(&img, s, 3)).unwrap())
            .collect();
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = crate::nn::stream_rng(1, &[]);
        let x = ImageTensor::from_fn(20, 24, 3, |_| rng.random::<f32>()).unwrap();
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let board = ImageTensor::from_fn(11, 11, 1, |(y, x, _)| ((y + x) % 2) as f32).unwrap();
        let inv = ImageTensor::from_fn(11, 11, 1, |(y, x, _)| 1.0 - board.data()[[y, x, 0]]).unwrap();
        assert!(ssim(&board, &inv).unwrap() < 0.0);
        assert_eq!(ssim(&board, &inv).unwrap(), ssim(&inv, &board).unwrap());
        let shifted = ImageTensor::from_fn(20, 24, 3, |(y, c_, c)| 0.1 + 0.8 * x.data()[[y, c_, c]]).unwrap();
        let plus = ImageTensor::from_fn(20, 24, 3, |(y, x, c)| shifted.data()[[y, x, c]] + 0.05).unwrap();
        assert!(ssim(&shifted, &plus).unwrap() < 1.0);
        let small = ImageTensor::filled(10, 30, 1, 0.5).unwrap();
        assert!(matches!(ssim(&small, &small), Err(Error::TooSmall(_))));
    }

    #[test]
    fn ssim_matches_direct_window_sum() {
        let mut rng = crate::nn::stream_rng(2, &[]);
        let a = ImageTensor::from_fn(13, 12, 1, |_| rng.random::<f32>()).unwrap();
        let b = ImageTensor::from_fn(13, 12, 1, |_| rng.random::<f32>()).unwrap();
        let taps = gaussian_taps(11, 1.5);
        let mut acc = 0.0;
        let mut count = 0;
        for y0 in 0..3 {
            for x0 in 0..2 {
                let (mut ux, mut uy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let w = taps[i] * taps[j];
                        let p = a.data()[[y0 + i, x0 + j, 0]] as f64;
                        let q = b.data()[[y0 + i, x0 + j, 0]] as f64;
                        ux += w * p;
                        uy += w * q;
                        sxx += w * p * p;
                        syy += w * q * q;
                        sxy += w * p * q;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                acc += ((2.0 * ux * uy + c1) * (2.0 * (sxy - ux * uy) + c2))
                    / ((ux * ux + uy * uy + c1) * (sxx - ux * ux + syy - uy * uy + c2));
                count += 1;
            }
        }
        assert!((ssim(&a, &b).unwrap() - acc / count as f64).abs() < 1e-12);
    }

    #[test]
    fn ssim_auto_downsample() {
        let mut rng = crate::nn::stream_rng(4, &[]);
        let a = ImageTensor::from_fn(512, 40, 1, |_| rng.random::<f32>()).unwrap();
        let opts = SsimOptions {
            auto_downsample: true,
            ..Default::default()
        };
        assert!((ssim_with(&a, &a, &opts).unwrap() - 1.0).abs() < 1e-12);
        // min side 40 -> factor 1, identical to the default path
        let b = ImageTensor::from_fn(512, 40, 1, |_| rng.random::<f32>()).unwrap();
        assert_eq!(ssim_with(&a, &b, &opts).unwrap(), ssim(&a, &b).unwrap());
    }
}
