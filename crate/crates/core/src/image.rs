//! Deterministic image primitives: histogram equalization, bright channel,
//! finite-difference gradients, Gaussian blur, and PNG/JPEG I/O.
//!
//! Everything here works on [`ImageTensor`], an `H x W x C` array of `f32`
//! intensities in `[0, 1]` with `C` equal to 1 or 3.

use std::io::Read;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of histogram bins used by [`hist_equalize`].
pub const HIST_BINS: usize = 256;

/// `H x W x C` image with every element finite and inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

impl ImageTensor {
    /// Validates and wraps an `[H, W, C]` array.
    pub fn new(data: Array3<f32>) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::EmptyImage);
        }
        if c != 1 && c != 3 {
            return Err(Error::Channels(c));
        }
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite(index));
            }
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::OutOfRange { index, value });
            }
        }
        Ok(Self { data })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    /// Non-finite values are still rejected.
    pub fn from_clamped(mut data: Array3<f32>) -> Result<Self> {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(index));
        }
        data.mapv_inplace(|v| v.clamp(0.0, 1.0));
        Self::new(data)
    }

    pub fn from_shape_vec(h: usize, w: usize, c: usize, values: Vec<f32>) -> Result<Self> {
        let data = Array3::from_shape_vec((h, w, c), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(data)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f32) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value))
    }

    pub fn from_fn(
        h: usize,
        w: usize,
        c: usize,
        f: impl FnMut((usize, usize, usize)) -> f32,
    ) -> Result<Self> {
        Self::new(Array3::from_shape_fn((h, w, c), f))
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// One channel as a 2-D view.
    pub fn channel(&self, c: usize) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(2), c)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Copies the `[top, top + h) x [left, left + w)` window.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height() || left + w > self.width() || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "crop {h}x{w}@({top},{left}) outside {}x{}",
                self.height(),
                self.width()
            )));
        }
        let view = self
            .data
            .slice(ndarray::s![top..top + h, left..left + w, ..]);
        Ok(Self {
            data: view.to_owned(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        Self {
            data: data.as_standard_layout().to_owned(),
        }
    }

    /// Stacks 1-channel images into a 3-channel one, or returns `self` when
    /// already RGB.
    pub fn to_rgb(&self) -> Self {
        if self.channels() == 3 {
            return self.clone();
        }
        let (h, w, _) = self.dims();
        let data = Array3::from_shape_fn((h, w, 3), |(y, x, _)| self.data[[y, x, 0]]);
        Self { data }
    }
}

/// Horizontal and vertical forward differences of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub horizontal: Array3<f32>,
    pub vertical: Array3<f32>,
}

/// Multi-scale Gaussian blur bank used by the background-consistency loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurBank {
    /// `(sigma, weight)` pairs.
    pub kernels: Vec<(f64, f64)>,
}

impl Default for BlurBank {
    fn default() -> Self {
        Self {
            kernels: vec![(5.0, 0.25), (9.0, 0.5), (15.0, 1.0)],
        }
    }
}

impl BlurBank {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::InvalidArgument("empty blur bank".into()));
        }
        for &(sigma, weight) in &self.kernels {
            if !(sigma > 0.0) || !(weight > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "blur bank entry ({sigma}, {weight}) must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn weight_sum(&self) -> f64 {
        self.kernels.iter().map(|k| k.1).sum()
    }
}

/// How histogram equalization treats the colour channels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeMode {
    /// Independent 256-bin histogram per channel.
    #[default]
    PerChannel,
    /// One histogram pooled over all channels, applied to each of them.
    Joint,
}

/// 8-bit bin of an intensity in `[0, 1]`.
#[inline]
pub fn quantize(v: f32) -> usize {
    ((v * 255.0).round() as isize).clamp(0, HIST_BINS as isize - 1) as usize
}

/// Maps each value through the empirical CDF of its own 256-bin histogram.
///
/// Output for a value in bin `k` is `#{values in bins <= k} / n`.
pub fn equalize_values(values: &[f32]) -> Result<Vec<f32>> {
    if values.is_empty() {
        return Err(Error::EmptyImage);
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite(i));
    }
    let lut = cdf_lut(values.iter().copied());
    Ok(values.iter().map(|&v| lut[quantize(v)]).collect())
}

fn cdf_lut(values: impl Iterator<Item = f32>) -> [f32; HIST_BINS] {
    let mut hist = [0u64; HIST_BINS];
    let mut n = 0u64;
    for v in values {
        hist[quantize(v)] += 1;
        n += 1;
    }
    let mut lut = [0f32; HIST_BINS];
    let mut acc = 0u64;
    for (bin, count) in hist.iter().enumerate() {
        acc += count;
        lut[bin] = (acc as f64 / n as f64) as f32;
    }
    lut
}

/// Per-channel histogram equalization.
pub fn hist_equalize(img: &ImageTensor) -> Result<ImageTensor> {
    hist_equalize_with(img, HeMode::PerChannel)
}

pub fn hist_equalize_with(img: &ImageTensor, mode: HeMode) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    let mut out = Array3::<f32>::zeros((h, w, c));
    match mode {
        HeMode::PerChannel => {
            for ch in 0..c {
                let lut = cdf_lut(img.channel(ch).iter().copied());
                out.index_axis_mut(Axis(2), ch)
                    .zip_mut_with(&img.channel(ch), |o, &v| *o = lut[quantize(v)]);
            }
        }
        HeMode::Joint => {
            let lut = cdf_lut(img.data().iter().copied());
            out.zip_mut_with(img.data(), |o, &v| *o = lut[quantize(v)]);
        }
    }
    ImageTensor::new(out)
}

/// Per-pixel maximum over the RGB channels.
pub fn bright_channel(img: &ImageTensor) -> Result<ImageTensor> {
    if img.channels() != 3 {
        return Err(Error::Channels(img.channels()));
    }
    let max = img
        .data()
        .map_axis(Axis(2), |px| px.iter().copied().fold(0.0f32, f32::max));
    ImageTensor::new(max.insert_axis(Axis(2)))
}

/// Forward differences; the last column (horizontal) and last row (vertical)
/// are zero.
pub fn spatial_gradient(img: &ImageTensor) -> GradientPair {
    let (h, w, c) = img.dims();
    let d = img.data();
    let mut horizontal = Array3::<f32>::zeros((h, w, c));
    let mut vertical = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for k in 0..c {
                if x + 1 < w {
                    horizontal[[y, x, k]] = d[[y, x + 1, k]] - d[[y, x, k]];
                }
                if y + 1 < h {
                    vertical[[y, x, k]] = d[[y + 1, x, k]] - d[[y, x, k]];
                }
            }
        }
    }
    GradientPair {
        horizontal,
        vertical,
    }
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid
/// for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Kernel side length: the smallest odd integer `>= 6 sigma + 1`.
pub fn kernel_size(sigma: f64) -> usize {
    let side = (6.0 * sigma + 1.0).ceil() as usize;
    if side % 2 == 0 {
        side + 1
    } else {
        side
    }
}

/// Sampled, normalized 1-D Gaussian.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
    }
    let side = kernel_size(sigma);
    let r = (side / 2) as f64;
    let mut k: Vec<f64> = (0..side)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    Ok(k)
}

/// Dense `n x n` matrix of the 1-D blur with symmetric boundaries, so that
/// blurring a column vector is `A x`.
pub fn blur_matrix(n: usize, sigma: f64) -> Result<Array2<f64>> {
    let k = gaussian_kernel_1d(sigma)?;
    let r = (k.len() / 2) as isize;
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for (t, &kv) in k.iter().enumerate() {
            let src = reflect_index(i as isize + t as isize - r, n);
            a[[i, src]] += kv;
        }
    }
    Ok(a)
}

fn blur_plane(plane: ArrayView2<'_, f32>, kernel: &[f64]) -> Array2<f32> {
    let (h, w) = plane.dim();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * plane[[y, reflect_index(x as isize + t as isize - r, w)]] as f64;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * tmp[[reflect_index(y as isize + t as isize - r, h), x]];
            }
            out[[y, x]] = acc as f32;
        }
    }
    out
}

/// Separable Gaussian blur with symmetric boundary handling.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    let kernel = gaussian_kernel_1d(sigma)?;
    let (h, w, c) = img.dims();
    let mut out = Array3::<f32>::zeros((h, w, c));
    for ch in 0..c {
        let plane = blur_plane(img.channel(ch), &kernel);
        out.index_axis_mut(Axis(2), ch).assign(&plane);
    }
    ImageTensor::from_clamped(out)
}

fn corrupt(path: &Path, reason: impl ToString) -> Error {
    Error::CorruptFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Loads an 8- or 16-bit PNG or a JPEG. Gray images yield `C = 1`, colour
/// images `C = 3` (alpha is dropped).
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| Error::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
    decode_image(&bytes, path)
}

pub(crate) fn decode_image(bytes: &[u8], path: &Path) -> Result<ImageTensor> {
    use image::{DynamicImage, ImageError, ImageFormat};

    let format = image::guess_format(bytes)
        .map_err(|_| Error::UnsupportedFormat(path.to_path_buf()))?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::UnsupportedFormat(path.to_path_buf()));
    }
    let decoded = image::load_from_memory_with_format(bytes, format).map_err(|e| match e {
        ImageError::Unsupported(_) => Error::UnsupportedFormat(path.to_path_buf()),
        other => corrupt(path, other),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let gray = matches!(
        decoded,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let sixteen = matches!(
        decoded,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    let values: Vec<f32> = match (gray, sixteen) {
        (true, false) => decoded.to_luma8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        (true, true) => decoded.to_luma16().into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        (false, false) => decoded.to_rgb8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        (false, true) => decoded.to_rgb16().into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
    };
    ImageTensor::from_shape_vec(h, w, if gray { 1 } else { 3 }, values)
}

/// Writes an 8-bit PNG.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.dims();
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let color = if c == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &bytes,
        w as u32,
        h as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| Error::Write {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_invalid_images() {
        assert!(matches!(
            ImageTensor::new(Array3::zeros((0, 3, 1))),
            Err(Error::EmptyImage)
        ));
        assert!(matches!(
            ImageTensor::new(Array3::from_elem((2, 2, 1), f32::NAN)),
            Err(Error::NonFinite(0))
        ));
        assert!(matches!(
            ImageTensor::new(Array3::from_elem((2, 2, 3), 1.5)),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(
            ImageTensor::new(Array3::zeros((2, 2, 2))),
            Err(Error::Channels(2))
        ));
    }

    #[test]
    fn equalize_two_pixel_gray() {
        let img = ImageTensor::from_shape_vec(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let out = hist_equalize(&img).unwrap();
        assert_eq!(out.data().iter().copied().collect::<Vec<_>>(), vec![0.5, 1.0]);
    }

    #[test]
    fn equalize_constant_is_one() {
        for v in [0.0, 0.3, 1.0] {
            let img = ImageTensor::filled(5, 7, 3, v).unwrap();
            let out = hist_equalize(&img).unwrap();
            assert!(out.data().iter().all(|&o| o == 1.0));
        }
    }

    #[test]
    fn equalize_uniform_histogram_is_staircase() {
        // 256 pixels, one per bin.
        let vals: Vec<f32> = (0..256).map(|k| k as f32 / 255.0).collect();
        let img = ImageTensor::from_shape_vec(16, 16, 1, vals.clone()).unwrap();
        let out = hist_equalize(&img).unwrap();
        for (k, (&o, &v)) in out.data().iter().zip(&vals).enumerate() {
            assert_eq!(o, ((k + 1) as f64 / 256.0) as f32);
            assert!((o - v).abs() <= 1.0 / 256.0 + 1e-7);
        }
    }

    #[test]
    fn equalize_values_errors() {
        assert!(matches!(equalize_values(&[]), Err(Error::EmptyImage)));
        assert!(matches!(
            equalize_values(&[0.1, f32::NAN]),
            Err(Error::NonFinite(1))
        ));
    }

    #[test]
    fn joint_mode_pools_channels() {
        let img = ImageTensor::from_shape_vec(1, 1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let per = hist_equalize_with(&img, HeMode::PerChannel).unwrap();
        assert!(per.data().iter().all(|&v| v == 1.0));
        let joint = hist_equalize_with(&img, HeMode::Joint).unwrap();
        let got: Vec<f32> = joint.data().iter().copied().collect();
        assert_eq!(got, vec![(1.0f64 / 3.0) as f32, (2.0f64 / 3.0) as f32, 1.0]);
    }

    #[test]
    fn bright_channel_examples() {
        let img = ImageTensor::from_shape_vec(1, 2, 3, vec![0.1, 0.5, 0.3, 0.2, 0.2, 0.2]).unwrap();
        let b = bright_channel(&img).unwrap();
        assert_eq!(b.dims(), (1, 2, 1));
        assert_eq!(b.data()[[0, 0, 0]], 0.5);
        assert_eq!(b.data()[[0, 1, 0]], 0.2);
        let black = ImageTensor::filled(3, 3, 3, 0.0).unwrap();
        assert!(bright_channel(&black).unwrap().data().iter().all(|&v| v == 0.0));
        let gray = ImageTensor::filled(3, 3, 1, 0.4).unwrap();
        assert!(matches!(bright_channel(&gray), Err(Error::Channels(1))));
    }

    #[test]
    fn gradient_of_ramp_and_constant() {
        let ramp = ImageTensor::from_shape_vec(1, 3, 1, vec![0.0, 0.5, 1.0]).unwrap();
        let g = spatial_gradient(&ramp);
        assert_eq!(g.horizontal.iter().copied().collect::<Vec<_>>(), vec![0.5, 0.5, 0.0]);
        assert!(g.vertical.iter().all(|&v| v == 0.0));

        let flat = ImageTensor::filled(4, 5, 3, 0.7).unwrap();
        let g = spatial_gradient(&flat);
        assert!(g.horizontal.iter().chain(g.vertical.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_vertical_stripes() {
        let img = ImageTensor::from_fn(6, 8, 1, |(_, x, _)| if (x / 2) % 2 == 0 { 0.0 } else { 1.0 })
            .unwrap();
        let g = spatial_gradient(&img);
        assert!(g.vertical.iter().all(|&v| v == 0.0));
        for y in 0..6 {
            for x in 0..7 {
                let expect = img.data()[[y, x + 1, 0]] - img.data()[[y, x, 0]];
                assert_eq!(g.horizontal[[y, x, 0]], expect);
                assert_eq!(expect != 0.0, x % 2 == 1);
            }
        }
    }

    #[test]
    fn reflect_index_is_half_sample_symmetric() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        // many bounces
        assert_eq!(reflect_index(-45, 3), reflect_index(-45 + 6 * 10, 3));
    }

    #[test]
    fn kernel_sizes_and_mass() {
        assert_eq!(kernel_size(5.0), 31);
        assert_eq!(kernel_size(9.0), 55);
        assert_eq!(kernel_size(15.0), 91);
        assert_eq!(kernel_size(0.5), 5);
        for s in [0.7, 1.5, 5.0, 9.0, 15.0] {
            let k = gaussian_kernel_1d(s).unwrap();
            assert_eq!(k.len() % 2, 1);
            assert!(k.len() as f64 >= 6.0 * s);
            assert_abs_diff_eq!(k.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        assert!(gaussian_kernel_1d(0.0).is_err());
        assert!(gaussian_kernel_1d(-1.0).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_mean() {
        let img = ImageTensor::filled(9, 13, 3, 0.37).unwrap();
        let out = gaussian_blur(&img, 15.0).unwrap();
        for &v in out.data() {
            assert_abs_diff_eq!(v, 0.37, epsilon = 1e-6);
        }
        let img = ImageTensor::from_fn(20, 17, 1, |(y, x, _)| ((y * 31 + x * 7) % 11) as f32 / 10.0)
            .unwrap();
        let out = gaussian_blur(&img, 5.0).unwrap();
        assert_abs_diff_eq!(out.mean(), img.mean(), epsilon = 1e-5);
    }

    #[test]
    fn blur_impulse_reproduces_kernel() {
        let mut data = Array3::<f32>::zeros((31, 31, 1));
        data[[15, 15, 0]] = 1.0;
        let img = ImageTensor::new(data).unwrap();
        let out = gaussian_blur(&img, 5.0).unwrap();
        let k = gaussian_kernel_1d(5.0).unwrap();
        assert_eq!(k.len(), 31);
        for y in 0..31 {
            for x in 0..31 {
                assert_abs_diff_eq!(out.data()[[y, x, 0]] as f64, k[y] * k[x], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        let img = ImageTensor::filled(4, 4, 1, 0.5).unwrap();
        assert!(gaussian_blur(&img, 0.0).is_err());
    }

    #[test]
    fn blur_matrix_matches_direct_blur() {
        let img = ImageTensor::from_fn(12, 9, 1, |(y, x, _)| ((y * 5 + x * 3) % 7) as f32 / 6.0)
            .unwrap();
        let sigma = 9.0;
        let direct = gaussian_blur(&img, sigma).unwrap();
        let ah = blur_matrix(12, sigma).unwrap();
        let aw = blur_matrix(9, sigma).unwrap();
        let x = img.channel(0).mapv(|v| v as f64);
        let via = ah.dot(&x).dot(&aw.t());
        for ((y, xx), v) in via.indexed_iter() {
            assert_abs_diff_eq!(*v, direct.data()[[y, xx, 0]] as f64, epsilon = 1e-6);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        let img = ImageTensor::filled(6, 4, 3, 0.5).unwrap();
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn load_sixteen_bit_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> =
            image::ImageBuffer::from_fn(5, 3, |x, y| image::Luma([(x * 10000 + y * 3000) as u16]));
        buf.save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.dims(), (3, 5, 1));
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_abs_diff_eq!(img.data()[[2, 4, 0]], 46000.0 / 65535.0, epsilon = 1e-6);
    }

    #[test]
    fn load_error_paths_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Unreadable { .. })
        ));

        let bmp = dir.path().join("x.bmp");
        std::fs::write(&bmp, b"BM\x3a\0\0\0\0\0\0\0\x36\0\0\0").unwrap();
        assert!(matches!(load_image(&bmp), Err(Error::UnsupportedFormat(_))));

        let good = dir.path().join("good.png");
        save_image(&ImageTensor::filled(32, 32, 3, 0.2).unwrap(), &good).unwrap();
        let bytes = std::fs::read(&good).unwrap();
        let truncated = dir.path().join("trunc.png");
        std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&truncated), Err(Error::CorruptFile { .. })));
    }
}
