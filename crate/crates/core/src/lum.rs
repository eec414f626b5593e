//! Light-up decomposition network and its reference-free training losses.
//!
//! The network sees the RGB input plus its bright channel and predicts a
//! 3-channel reflectance map and a 1-channel illumination map, both through
//! sigmoid heads. Training combines
//!
//! * a feature-space prior: MSE between backbone features of the reflectance
//!   and of the histogram-equalized input (`conv4_1`),
//! * an L1 reconstruction term on `reflectance * illumination`,
//! * an edge-aware smoothness term on the illumination.

use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::sigmoid;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureExtractor, HEP_LAYER};
use crate::error::{Error, Result};
use crate::image::{bright_channel, hist_equalize_with, HeMode, ImageTensor};
use crate::nn::{stream_rng, Conv2d, ConvSpec, ConvTranspose2d, ParamStore};
use crate::tensor::{diff_horizontal, diff_vertical, image_to_tensor, l1_mean, mse_mean, scalar, ssim_nchw, tensor_to_images};

/// Architecture knobs recorded in checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LumArchitecture {
    /// Channel width of every hidden layer.
    pub width: usize,
}

impl Default for LumArchitecture {
    fn default() -> Self {
        Self { width: 64 }
    }
}

impl LumArchitecture {
    /// Spatial sizes must be multiples of this.
    pub const DOWNSAMPLING: usize = 2;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumLossWeights {
    pub lambda_recon: f64,
    pub lambda_hep: f64,
    pub lambda_is: f64,
    pub epsilon: f64,
}

impl Default for LumLossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_hep: 0.1,
            lambda_is: 0.1,
            epsilon: 0.01,
        }
    }
}

/// What the prior's features are matched against.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HepReference {
    /// Histogram-equalized input.
    #[default]
    Equalized,
    /// The raw low-light input, as the formula is literally written.
    RawInput,
}

/// Reflectance (3 channels) and illumination (1 channel) in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionResult {
    pub reflectance: ImageTensor,
    pub illumination: ImageTensor,
}

pub struct LumNetwork {
    arch: LumArchitecture,
    params: ParamStore,
    extract: Conv2d,
    conv_a: Conv2d,
    conv_b: Conv2d,
    conv_c: Conv2d,
    deconv: ConvTranspose2d,
    fuse: Conv2d,
    input_branch: Conv2d,
    head_reflectance: Conv2d,
    head_illumination: Conv2d,
}

impl std::fmt::Debug for LumNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LumNetwork")
            .field("arch", &self.arch)
            .field("parameters", &self.params.num_parameters())
            .finish()
    }
}

impl LumNetwork {
    pub fn new(arch: LumArchitecture, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if arch.width == 0 {
            return Err(Error::InvalidArgument("LUM width must be positive".into()));
        }
        let w = arch.width;
        let mut ps = ParamStore::new(dtype, device);
        let mut rng = stream_rng(seed, &[0x6c756d]);
        let extract = ps.conv2d("extract", ConvSpec::same(4, w, 9), &mut rng)?;
        let conv_a = ps.conv2d("conv_a", ConvSpec::same(w, w, 3), &mut rng)?;
        let conv_b = ps.conv2d("conv_b", ConvSpec::new(w, w, 3, 2, 1), &mut rng)?;
        let conv_c = ps.conv2d("conv_c", ConvSpec::same(w, w, 3), &mut rng)?;
        let deconv = ps.conv_transpose2d("deconv", ConvSpec::new(w, w, 3, 2, 1), 1, &mut rng)?;
        let fuse = ps.conv2d("fuse", ConvSpec::same(2 * w, w, 3), &mut rng)?;
        let input_branch = ps.conv2d("input_branch", ConvSpec::same(4, w, 3), &mut rng)?;
        let head_reflectance = ps.conv2d("head_reflectance", ConvSpec::same(2 * w, 3, 3), &mut rng)?;
        let head_illumination = ps.conv2d("head_illumination", ConvSpec::same(2 * w, 1, 3), &mut rng)?;
        Ok(Self {
            arch,
            params: ps,
            extract,
            conv_a,
            conv_b,
            conv_c,
            deconv,
            fuse,
            input_branch,
            head_reflectance,
            head_illumination,
        })
    }

    pub fn arch(&self) -> &LumArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `x` is `N x 3 x H x W`; returns `(reflectance, illumination)`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Channels(c));
        }
        let m = LumArchitecture::DOWNSAMPLING;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by {m}")));
        }
        let input = with_bright_channel(x)?;
        let f0 = self.extract.forward(&input)?;
        let f1 = self.conv_a.forward(&f0)?.relu()?;
        let f2 = self.conv_b.forward(&f1)?.relu()?;
        let f3 = self.conv_c.forward(&f2)?.relu()?;
        let up = self.deconv.forward(&f3)?.relu()?;
        let fused = self.fuse.forward(&Tensor::cat(&[&f1, &up], 1)?)?.relu()?;
        let side = self.input_branch.forward(&input)?.relu()?;
        let joint = Tensor::cat(&[&fused, &side], 1)?;
        let r = sigmoid(&self.head_reflectance.forward(&joint)?)?;
        let l = sigmoid(&self.head_illumination.forward(&joint)?)?;
        Ok((r, l))
    }

    /// Inference on one image of any size (edge-padded to even dims and
    /// cropped back).
    pub fn decompose(&self, img: &ImageTensor) -> Result<DecompositionResult> {
        if img.channels() != 3 {
            return Err(Error::Channels(img.channels()));
        }
        let (h, w, _) = img.dims();
        let padded = pad_to_multiple(img, LumArchitecture::DOWNSAMPLING)?;
        let x = image_to_tensor(&padded, self.params.dtype(), self.params.device())?;
        let (r, l) = self.forward(&x)?;
        let r = tensor_to_images(&r)?.remove(0).crop(0, 0, h, w)?;
        let l = tensor_to_images(&l)?.remove(0).crop(0, 0, h, w)?;
        Ok(DecompositionResult {
            reflectance: r,
            illumination: l,
        })
    }
}

/// Appends the per-pixel channel maximum as a fourth channel.
pub fn with_bright_channel(x: &Tensor) -> Result<Tensor> {
    let bright = x.max_keepdim(1)?;
    Ok(Tensor::cat(&[x, &bright], 1)?)
}

/// Replicates the last row/column until both dims are multiples of `m`.
pub fn pad_to_multiple(img: &ImageTensor, m: usize) -> Result<ImageTensor> {
    let (h, w, c) = img.dims();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(img.clone());
    }
    let d = img.data();
    ImageTensor::from_fn(ph, pw, c, |(y, x, k)| d[[y.min(h - 1), x.min(w - 1), k]])
}

/// Feature-space prior: element-mean squared distance between backbone
/// features of `reflectance` and of `reference` (treated as a constant).
pub fn hep_loss(reflectance: &Tensor, reference: &Tensor, backbone: &dyn FeatureExtractor) -> Result<Tensor> {
    let fr = backbone.features(reflectance, HEP_LAYER)?;
    let fref = backbone.features(reference, HEP_LAYER)?.detach();
    mse_mean(&fr, &fref)
}

/// `mean |R * L - I|` with `L` broadcast over the colour channels.
pub fn recon_loss(reflectance: &Tensor, illumination: &Tensor, input: &Tensor) -> Result<Tensor> {
    let rec = reflectance.broadcast_mul(illumination)?;
    l1_mean(&rec, input)
}

/// Edge-aware illumination smoothness: mean over pixels and both
/// directions of `|grad L| / max(|grad I|, eps)`, with `|grad I|` averaged
/// over the input's channels.
pub fn illum_smooth_loss(illumination: &Tensor, input: &Tensor, epsilon: f64) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(2);
    for diff in [diff_horizontal, diff_vertical] {
        let gi = diff(input)?.abs()?.mean_keepdim(1)?.detach();
        let gl = diff(illumination)?.abs()?;
        let denom = gi.maximum(epsilon)?;
        terms.push(gl.broadcast_div(&denom)?.mean_all()?);
    }
    Ok(((&terms[0] + &terms[1])? * 0.5)?)
}

/// `recon + lambda_hep * prior + lambda_is * smooth` (the reconstruction
/// weight is 1 except in ablations).
pub fn lum_total(recon: &Tensor, prior: &Tensor, smooth: &Tensor, weights: &LumLossWeights) -> Result<Tensor> {
    let t = (((recon * weights.lambda_recon)? + (prior * weights.lambda_hep)?)? + (smooth * weights.lambda_is)?)?;
    Ok(t)
}

/// Scalar form of [`lum_total`].
pub fn loss_lum_total(recon: f64, prior: f64, smooth: f64, weights: &LumLossWeights) -> f64 {
    weights.lambda_recon * recon + weights.lambda_hep * prior + weights.lambda_is * smooth
}

/// Reference-image variants compared in the prior ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorKind {
    L1,
    Mse,
    Ssim,
    MaxEnt,
    Hep,
}

impl PriorKind {
    pub const ALL: [PriorKind; 5] = [
        PriorKind::L1,
        PriorKind::Mse,
        PriorKind::Ssim,
        PriorKind::MaxEnt,
        PriorKind::Hep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PriorKind::L1 => "L1",
            PriorKind::Mse => "MSE",
            PriorKind::Ssim => "SSIM",
            PriorKind::MaxEnt => "MAXENT",
            PriorKind::Hep => "HEP",
        }
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(PriorKind::L1),
            "mse" => Ok(PriorKind::Mse),
            "ssim" => Ok(PriorKind::Ssim),
            "maxent" | "max" => Ok(PriorKind::MaxEnt),
            "hep" => Ok(PriorKind::Hep),
            other => Err(Error::InvalidArgument(format!("unknown prior kind {other:?}"))),
        }
    }
}

/// Constant references derived from a batch of low-light inputs.
#[derive(Debug, Clone)]
pub struct PriorTargets {
    /// `HE(I)`, `N x 3 x H x W`.
    pub equalized: Tensor,
    /// `HE(max_c I)`, `N x 1 x H x W`.
    pub equalized_bright: Tensor,
    /// Raw input for the literal-formula variant.
    pub raw: Tensor,
}

impl PriorTargets {
    pub fn from_images(images: &[ImageTensor], he_mode: HeMode, dtype: DType, device: &Device) -> Result<Self> {
        let eq = images
            .iter()
            .map(|i| hist_equalize_with(i, he_mode))
            .collect::<Result<Vec<_>>>()?;
        let eqb = images
            .iter()
            .map(|i| hist_equalize_with(&bright_channel(i)?, he_mode))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            equalized: crate::tensor::images_to_tensor(&eq, dtype, device)?,
            equalized_bright: crate::tensor::images_to_tensor(&eqb, dtype, device)?,
            raw: crate::tensor::images_to_tensor(images, dtype, device)?,
        })
    }
}

/// Prior term selected by `kind`; `Hep` uses the backbone.
pub fn prior_loss(
    kind: PriorKind,
    reflectance: &Tensor,
    targets: &PriorTargets,
    reference: HepReference,
    backbone: &dyn FeatureExtractor,
) -> Result<Tensor> {
    match kind {
        PriorKind::L1 => l1_mean(reflectance, &targets.equalized),
        PriorKind::Mse => mse_mean(reflectance, &targets.equalized),
        PriorKind::Ssim => Ok(ssim_nchw(reflectance, &targets.equalized, 11, 1.5)?.affine(-1.0, 1.0)?),
        PriorKind::MaxEnt => {
            let rmax = reflectance.max_keepdim(1)?;
            l1_mean(&rmax, &targets.equalized_bright)
        }
        PriorKind::Hep => {
            let r = match reference {
                HepReference::Equalized => &targets.equalized,
                HepReference::RawInput => &targets.raw,
            };
            hep_loss(reflectance, r, backbone)
        }
    }
}

fn pair_tensors(result: &DecompositionResult, img: &ImageTensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dev = Device::Cpu;
    if result.reflectance.channels() != 3 || result.illumination.channels() != 1 {
        return Err(Error::Shape("reflectance must be RGB and illumination gray".into()));
    }
    let (h, w, _) = img.dims();
    if result.reflectance.dims().0 != h
        || result.reflectance.dims().1 != w
        || result.illumination.dims().0 != h
        || result.illumination.dims().1 != w
    {
        return Err(Error::Shape("decomposition and input sizes differ".into()));
    }
    Ok((
        image_to_tensor(&result.reflectance, DType::F64, &dev)?,
        image_to_tensor(&result.illumination, DType::F64, &dev)?,
        image_to_tensor(img, DType::F64, &dev)?,
    ))
}

/// Scalar reconstruction loss of one decomposition.
pub fn loss_recon(result: &DecompositionResult, img: &ImageTensor) -> Result<f64> {
    let (r, l, i) = pair_tensors(result, img)?;
    scalar(&recon_loss(&r, &l, &i)?)
}

/// Scalar illumination smoothness loss of one decomposition.
pub fn loss_illum_smooth(result: &DecompositionResult, img: &ImageTensor, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (_, l, i) = pair_tensors(result, img)?;
    scalar(&illum_smooth_loss(&l, &i, epsilon)?)
}

/// Scalar prior loss of one decomposition (double precision backbone copy
/// is the caller's choice through `backbone`).
pub fn loss_hep(
    result: &DecompositionResult,
    img: &ImageTensor,
    backbone: &dyn FeatureExtractor,
    reference: HepReference,
) -> Result<f64> {
    let dt = backbone.dtype();
    let targets = PriorTargets::from_images(std::slice::from_ref(img), HeMode::PerChannel, dt, &Device::Cpu)?;
    let r = image_to_tensor(&result.reflectance, dt, &Device::Cpu)?;
    scalar(&prior_loss(PriorKind::Hep, &r, &targets, reference, backbone)?)
}

/// Scalar ablation prior of a reflectance map against an input.
pub fn ablation_prior_loss(
    kind: PriorKind,
    reflectance: &ImageTensor,
    img: &ImageTensor,
    backbone: &dyn FeatureExtractor,
) -> Result<f64> {
    if reflectance.dims() != img.dims() || img.channels() != 3 {
        return Err(Error::Shape("reflectance and input must be equal-size RGB".into()));
    }
    let dt = backbone.dtype();
    let targets = PriorTargets::from_images(std::slice::from_ref(img), HeMode::PerChannel, dt, &Device::Cpu)?;
    let r = image_to_tensor(reflectance, dt, &Device::Cpu)?;
    scalar(&prior_loss(kind, &r, &targets, HepReference::Equalized, backbone)?)
}

/// Mean `|R * L - I|` over a set, the convergence measure of training.
pub fn mean_reconstruction_error(net: &LumNetwork, images: &[ImageTensor]) -> Result<f64> {
    let mut acc = 0.0;
    for img in images {
        let d = net.decompose(img)?;
        acc += loss_recon(&d, img)?;
    }
    Ok(acc / images.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Vgg19;

    fn tiny() -> LumNetwork {
        LumNetwork::new(LumArchitecture { width: 8 }, 1, DType::F32, &Device::Cpu).unwrap()
    }

    fn noise_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = stream_rng(seed, &[]);
        ImageTensor::from_fn(h, w, 3, |_| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn decompose_shapes_and_range() {
        let net = tiny();
        for (h, w) in [(16, 16), (9, 14), (1, 1)] {
            let img = noise_image(h, w, 3);
            let d = net.decompose(&img).unwrap();
            assert_eq!(d.reflectance.dims(), (h, w, 3));
            assert_eq!(d.illumination.dims(), (h, w, 1));
            assert!(d
                .reflectance
                .data()
                .iter()
                .chain(d.illumination.data())
                .all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let net = tiny();
        let odd = Tensor::zeros((1, 3, 5, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&odd), Err(Error::Shape(_))));
        let gray = ImageTensor::filled(4, 4, 1, 0.2).unwrap();
        assert!(matches!(net.decompose(&gray), Err(Error::Channels(1))));
    }

    #[test]
    fn decompose_is_deterministic() {
        let img = noise_image(8, 10, 5);
        let a = tiny().decompose(&img).unwrap();
        let b = tiny().decompose(&img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bright_channel_tensor_matches_image_op() {
        let img = noise_image(5, 4, 9);
        let x = image_to_tensor(&img, DType::F32, &Device::Cpu).unwrap();
        let b = with_bright_channel(&x).unwrap().narrow(1, 3, 1).unwrap();
        let via = tensor_to_images(&b).unwrap().remove(0);
        assert_eq!(via, bright_channel(&img).unwrap());
    }

    #[test]
    fn recon_examples() {
        let img = noise_image(6, 6, 11);
        let ones = ImageTensor::filled(6, 6, 1, 1.0).unwrap();
        let d = DecompositionResult {
            reflectance: img.clone(),
            illumination: ones,
        };
        assert_eq!(loss_recon(&d, &img).unwrap(), 0.0);
        let half = DecompositionResult {
            reflectance: img.clone(),
            illumination: ImageTensor::filled(6, 6, 1, 0.5).unwrap(),
        };
        let expect = 0.5 * img.data().iter().map(|&v| v as f64).sum::<f64>() / img.data().len() as f64;
        assert!((loss_recon(&half, &img).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn smooth_loss_constant_illumination_is_zero() {
        let img = noise_image(7, 9, 2);
        let d = DecompositionResult {
            reflectance: img.clone(),
            illumination: ImageTensor::filled(7, 9, 1, 0.3).unwrap(),
        };
        assert_eq!(loss_illum_smooth(&d, &img, 0.01).unwrap(), 0.0);
        assert!(loss_illum_smooth(&d, &img, 0.0).is_err());
    }

    #[test]
    fn prior_kind_parsing() {
        assert_eq!("maxent".parse::<PriorKind>().unwrap(), PriorKind::MaxEnt);
        assert_eq!("HEP".parse::<PriorKind>().unwrap(), PriorKind::Hep);
        assert!("gram".parse::<PriorKind>().is_err());
    }

    #[test]
    fn ablation_priors_vanish_at_reference() {
        let vgg = Vgg19::random(0, DType::F64, &Device::Cpu).unwrap();
        let img = noise_image(16, 16, 4);
        let he = hist_equalize_with(&img, HeMode::PerChannel).unwrap();
        assert!(ablation_prior_loss(PriorKind::L1, &he, &img, &vgg).unwrap().abs() < 1e-12);
        assert!(ablation_prior_loss(PriorKind::Mse, &he, &img, &vgg).unwrap().abs() < 1e-12);
        assert!(ablation_prior_loss(PriorKind::Ssim, &he, &img, &vgg).unwrap().abs() < 1e-9);
        assert!(ablation_prior_loss(PriorKind::Hep, &he, &img, &vgg).unwrap().abs() < 1e-12);
        // reflectance whose max channel equals HE(max channel of I)
        let target = hist_equalize_with(&bright_channel(&img).unwrap(), HeMode::PerChannel).unwrap();
        let r = ImageTensor::from_fn(16, 16, 3, |(y, x, c)| {
            let t = target.data()[[y, x, 0]];
            if c == 0 { t } else { t * 0.5 }
        })
        .unwrap();
        assert!(ablation_prior_loss(PriorKind::MaxEnt, &r, &img, &vgg).unwrap().abs() < 1e-12);
        assert!(ablation_prior_loss(PriorKind::L1, &img, &img, &vgg).unwrap() > 0.0);
    }

    #[test]
    fn weighted_total() {
        let w = LumLossWeights::default();
        assert!((loss_lum_total(1.0, 2.0, 3.0, &w) - 1.5).abs() < 1e-12);
        assert_eq!(loss_lum_total(0.0, 0.0, 0.0, &w), 0.0);
    }
}
