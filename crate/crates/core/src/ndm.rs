//! Noise disentanglement module: unpaired translation between noisy
//! reflectance maps (domain X) and clean images (domain Y).
//!
//! A single content encoder serves both domains. A variational noise
//! encoder summarizes the noise of an X image as an 8-d Gaussian code.
//! `G_X` renders content plus a noise code as a noisy image, `G_Y` renders
//! content alone as a clean image, and two least-squares patch
//! discriminators judge each domain.
//!
//! Data flow for a batch `(x, y)`:
//!
//! ```text
//! x --Ec--> cx --G_Y--> gc --Ec--> G_X(., zs) --> x_cyc
//! x --En--> (mu, logvar) --> zs
//! y --Ec--> cy --G_X(., zp)--> gn --Ec--> G_Y --> y_cyc
//! cx --G_X(., zs)--> x_rec        cy --G_Y--> y_rec
//! ```
//!
//! Colour, perceptual and background terms compare `gc` with `x`.

use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::ops::sigmoid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureExtractor, PERCEPTUAL_LAYER};
use crate::error::{Error, Result};
use crate::image::{BlurBank, ImageTensor};
use crate::nn::{instance_norm, leaky_relu, randn, stream_rng, Conv2d, ConvSpec, ConvTranspose2d, Linear, ParamStore};
use crate::tensor::{blur_nchw, image_to_tensor, l1_mean, mse_mean, scalar, tensor_to_images};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
/// LSGAN targets for fake and real samples.
pub const LABEL_FAKE: f64 = 0.0;
pub const LABEL_REAL: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NdmArchitecture {
    /// Width of the first encoder stage; content codes have `2 * base` channels.
    pub base: usize,
    pub res_blocks: usize,
    pub noise_dim: usize,
    pub disc_base: usize,
}

impl Default for NdmArchitecture {
    fn default() -> Self {
        Self {
            base: 64,
            res_blocks: 4,
            noise_dim: 8,
            disc_base: 64,
        }
    }
}

impl NdmArchitecture {
    /// Content-path downsampling factor.
    pub const CONTENT_STRIDE: usize = 4;
    /// Minimum side for the noise encoder and discriminators.
    pub const MIN_SIDE: usize = 16;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdmLossWeights {
    pub adversarial: f64,
    pub kl: f64,
    pub perceptual: f64,
    pub color: f64,
    pub background: f64,
    pub cycle: f64,
    pub recon: f64,
}

impl Default for NdmLossWeights {
    fn default() -> Self {
        Self {
            adversarial: 1.0,
            kl: 0.01,
            perceptual: 0.1,
            color: 0.5,
            background: 5.0,
            cycle: 10.0,
            recon: 10.0,
        }
    }
}

impl NdmLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.adversarial,
            self.kl,
            self.perceptual,
            self.color,
            self.background,
            self.cycle,
            self.recon,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("NDM loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Noise code used on the clean-domain cycle path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CycleNoise {
    /// Fresh standard-normal draw.
    #[default]
    Prior,
    /// The code encoded from the paired noisy batch.
    Encoded,
}

/// Diagonal Gaussian noise code of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl NoiseCode {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(Error::Shape("mu and sigma must have the same non-zero length".into()));
        }
        if sigma.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("sigma must be positive".into()));
        }
        let logvar = sigma
            .iter()
            .map(|s| (2.0 * s.ln()).clamp(LOGVAR_MIN, LOGVAR_MAX))
            .collect();
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.logvar.iter().map(|l| (0.5 * l).exp()).collect()
    }

    /// `mu + sigma * eta`, `eta ~ N(0, 1)`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        self.mu
            .iter()
            .zip(self.sigma())
            .map(|(m, s)| {
                let eta: f64 = StandardNormal.sample(rng);
                m + s * eta
            })
            .collect()
    }
}

/// `1/2 sum(-log s^2 + mu^2 + s^2 - 1)`.
pub fn loss_kl(code: &NoiseCode) -> f64 {
    0.5 * code
        .mu
        .iter()
        .zip(&code.logvar)
        .map(|(m, l)| -l + m * m + l.exp() - 1.0)
        .sum::<f64>()
}

/// Batched KL term from `N x d` tensors, averaged over the batch.
pub fn kl_loss(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let per = ((mu.sqr()? + logvar.exp()?)? - logvar)?.affine(0.5, -0.5)?;
    Ok(per.sum(D::Minus1)?.mean_all()?)
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, ch: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            a: ps.conv2d(&format!("{name}.a"), ConvSpec::same(ch, ch, 3), rng)?,
            b: ps.conv2d(&format!("{name}.b"), ConvSpec::same(ch, ch, 3), rng)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = instance_norm(&self.a.forward(x)?)?.relu()?;
        let h = instance_norm(&self.b.forward(&h)?)?;
        Ok((x + h)?)
    }
}

pub struct ContentEncoder {
    params: ParamStore,
    down: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
}

impl ContentEncoder {
    fn new(arch: &NdmArchitecture, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(dtype, device);
        let b = arch.base;
        let down = vec![
            ps.conv2d("down0", ConvSpec::new(3, b, 4, 2, 1), rng)?,
            ps.conv2d("down1", ConvSpec::new(b, 2 * b, 4, 2, 1), rng)?,
        ];
        let blocks = (0..arch.res_blocks)
            .map(|i| ResBlock::new(&mut ps, &format!("res{i}"), 2 * b, rng))
            .collect::<Result<_>>()?;
        Ok(Self { params: ps, down, blocks })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for c in &self.down {
            h = instance_norm(&c.forward(&h)?)?.relu()?;
        }
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        Ok(h)
    }
}

pub struct NoiseEncoder {
    params: ParamStore,
    convs: Vec<Conv2d>,
    mu: Linear,
    logvar: Linear,
}

impl NoiseEncoder {
    fn new(arch: &NdmArchitecture, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(dtype, device);
        let b = arch.base;
        let chans = [3, b, 2 * b, 2 * b, 2 * b];
        let convs = (0..4)
            .map(|i| ps.conv2d(&format!("down{i}"), ConvSpec::new(chans[i], chans[i + 1], 4, 2, 1), rng))
            .collect::<Result<_>>()?;
        let mu = ps.linear("mu", 2 * b, arch.noise_dim, rng)?;
        let logvar = ps.linear("logvar", 2 * b, arch.noise_dim, rng)?;
        Ok(Self {
            params: ps,
            convs,
            mu,
            logvar,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Returns `(mu, logvar)`, each `N x d`, with `logvar` clamped.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, _, h, w) = x.dims4()?;
        if h < NdmArchitecture::MIN_SIDE || w < NdmArchitecture::MIN_SIDE {
            return Err(Error::TooSmall(format!("noise encoder needs at least 16x16, got {h}x{w}")));
        }
        let mut f = x.clone();
        for c in &self.convs {
            f = c.forward(&f)?.relu()?;
        }
        let pooled = f.mean(D::Minus1)?.mean(D::Minus1)?;
        let mu = self.mu.forward(&pooled)?;
        let logvar = self.logvar.forward(&pooled)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }
}

pub struct Generator {
    params: ParamStore,
    noise_dim: usize,
    input: Conv2d,
    blocks: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
    out: Conv2d,
}

impl Generator {
    fn new(arch: &NdmArchitecture, noise_dim: usize, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(dtype, device);
        let b = arch.base;
        let input = ps.conv2d("input", ConvSpec::same(2 * b + noise_dim, 2 * b, 3), rng)?;
        let blocks = (0..arch.res_blocks)
            .map(|i| ResBlock::new(&mut ps, &format!("res{i}"), 2 * b, rng))
            .collect::<Result<_>>()?;
        let up = vec![
            ps.conv_transpose2d("up0", ConvSpec::new(2 * b, b, 4, 2, 1), 0, rng)?,
            ps.conv_transpose2d("up1", ConvSpec::new(b, b, 4, 2, 1), 0, rng)?,
        ];
        let out = ps.conv2d("out", ConvSpec::same(b, 3, 3), rng)?;
        Ok(Self {
            params: ps,
            noise_dim,
            input,
            blocks,
            up,
            out,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `content` is `N x 2b x h x w`; `noise` (`N x d`) is required iff the
    /// generator was built with a noise input.
    pub fn forward(&self, content: &Tensor, noise: Option<&Tensor>) -> Result<Tensor> {
        let x = match (noise, self.noise_dim) {
            (None, 0) => content.clone(),
            (Some(z), d) if d > 0 => {
                let (n, _, h, w) = content.dims4()?;
                let z = z.reshape((n, d, 1, 1))?.broadcast_as((n, d, h, w))?;
                Tensor::cat(&[content, &z.contiguous()?], 1)?
            }
            _ => return Err(Error::InvalidArgument("noise input does not match generator".into())),
        };
        let mut h = self.input.forward(&x)?.relu()?;
        for blk in &self.blocks {
            h = blk.forward(&h)?;
        }
        for u in &self.up {
            h = instance_norm(&u.forward(&h)?)?.relu()?;
        }
        Ok(sigmoid(&self.out.forward(&h)?)?)
    }
}

pub struct Discriminator {
    params: ParamStore,
    convs: Vec<Conv2d>,
}

impl Discriminator {
    fn new(arch: &NdmArchitecture, rng: &mut ChaCha8Rng, dtype: DType, device: &Device) -> Result<Self> {
        let mut ps = ParamStore::new(dtype, device);
        let b = arch.disc_base;
        let chans = [3, b, 2 * b, 4 * b, 1];
        let convs = (0..4)
            .map(|i| ps.conv2d(&format!("conv{i}"), ConvSpec::new(chans[i], chans[i + 1], 4, 2, 1), rng))
            .collect::<Result<_>>()?;
        Ok(Self { params: ps, convs })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Patch score map `N x 1 x H/16 x W/16`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < NdmArchitecture::MIN_SIDE || w < NdmArchitecture::MIN_SIDE {
            return Err(Error::TooSmall(format!("discriminator needs at least 16x16, got {h}x{w}")));
        }
        let mut f = x.clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            f = c.forward(&f)?;
            if i < last {
                f = leaky_relu(&f, 0.2)?;
            }
        }
        Ok(f)
    }
}

/// Names under which each network is checkpointed.
pub const NETWORK_NAMES: [&str; 6] = ["content_encoder", "noise_encoder", "gen_x", "gen_y", "disc_x", "disc_y"];

pub struct NdmNetworks {
    arch: NdmArchitecture,
    content: ContentEncoder,
    noise: NoiseEncoder,
    gen_x: Generator,
    gen_y: Generator,
    disc_x: Discriminator,
    disc_y: Discriminator,
}

impl std::fmt::Debug for NdmNetworks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NdmNetworks").field("arch", &self.arch).finish()
    }
}

impl NdmNetworks {
    pub fn new(arch: NdmArchitecture, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if arch.base == 0 || arch.disc_base == 0 || arch.noise_dim == 0 {
            return Err(Error::InvalidArgument("NDM widths must be positive".into()));
        }
        let rng = |i: u64| stream_rng(seed, &[0x6e646d, i]);
        Ok(Self {
            content: ContentEncoder::new(&arch, &mut rng(0), dtype, device)?,
            noise: NoiseEncoder::new(&arch, &mut rng(1), dtype, device)?,
            gen_x: Generator::new(&arch, arch.noise_dim, &mut rng(2), dtype, device)?,
            gen_y: Generator::new(&arch, 0, &mut rng(3), dtype, device)?,
            disc_x: Discriminator::new(&arch, &mut rng(4), dtype, device)?,
            disc_y: Discriminator::new(&arch, &mut rng(5), dtype, device)?,
            arch,
        })
    }

    pub fn arch(&self) -> &NdmArchitecture {
        &self.arch
    }

    pub fn dtype(&self) -> DType {
        self.content.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.content.params.device()
    }

    /// Content encoder of the noisy domain.
    pub fn content_encoder_x(&self) -> &ContentEncoder {
        &self.content
    }

    /// Content encoder of the clean domain (the same object as for X).
    pub fn content_encoder_y(&self) -> &ContentEncoder {
        &self.content
    }

    pub fn noise_encoder(&self) -> &NoiseEncoder {
        &self.noise
    }

    pub fn gen_x(&self) -> &Generator {
        &self.gen_x
    }

    pub fn gen_y(&self) -> &Generator {
        &self.gen_y
    }

    pub fn disc_x(&self) -> &Discriminator {
        &self.disc_x
    }

    pub fn disc_y(&self) -> &Discriminator {
        &self.disc_y
    }

    /// Stores in [`NETWORK_NAMES`] order.
    pub fn stores(&self) -> [&ParamStore; 6] {
        [
            &self.content.params,
            &self.noise.params,
            &self.gen_x.params,
            &self.gen_y.params,
            &self.disc_x.params,
            &self.disc_y.params,
        ]
    }

    /// Parameters updated by the generator step.
    pub fn generator_vars(&self) -> Vec<candle_core::Var> {
        self.stores()[..4].iter().flat_map(|s| s.vars()).collect()
    }

    /// Parameters updated by the discriminator step.
    pub fn discriminator_vars(&self) -> Vec<candle_core::Var> {
        self.stores()[4..].iter().flat_map(|s| s.vars()).collect()
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(dir.as_ref())?;
        for (name, store) in NETWORK_NAMES.iter().zip(self.stores()) {
            store.save(dir.as_ref().join(format!("{name}.safetensors")))?;
        }
        Ok(())
    }

    pub fn load_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        for (name, store) in NETWORK_NAMES.iter().zip(self.stores()) {
            store.load(dir.as_ref().join(format!("{name}.safetensors")))?;
        }
        Ok(())
    }

    /// Checksums of every network, in [`NETWORK_NAMES`] order.
    pub fn checksums(&self) -> Result<Vec<String>> {
        self.stores().iter().map(|s| s.checksum()).collect()
    }

    /// `G_Y(Ec(x))` on a batch whose sides are multiples of 4.
    pub fn denoise_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Channels(c));
        }
        let m = NdmArchitecture::CONTENT_STRIDE;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Shape(format!("{h}x{w} is not divisible by {m}")));
        }
        self.gen_y.forward(&self.content.forward(x)?, None)
    }

    /// Deterministic denoising of one image of any size.
    pub fn denoise(&self, noisy: &ImageTensor) -> Result<ImageTensor> {
        if noisy.channels() != 3 {
            return Err(Error::Channels(noisy.channels()));
        }
        let (h, w, _) = noisy.dims();
        let padded = crate::lum::pad_to_multiple(noisy, NdmArchitecture::CONTENT_STRIDE)?;
        let x = image_to_tensor(&padded, self.dtype(), self.device())?;
        let y = self.denoise_tensor(&x)?;
        tensor_to_images(&y)?.remove(0).crop(0, 0, h, w)
    }

    /// Noise code of one noisy image (at least 16x16).
    pub fn encode_noise(&self, noisy: &ImageTensor) -> Result<NoiseCode> {
        let x = image_to_tensor(noisy, self.dtype(), self.device())?;
        let (mu, logvar) = self.noise.forward(&x)?;
        Ok(NoiseCode {
            mu: mu.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            logvar: logvar.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        })
    }

    /// `G_X(Ec(clean), z)` with `z ~ N(0, 1)` drawn from `seed`.
    pub fn generate_noisy(&self, clean: &ImageTensor, seed: u64) -> Result<ImageTensor> {
        let (h, w, _) = clean.dims();
        let padded = crate::lum::pad_to_multiple(clean, NdmArchitecture::CONTENT_STRIDE)?;
        let x = image_to_tensor(&padded, self.dtype(), self.device())?;
        let mut rng = stream_rng(seed, &[0x7a]);
        let z = randn(&[1, self.arch.noise_dim], &mut rng, self.dtype(), self.device())?;
        let out = self.gen_x.forward(&self.content.forward(&x)?, Some(&z))?;
        tensor_to_images(&out)?.remove(0).crop(0, 0, h, w)
    }
}

/// `1/2 E[(D(real) - 1)^2] + 1/2 E[(D(fake) - 0)^2]` on score maps.
pub fn lsgan_discriminator_loss(d_real: &Tensor, d_fake: &Tensor) -> Result<Tensor> {
    let r = d_real.affine(1.0, -LABEL_REAL)?.sqr()?.mean_all()?;
    let f = d_fake.affine(1.0, -LABEL_FAKE)?.sqr()?.mean_all()?;
    Ok(((r + f)? * 0.5)?)
}

/// Generator side: `1/2 E[(D(fake) - 1)^2]`.
pub fn lsgan_generator_loss(d_fake: &Tensor) -> Result<Tensor> {
    Ok((d_fake.affine(1.0, -LABEL_REAL)?.sqr()?.mean_all()? * 0.5)?)
}

/// Discriminator loss of `disc` on a real and a (detached) fake batch.
pub fn loss_lsgan(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    lsgan_discriminator_loss(&disc.forward(real)?, &disc.forward(&fake.detach())?)
}

/// Sum over channel pairs of squared differences of per-image channel
/// means, averaged over the batch.
pub fn color_constancy_loss(x: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if c != 3 {
        return Err(Error::Channels(c));
    }
    let m = x.mean(D::Minus1)?.mean(D::Minus1)?;
    let ch = |i: usize| m.narrow(1, i, 1);
    let (r, g, b) = (ch(0)?, ch(1)?, ch(2)?);
    let s = (((&r - &g)?.sqr()? + (&r - &b)?.sqr()?)? + (&g - &b)?.sqr()?)?;
    Ok(s.mean_all()?)
}

/// `sum_s w_s mean|B_s(orig) - B_s(gen)|`.
pub fn background_loss(orig: &Tensor, gen: &Tensor, bank: &BlurBank) -> Result<Tensor> {
    bank.validate()?;
    let mut total: Option<Tensor> = None;
    for &(sigma, weight) in &bank.kernels {
        let term = (l1_mean(&blur_nchw(orig, sigma)?, &blur_nchw(gen, sigma)?)? * weight)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    total.ok_or_else(|| Error::InvalidArgument("empty blur bank".into()))
}

/// Element-mean squared feature distance at the perceptual layer.
pub fn perceptual_loss(gen: &Tensor, orig: &Tensor, backbone: &dyn FeatureExtractor) -> Result<Tensor> {
    let fg = backbone.features(gen, PERCEPTUAL_LAYER)?;
    let fo = backbone.features(orig, PERCEPTUAL_LAYER)?.detach();
    mse_mean(&fg, &fo)
}

fn f64_pair(a: &ImageTensor, b: &ImageTensor) -> Result<(Tensor, Tensor)> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok((
        image_to_tensor(a, DType::F64, &Device::Cpu)?,
        image_to_tensor(b, DType::F64, &Device::Cpu)?,
    ))
}

/// Mean absolute difference between an image and its back-translation.
pub fn loss_cycle(original: &ImageTensor, back_translated: &ImageTensor) -> Result<f64> {
    let (a, b) = f64_pair(original, back_translated)?;
    scalar(&l1_mean(&a, &b)?)
}

pub fn loss_self_recon(rec: &ImageTensor, orig: &ImageTensor) -> Result<f64> {
    loss_cycle(orig, rec)
}

pub fn loss_perceptual(gen: &ImageTensor, orig: &ImageTensor, backbone: &dyn FeatureExtractor) -> Result<f64> {
    if gen.dims() != orig.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", gen.dims(), orig.dims())));
    }
    let dt = backbone.dtype();
    let g = image_to_tensor(gen, dt, &Device::Cpu)?;
    let o = image_to_tensor(orig, dt, &Device::Cpu)?;
    scalar(&perceptual_loss(&g, &o, backbone)?)
}

pub fn loss_color_constancy(gen: &ImageTensor) -> Result<f64> {
    let t = image_to_tensor(gen, DType::F64, &Device::Cpu)?;
    scalar(&color_constancy_loss(&t)?)
}

pub fn loss_background_consistency(orig: &ImageTensor, gen: &ImageTensor, bank: &BlurBank) -> Result<f64> {
    let (a, b) = f64_pair(orig, gen)?;
    scalar(&background_loss(&a, &b, bank)?)
}

/// Scalar loss components of one generator step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NdmComponents {
    pub adversarial: f64,
    pub kl: f64,
    pub cycle: f64,
    pub color: f64,
    pub perceptual: f64,
    pub background: f64,
    pub recon: f64,
}

/// Weighted sum of the generator-side components.
pub fn loss_ndm_total(c: &NdmComponents, w: &NdmLossWeights) -> f64 {
    w.adversarial * c.adversarial
        + w.kl * c.kl
        + w.cycle * c.cycle
        + w.color * c.color
        + w.perceptual * c.perceptual
        + w.background * c.background
        + w.recon * c.recon
}

/// Differentiable generator-side terms.
pub struct NdmLossTensors {
    pub adversarial: Tensor,
    pub kl: Tensor,
    pub cycle: Tensor,
    pub color: Tensor,
    pub perceptual: Tensor,
    pub background: Tensor,
    pub recon: Tensor,
}

impl NdmLossTensors {
    pub fn total(&self, w: &NdmLossWeights) -> Result<Tensor> {
        let terms = [
            (&self.adversarial, w.adversarial),
            (&self.kl, w.kl),
            (&self.cycle, w.cycle),
            (&self.color, w.color),
            (&self.perceptual, w.perceptual),
            (&self.background, w.background),
            (&self.recon, w.recon),
        ];
        let mut acc = (terms[0].0 * terms[0].1)?;
        for (t, k) in &terms[1..] {
            acc = (acc + (*t * *k)?)?;
        }
        Ok(acc)
    }

    pub fn components(&self) -> Result<NdmComponents> {
        Ok(NdmComponents {
            adversarial: scalar(&self.adversarial)?,
            kl: scalar(&self.kl)?,
            cycle: scalar(&self.cycle)?,
            color: scalar(&self.color)?,
            perceptual: scalar(&self.perceptual)?,
            background: scalar(&self.background)?,
            recon: scalar(&self.recon)?,
        })
    }
}

/// Images produced by one forward pass over `(x, y)`.
pub struct NdmForward {
    pub generated_clean: Tensor,
    pub generated_noisy: Tensor,
    pub losses: NdmLossTensors,
}

/// Full generator-side forward pass. `eta` draws the reparameterization
/// noise and the prior codes.
pub fn ndm_forward(
    nets: &NdmNetworks,
    x: &Tensor,
    y: &Tensor,
    backbone: &dyn FeatureExtractor,
    bank: &BlurBank,
    cycle_noise: CycleNoise,
    rng: &mut ChaCha8Rng,
) -> Result<NdmForward> {
    let (n, _, _, _) = x.dims4()?;
    if y.dim(0)? != n {
        return Err(Error::Shape("noisy and clean batches differ in size".into()));
    }
    let d = nets.arch.noise_dim;
    let (dt, dev) = (nets.dtype(), nets.device().clone());
    let cx = nets.content.forward(x)?;
    let cy = nets.content.forward(y)?;
    let (mu, logvar) = nets.noise.forward(x)?;
    let eta = randn(&[n, d], rng, dt, &dev)?;
    let zs = (&mu + ((&logvar * 0.5)?.exp()? * eta)?)?;
    let zp = match cycle_noise {
        CycleNoise::Prior => randn(&[n, d], rng, dt, &dev)?,
        CycleNoise::Encoded => zs.clone(),
    };

    let gc = nets.gen_y.forward(&cx, None)?;
    let gn = nets.gen_x.forward(&cy, Some(&zp))?;
    let x_rec = nets.gen_x.forward(&cx, Some(&zs))?;
    let y_rec = nets.gen_y.forward(&cy, None)?;
    let x_cyc = nets.gen_x.forward(&nets.content.forward(&gc)?, Some(&zs))?;
    let y_cyc = nets.gen_y.forward(&nets.content.forward(&gn)?, None)?;

    let adversarial = (lsgan_generator_loss(&nets.disc_y.forward(&gc)?)?
        + lsgan_generator_loss(&nets.disc_x.forward(&gn)?)?)?;
    let losses = NdmLossTensors {
        adversarial,
        kl: kl_loss(&mu, &logvar)?,
        cycle: (l1_mean(x, &x_cyc)? + l1_mean(y, &y_cyc)?)?,
        color: color_constancy_loss(&gc)?,
        perceptual: perceptual_loss(&gc, x, backbone)?,
        background: background_loss(x, &gc, bank)?,
        recon: (l1_mean(&x_rec, x)? + l1_mean(&y_rec, y)?)?,
    };
    Ok(NdmForward {
        generated_clean: gc,
        generated_noisy: gn,
        losses,
    })
}

/// Discriminator loss on detached generator outputs.
pub fn ndm_discriminator_loss(nets: &NdmNetworks, x: &Tensor, y: &Tensor, fwd: &NdmForward) -> Result<Tensor> {
    let ly = loss_lsgan(&nets.disc_y, y, &fwd.generated_clean)?;
    let lx = loss_lsgan(&nets.disc_x, x, &fwd.generated_noisy)?;
    Ok((ly + lx)?)
}

/// A random uniform probe in `[lo, hi)`.
pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}
