use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::image::{save_image, ImageTensor};
use crate::lum::LumNetwork;
use crate::ndm::{ndm_discriminator_loss, ndm_forward, NdmArchitecture, NdmForward, NdmNetworks, LABEL_FAKE, LABEL_REAL};
use crate::nn::{architecture_hash, stream_rng};
use crate::tensor::{images_to_tensor, scalar};
use crate::train::checkpoint::{Sidecar, NDM_OPTIM_D, NDM_OPTIM_G};
use crate::train::config::{Stage, TrainConfig};
use crate::train::optim::Adam;
use crate::train::sampler::PatchSampler;
use crate::train::{append_csv, streams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdmStepRecord {
    pub step: usize,
    pub total: f64,
    pub adversarial: f64,
    pub kl: f64,
    pub cycle: f64,
    pub color: f64,
    pub perceptual: f64,
    pub background: f64,
    pub recon: f64,
    pub discriminator: f64,
    pub lr: f64,
}

pub struct NdmTrainer {
    config: TrainConfig,
    nets: NdmNetworks,
    opt_g: Adam,
    opt_d: Adam,
    backbone: Arc<dyn FeatureExtractor>,
    noisy: Vec<ImageTensor>,
    clean: Vec<ImageTensor>,
    step: usize,
    initial_loss: Option<f64>,
    collapse_run: usize,
    collapse_warned: bool,
}

impl std::fmt::Debug for NdmTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NdmTrainer").field("step", &self.step).finish()
    }
}

/// One sampled pair of unpaired batches.
pub struct NdmBatch {
    pub noisy: Tensor,
    pub clean: Tensor,
}

impl NdmTrainer {
    pub fn new(
        config: TrainConfig,
        noisy: Vec<ImageTensor>,
        clean: Vec<ImageTensor>,
        backbone: Arc<dyn FeatureExtractor>,
    ) -> Result<Self> {
        config.validate()?;
        if noisy.is_empty() || clean.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let p = config.ndm.patch;
        for img in noisy.iter().chain(&clean) {
            let (h, w, c) = img.dims();
            if c != 3 {
                return Err(Error::Channels(c));
            }
            if h < p || w < p {
                return Err(Error::TooSmall(format!("{h}x{w} training image below patch {p}")));
            }
        }
        let n = &config.ndm;
        let nets = NdmNetworks::new(n.arch.clone(), config.seed, DType::F32, &Device::Cpu)?;
        let opt_g = Adam::new(nets.generator_vars(), n.beta1, n.beta2, n.weight_decay)?;
        let opt_d = Adam::new(nets.discriminator_vars(), n.beta1, n.beta2, n.weight_decay)?;
        Ok(Self {
            config,
            nets,
            opt_g,
            opt_d,
            backbone,
            noisy,
            clean,
            step: 0,
            initial_loss: None,
            collapse_run: 0,
            collapse_warned: false,
        })
    }

    pub fn resume(
        dir: impl AsRef<Path>,
        config: TrainConfig,
        noisy: Vec<ImageTensor>,
        clean: Vec<ImageTensor>,
        backbone: Arc<dyn FeatureExtractor>,
    ) -> Result<Self> {
        let side = Sidecar::read(dir.as_ref())?;
        side.check_architecture(&config.ndm.arch)?;
        let mut t = Self::new(config, noisy, clean, backbone)?;
        t.nets.load_dir(dir.as_ref())?;
        let steps = |i: usize| side.optimizer_steps.get(i).copied().unwrap_or(0);
        t.opt_g.load(dir.as_ref().join(NDM_OPTIM_G), steps(0))?;
        t.opt_d.load(dir.as_ref().join(NDM_OPTIM_D), steps(1))?;
        t.step = side.step;
        t.initial_loss = side.initial_loss;
        t.collapse_run = side.extra.get("collapse_run").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        Ok(t)
    }

    pub fn networks(&self) -> &NdmNetworks {
        &self.nets
    }

    pub fn into_networks(self) -> NdmNetworks {
        self.nets
    }

    pub fn iterations_completed(&self) -> usize {
        self.step
    }

    pub fn collapse_warned(&self) -> bool {
        self.collapse_warned
    }

    /// Unpaired random crops for iteration `t`.
    pub fn sample(&self, t: usize) -> Result<NdmBatch> {
        let c = &self.config.ndm;
        let sampler = PatchSampler::new(c.patch, c.batch, c.flip);
        let draw = |set: &[ImageTensor], stream: u64| -> Result<Tensor> {
            let mut rng = stream_rng(self.config.seed, &[stream, t as u64]);
            let idx: Vec<usize> = (0..c.batch).map(|_| rng.random_range(0..set.len())).collect();
            let patches = sampler.sample_aligned(&[set], &idx, &mut rng)?.remove(0);
            images_to_tensor(&patches, DType::F32, &Device::Cpu)
        };
        Ok(NdmBatch {
            noisy: draw(&self.noisy, streams::NDM_NOISY)?,
            clean: draw(&self.clean, streams::NDM_CLEAN)?,
        })
    }

    /// Updates the encoders and generators only.
    pub fn generator_step(&mut self, batch: &NdmBatch) -> Result<(NdmForward, NdmStepRecord)> {
        let c = &self.config.ndm;
        let mut rng = stream_rng(self.config.seed, &[streams::NDM_NOISE, self.step as u64]);
        let fwd = ndm_forward(
            &self.nets,
            &batch.noisy,
            &batch.clean,
            self.backbone.as_ref(),
            &c.blur,
            c.cycle_noise,
            &mut rng,
        )?;
        let total = fwd.losses.total(&c.weights)?;
        let comps = fwd.losses.components()?;
        let lr = c.lr_at_iteration(self.step);
        let rec = NdmStepRecord {
            step: self.step + 1,
            total: scalar(&total)?,
            adversarial: comps.adversarial,
            kl: comps.kl,
            cycle: comps.cycle,
            color: comps.color,
            perceptual: comps.perceptual,
            background: comps.background,
            recon: comps.recon,
            discriminator: f64::NAN,
            lr,
        };
        let bad = |init: f64| Error::Diverged {
            step: rec.step,
            loss: rec.total,
            initial: init,
        };
        if !rec.total.is_finite() {
            return Err(bad(self.initial_loss.unwrap_or(f64::NAN)));
        }
        match self.initial_loss {
            None => self.initial_loss = Some(rec.total),
            Some(init) if rec.total > c.divergence_factor * init => return Err(bad(init)),
            _ => {}
        }
        let grads = total.backward()?;
        self.opt_g.step(&grads, lr)?;
        Ok((fwd, rec))
    }

    /// Updates the discriminators only, on detached generator outputs.
    pub fn discriminator_step(&mut self, batch: &NdmBatch, fwd: &NdmForward) -> Result<f64> {
        let c = &self.config.ndm;
        let loss = ndm_discriminator_loss(&self.nets, &batch.noisy, &batch.clean, fwd)?;
        let value = scalar(&loss)?;
        let grads = loss.backward()?;
        self.opt_d.step(&grads, c.lr_at_iteration(self.step))?;
        if value < c.collapse_threshold {
            self.collapse_run += 1;
            if self.collapse_run >= c.collapse_window && !self.collapse_warned {
                log::warn!(
                    "discriminator loss below {} for {} consecutive steps",
                    c.collapse_threshold,
                    self.collapse_run
                );
                self.collapse_warned = true;
            }
        } else {
            self.collapse_run = 0;
        }
        Ok(value)
    }

    /// One alternating generator / discriminator iteration.
    pub fn step(&mut self) -> Result<NdmStepRecord> {
        let batch = self.sample(self.step)?;
        let (fwd, mut rec) = self.generator_step(&batch)?;
        rec.discriminator = self.discriminator_step(&batch, &fwd)?;
        self.step += 1;
        Ok(rec)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        self.nets.save_dir(dir)?;
        self.opt_g.save(dir.join(NDM_OPTIM_G))?;
        self.opt_d.save(dir.join(NDM_OPTIM_D))?;
        let arch = &self.config.ndm.arch;
        let mut extra = serde_json::Map::new();
        extra.insert("noise_dim".into(), arch.noise_dim.into());
        extra.insert("label_real".into(), LABEL_REAL.into());
        extra.insert("label_fake".into(), LABEL_FAKE.into());
        extra.insert("d_steps_per_g_step".into(), 1.into());
        extra.insert("collapse_run".into(), self.collapse_run.into());
        Sidecar {
            stage: Stage::Ndm,
            architecture: serde_json::to_value(arch)?,
            architecture_hash: architecture_hash(arch)?,
            seed: self.config.seed,
            epoch: 0,
            step_in_epoch: 0,
            step: self.step,
            loss_weights: serde_json::to_value(self.config.ndm.weights)?,
            config: serde_json::to_value(&self.config)?,
            optimizer_steps: vec![self.opt_g.steps_taken(), self.opt_d.steps_taken()],
            initial_loss: self.initial_loss,
            extra,
        }
        .write(dir)?;
        Ok(dir.to_path_buf())
    }

    /// Trains until `iterations` are complete, checkpointing every
    /// `checkpoint_every` iterations and at the end.
    pub fn run(&mut self, out_dir: impl AsRef<Path>, iterations: usize) -> Result<Vec<NdmStepRecord>> {
        let every = self.config.ndm.checkpoint_every.max(1);
        let mut all = Vec::new();
        let mut pending = Vec::new();
        while self.step < iterations {
            let r = self.step()?;
            pending.push(r);
            if self.step % every == 0 || self.step == iterations {
                append_csv(out_dir.as_ref().join("loss.csv"), &pending)?;
                self.save(out_dir.as_ref())?;
                log::info!("NDM iteration {} loss {:.6}", self.step, r.total);
                all.append(&mut pending);
            }
        }
        Ok(all)
    }
}

/// Loads trained denoiser networks for inference.
pub fn load_ndm(dir: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<NdmNetworks> {
    let side = Sidecar::read(dir.as_ref())?;
    if side.stage != Stage::Ndm {
        return Err(Error::InvalidArgument(format!("{} is not an NDM checkpoint", dir.as_ref().display())));
    }
    let arch: NdmArchitecture = side.architecture_as()?;
    side.check_architecture(&arch)?;
    let nets = NdmNetworks::new(arch, side.seed, dtype, device)?;
    for name in crate::ndm::NETWORK_NAMES {
        let p = dir.as_ref().join(format!("{name}.safetensors"));
        if !p.is_file() {
            return Err(Error::MissingWeights(p));
        }
    }
    nets.load_dir(dir.as_ref())?;
    Ok(nets)
}

/// Writes the LUM reflectance of every input to `out_dir` as PNG, keeping
/// file stems, and returns the written paths.
pub fn precompute_reflectances(
    lum: &LumNetwork,
    inputs: &[(PathBuf, ImageTensor)],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir.as_ref())?;
    let mut out = Vec::with_capacity(inputs.len());
    for (i, (path, img)) in inputs.iter().enumerate() {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("{i:05}"));
        let target = out_dir.as_ref().join(format!("{i:05}_{stem}.png"));
        save_image(&lum.decompose(img)?.reflectance, &target)?;
        out.push(target);
    }
    Ok(out)
}
