use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lum::{illum_smooth_loss, lum_total, prior_loss, recon_loss, LumArchitecture, LumNetwork, PriorTargets};
use crate::nn::{architecture_hash, stream_rng};
use crate::tensor::{images_to_tensor, scalar};
use crate::train::checkpoint::{Sidecar, LUM_OPTIM, LUM_WEIGHTS};
use crate::train::config::{Stage, TrainConfig};
use crate::train::optim::Adam;
use crate::train::sampler::{batch_indices, epoch_order, PatchSampler};
use crate::train::{append_csv, streams};

/// Loss values of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumStepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub prior: f64,
    pub smooth: f64,
    pub lr: f64,
}

pub struct LumTrainer {
    config: TrainConfig,
    net: LumNetwork,
    opt: Adam,
    backbone: Arc<dyn FeatureExtractor>,
    images: Vec<ImageTensor>,
    epoch: usize,
    step_in_epoch: usize,
    step: usize,
    initial_loss: Option<f64>,
}

impl std::fmt::Debug for LumTrainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LumTrainer")
            .field("epoch", &self.epoch)
            .field("step", &self.step)
            .finish()
    }
}

impl LumTrainer {
    pub fn new(config: TrainConfig, images: Vec<ImageTensor>, backbone: Arc<dyn FeatureExtractor>) -> Result<Self> {
        config.validate()?;
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for img in &images {
            let (h, w, c) = img.dims();
            if c != 3 {
                return Err(Error::Channels(c));
            }
            if h < config.lum.patch || w < config.lum.patch {
                return Err(Error::TooSmall(format!("{h}x{w} training image below patch {}", config.lum.patch)));
            }
        }
        let net = LumNetwork::new(config.lum.arch.clone(), config.seed, DType::F32, &Device::Cpu)?;
        let opt = Adam::new(net.params().vars(), 0.9, 0.999, config.lum.weight_decay)?;
        Ok(Self {
            config,
            net,
            opt,
            backbone,
            images,
            epoch: 0,
            step_in_epoch: 0,
            step: 0,
            initial_loss: None,
        })
    }

    /// Continues from a checkpoint directory written by [`LumTrainer::save`].
    pub fn resume(
        dir: impl AsRef<Path>,
        config: TrainConfig,
        images: Vec<ImageTensor>,
        backbone: Arc<dyn FeatureExtractor>,
    ) -> Result<Self> {
        let side = Sidecar::read(dir.as_ref())?;
        side.check_architecture(&config.lum.arch)?;
        let mut t = Self::new(config, images, backbone)?;
        t.net.params().load(dir.as_ref().join(LUM_WEIGHTS))?;
        t.opt.load(dir.as_ref().join(LUM_OPTIM), side.optimizer_steps.first().copied().unwrap_or(0))?;
        t.epoch = side.epoch;
        t.step_in_epoch = side.step_in_epoch;
        t.step = side.step;
        t.initial_loss = side.initial_loss;
        Ok(t)
    }

    pub fn network(&self) -> &LumNetwork {
        &self.net
    }

    pub fn into_network(self) -> LumNetwork {
        self.net
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config
            .lum
            .steps_per_epoch
            .unwrap_or_else(|| self.images.len().div_ceil(self.config.lum.batch))
            .max(1)
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<LumStepRecord> {
        let c = &self.config.lum;
        let epoch = self.epoch + 1;
        let order = epoch_order(self.images.len(), self.config.seed, streams::LUM_ORDER, epoch);
        let idx = batch_indices(&order, self.step_in_epoch, c.batch);
        let mut rng = stream_rng(self.config.seed, &[streams::LUM_CROP, epoch as u64, self.step_in_epoch as u64]);
        let sampler = PatchSampler::new(c.patch, c.batch, c.flip);
        let patches = sampler.sample_aligned(&[&self.images], &idx, &mut rng)?.remove(0);

        let dev = Device::Cpu;
        let x = images_to_tensor(&patches, DType::F32, &dev)?;
        let targets = PriorTargets::from_images(&patches, c.he_mode, DType::F32, &dev)?;
        let (r, l) = self.net.forward(&x)?;
        let recon = recon_loss(&r, &l, &x)?;
        let prior = prior_loss(c.prior, &r, &targets, c.hep_reference, self.backbone.as_ref())?;
        let smooth = illum_smooth_loss(&l, &x, c.weights.epsilon)?;
        let total = lum_total(&recon, &prior, &smooth, &c.weights)?;
        let lr = c.lr_at_epoch(epoch);
        let record = LumStepRecord {
            step: self.step + 1,
            epoch,
            total: scalar(&total)?,
            recon: scalar(&recon)?,
            prior: scalar(&prior)?,
            smooth: scalar(&smooth)?,
            lr,
        };
        if !record.total.is_finite() {
            return Err(Error::Diverged {
                step: record.step,
                loss: record.total,
                initial: self.initial_loss.unwrap_or(f64::NAN),
            });
        }
        match self.initial_loss {
            None => self.initial_loss = Some(record.total),
            Some(init) if record.total > c.divergence_factor * init => {
                return Err(Error::Diverged {
                    step: record.step,
                    loss: record.total,
                    initial: init,
                })
            }
            _ => {}
        }
        let grads = total.backward()?;
        self.opt.step(&grads, lr)?;

        self.step += 1;
        self.step_in_epoch += 1;
        if self.step_in_epoch == self.steps_per_epoch() {
            self.epoch += 1;
            self.step_in_epoch = 0;
        }
        Ok(record)
    }

    /// Runs the remaining steps of the current epoch.
    pub fn train_epoch(&mut self) -> Result<Vec<LumStepRecord>> {
        let target = self.epoch + 1;
        let mut out = Vec::new();
        while self.epoch < target {
            out.push(self.step()?);
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.net.params().save(dir.join(LUM_WEIGHTS))?;
        self.opt.save(dir.join(LUM_OPTIM))?;
        let arch = &self.config.lum.arch;
        Sidecar {
            stage: Stage::Lum,
            architecture: serde_json::to_value(arch)?,
            architecture_hash: architecture_hash(arch)?,
            seed: self.config.seed,
            epoch: self.epoch,
            step_in_epoch: self.step_in_epoch,
            step: self.step,
            loss_weights: serde_json::to_value(self.config.lum.weights)?,
            config: serde_json::to_value(&self.config)?,
            optimizer_steps: vec![self.opt.steps_taken()],
            initial_loss: self.initial_loss,
            extra: Default::default(),
        }
        .write(dir)?;
        Ok(dir.to_path_buf())
    }

    /// Trains until `epochs` are complete, checkpointing into `out_dir` and
    /// appending to `out_dir/loss.csv` after every epoch.
    pub fn run(&mut self, out_dir: impl AsRef<Path>, epochs: usize) -> Result<Vec<LumStepRecord>> {
        let mut all = Vec::new();
        while self.epoch < epochs {
            let recs = self.train_epoch()?;
            append_csv(out_dir.as_ref().join("loss.csv"), &recs)?;
            self.save(out_dir.as_ref())?;
            log::info!(
                "LUM epoch {} mean loss {:.6}",
                self.epoch,
                recs.iter().map(|r| r.total).sum::<f64>() / recs.len() as f64
            );
            all.extend(recs);
        }
        Ok(all)
    }
}

/// Loads a trained decomposition network for inference.
pub fn load_lum(dir: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<LumNetwork> {
    let side = Sidecar::read(dir.as_ref())?;
    if side.stage != Stage::Lum {
        return Err(Error::InvalidArgument(format!("{} is not a LUM checkpoint", dir.as_ref().display())));
    }
    let arch: LumArchitecture = side.architecture_as()?;
    side.check_architecture(&arch)?;
    let net = LumNetwork::new(arch, side.seed, dtype, device)?;
    let weights = dir.as_ref().join(LUM_WEIGHTS);
    if !weights.is_file() {
        return Err(Error::MissingWeights(weights));
    }
    net.params().load(weights)?;
    Ok(net)
}

/// Per-epoch mean of the total loss.
pub fn epoch_means(records: &[LumStepRecord]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in records {
        match out.last_mut() {
            Some(last) if last.0 == r.epoch => {
                last.1 += r.total;
                last.2 += 1;
            }
            _ => out.push((r.epoch, r.total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}
