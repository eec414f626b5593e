use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BlurBank, HeMode};
use crate::lum::{HepReference, LumArchitecture, LumLossWeights, PriorKind};
use crate::ndm::{CycleNoise, NdmArchitecture, NdmLossWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Lum,
    Ndm,
}

/// Split names looked up in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitNames {
    /// Low-light images (paired with ground truth in the manifest's pairs).
    pub train: String,
    pub test: String,
    /// Normal-light images for the clean domain of the denoiser.
    pub clean: String,
}

impl Default for SplitNames {
    fn default() -> Self {
        Self {
            train: "train".into(),
            test: "test".into(),
            clean: "clean".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LumTrainConfig {
    pub lr: f64,
    /// Epochs after which the rate drops by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub patch: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; `None` means one pass over the images.
    pub steps_per_epoch: Option<usize>,
    pub arch: LumArchitecture,
    pub weights: LumLossWeights,
    pub prior: PriorKind,
    pub hep_reference: HepReference,
    pub he_mode: HeMode,
    pub flip: bool,
    pub divergence_factor: f64,
}

impl Default for LumTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_milestones: vec![20, 40],
            lr_factor: 0.1,
            weight_decay: 1e-4,
            batch: 16,
            patch: 48,
            epochs: 60,
            steps_per_epoch: None,
            arch: LumArchitecture::default(),
            weights: LumLossWeights::default(),
            prior: PriorKind::Hep,
            hep_reference: HepReference::Equalized,
            he_mode: HeMode::PerChannel,
            flip: true,
            divergence_factor: 10.0,
        }
    }
}

impl LumTrainConfig {
    /// Learning rate of a 1-based epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_milestones.iter().filter(|&&m| epoch > m).count();
        self.lr * self.lr_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NdmTrainConfig {
    pub lr: f64,
    /// Iterations over which the rate falls by one decade.
    pub decay_iterations: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub patch: usize,
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub arch: NdmArchitecture,
    pub weights: NdmLossWeights,
    pub cycle_noise: CycleNoise,
    pub blur: BlurBank,
    pub flip: bool,
    pub divergence_factor: f64,
    pub collapse_threshold: f64,
    pub collapse_window: usize,
}

impl Default for NdmTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            decay_iterations: 10_000.0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            batch: 16,
            patch: 64,
            iterations: 10_000,
            checkpoint_every: 1000,
            arch: NdmArchitecture::default(),
            weights: NdmLossWeights::default(),
            cycle_noise: CycleNoise::Prior,
            blur: BlurBank::default(),
            flip: true,
            divergence_factor: 10.0,
            collapse_threshold: 1e-3,
            collapse_window: 500,
        }
    }
}

impl NdmTrainConfig {
    /// `lr0 * 10^(-t / decay_iterations)`.
    pub fn lr_at_iteration(&self, t: usize) -> f64 {
        self.lr * 10f64.powf(-(t as f64) / self.decay_iterations)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub splits: SplitNames,
    pub lum: LumTrainConfig,
    pub ndm: NdmTrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            splits: SplitNames::default(),
            lum: LumTrainConfig::default(),
            ndm: NdmTrainConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        let l = &self.lum;
        if !(l.lr > 0.0) || !(l.lr_factor > 0.0) || l.weight_decay < 0.0 {
            return bad("LUM rates must be positive");
        }
        if l.batch == 0 || l.patch == 0 || l.patch % LumArchitecture::DOWNSAMPLING != 0 {
            return bad("LUM batch must be positive and patch even");
        }
        if !(l.weights.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        let n = &self.ndm;
        if !(n.lr > 0.0) || !(n.decay_iterations > 0.0) || n.weight_decay < 0.0 {
            return bad("NDM rates must be positive");
        }
        if !(0.0..1.0).contains(&n.beta1) || !(0.0..1.0).contains(&n.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if n.batch == 0 || n.patch < NdmArchitecture::MIN_SIDE || n.patch % NdmArchitecture::MIN_SIDE != 0 {
            return bad("NDM patch must be a positive multiple of 16");
        }
        n.weights.validate()?;
        n.blur.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lum_schedule_boundaries() {
        let c = LumTrainConfig::default();
        let table = [(1, 1e-4), (20, 1e-4), (21, 1e-5), (25, 1e-5), (40, 1e-5), (41, 1e-6), (45, 1e-6)];
        for (e, lr) in table {
            assert!((c.lr_at_epoch(e) - lr).abs() < 1e-18, "epoch {e}");
        }
    }

    #[test]
    fn ndm_schedule() {
        let c = NdmTrainConfig::default();
        assert_eq!(c.lr_at_iteration(0), 1e-4);
        assert!((c.lr_at_iteration(10_000) - 1e-5).abs() < 1e-18);
        assert!(c.lr_at_iteration(5000) < 1e-4 && c.lr_at_iteration(5000) > 1e-5);
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let mut c = TrainConfig::default();
        c.lum.patch = 47;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&TrainConfig::default()).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, TrainConfig::default());
        let partial: TrainConfig = serde_json::from_str(r#"{"seed": 3, "lum": {"epochs": 2}}"#).unwrap();
        assert_eq!(partial.seed, 3);
        assert_eq!(partial.lum.epochs, 2);
        assert_eq!(partial.lum.batch, 16);
    }
}
