//! Variant grids for the ablation studies and their evaluation.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::FeatureExtractor;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lum::{LumNetwork, PriorKind};
use crate::metrics::{niqe, psnr, ssim, NiqeModel};
use crate::ndm::{NdmLossWeights, NdmNetworks};
use crate::train::{LumTrainer, NdmTrainer, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Prior,
    LumLoss,
    NdmLoss,
    Denoiser,
}

impl FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(Study::Prior),
            "lum-loss" => Ok(Study::LumLoss),
            "ndm-loss" => Ok(Study::NdmLoss),
            "denoiser" => Ok(Study::Denoiser),
            other => Err(Error::InvalidArgument(format!(
                "unknown study {other:?} (expected prior, lum-loss, ndm-loss or denoiser)"
            ))),
        }
    }
}

impl Study {
    /// Header of the first CSV column.
    pub fn label_column(self) -> &'static str {
        match self {
            Study::Denoiser => "denoise_model",
            _ => "loss_function",
        }
    }

    /// Variant labels in table order.
    pub fn variants(self) -> Vec<String> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        match self {
            Study::Prior => PriorKind::ALL.iter().map(|k| format!("with {}", k.name())).collect(),
            Study::LumLoss => s(&["w/o L_hep", "w/o L_recon", "w/o L_is", "full loss"]),
            Study::NdmLoss => s(&[
                "w/o L_adv",
                "w/o L_KL",
                "w/o L_per",
                "w/o L_cc",
                "w/o L_bc",
                "w/o L_recon",
                "full loss",
            ]),
            Study::Denoiser => s(&["LUM", "LUM + NDM"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub niqe: f64,
}

/// Data and budgets shared by every variant.
pub struct AblationSetup {
    pub config: TrainConfig,
    /// Optimizer steps per LUM variant.
    pub lum_steps: usize,
    /// Iterations per NDM variant.
    pub ndm_steps: usize,
    pub train_low: Vec<ImageTensor>,
    pub clean: Vec<ImageTensor>,
    pub test_pairs: Vec<(ImageTensor, ImageTensor)>,
    pub backbone: Arc<dyn FeatureExtractor>,
    pub niqe_model: NiqeModel,
}

/// Mean PSNR / SSIM / NIQE of `enhance(low)` against ground truth. NIQE is
/// NaN for images too small to hold two NIQE patches.
pub fn evaluate<F>(pairs: &[(ImageTensor, ImageTensor)], model: &NiqeModel, mut enhance: F) -> Result<(f64, f64, f64)>
where
    F: FnMut(&ImageTensor) -> Result<ImageTensor>,
{
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (mut p, mut s, mut n) = (0.0, 0.0, 0.0);
    for (low, gt) in pairs {
        let out = enhance(low)?;
        p += psnr(&out, gt)?;
        s += ssim(&out, gt)?;
        n += match niqe(&out, model) {
            Ok(v) => v,
            Err(Error::TooSmall(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
    }
    let k = pairs.len() as f64;
    Ok((p / k, s / k, n / k))
}

fn train_lum_variant(setup: &AblationSetup, config: TrainConfig) -> Result<LumNetwork> {
    let mut t = LumTrainer::new(config, setup.train_low.clone(), setup.backbone.clone())?;
    for _ in 0..setup.lum_steps {
        t.step()?;
    }
    Ok(t.into_network())
}

fn train_ndm_variant(setup: &AblationSetup, lum: &LumNetwork, weights: NdmLossWeights) -> Result<NdmNetworks> {
    let mut config = setup.config.clone();
    config.ndm.weights = weights;
    let noisy = setup
        .train_low
        .iter()
        .map(|i| Ok(lum.decompose(i)?.reflectance))
        .collect::<Result<Vec<_>>>()?;
    let mut t = NdmTrainer::new(config, noisy, setup.clean.clone(), setup.backbone.clone())?;
    for _ in 0..setup.ndm_steps {
        t.step()?;
    }
    Ok(t.into_networks())
}

fn row(setup: &AblationSetup, variant: String, lum: &LumNetwork, ndm: Option<&NdmNetworks>) -> Result<AblationRow> {
    let (psnr, ssim, niqe) = evaluate(&setup.test_pairs, &setup.niqe_model, |low| {
        let r = lum.decompose(low)?.reflectance;
        match ndm {
            Some(n) => n.denoise(&r),
            None => Ok(r),
        }
    })?;
    log::info!("{variant}: PSNR {psnr:.3} SSIM {ssim:.4} NIQE {niqe:.3}");
    Ok(AblationRow {
        variant,
        psnr,
        ssim,
        niqe,
    })
}

/// Trains and evaluates every variant of `study`, in table order.
pub fn run_study(study: Study, setup: &AblationSetup) -> Result<Vec<AblationRow>> {
    let labels = study.variants();
    let mut rows = Vec::with_capacity(labels.len());
    match study {
        Study::Prior => {
            for (kind, label) in PriorKind::ALL.iter().zip(labels) {
                let mut c = setup.config.clone();
                c.lum.prior = *kind;
                let lum = train_lum_variant(setup, c)?;
                rows.push(row(setup, label, &lum, None)?);
            }
        }
        Study::LumLoss => {
            for (i, label) in labels.into_iter().enumerate() {
                let mut c = setup.config.clone();
                match i {
                    0 => c.lum.weights.lambda_hep = 0.0,
                    1 => c.lum.weights.lambda_recon = 0.0,
                    2 => c.lum.weights.lambda_is = 0.0,
                    _ => {}
                }
                let lum = train_lum_variant(setup, c)?;
                rows.push(row(setup, label, &lum, None)?);
            }
        }
        Study::NdmLoss => {
            let lum = train_lum_variant(setup, setup.config.clone())?;
            for (i, label) in labels.into_iter().enumerate() {
                let mut w = setup.config.ndm.weights;
                match i {
                    0 => w.adversarial = 0.0,
                    1 => w.kl = 0.0,
                    2 => w.perceptual = 0.0,
                    3 => w.cycle = 0.0,
                    4 => w.background = 0.0,
                    5 => w.recon = 0.0,
                    _ => {}
                }
                let ndm = train_ndm_variant(setup, &lum, w)?;
                rows.push(row(setup, label, &lum, Some(&ndm))?);
            }
        }
        Study::Denoiser => {
            let lum = train_lum_variant(setup, setup.config.clone())?;
            let mut it = labels.into_iter();
            rows.push(row(setup, it.next().unwrap(), &lum, None)?);
            let ndm = train_ndm_variant(setup, &lum, setup.config.ndm.weights)?;
            rows.push(row(setup, it.next().unwrap(), &lum, Some(&ndm))?);
        }
    }
    Ok(rows)
}

/// Table-shaped CSV: label column, then PSNR, SSIM, NIQE.
pub fn write_table(path: impl AsRef<Path>, study: Study, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record([study.label_column(), "psnr", "ssim", "niqe"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            format!("{:.4}", r.psnr),
            format!("{:.4}", r.ssim),
            format!("{:.4}", r.niqe),
        ])?;
    }
    w.flush()?;
    Ok(())
}
