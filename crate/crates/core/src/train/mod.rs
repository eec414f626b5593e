//! Dataset plumbing, optimizer, schedules, checkpoints and the two
//! training loops.

pub mod checkpoint;
pub mod config;
pub mod lum_loop;
pub mod manifest;
pub mod ndm_loop;
pub mod optim;
pub mod sampler;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device};
use serde::Serialize;

use crate::backbone::FeatureExtractor;
use crate::error::Result;

pub use checkpoint::Sidecar;
pub use config::{LumTrainConfig, NdmTrainConfig, Stage, TrainConfig};
pub use lum_loop::{load_lum, LumStepRecord, LumTrainer};
pub use manifest::{AuditedReader, DatasetManifest};
pub use ndm_loop::{load_ndm, precompute_reflectances, NdmStepRecord, NdmTrainer};
pub use optim::Adam;
pub use sampler::{sample_patches, PatchSampler};

/// Stream ids separating the random draws of each consumer.
pub mod streams {
    pub const LUM_ORDER: u64 = 1;
    pub const LUM_CROP: u64 = 2;
    pub const NDM_NOISY: u64 = 3;
    pub const NDM_CLEAN: u64 = 4;
    pub const NDM_NOISE: u64 = 5;
}

/// Appends rows to a CSV file, writing the header when the file is new.
pub fn append_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let exists = path.as_ref().is_file();
    if let Some(parent) = path.as_ref().parent() {
        std::fs::create_dir_all(parent)?;
    }
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path.as_ref())?;
    let mut w = csv::WriterBuilder::new().has_headers(!exists).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of a manifest-driven training run.
#[derive(Debug)]
pub struct TrainOutcome<R> {
    pub checkpoint: PathBuf,
    pub history: Vec<R>,
    /// Every image file the run opened.
    pub accessed: Vec<PathBuf>,
}

fn has_checkpoint(dir: &Path) -> bool {
    dir.join(checkpoint::SIDECAR).is_file()
}

/// Trains the decomposition network on the manifest's training split. With
/// `resume`, continues from a checkpoint already present in `out_dir`.
pub fn train_lum(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    backbone: Arc<dyn FeatureExtractor>,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<TrainOutcome<LumStepRecord>> {
    manifest.validate(&config.splits.test)?;
    let reader = AuditedReader::excluding_test(manifest, &config.splits.test);
    let images = reader.read_all(manifest.split(&config.splits.train)?)?;
    let images = images.into_iter().map(|i| i.to_rgb()).collect();
    let mut trainer = if resume && has_checkpoint(out_dir.as_ref()) {
        LumTrainer::resume(out_dir.as_ref(), config.clone(), images, backbone)?
    } else {
        LumTrainer::new(config.clone(), images, backbone)?
    };
    let history = trainer.run(out_dir.as_ref(), config.lum.epochs)?;
    Ok(TrainOutcome {
        checkpoint: out_dir.as_ref().to_path_buf(),
        history,
        accessed: reader.accessed(),
    })
}

/// Trains the denoiser: the noisy domain is the LUM reflectance of the
/// training split (written under `out_dir/reflectance`), the clean domain
/// is the manifest's clean split.
pub fn train_ndm(
    config: &TrainConfig,
    manifest: &DatasetManifest,
    lum_checkpoint: impl AsRef<Path>,
    backbone: Arc<dyn FeatureExtractor>,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<TrainOutcome<NdmStepRecord>> {
    manifest.validate(&config.splits.test)?;
    let reader = AuditedReader::excluding_test(manifest, &config.splits.test);
    let lum = load_lum(lum_checkpoint, DType::F32, &Device::Cpu)?;
    let lows = manifest.split(&config.splits.train)?;
    let inputs = lows
        .iter()
        .map(|p| Ok((p.clone(), reader.read(p)?.to_rgb())))
        .collect::<Result<Vec<_>>>()?;
    let refl_dir = out_dir.as_ref().join("reflectance");
    let written = precompute_reflectances(&lum, &inputs, &refl_dir)?;
    let noisy = written
        .iter()
        .map(|p| crate::image::load_image(p))
        .collect::<Result<Vec<_>>>()?;
    let clean = reader
        .read_all(manifest.split(&config.splits.clean)?)?
        .into_iter()
        .map(|i| i.to_rgb())
        .collect();
    let mut trainer = if resume && has_checkpoint(out_dir.as_ref()) {
        NdmTrainer::resume(out_dir.as_ref(), config.clone(), noisy, clean, backbone)?
    } else {
        NdmTrainer::new(config.clone(), noisy, clean, backbone)?
    };
    let history = trainer.run(out_dir.as_ref(), config.ndm.iterations)?;
    Ok(TrainOutcome {
        checkpoint: out_dir.as_ref().to_path_buf(),
        history,
        accessed: reader.accessed(),
    })
}
