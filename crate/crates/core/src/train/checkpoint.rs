use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::architecture_hash;
use crate::train::config::Stage;

pub const SIDECAR: &str = "checkpoint.json";
pub const LUM_WEIGHTS: &str = "model.safetensors";
pub const LUM_OPTIM: &str = "optim.safetensors";
pub const NDM_OPTIM_G: &str = "optim_g.safetensors";
pub const NDM_OPTIM_D: &str = "optim_d.safetensors";

/// JSON metadata stored next to the parameter archives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub stage: Stage,
    pub architecture: serde_json::Value,
    pub architecture_hash: String,
    pub seed: u64,
    /// Completed epochs (LUM) or 0 (NDM).
    pub epoch: usize,
    /// Steps completed inside the current epoch (LUM).
    pub step_in_epoch: usize,
    /// Global optimizer steps / iterations.
    pub step: usize,
    pub loss_weights: serde_json::Value,
    pub config: serde_json::Value,
    pub optimizer_steps: Vec<u64>,
    pub initial_loss: Option<f64>,
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl Sidecar {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        std::fs::create_dir_all(dir.as_ref())?;
        let p = dir.as_ref().join(SIDECAR);
        std::fs::write(&p, serde_json::to_vec_pretty(self)?).map_err(|e| Error::Write {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        Ok(p)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let p = dir.as_ref().join(SIDECAR);
        if !p.is_file() {
            return Err(Error::MissingWeights(p));
        }
        let bytes = std::fs::read(&p)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::CorruptFile {
            path: p,
            reason: e.to_string(),
        })
    }

    /// Rejects a checkpoint whose architecture differs from `expected`.
    pub fn check_architecture<T: Serialize>(&self, expected: &T) -> Result<()> {
        let want = architecture_hash(expected)?;
        if want != self.architecture_hash {
            return Err(Error::ArchitectureMismatch {
                expected: want,
                found: self.architecture_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn architecture_as<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.architecture.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lum::LumArchitecture;

    #[test]
    fn round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let arch = LumArchitecture { width: 8 };
        let s = Sidecar {
            stage: Stage::Lum,
            architecture: serde_json::to_value(&arch).unwrap(),
            architecture_hash: architecture_hash(&arch).unwrap(),
            seed: 4,
            epoch: 2,
            step_in_epoch: 1,
            step: 17,
            loss_weights: serde_json::json!({}),
            config: serde_json::json!({}),
            optimizer_steps: vec![17],
            initial_loss: Some(0.123456789012345),
            extra: Default::default(),
        };
        s.write(dir.path()).unwrap();
        let back = Sidecar::read(dir.path()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.step, 17);
        back.check_architecture(&arch).unwrap();
        assert!(matches!(
            back.check_architecture(&LumArchitecture { width: 9 }),
            Err(Error::ArchitectureMismatch { .. })
        ));
        assert_eq!(back.architecture_as::<LumArchitecture>().unwrap(), arch);
        assert!(matches!(Sidecar::read(dir.path().join("x")), Err(Error::MissingWeights(_))));
    }
}
