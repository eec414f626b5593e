use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hep_core::TrainConfig;
use serde::{Deserialize, Serialize};

/// Per-variant training budgets of the ablation runner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationBudget {
    pub lum_steps: usize,
    pub ndm_steps: usize,
    /// Caps the number of evaluated test pairs; all when absent.
    pub test_limit: Option<usize>,
}

impl Default for AblationBudget {
    fn default() -> Self {
        Self {
            lum_steps: 50,
            ndm_steps: 50,
            test_limit: None,
        }
    }
}

/// Contents of the TOML file passed with `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// VGG-19 weights (`.safetensors` or `.pth`).
    pub backbone: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub niqe_model: Option<PathBuf>,
    #[serde(default)]
    pub ablation: AblationBudget,
}

impl FileConfig {
    /// Parses `path`; relative paths inside are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.backbone, &mut cfg.manifest, &mut cfg.niqe_model].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "seed = 7\nmanifest = \"lol.json\"\n[lum]\nepochs = 3\npatch = 32\n[ablation]\nlum_steps = 5\n",
        )
        .unwrap();
        let c = FileConfig::load(&p).unwrap();
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.train.lum.epochs, 3);
        assert_eq!(c.train.lum.batch, TrainConfig::default().lum.batch);
        assert_eq!(c.manifest.unwrap(), dir.path().join("lol.json"));
        assert_eq!(c.ablation.lum_steps, 5);
        assert_eq!(c.ablation.ndm_steps, 50);
    }

    #[test]
    fn invalid_patch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[lum]\npatch = 33\n").unwrap();
        assert!(FileConfig::load(&p).is_err());
    }
}
