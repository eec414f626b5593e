#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hep_core::image::save_image;
use hep_core::synth::low_light_pairs;
use hep_core::DatasetManifest;

/// Small networks so CLI runs finish in seconds.
pub const SMALL_CONFIG: &str = r#"
seed = 3

[lum]
batch = 2
patch = 32
epochs = 1

[lum.arch]
width = 8

[ndm]
batch = 2
patch = 32
iterations = 2
checkpoint_every = 1

[ndm.arch]
base = 8
res_blocks = 1
noise_dim = 4
disc_base = 8
"#;

pub struct Dataset {
    pub manifest: PathBuf,
    pub test_low: Vec<PathBuf>,
    pub test_gt: Vec<PathBuf>,
}

/// Writes synthetic low/ground-truth pairs as PNGs under `dir` together with
/// a manifest holding `train`, `test` and `clean` splits.
pub fn write_dataset(dir: &Path, n_train: usize, n_test: usize, h: usize, w: usize) -> Dataset {
    let pairs = low_light_pairs(n_train + n_test, h, w, 77).unwrap();
    let mut splits: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    let mut paired = BTreeMap::new();
    let (mut test_low, mut test_gt) = (Vec::new(), Vec::new());
    for (i, (low, gt)) in pairs.iter().enumerate() {
        let split = if i < n_train { "train" } else { "test" };
        let low_rel = PathBuf::from(format!("{split}/low/{i:03}.png"));
        let gt_rel = PathBuf::from(format!("{split}/high/{i:03}.png"));
        for (img, rel) in [(low, &low_rel), (gt, &gt_rel)] {
            std::fs::create_dir_all(dir.join(rel).parent().unwrap()).unwrap();
            save_image(img, dir.join(rel)).unwrap();
        }
        splits.entry(split.into()).or_default().push(low_rel.clone());
        if i < n_train {
            splits.entry("clean".into()).or_default().push(gt_rel.clone());
        } else {
            test_low.push(dir.join(&low_rel));
            test_gt.push(dir.join(&gt_rel));
        }
        paired.insert(low_rel, gt_rel);
    }
    let manifest = DatasetManifest {
        root: None,
        splits,
        pairs: paired,
    };
    let path = dir.join("manifest.json");
    manifest.save(&path).unwrap();
    Dataset {
        manifest: path,
        test_low,
        test_gt,
    }
}

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("{SMALL_CONFIG}\n{extra}")).unwrap();
    path
}

pub fn hep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("hep binary runs")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}
