use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, ImageTensor};

/// Named splits of image paths plus a low -> ground-truth pairing map.
///
/// Relative paths resolve against `root`, or against the manifest's own
/// directory when `root` is absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub splits: BTreeMap<String, Vec<PathBuf>>,
    #[serde(default)]
    pub pairs: BTreeMap<PathBuf, PathBuf>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Unreadable {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let base = match &m.root {
            Some(r) if r.is_absolute() => r.clone(),
            Some(r) => path.parent().unwrap_or(Path::new(".")).join(r),
            None => path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        m.resolve(&base);
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        for files in self.splits.values_mut() {
            *files = files.iter().map(fix).collect();
        }
        self.pairs = self.pairs.iter().map(|(a, b)| (fix(a), fix(b))).collect();
        self.root = Some(base.to_path_buf());
    }

    pub fn split(&self, name: &str) -> Result<&[PathBuf]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Manifest(format!("no split named {name:?}")))
    }

    /// `(low, gt)` pairs of a split; every member must be paired.
    pub fn paired(&self, name: &str) -> Result<Vec<(PathBuf, PathBuf)>> {
        self.split(name)?
            .iter()
            .map(|p| {
                self.pairs
                    .get(p)
                    .map(|g| (p.clone(), g.clone()))
                    .ok_or_else(|| Error::Manifest(format!("{} has no ground-truth pair", p.display())))
            })
            .collect()
    }

    /// Every path exists and no file (or its ground truth) is shared
    /// between `test` and any other split.
    pub fn validate(&self, test: &str) -> Result<()> {
        for (name, files) in &self.splits {
            for f in files.iter().chain(files.iter().filter_map(|f| self.pairs.get(f))) {
                if !f.is_file() {
                    return Err(Error::Manifest(format!("{name}: {} does not exist", f.display())));
                }
            }
        }
        let held = self.test_files(test);
        for (name, files) in self.splits.iter().filter(|(n, _)| n.as_str() != test) {
            for f in files.iter().chain(files.iter().filter_map(|f| self.pairs.get(f))) {
                if held.contains(f) {
                    return Err(Error::Manifest(format!(
                        "{} appears in both {name:?} and {test:?}",
                        f.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Test images and their ground truths.
    pub fn test_files(&self, test: &str) -> BTreeSet<PathBuf> {
        let files = self.splits.get(test).cloned().unwrap_or_default();
        let gts: Vec<PathBuf> = files.iter().filter_map(|f| self.pairs.get(f).cloned()).collect();
        files.into_iter().chain(gts).collect()
    }
}

/// Image reader that logs every path it opens and refuses a forbidden set.
#[derive(Debug, Clone, Default)]
pub struct AuditedReader {
    forbidden: Arc<BTreeSet<PathBuf>>,
    log: Arc<Mutex<Vec<PathBuf>>>,
}

impl AuditedReader {
    pub fn new(forbidden: BTreeSet<PathBuf>) -> Self {
        Self {
            forbidden: Arc::new(forbidden),
            log: Arc::default(),
        }
    }

    /// Reader that refuses the manifest's test split.
    pub fn excluding_test(manifest: &DatasetManifest, test: &str) -> Self {
        Self::new(manifest.test_files(test))
    }

    pub fn read(&self, path: &Path) -> Result<ImageTensor> {
        if self.forbidden.contains(path) {
            return Err(Error::Manifest(format!(
                "refusing to read held-out file {}",
                path.display()
            )));
        }
        self.log.lock().unwrap().push(path.to_path_buf());
        load_image(path)
    }

    pub fn read_all(&self, paths: &[PathBuf]) -> Result<Vec<ImageTensor>> {
        paths.iter().map(|p| self.read(p)).collect()
    }

    pub fn accessed(&self) -> Vec<PathBuf> {
        self.log.lock().unwrap().clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::save_image;

    fn write(dir: &Path, name: &str) -> PathBuf {
        let p = dir.join(name);
        save_image(&ImageTensor::filled(4, 4, 3, 0.5).unwrap(), &p).unwrap();
        p
    }

    fn fixture(dir: &Path) -> PathBuf {
        for n in ["a.png", "a_gt.png", "b.png", "b_gt.png", "c.png"] {
            write(dir, n);
        }
        let json = r#"{
            "splits": {"train": ["a.png"], "test": ["b.png"], "clean": ["c.png"]},
            "pairs": {"a.png": "a_gt.png", "b.png": "b_gt.png"}
        }"#;
        let p = dir.join("m.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn load_resolves_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::load(fixture(dir.path())).unwrap();
        m.validate("test").unwrap();
        let pairs = m.paired("train").unwrap();
        assert_eq!(pairs[0].1, dir.path().join("a_gt.png"));
        assert!(m.paired("clean").is_err());
        assert!(m.split("nope").is_err());
    }

    #[test]
    fn overlap_and_missing_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = DatasetManifest::load(fixture(dir.path())).unwrap();
        m.splits.get_mut("train").unwrap().push(dir.path().join("b.png"));
        assert!(m.validate("test").is_err());
        let mut m = DatasetManifest::load(fixture(dir.path())).unwrap();
        m.splits.get_mut("clean").unwrap().push(dir.path().join("zzz.png"));
        assert!(m.validate("test").is_err());
    }

    #[test]
    fn audited_reader_blocks_test_split() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::load(fixture(dir.path())).unwrap();
        let r = AuditedReader::excluding_test(&m, "test");
        r.read(&dir.path().join("a.png")).unwrap();
        assert!(r.read(&dir.path().join("b_gt.png")).is_err());
        assert_eq!(r.accessed(), vec![dir.path().join("a.png")]);
    }
}
