use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use candle_core::{DType, Device};
use hep_core::ablation::{run_study, write_table, AblationSetup, Study};
use hep_core::backbone::{hep_validate, report_json, HepValidateOptions};
use hep_core::image::{load_image, save_image, ImageTensor};
use hep_core::metrics::{fit_niqe_model, niqe, psnr, ssim};
use hep_core::plot::{write_cosine_histogram, EQUALIZED_COLOR, RAW_COLOR};
use hep_core::train::{load_lum, load_ndm, train_lum, train_ndm, AuditedReader, DatasetManifest};
use hep_core::{Error, FeatureExtractor, NiqeModel, Vgg19};

use crate::config::FileConfig;
use crate::{Cli, Command};

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if cli.backbone.is_some() {
        cfg.backbone = cli.backbone.clone();
    }
    let env = Env {
        cfg,
        random_backbone: cli.random_backbone,
    };
    match cli.command {
        Command::Enhance {
            input,
            lum,
            ndm,
            out,
            skip_ndm,
        } => enhance(&input, &lum, if skip_ndm { None } else { ndm.as_deref() }, &out),
        Command::Eval {
            pred,
            gt,
            no_reference,
            niqe_model,
            out,
        } => {
            let model = env.niqe_model(niqe_model)?;
            eval(&pred, if no_reference { None } else { gt.as_deref() }, &model, &out)
        }
        Command::HepValidate {
            pairs,
            split,
            layer,
            out,
        } => env.hep_validate(&pairs, split.as_deref(), &layer, &out),
        Command::Ablate {
            study,
            manifest,
            lum_steps,
            ndm_steps,
            test_limit,
            niqe_model,
            out,
        } => {
            let study: Study = study.parse()?;
            let mut env = env;
            let b = &mut env.cfg.ablation;
            b.lum_steps = lum_steps.unwrap_or(b.lum_steps);
            b.ndm_steps = ndm_steps.unwrap_or(b.ndm_steps);
            b.test_limit = test_limit.or(b.test_limit);
            let model = env.niqe_model(niqe_model)?;
            env.ablate(study, manifest, model, &out)
        }
        Command::TrainLum {
            manifest,
            out,
            epochs,
            resume,
        } => {
            let mut env = env;
            if let Some(e) = epochs {
                env.cfg.train.lum.epochs = e;
            }
            let manifest = env.manifest(manifest)?;
            let outcome = train_lum(&env.cfg.train, &manifest, env.backbone()?, &out, resume)?;
            println!("LUM checkpoint: {}", outcome.checkpoint.display());
            Ok(())
        }
        Command::TrainNdm {
            manifest,
            lum,
            out,
            iterations,
            resume,
        } => {
            let mut env = env;
            if let Some(i) = iterations {
                env.cfg.train.ndm.iterations = i;
            }
            let manifest = env.manifest(manifest)?;
            let outcome = train_ndm(&env.cfg.train, &manifest, &lum, env.backbone()?, &out, resume)?;
            println!("NDM checkpoint: {}", outcome.checkpoint.display());
            Ok(())
        }
        Command::FitNiqe {
            corpus,
            out,
            patch_size,
        } => {
            let images = list_images(&corpus)?
                .iter()
                .map(|p| load_image(p).map(|i| i.to_rgb()))
                .collect::<hep_core::Result<Vec<_>>>()?;
            let model = fit_niqe_model(&images, patch_size)?;
            model.save(&out)?;
            println!("NIQE model from {} images: {}", images.len(), out.display());
            Ok(())
        }
    }
}

struct Env {
    cfg: FileConfig,
    random_backbone: Option<u64>,
}

impl Env {
    fn vgg(&self) -> Result<Vgg19> {
        if let Some(seed) = self.random_backbone {
            log::warn!("using a randomly initialized backbone (seed {seed})");
            return Ok(Vgg19::random(seed, DType::F32, &Device::Cpu)?);
        }
        Vgg19::from_config(self.cfg.backbone.as_deref(), DType::F32, &Device::Cpu)
            .context("loading VGG-19 weights (set --backbone, `backbone` in the config, or $HEP_WEIGHTS_DIR)")
    }

    fn backbone(&self) -> Result<Arc<dyn FeatureExtractor>> {
        Ok(Arc::new(self.vgg()?))
    }

    fn manifest(&self, flag: Option<PathBuf>) -> Result<DatasetManifest> {
        let p = flag
            .or_else(|| self.cfg.manifest.clone())
            .context("no dataset manifest (use --manifest or `manifest` in the config)")?;
        Ok(DatasetManifest::load(&p)?)
    }

    fn niqe_model(&self, flag: Option<PathBuf>) -> Result<NiqeModel> {
        match flag.or_else(|| self.cfg.niqe_model.clone()) {
            Some(p) => Ok(NiqeModel::load(&p)?),
            None => Ok(NiqeModel::shipped()),
        }
    }

    fn hep_validate(&self, manifest: &Path, split: Option<&str>, layer: &str, out: &Path) -> Result<()> {
        let m = DatasetManifest::load(manifest)?;
        let pairs: Vec<(PathBuf, PathBuf)> = match split {
            Some(s) => m.paired(s)?,
            None => m.pairs.iter().map(|(a, b)| (a.clone(), b.clone())).collect(),
        };
        if pairs.is_empty() {
            bail!("{} has no ground-truth pairs", manifest.display());
        }
        let images = pairs
            .iter()
            .map(|(l, g)| Ok((load_image(l)?.to_rgb(), load_image(g)?.to_rgb())))
            .collect::<hep_core::Result<Vec<_>>>()?;
        let (he, raw) = hep_validate(&images, &self.vgg()?, layer, HepValidateOptions::default())?;
        write_file(out, &serde_json::to_vec_pretty(&report_json(&he, &raw, layer))?)?;
        let png = out.with_extension("png");
        write_cosine_histogram(
            &png,
            &[(&raw.per_image_cosine, RAW_COLOR), (&he.per_image_cosine, EQUALIZED_COLOR)],
            40,
        )?;
        println!(
            "{} pairs at {layer}: equalized mean {:.4} (above 0.8: {:.1}%), raw mean {:.4}",
            images.len(),
            he.mean(),
            100.0 * he.fraction_above(0.8),
            raw.mean()
        );
        println!("report: {}  histogram: {}", out.display(), png.display());
        Ok(())
    }

    fn ablate(&self, study: Study, manifest: Option<PathBuf>, niqe_model: NiqeModel, out: &Path) -> Result<()> {
        let m = self.manifest(manifest)?;
        let c = &self.cfg.train;
        m.validate(&c.splits.test)?;
        let reader = AuditedReader::excluding_test(&m, &c.splits.test);
        let rgb = |v: Vec<ImageTensor>| v.into_iter().map(|i| i.to_rgb()).collect::<Vec<_>>();
        let train_low = rgb(reader.read_all(m.split(&c.splits.train)?)?);
        let clean = if matches!(study, Study::NdmLoss | Study::Denoiser) {
            rgb(reader.read_all(m.split(&c.splits.clean)?)?)
        } else {
            Vec::new()
        };
        let mut test = m.paired(&c.splits.test)?;
        if let Some(n) = self.cfg.ablation.test_limit {
            test.truncate(n);
        }
        let test_pairs = test
            .iter()
            .map(|(l, g)| Ok((load_image(l)?.to_rgb(), load_image(g)?.to_rgb())))
            .collect::<hep_core::Result<Vec<_>>>()?;
        let setup = AblationSetup {
            config: c.clone(),
            lum_steps: self.cfg.ablation.lum_steps,
            ndm_steps: self.cfg.ablation.ndm_steps,
            train_low,
            clean,
            test_pairs,
            backbone: self.backbone()?,
            niqe_model,
        };
        let rows = run_study(study, &setup)?;
        write_table(out, study, &rows)?;
        for r in &rows {
            println!("{:<14} {:>8.3} {:>7.4} {:>7.3}", r.variant, r.psnr, r.ssim, r.niqe);
        }
        println!("table: {}", out.display());
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Image files of a directory in name order, or the single file given.
pub fn list_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        bail!("{} does not exist", input.display());
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn enhance(input: &Path, lum: &Path, ndm: Option<&Path>, out: &Path) -> Result<()> {
    let lum = load_lum(lum, DType::F32, &Device::Cpu).with_context(|| format!("loading LUM from {}", lum.display()))?;
    let ndm = ndm
        .map(|p| load_ndm(p, DType::F32, &Device::Cpu).with_context(|| format!("loading NDM from {}", p.display())))
        .transpose()?;
    let files = list_images(input)?;
    if files.is_empty() {
        bail!("no images in {}", input.display());
    }
    std::fs::create_dir_all(out)?;
    for f in &files {
        let t0 = Instant::now();
        let img = load_image(f)?.to_rgb();
        let r = lum.decompose(&img)?.reflectance;
        let enhanced = match &ndm {
            Some(n) => n.denoise(&r)?,
            None => r,
        };
        let target = out.join(format!("{}.png", stem(f)));
        save_image(&enhanced, &target)?;
        println!("{}: {:.1} ms", f.display(), t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

fn niqe_or_nan(img: &ImageTensor, model: &NiqeModel, name: &Path) -> Result<f64> {
    match niqe(img, model) {
        Ok(v) => Ok(v),
        Err(Error::TooSmall(msg)) => {
            log::warn!("{}: NIQE undefined ({msg})", name.display());
            Ok(f64::NAN)
        }
        Err(e) => Err(e.into()),
    }
}

fn finite_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn eval(pred: &Path, gt: Option<&Path>, model: &NiqeModel, out: &Path) -> Result<()> {
    let preds = list_images(pred)?;
    if preds.is_empty() {
        bail!("no images in {}", pred.display());
    }
    let mut rows: Vec<(String, Option<(f64, f64)>, f64)> = Vec::with_capacity(preds.len());
    match gt {
        Some(gt_dir) => {
            let gts: BTreeMap<String, PathBuf> = list_images(gt_dir)?.into_iter().map(|p| (stem(&p), p)).collect();
            let pred_stems: Vec<String> = preds.iter().map(|p| stem(p)).collect();
            let missing_gt: Vec<&String> = pred_stems.iter().filter(|s| !gts.contains_key(*s)).collect();
            let missing_pred: Vec<&String> = gts.keys().filter(|s| !pred_stems.contains(s)).collect();
            if !missing_gt.is_empty() || !missing_pred.is_empty() {
                bail!(
                    "filename mismatch between {} and {}\n  without ground truth: {:?}\n  without prediction: {:?}",
                    pred.display(),
                    gt_dir.display(),
                    missing_gt,
                    missing_pred
                );
            }
            for (p, s) in preds.iter().zip(pred_stems) {
                let a = load_image(p)?.to_rgb();
                let b = load_image(&gts[&s])?.to_rgb();
                let q = (psnr(&a, &b)?, ssim(&a, &b)?);
                rows.push((s, Some(q), niqe_or_nan(&a, model, p)?));
            }
        }
        None => {
            for p in &preds {
                let a = load_image(p)?.to_rgb();
                rows.push((stem(p), None, niqe_or_nan(&a, model, p)?));
            }
        }
    }

    let paired = gt.is_some();
    let mut w = csv::Writer::from_writer(Vec::new());
    if paired {
        w.write_record(["file", "psnr", "ssim", "niqe"])?;
    } else {
        w.write_record(["file", "niqe"])?;
    }
    let fmt = |v: f64| format!("{v:.4}");
    for (name, q, n) in &rows {
        match q {
            Some((p, s)) => w.write_record([name.clone(), fmt(*p), fmt(*s), fmt(*n)])?,
            None => w.write_record([name.clone(), fmt(*n)])?,
        }
    }
    let mean_niqe = finite_mean(rows.iter().map(|r| r.2));
    if paired {
        let mp = finite_mean(rows.iter().filter_map(|r| r.1.map(|q| q.0)));
        let ms = finite_mean(rows.iter().filter_map(|r| r.1.map(|q| q.1)));
        w.write_record(["mean".into(), fmt(mp), fmt(ms), fmt(mean_niqe)])?;
        println!("{} images: PSNR {mp:.3} dB  SSIM {ms:.4}  NIQE {mean_niqe:.3}", rows.len());
    } else {
        w.write_record(["mean".into(), fmt(mean_niqe)])?;
        println!("{} images: NIQE {mean_niqe:.3}", rows.len());
    }
    write_file(out, &w.into_inner()?)?;
    println!("per-image scores: {}", out.display());
    Ok(())
}
