use std::sync::Arc;

use candle_core::{DType, Device};
use hep_core::lum::mean_reconstruction_error;
use hep_core::synth::low_light_pairs;
use hep_core::train::lum_loop::epoch_means;
use hep_core::train::{load_lum, load_ndm, LumTrainer, NdmTrainer, TrainConfig};
use hep_core::{Error, FeatureExtractor, ImageTensor, LumArchitecture, NdmArchitecture, Vgg19};

fn backbone() -> Arc<dyn FeatureExtractor> {
    Arc::new(Vgg19::random(3, DType::F32, &Device::Cpu).unwrap())
}

fn small_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig {
        seed,
        ..Default::default()
    };
    c.lum.arch = LumArchitecture { width: 8 };
    c.lum.batch = 2;
    c.lum.patch = 32;
    c.ndm.arch = NdmArchitecture {
        base: 8,
        res_blocks: 1,
        noise_dim: 4,
        disc_base: 8,
    };
    c.ndm.batch = 2;
    c.ndm.patch = 32;
    c
}

fn lows(n: usize, seed: u64) -> Vec<ImageTensor> {
    low_light_pairs(n, 40, 48, seed).unwrap().into_iter().map(|p| p.0).collect()
}

fn clean(n: usize, seed: u64) -> Vec<ImageTensor> {
    low_light_pairs(n, 40, 48, seed).unwrap().into_iter().map(|p| p.1).collect()
}

#[test]
fn lum_one_epoch_writes_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1);
    let images = lows(8, 1);
    let mut t = LumTrainer::new(cfg, images.clone(), backbone()).unwrap();
    let recs = t.run(dir.path(), 1).unwrap();
    assert_eq!(recs.len(), 4);
    assert!(recs.iter().all(|r| r.total.is_finite() && r.lr == 1e-4));
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let net = load_lum(dir.path(), DType::F32, &Device::Cpu).unwrap();
    let a = net.decompose(&images[0]).unwrap();
    let b = t.network().decompose(&images[0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn lum_loss_traces_are_bitwise_reproducible() {
    let run = || {
        let mut t = LumTrainer::new(small_config(5), lows(4, 2), backbone()).unwrap();
        (0..6).map(|_| t.step().unwrap().total.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn lum_resume_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(8);
    let mut full = LumTrainer::new(cfg.clone(), lows(4, 3), backbone()).unwrap();
    let reference: Vec<u64> = (0..6).map(|_| full.step().unwrap().total.to_bits()).collect();

    let mut first = LumTrainer::new(cfg.clone(), lows(4, 3), backbone()).unwrap();
    let mut got: Vec<u64> = (0..3).map(|_| first.step().unwrap().total.to_bits()).collect();
    first.save(dir.path()).unwrap();
    drop(first);
    let mut second = LumTrainer::resume(dir.path(), cfg, lows(4, 3), backbone()).unwrap();
    got.extend((0..3).map(|_| second.step().unwrap().total.to_bits()));
    assert_eq!(got, reference);
    assert_eq!(
        second.network().params().checksum().unwrap(),
        full.network().params().checksum().unwrap()
    );
}

#[test]
fn lum_resume_rejects_other_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(1);
    let t = LumTrainer::new(cfg.clone(), lows(2, 1), backbone()).unwrap();
    t.save(dir.path()).unwrap();
    let mut other = cfg;
    other.lum.arch.width = 12;
    let err = LumTrainer::resume(dir.path(), other, lows(2, 1), backbone()).unwrap_err();
    assert!(matches!(err, Error::ArchitectureMismatch { .. }));
}

#[test]
fn lum_training_reduces_loss() {
    let mut cfg = small_config(11);
    cfg.lum.arch.width = 16;
    cfg.lum.lr = 1e-3;
    cfg.lum.lr_milestones = vec![];
    let images = lows(4, 4);
    let mut t = LumTrainer::new(cfg, images.clone(), backbone()).unwrap();
    let before = mean_reconstruction_error(t.network(), &images).unwrap();
    let mut recs = Vec::new();
    for _ in 0..20 {
        recs.extend(t.train_epoch().unwrap());
    }
    let means = epoch_means(&recs);
    assert_eq!(means.len(), 20);
    assert!(means[19].1 < means[0].1, "{means:?}");
    let after = mean_reconstruction_error(t.network(), &images).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn lum_rejects_images_smaller_than_patch() {
    let cfg = small_config(1);
    let tiny = vec![ImageTensor::filled(16, 16, 3, 0.2).unwrap()];
    assert!(matches!(LumTrainer::new(cfg, tiny, backbone()), Err(Error::TooSmall(_))));
}

#[test]
fn ndm_steps_are_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(2);
    let mk = || NdmTrainer::new(cfg.clone(), lows(3, 5), clean(3, 6), backbone()).unwrap();
    let mut a = mk();
    let ra: Vec<_> = (0..4).map(|_| a.step().unwrap()).collect();
    let mut b = mk();
    let rb: Vec<_> = (0..2).map(|_| b.step().unwrap()).collect();
    b.save(dir.path()).unwrap();
    let mut c = NdmTrainer::resume(dir.path(), cfg.clone(), lows(3, 5), clean(3, 6), backbone()).unwrap();
    let rc: Vec<_> = (0..2).map(|_| c.step().unwrap()).collect();
    let bits = |v: &[hep_core::train::NdmStepRecord]| v.iter().map(|r| (r.total.to_bits(), r.discriminator.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&ra[..2]), bits(&rb));
    assert_eq!(bits(&ra[2..]), bits(&rc));
    assert!(ra.iter().all(|r| r.discriminator.is_finite() && r.kl >= 0.0));

    let nets = load_ndm(dir.path(), DType::F32, &Device::Cpu).unwrap();
    let img = lows(1, 9).remove(0);
    let out = nets.denoise(&img).unwrap();
    assert_eq!(out.dims(), img.dims());
}

#[test]
fn ndm_run_writes_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(4);
    cfg.ndm.checkpoint_every = 2;
    let mut t = NdmTrainer::new(cfg, lows(2, 1), clean(2, 2), backbone()).unwrap();
    let recs = t.run(dir.path(), 3).unwrap();
    assert_eq!(recs.len(), 3);
    let side = hep_core::train::Sidecar::read(dir.path()).unwrap();
    assert_eq!(side.step, 3);
    assert_eq!(side.optimizer_steps, vec![3, 3]);
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}
