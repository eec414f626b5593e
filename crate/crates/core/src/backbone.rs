//! Fixed ImageNet VGG-19 feature extractor and the histogram-equalization
//! prior validation experiment.
//!
//! Layers are named `conv{block}_{index}`. Weights load from a torchvision
//! `vgg19-*.pth` pickle or a safetensors file with the same key names
//! (`features.{i}.weight`). Parameters are plain tensors, never `Var`s, so
//! nothing in the toolkit can update them.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array3;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{hist_equalize_with, HeMode, ImageTensor};
use crate::nn::{checksum_tensors, stream_rng};
use crate::tensor::image_to_tensor;

/// ImageNet channel statistics used by the stock preprocessing.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(name, index in torchvision's features Sequential, in, out)`.
pub const VGG19_CONVS: [(&str, usize, usize, usize); 16] = [
    ("conv1_1", 0, 3, 64),
    ("conv1_2", 2, 64, 64),
    ("conv2_1", 5, 64, 128),
    ("conv2_2", 7, 128, 128),
    ("conv3_1", 10, 128, 256),
    ("conv3_2", 12, 256, 256),
    ("conv3_3", 14, 256, 256),
    ("conv3_4", 16, 256, 256),
    ("conv4_1", 19, 256, 512),
    ("conv4_2", 21, 512, 512),
    ("conv4_3", 23, 512, 512),
    ("conv4_4", 25, 512, 512),
    ("conv5_1", 28, 512, 512),
    ("conv5_2", 30, 512, 512),
    ("conv5_3", 32, 512, 512),
    ("conv5_4", 34, 512, 512),
];

/// Layer used by the prior loss and the validation experiment.
pub const HEP_LAYER: &str = "conv4_1";
/// Layer used by the perceptual loss of the denoiser.
pub const PERCEPTUAL_LAYER: &str = "conv3_2";

/// Whether a named layer is read before or after its ReLU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapPoint {
    PreRelu,
    #[default]
    PostRelu,
}

/// Anything that maps a normalized-later `[0, 1]` RGB batch to a named
/// intermediate activation.
pub trait FeatureExtractor: Send + Sync {
    /// `x` is `N x 3 x H x W` in `[0, 1]`; returns `N x Cf x Hf x Wf`.
    fn features(&self, x: &Tensor, layer: &str) -> Result<Tensor>;
    fn layer_names(&self) -> Vec<&'static str>;
    fn dtype(&self) -> DType;
}

/// Activation tapped from a backbone layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `[Hf, Wf, Cf]`.
    pub data: Array3<f32>,
    pub layer_name: String,
}

struct ConvLayer {
    name: &'static str,
    weight: Tensor,
    bias: Tensor,
}

pub struct Vgg19 {
    convs: Vec<ConvLayer>,
    tap: TapPoint,
    mean: Tensor,
    std: Tensor,
}

impl std::fmt::Debug for Vgg19 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Vgg19")
            .field("layers", &self.convs.len())
            .field("tap", &self.tap)
            .finish()
    }
}

fn stats_tensor(v: [f64; 3], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(v.to_vec(), (1, 3, 1, 1), device)?.to_dtype(dtype)?)
}

impl Vgg19 {
    fn from_layers(convs: Vec<ConvLayer>, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            convs,
            tap: TapPoint::PostRelu,
            mean: stats_tensor(IMAGENET_MEAN, dtype, device)?,
            std: stats_tensor(IMAGENET_STD, dtype, device)?,
        })
    }

    /// Loads pretrained convolution weights from `.pth` or `.safetensors`.
    pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingWeights(path.to_path_buf()));
        }
        let tensors: std::collections::HashMap<String, Tensor> =
            match path.extension().and_then(|e| e.to_str()) {
                Some("safetensors") => candle_core::safetensors::load(path, device)?,
                _ => candle_core::pickle::read_all(path)?.into_iter().collect(),
            };
        let find = |name: &str, idx: usize, kind: &str| -> Result<Tensor> {
            for key in [
                format!("features.{idx}.{kind}"),
                format!("{idx}.{kind}"),
                format!("{name}.{kind}"),
            ] {
                if let Some(t) = tensors.get(&key) {
                    return Ok(t.to_device(device)?.to_dtype(dtype)?);
                }
            }
            Err(Error::ModelFormat(format!(
                "{}: no {kind} for {name}",
                path.display()
            )))
        };
        let mut convs = Vec::with_capacity(VGG19_CONVS.len());
        for &(name, idx, cin, cout) in &VGG19_CONVS {
            let weight = find(name, idx, "weight")?;
            let bias = find(name, idx, "bias")?;
            if weight.dims() != [cout, cin, 3, 3] || bias.dims() != [cout] {
                return Err(Error::ModelFormat(format!(
                    "{name}: unexpected shape {:?}",
                    weight.dims()
                )));
            }
            convs.push(ConvLayer { name, weight, bias });
        }
        Self::from_layers(convs, dtype, device)
    }

    /// He-normal initialized backbone with zero biases, fully determined by
    /// `seed`. Used for tests and smoke runs where pretrained weights are not
    /// available.
    pub fn random(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = stream_rng(seed, &[0x7667_6731_39]);
        let mut convs = Vec::with_capacity(VGG19_CONVS.len());
        for &(name, _, cin, cout) in &VGG19_CONVS {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let n = cout * cin * 9;
            let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let weight = Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?;
            let bias = Tensor::zeros(cout, dtype, device)?;
            convs.push(ConvLayer { name, weight, bias });
        }
        Self::from_layers(convs, dtype, device)
    }

    /// Weights from the configured path when given; otherwise from the
    /// `HEP_WEIGHTS_DIR` cache directory.
    pub fn from_config(path: Option<&Path>, dtype: DType, device: &Device) -> Result<Self> {
        if let Some(p) = path {
            return Self::load(p, dtype, device);
        }
        let dir = std::env::var_os("HEP_WEIGHTS_DIR")
            .map(std::path::PathBuf::from)
            .ok_or_else(|| Error::MissingWeights("$HEP_WEIGHTS_DIR/vgg19.safetensors".into()))?;
        for name in ["vgg19.safetensors", "vgg19-dcbb9e9d.pth", "vgg19.pth"] {
            let p = dir.join(name);
            if p.is_file() {
                return Self::load(p, dtype, device);
            }
        }
        Err(Error::MissingWeights(dir.join("vgg19.safetensors")))
    }

    pub fn with_tap(mut self, tap: TapPoint) -> Self {
        self.tap = tap;
        self
    }

    pub fn tap(&self) -> TapPoint {
        self.tap
    }

    /// Copy in another precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let device = self.mean.device().clone();
        let convs = self
            .convs
            .iter()
            .map(|c| {
                Ok(ConvLayer {
                    name: c.name,
                    weight: c.weight.to_dtype(dtype)?,
                    bias: c.bias.to_dtype(dtype)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(convs, dtype, &device)?.with_tap(self.tap))
    }

    pub fn checksum(&self) -> Result<String> {
        checksum_tensors(
            self.convs
                .iter()
                .flat_map(|c| [(c.name, &c.weight), (c.name, &c.bias)]),
        )
    }

    fn layer_index(&self, layer: &str) -> Result<usize> {
        self.convs
            .iter()
            .position(|c| c.name == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))
    }

    /// Feature map of a single image.
    pub fn extract_features(&self, img: &ImageTensor, layer: &str) -> Result<FeatureMap> {
        let img = img.to_rgb();
        let x = image_to_tensor(&img, self.dtype(), self.mean.device())?;
        let f = self.features(&x, layer)?.squeeze(0)?;
        let (c, h, w) = f.dims3()?;
        let v = f
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let data = Array3::from_shape_vec((h, w, c), v).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(FeatureMap {
            data,
            layer_name: layer.to_string(),
        })
    }
}

impl FeatureExtractor for Vgg19 {
    fn features(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        let target = self.layer_index(layer)?;
        let mut h = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        for (i, conv) in self.convs.iter().enumerate() {
            // 2x2 max pools sit in front of conv2_1, conv3_1, conv4_1, conv5_1.
            if i > 0 && conv.name.ends_with("_1") {
                h = crate::nn::max_pool2x2(&h)?;
            }
            h = crate::nn::conv2d(&h, &conv.weight, 1, 1)?;
            h = h.broadcast_add(&conv.bias.reshape((1, conv.bias.dim(0)?, 1, 1))?)?;
            if i == target && self.tap == TapPoint::PreRelu {
                return Ok(h);
            }
            h = h.relu()?;
            if i == target {
                return Ok(h);
            }
        }
        unreachable!("layer index is within the registry")
    }

    fn layer_names(&self) -> Vec<&'static str> {
        self.convs.iter().map(|c| c.name).collect()
    }

    fn dtype(&self) -> DType {
        self.mean.dtype()
    }
}

/// How two feature maps are reduced before taking the cosine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CosineVariant {
    #[default]
    Flattened,
    ChannelMeans,
    Gram,
}

fn reduce(f: &FeatureMap, variant: CosineVariant) -> Vec<f64> {
    let (h, w, c) = f.data.dim();
    match variant {
        CosineVariant::Flattened => f.data.iter().map(|&v| v as f64).collect(),
        CosineVariant::ChannelMeans => (0..c)
            .map(|k| {
                f.data
                    .index_axis(ndarray::Axis(2), k)
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / (h * w) as f64
            })
            .collect(),
        CosineVariant::Gram => {
            let m = f
                .data
                .view()
                .into_shape_with_order((h * w, c))
                .expect("contiguous feature map")
                .mapv(|v| v as f64);
            m.t().dot(&m).iter().copied().collect()
        }
    }
}

/// Cosine of the flattened maps; 0 when either has zero norm.
pub fn cosine_similarity(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    cosine_similarity_with(a, b, CosineVariant::Flattened)
}

pub fn cosine_similarity_with(a: &FeatureMap, b: &FeatureMap, variant: CosineVariant) -> Result<f64> {
    if a.data.dim() != b.data.dim() {
        return Err(Error::Shape(format!(
            "feature maps {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    if a.layer_name != b.layer_name {
        return Err(Error::Shape(format!(
            "layers {} vs {}",
            a.layer_name, b.layer_name
        )));
    }
    let (va, vb) = (reduce(a, variant), reduce(b, variant));
    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
    let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-image cosine similarities of one experimental series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub label: String,
    pub per_image_cosine: Vec<f64>,
}

impl SimilarityReport {
    pub fn fraction_above(&self, threshold: f64) -> f64 {
        if self.per_image_cosine.is_empty() {
            return 0.0;
        }
        self.per_image_cosine.iter().filter(|&&c| c > threshold).count() as f64
            / self.per_image_cosine.len() as f64
    }

    pub fn mean(&self) -> f64 {
        if self.per_image_cosine.is_empty() {
            return 0.0;
        }
        self.per_image_cosine.iter().sum::<f64>() / self.per_image_cosine.len() as f64
    }

    pub fn summary(&self) -> serde_json::Value {
        let mut sorted = self.per_image_cosine.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.is_empty() {
            0.0
        } else {
            sorted[sorted.len() / 2]
        };
        serde_json::json!({
            "label": self.label,
            "count": self.per_image_cosine.len(),
            "mean": self.mean(),
            "median": median,
            "min": sorted.first().copied().unwrap_or(0.0),
            "max": sorted.last().copied().unwrap_or(0.0),
            "fraction_above_0.8": self.fraction_above(0.8),
        })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HepValidateOptions {
    pub variant: CosineVariant,
    pub he_mode: HeMode,
}

impl Default for HepValidateOptions {
    fn default() -> Self {
        Self {
            variant: CosineVariant::Flattened,
            he_mode: HeMode::PerChannel,
        }
    }
}

/// Compares `F(HE(low))` and `F(low)` against `F(gt)` at `layer`.
///
/// Returns `(equalized series, raw series)`.
pub fn hep_validate(
    pairs: &[(ImageTensor, ImageTensor)],
    backbone: &Vgg19,
    layer: &str,
    opts: HepValidateOptions,
) -> Result<(SimilarityReport, SimilarityReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut he_series = Vec::with_capacity(pairs.len());
    let mut raw_series = Vec::with_capacity(pairs.len());
    for (low, gt) in pairs {
        let f_gt = backbone.extract_features(gt, layer)?;
        let f_low = backbone.extract_features(low, layer)?;
        let f_he = backbone.extract_features(&hist_equalize_with(low, opts.he_mode)?, layer)?;
        he_series.push(cosine_similarity_with(&f_he, &f_gt, opts.variant)?);
        raw_series.push(cosine_similarity_with(&f_low, &f_gt, opts.variant)?);
    }
    Ok((
        SimilarityReport {
            label: "histogram-equalized vs ground truth".into(),
            per_image_cosine: he_series,
        },
        SimilarityReport {
            label: "low-light input vs ground truth".into(),
            per_image_cosine: raw_series,
        },
    ))
}

/// JSON document with both series and their summaries.
pub fn report_json(he: &SimilarityReport, raw: &SimilarityReport, layer: &str) -> serde_json::Value {
    serde_json::json!({
        "layer": layer,
        "equalized": { "summary": he.summary(), "per_image_cosine": he.per_image_cosine },
        "raw": { "summary": raw.summary(), "per_image_cosine": raw.per_image_cosine },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(v: Vec<f32>) -> FeatureMap {
        let n = v.len();
        FeatureMap {
            data: Array3::from_shape_vec((1, 1, n), v).unwrap(),
            layer_name: "conv4_1".into(),
        }
    }

    #[test]
    fn cosine_examples() {
        let x = fm(vec![1.0, -2.0, 0.5, 3.0]);
        let neg = fm(x.data.iter().map(|v| -v).collect());
        let dbl = fm(x.data.iter().map(|v| 2.0 * v).collect());
        assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-6);
        assert!((cosine_similarity(&x, &neg).unwrap() + 1.0).abs() < 1e-6);
        assert!((cosine_similarity(&x, &dbl).unwrap() - 1.0).abs() < 1e-6);
        let zero = fm(vec![0.0; 4]);
        assert_eq!(cosine_similarity(&x, &zero).unwrap(), 0.0);
        assert!(cosine_similarity(&x, &fm(vec![1.0; 3])).is_err());
    }

    #[test]
    fn cosine_variants_agree_on_identical_maps() {
        let f = FeatureMap {
            data: Array3::from_shape_fn((2, 3, 4), |(a, b, c)| (a + 2 * b + 3 * c) as f32),
            layer_name: "conv3_2".into(),
        };
        for v in [CosineVariant::Flattened, CosineVariant::ChannelMeans, CosineVariant::Gram] {
            assert!((cosine_similarity_with(&f, &f, v).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn report_statistics() {
        let r = SimilarityReport {
            label: "x".into(),
            per_image_cosine: vec![0.9, 0.85, 0.5, 0.81, 0.2],
        };
        assert!((r.fraction_above(0.8) - 0.6).abs() < 1e-12);
        assert!((r.mean() - 0.652).abs() < 1e-12);
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let vgg = Vgg19::random(0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(vgg.features(&x, "conv9_9"), Err(Error::UnknownLayer(_))));
        assert!(matches!(
            Vgg19::load("/nonexistent/vgg19.pth", DType::F32, &Device::Cpu),
            Err(Error::MissingWeights(_))
        ));
    }
}
