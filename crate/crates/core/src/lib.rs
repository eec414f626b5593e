//! Unsupervised low-light enhancement: a histogram-equalization guided
//! Retinex decomposition network, a noise-disentanglement denoiser, and the
//! image-quality metrics used to evaluate them.

pub mod ablation;
pub mod backbone;
pub mod error;
pub mod image;
mod im2col;
pub mod lum;
pub mod metrics;
pub mod ndm;
pub mod nn;
pub mod plot;
pub mod synth;
pub mod tensor;
pub mod train;

pub use backbone::{FeatureExtractor, FeatureMap, Vgg19};
pub use error::{Error, Result};
pub use image::{BlurBank, GradientPair, HeMode, ImageTensor};
pub use lum::{DecompositionResult, LumArchitecture, LumLossWeights, LumNetwork};
pub use metrics::NiqeModel;
pub use ndm::{NdmArchitecture, NdmLossWeights, NdmNetworks, NoiseCode};
pub use train::{DatasetManifest, LumTrainer, NdmTrainer, TrainConfig};
