//! Semi-supervised semantic segmentation with structured pseudo labels.
//!
//! A segmentation network produces two predictions per image: dense decoder
//! logits and a class activation map refined by self-attention. The two are
//! fused into a calibrated soft pseudo label that supervises a strongly
//! augmented view of the same unlabeled image.

pub mod augment;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod fusion;
pub mod io;
pub mod metrics;
pub mod network;
pub mod sgc;
pub mod tensor;
pub mod training;

pub use augment::{AugmentConfig, AugmentedPair, GeometryRecord};
pub use config::{config_diff, DatasetConfig, DatasetSource, ExperimentConfig};
pub use data::{DatasetSplit, DenseImage, Fraction, InMemoryDataset, LabelMask, Sample, SegDataset, ShapesDataset, IGNORE};
pub use error::{Error, Result};
pub use evaluate::{evaluate, EvalReport};
pub use experiment::{deterministic_from_env, RunOptions, Study, DETERMINISTIC_ENV};
pub use fusion::{fuse, harden, FusionConfig, FusionPreset, FusionVariant, LabelMode, PseudoLabel};
pub use metrics::{ece, miou, CalibrationBins, ConfusionMatrix};
pub use network::{BackbonePreset, HypercolumnMode, ModelConfig, SegModel};
pub use tensor::Tensor;
pub use training::{poly_lr, LossReport, TrainConfig, TrainMode, Trainer};
