//! Small attention-augmented CNN classifiers for leaf-disease images:
//! tensors with reverse-mode gradients, SE and CBAM blocks, a model zoo with
//! soft-voting ensembles, Adam training with FGSM, Grad-CAM, and metrics.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod fsutil;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod numfmt;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autodiff::{GradientMap, Graph, NodeId};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use data::{Dataset, Sample, Split, SplitAssignment, SynthSpec};
pub use error::{Error, Result};
pub use explain::{ClassChoice, Heatmap};
pub use metrics::{ConfusionMatrix, Report, RocCurve};
pub use model::{AttentionKind, Backbone, FreezePolicy, ModelParams, ModelSpec};
pub use tensor::{Element, Tensor};
pub use train::{Adversarial, AdamConfig, AdamState, TrainConfig, TrainHistory};
