//! Object-centric video learning from temporal feature similarities.
//!
//! Frozen per-patch features are grouped into slots by recurrent slot
//! attention; a decoder predicts, for every patch, where similar content
//! goes in a later frame, plus a reconstruction of the features.

pub mod autodiff;
pub mod data;
pub mod decoder;
pub mod error;
pub mod features;
pub mod formats;
pub mod grouping;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod targets;
pub mod tensor;

pub use autodiff::{finite_diff_grad, grad_check, GradCheck, Graph, Var};
pub use data::{DataSpec, Video, VideoBatch};
pub use decoder::{DecoderConfig, DecoderKind, DecoderOutput};
pub use error::{Error, Result};
pub use features::{FeatureConfig, PatchFeatures};
pub use grouping::SlotState;
pub use metrics::{MaskVolume, MetricsReport};
pub use model::{LossReport, StepReport, TrainConfig, Trainer, VideoSaur};
pub use targets::{AffinityMatrix, TransitionTargets};
pub use tensor::{Gradients, ParamId, ParamStore, Parameter, Tensor};
