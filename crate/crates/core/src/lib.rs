//! Robust probabilistic representation learning: Gaussian encoders trained
//! to keep their posterior stable under bounded input perturbations, the
//! attacks used to probe them, and an audit of the resulting loss bound.

pub mod adversary;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod training;

pub use adversary::AttackConfig;
pub use data::{AugmentationPolicy, Dataset};
pub use error::{Result, UrkleError};
pub use eval::{evaluate, mc_predict, train_probe, AuditOptions, MetricsRecord, ProbeConfig};
pub use gaussian::{kl_divergence, pinsker_tv_bound, GaussianBatch, GaussianRepr, LOGVAR_MAX, LOGVAR_MIN};
pub use models::{
    init_bundle, load_bundle, save_bundle, Classifier, ClassifierSpec, Decoder, DecoderSpec, Encoder, EncoderSpec,
    Likelihood, ModelBundle, ModelSpec, ProjectorSpec,
};
pub use objectives::{LossBreakdown, ObjectiveConfig};
pub use tensor::{Scalar, Tensor};
pub use training::{train, EpochRecord, Method, Recorder, TrainConfig, TrainingSink};
