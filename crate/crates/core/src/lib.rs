//! Flip-aware direct preference optimization on a synthetic tabular world.
//!
//! The crate covers the data model and JSONL format, a synthetic world with
//! known rewards, permutation-invariant triple features, the logistic flip
//! model, the DPO loss family, tabular policies, instance-dependent noise
//! injection, the alternating trainer and evaluation metrics.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to
//! `f64` or `f32`.

pub mod corruptor;
pub mod dataset;
pub mod error;
pub mod features;
pub mod flip_model;
pub mod losses;
pub mod metrics;
pub mod policy;
pub mod scalar;
pub mod trainer;
pub mod world;

pub use corruptor::{corrupt, fit_generator, CorruptionConfig, FeatureSubset, FlipMode, Generator};
pub use dataset::{read_jsonl, write_jsonl, CorruptionRecord, Dataset, PreferenceTriple, Provenance};
pub use error::{Error, Result};
pub use features::{FeatureScaler, FeatureVector};
pub use flip_model::{ConvergenceTrace, FlipModel};
pub use losses::{LossKind, PairEval};
pub use metrics::EvalRecord;
pub use policy::TabularPolicy;
pub use scalar::Scalar;
pub use trainer::{TrainReport, TrainSchedule, Trainer};
pub use world::{make_world, sample_clean, World, WorldConfig};

pub type Policy = TabularPolicy<f64>;
pub type PolicyF32 = TabularPolicy<f32>;
pub type Flip = FlipModel<f64>;
pub type FlipF32 = FlipModel<f32>;
pub type Features = FeatureVector<f64>;
pub type FeaturesF32 = FeatureVector<f32>;
pub type Pair = PairEval<f64>;
pub type PairF32 = PairEval<f32>;
pub type Report = TrainReport<f64>;
pub type ReportF32 = TrainReport<f32>;
