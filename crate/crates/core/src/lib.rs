pub mod anchor;
pub mod annotate;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod keyframe;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod propagator;
pub mod scalar;
pub mod synth;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations, used by the CLI.
pub type AudioFeatureSequence = types::AudioFeatures<f64>;
pub type KeyframeModel = keyframe::KeyframeNet<f64>;
pub type Propagator = propagator::PropagatorNet<f64>;
pub type ModelCheckpoint = checkpoint::Checkpoint<f64>;

pub type AudioFeatureSequenceF32 = types::AudioFeatures<f32>;
pub type KeyframeModelF32 = keyframe::KeyframeNet<f32>;
pub type PropagatorF32 = propagator::PropagatorNet<f32>;
pub type ModelCheckpointF32 = checkpoint::Checkpoint<f32>;
