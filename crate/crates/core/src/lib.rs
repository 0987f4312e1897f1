//! Flow-magnitude-guided dynamic frame sampling (FMG-DFS) and taxonomy-driven
//! artifact auditing for generated video.
//!
//! The pipeline runs dense optical flow between consecutive frames, reduces
//! each flow field to an instability score, samples frames around the
//! strongest motion peaks, and asks a pluggable predictor one yes/no question
//! per artifact category. Answers are scored per perceptual axis.

pub mod audit;
pub mod error;
pub mod frameio;
pub mod optflow;
pub mod predictor;
pub mod qa_eval;
pub mod sampler;
pub mod synthgen;
pub mod taxonomy;

pub use error::{Error, Result};
pub use frameio::{FrameSequence, LumaImage};
pub use optflow::{FlowField, FlowParams};
pub use sampler::{InstabilityProfile, SampledIndices, SamplerParams};
pub use taxonomy::{Axis, Taxonomy};
