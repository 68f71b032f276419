//! Real-time listener facial behavior pipeline.
//!
//! Speaker audio and FLAME facial motion stream through timestamp-aligned fusion
//! queues into a quantized autoregressive predictor; the predicted listener motion is
//! retargeted to ARKit blendshapes and paced out to clients as JSON frames, with
//! per-stage latency metrics collected throughout.
//!
//! The numeric cores ([`mapper`], [`generator`], [`audio::MfccExtractor`]) are generic
//! over [`Real`]; the aliases below fix the precisions the pipeline uses.

pub mod audio;
pub mod clock;
pub mod config;
pub mod envelope;
pub mod error;
pub mod features;
pub mod frames;
pub mod fusion;
pub mod generator;
pub mod linalg;
pub mod mapper;
pub mod metrics;
pub mod pipeline;
pub mod scalar;
pub mod server;
pub mod transport;
mod wire;

pub use clock::{now_us, Pacing};
pub use config::PipelineConfig;
pub use envelope::{PayloadKind, TimedEnvelope};
pub use error::{Error, Result};
pub use frames::{ArkitFrame, FlameFrame, MelFrame, ARKIT_COUNT, ARKIT_NAMES};
pub use scalar::Real;

/// Rotations are converted in double precision.
pub type Quat = mapper::Quaternion<f64>;
/// Retargeting matrix as stored in `gl.bin`.
pub type GlMatrix32 = mapper::GlMatrix<f32>;
pub type GlMatrix64 = mapper::GlMatrix<f64>;
/// Codebook as carried by the predictor weights.
pub type Codebook32 = generator::Codebook<f32>;
pub type Codebook64 = generator::Codebook<f64>;
pub type MfccExtractor64 = audio::MfccExtractor<f64>;
