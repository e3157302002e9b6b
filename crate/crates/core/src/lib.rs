//! Face demorphing with a dual-conditioned GAN, plus the biometric protocol
//! used to score reconstructions.
//!
//! Image, metric and loss code is generic over [`Scalar`]; the networks run
//! in `f32`. The aliases below fix the usual choices.

pub mod biometric;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type FaceImageF32 = data::FaceImage<f32>;
pub type FaceImageF64 = data::FaceImage<f64>;
pub type CorpusF32 = data::Corpus<f32>;
pub type EmbeddingF32 = biometric::Embedding<f32>;
pub type EmbeddingF64 = biometric::Embedding<f64>;
