//! Generator, discriminator and morph encoders.

pub mod config;
pub mod conv;
pub mod discriminator;
pub mod encoder;
pub mod fused;
pub mod generator;
pub mod layers;

pub use config::{DiscriminatorConfig, DiscriminatorOutput, GeneratorConfig, Mode};
pub use discriminator::Discriminator;
pub use encoder::{encode_for_mode, encode_morph, encode_pair, ImageEncoder, MorphEmbedding, ToyEncoder};
pub use generator::{Demorphed, Generator};
