//! Corpus modeling, preprocessing, synthetic morphs and splitting.

pub mod image;
pub mod manifest;
pub mod morph;
pub mod split;
pub mod synthetic;
pub mod transforms;

pub use image::{preprocess, FaceImage, RawImage};
pub use morph::{synthesize_morph, GeneratorTag, IdentityPair, MorphRecord};
pub use split::{split_identity_disjoint, SplitManifest};
pub use synthetic::{synthesize_corpus, Corpus, SyntheticCorpusConfig};
pub use transforms::apply_reference_transforms;
