//! Morph encoders and the repeated-row context matrix fed to the generator.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::biometric::{Comparator, ExternalComparator, ToyComparator};
use crate::data::image::FaceImage;
use crate::error::{validation, Error, Result};
use crate::model::config::{GeneratorConfig, Mode};

pub trait ImageEncoder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn encode(&self, image: &FaceImage<f32>) -> Result<Vec<f32>>;
}

/// Frozen random projection of a luma thumbnail, the self-contained default.
pub struct ToyEncoder(ToyComparator<f32>);

impl ToyEncoder {
    pub const NAME: &'static str = "toy-morph-encoder";

    pub fn new(dim: usize) -> Result<Self> {
        Ok(Self(ToyComparator::new(Self::NAME, dim)?))
    }
}

impl ImageEncoder for ToyEncoder {
    fn name(&self) -> &str {
        Self::NAME
    }
    fn dim(&self) -> usize {
        self.0.descriptor().dim
    }
    fn encode(&self, image: &FaceImage<f32>) -> Result<Vec<f32>> {
        Ok(self.0.embed(image)?.vector)
    }
}

/// Vectors produced offline by a pretrained image encoder, keyed by image id.
pub struct PrecomputedEncoder(ExternalComparator<f32>);

impl PrecomputedEncoder {
    pub fn from_csv(name: &str, dim: usize, path: &Path) -> Result<Self> {
        Ok(Self(ExternalComparator::from_csv(name, dim, path)?))
    }
}

impl ImageEncoder for PrecomputedEncoder {
    fn name(&self) -> &str {
        self.0.name()
    }
    fn dim(&self) -> usize {
        self.0.descriptor().dim
    }
    fn encode(&self, image: &FaceImage<f32>) -> Result<Vec<f32>> {
        Ok(self.0.embed(image)?.vector)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Toy,
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<String>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self { kind: EncoderKind::Toy, name: None, embeddings: None }
    }
}

impl EncoderSpec {
    pub fn build(&self, dim: usize, base: &Path) -> Result<Box<dyn ImageEncoder>> {
        match self.kind {
            EncoderKind::Toy => Ok(Box::new(ToyEncoder::new(dim)?)),
            EncoderKind::Precomputed => {
                let path = self
                    .embeddings
                    .as_ref()
                    .ok_or_else(|| Error::Config("precomputed encoder needs an embeddings file".into()))?;
                let name = self.name.as_deref().unwrap_or("clip");
                Ok(Box::new(PrecomputedEncoder::from_csv(name, dim, &base.join(path))?))
            }
        }
    }
}

/// `rows x dim` context matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphEmbedding {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl MorphEmbedding {
    /// Stacks `rows` copies of `vector`.
    pub fn repeated(vector: &[f32], rows: usize) -> Result<Self> {
        if rows == 0 || vector.is_empty() {
            return Err(validation("context needs at least one row and one column"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(validation("encoder produced a non-finite value"));
        }
        let mut data = Vec::with_capacity(rows * vector.len());
        for _ in 0..rows {
            data.extend_from_slice(vector);
        }
        Ok(Self { rows, dim: vector.len(), data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// `(B, rows, dim)` tensor from a batch of contexts of one shape.
    pub fn batch_tensor(batch: &[&MorphEmbedding]) -> Result<Tensor> {
        let first = batch.first().ok_or_else(|| validation("empty context batch"))?;
        let mut data = Vec::with_capacity(batch.len() * first.data.len());
        for e in batch {
            if e.rows != first.rows || e.dim != first.dim {
                return Err(validation("context shapes differ within a batch"));
            }
            data.extend_from_slice(&e.data);
        }
        Ok(Tensor::from_vec(data, (batch.len(), first.rows, first.dim), &Device::Cpu)?)
    }
}

fn encode_checked(image: &FaceImage<f32>, encoder: &dyn ImageEncoder, cfg: &GeneratorConfig) -> Result<Vec<f32>> {
    if encoder.dim() != cfg.context_dim {
        return Err(Error::Config(format!(
            "encoder {} yields {} dims, generator expects {}",
            encoder.name(),
            encoder.dim(),
            cfg.context_dim
        )));
    }
    let v = encoder.encode(image)?;
    if v.len() != cfg.context_dim {
        return Err(Error::Config(format!("encoder returned {} values, expected {}", v.len(), cfg.context_dim)));
    }
    Ok(v)
}

/// Reference-free context: the morph vector repeated `context_len` times.
pub fn encode_morph(image: &FaceImage<f32>, encoder: &dyn ImageEncoder, cfg: &GeneratorConfig) -> Result<MorphEmbedding> {
    let v = encode_checked(image, encoder, cfg)?;
    MorphEmbedding::repeated(&v, cfg.context_len)
}

/// Differential context: `[E(morph), E(reference)]` repeated `context_len` times.
pub fn encode_pair(
    morph: &FaceImage<f32>,
    reference: &FaceImage<f32>,
    encoder: &dyn ImageEncoder,
    cfg: &GeneratorConfig,
) -> Result<MorphEmbedding> {
    let mut v = encode_checked(morph, encoder, cfg)?;
    v.extend(encode_checked(reference, encoder, cfg)?);
    MorphEmbedding::repeated(&v, cfg.context_len)
}

/// Context for either mode; `reference` must be present exactly in differential mode.
pub fn encode_for_mode(
    morph: &FaceImage<f32>,
    reference: Option<&FaceImage<f32>>,
    encoder: &dyn ImageEncoder,
    cfg: &GeneratorConfig,
) -> Result<MorphEmbedding> {
    match (cfg.mode, reference) {
        (Mode::ReferenceFree, None) => encode_morph(morph, encoder, cfg),
        (Mode::Differential, Some(r)) => encode_pair(morph, r, encoder, cfg),
        (m, r) => Err(validation(format!(
            "{} mode {} a reference image",
            m.as_str(),
            if r.is_some() { "does not take" } else { "requires" }
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::render_identity;

    #[test]
    fn rows_are_identical_and_single_row_is_raw() {
        let cfg = GeneratorConfig::toy(Mode::ReferenceFree);
        let enc = ToyEncoder::new(cfg.context_dim).unwrap();
        let img = render_identity(0, 64, 0);
        let ctx = encode_morph(&img, &enc, &cfg).unwrap();
        assert_eq!(ctx.rows(), cfg.context_len);
        for r in 1..ctx.rows() {
            assert_eq!(ctx.row(r), ctx.row(0));
        }
        let mut one = cfg.clone();
        one.context_len = 1;
        let raw = enc.encode(&img).unwrap();
        assert_eq!(encode_morph(&img, &enc, &one).unwrap().data(), &raw[..]);
    }

    #[test]
    fn distinct_images_give_distinct_contexts() {
        let cfg = GeneratorConfig::toy(Mode::ReferenceFree);
        let enc = ToyEncoder::new(cfg.context_dim).unwrap();
        for i in 0..10 {
            let a = encode_morph(&render_identity(i, 64, 1), &enc, &cfg).unwrap();
            let b = encode_morph(&render_identity(i + 10, 64, 1), &enc, &cfg).unwrap();
            let linf = a.row(0).iter().zip(b.row(0)).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(linf > 0.0);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let cfg = GeneratorConfig::toy(Mode::ReferenceFree);
        let enc = ToyEncoder::new(32).unwrap();
        assert!(matches!(encode_morph(&render_identity(0, 64, 0), &enc, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn differential_context_concatenates() {
        let cfg = GeneratorConfig::toy(Mode::Differential);
        let enc = ToyEncoder::new(cfg.context_dim).unwrap();
        let (m, r) = (render_identity(0, 64, 0), render_identity(1, 64, 0));
        let ctx = encode_for_mode(&m, Some(&r), &enc, &cfg).unwrap();
        assert_eq!(ctx.dim(), 2 * cfg.context_dim);
        assert_eq!(&ctx.row(0)[..64], &enc.encode(&m).unwrap()[..]);
        assert!(encode_for_mode(&m, None, &enc, &cfg).is_err());
        let rf = GeneratorConfig::toy(Mode::ReferenceFree);
        assert!(encode_for_mode(&m, Some(&r), &enc, &rf).is_err());
    }
}
