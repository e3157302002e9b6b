use serde::{Deserialize, Serialize};

use crate::data::image::FaceImage;
use crate::error::{validation, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorTag {
    Landmark,
    Deep,
    SyntheticBlend,
}

impl GeneratorTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            GeneratorTag::Landmark => "landmark",
            GeneratorTag::Deep => "deep",
            GeneratorTag::SyntheticBlend => "synthetic-blend",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "landmark" => Ok(GeneratorTag::Landmark),
            "deep" => Ok(GeneratorTag::Deep),
            "synthetic-blend" => Ok(GeneratorTag::SyntheticBlend),
            other => Err(validation(format!("unknown generator tag {other:?}"))),
        }
    }
}

/// Anything that names a morph and its two constituent identities.
pub trait IdentityPair {
    fn morph_id(&self) -> &str;
    fn id1(&self) -> &str;
    fn id2(&self) -> &str;
}

/// A morph together with references to the two bona fide images that made it.
/// `bf1` is the base image: the constituent the morph leans towards.
#[derive(Debug, Clone, PartialEq)]
pub struct MorphRecord<T> {
    pub morph_id: String,
    pub morph: FaceImage<T>,
    pub id1: String,
    pub id2: String,
    pub bf1_ref: String,
    pub bf2_ref: String,
    pub generator_tag: GeneratorTag,
}

impl<T> IdentityPair for MorphRecord<T> {
    fn morph_id(&self) -> &str {
        &self.morph_id
    }
    fn id1(&self) -> &str {
        &self.id1
    }
    fn id2(&self) -> &str {
        &self.id2
    }
}

pub fn morph_id_for(id1: &str, id2: &str) -> String {
    format!("{id1}__{id2}")
}

/// Pixelwise blend `alpha * bf1 + (1 - alpha) * bf2`.
pub fn synthesize_morph<T: Scalar>(
    bf1: &FaceImage<T>,
    bf2: &FaceImage<T>,
    alpha: T,
) -> Result<MorphRecord<T>> {
    if !bf1.same_shape(bf2) {
        return Err(validation(format!(
            "cannot blend {}x{} with {}x{}",
            bf1.size(),
            bf1.size(),
            bf2.size(),
            bf2.size()
        )));
    }
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(validation(format!("blend weight {alpha} outside [0, 1]")));
    }
    if bf1.identity_id == bf2.identity_id {
        return Err(validation(format!(
            "morph constituents share identity {}",
            bf1.identity_id
        )));
    }
    let beta = T::one() - alpha;
    let pixels = bf1.pixels().iter().zip(bf2.pixels()).map(|(&a, &b)| alpha * a + beta * b).collect();
    let morph_id = morph_id_for(&bf1.identity_id, &bf2.identity_id);
    let morph = FaceImage::from_clamped(bf1.size(), pixels, format!("morph:{morph_id}"), morph_id.clone())?;
    Ok(MorphRecord {
        morph_id,
        morph,
        id1: bf1.identity_id.clone(),
        id2: bf2.identity_id.clone(),
        bf1_ref: bf1.image_id.clone(),
        bf2_ref: bf2.image_id.clone(),
        generator_tag: GeneratorTag::SyntheticBlend,
    })
}
