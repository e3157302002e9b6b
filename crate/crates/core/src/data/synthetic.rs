//! Procedurally generated face-like identities, so every pipeline stage can
//! run without external image data.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::image::{FaceImage, CHANNELS};
use crate::data::morph::{synthesize_morph, MorphRecord};
use crate::error::{validation, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub n_identities: usize,
    pub n_morphs: usize,
    /// Weight of the base image (`bf1`) in every blend.
    pub alpha: f64,
    pub size: usize,
    pub seed: u64,
}

/// Bona fide images keyed by image id, plus the morphs built from them.
#[derive(Debug, Clone)]
pub struct Corpus<T> {
    pub bonafides: BTreeMap<String, FaceImage<T>>,
    pub morphs: Vec<MorphRecord<T>>,
}

impl<T: Scalar> Corpus<T> {
    pub fn identities(&self) -> BTreeSet<String> {
        self.bonafides.values().map(|b| b.identity_id.clone()).collect()
    }

    pub fn bonafide(&self, image_id: &str) -> Result<&FaceImage<T>> {
        self.bonafides
            .get(image_id)
            .ok_or_else(|| validation(format!("bona fide {image_id} not in corpus")))
    }

    pub fn morph(&self, morph_id: &str) -> Result<&MorphRecord<T>> {
        self.morphs
            .iter()
            .find(|m| m.morph_id == morph_id)
            .ok_or_else(|| validation(format!("morph {morph_id} not in corpus")))
    }

    /// Checks that every morph's bona fide references resolve.
    pub fn check_references(&self) -> Result<()> {
        for m in &self.morphs {
            self.bonafide(&m.bf1_ref)?;
            self.bonafide(&m.bf2_ref)?;
        }
        Ok(())
    }
}

pub fn identity_name(index: usize) -> String {
    format!("id{index:03}")
}

pub fn bonafide_image_id(identity: &str) -> String {
    format!("bf_{identity}")
}

fn smoothstep(edge: f64, d: f64, width: f64) -> f64 {
    // 1 inside (d < edge), 0 outside, linear ramp of `width`
    ((edge - d) / width + 0.5).clamp(0.0, 1.0)
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

/// Renders identity `index` of the corpus seeded by `corpus_seed`.
pub fn render_identity(index: usize, size: usize, corpus_seed: u64) -> FaceImage<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(corpus_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let bg = color(&mut rng, 0.05, 0.95);
    let skin = color(&mut rng, 0.25, 0.95);
    let hair = color(&mut rng, 0.0, 0.7);
    let feature = color(&mut rng, 0.0, 0.35);
    let (cx, cy) = (rng.random_range(0.44..0.56), rng.random_range(0.47..0.57));
    let (rx, ry) = (rng.random_range(0.24..0.38), rng.random_range(0.30..0.44));
    let hairline = rng.random_range(0.25..0.65);
    let eye_dy = rng.random_range(0.08..0.30);
    let eye_dx = rng.random_range(0.09..0.19);
    let eye_r = rng.random_range(0.025..0.06);
    let mouth_dy = rng.random_range(0.35..0.62);
    let mouth_w = rng.random_range(0.07..0.2);
    let mouth_h = rng.random_range(0.015..0.045);
    let tex_amp = rng.random_range(0.03..0.1);
    let tex_freq = rng.random_range(2.0..7.0);
    let tex_angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let tex_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = Normal::new(0.0, 0.02).expect("valid normal");

    let edge = 1.5 / size as f64;
    let mut pixels = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let mut px = bg;
            let d_face = (((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2)).sqrt();
            let in_face = smoothstep(1.0, d_face, edge / rx.min(ry));
            let wave = tex_amp
                * (tex_freq * std::f64::consts::TAU * (u * tex_angle.cos() + v * tex_angle.sin()) + tex_phase).sin();
            for c in 0..3 {
                px[c] += in_face * (skin[c] + wave - px[c]);
            }
            let in_hair = in_face * smoothstep(cy - ry * hairline, v, edge);
            let crown = smoothstep(1.12, d_face, edge / rx.min(ry)) * smoothstep(cy - ry * 0.8, v, edge);
            let hair_mask = in_hair.max(crown);
            for c in 0..3 {
                px[c] += hair_mask * (hair[c] - px[c]);
            }
            let ey = cy - ry * eye_dy;
            for side in [-1.0, 1.0] {
                let d = ((u - (cx + side * eye_dx)).powi(2) + (v - ey).powi(2)).sqrt();
                let m = smoothstep(eye_r, d, edge);
                for c in 0..3 {
                    px[c] += m * (feature[c] - px[c]);
                }
            }
            let my = cy + ry * mouth_dy;
            let m = smoothstep(mouth_w, (u - cx).abs(), edge) * smoothstep(mouth_h, (v - my).abs(), edge);
            for c in 0..3 {
                px[c] += m * (feature[c] * 0.5 + 0.3 - px[c]);
            }
            for c in px {
                let n: f64 = noise.sample(&mut rng);
                pixels.push((c + n).clamp(0.0, 1.0) as f32);
            }
        }
    }
    let id = identity_name(index);
    let image_id = bonafide_image_id(&id);
    FaceImage::new(size, pixels, id, image_id).expect("rendered pixels are valid")
}

pub fn synthesize_corpus<T: Scalar>(cfg: &SyntheticCorpusConfig) -> Result<Corpus<T>> {
    let n = cfg.n_identities;
    if n < 2 {
        return Err(validation("synthetic corpus needs at least two identities"));
    }
    let max_pairs = n * (n - 1) / 2;
    if cfg.n_morphs > max_pairs {
        return Err(validation(format!(
            "{} morphs requested but {n} identities only form {max_pairs} pairs",
            cfg.n_morphs
        )));
    }
    let bonafides: BTreeMap<String, FaceImage<T>> = (0..n)
        .map(|i| {
            let img: FaceImage<T> = render_identity(i, cfg.size, cfg.seed).cast();
            (img.image_id.clone(), img)
        })
        .collect();
    let images: Vec<&FaceImage<T>> = bonafides.values().collect();

    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_C0_4D05);
    pairs.shuffle(&mut rng);
    let alpha = T::lit(cfg.alpha);
    let mut morphs = Vec::with_capacity(cfg.n_morphs);
    for &(a, b) in pairs.iter().take(cfg.n_morphs) {
        let (base, other) = if rng.random_bool(0.5) { (a, b) } else { (b, a) };
        morphs.push(synthesize_morph(images[base], images[other], alpha)?);
    }
    Ok(Corpus { bonafides, morphs })
}
