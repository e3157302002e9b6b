//! Random perturbations applied to a reference image before differential
//! demorphing, so the reference is never the exact constituent used to
//! build the morph.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::image::{FaceImage, CHANNELS};
use crate::error::Result;
use crate::scalar::Scalar;

pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.5, 2.0);
pub const JITTER_MAX: f64 = 0.20;
pub const ROTATION_MAX_DEG: f64 = 5.0;
pub const TRANSLATION_MAX_FRAC: f64 = 0.05;

/// Lower bounds that keep sampled jitter/affine parameters away from identity.
const JITTER_MIN: f64 = 0.05;
const ROTATION_MIN_DEG: f64 = 1.0;
const TRANSLATION_MIN_FRAC: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ReferenceTransform {
    Blur { sigma: f64 },
    Jitter { brightness: f64, contrast: f64 },
    Affine { degrees: f64, tx_frac: f64, ty_frac: f64 },
}

fn signed(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let mag = rng.random_range(lo..=hi);
    if rng.random_bool(0.5) { mag } else { -mag }
}

/// Samples a nonempty chain of transforms, applied in blur, jitter, affine order.
pub fn sample_transforms(seed: u64) -> Vec<ReferenceTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: u8 = rng.random_range(1..8);
    let mut chain = Vec::new();
    if mask & 1 != 0 {
        chain.push(ReferenceTransform::Blur { sigma: rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1) });
    }
    if mask & 2 != 0 {
        chain.push(ReferenceTransform::Jitter {
            brightness: 1.0 + signed(&mut rng, JITTER_MIN, JITTER_MAX),
            contrast: 1.0 + signed(&mut rng, JITTER_MIN, JITTER_MAX),
        });
    }
    if mask & 4 != 0 {
        chain.push(ReferenceTransform::Affine {
            degrees: signed(&mut rng, ROTATION_MIN_DEG, ROTATION_MAX_DEG),
            tx_frac: signed(&mut rng, TRANSLATION_MIN_FRAC, TRANSLATION_MAX_FRAC),
            ty_frac: signed(&mut rng, TRANSLATION_MIN_FRAC, TRANSLATION_MAX_FRAC),
        });
    }
    chain
}

pub fn apply_reference_transforms<T: Scalar>(image: &FaceImage<T>, seed: u64) -> Result<FaceImage<T>> {
    let mut out = image.clone();
    for t in sample_transforms(seed) {
        out = apply_transform(&out, t)?;
    }
    Ok(out)
}

pub fn apply_transform<T: Scalar>(image: &FaceImage<T>, t: ReferenceTransform) -> Result<FaceImage<T>> {
    match t {
        ReferenceTransform::Blur { sigma } => gaussian_blur(image, sigma),
        ReferenceTransform::Jitter { brightness, contrast } => jitter(image, brightness, contrast),
        ReferenceTransform::Affine { degrees, tx_frac, ty_frac } => affine(image, degrees, tx_frac, ty_frac),
    }
}

/// Separable Gaussian blur with replicated borders. A vanishing sigma is the identity.
pub fn gaussian_blur<T: Scalar>(image: &FaceImage<T>, sigma: f64) -> Result<FaceImage<T>> {
    if !(sigma > 1e-6) {
        return Ok(image.clone());
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = weights.iter().sum();
    let kernel: Vec<T> = weights.iter().map(|w| T::lit(w / norm)).collect();

    let n = image.size() as isize;
    let clamp = |v: isize| v.clamp(0, n - 1) as usize;
    let src = image.pixels();
    let mut tmp = vec![T::zero(); src.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..CHANNELS {
                let mut acc = T::zero();
                for (k, w) in kernel.iter().enumerate() {
                    let xx = clamp(x + k as isize - radius);
                    acc = acc + *w * src[((y as usize) * n as usize + xx) * CHANNELS + c];
                }
                tmp[((y * n + x) as usize) * CHANNELS + c] = acc;
            }
        }
    }
    let mut out = vec![T::zero(); src.len()];
    for y in 0..n {
        for x in 0..n {
            for c in 0..CHANNELS {
                let mut acc = T::zero();
                for (k, w) in kernel.iter().enumerate() {
                    let yy = clamp(y + k as isize - radius);
                    acc = acc + *w * tmp[(yy * n as usize + x as usize) * CHANNELS + c];
                }
                out[((y * n + x) as usize) * CHANNELS + c] = acc;
            }
        }
    }
    FaceImage::from_clamped(image.size(), out, image.identity_id.clone(), image.image_id.clone())
}

/// Contrast stretch about the image mean followed by a brightness gain.
pub fn jitter<T: Scalar>(image: &FaceImage<T>, brightness: f64, contrast: f64) -> Result<FaceImage<T>> {
    let px = image.pixels();
    let mu = px.iter().copied().sum::<T>() / T::from_usize_lossy(px.len());
    let (b, c) = (T::lit(brightness), T::lit(contrast));
    let out = px.iter().map(|&p| ((p - mu) * c + mu) * b).collect();
    FaceImage::from_clamped(image.size(), out, image.identity_id.clone(), image.image_id.clone())
}

/// Rotation about the center plus translation, bilinear sampling, replicated borders.
pub fn affine<T: Scalar>(image: &FaceImage<T>, degrees: f64, tx_frac: f64, ty_frac: f64) -> Result<FaceImage<T>> {
    let n = image.size();
    let nf = n as f64;
    let center = (nf - 1.0) / 2.0;
    let (s, c) = degrees.to_radians().sin_cos();
    let (tx, ty) = (tx_frac * nf, ty_frac * nf);
    let src = image.pixels();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..n {
        for x in 0..n {
            // inverse map: output -> source
            let dx = x as f64 - center - tx;
            let dy = y as f64 - center - ty;
            let sx = (c * dx + s * dy + center).clamp(0.0, nf - 1.0);
            let sy = (-s * dx + c * dy + center).clamp(0.0, nf - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(n - 1), (y0 + 1).min(n - 1));
            let (fx, fy) = (T::lit(sx - x0 as f64), T::lit(sy - y0 as f64));
            for ch in 0..CHANNELS {
                let p = |yy: usize, xx: usize| src[(yy * n + xx) * CHANNELS + ch];
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bot = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                out.push(top + fy * (bot - top));
            }
        }
    }
    FaceImage::from_clamped(n, out, image.identity_id.clone(), image.image_id.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::render_identity;

    fn face() -> FaceImage<f64> {
        render_identity(3, 64, 9).cast()
    }

    #[test]
    fn same_seed_same_output() {
        let img = face();
        assert_eq!(apply_reference_transforms(&img, 5).unwrap(), apply_reference_transforms(&img, 5).unwrap());
    }

    #[test]
    fn degenerate_blur_is_identity() {
        let img = face();
        let out = gaussian_blur(&img, 0.0).unwrap();
        let tiny = gaussian_blur(&img, 1e-9).unwrap();
        for (a, b) in img.pixels().iter().zip(out.pixels()).chain(img.pixels().iter().zip(tiny.pixels())) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn small_sigma_kernel_is_nearly_identity() {
        // sigma 0.1: neighbour weight ~ exp(-50), far below the tolerance
        let img = face();
        let out = gaussian_blur(&img, 0.1).unwrap();
        assert!(img.pixels().iter().zip(out.pixels()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn chains_are_nonempty_and_in_range() {
        for seed in 0..200 {
            let chain = sample_transforms(seed);
            assert!(!chain.is_empty() && chain.len() <= 3);
            for t in chain {
                match t {
                    ReferenceTransform::Blur { sigma } => assert!((0.5..=2.0).contains(&sigma)),
                    ReferenceTransform::Jitter { brightness, contrast } => {
                        assert!((0.8..=1.2).contains(&brightness) && (0.8..=1.2).contains(&contrast))
                    }
                    ReferenceTransform::Affine { degrees, tx_frac, ty_frac } => {
                        assert!(degrees.abs() <= 5.0 && tx_frac.abs() <= 0.05 && ty_frac.abs() <= 0.05)
                    }
                }
            }
        }
    }

    #[test]
    fn transforms_change_nonconstant_images() {
        let img = face();
        for seed in 0..20 {
            let out = apply_reference_transforms(&img, seed).unwrap();
            assert_eq!(out.size(), img.size());
            assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
            let l1: f64 = img.pixels().iter().zip(out.pixels()).map(|(a, b)| (a - b).abs()).sum();
            assert!(l1 > 0.0, "seed {seed} left the image unchanged");
        }
    }
}
