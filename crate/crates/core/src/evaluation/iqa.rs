//! Full-reference image quality: SSIM and PSNR natively, FID and LPIPS
//! through an external provider that exchanges JSON files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image::{FaceImage, CHANNELS};
use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const PSNR_CAP_DB: f64 = 100.0;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_taps<T: Scalar>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| T::lit(w / total)).collect()
}

/// Separable Gaussian filter of one channel, keeping only fully covered windows.
fn filter_valid<T: Scalar>(plane: &[T], n: usize, taps: &[T]) -> Vec<T> {
    let k = taps.len();
    let m = n - k + 1;
    let mut rows = vec![T::zero(); n * m];
    for y in 0..n {
        for x in 0..m {
            rows[y * m + x] = (0..k).map(|i| taps[i] * plane[y * n + x + i]).sum();
        }
    }
    let mut out = vec![T::zero(); m * m];
    for y in 0..m {
        for x in 0..m {
            out[y * m + x] = (0..k).map(|i| taps[i] * rows[(y + i) * m + x]).sum();
        }
    }
    out
}

fn plane<T: Scalar>(img: &FaceImage<T>, c: usize, f: impl Fn(T) -> T) -> Vec<T> {
    img.pixels().iter().skip(c).step_by(CHANNELS).map(|&v| f(v)).collect()
}

fn check_pair<T: Scalar>(a: &FaceImage<T>, b: &FaceImage<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(validation(format!("IQA pair sizes differ: {} vs {}", a.size(), b.size())));
    }
    Ok(())
}

/// Mean SSIM over RGB channels with an 11-tap Gaussian window (sigma 1.5)
/// and data range 1. Identical inputs give exactly 1.
pub fn ssim<T: Scalar>(a: &FaceImage<T>, b: &FaceImage<T>) -> Result<T> {
    check_pair(a, b)?;
    let n = a.size();
    if n < SSIM_WINDOW {
        return Err(validation(format!("SSIM needs images of at least {SSIM_WINDOW}px, got {n}")));
    }
    let taps = gaussian_taps::<T>();
    let (c1, c2) = (T::lit(K1 * K1), T::lit(K2 * K2));
    let two = T::lit(2.0);
    let mut total = T::zero();
    let mut count = 0usize;
    for c in 0..CHANNELS {
        let x = plane(a, c, |v| v);
        let y = plane(b, c, |v| v);
        let xy: Vec<T> = x.iter().zip(&y).map(|(p, q)| *p * *q).collect();
        let mx = filter_valid(&x, n, &taps);
        let my = filter_valid(&y, n, &taps);
        let exx = filter_valid(&plane(a, c, |v| v * v), n, &taps);
        let eyy = filter_valid(&plane(b, c, |v| v * v), n, &taps);
        let exy = filter_valid(&xy, n, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = exx[i] - ux * ux;
            let syy = eyy[i] - uy * uy;
            let sxy = exy[i] - ux * uy;
            let num = (two * ux * uy + c1) * (two * sxy + c2);
            let den = (ux * ux + uy * uy + c1) * (sxx + syy + c2);
            total = total + num / den;
            count += 1;
        }
    }
    Ok(total / T::from_usize_lossy(count))
}

/// PSNR in dB for data range 1, capped at 100 dB (identical images).
pub fn psnr<T: Scalar>(a: &FaceImage<T>, b: &FaceImage<T>) -> Result<T> {
    check_pair(a, b)?;
    let mse = a.pixels().iter().zip(b.pixels()).map(|(p, q)| (*p - *q) * (*p - *q)).sum::<T>()
        / T::from_usize_lossy(a.pixels().len());
    let cap = T::lit(PSNR_CAP_DB);
    if mse == T::zero() {
        return Ok(cap);
    }
    Ok((T::lit(10.0) * (T::one() / mse).log10()).min(cap))
}

/// Quality summary; learned metrics stay `None` unless a provider answered.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IqaSummary {
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
}

/// Mean SSIM and PSNR over `(output, ground truth)` pairs.
pub fn iqa<T: Scalar>(pairs: &[(&FaceImage<T>, &FaceImage<T>)]) -> Result<IqaSummary> {
    if pairs.is_empty() {
        return Ok(IqaSummary { ssim: None, psnr: None, fid: None, lpips: None });
    }
    let mut s = 0.0;
    let mut p = 0.0;
    for (out, gt) in pairs {
        s += ssim(*out, *gt)?.as_f64();
        p += psnr(*out, *gt)?.as_f64();
    }
    let n = pairs.len() as f64;
    Ok(IqaSummary { ssim: Some(s / n), psnr: Some(p / n), fid: None, lpips: None })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IqaRequestPair {
    pub output: String,
    pub ground_truth: String,
}

/// What the external provider is asked to score: PNG paths relative to the
/// request file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IqaRequest {
    pub pairs: Vec<IqaRequestPair>,
}

/// The provider's answer. Either metric may be omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IqaResponse {
    #[serde(default)]
    pub fid: Option<f64>,
    #[serde(default)]
    pub lpips: Option<f64>,
}

pub fn write_iqa_request(path: &Path, request: &IqaRequest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(request)? + "\n")?;
    Ok(())
}

/// Reads a provider response; a missing file means no provider ran.
pub fn read_iqa_response(path: &Path) -> Result<Option<IqaResponse>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path)?;
    let r: IqaResponse = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad IQA provider response {}: {e}", path.display())))?;
    for v in [r.fid, r.lpips].into_iter().flatten() {
        if !v.is_finite() {
            return Err(Error::Config("IQA provider returned a non-finite value".into()));
        }
    }
    Ok(Some(r))
}
