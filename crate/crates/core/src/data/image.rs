use std::path::Path;

use crate::error::{validation, Error, Result};
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;

/// Square RGB face image with pixels in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage<T> {
    size: usize,
    pixels: Vec<T>,
    pub identity_id: String,
    pub image_id: String,
}

impl<T: Scalar> FaceImage<T> {
    pub fn new(
        size: usize,
        pixels: Vec<T>,
        identity_id: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        let identity_id = identity_id.into();
        if size == 0 {
            return Err(validation("face image has zero area"));
        }
        if pixels.len() != size * size * CHANNELS {
            return Err(validation(format!(
                "expected {} values for a {size}x{size} RGB image, got {}",
                size * size * CHANNELS,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(validation(format!("pixel value {bad} outside [0, 1]")));
        }
        if identity_id.is_empty() {
            return Err(validation("identity id must be nonempty"));
        }
        Ok(Self { size, pixels, identity_id, image_id: image_id.into() })
    }

    /// Builds an image from arbitrary values, clamping them into `[0, 1]`.
    pub fn from_clamped(
        size: usize,
        mut pixels: Vec<T>,
        identity_id: impl Into<String>,
        image_id: impl Into<String>,
    ) -> Result<Self> {
        for p in pixels.iter_mut() {
            *p = if p.is_nan() { T::zero() } else { p.max(T::zero()).min(T::one()) };
        }
        Self::new(size, pixels, identity_id, image_id)
    }

    pub fn constant(size: usize, value: T, identity_id: &str, image_id: &str) -> Result<Self> {
        Self::new(size, vec![value; size * size * CHANNELS], identity_id, image_id)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<T> {
        self.pixels
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.pixels[(y * self.size + x) * CHANNELS + c]
    }

    /// Same pixels under new ids.
    pub fn relabeled(&self, identity_id: &str, image_id: &str) -> Self {
        Self {
            size: self.size,
            pixels: self.pixels.clone(),
            identity_id: identity_id.to_string(),
            image_id: image_id.to_string(),
        }
    }

    /// Planar CHW copy, the layout the networks consume.
    pub fn to_chw_f32(&self) -> Vec<f32> {
        let n = self.size * self.size;
        let mut out = vec![0f32; n * CHANNELS];
        for (i, px) in self.pixels.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                out[c * n + i] = px[c].as_f32();
            }
        }
        out
    }

    pub fn from_chw_f32(size: usize, chw: &[f32], identity_id: &str, image_id: &str) -> Result<Self> {
        let n = size * size;
        if chw.len() != n * CHANNELS {
            return Err(validation("planar buffer does not match image size"));
        }
        let mut pixels = Vec::with_capacity(n * CHANNELS);
        for i in 0..n {
            for c in 0..CHANNELS {
                pixels.push(T::from_f32(chw[c * n + i]).unwrap_or_else(T::zero));
            }
        }
        Self::from_clamped(size, pixels, identity_id, image_id)
    }

    /// ITU-R BT.601 luma plane.
    pub fn grayscale(&self) -> Vec<T> {
        let (r, g, b) = (T::lit(0.299), T::lit(0.587), T::lit(0.114));
        self.pixels.chunks_exact(CHANNELS).map(|p| r * p[0] + g * p[1] + b * p[2]).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.size == other.size
    }

    /// Mean absolute pixel difference.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<T> {
        if !self.same_shape(other) {
            return Err(validation(format!(
                "image sizes differ: {} vs {}",
                self.size, other.size
            )));
        }
        let total: T = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (*a - *b).abs()).sum();
        Ok(total / T::from_usize_lossy(self.pixels.len()))
    }

    pub fn cast<U: Scalar>(&self) -> FaceImage<U> {
        FaceImage {
            size: self.size,
            pixels: self.pixels.iter().map(|p| U::from_f64(p.as_f64()).unwrap_or_else(U::zero)).collect(),
            identity_id: self.identity_id.clone(),
            image_id: self.image_id.clone(),
        }
    }
}

/// Decoded but not yet normalized RGB image of any shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage<T> {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB values in `[0, max_value]`.
    pub pixels: Vec<T>,
    pub max_value: T,
    pub identity_id: String,
    pub image_id: String,
}

impl<T: Scalar> From<&FaceImage<T>> for RawImage<T> {
    fn from(img: &FaceImage<T>) -> Self {
        Self {
            width: img.size,
            height: img.size,
            pixels: img.pixels.clone(),
            max_value: T::one(),
            identity_id: img.identity_id.clone(),
            image_id: img.image_id.clone(),
        }
    }
}

pub const SUPPORTED_SIZES: [usize; 3] = [64, 128, 256];

/// Normalizes to `[0, 1]`, center-crops to a square and resizes bilinearly
/// to `target_size`. Already-square inputs at the target size pass through
/// untouched apart from normalization. Zero-area or malformed inputs yield
/// [`Error::Skipped`] so corpus loaders can report and continue.
pub fn preprocess<T: Scalar>(raw: &RawImage<T>, target_size: usize) -> Result<FaceImage<T>> {
    if !SUPPORTED_SIZES.contains(&target_size) {
        return Err(validation(format!(
            "target size {target_size} not in {SUPPORTED_SIZES:?}"
        )));
    }
    if raw.width == 0 || raw.height == 0 {
        return Err(Error::Skipped(format!("{}: zero-area image", raw.image_id)));
    }
    if raw.pixels.len() != raw.width * raw.height * CHANNELS {
        return Err(Error::Skipped(format!("{}: truncated pixel buffer", raw.image_id)));
    }
    if !(raw.max_value > T::zero()) {
        return Err(Error::Skipped(format!("{}: nonpositive value range", raw.image_id)));
    }
    let normalized: Vec<T> = raw
        .pixels
        .iter()
        .map(|&p| {
            let v = p / raw.max_value;
            if v.is_nan() { T::zero() } else { v.max(T::zero()).min(T::one()) }
        })
        .collect();

    let side = raw.width.min(raw.height);
    let (x0, y0) = ((raw.width - side) / 2, (raw.height - side) / 2);
    let cropped = if side == raw.width && side == raw.height {
        normalized
    } else {
        let mut out = Vec::with_capacity(side * side * CHANNELS);
        for y in y0..y0 + side {
            let row = (y * raw.width + x0) * CHANNELS;
            out.extend_from_slice(&normalized[row..row + side * CHANNELS]);
        }
        out
    };
    let pixels = if side == target_size {
        cropped
    } else {
        resize_bilinear(&cropped, side, side, CHANNELS, target_size, target_size)
    };
    FaceImage::from_clamped(target_size, pixels, raw.identity_id.clone(), raw.image_id.clone())
}

/// Bilinear resampling with half-pixel centers and edge clamping, on an
/// interleaved buffer with `channels` values per pixel.
pub fn resize_bilinear<T: Scalar>(
    src: &[T],
    width: usize,
    height: usize,
    channels: usize,
    new_width: usize,
    new_height: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(new_width * new_height * channels);
    let sx = width as f64 / new_width as f64;
    let sy = height as f64 / new_height as f64;
    let sample = |pos: f64, len: usize| -> (usize, usize, T) {
        let p = (pos.max(0.0)).min((len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, T::lit(p - i0 as f64))
    };
    for y in 0..new_height {
        let (y0, y1, fy) = sample((y as f64 + 0.5) * sy - 0.5, height);
        for x in 0..new_width {
            let (x0, x1, fx) = sample((x as f64 + 0.5) * sx - 0.5, width);
            for c in 0..channels {
                let p = |yy: usize, xx: usize| src[(yy * width + xx) * channels + c];
                // lerp written as a + f(b - a) so constant regions stay exact
                let top = p(y0, x0) + fx * (p(y0, x1) - p(y0, x0));
                let bot = p(y1, x0) + fx * (p(y1, x1) - p(y1, x0));
                out.push(top + fy * (bot - top));
            }
        }
    }
    out
}

pub fn load_png<T: Scalar>(path: &Path, identity_id: &str, image_id: &str) -> Result<RawImage<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RawImage {
        width: w as usize,
        height: h as usize,
        pixels: img.as_raw().iter().map(|&b| T::from_u8(b).unwrap_or_else(T::zero)).collect(),
        max_value: T::lit(255.0),
        identity_id: identity_id.to_string(),
        image_id: image_id.to_string(),
    })
}

pub fn save_png<T: Scalar>(img: &FaceImage<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let bytes: Vec<u8> = img
        .pixels()
        .iter()
        .map(|p| (p.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let size = img.size() as u32;
    image::save_buffer(path, &bytes, size, size, image::ColorType::Rgb8)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(w: usize, h: usize, f: impl Fn(usize, usize, usize) -> f64) -> RawImage<f64> {
        let mut pixels = Vec::new();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    pixels.push(f(y, x, c));
                }
            }
        }
        RawImage { width: w, height: h, pixels, max_value: 1.0, identity_id: "a".into(), image_id: "a0".into() }
    }

    #[test]
    fn same_size_passes_through_bit_identical() {
        let r = raw(256, 256, |y, x, c| ((y * 7 + x * 3 + c) % 255) as f64 / 255.0);
        let out = preprocess(&r, 256).unwrap();
        assert_eq!(out.pixels(), &r.pixels[..]);
    }

    #[test]
    fn constant_survives_downscale() {
        let r = raw(512, 512, |_, _, _| 0.37);
        let out = preprocess(&r, 64).unwrap();
        assert_eq!(out.size(), 64);
        assert!(out.pixels().iter().all(|&p| p == 0.37));
    }

    #[test]
    fn non_square_is_cropped_then_resized() {
        let r = raw(100, 80, |y, x, _| (x + y) as f64 / 180.0);
        let out = preprocess(&r, 64).unwrap();
        assert_eq!(out.size(), 64);
        assert_eq!(out.pixels().len(), 64 * 64 * 3);
        assert!(out.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn eight_bit_values_are_scaled() {
        let mut r = raw(64, 64, |_, _, _| 255.0);
        r.max_value = 255.0;
        let out = preprocess(&r, 64).unwrap();
        assert!(out.pixels().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn zero_area_is_skipped() {
        let r = raw(0, 0, |_, _, _| 0.0);
        assert!(matches!(preprocess(&r, 64), Err(Error::Skipped(_))));
    }

    #[test]
    fn unsupported_target_is_rejected() {
        let r = raw(8, 8, |_, _, _| 0.0);
        assert!(matches!(preprocess(&r, 100), Err(Error::Validation(_))));
    }

    #[test]
    fn face_image_rejects_out_of_range() {
        assert!(FaceImage::new(1, vec![0.0, 1.5, 0.0], "a", "b").is_err());
        assert!(FaceImage::new(1, vec![0.0, 0.5, 0.0], "", "b").is_err());
    }

    #[test]
    fn chw_roundtrip() {
        let img = FaceImage::new(2, (0..12).map(|i| i as f32 / 11.0).collect(), "a", "b").unwrap();
        let back = FaceImage::<f32>::from_chw_f32(2, &img.to_chw_f32(), "a", "b").unwrap();
        assert_eq!(img, back);
    }
}
