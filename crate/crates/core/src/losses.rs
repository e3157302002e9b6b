//! Adversarial objective, cross-road reconstruction loss and their
//! weighted combination, as plain scalar functions and as tensor graphs
//! used during training.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::data::image::FaceImage;
use crate::error::{validation, Result};
use crate::scalar::Scalar;

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// Generator minimizes `log(1 - D(G(x)))`, exactly the minimax objective.
    LiteralMinimax,
    /// Generator minimizes `-log D(G(x))`.
    #[default]
    NonSaturating,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub adv_g: T,
    pub adv_d: T,
    pub cross_road: T,
    pub total_g: T,
    pub alpha: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(adv_g: T, adv_d: T, cross_road: T, alpha: T) -> Self {
        Self { adv_g, adv_d, cross_road, total_g: total_generator_loss(adv_g, cross_road, alpha), alpha }
    }

    pub fn is_finite(&self) -> bool {
        [self.adv_g, self.adv_d, self.cross_road, self.total_g].iter().all(|v| v.is_finite())
    }
}

fn clamp_prob<T: Scalar>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    let c = p.max(eps).min(T::one() - eps);
    if c != p {
        log::debug!("discriminator score {p} clamped to {c}");
    }
    c
}

/// Returns `(adv_d, adv_g)` for one real and one fake discriminator score.
pub fn adversarial_losses<T: Scalar>(real_score: T, fake_score: T, form: AdversarialForm) -> (T, T) {
    let (r, f) = (clamp_prob(real_score), clamp_prob(fake_score));
    let adv_d = -(r.ln() + (T::one() - f).ln());
    let adv_g = match form {
        AdversarialForm::LiteralMinimax => (T::one() - f).ln(),
        AdversarialForm::NonSaturating => -f.ln(),
    };
    (adv_d, adv_g)
}

/// Mean absolute difference between equally long buffers.
pub fn l1_mean<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(validation(format!("L1 over buffers of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (*x - *y).abs()).sum::<T>() / T::from_usize_lossy(a.len()))
}

/// Minimum L1 cost over the two ways of pairing unordered outputs with
/// ordered ground truths.
pub fn cross_road_loss_raw<T: Scalar>(out1: &[T], out2: &[T], gt1: &[T], gt2: &[T]) -> Result<T> {
    let straight = l1_mean(gt1, out1)? + l1_mean(gt2, out2)?;
    let crossed = l1_mean(gt1, out2)? + l1_mean(gt2, out1)?;
    Ok(straight.min(crossed))
}

pub fn cross_road_loss<T: Scalar>(
    out1: &FaceImage<T>,
    out2: &FaceImage<T>,
    gt1: &FaceImage<T>,
    gt2: &FaceImage<T>,
) -> Result<T> {
    if !(out1.same_shape(out2) && out1.same_shape(gt1) && out1.same_shape(gt2)) {
        return Err(validation("cross-road loss needs four images of one shape"));
    }
    cross_road_loss_raw(out1.pixels(), out2.pixels(), gt1.pixels(), gt2.pixels())
}

pub fn cross_road_loss_differential<T: Scalar>(out: &FaceImage<T>, gt: &FaceImage<T>) -> Result<T> {
    if !out.same_shape(gt) {
        return Err(validation("differential loss needs two images of one shape"));
    }
    l1_mean(out.pixels(), gt.pixels())
}

pub fn total_generator_loss<T: Scalar>(adv_g: T, cross_road: T, alpha: T) -> T {
    adv_g + alpha * cross_road
}

/// Tensor forms over `(B, C, H, W)` batches and patch-score maps.
pub mod graph {
    use super::*;

    /// Per-sample mean absolute error, shape `(B,)`.
    pub fn l1_per_sample(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
        (a - b)?.abs()?.flatten_from(1)?.mean(D::Minus1)
    }

    /// Batch mean of the per-sample cross-road minimum.
    pub fn cross_road(out1: &Tensor, out2: &Tensor, gt1: &Tensor, gt2: &Tensor) -> candle_core::Result<Tensor> {
        let straight = (l1_per_sample(gt1, out1)? + l1_per_sample(gt2, out2)?)?;
        let crossed = (l1_per_sample(gt1, out2)? + l1_per_sample(gt2, out1)?)?;
        straight.minimum(&crossed)?.mean_all()
    }

    pub fn l1(out: &Tensor, gt: &Tensor) -> candle_core::Result<Tensor> {
        l1_per_sample(out, gt)?.mean_all()
    }

    fn clamped(p: &Tensor) -> candle_core::Result<Tensor> {
        p.clamp(PROB_EPS as f32, 1.0 - PROB_EPS as f32)
    }

    /// Discriminator loss averaged over every patch score.
    pub fn discriminator(real: &Tensor, fake: &Tensor) -> candle_core::Result<Tensor> {
        let lr = clamped(real)?.log()?.mean_all()?;
        let lf = clamped(fake)?.affine(-1.0, 1.0)?.log()?.mean_all()?;
        (lr + lf)?.neg()
    }

    pub fn generator(fake: &Tensor, form: AdversarialForm) -> candle_core::Result<Tensor> {
        let f = clamped(fake)?;
        match form {
            AdversarialForm::LiteralMinimax => f.affine(-1.0, 1.0)?.log()?.mean_all(),
            AdversarialForm::NonSaturating => f.log()?.mean_all()?.neg(),
        }
    }
}
