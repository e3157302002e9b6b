//! Verification metrics over genuine/imposter score lists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{mean, sample_variance, Scalar};

/// Operating point at one false match rate. `threshold` is `None` when no
/// finite threshold reaches the requested rate (every genuine score is then
/// rejected).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TmrPoint {
    pub fmr: f64,
    pub threshold: Option<f64>,
    pub tmr: f64,
}

fn check_scores<T: Scalar>(what: &str, xs: &[T]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::Protocol(format!("{what} score list is empty")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::Protocol(format!("{what} scores contain a non-finite value")));
    }
    Ok(())
}

fn sorted<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    v
}

/// Number of values in ascending `xs` that are `>= t`.
fn count_at_least<T: Scalar>(xs: &[T], t: T) -> usize {
    xs.len() - xs.partition_point(|x| *x < t)
}

/// True match rate at each requested false match rate.
///
/// The threshold is the smallest `t` with `#{imposter >= t} / n <= fmr`.
/// Only observed scores (and `+inf`) can be that minimum, so those are the
/// candidates searched.
pub fn tmr_at_fmr<T: Scalar>(genuine: &[T], imposter: &[T], fmr_levels: &[f64]) -> Result<Vec<TmrPoint>> {
    check_scores("genuine", genuine)?;
    check_scores("imposter", imposter)?;
    if let Some(f) = fmr_levels.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Error::Protocol(format!("FMR level {f} outside [0, 1]")));
    }
    let gen = sorted(genuine);
    let imp = sorted(imposter);
    let mut candidates: Vec<T> = gen.iter().chain(&imp).copied().collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    candidates.dedup();
    let n_imp = imp.len() as f64;
    let n_gen = gen.len() as f64;

    Ok(fmr_levels
        .iter()
        .map(|&f| {
            // the imposter pass rate only falls as t grows, so the predicate is monotone
            let first = candidates.partition_point(|&c| count_at_least(&imp, c) as f64 / n_imp > f);
            match candidates.get(first) {
                Some(&t) => TmrPoint { fmr: f, threshold: Some(t.as_f64()), tmr: count_at_least(&gen, t) as f64 / n_gen },
                None => TmrPoint { fmr: f, threshold: None, tmr: 0.0 },
            }
        })
        .collect())
}

/// Decidability index with pooled sample variance. Two samples with equal
/// means score 0; distinct means with zero spread score `+inf`.
pub fn d_prime<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Protocol(format!(
            "d' needs at least two scores per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_scores("first", a)?;
    check_scores("second", b)?;
    let (ma, mb) = (mean(a).expect("nonempty"), mean(b).expect("nonempty"));
    let diff = (ma - mb).abs();
    if diff == T::zero() {
        return Ok(T::zero());
    }
    let pooled = ((sample_variance(a).expect("n >= 2") + sample_variance(b).expect("n >= 2")) / T::lit(2.0)).sqrt();
    if pooled == T::zero() {
        log::warn!("d' of two zero-variance samples with different means; reporting +inf");
        return Ok(T::infinity());
    }
    Ok(diff / pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: usize,
}

/// Equal-width histogram over `[lo, hi]`; out-of-range values land in the
/// edge bins.
pub fn histogram<T: Scalar>(values: &[T], lo: f64, hi: f64, bins: usize) -> Vec<HistogramBin> {
    assert!(bins > 0 && hi > lo, "histogram needs a positive range and bin count");
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let x = v.as_f64();
        let i = (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            bin_left: lo + i as f64 * width,
            bin_right: if i + 1 == bins { hi } else { lo + (i + 1) as f64 * width },
            count,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let pts = tmr_at_fmr(&[0.9f64; 20], &[0.1f64; 20], &[0.01]).unwrap();
        assert_eq!(pts[0].tmr, 1.0);
        assert_eq!(pts[0].threshold, Some(0.9));
    }

    #[test]
    fn unreachable_rate_rejects_everything() {
        // every candidate admits all imposters, so no finite threshold works
        let pts = tmr_at_fmr(&[0.5f64, 0.5], &[0.5f64, 0.5], &[0.0]).unwrap();
        assert_eq!(pts[0], TmrPoint { fmr: 0.0, threshold: None, tmr: 0.0 });
        let pts = tmr_at_fmr(&[0.5f64, 0.5], &[0.5f64, 0.5], &[1.0]).unwrap();
        assert_eq!(pts[0].tmr, 1.0);
    }

    #[test]
    fn empty_lists_are_protocol_errors() {
        assert!(matches!(tmr_at_fmr::<f64>(&[], &[0.1], &[0.1]), Err(Error::Protocol(_))));
        assert!(matches!(tmr_at_fmr::<f64>(&[0.1], &[], &[0.1]), Err(Error::Protocol(_))));
        assert!(matches!(tmr_at_fmr(&[f64::NAN], &[0.1], &[0.1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn d_prime_edge_cases() {
        let a = [0.1f64, 0.4, 0.3];
        assert_eq!(d_prime(&a, &a).unwrap(), 0.0);
        assert!(d_prime(&[0.0f64; 5], &[1.0f64; 5]).unwrap().is_infinite());
        assert_eq!(d_prime(&[0.3f64; 4], &[0.3f64; 4]).unwrap(), 0.0);
        assert!(d_prime(&[1.0f64], &a).is_err());
        // closed form: means 0 and 2, both variances 1
        let v = d_prime(&[-1.0f64, 1.0], &[1.0f64, 3.0]).unwrap();
        assert!((v - 2.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn histogram_accounts_for_every_value() {
        let xs = [-3.0f64, -1.0, -0.5, 0.0, 0.99, 1.0, 5.0];
        let h = histogram(&xs, -1.0, 1.0, 4);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), xs.len());
        assert_eq!(h[0].bin_left, -1.0);
        assert_eq!(h[3].bin_right, 1.0);
        assert_eq!(h[0].count, 2);
        assert_eq!(h[3].count, 3);
    }
}
