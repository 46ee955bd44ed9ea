//! Forecast error metrics and the horizon decay slope.

use crate::error::{Error, Result};

fn check(preds: &[f64], truths: &[f64]) -> Result<()> {
    if preds.len() != truths.len() {
        return Err(Error::shape("metric", truths.len(), preds.len()));
    }
    if preds.is_empty() {
        return Err(Error::invalid("metric over zero points"));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check(preds, truths)?;
    Ok(preds.iter().zip(truths).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

/// Root mean squared error.
pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check(preds, truths)?;
    Ok((preds.iter().zip(truths).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / preds.len() as f64).sqrt())
}

/// Arithmetic mean, summed left to right.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Coefficient of determination `1 − SSE/SST`. Undefined (an error) when
/// every truth is identical.
///
/// Both sums are accumulated with the same expression, so predicting
/// [`mean`]`(truths)` everywhere yields exactly `0.0`.
pub fn r2(preds: &[f64], truths: &[f64]) -> Result<f64> {
    check(preds, truths)?;
    let m = mean(truths);
    let sst: f64 = truths.iter().map(|y| (m - y).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::invalid("R² is undefined when all truths are identical"));
    }
    let sse: f64 = preds.iter().zip(truths).map(|(p, y)| (p - y).powi(2)).sum();
    Ok(1.0 - sse / sst)
}

/// Ordinary least-squares slope of `values` against `horizons`.
pub fn decay_slope(horizons: &[f64], values: &[f64]) -> Result<f64> {
    if horizons.len() != values.len() {
        return Err(Error::shape("decay_slope", horizons.len(), values.len()));
    }
    if horizons.len() < 2 {
        return Err(Error::invalid("decay slope needs at least two points"));
    }
    let (mh, mv) = (mean(horizons), mean(values));
    let sxx: f64 = horizons.iter().map(|h| (h - mh).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("decay slope needs distinct horizons"));
    }
    let sxy: f64 = horizons.iter().zip(values).map(|(h, v)| (h - mh) * (v - mv)).sum();
    Ok(sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_values() {
        assert_eq!(mae(&[2.0, 4.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(rmse(&[2.0, 4.0], &[1.0, 1.0]).unwrap(), 5f64.sqrt());
        assert_eq!(mae(&[3.0, 1.0], &[3.0, 1.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[3.0, 1.0], &[3.0, 1.0]).unwrap(), 0.0);
        let y = [1.0, 5.0, 2.0, 8.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(r2(&[mean(&y); 4], &y).unwrap(), 0.0);
        assert!(r2(&[1.0, 1.0], &[3.0, 3.0]).is_err());
        assert!(mae(&[], &[]).is_err());
        assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn far_off_predictions_have_negative_r2() {
        let y = [1.0, 5.0, 2.0, 8.0];
        let m = mean(&y);
        let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        let p: Vec<f64> = y.iter().map(|v| v + 10.0 * sd).collect();
        assert!(r2(&p, &y).unwrap() < 0.0);
    }

    #[test]
    fn slopes() {
        let h = [3.0, 7.0, 14.0, 21.0];
        assert_eq!(decay_slope(&h, &[4.0; 4]).unwrap(), 0.0);
        let lin: Vec<f64> = h.iter().map(|x| 2.0 * x + 1.0).collect();
        assert!((decay_slope(&h, &lin).unwrap() - 2.0).abs() <= 1e-12);
        assert!(decay_slope(&[1.0], &[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn rmse_bounds_mae(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40)) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (a, r) = (mae(&p, &y).unwrap(), rmse(&p, &y).unwrap());
            prop_assert!(a >= 0.0);
            prop_assert!(r >= a * (1.0 - 1e-12));
        }

        #[test]
        fn mae_ignores_joint_order(pairs in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..20)) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let (pr, yr): (Vec<f64>, Vec<f64>) = pairs.into_iter().rev().unzip();
            prop_assert!((mae(&p, &y).unwrap() - mae(&pr, &yr).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn slope_matches_covariance_over_variance(pts in prop::collection::vec((0f64..50.0, -1e3f64..1e3), 3..12)) {
            let (h, v): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let n = h.len() as f64;
            let (sh, sv) = (h.iter().sum::<f64>(), v.iter().sum::<f64>());
            let shh: f64 = h.iter().map(|x| x * x).sum();
            let shv: f64 = h.iter().zip(&v).map(|(a, b)| a * b).sum();
            let denom = n * shh - sh * sh;
            prop_assume!(denom.abs() > 1e-6 * n * shh);
            let closed = (n * shv - sh * sv) / denom;
            let got = decay_slope(&h, &v).unwrap();
            prop_assert!((got - closed).abs() <= 1e-9 * (1.0 + closed.abs()), "{} vs {}", got, closed);
        }
    }
}
