//! Reference predictors: historical average, windowed average, last day and
//! a pooled least-squares regression on the recent window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge added to the normal equations when they are not positive definite.
pub const RIDGE_FALLBACK: f64 = 1e-8;

/// Days of history used as regression features.
pub const LINREG_WINDOW: usize = 7;

fn nonempty(history: &[f64]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::invalid("baseline over an empty history"));
    }
    Ok(())
}

/// Mean of the whole history.
pub fn avg(history: &[f64]) -> Result<f64> {
    nonempty(history)?;
    Ok(history.iter().sum::<f64>() / history.len() as f64)
}

/// Mean of the last `d` days.
pub fn avg_window(history: &[f64], d: usize) -> Result<f64> {
    if d == 0 || history.len() < d {
        return Err(Error::invalid(format!("window {d} needs at least {d} days, got {}", history.len())));
    }
    avg(&history[history.len() - d..])
}

/// The final observation.
pub fn last_day(history: &[f64]) -> Result<f64> {
    nonempty(history)?;
    Ok(history[history.len() - 1])
}

/// Linear model `y = coefᵀ x + intercept`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub coef: Vec<f64>,
    pub intercept: f64,
    /// Ridge actually used (0 or [`RIDGE_FALLBACK`]).
    pub ridge: f64,
}

impl LinearFit {
    pub fn predict(&self, query: &[f64]) -> Result<f64> {
        if query.len() != self.coef.len() {
            return Err(Error::shape("linreg predict", self.coef.len(), query.len()));
        }
        Ok(self.intercept + self.coef.iter().zip(query).map(|(b, x)| b * x).sum::<f64>())
    }
}

/// Least squares with an intercept, via the normal equations on centered
/// data. Falls back to a tiny ridge when `XᵀX` is singular.
pub fn linreg_fit(features: &[Vec<f64>], targets: &[f64]) -> Result<LinearFit> {
    let m = features.len();
    if m == 0 {
        return Err(Error::invalid("regression over zero samples"));
    }
    if targets.len() != m {
        return Err(Error::shape("linreg", m, targets.len()));
    }
    let p = features[0].len();
    if features.iter().any(|r| r.len() != p) {
        return Err(Error::invalid("ragged design matrix"));
    }
    let x_mean: Vec<f64> = (0..p).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / m as f64).collect();
    let y_mean = targets.iter().sum::<f64>() / m as f64;
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (row, y) in features.iter().zip(targets) {
        let c: Vec<f64> = row.iter().zip(&x_mean).map(|(v, mu)| v - mu).collect();
        let yc = y - y_mean;
        for i in 0..p {
            xty[i] += c[i] * yc;
            for j in 0..p {
                xtx[i * p + j] += c[i] * c[j];
            }
        }
    }
    let (coef, ridge) = match cholesky_solve(&xtx, &xty, p, 0.0) {
        Some(b) => (b, 0.0),
        None => (
            cholesky_solve(&xtx, &xty, p, RIDGE_FALLBACK)
                .ok_or_else(|| Error::invalid("normal equations singular even with ridge"))?,
            RIDGE_FALLBACK,
        ),
    };
    let intercept = y_mean - coef.iter().zip(&x_mean).map(|(b, mu)| b * mu).sum::<f64>();
    Ok(LinearFit { coef, intercept, ridge })
}

pub fn linreg_fit_predict(features: &[Vec<f64>], targets: &[f64], query: &[f64]) -> Result<f64> {
    linreg_fit(features, targets)?.predict(query)
}

/// Solves `(A + λI) x = b` for symmetric `A`; `None` unless the matrix is
/// numerically positive definite.
fn cholesky_solve(a: &[f64], b: &[f64], p: usize, lambda: f64) -> Option<Vec<f64>> {
    let scale = (0..p).map(|i| a[i * p + i]).fold(0.0, f64::max);
    let tol = 1e-12 * scale;
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = a[i * p + j] + if i == j { lambda } else { 0.0 };
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= tol || s <= 0.0 {
                    return None;
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    let mut y = vec![0.0; p];
    for i in 0..p {
        let s: f64 = (0..i).map(|k| l[i * p + k] * y[k]).sum();
        y[i] = (b[i] - s) / l[i * p + i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|k| l[k * p + i] * x[k]).sum();
        x[i] = (y[i] - s) / l[i * p + i];
    }
    Some(x)
}

/// Pooled regression samples from per-region series: the `d` days ending at
/// each anchor predict the value `horizon` days later. Only targets on or
/// before `last_target_day` are used.
pub fn pooled_samples(series: &[Vec<f64>], d: usize, horizon: usize, last_target_day: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in series {
        for anchor in d.saturating_sub(1)..s.len() {
            let target = anchor + horizon;
            if target > last_target_day || target >= s.len() {
                break;
            }
            xs.push(s[anchor + 1 - d..=anchor].to_vec());
            ys.push(s[target]);
        }
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heuristic_examples() {
        assert_eq!(avg(&[5.0]).unwrap(), 5.0);
        assert_eq!(avg(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(avg_window(&[1.0, 2.0, 3.0, 10.0, 20.0], 2).unwrap(), 15.0);
        assert_eq!(last_day(&[7.0]).unwrap(), 7.0);
        assert_eq!(last_day(&[3.0, 9.0]).unwrap(), 9.0);
        assert!(avg(&[]).is_err());
        assert!(last_day(&[]).is_err());
        assert!(avg_window(&[1.0], 2).is_err());
    }

    #[test]
    fn exact_line_is_interpolated() {
        let xs: Vec<Vec<f64>> = (1..=5).map(|x| vec![x as f64]).collect();
        let ys: Vec<f64> = (1..=5).map(|x| 2.0 * x as f64 + 1.0).collect();
        let fit = linreg_fit(&xs, &ys).unwrap();
        assert_eq!(fit.ridge, 0.0);
        assert!((fit.predict(&[6.0]).unwrap() - 13.0).abs() <= 1e-9);
    }

    #[test]
    fn constant_targets_and_rank_deficiency() {
        let xs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 3.0]).collect();
        let fit = linreg_fit(&xs, &[4.0; 6]).unwrap();
        assert!((fit.predict(&[10.0, 3.0]).unwrap() - 4.0).abs() <= 1e-9);
        assert_eq!(fit.ridge, RIDGE_FALLBACK);
        assert!(linreg_fit(&[], &[]).is_err());
    }

    #[test]
    fn matches_gradient_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (m, p) = (40, 3);
        let xs: Vec<Vec<f64>> = (0..m).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|r| 1.5 * r[0] - 2.0 * r[1] + 0.5 * r[2] + 0.7 + rng.random_range(-0.3..0.3))
            .collect();
        let fit = linreg_fit(&xs, &ys).unwrap();
        // Plain gradient descent on the mean squared residual, intercept included.
        let mut w = vec![0.0; p + 1];
        for _ in 0..200_000 {
            let mut g = vec![0.0; p + 1];
            for (r, y) in xs.iter().zip(&ys) {
                let e = w[p] + (0..p).map(|j| w[j] * r[j]).sum::<f64>() - y;
                for j in 0..p {
                    g[j] += e * r[j];
                }
                g[p] += e;
            }
            for j in 0..=p {
                w[j] -= 0.05 * g[j] / m as f64;
            }
        }
        for j in 0..p {
            assert!((fit.coef[j] - w[j]).abs() <= 1e-6, "{j}: {} vs {}", fit.coef[j], w[j]);
        }
        assert!((fit.intercept - w[p]).abs() <= 1e-6);
    }

    #[test]
    fn pooled_samples_respect_the_cutoff() {
        let s = vec![(0..10).map(f64::from).collect::<Vec<_>>()];
        let (xs, ys) = pooled_samples(&s, 3, 2, 6);
        // anchors 2..=4 → targets 4..=6
        assert_eq!(ys, vec![4.0, 5.0, 6.0]);
        assert_eq!(xs[0], vec![0.0, 1.0, 2.0]);
    }

    proptest! {
        #[test]
        fn window_of_one_is_last_day(h in prop::collection::vec(0f64..1e4, 1..30)) {
            prop_assert_eq!(avg_window(&h, 1).unwrap(), last_day(&h).unwrap());
        }

        #[test]
        fn full_window_is_average(h in prop::collection::vec(0f64..1e4, 1..30)) {
            prop_assert_eq!(avg_window(&h, h.len()).unwrap(), avg(&h).unwrap());
        }

        #[test]
        fn residuals_are_orthogonal_to_the_design(
            rows in prop::collection::vec((-10f64..10.0, -10f64..10.0, -50f64..50.0), 6..30)
        ) {
            let xs: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0, r.1]).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let fit = linreg_fit(&xs, &ys).unwrap();
            prop_assume!(fit.ridge == 0.0);
            let res: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| y - fit.predict(x).unwrap()).collect();
            let scale: f64 = ys.iter().map(|y| y.abs()).sum::<f64>() + 1.0;
            prop_assert!(res.iter().sum::<f64>().abs() <= 1e-8 * scale);
            for j in 0..2 {
                let dot: f64 = xs.iter().zip(&res).map(|(x, r)| x[j] * r).sum();
                prop_assert!(dot.abs() <= 1e-8 * scale * 10.0, "column {} dot {}", j, dot);
            }
        }
    }
}
