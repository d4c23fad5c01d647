//! L1-penalized least squares by coordinate descent, with k-fold
//! cross-validation over a log-spaced penalty path.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassoConfig {
    pub n_lambda: usize,
    /// Smallest penalty as a fraction of the smallest all-zero penalty.
    pub lambda_min_ratio: f64,
    pub folds: usize,
    pub tol: f64,
    pub max_sweeps: usize,
    /// Pick the largest penalty within one standard error of the best.
    pub one_se: bool,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self { n_lambda: 60, lambda_min_ratio: 1e-6, folds: 5, tol: 1e-9, max_sweeps: 20_000, one_se: true }
    }
}

/// Fit in the original column units: y ≈ intercept + X·coef.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub lambda: f64,
    pub cv_mse: Option<f64>,
}

impl LassoFit {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }
}

struct Standardized {
    x: DMatrix<f64>,
    y: DVector<f64>,
    mean_x: Vec<f64>,
    sd_x: Vec<f64>,
    mean_y: f64,
}

fn standardize(x: &DMatrix<f64>, y: &DVector<f64>) -> Standardized {
    let (n, p) = x.shape();
    let mut xs = x.clone();
    let mut mean_x = vec![0.0; p];
    let mut sd_x = vec![0.0; p];
    for k in 0..p {
        let m = x.column(k).sum() / n as f64;
        let s = (x.column(k).iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
        mean_x[k] = m;
        sd_x[k] = s;
        for i in 0..n {
            xs[(i, k)] = if s > 0.0 { (x[(i, k)] - m) / s } else { 0.0 };
        }
    }
    let mean_y = y.sum() / n as f64;
    Standardized { x: xs, y: y.add_scalar(-mean_y), mean_x, sd_x, mean_y }
}

fn soft(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Coordinate descent on standardized data, minimizing
/// ‖y − Xb‖²/(2n) + λ‖b‖₁, warm-started from `b`.
fn descend(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, b: &mut DVector<f64>, cfg: &LassoConfig) {
    let (n, p) = x.shape();
    let nf = n as f64;
    let col_sq: Vec<f64> = (0..p).map(|k| x.column(k).norm_squared() / nf).collect();
    let mut r = y - x * &*b;
    for _ in 0..cfg.max_sweeps {
        let mut max_change: f64 = 0.0;
        for k in 0..p {
            if col_sq[k] == 0.0 {
                continue;
            }
            let old = b[k];
            let rho = x.column(k).dot(&r) / nf + col_sq[k] * old;
            let new = soft(rho, lambda) / col_sq[k];
            if new != old {
                r.axpy(old - new, &x.column(k), 1.0);
                b[k] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        if max_change < cfg.tol {
            break;
        }
    }
}

fn lambda_path(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &LassoConfig) -> Vec<f64> {
    let n = x.nrows() as f64;
    let lmax = (x.transpose() * y).amax() / n;
    if !(lmax > 0.0) {
        return vec![0.0];
    }
    let k = cfg.n_lambda.max(2);
    (0..k).map(|i| lmax * cfg.lambda_min_ratio.powf(i as f64 / (k - 1) as f64)).collect()
}

fn unstandardize(s: &Standardized, b: &DVector<f64>, lambda: f64, cv_mse: Option<f64>) -> LassoFit {
    let coef: Vec<f64> = (0..b.len()).map(|k| if s.sd_x[k] > 0.0 { b[k] / s.sd_x[k] } else { 0.0 }).collect();
    let intercept = s.mean_y - coef.iter().zip(&s.mean_x).map(|(c, m)| c * m).sum::<f64>();
    LassoFit { intercept, coef, lambda, cv_mse }
}

fn validate(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} rows but {} targets", x.nrows(), y.len())));
    }
    if x.nrows() < 2 {
        return Err(Error::Data("at least two samples are required".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression data".into()));
    }
    Ok(())
}

/// Lasso at a fixed penalty (λ = 0 gives least squares).
pub fn lasso_fit(x: &DMatrix<f64>, y: &DVector<f64>, lambda: f64, cfg: &LassoConfig) -> Result<LassoFit> {
    validate(x, y)?;
    let s = standardize(x, y);
    let mut b = DVector::zeros(x.ncols());
    if lambda > 0.0 {
        // follow the path down to λ for stability
        for l in lambda_path(&s.x, &s.y, cfg).into_iter().filter(|l| *l > lambda) {
            descend(&s.x, &s.y, l, &mut b, cfg);
        }
    }
    descend(&s.x, &s.y, lambda, &mut b, cfg);
    Ok(unstandardize(&s, &b, lambda, None))
}

/// Penalty chosen by k-fold CV (folds assigned by row index modulo k).
pub fn lasso_cv(x: &DMatrix<f64>, y: &DVector<f64>, cfg: &LassoConfig) -> Result<LassoFit> {
    validate(x, y)?;
    let n = x.nrows();
    let full = standardize(x, y);
    let path = lambda_path(&full.x, &full.y, cfg);
    if path == [0.0] {
        // constant targets (or no informative columns)
        return Ok(LassoFit { intercept: full.mean_y, coef: vec![0.0; x.ncols()], lambda: 0.0, cv_mse: Some(0.0) });
    }
    let folds = cfg.folds.clamp(2, n);
    let mut errs = vec![vec![0.0; folds]; path.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != f).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % folds == f).collect();
        let xt = x.select_rows(&train);
        let yt = y.select_rows(&train);
        let s = standardize(&xt, &yt);
        let mut b = DVector::zeros(x.ncols());
        for (li, &l) in path.iter().enumerate() {
            descend(&s.x, &s.y, l, &mut b, cfg);
            let fit = unstandardize(&s, &b, l, None);
            let mse = test
                .iter()
                .map(|&i| (y[i] - fit.predict_row(x.row(i).transpose().as_slice())).powi(2))
                .sum::<f64>()
                / test.len() as f64;
            errs[li][f] = mse;
        }
    }
    let stats: Vec<(f64, f64)> = errs
        .iter()
        .map(|e| {
            let m = e.iter().sum::<f64>() / folds as f64;
            let v = e.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (folds as f64 - 1.0);
            (m, (v / folds as f64).sqrt())
        })
        .collect();
    let best = (0..path.len()).min_by(|&a, &b| stats[a].0.total_cmp(&stats[b].0)).expect("non-empty path");
    let chosen = if cfg.one_se {
        let limit = stats[best].0 + stats[best].1;
        (0..=best).find(|&i| stats[i].0 <= limit).unwrap_or(best)
    } else {
        best
    };
    let mut b = DVector::zeros(x.ncols());
    for &l in &path[..=chosen] {
        descend(&full.x, &full.y, l, &mut b, cfg);
    }
    Ok(unstandardize(&full, &b, path[chosen], Some(stats[chosen].0)))
}
