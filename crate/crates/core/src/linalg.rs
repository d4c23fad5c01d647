//! Dense linear-algebra helpers shared by the GP and calibration code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// First relative jitter tried when a plain Cholesky fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest relative jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of a covariance matrix, with the diagonal stabilization
/// (absolute, already scaled by the mean diagonal) that was needed to obtain it.
#[derive(Clone, Debug)]
pub struct CholFactor {
    chol: Option<Cholesky<f64, Dyn>>,
    dim: usize,
    jitter: f64,
}

impl CholFactor {
    /// Factorizes `a`, escalating diagonal jitter from `JITTER_START` to
    /// `JITTER_MAX` (relative to the mean diagonal) by factors of ten.
    pub fn new(a: DMatrix<f64>, block: &str) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{block}: covariance is {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        let dim = a.nrows();
        if dim == 0 {
            return Ok(Self { chol: None, dim, jitter: 0.0 });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(block.to_string()));
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            return Ok(Self { chol: Some(chol), dim, jitter: 0.0 });
        }
        let mean_diag = a.diagonal().mean().abs().max(f64::MIN_POSITIVE);
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            let jitter = rel * mean_diag;
            let mut b = a.clone();
            for i in 0..dim {
                b[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(b) {
                return Ok(Self { chol: Some(chol), dim, jitter });
            }
            rel *= 10.0;
        }
        Err(Error::Factorization { block: block.to_string(), jitter: JITTER_MAX * mean_diag })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Absolute jitter added to the diagonal (0 if none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// log |A|
    pub fn log_det(&self) -> f64 {
        match &self.chol {
            None => 0.0,
            Some(c) => 2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            None => DVector::zeros(0),
            Some(c) => c.solve(b),
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            None => DMatrix::zeros(0, b.ncols()),
            Some(c) => c.solve(b),
        }
    }

    /// bᵀ A⁻¹ b via one triangular solve.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        match &self.chol {
            None => 0.0,
            Some(c) => {
                let v = c
                    .l_dirty()
                    .solve_lower_triangular(b)
                    .expect("Cholesky factor has a positive diagonal");
                v.norm_squared()
            }
        }
    }

    /// L⁻¹ B, so that column norms² of the result are bᵀ A⁻¹ b.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            None => DMatrix::zeros(0, b.ncols()),
            Some(c) => c
                .l_dirty()
                .solve_lower_triangular(b)
                .expect("Cholesky factor has a positive diagonal"),
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.chol {
            None => DMatrix::zeros(0, 0),
            Some(c) => c.inverse(),
        }
    }

    /// Lower-triangular factor L with A = L Lᵀ.
    pub fn lower(&self) -> DMatrix<f64> {
        match &self.chol {
            None => DMatrix::zeros(0, 0),
            Some(c) => c.l(),
        }
    }
}

/// Gaussian log density up to the −n/2·log 2π constant:
/// −½ log|Σ| − ½ dᵀ Σ⁻¹ d.
pub fn gaussian_log_density(d: &DVector<f64>, factor: &CholFactor) -> f64 {
    -0.5 * factor.log_det() - 0.5 * factor.quad_form(d)
}

/// Ridge-regularized least squares: argmin ‖y − B c‖² + ridge ‖c‖².
/// Returns the coefficients and diag((BᵀB + ridge I)⁻¹).
pub fn ridge_solve(b: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<(DVector<f64>, DVector<f64>)> {
    let k = b.ncols();
    if k == 0 {
        return Ok((DVector::zeros(0), DVector::zeros(0)));
    }
    let mut gram = b.transpose() * b;
    for i in 0..k {
        gram[(i, i)] += ridge;
    }
    let rhs = b.transpose() * y;
    let chol = Cholesky::new(gram).ok_or_else(|| {
        Error::Degenerate("combined basis is rank deficient after ridge regularization".into())
    })?;
    let coef = chol.solve(&rhs);
    let inv_diag = chol.inverse().diagonal();
    Ok((coef, inv_diag))
}
