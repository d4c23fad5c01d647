//! Squared-exponential Gaussian process in precision parameterization.
//!
//! The kernel is
//!
//! ```text
//! k(x, x') = (1/λ_z) · exp(−Σ_k β_k (x_k − x'_k)²)  [+ 1/λ_s when x ≡ x']
//! ```
//!
//! with one β per input dimension. The nugget is only ever added on the
//! diagonal of a square self-block; rectangular cross-blocks never carry it.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_log_density, CholFactor};

/// Precision/range parameters of one GP block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// Marginal precision; the process variance is 1/λ_z.
    pub lambda_z: f64,
    /// Nugget precision. `None` means noise-free.
    pub lambda_s: Option<f64>,
    /// Per-dimension inverse squared length-scales.
    pub beta: Vec<f64>,
}

impl KernelParams {
    pub fn new(lambda_z: f64, lambda_s: Option<f64>, beta: Vec<f64>) -> Result<Self> {
        let p = Self { lambda_z, lambda_s, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn noise_free(lambda_z: f64, beta: Vec<f64>) -> Result<Self> {
        Self::new(lambda_z, None, beta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_z > 0.0 && self.lambda_z.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda_z must be positive, got {}", self.lambda_z)));
        }
        if let Some(s) = self.lambda_s {
            if !(s > 0.0) || s.is_nan() {
                return Err(Error::InvalidArgument(format!("lambda_s must be positive, got {s}")));
            }
        }
        if let Some(b) = self.beta.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return Err(Error::InvalidArgument(format!("beta components must be finite and >= 0, got {b}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// 1/λ_z
    pub fn variance(&self) -> f64 {
        1.0 / self.lambda_z
    }

    /// 1/λ_s, or 0 when noise-free.
    pub fn nugget(&self) -> f64 {
        self.lambda_s.map_or(0.0, |s| 1.0 / s)
    }

    /// Prior variance of a single test point, 1/λ_z + 1/λ_s.
    pub fn self_variance(&self) -> f64 {
        self.variance() + self.nugget()
    }
}

/// β ↔ ρ transform used by the sampler: ρ = exp(−β/4).
pub fn beta_from_rho(rho: f64) -> f64 {
    -4.0 * rho.ln()
}

pub fn rho_from_beta(beta: f64) -> f64 {
    (-beta / 4.0).exp()
}

/// Whether the nugget goes on the diagonal of a covariance block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NuggetPolicy {
    /// Square self-block: 1/λ_s on the diagonal.
    SelfBlock,
    /// Cross-block or latent process: no nugget.
    None,
}

/// An assembled covariance block and the jitter that factorizing it needed.
#[derive(Clone, Debug)]
pub struct CovMatrix {
    pub entries: DMatrix<f64>,
    pub jitter_used: f64,
}

impl CovMatrix {
    pub fn new(entries: DMatrix<f64>) -> Self {
        Self { entries, jitter_used: 0.0 }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Cholesky-factorizes the block, recording any jitter.
    pub fn factor(&mut self, block: &str) -> Result<CholFactor> {
        let f = CholFactor::new(self.entries.clone(), block)?;
        self.jitter_used = f.jitter();
        Ok(f)
    }
}

/// Predictive distribution at a set of test points (standardized space).
#[derive(Clone, Debug)]
pub struct GPPredictive {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GPPredictive {
    pub fn variance(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }
}

fn check_point(x: &[f64], params: &KernelParams) -> Result<()> {
    if x.len() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates, kernel has {} length-scales",
            x.len(),
            params.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel input".into()));
    }
    Ok(())
}

#[inline]
pub(crate) fn sq_exp(x1: &[f64], x2: &[f64], beta: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((a, b), w) in x1.iter().zip(x2).zip(beta) {
        let d = a - b;
        s += w * d * d;
    }
    (-s).exp()
}

/// Covariance between two points. The nugget is added only when
/// `include_nugget` is set and the points are bitwise identical.
pub fn kernel_eval(x1: &[f64], x2: &[f64], params: &KernelParams, include_nugget: bool) -> Result<f64> {
    check_point(x1, params)?;
    check_point(x2, params)?;
    let mut k = params.variance() * sq_exp(x1, x2, &params.beta);
    if include_nugget && x1.iter().zip(x2).all(|(a, b)| a.to_bits() == b.to_bits()) {
        k += params.nugget();
    }
    Ok(k)
}

fn rows_of(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

/// Entrywise covariance between the rows of `x1` and `x2`.
pub fn build_cov(x1: &DMatrix<f64>, x2: &DMatrix<f64>, params: &KernelParams, nugget: NuggetPolicy) -> Result<CovMatrix> {
    if x1.ncols() != params.dim() || x2.ncols() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs have {} and {} columns, kernel has {} length-scales",
            x1.ncols(),
            x2.ncols(),
            params.dim()
        )));
    }
    if nugget == NuggetPolicy::SelfBlock && x1.nrows() != x2.nrows() {
        return Err(Error::DimensionMismatch("self-block nugget requested for a rectangular block".into()));
    }
    let r1 = rows_of(x1);
    let r2 = rows_of(x2);
    let var = params.variance();
    let mut k = DMatrix::from_fn(r1.len(), r2.len(), |i, j| var * sq_exp(&r1[i], &r2[j], &params.beta));
    if nugget == NuggetPolicy::SelfBlock {
        let s = params.nugget();
        for i in 0..r1.len() {
            k[(i, i)] += s;
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance block".into()));
    }
    Ok(CovMatrix::new(k))
}

/// −½ log|Σ| − ½ dᵀΣ⁻¹d.
pub fn log_likelihood(d: &DVector<f64>, sigma: &mut CovMatrix) -> Result<f64> {
    if d.len() != sigma.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has length {}, covariance is {}x{}",
            d.len(),
            sigma.dim(),
            sigma.dim()
        )));
    }
    let f = sigma.factor("covariance")?;
    Ok(gaussian_log_density(d, &f))
}

/// GP conditioned on training data.
#[derive(Clone, Debug)]
pub struct GaussianProcess {
    x: DMatrix<f64>,
    rows: Vec<f64>,
    y: DVector<f64>,
    params: KernelParams,
    factor: CholFactor,
    alpha: DVector<f64>,
}

impl GaussianProcess {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>, params: KernelParams) -> Result<Self> {
        params.validate()?;
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} inputs but {} targets", x.nrows(), y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training targets".into()));
        }
        let mut cov = build_cov(&x, &x, &params, NuggetPolicy::SelfBlock)?;
        let factor = cov.factor("training covariance")?;
        let alpha = factor.solve(&y);
        let rows = rows_of(&x).concat();
        Ok(Self { x, rows, y, params, factor, alpha })
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn train_row(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.rows[j * d..(j + 1) * d]
    }

    /// Ψ = Σ⁻¹ y
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn log_likelihood(&self) -> f64 {
        gaussian_log_density(&self.y, &self.factor)
    }

    /// Cross-covariances k(x, x_j) for every training point (no nugget).
    pub fn cross_cov(&self, x: &[f64]) -> DVector<f64> {
        let var = self.params.variance();
        DVector::from_iterator(self.n_train(), (0..self.n_train()).map(|j| var * sq_exp(x, self.train_row(j), &self.params.beta)))
    }

    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        let var = self.params.variance();
        let beta = &self.params.beta;
        let mut s = 0.0;
        for j in 0..self.n_train() {
            s += self.alpha[j] * sq_exp(x, self.train_row(j), beta);
        }
        var * s
    }

    /// Mean and latent variance at one point. Add [`KernelParams::nugget`]
    /// for the variance of a new noisy observation.
    pub fn predict_mean_var(&self, x: &[f64]) -> (f64, f64) {
        let k = self.cross_cov(x);
        let mean = k.dot(&self.alpha);
        let var = self.params.variance() - self.factor.quad_form(&k);
        (mean, clamp_variance(var, self.params.variance()))
    }

    pub fn predict(&self, xtest: &DMatrix<f64>) -> Result<GPPredictive> {
        if xtest.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "test points have {} columns, GP has {}",
                xtest.ncols(),
                self.dim()
            )));
        }
        let kx = build_cov(xtest, &self.x, &self.params, NuggetPolicy::None)?.entries;
        let kxx = build_cov(xtest, xtest, &self.params, NuggetPolicy::None)?.entries;
        let mean = &kx * &self.alpha;
        let v = self.factor.solve_mat(&kx.transpose());
        let mut covariance = kxx - &kx * v;
        covariance = (&covariance + covariance.transpose()) * 0.5;
        let scale = self.params.variance();
        for i in 0..covariance.nrows() {
            covariance[(i, i)] = clamp_variance(covariance[(i, i)], scale);
        }
        Ok(GPPredictive { mean, covariance })
    }
}

/// Clamps small negative variances from cancellation to zero.
pub(crate) fn clamp_variance(v: f64, scale: f64) -> f64 {
    if v >= 0.0 {
        return v;
    }
    if v < -1e-8 * scale.max(1.0) {
        warn!("predictive variance {v:e} clamped to 0");
    }
    0.0
}

/// mean = Σ(X*,X)Σ(X,X)⁻¹y, covariance = Σ(X*,X*) − Σ(X*,X)Σ(X,X)⁻¹Σ(X,X*).
/// Σ(X,X) carries the nugget; the test block Σ(X*,X*) does not, so the
/// result is the posterior of the latent process.
pub fn gp_predict(
    xtrain: &DMatrix<f64>,
    ytrain: &DVector<f64>,
    xtest: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<GPPredictive> {
    GaussianProcess::new(xtrain.clone(), ytrain.clone(), params.clone())?.predict(xtest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn kernel_examples() {
        let p = KernelParams::noise_free(1.0, vec![3.0]).unwrap();
        assert_eq!(kernel_eval(&[0.4], &[0.4], &p, true).unwrap(), 1.0);
        let p = KernelParams::noise_free(2.0, vec![0.0]).unwrap();
        assert_eq!(kernel_eval(&[0.0], &[1.0], &p, false).unwrap(), 0.5);
        let p = KernelParams::noise_free(1.0, vec![1.0]).unwrap();
        let k = kernel_eval(&[0.0], &[1.0], &p, false).unwrap();
        assert!((k - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn kernel_rejects_bad_input() {
        let p = KernelParams::noise_free(1.0, vec![1.0, 1.0]).unwrap();
        assert!(matches!(kernel_eval(&[0.0], &[1.0, 0.0], &p, false), Err(Error::DimensionMismatch(_))));
        assert!(matches!(kernel_eval(&[f64::NAN, 0.0], &[1.0, 0.0], &p, false), Err(Error::NonFinite(_))));
    }

    #[test]
    fn nugget_only_for_identical_points() {
        let p = KernelParams::new(1.0, Some(10.0), vec![1.0]).unwrap();
        assert!((kernel_eval(&[0.3], &[0.3], &p, true).unwrap() - 1.1).abs() < 1e-15);
        assert!(kernel_eval(&[0.3], &[0.3 + 1e-16], &p, true).unwrap() < 1.0 + 1e-12);
        assert_eq!(kernel_eval(&[0.3], &[0.3], &p, false).unwrap(), 1.0);
    }

    #[test]
    fn build_cov_examples() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let p = KernelParams::noise_free(1.0, vec![0.0]).unwrap();
        let k = build_cov(&x, &x, &p, NuggetPolicy::SelfBlock).unwrap();
        assert_eq!(k.entries, DMatrix::from_element(2, 2, 1.0));

        let x1 = DMatrix::from_row_slice(1, 1, &[0.2]);
        let p = KernelParams::new(1.0, Some(10.0), vec![2.0]).unwrap();
        let k = build_cov(&x1, &x1, &p, NuggetPolicy::SelfBlock).unwrap();
        assert!((k.entries[(0, 0)] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn cross_blocks_carry_no_nugget() {
        let x1 = DMatrix::from_row_slice(2, 1, &[0.0, 0.5]);
        let x2 = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let p = KernelParams::new(1.0, Some(4.0), vec![1.0]).unwrap();
        let k = build_cov(&x1, &x2, &p, NuggetPolicy::None).unwrap();
        assert_eq!(k.entries[(0, 0)], 1.0);
        assert!(build_cov(&x1, &x2, &p, NuggetPolicy::SelfBlock).is_err());
    }

    #[test]
    fn build_cov_matches_double_loop() {
        // independent oracle: explicit formula, not kernel_eval
        let pts = [[0.1, 0.7], [0.4, 0.2], [0.9, 0.95], [0.55, 0.5]];
        let beta = [1.3, 0.4];
        let (lz, ls) = (1.7, 25.0);
        let x = DMatrix::from_fn(4, 2, |i, j| pts[i][j]);
        let p = KernelParams::new(lz, Some(ls), beta.to_vec()).unwrap();
        let k = build_cov(&x, &x, &p, NuggetPolicy::SelfBlock).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let d0 = pts[i][0] - pts[j][0];
                let d1 = pts[i][1] - pts[j][1];
                let mut e = (-(beta[0] * d0 * d0 + beta[1] * d1 * d1)).exp() / lz;
                if i == j {
                    e += 1.0 / ls;
                }
                assert!((k.entries[(i, j)] - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn log_likelihood_examples() {
        let mut id = CovMatrix::new(DMatrix::identity(2, 2));
        let d = DVector::from_vec(vec![1.0, 1.0]);
        assert!((log_likelihood(&d, &mut id).unwrap() + 1.0).abs() < 1e-15);

        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let mut s = CovMatrix::new(a.clone());
        let z = DVector::zeros(2);
        assert!((log_likelihood(&z, &mut s).unwrap() + 0.5 * a.determinant().ln()).abs() < 1e-14);
    }

    #[test]
    fn log_likelihood_matches_dense_oracle() {
        let pts = [0.05, 0.3, 0.48, 0.71, 0.93];
        let x = DMatrix::from_fn(5, 1, |i, _| pts[i]);
        let p = KernelParams::new(0.8, Some(50.0), vec![3.0]).unwrap();
        let mut s = build_cov(&x, &x, &p, NuggetPolicy::SelfBlock).unwrap();
        let d = DVector::from_vec(vec![0.3, -1.2, 0.8, 0.1, -0.4]);
        let dense = s.entries.clone();
        let oracle = -0.5 * dense.determinant().ln() - 0.5 * (d.transpose() * dense.try_inverse().unwrap() * &d)[0];
        assert!((log_likelihood(&d, &mut s).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn predict_interpolates_noise_free() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 0.3, 0.6, 1.0]);
        let y = DVector::from_vec(vec![0.5, -0.2, 1.1, 0.0]);
        let p = KernelParams::noise_free(1.0, vec![5.0]).unwrap();
        let pred = gp_predict(&x, &y, &x, &p).unwrap();
        for i in 0..4 {
            assert!((pred.mean[i] - y[i]).abs() < 1e-8);
            assert!(pred.covariance[(i, i)].abs() < 1e-8);
        }
    }

    #[test]
    fn predict_reverts_to_prior_far_away() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let p = KernelParams::new(2.0, Some(100.0), vec![10.0]).unwrap();
        let far = DMatrix::from_row_slice(1, 1, &[50.0]);
        let pred = gp_predict(&x, &y, &far, &p).unwrap();
        assert!(pred.mean[0].abs() < 1e-12);
        assert!((pred.covariance[(0, 0)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn predict_matches_scalar_oracle() {
        // three training points, one test point; hand-assembled 3x3 solve
        let xs = [0.1, 0.4, 0.8];
        let ys = [0.2, -0.5, 0.9];
        let (lz, ls, b) = (1.5, 40.0, 2.5);
        let kf = |a: f64, c: f64| (-b * (a - c) * (a - c)).exp() / lz;
        let kmat = DMatrix::from_fn(3, 3, |i, j| kf(xs[i], xs[j]) + if i == j { 1.0 / ls } else { 0.0 });
        let inv = kmat.try_inverse().unwrap();
        let t = 0.55;
        let kv = DVector::from_fn(3, |i, _| kf(t, xs[i]));
        let yv = DVector::from_row_slice(&ys);
        let mean = (kv.transpose() * &inv * &yv)[0];
        let var = 1.0 / lz - (kv.transpose() * &inv * &kv)[0];

        let x = DMatrix::from_row_slice(3, 1, &xs);
        let p = KernelParams::new(lz, Some(ls), vec![b]).unwrap();
        let pred = gp_predict(&x, &yv, &DMatrix::from_row_slice(1, 1, &[t]), &p).unwrap();
        assert!((pred.mean[0] - mean).abs() < 1e-12);
        assert!((pred.covariance[(0, 0)] - var).abs() < 1e-12);
        let gp = GaussianProcess::new(x, yv, p).unwrap();
        let (m2, v2) = gp.predict_mean_var(&[t]);
        assert!((m2 - mean).abs() < 1e-12 && (v2 - var).abs() < 1e-12);
        assert!((gp.predict_mean(&[t]) - mean).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kernel_is_stationary(
            a in proptest::collection::vec(-2.0f64..2.0, 3),
            b in proptest::collection::vec(-2.0f64..2.0, 3),
            c in proptest::collection::vec(-5.0f64..5.0, 3),
            beta in proptest::collection::vec(0.0f64..4.0, 3),
        ) {
            let p = KernelParams::noise_free(1.3, beta).unwrap();
            let k0 = kernel_eval(&a, &b, &p, false).unwrap();
            let a2: Vec<f64> = a.iter().zip(&c).map(|(x, s)| x + s).collect();
            let b2: Vec<f64> = b.iter().zip(&c).map(|(x, s)| x + s).collect();
            let k1 = kernel_eval(&a2, &b2, &p, false).unwrap();
            prop_assert!((k0 - k1).abs() < 1e-12);
        }

        #[test]
        fn build_cov_is_permutation_equivariant(
            pts in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 2), 5),
            seed in 0u64..1000,
        ) {
            let n = pts.len();
            let mut perm: Vec<usize> = (0..n).collect();
            // deterministic shuffle from seed
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let x = DMatrix::from_fn(n, 2, |i, j| pts[i][j]);
            let xp = DMatrix::from_fn(n, 2, |i, j| pts[perm[i]][j]);
            let p = KernelParams::new(0.7, Some(30.0), vec![1.1, 2.2]).unwrap();
            let k = build_cov(&x, &x, &p, NuggetPolicy::SelfBlock).unwrap().entries;
            let kp = build_cov(&xp, &xp, &p, NuggetPolicy::SelfBlock).unwrap().entries;
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(kp[(i, j)], k[(perm[i], perm[j])]);
                }
            }
        }

        #[test]
        fn log_likelihood_is_permutation_invariant(
            pts in proptest::collection::vec(0.0f64..1.0, 4),
            d in proptest::collection::vec(-2.0f64..2.0, 4),
        ) {
            let perm = [2usize, 0, 3, 1];
            let x = DMatrix::from_fn(4, 1, |i, _| pts[i]);
            let xp = DMatrix::from_fn(4, 1, |i, _| pts[perm[i]]);
            let p = KernelParams::new(1.0, Some(20.0), vec![3.0]).unwrap();
            let mut s = build_cov(&x, &x, &p, NuggetPolicy::SelfBlock).unwrap();
            let mut sp = build_cov(&xp, &xp, &p, NuggetPolicy::SelfBlock).unwrap();
            let dv = DVector::from_row_slice(&d);
            let dp = DVector::from_fn(4, |i, _| d[perm[i]]);
            let l0 = log_likelihood(&dv, &mut s).unwrap();
            let l1 = log_likelihood(&dp, &mut sp).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9 * (1.0 + l0.abs()));
        }

        #[test]
        fn training_variance_bounded_by_nugget(
            pts in proptest::collection::vec(0.0f64..1.0, 2..8),
            ls in 5.0f64..500.0,
        ) {
            let n = pts.len();
            let x = DMatrix::from_fn(n, 1, |i, _| pts[i]);
            let y = DVector::from_fn(n, |i, _| (3.0 * pts[i]).sin());
            let p = KernelParams::new(1.0, Some(ls), vec![4.0]).unwrap();
            let pred = gp_predict(&x, &y, &x, &p).unwrap();
            for i in 0..n {
                prop_assert!(pred.covariance[(i, i)] <= 1.0 / ls + 1e-8);
            }
        }
    }
}
