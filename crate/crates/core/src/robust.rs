//! GP predictions marginalized over Gaussian input uncertainty x* ~ N(u, S).
//!
//! Works in the unit-scaled input space of the GP. With Λ = diag(β):
//!
//! l_j  = (1/λ_z) |I + 2Λ½SΛ½|^{-½} exp(−(u−x_j)ᵀ Λ½(I + 2Λ½SΛ½)⁻¹Λ½ (u−x_j))
//! L_ij = (1/λ_z²) exp(−½(x_i−x_j)ᵀΛ(x_i−x_j)) |I + 4Λ½SΛ½|^{-½}
//!        · exp(−2(u−x_d)ᵀ Λ½(I + 4Λ½SΛ½)⁻¹Λ½ (u−x_d)),  x_d = (x_i+x_j)/2
//!
//! m = lᵀΨ and v = 1/λ_z − Tr((Σ⁻¹ − ΨΨᵀ)L) − (lᵀΨ)², with Ψ = Σ⁻¹y.
//! Writing the kernel through Λ½ keeps inactive dimensions (β = 0) finite.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{clamp_variance, GaussianProcess};
use crate::surrogate::Surrogate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianInput {
    pub u: Vec<f64>,
    pub s: DMatrix<f64>,
}

impl GaussianInput {
    pub fn new(u: Vec<f64>, s: DMatrix<f64>) -> Result<Self> {
        let g = Self { u, s };
        g.validate()?;
        Ok(g)
    }

    pub fn diagonal(u: Vec<f64>, var: &[f64]) -> Result<Self> {
        Self::new(u, DMatrix::from_diagonal(&DVector::from_column_slice(var)))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.u.len();
        if self.s.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!("S is {}x{}, mean has {d} entries", self.s.nrows(), self.s.ncols())));
        }
        if self.u.iter().chain(self.s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian input".into()));
        }
        let scale = self.s.amax().max(1.0);
        if (&self.s - self.s.transpose()).amax() > 1e-10 * scale {
            return Err(Error::InvalidArgument("S must be symmetric".into()));
        }
        if d > 0 && SymmetricEigen::new(self.s.clone()).eigenvalues.min() < -1e-10 * scale {
            return Err(Error::InvalidArgument("S must be positive semidefinite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustMoments {
    pub m: f64,
    pub v: f64,
}

/// Objective built from the moments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum RobustForm {
    Mean,
    MeanPlusKSd { k: f64 },
}

impl RobustForm {
    pub fn apply(&self, mo: RobustMoments) -> f64 {
        match *self {
            RobustForm::Mean => mo.m,
            RobustForm::MeanPlusKSd { k } => mo.m + k * mo.v.max(0.0).sqrt(),
        }
    }
}

/// Precomputed Σ⁻¹ and Ψ for repeated moment evaluations on one GP.
#[derive(Clone, Debug)]
pub struct RobustPredictor<'a> {
    gp: &'a GaussianProcess,
    sigma_inv: DMatrix<f64>,
    sqrt_beta: Vec<f64>,
}

/// Λ½ M Λ½ for diagonal Λ½.
fn sandwich(sqrt_beta: &[f64], s: &DMatrix<f64>, factor: f64) -> DMatrix<f64> {
    let d = sqrt_beta.len();
    DMatrix::from_fn(d, d, |i, j| f64::from(u8::from(i == j)) + factor * sqrt_beta[i] * s[(i, j)] * sqrt_beta[j])
}

impl<'a> RobustPredictor<'a> {
    pub fn new(gp: &'a GaussianProcess) -> Self {
        Self { sigma_inv: gp.factor().inverse(), sqrt_beta: gp.params().beta.iter().map(|b| b.max(0.0).sqrt()).collect(), gp }
    }

    fn check(&self, input: &GaussianInput) -> Result<()> {
        input.validate()?;
        if input.u.len() != self.gp.dim() {
            return Err(Error::DimensionMismatch(format!("input has {} dims, GP has {}", input.u.len(), self.gp.dim())));
        }
        Ok(())
    }

    /// (|I + c Λ½SΛ½|^{-½}, (I + c Λ½SΛ½)⁻¹)
    fn inflation(&self, s: &DMatrix<f64>, c: f64) -> Result<(f64, DMatrix<f64>)> {
        let a = sandwich(&self.sqrt_beta, s, c);
        let chol = a.cholesky().ok_or_else(|| Error::Degenerate("2S + B is singular".into()))?;
        let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(((-0.5 * log_det).exp(), chol.inverse()))
    }

    fn quad(&self, m: &DMatrix<f64>, r: &[f64]) -> f64 {
        let d = r.len();
        let w: Vec<f64> = (0..d).map(|k| self.sqrt_beta[k] * r[k]).collect();
        let mut q = 0.0;
        for i in 0..d {
            for j in 0..d {
                q += w[i] * m[(i, j)] * w[j];
            }
        }
        q
    }

    pub fn l_vector(&self, input: &GaussianInput) -> Result<DVector<f64>> {
        self.check(input)?;
        let (det, inv) = self.inflation(&input.s, 2.0)?;
        let var = self.gp.params().variance();
        Ok(DVector::from_iterator(
            self.gp.n_train(),
            (0..self.gp.n_train()).map(|j| {
                let r: Vec<f64> = input.u.iter().zip(self.gp.train_row(j)).map(|(a, b)| a - b).collect();
                var * det * (-self.quad(&inv, &r)).exp()
            }),
        ))
    }

    pub fn l_matrix(&self, input: &GaussianInput) -> Result<DMatrix<f64>> {
        self.check(input)?;
        let (det, inv) = self.inflation(&input.s, 4.0)?;
        let var = self.gp.params().variance();
        let n = self.gp.n_train();
        let beta = &self.gp.params().beta;
        let mut l = DMatrix::zeros(n, n);
        for i in 0..n {
            let xi = self.gp.train_row(i);
            for j in 0..=i {
                let xj = self.gp.train_row(j);
                let mut sep = 0.0;
                for k in 0..xi.len() {
                    sep += beta[k] * (xi[k] - xj[k]).powi(2);
                }
                let r: Vec<f64> = (0..xi.len()).map(|k| input.u[k] - 0.5 * (xi[k] + xj[k])).collect();
                let v = var * var * (-0.5 * sep).exp() * det * (-2.0 * self.quad(&inv, &r)).exp();
                l[(i, j)] = v;
                l[(j, i)] = v;
            }
        }
        Ok(l)
    }

    pub fn mean(&self, input: &GaussianInput) -> Result<f64> {
        Ok(self.l_vector(input)?.dot(self.gp.alpha()))
    }

    pub fn variance(&self, input: &GaussianInput) -> Result<f64> {
        Ok(self.moments(input)?.v)
    }

    pub fn moments(&self, input: &GaussianInput) -> Result<RobustMoments> {
        let l = self.l_vector(input)?;
        let big_l = self.l_matrix(input)?;
        let psi = self.gp.alpha();
        let m = l.dot(psi);
        let trace = self.sigma_inv.component_mul(&big_l).sum();
        let var0 = self.gp.params().variance();
        let v = var0 - trace + psi.dot(&(&big_l * psi)) - m * m;
        Ok(RobustMoments { m, v: clamp_variance(v, var0) })
    }
}

pub fn robust_mean(gp: &GaussianProcess, input: &GaussianInput) -> Result<f64> {
    RobustPredictor::new(gp).mean(input)
}

pub fn robust_variance(gp: &GaussianProcess, input: &GaussianInput) -> Result<f64> {
    RobustPredictor::new(gp).variance(input)
}

pub fn robust_objective(gp: &GaussianProcess, u: &[f64], s: &DMatrix<f64>, form: RobustForm) -> Result<f64> {
    let input = GaussianInput::new(u.to_vec(), s.clone())?;
    Ok(form.apply(RobustPredictor::new(gp).moments(&input)?))
}

/// Moments of a surrogate in physical output units, pooled over its
/// ensemble members. `input` lives in the unit-scaled space.
pub fn surrogate_moments(sur: &Surrogate, input: &GaussianInput) -> Result<RobustMoments> {
    let members = sur.members();
    let mo: Vec<RobustMoments> = members.iter().map(|g| RobustPredictor::new(g).moments(input)).collect::<Result<_>>()?;
    let n = mo.len() as f64;
    let m = mo.iter().map(|x| x.m).sum::<f64>() / n;
    let v = mo.iter().map(|x| x.v + (x.m - m).powi(2)).sum::<f64>() / n;
    let sd = sur.output_scale.sd;
    Ok(RobustMoments { m: sur.output_scale.inverse(m), v: v * sd * sd })
}

/// Monte-Carlo estimate of the marginalized moments with standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McMoments {
    pub m: f64,
    pub v: f64,
    pub m_se: f64,
    pub v_se: f64,
    /// E_x[σ²(x)] and its standard error.
    pub e_var: f64,
    pub e_var_se: f64,
}

/// Matrix A with A Aᵀ = S, valid for semidefinite S.
pub fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(s.clone());
    let mut a = e.eigenvectors.clone();
    for (k, lam) in e.eigenvalues.iter().enumerate() {
        let r = lam.max(0.0).sqrt();
        a.column_mut(k).scale_mut(r);
    }
    a
}

/// Evaluates `f` (returning predictive mean and latent variance) at
/// `n` draws of x* ~ N(u, S).
pub fn mc_moments<R: Rng, F: Fn(&[f64]) -> (f64, f64)>(f: F, input: &GaussianInput, n: usize, rng: &mut R) -> McMoments {
    let d = input.u.len();
    let a = psd_sqrt(&input.s);
    let mut means = Vec::with_capacity(n);
    let mut vars = Vec::with_capacity(n);
    let mut x = vec![0.0; d];
    let mut z = DVector::zeros(d);
    for _ in 0..n {
        for k in 0..d {
            z[k] = rng.sample(StandardNormal);
        }
        let shift = &a * &z;
        for k in 0..d {
            x[k] = input.u[k] + shift[k];
        }
        let (m, v) = f(&x);
        means.push(m);
        vars.push(v);
    }
    let nf = n as f64;
    let m = crate::stats::mean(&means);
    let e_var = crate::stats::mean(&vars);
    let var_m = crate::stats::variance(&means);
    let total: Vec<f64> = means.iter().zip(&vars).map(|(a, b)| b + (a - m).powi(2)).collect();
    McMoments {
        m,
        v: e_var + var_m,
        m_se: (var_m / nf).sqrt(),
        v_se: (crate::stats::variance(&total) / nf).sqrt(),
        e_var,
        e_var_se: (crate::stats::variance(&vars) / nf).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::KernelParams;
    use crate::seed::rng_for;

    fn random_gp(seed: u64, d: usize, n: usize, noise: bool) -> GaussianProcess {
        let mut rng = rng_for(seed, "robust-gp");
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin() + if d > 1 { x[(i, 1)] } else { 0.0 });
        let beta: Vec<f64> = (0..d).map(|_| 1.0 + 8.0 * rng.random::<f64>()).collect();
        let lambda_s = noise.then_some(200.0);
        GaussianProcess::new(x, y, KernelParams::new(0.5 + rng.random::<f64>(), lambda_s, beta).unwrap()).unwrap()
    }

    #[test]
    fn zero_covariance_matches_prediction() {
        let gp = random_gp(1, 2, 12, true);
        let p = RobustPredictor::new(&gp);
        for u in [[0.2, 0.7], [0.5, 0.5], [0.9, 0.1]] {
            let mo = p.moments(&GaussianInput::new(u.to_vec(), DMatrix::zeros(2, 2)).unwrap()).unwrap();
            let (m, v) = gp.predict_mean_var(&u);
            assert!((mo.m - m).abs() < 1e-10);
            assert!((mo.v - v).abs() < 1e-8, "{} vs {v}", mo.v);
        }
    }

    #[test]
    fn constant_data_has_zero_mean() {
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64 / 5.0);
        let gp = GaussianProcess::new(x, DVector::zeros(6), KernelParams::new(1.0, Some(100.0), vec![3.0]).unwrap()).unwrap();
        for s in [0.0, 0.01, 1.0] {
            let m = robust_mean(&gp, &GaussianInput::diagonal(vec![0.3], &[s]).unwrap()).unwrap();
            assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn noise_free_training_point_has_no_variance() {
        let gp = random_gp(2, 1, 6, false);
        let u = gp.train_row(3).to_vec();
        let v = robust_variance(&gp, &GaussianInput::diagonal(u, &[0.0]).unwrap()).unwrap();
        assert!(v < 1e-6, "{v}");
    }

    #[test]
    fn shrinking_covariance_converges_to_prediction() {
        let gp = random_gp(3, 2, 10, true);
        let p = RobustPredictor::new(&gp);
        let u = vec![0.4, 0.6];
        let (m0, v0) = gp.predict_mean_var(&u);
        let mut prev = (f64::INFINITY, f64::INFINITY);
        for e in (0..=12).map(|k| 10f64.powi(-k)) {
            let mo = p.moments(&GaussianInput::diagonal(u.clone(), &[e * 0.01, e * 0.02]).unwrap()).unwrap();
            let gap = ((mo.m - m0).abs(), (mo.v - v0).abs());
            assert!(gap.0 <= prev.0 + 1e-13 && gap.1 <= prev.1 + 1e-13, "{gap:?} after {prev:?}");
            prev = gap;
        }
        assert!(prev.0 < 1e-8 && prev.1 < 1e-8);
    }

    #[test]
    fn one_dimensional_monte_carlo_oracle() {
        let gp = random_gp(4, 1, 8, true);
        let input = GaussianInput::diagonal(vec![0.45], &[0.01]).unwrap();
        let mo = RobustPredictor::new(&gp).moments(&input).unwrap();
        let mut rng = rng_for(4, "mc");
        let mc = mc_moments(|x| gp.predict_mean_var(x), &input, 1_000_000, &mut rng);
        assert!((mo.m - mc.m).abs() < 3.0 * mc.m_se, "{} vs {} ± {}", mo.m, mc.m, mc.m_se);
        assert!((mo.v - mc.v).abs() < 3.0 * mc.v_se, "{} vs {} ± {}", mo.v, mc.v, mc.v_se);
        assert!(mo.v >= mc.e_var - 4.0 * mc.e_var_se);
    }

    #[test]
    fn random_gps_agree_with_monte_carlo() {
        let mut hits = 0;
        for seed in 0..20u64 {
            let d = 1 + (seed % 2) as usize;
            let gp = random_gp(100 + seed, d, 7, seed % 3 != 0);
            let mut rng = rng_for(seed, "mc-input");
            let u: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let var: Vec<f64> = (0..d).map(|_| 0.001 + 0.05 * rng.random::<f64>()).collect();
            let mut s = DMatrix::from_diagonal(&DVector::from_vec(var.clone()));
            if d == 2 {
                let c = 0.5 * (var[0] * var[1]).sqrt();
                s[(0, 1)] = c;
                s[(1, 0)] = c;
            }
            let input = GaussianInput::new(u, s).unwrap();
            let mo = RobustPredictor::new(&gp).moments(&input).unwrap();
            let mc = mc_moments(|x| gp.predict_mean_var(x), &input, 1_000_000, &mut rng);
            let ok = (mo.m - mc.m).abs() < 4.0 * mc.m_se && (mo.v - mc.v).abs() < 4.0 * mc.v_se;
            assert!(mo.v >= mc.e_var - 4.0 * mc.e_var_se);
            hits += usize::from(ok);
        }
        assert!(hits >= 19, "{hits}/20");
    }

    #[test]
    fn inactive_dimension_is_ignored() {
        let mut rng = rng_for(5, "inactive");
        let x = DMatrix::from_fn(8, 2, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(8, |i, _| x[(i, 0)].powi(2));
        let two = GaussianProcess::new(x.clone(), y.clone(), KernelParams::new(1.0, Some(1e3), vec![4.0, 0.0]).unwrap()).unwrap();
        let one = GaussianProcess::new(x.columns(0, 1).into_owned(), y, KernelParams::new(1.0, Some(1e3), vec![4.0]).unwrap()).unwrap();
        let a = RobustPredictor::new(&two).moments(&GaussianInput::diagonal(vec![0.3, 0.8], &[0.02, 0.3]).unwrap()).unwrap();
        let b = RobustPredictor::new(&one).moments(&GaussianInput::diagonal(vec![0.3], &[0.02]).unwrap()).unwrap();
        assert!((a.m - b.m).abs() < 1e-10 && (a.v - b.v).abs() < 1e-10);
    }

    #[test]
    fn objective_forms_compose() {
        let gp = random_gp(6, 2, 9, true);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.01, 0.02]));
        let u = [0.3, 0.4];
        let mo = RobustPredictor::new(&gp).moments(&GaussianInput::new(u.to_vec(), s.clone()).unwrap()).unwrap();
        assert_eq!(robust_objective(&gp, &u, &s, RobustForm::Mean).unwrap(), mo.m);
        assert_eq!(robust_objective(&gp, &u, &s, RobustForm::MeanPlusKSd { k: 0.0 }).unwrap(), mo.m);
        let k2 = robust_objective(&gp, &u, &s, RobustForm::MeanPlusKSd { k: 2.0 }).unwrap();
        assert!((k2 - (mo.m + 2.0 * mo.v.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(GaussianInput::new(vec![0.0, 0.0], DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(GaussianInput::new(vec![0.0], DMatrix::zeros(2, 2)).is_err());
        let gp = random_gp(7, 2, 5, true);
        assert!(robust_mean(&gp, &GaussianInput::diagonal(vec![0.1], &[0.1]).unwrap()).is_err());
    }
}
