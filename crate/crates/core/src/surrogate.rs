//! Stand-alone GP surrogate of a scalar response: input/output scaling,
//! MAP hyperparameter fit, optional posterior hyperparameter draws.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{beta_from_rho, build_cov, rho_from_beta, GaussianProcess, KernelParams, NuggetPolicy};
use crate::linalg::gaussian_log_density;
use crate::mcmc::{run_parallel_chains, LogTarget, McmcConfig, Prior, PriorSpec};
use crate::optimize::{nelder_mead, NelderMeadConfig};

pub const SURROGATE_SCHEMA: u32 = 1;

/// Per-input linear map of [min, max] onto [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputScale {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl InputScale {
    /// Column ranges of `x`; constant columns get a unit range.
    pub fn from_data(x: &DMatrix<f64>) -> Self {
        let mut min = Vec::with_capacity(x.ncols());
        let mut max = Vec::with_capacity(x.ncols());
        for c in x.column_iter() {
            let lo = c.min();
            let mut hi = c.max();
            if hi <= lo {
                hi = lo + 1.0;
            }
            min.push(lo);
            max.push(hi);
        }
        Self { min, max }
    }

    pub fn from_bounds(bounds: &[(f64, f64)]) -> Result<Self> {
        if let Some(b) = bounds.iter().find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(Error::InvalidArgument(format!("bounds must be finite with lower < upper, got {b:?}")));
        }
        Ok(Self { min: bounds.iter().map(|b| b.0).collect(), max: bounds.iter().map(|b| b.1).collect() })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn range(&self, k: usize) -> f64 {
        self.max[k] - self.min[k]
    }

    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(k, v)| (v - self.min[k]) / self.range(k)).collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter().enumerate().map(|(k, v)| self.min[k] + v * self.range(k)).collect()
    }

    pub fn matrix_to_unit(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| (x[(i, k)] - self.min[k]) / self.range(k))
    }

    /// Maps a physical-space covariance into unit-cube units.
    pub fn covariance_to_unit(&self, s: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| s[(i, j)] / (self.range(i) * self.range(j)))
    }
}

/// Affine output standardization y ↦ (y − mean)/sd.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputScale {
    pub mean: f64,
    pub sd: f64,
}

impl OutputScale {
    /// Mean and population standard deviation.
    pub fn from_data(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::Data("no outputs to standardize".into()));
        }
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if !(sd > 1e-300) || !sd.is_finite() {
            return Err(Error::Degenerate("output has zero variance".into()));
        }
        Ok(Self { mean, sd })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, sd: 1.0 }
    }

    pub fn forward(&self, y: f64) -> f64 {
        (y - self.mean) / self.sd
    }

    pub fn inverse(&self, z: f64) -> f64 {
        self.mean + z * self.sd
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub priors: PriorSpec,
    /// Drop the nugget entirely.
    pub noise_free: bool,
    pub max_evals: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { priors: PriorSpec::default(), noise_free: false, max_evals: 1500 }
    }
}

impl FitConfig {
    /// Priors suited to deterministic computer-model outputs: a nugget
    /// precision prior concentrated on tiny residual variance.
    pub fn deterministic() -> Self {
        let priors = PriorSpec { lambda_s: Prior::gamma(2.0, 1e-5), ..PriorSpec::default() };
        Self { priors, ..Self::default() }
    }
}

/// Log posterior of (λ_z, λ_s, ρ) for a zero-mean GP on standardized data.
struct HyperTarget<'a> {
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    priors: &'a PriorSpec,
    noise_free: bool,
}

impl HyperTarget<'_> {
    fn d(&self) -> usize {
        self.x.ncols()
    }

    fn nugget_slot(&self) -> usize {
        if self.noise_free {
            0
        } else {
            1
        }
    }

    /// Layout: [λ_z, (λ_s), ρ_1..ρ_d].
    fn params(&self, v: &[f64]) -> KernelParams {
        let off = 1 + self.nugget_slot();
        KernelParams {
            lambda_z: v[0],
            lambda_s: if self.noise_free { None } else { Some(v[1]) },
            beta: v[off..].iter().map(|r| beta_from_rho(*r)).collect(),
        }
    }

    fn log_lik(&self, p: &KernelParams) -> f64 {
        let Ok(mut cov) = build_cov(self.x, self.x, p, NuggetPolicy::SelfBlock) else {
            return f64::NEG_INFINITY;
        };
        match cov.factor("surrogate covariance") {
            Ok(f) => gaussian_log_density(self.y, &f),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn log_prior(&self, v: &[f64]) -> f64 {
        let mut lp = self.priors.lambda_z.ln_pdf(v[0]);
        if !self.noise_free {
            lp += self.priors.lambda_s.ln_pdf(v[1]);
        }
        lp + v[1 + self.nugget_slot()..].iter().map(|r| self.priors.rho.ln_pdf(*r)).sum::<f64>()
    }
}

impl LogTarget for HyperTarget<'_> {
    fn dim(&self) -> usize {
        1 + self.nugget_slot() + self.d()
    }

    fn param_names(&self) -> Vec<String> {
        let mut n = vec!["lambda_z".to_string()];
        if !self.noise_free {
            n.push("lambda_s".into());
        }
        n.extend((0..self.d()).map(|k| format!("rho_{k}")));
        n
    }

    fn in_support(&self, i: usize, value: f64) -> bool {
        if i <= self.nugget_slot() {
            value > 0.0 && value.is_finite()
        } else {
            value > 0.0 && value < 1.0
        }
    }

    fn initial_width(&self, i: usize, value: f64) -> f64 {
        if i <= self.nugget_slot() {
            0.3 * value
        } else {
            0.1
        }
    }

    fn max_width(&self, i: usize) -> f64 {
        if i <= self.nugget_slot() {
            f64::INFINITY
        } else {
            1.0
        }
    }

    fn term(&self, x: &[f64], _k: usize) -> f64 {
        let lp = self.log_prior(x);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        lp + self.log_lik(&self.params(x))
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// MAP hyperparameters, optimized in (log λ, logit ρ) coordinates with the
/// change-of-variables Jacobian included.
pub fn fit_map(x_unit: &DMatrix<f64>, y_std: &DVector<f64>, cfg: &FitConfig) -> Result<GaussianProcess> {
    cfg.priors.validate()?;
    if x_unit.nrows() != y_std.len() {
        return Err(Error::DimensionMismatch(format!("{} inputs but {} outputs", x_unit.nrows(), y_std.len())));
    }
    if x_unit.nrows() < 2 {
        return Err(Error::Data("at least two training points are required".into()));
    }
    let t = HyperTarget { x: x_unit, y: y_std, priors: &cfg.priors, noise_free: cfg.noise_free };
    let ns = t.nugget_slot();
    let to_natural = |u: &[f64]| -> Vec<f64> {
        u.iter().enumerate().map(|(i, v)| if i <= ns { v.exp() } else { sigmoid(*v) }).collect()
    };
    let objective = |u: &[f64]| -> f64 {
        let v = to_natural(u);
        if v.iter().any(|x| !x.is_finite() || *x <= 0.0) || v[ns + 1..].iter().any(|r| *r >= 1.0) {
            return f64::INFINITY;
        }
        let jac: f64 = u[..=ns].iter().sum::<f64>() + v[ns + 1..].iter().map(|r| (r * (1.0 - r)).ln()).sum::<f64>();
        -(t.term(&v, 0) + jac)
    };
    let nm = NelderMeadConfig { max_evals: cfg.max_evals, f_tol: 1e-8, initial_step: 0.8, restarts: 2 };
    let mut best: Option<(Vec<f64>, f64)> = None;
    for rho0 in [0.5, 0.9] {
        let mut u0 = vec![0.0];
        if !cfg.noise_free {
            u0.push(cfg.priors.lambda_s.mean().ln());
        }
        u0.extend(std::iter::repeat_n(logit(rho0), x_unit.ncols()));
        let m = nelder_mead(objective, &u0, &nm);
        if best.as_ref().is_none_or(|b| m.value < b.1) {
            best = Some((m.x, m.value));
        }
    }
    let (u, val) = best.expect("at least one start");
    if !val.is_finite() {
        return Err(Error::Degenerate("no hyperparameter setting gave a factorizable covariance".into()));
    }
    GaussianProcess::new(x_unit.clone(), y_std.clone(), t.params(&to_natural(&u)))
}

/// Posterior hyperparameter draws by MCMC, thinned to `n_draws`.
pub fn sample_hyperparameters(
    x_unit: &DMatrix<f64>,
    y_std: &DVector<f64>,
    start: &KernelParams,
    cfg: &FitConfig,
    mcmc: &McmcConfig,
    n_draws: usize,
) -> Result<Vec<KernelParams>> {
    let t = HyperTarget { x: x_unit, y: y_std, priors: &cfg.priors, noise_free: cfg.noise_free };
    let mut init = vec![start.lambda_z];
    if !cfg.noise_free {
        init.push(start.lambda_s.unwrap_or_else(|| cfg.priors.lambda_s.mean()));
    }
    init.extend(start.beta.iter().map(|b| rho_from_beta(*b).clamp(1e-6, 1.0 - 1e-9)));
    let inits = vec![init; mcmc.n_chains];
    let run = run_parallel_chains(&t, &inits, mcmc)?;
    let rows = crate::mcmc::pooled(&run.chains);
    Ok(thin(&rows, n_draws).into_iter().map(|r| t.params(&r)).collect())
}

/// Evenly spaced subset of at most `n` rows.
pub fn thin<T: Clone>(rows: &[T], n: usize) -> Vec<T> {
    if rows.len() <= n || n == 0 {
        return rows.to_vec();
    }
    (0..n).map(|i| rows[i * rows.len() / n].clone()).collect()
}

/// Fitted surrogate in physical units.
#[derive(Clone, Debug)]
pub struct Surrogate {
    pub input_names: Vec<String>,
    pub output_name: String,
    pub input_scale: InputScale,
    pub output_scale: OutputScale,
    pub gp: GaussianProcess,
    /// Extra GPs at posterior hyperparameter draws (may be empty).
    pub ensemble: Vec<GaussianProcess>,
}

impl Surrogate {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], cfg: &FitConfig) -> Result<Self> {
        Self::fit_with_scale(x, y, InputScale::from_data(x), cfg)
    }

    pub fn fit_with_scale(x: &DMatrix<f64>, y: &[f64], input_scale: InputScale, cfg: &FitConfig) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} input rows but {} outputs", x.nrows(), y.len())));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("surrogate training data".into()));
        }
        let output_scale = OutputScale::from_data(y)?;
        let xu = input_scale.matrix_to_unit(x);
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| output_scale.forward(*v)));
        let gp = fit_map(&xu, &ys, cfg)?;
        Ok(Self {
            input_names: (0..x.ncols()).map(|k| format!("x{}", k + 1)).collect(),
            output_name: "y".into(),
            input_scale,
            output_scale,
            gp,
            ensemble: Vec::new(),
        })
    }

    /// Adds GPs at `n_draws` posterior hyperparameter draws.
    pub fn with_posterior_draws(mut self, cfg: &FitConfig, mcmc: &McmcConfig, n_draws: usize) -> Result<Self> {
        let draws = sample_hyperparameters(self.gp.x(), self.gp.y(), self.gp.params(), cfg, mcmc, n_draws)?;
        self.ensemble = draws
            .into_iter()
            .map(|p| GaussianProcess::new(self.gp.x().clone(), self.gp.y().clone(), p))
            .collect::<Result<_>>()?;
        Ok(self)
    }

    /// GPs over which posterior expectations are taken.
    pub fn members(&self) -> Vec<&GaussianProcess> {
        if self.ensemble.is_empty() {
            vec![&self.gp]
        } else {
            self.ensemble.iter().collect()
        }
    }

    pub fn dim(&self) -> usize {
        self.input_scale.dim()
    }

    /// Posterior mean in physical output units.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        self.output_scale.inverse(self.gp.predict_mean(&self.input_scale.to_unit(x)))
    }

    /// (mean, sd) in physical output units.
    pub fn predict(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.gp.predict_mean_var(&self.input_scale.to_unit(x));
        (self.output_scale.inverse(m), v.sqrt() * self.output_scale.sd)
    }

    pub fn to_archive(&self) -> SurrogateArchive {
        let x = self.gp.x();
        SurrogateArchive {
            schema_version: SURROGATE_SCHEMA,
            input_names: self.input_names.clone(),
            output_name: self.output_name.clone(),
            input_scale: self.input_scale.clone(),
            output_scale: self.output_scale,
            x_unit: (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect(),
            y_std: self.gp.y().iter().copied().collect(),
            params: self.gp.params().clone(),
            ensemble: self.ensemble.iter().map(|g| g.params().clone()).collect(),
        }
    }

    pub fn from_archive(a: &SurrogateArchive) -> Result<Self> {
        if a.schema_version != SURROGATE_SCHEMA {
            return Err(Error::Data(format!("unsupported surrogate schema_version {}", a.schema_version)));
        }
        let d = a.input_scale.dim();
        if a.x_unit.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("surrogate archive rows do not match input dimension".into()));
        }
        let x = DMatrix::from_fn(a.x_unit.len(), d, |i, k| a.x_unit[i][k]);
        let y = DVector::from_row_slice(&a.y_std);
        let gp = GaussianProcess::new(x.clone(), y.clone(), a.params.clone())?;
        let ensemble = a
            .ensemble
            .iter()
            .map(|p| GaussianProcess::new(x.clone(), y.clone(), p.clone()))
            .collect::<Result<_>>()?;
        Ok(Self {
            input_names: a.input_names.clone(),
            output_name: a.output_name.clone(),
            input_scale: a.input_scale.clone(),
            output_scale: a.output_scale,
            gp,
            ensemble,
        })
    }
}

/// Serialized form of a [`Surrogate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateArchive {
    pub schema_version: u32,
    pub input_names: Vec<String>,
    pub output_name: String,
    pub input_scale: InputScale,
    pub output_scale: OutputScale,
    pub x_unit: Vec<Vec<f64>>,
    pub y_std: Vec<f64>,
    pub params: KernelParams,
    pub ensemble: Vec<KernelParams>,
}
