//! Joint simulator/observation model with a GP discrepancy.
//!
//! Observations are modeled as y(x) = η(x, θ) + δ(x) + ε with η a GP over
//! (x, θ) trained on simulation runs, δ a GP over x, and ε Gaussian noise of
//! precision λ_ys. The observation and simulation blocks of the joint
//! covariance are coupled through the η cross-covariance.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{beta_from_rho, build_cov, rho_from_beta, KernelParams, NuggetPolicy};
use crate::linalg::{gaussian_log_density, ridge_solve, CholFactor};
use crate::mcmc::{diagnose, pooled, run_parallel_chains, Diagnostics, LogTarget, McmcConfig, PosteriorChain, Prior, PriorSpec};
use crate::qmc::ScrambledHalton;
use crate::stats;
use crate::surrogate::{fit_map, thin, FitConfig, InputScale, OutputScale};

pub const MODEL_SCHEMA: u32 = 1;

/// Simulation runs, field observations and calibration-parameter bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProblem {
    pub sim: Dataset,
    pub obs: Dataset,
    /// Physical (lower, upper) per calibration parameter.
    pub theta_bounds: Vec<(f64, f64)>,
    /// Which output column is calibrated.
    #[serde(default)]
    pub output: usize,
}

impl CalibrationProblem {
    pub fn n_design(&self) -> usize {
        self.sim.design_names.len()
    }

    pub fn n_theta(&self) -> usize {
        self.theta_bounds.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.obs.validate()?;
        if self.sim.design_names != self.obs.design_names {
            return Err(Error::Data(format!(
                "simulation design variables {:?} differ from observation design variables {:?}",
                self.sim.design_names, self.obs.design_names
            )));
        }
        if self.sim.calib_names.len() != self.theta_bounds.len() {
            return Err(Error::Data(format!(
                "{} calibration columns but {} theta bounds",
                self.sim.calib_names.len(),
                self.theta_bounds.len()
            )));
        }
        if let Some(b) = self.theta_bounds.iter().find(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi)) {
            return Err(Error::InvalidArgument(format!("theta bounds must be finite with lower < upper, got {b:?}")));
        }
        if self.sim.len() < 2 {
            return Err(Error::Data("at least two simulation runs are required".into()));
        }
        if self.obs.is_empty() {
            return Err(Error::Data("at least one observation is required".into()));
        }
        if self.output >= self.sim.output_names.len() || self.output >= self.obs.output_names.len() {
            return Err(Error::Data(format!("output index {} out of range", self.output)));
        }
        if self.sim.output_names[self.output] != self.obs.output_names[self.output] {
            return Err(Error::Data("simulation and observation output names differ".into()));
        }
        Ok(())
    }
}

/// Unit-cube inputs and standardized outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardizedData {
    pub x_scale: InputScale,
    pub theta_scale: InputScale,
    pub scale: OutputScale,
    pub x_sim: Vec<Vec<f64>>,
    pub theta_sim: Vec<Vec<f64>>,
    pub x_obs: Vec<Vec<f64>>,
    pub y_s: Vec<f64>,
    /// Function part of the standardized observations.
    pub y_o: Vec<f64>,
    /// Discrepancy part (zero on the scalar path).
    pub y_d: Vec<f64>,
}

impl StandardizedData {
    pub fn n_obs(&self) -> usize {
        self.y_o.len()
    }

    pub fn n_sim(&self) -> usize {
        self.y_s.len()
    }

    pub fn p(&self) -> usize {
        self.x_scale.dim()
    }

    pub fn q(&self) -> usize {
        self.theta_scale.dim()
    }

    pub fn unscale_output(&self, z: f64) -> f64 {
        self.scale.inverse(z)
    }

    pub fn theta_physical(&self, u: &[f64]) -> Vec<f64> {
        self.theta_scale.from_unit(u)
    }
}

/// Design ranges over the union of simulation and observation inputs.
fn union_scale(sim: &Dataset, obs: &Dataset) -> InputScale {
    let p = sim.design_names.len();
    let mut min = vec![f64::INFINITY; p];
    let mut max = vec![f64::NEG_INFINITY; p];
    for r in sim.design.iter().chain(&obs.design) {
        for k in 0..p {
            min[k] = min[k].min(r[k]);
            max[k] = max[k].max(r[k]);
        }
    }
    for k in 0..p {
        if max[k] <= min[k] {
            max[k] = min[k] + 1.0;
        }
    }
    InputScale { min, max }
}

pub fn standardize(problem: &CalibrationProblem) -> Result<StandardizedData> {
    let k = problem.output;
    let ysim = problem.sim.output_column(k);
    let scale = OutputScale::from_data(&ysim)
        .map_err(|_| Error::Degenerate("simulation output has zero variance".into()))?;
    let x_scale = union_scale(&problem.sim, &problem.obs);
    let theta_scale = InputScale::from_bounds(&problem.theta_bounds)?;

    let p = problem.n_design();
    if p > 0 {
        let sim_only = InputScale::from_data(&problem.sim.design_matrix());
        for (i, r) in problem.obs.design.iter().enumerate() {
            for kk in 0..p {
                let pad = 0.05 * sim_only.range(kk);
                if r[kk] < sim_only.min[kk] - pad || r[kk] > sim_only.max[kk] + pad {
                    warn!(
                        "observation {} lies outside the simulated range of '{}' (extrapolation)",
                        i + 1,
                        problem.sim.design_names[kk]
                    );
                }
            }
        }
    }
    for (j, r) in problem.sim.calib.iter().enumerate() {
        for (kk, v) in r.iter().enumerate() {
            let (lo, hi) = problem.theta_bounds[kk];
            if *v < lo || *v > hi {
                warn!("simulation run {} has {} outside its bounds", j + 1, problem.sim.calib_names[kk]);
            }
        }
    }
    let yobs: Vec<f64> = problem.obs.output_column(k).iter().map(|v| scale.forward(*v)).collect();
    Ok(StandardizedData {
        x_sim: problem.sim.design.iter().map(|r| x_scale.to_unit(r)).collect(),
        theta_sim: problem.sim.calib.iter().map(|r| theta_scale.to_unit(r)).collect(),
        x_obs: problem.obs.design.iter().map(|r| x_scale.to_unit(r)).collect(),
        y_s: ysim.iter().map(|v| scale.forward(*v)).collect(),
        y_d: vec![0.0; yobs.len()],
        y_o: yobs,
        x_scale,
        theta_scale,
        scale,
    })
}

/// Splits standardized observations into the part explained by
/// `sim_basis` (y_o) and the rest (y_d), by ridge least squares on the
/// combined basis. Any projection residual is carried by y_d.
pub fn split_observation(
    y: &DVector<f64>,
    sim_basis: &DMatrix<f64>,
    discrepancy_basis: &DMatrix<f64>,
    ridge: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let n = y.len();
    if sim_basis.nrows() != n || (discrepancy_basis.ncols() > 0 && discrepancy_basis.nrows() != n) {
        return Err(Error::DimensionMismatch("bases must have one row per observation".into()));
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    let a = sim_basis.ncols();
    let y_o = if discrepancy_basis.ncols() == 0 {
        // plain least-squares projection onto the simulator basis
        let svd = sim_basis.clone().svd(true, true);
        let coef = svd
            .solve(y, 1e-12 * svd.singular_values.max().max(1e-300))
            .map_err(|e| Error::Degenerate(e.to_string()))?;
        sim_basis * coef
    } else {
        let mut b = DMatrix::zeros(n, a + discrepancy_basis.ncols());
        b.columns_mut(0, a).copy_from(sim_basis);
        b.columns_mut(a, discrepancy_basis.ncols()).copy_from(discrepancy_basis);
        let (coef, _) = ridge_solve(&b, y, ridge)?;
        sim_basis * coef.rows(0, a)
    };
    let y_d = y - &y_o;
    Ok((y_o, y_d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    LambdaZ,
    LambdaS,
    LambdaNoise,
    LambdaDelta,
    Rho,
    Theta,
}

impl ParamKind {
    pub fn prior(self, p: &PriorSpec) -> Prior {
        match self {
            ParamKind::LambdaZ => p.lambda_z,
            ParamKind::LambdaS => p.lambda_s,
            ParamKind::LambdaNoise => p.lambda_noise,
            ParamKind::LambdaDelta => p.lambda_delta,
            ParamKind::Rho => p.rho,
            ParamKind::Theta => p.theta,
        }
    }

    pub fn is_precision(self) -> bool {
        !matches!(self, ParamKind::Rho | ParamKind::Theta)
    }
}

/// Position of every sampled quantity in the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub p: usize,
    pub q: usize,
    /// Observation-block GP shares λ_z and ρ with the simulator GP.
    pub tie_obs_params: bool,
    pub discrepancy: bool,
}

impl Layout {
    fn pq(&self) -> usize {
        self.p + self.q
    }

    fn i_obs(&self) -> usize {
        2 + self.pq()
    }

    pub fn i_noise(&self) -> usize {
        self.i_obs() + if self.tie_obs_params { 0 } else { 1 + self.pq() }
    }

    fn i_delta(&self) -> usize {
        self.i_noise() + 1
    }

    pub fn i_theta(&self) -> usize {
        self.i_delta() + if self.discrepancy { 1 + self.p } else { 0 }
    }

    pub fn len(&self) -> usize {
        self.i_theta() + self.q
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn kind(&self, i: usize) -> ParamKind {
        let pq = self.pq();
        if i == 0 {
            ParamKind::LambdaZ
        } else if i == 1 {
            ParamKind::LambdaS
        } else if i < self.i_obs() {
            ParamKind::Rho
        } else if i < self.i_noise() {
            if i == self.i_obs() {
                ParamKind::LambdaZ
            } else {
                ParamKind::Rho
            }
        } else if i == self.i_noise() {
            ParamKind::LambdaNoise
        } else if i < self.i_theta() {
            if i == self.i_delta() {
                ParamKind::LambdaDelta
            } else {
                ParamKind::Rho
            }
        } else {
            debug_assert!(i < self.len(), "{i} out of {pq}");
            ParamKind::Theta
        }
    }

    pub fn names(&self, design: &[String], calib: &[String]) -> Vec<String> {
        let inputs: Vec<&String> = design.iter().chain(calib).collect();
        let mut n = vec!["lambda_eta_z".to_string(), "lambda_eta_s".to_string()];
        n.extend(inputs.iter().map(|v| format!("rho_eta_{v}")));
        if !self.tie_obs_params {
            n.push("lambda_y_z".into());
            n.extend(inputs.iter().map(|v| format!("rho_y_{v}")));
        }
        n.push("lambda_y_s".into());
        if self.discrepancy {
            n.push("lambda_delta_z".into());
            n.extend(design.iter().map(|v| format!("rho_delta_{v}")));
        }
        n.extend(calib.iter().map(|v| format!("theta_{v}")));
        n
    }

    pub fn eta_params(&self, v: &[f64]) -> KernelParams {
        KernelParams {
            lambda_z: v[0],
            lambda_s: Some(v[1]),
            beta: v[2..2 + self.pq()].iter().map(|r| beta_from_rho(*r)).collect(),
        }
    }

    /// Kernel of η at observation inputs.
    pub fn obs_params(&self, v: &[f64]) -> KernelParams {
        if self.tie_obs_params {
            return self.eta_params(v);
        }
        let o = self.i_obs();
        KernelParams {
            lambda_z: v[o],
            lambda_s: Some(v[1]),
            beta: v[o + 1..o + 1 + self.pq()].iter().map(|r| beta_from_rho(*r)).collect(),
        }
    }

    pub fn noise_precision(&self, v: &[f64]) -> f64 {
        v[self.i_noise()]
    }

    pub fn delta_params(&self, v: &[f64]) -> Option<KernelParams> {
        if !self.discrepancy {
            return None;
        }
        let d = self.i_delta();
        Some(KernelParams {
            lambda_z: v[d],
            lambda_s: None,
            beta: v[d + 1..d + 1 + self.p].iter().map(|r| beta_from_rho(*r)).collect(),
        })
    }

    pub fn theta<'a>(&self, v: &'a [f64]) -> &'a [f64] {
        &v[self.i_theta()..]
    }
}

fn rows_matrix(rows: &[Vec<f64>], ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j])
}

/// Observation inputs with θ appended to every row.
pub fn obs_points(x_obs: &[Vec<f64>], theta: &[f64], p: usize) -> DMatrix<f64> {
    let q = theta.len();
    DMatrix::from_fn(x_obs.len(), p + q, |i, k| if k < p { x_obs[i][k] } else { theta[k - p] })
}

pub fn sim_points(x_sim: &[Vec<f64>], theta_sim: &[Vec<f64>], p: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x_sim.len(), p + q, |i, k| if k < p { x_sim[i][k] } else { theta_sim[i][k - p] })
}

/// One GP block coupling n observed quantities with m simulated ones:
///
/// ```text
/// [ K_obs(Z_o,Z_o) + s_η I + diag(noise) + K_δ    K_η(Z_o, Z_s)      ]
/// [ K_η(Z_s, Z_o)                                 K_η(Z_s,Z_s) + s_η I ]
/// ```
pub struct CoupledBlock<'a> {
    pub z_obs: &'a DMatrix<f64>,
    pub z_sim: &'a DMatrix<f64>,
    pub eta: &'a KernelParams,
    pub obs: &'a KernelParams,
    /// Per-observation noise variance added on the observation diagonal.
    pub noise_var: &'a [f64],
    /// Discrepancy kernel with its design-only inputs.
    pub delta: Option<(&'a DMatrix<f64>, &'a KernelParams)>,
}

impl CoupledBlock<'_> {
    pub fn assemble(&self) -> Result<DMatrix<f64>> {
        let (n, m) = (self.z_obs.nrows(), self.z_sim.nrows());
        let mut s = DMatrix::zeros(n + m, n + m);
        let mut oo = build_cov(self.z_obs, self.z_obs, self.obs, NuggetPolicy::SelfBlock)?.entries;
        for i in 0..n {
            oo[(i, i)] += self.noise_var[i];
        }
        if let Some((xd, pd)) = self.delta {
            oo += build_cov(xd, xd, pd, NuggetPolicy::None)?.entries;
        }
        let os = build_cov(self.z_obs, self.z_sim, self.eta, NuggetPolicy::None)?.entries;
        let ss = build_cov(self.z_sim, self.z_sim, self.eta, NuggetPolicy::SelfBlock)?.entries;
        s.view_mut((0, 0), (n, n)).copy_from(&oo);
        s.view_mut((0, n), (n, m)).copy_from(&os);
        s.view_mut((n, 0), (m, n)).copy_from(&os.transpose());
        s.view_mut((n, n), (m, m)).copy_from(&ss);
        Ok(s)
    }
}

/// Joint covariance of D = (y_o + y_d, y_s) at parameter vector `v`.
pub fn joint_covariance(std: &StandardizedData, layout: &Layout, v: &[f64]) -> Result<DMatrix<f64>> {
    let (p, q) = (layout.p, layout.q);
    let z_obs = obs_points(&std.x_obs, layout.theta(v), p);
    let z_sim = sim_points(&std.x_sim, &std.theta_sim, p, q);
    let eta = layout.eta_params(v);
    let obs = layout.obs_params(v);
    let noise = vec![1.0 / layout.noise_precision(v); std.n_obs()];
    let x_obs = rows_matrix(&std.x_obs, p);
    let delta = layout.delta_params(v);
    CoupledBlock {
        z_obs: &z_obs,
        z_sim: &z_sim,
        eta: &eta,
        obs: &obs,
        noise_var: &noise,
        delta: delta.as_ref().map(|d| (&x_obs, d)),
    }
    .assemble()
}

pub fn joint_data(std: &StandardizedData) -> DVector<f64> {
    let n = std.n_obs();
    DVector::from_iterator(
        n + std.n_sim(),
        (0..n).map(|i| std.y_o[i] + std.y_d[i]).chain(std.y_s.iter().copied()),
    )
}

/// −½ log|Σ| − ½ DᵀΣ⁻¹D of the joint model.
pub fn joint_log_likelihood(std: &StandardizedData, layout: &Layout, v: &[f64]) -> Result<f64> {
    let sigma = joint_covariance(std, layout, v)?;
    let f = CholFactor::new(sigma, "joint observation/simulation covariance")?;
    Ok(gaussian_log_density(&joint_data(std), &f))
}

pub fn log_prior(layout: &Layout, priors: &PriorSpec, v: &[f64]) -> f64 {
    (0..layout.len()).map(|i| layout.kind(i).prior(priors).ln_pdf(v[i])).sum()
}

/// Negative log posterior (up to a constant) of hyperparameters and θ.
pub fn joint_neg_log_posterior(std: &StandardizedData, layout: &Layout, priors: &PriorSpec, v: &[f64]) -> Result<f64> {
    if v.len() != layout.len() {
        return Err(Error::DimensionMismatch(format!("state has {} entries, model has {}", v.len(), layout.len())));
    }
    let lp = log_prior(layout, priors, v);
    if !lp.is_finite() {
        return Err(Error::NonFinite(format!("prior density at {v:?}")));
    }
    Ok(-(joint_log_likelihood(std, layout, v)? + lp))
}

/// Log posterior split as one likelihood term plus one prior term per parameter.
pub struct JointTarget<'a> {
    pub std: &'a StandardizedData,
    pub layout: &'a Layout,
    pub priors: &'a PriorSpec,
    pub names: Vec<String>,
}

pub(crate) fn kind_support(kind: ParamKind, priors: &PriorSpec, value: f64) -> bool {
    kind.prior(priors).in_support(value)
}

pub(crate) fn kind_initial_width(kind: ParamKind, value: f64) -> f64 {
    if kind.is_precision() {
        0.5 * value
    } else {
        0.1
    }
}

pub(crate) fn kind_max_width(kind: ParamKind) -> f64 {
    if kind.is_precision() {
        f64::INFINITY
    } else {
        1.0
    }
}

impl LogTarget for JointTarget<'_> {
    fn dim(&self) -> usize {
        self.layout.len()
    }

    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn in_support(&self, i: usize, value: f64) -> bool {
        kind_support(self.layout.kind(i), self.priors, value)
    }

    fn initial_width(&self, i: usize, value: f64) -> f64 {
        kind_initial_width(self.layout.kind(i), value)
    }

    fn max_width(&self, i: usize) -> f64 {
        kind_max_width(self.layout.kind(i))
    }

    fn n_terms(&self) -> usize {
        1 + self.layout.len()
    }

    fn term(&self, x: &[f64], k: usize) -> f64 {
        if k == 0 {
            joint_log_likelihood(self.std, self.layout, x).unwrap_or(f64::NEG_INFINITY)
        } else {
            let i = k - 1;
            self.layout.kind(i).prior(self.priors).ln_pdf(x[i])
        }
    }

    fn terms_for(&self, i: usize) -> Vec<usize> {
        vec![0, 1 + i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KohConfig {
    pub priors: PriorSpec,
    pub mcmc: McmcConfig,
    /// Include the discrepancy GP δ.
    pub discrepancy: bool,
    /// Share λ_z and ρ between the simulator GP and the observation block.
    pub tie_obs_params: bool,
    /// Posterior draws used by prediction.
    pub predict_draws: usize,
}

impl Default for KohConfig {
    fn default() -> Self {
        Self {
            priors: PriorSpec::default(),
            mcmc: McmcConfig::default(),
            discrepancy: true,
            tie_obs_params: true,
            predict_draws: 200,
        }
    }
}

/// Calibration result: the problem, its standardization and the chains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    pub schema_version: u32,
    pub problem: CalibrationProblem,
    pub standardized: StandardizedData,
    pub layout: Layout,
    pub config: KohConfig,
    pub names: Vec<String>,
    pub chains: Vec<PosteriorChain>,
    pub diagnostics: Option<Diagnostics>,
}

/// Simulator-GP MAP fit used to start the chains.
fn eta_start(std: &StandardizedData, priors: &PriorSpec) -> Result<KernelParams> {
    let (p, q) = (std.p(), std.q());
    let z = sim_points(&std.x_sim, &std.theta_sim, p, q);
    let y = DVector::from_row_slice(&std.y_s);
    let cfg = FitConfig { priors: priors.clone(), noise_free: false, max_evals: 600 };
    Ok(fit_map(&z, &y, &cfg)?.params().clone())
}

fn clamp_rho(r: f64) -> f64 {
    r.clamp(0.01, 0.999)
}

/// Starting states, one per chain; θ spread over the unit cube.
fn initial_states(std: &StandardizedData, layout: &Layout, cfg: &KohConfig) -> Result<Vec<Vec<f64>>> {
    let eta = eta_start(std, &cfg.priors)?;
    let mut base = vec![eta.lambda_z, eta.lambda_s.unwrap_or(cfg.priors.lambda_s.mean())];
    base.extend(eta.beta.iter().map(|b| clamp_rho(rho_from_beta(*b))));
    if !layout.tie_obs_params {
        base.push(eta.lambda_z);
        base.extend(eta.beta.iter().map(|b| clamp_rho(rho_from_beta(*b))));
    }
    base.push(cfg.priors.lambda_noise.mean());
    if layout.discrepancy {
        base.push(cfg.priors.lambda_delta.mean());
        base.extend(std::iter::repeat_n(0.9, layout.p));
    }
    let halton = ScrambledHalton::new(layout.q.max(1), crate::seed::derive_seed(cfg.mcmc.seed, "koh-init"));
    Ok((0..cfg.mcmc.n_chains)
        .map(|c| {
            let mut s = base.clone();
            if c == 0 {
                s.extend(std::iter::repeat_n(0.5, layout.q));
            } else {
                s.extend(halton.point(c as u64).into_iter().take(layout.q).map(|u| 0.1 + 0.8 * u));
            }
            s
        })
        .collect())
}

pub fn calibrate(problem: &CalibrationProblem, config: &KohConfig) -> Result<CalibratedModel> {
    problem.validate()?;
    config.priors.validate()?;
    config.mcmc.validate()?;
    let std = standardize(problem)?;
    let layout = Layout {
        p: problem.n_design(),
        q: problem.n_theta(),
        tie_obs_params: config.tie_obs_params,
        discrepancy: config.discrepancy,
    };
    let names = layout.names(&problem.sim.design_names, &problem.sim.calib_names);
    let target = JointTarget { std: &std, layout: &layout, priors: &config.priors, names: names.clone() };
    let inits = initial_states(&std, &layout, config)?;
    let run = run_parallel_chains(&target, &inits, &config.mcmc)?;
    Ok(CalibratedModel {
        schema_version: MODEL_SCHEMA,
        problem: problem.clone(),
        standardized: std,
        layout,
        config: config.clone(),
        names,
        diagnostics: run.diagnostics,
        chains: run.chains,
    })
}

/// Posterior summary of one scalar quantity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl ParamSummary {
    pub fn from_samples(name: &str, x: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            mean: stats::mean(x),
            sd: stats::sd(x),
            q025: stats::quantile(x, 0.025),
            q975: stats::quantile(x, 0.975),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.q025 <= v && v <= self.q975
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub schema_version: u32,
    pub n_samples: usize,
    pub parameters: Vec<ParamSummary>,
    /// θ in physical units.
    pub theta: Vec<ParamSummary>,
    pub theta_correlation: Vec<Vec<f64>>,
    pub acceptance_rates: Vec<Vec<f64>>,
    pub diagnostics: Option<Diagnostics>,
}

/// Summary of pooled chains; θ columns start at `i_theta`.
pub fn summarize_chains(
    names: &[String],
    chains: &[PosteriorChain],
    i_theta: usize,
    theta_scale: &InputScale,
    diagnostics: Option<Diagnostics>,
) -> CalibrationSummary {
    let rows = pooled(chains);
    let col = |i: usize| -> Vec<f64> { rows.iter().map(|r| r[i]).collect() };
    let parameters = if rows.is_empty() {
        Vec::new()
    } else {
        names.iter().enumerate().map(|(i, n)| ParamSummary::from_samples(n, &col(i))).collect()
    };
    let q = theta_scale.dim();
    let theta_cols: Vec<Vec<f64>> = (0..q)
        .map(|k| col(i_theta + k).iter().map(|u| theta_scale.min[k] + u * theta_scale.range(k)).collect())
        .collect();
    let theta = if rows.is_empty() {
        Vec::new()
    } else {
        (0..q)
            .map(|k| ParamSummary::from_samples(names[i_theta + k].trim_start_matches("theta_"), &theta_cols[k]))
            .collect()
    };
    let theta_correlation = (0..q)
        .map(|a| (0..q).map(|b| if rows.is_empty() { 0.0 } else { stats::correlation(&theta_cols[a], &theta_cols[b]) }).collect())
        .collect();
    CalibrationSummary {
        schema_version: MODEL_SCHEMA,
        n_samples: rows.len(),
        parameters,
        theta,
        theta_correlation,
        acceptance_rates: chains.iter().map(|c| c.acceptance_rates.clone()).collect(),
        diagnostics,
    }
}

impl CalibratedModel {
    pub fn samples(&self) -> Vec<Vec<f64>> {
        pooled(&self.chains)
    }

    pub fn summary(&self) -> CalibrationSummary {
        summarize_chains(&self.names, &self.chains, self.layout.i_theta(), &self.standardized.theta_scale, self.diagnostics.clone())
    }

    /// θ draws in physical units.
    pub fn theta_samples(&self) -> Vec<Vec<f64>> {
        let it = self.layout.i_theta();
        self.samples().iter().map(|r| self.standardized.theta_physical(&r[it..])).collect()
    }

    pub fn rediagnose(&mut self) -> Result<()> {
        self.diagnostics = if self.chains.len() >= 2 { Some(diagnose(&self.chains)?) } else { None };
        Ok(())
    }

    pub fn predict(&self, x_test: &[Vec<f64>], n_draws: usize) -> Result<CalibratedPrediction> {
        predict_calibrated(self, x_test, n_draws)
    }
}

/// Pooled predictive distributions at test points, in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPrediction {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub eta_mean: Vec<f64>,
    pub eta_sd: Vec<f64>,
    pub delta_mean: Vec<f64>,
    pub delta_sd: Vec<f64>,
    pub delta_lower: Vec<f64>,
    pub delta_upper: Vec<f64>,
}

/// Standardized predictive moments of η, δ and η + δ for one draw.
#[derive(Clone, Debug, Default)]
pub struct DrawPrediction {
    pub eta: Vec<(f64, f64)>,
    pub delta: Vec<(f64, f64)>,
    pub total: Vec<(f64, f64)>,
}

/// Predictive distribution at unit-cube design points for one parameter draw.
pub fn predict_draw(std: &StandardizedData, layout: &Layout, v: &[f64], x_unit: &[Vec<f64>]) -> Result<DrawPrediction> {
    let (p, q) = (layout.p, layout.q);
    let n = std.n_obs();
    let sigma = joint_covariance(std, layout, v)?;
    let f = CholFactor::new(sigma, "joint observation/simulation covariance")?;
    let alpha = f.solve(&joint_data(std));
    let theta = layout.theta(v);
    let z_test = obs_points(x_unit, theta, p);
    let z_obs = obs_points(&std.x_obs, theta, p);
    let z_sim = sim_points(&std.x_sim, &std.theta_sim, p, q);
    let eta = layout.eta_params(v);
    let t = x_unit.len();
    let nn = n + std.n_sim();
    let mut k_eta = DMatrix::zeros(nn, t);
    k_eta.view_mut((0, 0), (n, t)).copy_from(&build_cov(&z_obs, &z_test, &eta, NuggetPolicy::None)?.entries);
    k_eta
        .view_mut((n, 0), (std.n_sim(), t))
        .copy_from(&build_cov(&z_sim, &z_test, &eta, NuggetPolicy::None)?.entries);
    let mut k_delta = DMatrix::zeros(nn, t);
    let delta = layout.delta_params(v);
    if let Some(d) = &delta {
        let xo = rows_matrix(&std.x_obs, p);
        let xt = rows_matrix(x_unit, p);
        k_delta.view_mut((0, 0), (n, t)).copy_from(&build_cov(&xo, &xt, d, NuggetPolicy::None)?.entries);
    }
    let k_tot = &k_eta + &k_delta;
    let w_eta = f.whiten(&k_eta);
    let w_delta = f.whiten(&k_delta);
    let w_tot = f.whiten(&k_tot);
    let var_eta = eta.variance();
    let var_delta = delta.as_ref().map_or(0.0, |d| d.variance());
    let moments = |k: &DMatrix<f64>, w: &DMatrix<f64>, prior: f64| -> Vec<(f64, f64)> {
        (0..t)
            .map(|j| {
                let m = k.column(j).dot(&alpha);
                let v = crate::gp::clamp_variance(prior - w.column(j).norm_squared(), prior);
                (m, v.sqrt())
            })
            .collect()
    };
    Ok(DrawPrediction {
        eta: moments(&k_eta, &w_eta, var_eta),
        delta: moments(&k_delta, &w_delta, var_delta),
        total: moments(&k_tot, &w_tot, var_eta + var_delta),
    })
}

/// Pools per-draw Gaussians (standardized) into physical-unit summaries.
pub(crate) fn pool_draws(draws: &[DrawPrediction], scale: &OutputScale, t: usize) -> CalibratedPrediction {
    let mut out = CalibratedPrediction {
        mean: Vec::with_capacity(t),
        sd: Vec::with_capacity(t),
        lower: Vec::with_capacity(t),
        upper: Vec::with_capacity(t),
        eta_mean: Vec::with_capacity(t),
        eta_sd: Vec::with_capacity(t),
        delta_mean: Vec::with_capacity(t),
        delta_sd: Vec::with_capacity(t),
        delta_lower: Vec::with_capacity(t),
        delta_upper: Vec::with_capacity(t),
    };
    let s = scale.sd;
    for j in 0..t {
        let comp = |sel: &dyn Fn(&DrawPrediction) -> (f64, f64)| -> (Vec<f64>, Vec<f64>) {
            draws.iter().map(|d| sel(d)).unzip()
        };
        let (tm, ts) = comp(&|d| d.total[j]);
        let (m, sd) = stats::mixture_moments(&tm, &ts);
        out.mean.push(scale.inverse(m));
        out.sd.push(sd * s);
        out.lower.push(scale.inverse(stats::mixture_quantile(&tm, &ts, 0.025)));
        out.upper.push(scale.inverse(stats::mixture_quantile(&tm, &ts, 0.975)));
        let (em, es) = comp(&|d| d.eta[j]);
        let (m, sd) = stats::mixture_moments(&em, &es);
        out.eta_mean.push(scale.inverse(m));
        out.eta_sd.push(sd * s);
        let (dm, ds) = comp(&|d| d.delta[j]);
        let (m, sd) = stats::mixture_moments(&dm, &ds);
        out.delta_mean.push(m * s);
        out.delta_sd.push(sd * s);
        out.delta_lower.push(stats::mixture_quantile(&dm, &ds, 0.025) * s);
        out.delta_upper.push(stats::mixture_quantile(&dm, &ds, 0.975) * s);
    }
    out
}

pub(crate) fn warn_extrapolation(x_unit: &[Vec<f64>]) {
    if x_unit.iter().flatten().any(|u| *u < -1e-9 || *u > 1.0 + 1e-9) {
        warn!("prediction inputs fall outside the calibrated design range (extrapolation)");
    }
}

/// Calibrated prediction η(x, θ) + δ(x) at physical design points, pooled
/// over `n_draws` evenly thinned posterior draws.
pub fn predict_calibrated(model: &CalibratedModel, x_test: &[Vec<f64>], n_draws: usize) -> Result<CalibratedPrediction> {
    let std = &model.standardized;
    if let Some(r) = x_test.iter().find(|r| r.len() != std.p()) {
        return Err(Error::DimensionMismatch(format!("test point has {} coordinates, expected {}", r.len(), std.p())));
    }
    let rows = model.samples();
    if rows.is_empty() {
        return Err(Error::InvalidArgument("model has no retained posterior samples".into()));
    }
    let x_unit: Vec<Vec<f64>> = x_test.iter().map(|r| std.x_scale.to_unit(r)).collect();
    warn_extrapolation(&x_unit);
    let draws: Vec<Vec<f64>> = thin(&rows, n_draws.max(1));
    let preds: Vec<DrawPrediction> =
        draws.par_iter().map(|v| predict_draw(std, &model.layout, v, &x_unit)).collect::<Result<_>>()?;
    Ok(pool_draws(&preds, &std.scale, x_test.len()))
}
