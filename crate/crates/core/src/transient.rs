//! Calibration of time-history outputs through a reduced SVD basis.
//!
//! Each output's simulated curves are centered by their mean curve, scaled by
//! one standard deviation, and projected on their leading singular vectors.
//! The projection weights become scalar GP outputs over (x, θ). Observed curves
//! are split by least squares on the interpolated basis plus a set of Gaussian
//! time bumps that carry the discrepancy.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gp::{beta_from_rho, build_cov, rho_from_beta, KernelParams, NuggetPolicy};
use crate::koh::{kind_initial_width, kind_max_width, kind_support, obs_points, sim_points, summarize_chains, CalibrationSummary, CoupledBlock, ParamKind};
use crate::linalg::{gaussian_log_density, ridge_solve, CholFactor};
use crate::mcmc::{pooled, run_parallel_chains, Diagnostics, LogTarget, McmcConfig, PosteriorChain, PriorSpec};
use crate::qmc::ScrambledHalton;
use crate::stats;
use crate::surrogate::{fit_map, thin, FitConfig, InputScale};

/// Simulated and observed curves of one output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientEnsemble {
    pub name: String,
    pub t_sim: Vec<f64>,
    /// n_t × m, one column per simulation run.
    pub sim_curves: DMatrix<f64>,
    pub t_obs: Vec<f64>,
    /// n_obs_t × n, one column per experiment.
    pub obs_curves: DMatrix<f64>,
}

fn strictly_increasing(t: &[f64]) -> bool {
    t.windows(2).all(|w| w[0] < w[1])
}

impl TransientEnsemble {
    pub fn validate(&self) -> Result<()> {
        if self.t_sim.len() < 2 {
            return Err(Error::Data(format!("{}: at least two simulation time points are required", self.name)));
        }
        if !strictly_increasing(&self.t_sim) || !strictly_increasing(&self.t_obs) {
            return Err(Error::Data(format!("{}: time grids must be strictly increasing", self.name)));
        }
        if self.sim_curves.nrows() != self.t_sim.len() || self.obs_curves.nrows() != self.t_obs.len() {
            return Err(Error::DimensionMismatch(format!("{}: curve rows must match time grids", self.name)));
        }
        if self.sim_curves.iter().chain(self.obs_curves.iter()).chain(&self.t_sim).chain(&self.t_obs).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} curves", self.name)));
        }
        Ok(())
    }
}

/// Truncated SVD basis of centered, scaled simulation curves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedBasis {
    /// n_t × n_pu, U·Σ/√m.
    pub k_sim: DMatrix<f64>,
    /// n_pu × m, weights with unit mean square.
    pub w: DMatrix<f64>,
    pub energy_captured: f64,
    /// n_obs_t × n_pu, K_sim interpolated to the observation grid.
    pub k_obs: DMatrix<f64>,
    pub mean_curve: Vec<f64>,
    pub scale: f64,
}

impl ReducedBasis {
    pub fn n_pu(&self) -> usize {
        self.k_sim.ncols()
    }
}

/// Mean curve and scalar sd of the simulation ensemble, and the
/// centered-scaled matrix.
fn center_and_scale(sim: &DMatrix<f64>) -> (Vec<f64>, f64, DMatrix<f64>) {
    let (nt, m) = sim.shape();
    let mean: Vec<f64> = (0..nt).map(|i| sim.row(i).sum() / m as f64).collect();
    let centered = DMatrix::from_fn(nt, m, |i, j| sim[(i, j)] - mean[i]);
    let scale = (centered.norm_squared() / (nt * m) as f64).sqrt();
    let scaled = if scale > 0.0 { &centered / scale } else { centered };
    (mean, scale, scaled)
}

pub fn reduce_basis(ensemble: &TransientEnsemble, energy_threshold: f64) -> Result<ReducedBasis> {
    if !(energy_threshold > 0.0 && energy_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("energy threshold must lie in (0, 1], got {energy_threshold}")));
    }
    ensemble.validate()?;
    let m = ensemble.sim_curves.ncols();
    let (mean_curve, scale, y) = center_and_scale(&ensemble.sim_curves);
    if !(scale > 1e-300) {
        return Err(Error::Degenerate(format!("{}: simulation curves are all identical (n_pu = 0)", ensemble.name)));
    }
    let svd = y.clone().svd(true, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total: f64 = s.iter().map(|v| v * v).sum();
    let rank = s.iter().filter(|v| **v > 1e-12 * s[0]).count();
    let mut n_pu = 0;
    let mut acc = 0.0;
    while n_pu < rank {
        acc += s[n_pu] * s[n_pu];
        n_pu += 1;
        if acc / total >= energy_threshold - 1e-12 {
            break;
        }
    }
    let u = svd.u.as_ref().expect("requested U");
    let sq = (m as f64).sqrt();
    let k_sim = DMatrix::from_fn(y.nrows(), n_pu, |i, k| u[(i, order[k])] * s[k] / sq);
    let w = k_sim.clone().pseudo_inverse(1e-12).map_err(|e| Error::Degenerate(e.to_string()))? * &y;
    let k_obs = interpolate_basis(&k_sim, &ensemble.t_sim, &ensemble.t_obs)?;
    Ok(ReducedBasis { k_sim, w, energy_captured: (acc / total).min(1.0), k_obs, mean_curve, scale })
}

/// Piecewise-linear interpolation of `values` (rows on `t_from`) onto `t_to`.
/// Points outside the source range are clamped to its ends.
pub fn interpolate_basis(values: &DMatrix<f64>, t_from: &[f64], t_to: &[f64]) -> Result<DMatrix<f64>> {
    if t_from.len() < 2 {
        return Err(Error::Data("interpolation needs at least two source time points".into()));
    }
    if values.nrows() != t_from.len() {
        return Err(Error::DimensionMismatch("basis rows must match the source time grid".into()));
    }
    let (lo, hi) = (t_from[0], t_from[t_from.len() - 1]);
    if t_to.iter().any(|t| *t < lo || *t > hi) {
        warn!("observation times outside [{lo}, {hi}] are clamped to the simulated range");
    }
    let mut out = DMatrix::zeros(t_to.len(), values.ncols());
    for (r, &t) in t_to.iter().enumerate() {
        let t = t.clamp(lo, hi);
        let seg = match t_from.binary_search_by(|v| v.total_cmp(&t)) {
            Ok(i) => i.min(t_from.len() - 2),
            Err(i) => i.saturating_sub(1).min(t_from.len() - 2),
        };
        let w = (t - t_from[seg]) / (t_from[seg + 1] - t_from[seg]);
        for c in 0..values.ncols() {
            out[(r, c)] = (1.0 - w) * values[(seg, c)] + w * values[(seg + 1, c)];
        }
    }
    Ok(out)
}

/// Gaussian bumps over time used as the discrepancy basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyBasis {
    pub centers: Vec<f64>,
    pub width: f64,
    /// n_obs_t × n_kernels
    pub delta: DMatrix<f64>,
}

impl DiscrepancyBasis {
    pub fn eval(&self, t: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(t.len(), self.centers.len(), |i, j| (-((t[i] - self.centers[j]) / self.width).powi(2)).exp())
    }
}

pub fn default_kernel_count(n_obs_t: usize) -> usize {
    (n_obs_t / 5).max(5)
}

pub fn build_discrepancy_basis(t_obs: &[f64], n_kernels: usize) -> Result<DiscrepancyBasis> {
    if n_kernels == 0 {
        return Err(Error::InvalidArgument("at least one discrepancy kernel is required".into()));
    }
    if t_obs.is_empty() {
        return Err(Error::Data("empty observation time grid".into()));
    }
    let lo = t_obs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t_obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let (centers, width) = if n_kernels == 1 {
        (vec![0.5 * (lo + hi)], range / 2.0)
    } else {
        let step = range / (n_kernels - 1) as f64;
        ((0..n_kernels).map(|j| lo + j as f64 * step).collect(), 2.0 * step)
    };
    let mut b = DiscrepancyBasis { centers, width, delta: DMatrix::zeros(0, 0) };
    b.delta = b.eval(t_obs);
    Ok(b)
}

/// Multi-output transient calibration problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransientProblem {
    pub outputs: Vec<TransientEnsemble>,
    pub design_names: Vec<String>,
    pub calib_names: Vec<String>,
    /// m × p
    pub sim_design: Vec<Vec<f64>>,
    /// m × q
    pub sim_calib: Vec<Vec<f64>>,
    /// n × p
    pub obs_design: Vec<Vec<f64>>,
    pub theta_bounds: Vec<(f64, f64)>,
}

impl TransientProblem {
    pub fn n_sim(&self) -> usize {
        self.sim_calib.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs_design.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::Data("no transient outputs".into()));
        }
        let (m, n, p, q) = (self.n_sim(), self.n_obs(), self.design_names.len(), self.calib_names.len());
        if m < 2 || n < 1 {
            return Err(Error::Data(format!("need >= 2 simulation runs and >= 1 experiment, got {m} and {n}")));
        }
        if self.sim_design.len() != m || self.sim_design.iter().any(|r| r.len() != p) || self.sim_calib.iter().any(|r| r.len() != q) {
            return Err(Error::DimensionMismatch("simulation input rows are inconsistent".into()));
        }
        if self.obs_design.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("observation input rows are inconsistent".into()));
        }
        if self.theta_bounds.len() != q {
            return Err(Error::DimensionMismatch(format!("{q} calibration inputs but {} bounds", self.theta_bounds.len())));
        }
        for o in &self.outputs {
            o.validate()?;
            if o.sim_curves.ncols() != m || o.obs_curves.ncols() != n {
                return Err(Error::DimensionMismatch(format!("{}: curve columns must match runs/experiments", o.name)));
            }
        }
        Ok(())
    }

    /// Builds a problem from long-format tables: one row per (run, time).
    /// Runs are consecutive rows sharing the same design and calibration
    /// values; every run must use the same time grid.
    pub fn from_datasets(sim: &Dataset, obs: &Dataset, theta_bounds: Vec<(f64, f64)>) -> Result<Self> {
        sim.validate()?;
        obs.validate()?;
        if sim.time_name.is_none() || obs.time_name.is_none() {
            return Err(Error::Data("transient data need a time column".into()));
        }
        if sim.design_names != obs.design_names {
            return Err(Error::Data(format!("design columns differ: {:?} vs {:?}", sim.design_names, obs.design_names)));
        }
        if sim.output_names != obs.output_names {
            return Err(Error::Data(format!("output columns differ: {:?} vs {:?}", sim.output_names, obs.output_names)));
        }
        if !obs.calib_names.is_empty() {
            return Err(Error::Data("observations must not carry calibration columns".into()));
        }
        let sim_groups = group_runs(sim, true)?;
        let obs_groups = group_runs(obs, false)?;
        let curves = |ds: &Dataset, groups: &[Vec<usize>], o: usize| {
            DMatrix::from_fn(groups[0].len(), groups.len(), |i, j| ds.output[groups[j][i]][o])
        };
        let t_sim: Vec<f64> = sim_groups[0].iter().map(|&i| sim.time[i]).collect();
        let t_obs: Vec<f64> = obs_groups[0].iter().map(|&i| obs.time[i]).collect();
        let outputs = sim
            .output_names
            .iter()
            .enumerate()
            .map(|(o, name)| TransientEnsemble {
                name: name.clone(),
                t_sim: t_sim.clone(),
                sim_curves: curves(sim, &sim_groups, o),
                t_obs: t_obs.clone(),
                obs_curves: curves(obs, &obs_groups, o),
            })
            .collect();
        let first = |ds: &Dataset, g: &[Vec<usize>], calib: bool| -> Vec<Vec<f64>> {
            g.iter()
                .map(|rows| {
                    let src = if calib { &ds.calib } else { &ds.design };
                    src.get(rows[0]).cloned().unwrap_or_default()
                })
                .collect()
        };
        let pr = Self {
            outputs,
            design_names: sim.design_names.clone(),
            calib_names: sim.calib_names.clone(),
            sim_design: first(sim, &sim_groups, false),
            sim_calib: first(sim, &sim_groups, true),
            obs_design: first(obs, &obs_groups, false),
            theta_bounds,
        };
        pr.validate()?;
        Ok(pr)
    }

    /// Long-format tables (simulations, observations). All outputs must share
    /// their time grids.
    pub fn to_datasets(&self) -> Result<(Dataset, Dataset)> {
        self.validate()?;
        let o0 = &self.outputs[0];
        if self.outputs.iter().any(|o| o.t_sim != o0.t_sim || o.t_obs != o0.t_obs) {
            return Err(Error::Data("outputs use different time grids; long format needs a shared grid".into()));
        }
        let names: Vec<String> = self.outputs.iter().map(|o| o.name.clone()).collect();
        let mut sim = Dataset {
            design_names: self.design_names.clone(),
            calib_names: self.calib_names.clone(),
            output_names: names.clone(),
            time_name: Some("t".into()),
            ..Dataset::default()
        };
        for j in 0..self.n_sim() {
            for (i, t) in o0.t_sim.iter().enumerate() {
                sim.design.push(self.sim_design[j].clone());
                sim.calib.push(self.sim_calib[j].clone());
                sim.time.push(*t);
                sim.output.push(self.outputs.iter().map(|o| o.sim_curves[(i, j)]).collect());
            }
        }
        let mut obs = Dataset { design_names: self.design_names.clone(), output_names: names, time_name: Some("t".into()), ..Dataset::default() };
        for j in 0..self.n_obs() {
            for (i, t) in o0.t_obs.iter().enumerate() {
                obs.design.push(self.obs_design[j].clone());
                obs.time.push(*t);
                obs.output.push(self.outputs.iter().map(|o| o.obs_curves[(i, j)]).collect());
            }
        }
        // the CSV reader yields an empty row per record for absent roles
        obs.calib = vec![Vec::new(); obs.len()];
        Ok((sim, obs))
    }
}

/// Row indices of consecutive runs (rows with equal inputs).
fn group_runs(ds: &Dataset, with_calib: bool) -> Result<Vec<Vec<usize>>> {
    let key = |i: usize| -> Vec<f64> {
        let mut k = ds.design.get(i).cloned().unwrap_or_default();
        if with_calib {
            k.extend(ds.calib.get(i).cloned().unwrap_or_default());
        }
        k
    };
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in 0..ds.len() {
        match groups.last_mut() {
            Some(g) if key(g[0]) == key(i) => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    let Some(first) = groups.first() else {
        return Err(Error::Data("no rows".into()));
    };
    let t0: Vec<f64> = first.iter().map(|&i| ds.time[i]).collect();
    for (j, g) in groups.iter().enumerate() {
        let t: Vec<f64> = g.iter().map(|&i| ds.time[i]).collect();
        if t != t0 {
            return Err(Error::Data(format!("run {} has a different time grid from run 1", j + 1)));
        }
    }
    Ok(groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransientConfig {
    pub energy_threshold: f64,
    /// Discrepancy kernels per output; default max(5, n_obs_t/5).
    pub n_kernels: Option<usize>,
    pub discrepancy: bool,
    /// Ridge used when splitting observed curves.
    pub ridge: f64,
    pub priors: PriorSpec,
    pub mcmc: McmcConfig,
    pub predict_draws: usize,
}

impl Default for TransientConfig {
    fn default() -> Self {
        Self {
            energy_threshold: 0.99,
            n_kernels: None,
            discrepancy: true,
            ridge: 1e-6,
            priors: PriorSpec::default(),
            mcmc: McmcConfig::default(),
            predict_draws: 100,
        }
    }
}

/// Reduced representation of one output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputReduction {
    pub name: String,
    pub t_obs: Vec<f64>,
    pub basis: ReducedBasis,
    pub discrepancy: Option<DiscrepancyBasis>,
    /// Discrepancy bumps with their K_obs component removed (n_obs_t × n_k).
    pub delta_perp: DMatrix<f64>,
    /// Observed basis coefficients, n × n_pu.
    pub u: DMatrix<f64>,
    /// Observed discrepancy coefficients, n × n_k.
    pub v: DMatrix<f64>,
    /// Noise-variance multipliers of the coefficients.
    pub mult_u: Vec<f64>,
    pub mult_v: Vec<f64>,
    pub rss: f64,
    pub dof: f64,
}

fn reduce_output(e: &TransientEnsemble, cfg: &TransientConfig) -> Result<OutputReduction> {
    let basis = reduce_basis(e, cfg.energy_threshold)?;
    let n_pu = basis.n_pu();
    let nt = e.t_obs.len();
    let n = e.obs_curves.ncols();
    let mean_obs = interpolate_basis(&DMatrix::from_column_slice(basis.mean_curve.len(), 1, &basis.mean_curve), &e.t_sim, &e.t_obs)?;
    let y = DMatrix::from_fn(nt, n, |i, j| (e.obs_curves[(i, j)] - mean_obs[(i, 0)]) / basis.scale);

    let (discrepancy, delta_perp) = if cfg.discrepancy {
        let db = build_discrepancy_basis(&e.t_obs, cfg.n_kernels.unwrap_or_else(|| default_kernel_count(nt)))?;
        let k = &basis.k_obs;
        let proj = k * k.clone().pseudo_inverse(1e-12).map_err(|err| Error::Degenerate(err.to_string()))?;
        let perp = &db.delta - proj * &db.delta;
        (Some(db), perp)
    } else {
        (None, DMatrix::zeros(nt, 0))
    };
    let nk = delta_perp.ncols();
    let mut b = DMatrix::zeros(nt, n_pu + nk);
    b.columns_mut(0, n_pu).copy_from(&basis.k_obs);
    b.columns_mut(n_pu, nk).copy_from(&delta_perp);
    let mut u = DMatrix::zeros(n, n_pu);
    let mut v = DMatrix::zeros(n, nk);
    let mut rss = 0.0;
    let mut mult = DVector::zeros(0);
    for j in 0..n {
        let col = y.column(j).into_owned();
        let (coef, inv_diag) = ridge_solve(&b, &col, cfg.ridge)?;
        rss += (&col - &b * &coef).norm_squared();
        for k in 0..n_pu {
            u[(j, k)] = coef[k];
        }
        for k in 0..nk {
            v[(j, k)] = coef[n_pu + k];
        }
        mult = inv_diag;
    }
    let dof = (n as f64 * (nt as f64 - (n_pu + nk) as f64)).max(0.0);
    Ok(OutputReduction {
        name: e.name.clone(),
        t_obs: e.t_obs.clone(),
        basis,
        discrepancy,
        delta_perp,
        u,
        v,
        mult_u: mult.rows(0, n_pu).iter().copied().collect(),
        mult_v: mult.rows(n_pu, nk).iter().copied().collect(),
        rss,
        dof,
    })
}

/// Flat parameter layout: one GP per (output, component), one noise
/// precision per output, a shared discrepancy GP, then θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientLayout {
    pub p: usize,
    pub q: usize,
    /// (output, component) of every weight GP.
    pub blocks: Vec<(usize, usize)>,
    pub n_outputs: usize,
    pub discrepancy: bool,
}

impl TransientLayout {
    fn block_len(&self) -> usize {
        2 + self.p + self.q
    }

    pub fn block_offset(&self, b: usize) -> usize {
        b * self.block_len()
    }

    pub fn i_noise(&self, o: usize) -> usize {
        self.blocks.len() * self.block_len() + o
    }

    pub fn i_delta(&self) -> usize {
        self.i_noise(self.n_outputs)
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
        let bl = self.blocks.len() * self.block_len();
        if i < bl {
            match i % self.block_len() {
                0 => ParamKind::LambdaZ,
                1 => ParamKind::LambdaS,
                _ => ParamKind::Rho,
            }
        } else if i < self.i_delta() {
            ParamKind::LambdaNoise
        } else if i < self.i_theta() {
            if i == self.i_delta() {
                ParamKind::LambdaDelta
            } else {
                ParamKind::Rho
            }
        } else {
            ParamKind::Theta
        }
    }

    pub fn block_params(&self, b: usize, v: &[f64]) -> KernelParams {
        let o = self.block_offset(b);
        KernelParams {
            lambda_z: v[o],
            lambda_s: Some(v[o + 1]),
            beta: v[o + 2..o + self.block_len()].iter().map(|r| beta_from_rho(*r)).collect(),
        }
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

    pub fn names(&self, outputs: &[String], design: &[String], calib: &[String]) -> Vec<String> {
        let inputs: Vec<&String> = design.iter().chain(calib).collect();
        let mut n = Vec::with_capacity(self.len());
        for &(o, k) in &self.blocks {
            let tag = format!("{}_pc{}", outputs[o], k + 1);
            n.push(format!("lambda_z_{tag}"));
            n.push(format!("lambda_s_{tag}"));
            n.extend(inputs.iter().map(|v| format!("rho_{tag}_{v}")));
        }
        n.extend(outputs.iter().map(|o| format!("lambda_y_s_{o}")));
        if self.discrepancy {
            n.push("lambda_delta_z".into());
            n.extend(design.iter().map(|v| format!("rho_delta_{v}")));
        }
        n.extend(calib.iter().map(|v| format!("theta_{v}")));
        n
    }
}

/// Unit-scaled inputs shared by all blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientInputs {
    pub x_scale: InputScale,
    pub theta_scale: InputScale,
    pub x_sim: Vec<Vec<f64>>,
    pub theta_sim: Vec<Vec<f64>>,
    pub x_obs: Vec<Vec<f64>>,
}

fn scale_inputs(pr: &TransientProblem) -> Result<TransientInputs> {
    let p = pr.design_names.len();
    let mut min = vec![f64::INFINITY; p];
    let mut max = vec![f64::NEG_INFINITY; p];
    for r in pr.sim_design.iter().chain(&pr.obs_design) {
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
    let x_scale = InputScale { min, max };
    let theta_scale = InputScale::from_bounds(&pr.theta_bounds)?;
    Ok(TransientInputs {
        x_sim: pr.sim_design.iter().map(|r| x_scale.to_unit(r)).collect(),
        theta_sim: pr.sim_calib.iter().map(|r| theta_scale.to_unit(r)).collect(),
        x_obs: pr.obs_design.iter().map(|r| x_scale.to_unit(r)).collect(),
        x_scale,
        theta_scale,
    })
}

struct TransientTarget<'a> {
    inputs: &'a TransientInputs,
    reductions: &'a [OutputReduction],
    layout: &'a TransientLayout,
    priors: &'a PriorSpec,
    z_sim: DMatrix<f64>,
    x_obs: DMatrix<f64>,
    names: Vec<String>,
}

impl TransientTarget<'_> {
    fn n_blocks(&self) -> usize {
        self.layout.blocks.len()
    }

    fn block_data(&self, b: usize) -> DVector<f64> {
        let (o, k) = self.layout.blocks[b];
        let r = &self.reductions[o];
        let n = r.u.nrows();
        DVector::from_iterator(n + r.basis.w.ncols(), r.u.column(k).iter().copied().chain(r.basis.w.row(k).iter().copied()))
    }

    fn block_factor(&self, b: usize, v: &[f64]) -> Result<CholFactor> {
        let (o, k) = self.layout.blocks[b];
        let r = &self.reductions[o];
        let params = self.layout.block_params(b, v);
        let z_obs = obs_points(&self.inputs.x_obs, self.layout.theta(v), self.layout.p);
        let noise = vec![r.mult_u[k] / v[self.layout.i_noise(o)]; z_obs.nrows()];
        let sigma = CoupledBlock { z_obs: &z_obs, z_sim: &self.z_sim, eta: &params, obs: &params, noise_var: &noise, delta: None }.assemble()?;
        CholFactor::new(sigma, &format!("{} component {} covariance", r.name, k + 1))
    }

    fn block_loglik(&self, b: usize, v: &[f64]) -> f64 {
        match self.block_factor(b, v) {
            Ok(f) => gaussian_log_density(&self.block_data(b), &f),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn delta_loglik(&self, o: usize, v: &[f64]) -> f64 {
        let Some(dp) = self.layout.delta_params(v) else { return 0.0 };
        let r = &self.reductions[o];
        let Ok(kd) = build_cov(&self.x_obs, &self.x_obs, &dp, NuggetPolicy::None) else {
            return f64::NEG_INFINITY;
        };
        let lam = v[self.layout.i_noise(o)];
        let mut total = 0.0;
        for j in 0..r.v.ncols() {
            let mut s = kd.entries.clone();
            for i in 0..s.nrows() {
                s[(i, i)] += r.mult_v[j] / lam;
            }
            match CholFactor::new(s, "discrepancy coefficients") {
                Ok(f) => total += gaussian_log_density(&r.v.column(j).into_owned(), &f),
                Err(_) => return f64::NEG_INFINITY,
            }
        }
        total
    }

    fn residual_loglik(&self, o: usize, v: &[f64]) -> f64 {
        let r = &self.reductions[o];
        let lam = v[self.layout.i_noise(o)];
        0.5 * r.dof * lam.ln() - 0.5 * lam * r.rss
    }
}

impl LogTarget for TransientTarget<'_> {
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
        self.n_blocks() + 2 * self.layout.n_outputs + self.layout.len()
    }

    fn term(&self, x: &[f64], k: usize) -> f64 {
        let nb = self.n_blocks();
        let no = self.layout.n_outputs;
        if k < nb {
            self.block_loglik(k, x)
        } else if k < nb + no {
            self.delta_loglik(k - nb, x)
        } else if k < nb + 2 * no {
            self.residual_loglik(k - nb - no, x)
        } else {
            let i = k - nb - 2 * no;
            self.layout.kind(i).prior(self.priors).ln_pdf(x[i])
        }
    }

    fn terms_for(&self, i: usize) -> Vec<usize> {
        let l = self.layout;
        let nb = self.n_blocks();
        let no = l.n_outputs;
        let prior = nb + 2 * no + i;
        if i < nb * l.block_len() {
            vec![i / l.block_len(), prior]
        } else if i < l.i_delta() {
            let o = i - l.i_noise(0);
            let mut t: Vec<usize> = (0..nb).filter(|b| l.blocks[*b].0 == o).collect();
            t.extend([nb + o, nb + no + o, prior]);
            t
        } else if i < l.i_theta() {
            let mut t: Vec<usize> = (nb..nb + no).collect();
            t.push(prior);
            t
        } else {
            let mut t: Vec<usize> = (0..nb).collect();
            t.push(prior);
            t
        }
    }
}

/// Calibrated transient model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransientModel {
    pub schema_version: u32,
    pub problem: TransientProblem,
    pub inputs: TransientInputs,
    pub reductions: Vec<OutputReduction>,
    pub layout: TransientLayout,
    pub config: TransientConfig,
    pub names: Vec<String>,
    pub chains: Vec<PosteriorChain>,
    pub diagnostics: Option<Diagnostics>,
}

fn make_target<'a>(
    inputs: &'a TransientInputs,
    reductions: &'a [OutputReduction],
    layout: &'a TransientLayout,
    priors: &'a PriorSpec,
    names: Vec<String>,
) -> TransientTarget<'a> {
    let z_sim = sim_points(&inputs.x_sim, &inputs.theta_sim, layout.p, layout.q);
    let x_obs = DMatrix::from_fn(inputs.x_obs.len(), layout.p, |i, k| inputs.x_obs[i][k]);
    TransientTarget { inputs, reductions, layout, priors, z_sim, x_obs, names }
}

pub fn calibrate_transient(problem: &TransientProblem, config: &TransientConfig) -> Result<TransientModel> {
    problem.validate()?;
    config.priors.validate()?;
    config.mcmc.validate()?;
    let inputs = scale_inputs(problem)?;
    let reductions: Vec<OutputReduction> = problem.outputs.iter().map(|e| reduce_output(e, config)).collect::<Result<_>>()?;
    let blocks: Vec<(usize, usize)> =
        reductions.iter().enumerate().flat_map(|(o, r)| (0..r.basis.n_pu()).map(move |k| (o, k))).collect();
    let any_kernels = reductions.iter().any(|r| r.v.ncols() > 0);
    let layout = TransientLayout {
        p: problem.design_names.len(),
        q: problem.calib_names.len(),
        blocks,
        n_outputs: reductions.len(),
        discrepancy: config.discrepancy && any_kernels,
    };
    let out_names: Vec<String> = reductions.iter().map(|r| r.name.clone()).collect();
    let names = layout.names(&out_names, &problem.design_names, &problem.calib_names);

    // start each weight GP at its simulator-only MAP fit
    let z_sim = sim_points(&inputs.x_sim, &inputs.theta_sim, layout.p, layout.q);
    let fit_cfg = FitConfig { priors: config.priors.clone(), noise_free: false, max_evals: 600 };
    let starts: Vec<KernelParams> = layout
        .blocks
        .par_iter()
        .map(|&(o, k)| {
            let w = reductions[o].basis.w.row(k).transpose();
            fit_map(&z_sim, &w, &fit_cfg).map(|g| g.params().clone())
        })
        .collect::<Result<_>>()?;
    let mut base = Vec::with_capacity(layout.len());
    for s in &starts {
        base.push(s.lambda_z);
        base.push(s.lambda_s.unwrap_or(config.priors.lambda_s.mean()));
        base.extend(s.beta.iter().map(|b| rho_from_beta(*b).clamp(0.01, 0.999)));
    }
    for r in &reductions {
        let guess = if r.dof > 0.0 && r.rss > 0.0 { r.dof / r.rss } else { config.priors.lambda_noise.mean() };
        base.push(guess.clamp(1e-3, 1e8));
    }
    if layout.discrepancy {
        base.push(config.priors.lambda_delta.mean());
        base.extend(std::iter::repeat_n(0.9, layout.p));
    }
    let halton = ScrambledHalton::new(layout.q.max(1), crate::seed::derive_seed(config.mcmc.seed, "transient-init"));
    let inits: Vec<Vec<f64>> = (0..config.mcmc.n_chains)
        .map(|c| {
            let mut s = base.clone();
            if c == 0 {
                s.extend(std::iter::repeat_n(0.5, layout.q));
            } else {
                s.extend(halton.point(c as u64).into_iter().take(layout.q).map(|u| 0.1 + 0.8 * u));
            }
            s
        })
        .collect();

    let target = make_target(&inputs, &reductions, &layout, &config.priors, names.clone());
    let run = run_parallel_chains(&target, &inits, &config.mcmc)?;
    Ok(TransientModel {
        schema_version: crate::koh::MODEL_SCHEMA,
        problem: problem.clone(),
        inputs,
        reductions,
        layout,
        config: config.clone(),
        names,
        chains: run.chains,
        diagnostics: run.diagnostics,
    })
}

/// Pooled predictive curves of one output at one design point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePrediction {
    pub output: String,
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Simulator part only (mean curve plus basis expansion).
    pub eta_mean: Vec<f64>,
    pub delta_mean: Vec<f64>,
}

impl TransientModel {
    pub fn samples(&self) -> Vec<Vec<f64>> {
        pooled(&self.chains)
    }

    pub fn summary(&self) -> CalibrationSummary {
        summarize_chains(&self.names, &self.chains, self.layout.i_theta(), &self.inputs.theta_scale, self.diagnostics.clone())
    }

    pub fn theta_samples(&self) -> Vec<Vec<f64>> {
        let it = self.layout.i_theta();
        self.samples().iter().map(|r| self.inputs.theta_scale.from_unit(&r[it..])).collect()
    }

    /// Curves on each output's observation grid at physical design points.
    pub fn predict(&self, x_test: &[Vec<f64>], n_draws: usize) -> Result<Vec<Vec<CurvePrediction>>> {
        let p = self.layout.p;
        if let Some(r) = x_test.iter().find(|r| r.len() != p) {
            return Err(Error::DimensionMismatch(format!("test point has {} coordinates, expected {p}", r.len())));
        }
        let rows = self.samples();
        if rows.is_empty() {
            return Err(Error::InvalidArgument("model has no retained posterior samples".into()));
        }
        let x_unit: Vec<Vec<f64>> = x_test.iter().map(|r| self.inputs.x_scale.to_unit(r)).collect();
        crate::koh::warn_extrapolation(&x_unit);
        let draws = thin(&rows, n_draws.max(1));
        let target = make_target(&self.inputs, &self.reductions, &self.layout, &self.config.priors, self.names.clone());
        // per draw: per output, per point: (eta mean, delta mean, var) on the obs grid
        let per_draw: Vec<Vec<Vec<CurveMoments>>> =
            draws.par_iter().map(|v| draw_curves(&target, v, &x_unit)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(x_test.len());
        for j in 0..x_test.len() {
            let mut curves = Vec::with_capacity(self.reductions.len());
            for (o, r) in self.reductions.iter().enumerate() {
                let nt = r.t_obs.len();
                let mean_obs = interpolate_basis(
                    &DMatrix::from_column_slice(r.basis.mean_curve.len(), 1, &r.basis.mean_curve),
                    &self.problem.outputs[o].t_sim,
                    &r.t_obs,
                )?;
                let s = r.basis.scale;
                let mut c = CurvePrediction {
                    output: r.name.clone(),
                    t: r.t_obs.clone(),
                    mean: Vec::with_capacity(nt),
                    lower: Vec::with_capacity(nt),
                    upper: Vec::with_capacity(nt),
                    eta_mean: Vec::with_capacity(nt),
                    delta_mean: Vec::with_capacity(nt),
                };
                for ti in 0..nt {
                    let ms: Vec<f64> = per_draw.iter().map(|d| d[o][j].eta[ti] + d[o][j].delta[ti]).collect();
                    let ss: Vec<f64> = per_draw.iter().map(|d| d[o][j].var[ti].sqrt()).collect();
                    let base = mean_obs[(ti, 0)];
                    c.mean.push(base + s * stats::mean(&ms));
                    c.lower.push(base + s * stats::mixture_quantile(&ms, &ss, 0.025));
                    c.upper.push(base + s * stats::mixture_quantile(&ms, &ss, 0.975));
                    c.eta_mean.push(base + s * stats::mean(&per_draw.iter().map(|d| d[o][j].eta[ti]).collect::<Vec<_>>()));
                    c.delta_mean.push(s * stats::mean(&per_draw.iter().map(|d| d[o][j].delta[ti]).collect::<Vec<_>>()));
                }
                curves.push(c);
            }
            out.push(curves);
        }
        Ok(out)
    }
}

struct CurveMoments {
    eta: Vec<f64>,
    delta: Vec<f64>,
    var: Vec<f64>,
}

fn draw_curves(t: &TransientTarget, v: &[f64], x_unit: &[Vec<f64>]) -> Result<Vec<Vec<CurveMoments>>> {
    let l = t.layout;
    let np = x_unit.len();
    let theta = l.theta(v);
    let z_test = obs_points(x_unit, theta, l.p);
    let z_obs = obs_points(&t.inputs.x_obs, theta, l.p);
    let x_test = DMatrix::from_fn(np, l.p, |i, k| x_unit[i][k]);
    let mut out: Vec<Vec<CurveMoments>> = t
        .reductions
        .iter()
        .map(|r| {
            let nt = r.t_obs.len();
            (0..np).map(|_| CurveMoments { eta: vec![0.0; nt], delta: vec![0.0; nt], var: vec![0.0; nt] }).collect()
        })
        .collect();
    for (b, &(o, k)) in l.blocks.iter().enumerate() {
        let r = &t.reductions[o];
        let params = l.block_params(b, v);
        let f = t.block_factor(b, v)?;
        let alpha = f.solve(&t.block_data(b));
        let n = z_obs.nrows();
        let m = t.z_sim.nrows();
        let mut kx = DMatrix::zeros(n + m, np);
        kx.view_mut((0, 0), (n, np)).copy_from(&build_cov(&z_obs, &z_test, &params, NuggetPolicy::None)?.entries);
        kx.view_mut((n, 0), (m, np)).copy_from(&build_cov(&t.z_sim, &z_test, &params, NuggetPolicy::None)?.entries);
        let w = f.whiten(&kx);
        for j in 0..np {
            let mu = kx.column(j).dot(&alpha);
            let var = crate::gp::clamp_variance(params.variance() - w.column(j).norm_squared(), params.variance());
            for ti in 0..r.t_obs.len() {
                let kk = r.basis.k_obs[(ti, k)];
                out[o][j].eta[ti] += kk * mu;
                out[o][j].var[ti] += kk * kk * var;
            }
        }
    }
    if let Some(dp) = l.delta_params(v) {
        let kd = build_cov(&t.x_obs, &t.x_obs, &dp, NuggetPolicy::None)?.entries;
        let kx = build_cov(&t.x_obs, &x_test, &dp, NuggetPolicy::None)?.entries;
        for (o, r) in t.reductions.iter().enumerate() {
            let lam = v[l.i_noise(o)];
            for jk in 0..r.v.ncols() {
                let mut s = kd.clone();
                for i in 0..s.nrows() {
                    s[(i, i)] += r.mult_v[jk] / lam;
                }
                let f = CholFactor::new(s, "discrepancy coefficients")?;
                let alpha = f.solve(&r.v.column(jk).into_owned());
                let w = f.whiten(&kx);
                for j in 0..np {
                    let mu = kx.column(j).dot(&alpha);
                    let var = crate::gp::clamp_variance(dp.variance() - w.column(j).norm_squared(), dp.variance());
                    for ti in 0..r.t_obs.len() {
                        let d = r.delta_perp[(ti, jk)];
                        out[o][j].delta[ti] += d * mu;
                        out[o][j].var[ti] += d * d * var;
                    }
                }
            }
        }
    }
    Ok(out)
}
