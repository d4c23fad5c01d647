use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bhm_core::bench::{generate_problem, write_bundle, BenchKind, BenchOptions, BundleManifest};
use bhm_core::data::{Dataset, Role};
use bhm_core::ga::ga_optimize;
use bhm_core::koh::{calibrate, CalibratedModel, CalibrationProblem};
use bhm_core::multisource::{build_legacy_models, cross_validate_fusion, fuse_predict, weight_map, FusionConfig, LegacySource, ValidityModel};
use bhm_core::portable::{distill, pbhm_predict, PortableModel};
use bhm_core::qmc::ScrambledHalton;
use bhm_core::robust::{surrogate_moments, GaussianInput};
use bhm_core::seed::derive_seed;
use bhm_core::sobol::{sobol_correlated, sobol_indices, CopulaInput, CorrelatedConfig, SobolConfig, SobolReport};
use bhm_core::surrogate::{FitConfig, InputScale, Surrogate};
use bhm_core::transient::{calibrate_transient, TransientModel, TransientProblem};
use log::info;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::artifacts::{header, histogram_header, histogram_rows, num, ModelFile, OutDir, MODEL_FILE_SCHEMA};
use crate::config::{self, *};
use crate::error::{CliError, CliResult, Context};

const REPORT_SCHEMA: u32 = 1;

/// Output directory: flag, then `BHM_OUT_DIR`, then the config, then
/// `out/` next to the config file.
pub fn resolve_out(flag: Option<&Path>, from_config: Option<&Path>, base: &Path) -> CliResult<OutDir> {
    let dir = if let Some(f) = flag {
        f.to_path_buf()
    } else if let Some(env) = std::env::var_os("BHM_OUT_DIR").filter(|v| !v.is_empty()) {
        PathBuf::from(env)
    } else if let Some(c) = from_config {
        base.join(c)
    } else {
        base.join("out")
    };
    OutDir::create(dir)
}

fn output_index(ds: &Dataset, name: Option<&str>) -> CliResult<usize> {
    if ds.output_names.is_empty() {
        return Err(CliError::Config("data has no output column".into()));
    }
    match name {
        None => Ok(0),
        Some(n) => ds.output_names.iter().position(|o| o == n).ok_or_else(|| CliError::Config(format!("output: no output column named '{n}'"))),
    }
}

fn column_range(rows: &[Vec<f64>], k: usize) -> (f64, f64) {
    rows.iter().map(|r| r[k]).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
}

/// Design points in the order of `names`, taken from `ds` by column name.
fn design_by_name(ds: &Dataset, names: &[String]) -> CliResult<Vec<Vec<f64>>> {
    let idx: Vec<usize> = names
        .iter()
        .map(|n| ds.design_names.iter().position(|d| d == n).ok_or_else(|| CliError::Config(format!("points: missing design column '{n}'"))))
        .collect::<CliResult<_>>()?;
    Ok(ds.design.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect())
}

fn print_theta(summary: &bhm_core::koh::CalibrationSummary) {
    for t in &summary.theta {
        println!("{}: mean {:.6} 95% [{:.6}, {:.6}]", t.name, t.mean, t.q025, t.q975);
    }
    if let Some(d) = &summary.diagnostics {
        println!("max split-Rhat {:.4}, min ESS {:.0}", d.max_rhat, d.min_ess);
    }
}

fn theta_histograms(out: &OutDir, names: &[String], samples: &[Vec<f64>], bins: usize) -> CliResult<()> {
    let mut rows = Vec::new();
    for (k, n) in names.iter().enumerate() {
        let x: Vec<f64> = samples.iter().map(|r| r[k]).collect();
        rows.extend(histogram_rows(n, &x, bins));
    }
    out.csv("plots/posterior_hist.csv", &histogram_header(), &rows)?;
    Ok(())
}

// ------------------------------------------------------------ calibrate

pub fn run_calibrate(config_path: &Path, out_flag: Option<&Path>, require_time: bool) -> CliResult<()> {
    let cfg: CalibrateConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    let transient = cfg.sim.has_time() || cfg.obs.has_time();
    if require_time && !transient {
        return Err(CliError::Config("sim.roles: calibrate-transient needs a column with role 'time'".into()));
    }
    let sim = cfg.sim.load(&base)?;
    let obs = cfg.obs.load(&base)?;
    let theta_bounds = cfg.bounds_for(&sim.calib_names)?;
    let out = resolve_out(out_flag, cfg.output_dir.as_deref(), &base)?;
    if transient {
        let problem = TransientProblem::from_datasets(&sim, &obs, theta_bounds).context("transient")?;
        info!("calibrating {} outputs over {} runs", problem.outputs.len(), problem.n_sim());
        let model = calibrate_transient(&problem, &cfg.transient_config()).context("transient calibration")?;
        write_transient(&out, &model, &cfg)
    } else {
        let output = output_index(&sim, cfg.output.as_deref())?;
        let problem = CalibrationProblem { sim, obs, theta_bounds, output };
        info!("calibrating {} simulations against {} observations", problem.sim.len(), problem.obs.len());
        let model = calibrate(&problem, &cfg.koh()).context("koh-calibration")?;
        write_scalar(&out, &model, &cfg)
    }
}

fn write_scalar(out: &OutDir, model: &CalibratedModel, cfg: &CalibrateConfig) -> CliResult<()> {
    let summary = model.summary();
    out.json("summary.json", &summary)?;
    out.json("diagnostics.json", &model.diagnostics)?;
    out.chains(&model.chains)?;
    out.json("model.json", &ModelFile::Scalar { schema_version: MODEL_FILE_SCHEMA, model: Box::new(model.clone()) })?;
    let names: Vec<String> = summary.theta.iter().map(|t| t.name.clone()).collect();
    theta_histograms(out, &names, &model.theta_samples(), cfg.histogram_bins)?;

    let problem = &model.problem;
    let p = problem.n_design();
    let pts: Vec<Vec<f64>> = if p == 1 {
        let (a, b) = column_range(&problem.sim.design.iter().chain(&problem.obs.design).cloned().collect::<Vec<_>>(), 0);
        (0..101).map(|i| vec![a + (b - a) * i as f64 / 100.0]).collect()
    } else {
        problem.obs.design.clone()
    };
    let pred = model.predict(&pts, cfg.predict_draws).context("koh prediction")?;
    let mut head = problem.sim.design_names.clone();
    head.extend(header(&["mean", "sd", "lower", "upper", "eta_mean", "delta_mean", "delta_lower", "delta_upper"]));
    let rows: Vec<Vec<String>> = pts
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r: Vec<String> = x.iter().map(|v| num(*v)).collect();
            for v in [pred.mean[i], pred.sd[i], pred.lower[i], pred.upper[i], pred.eta_mean[i], pred.delta_mean[i], pred.delta_lower[i], pred.delta_upper[i]] {
                r.push(num(v));
            }
            r
        })
        .collect();
    out.csv("plots/credible_band.csv", &head, &rows)?;
    print_theta(&summary);
    Ok(())
}

fn curve_rows(model: &TransientModel, pts: &[Vec<f64>], n_draws: usize) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let preds = model.predict(pts, n_draws).context("transient prediction")?;
    let mut head = header(&["output", "point"]);
    head.extend(model.problem.design_names.iter().cloned());
    head.extend(header(&["t", "mean", "lower", "upper", "eta_mean", "delta_mean"]));
    let mut rows = Vec::new();
    for (i, per_output) in preds.iter().enumerate() {
        for c in per_output {
            for j in 0..c.t.len() {
                let mut r = vec![c.output.clone(), i.to_string()];
                r.extend(pts[i].iter().map(|v| num(*v)));
                for v in [c.t[j], c.mean[j], c.lower[j], c.upper[j], c.eta_mean[j], c.delta_mean[j]] {
                    r.push(num(v));
                }
                rows.push(r);
            }
        }
    }
    Ok((head, rows))
}

fn write_transient(out: &OutDir, model: &TransientModel, cfg: &CalibrateConfig) -> CliResult<()> {
    let summary = model.summary();
    out.json("summary.json", &summary)?;
    out.json("diagnostics.json", &model.diagnostics)?;
    out.chains(&model.chains)?;
    out.json("model.json", &ModelFile::Transient { schema_version: MODEL_FILE_SCHEMA, model: Box::new(model.clone()) })?;
    let names: Vec<String> = summary.theta.iter().map(|t| t.name.clone()).collect();
    theta_histograms(out, &names, &model.theta_samples(), cfg.histogram_bins)?;
    let (head, rows) = curve_rows(model, &model.problem.obs_design, cfg.predict_draws)?;
    out.csv("plots/credible_band.csv", &head, &rows)?;
    let bases: Vec<serde_json::Value> = model
        .reductions
        .iter()
        .map(|r| serde_json::json!({ "output": r.name, "n_pu": r.basis.n_pu(), "energy": r.basis.energy_captured }))
        .collect();
    out.json("reduction.json", &serde_json::json!({ "schema_version": REPORT_SCHEMA, "outputs": bases }))?;
    print_theta(&summary);
    Ok(())
}

// ------------------------------------------------------------ predict

pub fn run_predict(config_path: &Path, out_flag: Option<&Path>, portable: bool) -> CliResult<()> {
    let cfg: PredictConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    let points = cfg.points.load(&base)?;
    let model_path = base.join(&cfg.model);
    let text = std::fs::read_to_string(&model_path).map_err(|e| CliError::Config(format!("model: {}: {e}", model_path.display())))?;
    let out = resolve_out(out_flag, cfg.output_dir.as_deref(), &base)?;
    if portable {
        let model: PortableModel = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("model: {}: {e}", model_path.display())))?;
        model.validate().context("portable model")?;
        let x = design_by_name(&points, &model.input_names)?;
        let xm = DMatrix::from_fn(x.len(), model.input_names.len(), |i, k| x[i][k]);
        let pred = pbhm_predict(&model, &xm).context("portable prediction")?;
        let mut head = model.input_names.clone();
        head.push(model.output_name.clone());
        let rows: Vec<Vec<String>> = x.iter().zip(&pred).map(|(r, y)| r.iter().chain(std::iter::once(y)).map(|v| num(*v)).collect()).collect();
        out.csv("predictions.csv", &head, &rows)?;
        return Ok(());
    }
    let model: ModelFile = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("model: {}: {e}", model_path.display())))?;
    match model {
        ModelFile::Scalar { model, .. } => {
            let x = design_by_name(&points, &model.problem.sim.design_names)?;
            let pred = model.predict(&x, cfg.n_draws).context("koh prediction")?;
            let mut head = model.problem.sim.design_names.clone();
            head.extend(header(&["mean", "sd", "lower", "upper", "delta_mean", "delta_sd"]));
            let rows: Vec<Vec<String>> = x
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    r.iter().chain([pred.mean[i], pred.sd[i], pred.lower[i], pred.upper[i], pred.delta_mean[i], pred.delta_sd[i]].iter()).map(|v| num(*v)).collect()
                })
                .collect();
            out.csv("predictions.csv", &head, &rows)?;
        }
        ModelFile::Transient { model, .. } => {
            let x = design_by_name(&points, &model.problem.design_names)?;
            let (head, rows) = curve_rows(&model, &x, cfg.n_draws)?;
            out.csv("predictions.csv", &head, &rows)?;
        }
        ModelFile::Surrogate { archive, .. } => {
            let sur = Surrogate::from_archive(&archive).context("surrogate")?;
            let x = design_by_name(&points, &sur.input_names)?;
            let mut head = sur.input_names.clone();
            head.extend(header(&["mean", "sd"]));
            let rows: Vec<Vec<String>> = x
                .iter()
                .map(|r| {
                    let (m, s) = sur.predict(r);
                    r.iter().chain([m, s].iter()).map(|v| num(*v)).collect()
                })
                .collect();
            out.csv("predictions.csv", &head, &rows)?;
        }
    }
    Ok(())
}

// ------------------------------------------------------------ surrogates

fn load_surrogate_file(path: &Path) -> CliResult<Surrogate> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("model: {}: {e}", path.display())))?;
    match serde_json::from_str::<ModelFile>(&text).map_err(|e| CliError::Config(format!("model: {}: {e}", path.display())))? {
        ModelFile::Surrogate { archive, .. } => Surrogate::from_archive(&archive).context("surrogate"),
        _ => Err(CliError::Config(format!("model: {} is a calibration model, not a surrogate", path.display()))),
    }
}

/// Fits or loads the surrogate. `bounds` fixes the input domain of a fit;
/// without it the data range is used.
fn build_surrogate(src: &SurrogateSource, base: &Path, seed: u64, bounds: Option<&BTreeMap<String, (f64, f64)>>) -> CliResult<Surrogate> {
    match (&src.data, &src.model) {
        (Some(_), Some(_)) => Err(CliError::Config("surrogate: set either 'data' or 'model', not both".into())),
        (None, None) => Err(CliError::Config("surrogate: one of 'data' or 'model' is required".into())),
        (None, Some(m)) => load_surrogate_file(&base.join(m)),
        (Some(d), None) => {
            let ds = d.load(base)?;
            let k = output_index(&ds, src.output.as_deref())?;
            let x = ds.design_matrix();
            let scale = match bounds {
                Some(b) => {
                    let v: Vec<(f64, f64)> = ds
                        .design_names
                        .iter()
                        .map(|n| b.get(n).copied().ok_or_else(|| CliError::Config(format!("bounds: missing entry for '{n}'"))))
                        .collect::<CliResult<_>>()?;
                    InputScale::from_bounds(&v).context("bounds")?
                }
                None => InputScale::from_data(&x),
            };
            let fit = if src.deterministic { FitConfig::deterministic() } else { FitConfig::default() };
            let mut sur = Surrogate::fit_with_scale(&x, &ds.output_column(k), scale, &fit).context("gp-core")?;
            if src.posterior_draws > 0 {
                sur = sur.with_posterior_draws(&fit, &src.mcmc.to_config(seed, "surrogate"), src.posterior_draws).context("surrogate posterior")?;
            }
            sur.input_names = ds.design_names.clone();
            sur.output_name = ds.output_names[k].clone();
            Ok(sur)
        }
    }
}

fn ordered<T: Copy>(map: &BTreeMap<String, T>, names: &[String], key: &str) -> CliResult<Vec<T>> {
    names.iter().map(|n| map.get(n).copied().ok_or_else(|| CliError::Config(format!("{key}: missing entry for '{n}'")))).collect()
}

// ------------------------------------------------------------ robust-opt

#[derive(Serialize)]
struct RobustOptReport {
    schema_version: u32,
    objective: bhm_core::robust::RobustForm,
    best_x: BTreeMap<String, f64>,
    best: f64,
    mean: f64,
    sd: f64,
    function_calls: usize,
    generations: usize,
}

pub fn run_robust_opt(config_path: &Path, out_flag: Option<&Path>) -> CliResult<()> {
    let cfg: RobustOptConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    let sur = build_surrogate(&cfg.surrogate, &base, cfg.seed, Some(&cfg.bounds))?;
    let names = sur.input_names.clone();
    let bounds = ordered(&cfg.bounds, &names, "bounds")?;
    let d = names.len();
    let s_phys = match &cfg.input_uncertainty {
        InputUncertainty::Sd(sd) => {
            let v = ordered(sd, &names, "input_uncertainty.sd")?;
            DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(d, v.iter().map(|s| s * s)))
        }
        InputUncertainty::Covariance(rows) => {
            if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                return Err(CliError::Config(format!("input_uncertainty.covariance: expected a {d}x{d} matrix")));
            }
            DMatrix::from_fn(d, d, |i, j| rows[i][j])
        }
    };
    let s_unit = sur.input_scale.covariance_to_unit(&s_phys);
    GaussianInput::new(vec![0.5; d], s_unit.clone()).context("input_uncertainty")?;
    let out = resolve_out(out_flag, cfg.output_dir.as_deref(), &base)?;
    let form = cfg.objective;
    let moments = |x: &[f64]| GaussianInput::new(sur.input_scale.to_unit(x), s_unit.clone()).and_then(|g| surrogate_moments(&sur, &g));
    let objective = |x: &[f64]| moments(x).map(|m| form.apply(m)).unwrap_or(f64::INFINITY);
    let res = ga_optimize(objective, &bounds, &cfg.ga.to_config(cfg.seed)).context("robust-gp optimizer")?;
    if !res.best.is_finite() {
        return Err(CliError::Core { context: "robust-gp".into(), source: bhm_core::Error::NonFinite("robust objective at every candidate".into()) });
    }
    let mo = moments(&res.best_x).context("robust-gp")?;
    let report = RobustOptReport {
        schema_version: REPORT_SCHEMA,
        objective: form,
        best_x: names.iter().cloned().zip(res.best_x.iter().copied()).collect(),
        best: res.best,
        mean: mo.m,
        sd: mo.v.max(0.0).sqrt(),
        function_calls: res.function_calls,
        generations: res.history.len().saturating_sub(1),
    };
    out.json("robust_opt.json", &report)?;
    let rows: Vec<Vec<String>> = res.history.iter().map(|g| vec![g.generation.to_string(), num(g.best), g.function_calls.to_string()]).collect();
    out.csv("plots/ga_history.csv", &header(&["generation", "best", "function_calls"]), &rows)?;
    out.json("surrogate.json", &ModelFile::Surrogate { schema_version: MODEL_FILE_SCHEMA, archive: sur.to_archive() })?;
    println!("best {:.6} at {:?} after {} function calls", res.best, res.best_x, res.function_calls);
    Ok(())
}

// ------------------------------------------------------------ sensitivity

fn sobol_bars(out: &OutDir, report: &SobolReport) -> CliResult<()> {
    let rows: Vec<Vec<String>> = report
        .indices
        .iter()
        .map(|i| {
            vec![
                i.label.clone(),
                i.order.to_string(),
                num(i.total),
                num(i.structural),
                num(i.correlative),
                i.se.map(num).unwrap_or_default(),
            ]
        })
        .collect();
    out.csv("plots/sobol_bars.csv", &header(&["index", "order", "total", "structural", "correlative", "se"]), &rows)?;
    Ok(())
}

pub fn run_sensitivity(config_path: &Path, out_flag: Option<&Path>) -> CliResult<()> {
    let cfg: SensitivityConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    let sur = build_surrogate(&cfg.surrogate, &base, cfg.seed, cfg.bounds.as_ref())?;
    let names = sur.input_names.clone();
    let out = resolve_out(out_flag, cfg.output_dir.as_deref(), &base)?;
    let report = match &cfg.correlated {
        None => sobol_indices(&sur.members(), &names, &cfg.sobol()).context("sobol")?,
        Some(c) => {
            let d = names.len();
            if c.correlation.len() != d || c.correlation.iter().any(|r| r.len() != d) {
                return Err(CliError::Config(format!("correlated.correlation: expected a {d}x{d} matrix")));
            }
            let input = CopulaInput {
                marginals: ordered(&c.marginals, &names, "correlated.marginals")?,
                correlation: DMatrix::from_fn(d, d, |i, j| c.correlation[i][j]),
            };
            let cc = CorrelatedConfig { max_order: cfg.max_order, degree: c.degree, samples: c.samples, seed: derive_seed(cfg.seed, "sensitivity") };
            sobol_correlated(|x| sur.predict_mean(x), &input, &names, &cc).context("correlated sobol")?
        }
    };
    out.json("sobol_report.json", &report)?;
    sobol_bars(&out, &report)?;
    out.json("surrogate.json", &ModelFile::Surrogate { schema_version: MODEL_FILE_SCHEMA, archive: sur.to_archive() })?;
    for i in report.indices.iter().filter(|i| i.order == 1) {
        println!("{}: {:.4}", i.label, i.total);
    }
    Ok(())
}

// ------------------------------------------------------------ distill

pub fn run_distill(config_path: &Path, out_flag: Option<&Path>) -> CliResult<()> {
    let cfg: DistillConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    let sur = load_surrogate_file(&base.join(&cfg.model))?;
    let out = resolve_out(out_flag, cfg.output_dir.as_deref(), &base)?;
    let sobol = SobolConfig { max_order: sur.dim().min(2), seed: derive_seed(cfg.seed, "distill-sobol"), ..SobolConfig::default() };
    let report = sobol_indices(&sur.members(), &sur.input_names, &sobol).context("sobol")?;
    let model = distill(&sur, &report, &cfg.portable_config()).context("portable")?;
    out.json("portable.json", &model)?;
    out.json("sobol_report.json", &report)?;
    println!("{} terms capturing {:.4} of the variance", model.terms.len(), model.captured_fraction);
    Ok(())
}

// ------------------------------------------------------------ fuse

/// Tensor grid for one or two design inputs, a Halton design beyond that.
fn weight_grid(bounds: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let at = |b: (f64, f64), i: usize| if n > 1 { b.0 + (b.1 - b.0) * i as f64 / (n - 1) as f64 } else { 0.5 * (b.0 + b.1) };
    match bounds.len() {
        1 => (0..n).map(|i| vec![at(bounds[0], i)]).collect(),
        2 => (0..n * n).map(|i| vec![at(bounds[0], i % n), at(bounds[1], i / n)]).collect(),
        d => ScrambledHalton::new(d, derive_seed(seed, "weight-grid"))
            .sample(n * n)
            .into_iter()
            .map(|u| u.iter().zip(bounds).map(|(v, b)| b.0 + v * (b.1 - b.0)).collect())
            .collect(),
    }
}

#[derive(Serialize)]
struct FusionSummary {
    schema_version: u32,
    ids: Vec<String>,
    n_anchors: usize,
    max_weight_sum_error: f64,
    cv: Option<bhm_core::multisource::FusionCvReport>,
}

pub fn run_fuse(config_path: &Path, out_flag: Option<&Path>) -> CliResult<()> {
    let cfg: FuseConfig = config::load(config_path)?;
    let base = config::base_dir(config_path);
    let new_data = cfg.new_system.load(&base)?;
    let sources: Vec<LegacySource> = cfg
        .legacy
        .iter()
        .map(|l| {
            let data = bhm_core::data::ingest_dataset(&base.join(&l.path), &l.roles).context("data")?;
            let extra_bounds = ordered(&l.extra_bounds, &data.calib_names, &format!("legacy[{}].extra_bounds", l.id))?;
            Ok(LegacySource { id: l.id.clone(), data, extra_bounds })
        })
        .collect::<CliResult<_>>()?;
    let points = match &cfg.points {
        Some(p) => design_by_name(&p.load(&base)?, &new_data.design_names)?,
        None => new_data.design.clone(),
    };
    let p = new_data.design_names.len();
    let grid_bounds: Vec<(f64, f64)> = match &cfg.bounds {
        Some(b) => ordered(b, &new_data.design_names, "bounds")?,
        None => (0..p).map(|k| column_range(&new_data.design, k)).collect(),
    };
    let out = resolve_out(out_flag, cfg.output_dir.as_deref(), &base)?;

    let koh = cfg.koh();
    let models = build_legacy_models(&new_data, &sources, &koh).context("multisource")?;
    let validity = ValidityModel::fit(&models, &new_data.design, &new_data.output_column(0), cfg.predict_draws).context("multisource validity")?;
    let fused = fuse_predict(&models, &validity, &points, cfg.predict_draws).context("multisource fusion")?;
    let ids = validity.ids.clone();

    let mut head = new_data.design_names.clone();
    head.extend(header(&["mean", "sd"]));
    for prefix in ["weight", "mean", "sd"] {
        head.extend(ids.iter().map(|id| format!("{prefix}_{id}")));
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let mut r: Vec<String> = x.iter().map(|v| num(*v)).collect();
            r.push(num(fused.mean[i]));
            r.push(num(fused.sd[i]));
            r.extend(fused.weights[i].iter().map(|v| num(*v)));
            r.extend(fused.model_means.iter().map(|m| num(m[i])));
            r.extend(fused.model_sds.iter().map(|s| num(s[i])));
            r
        })
        .collect();
    out.csv("fused_predictions.csv", &head, &rows)?;

    let grid = weight_grid(&grid_bounds, cfg.grid_points, cfg.seed);
    let w = weight_map(&validity, &grid);
    let mut head = new_data.design_names.clone();
    head.extend(ids.iter().map(|id| format!("weight_{id}")));
    let rows: Vec<Vec<String>> = grid.iter().enumerate().map(|(i, x)| x.iter().copied().chain(w.row(i).iter().copied()).map(num).collect()).collect();
    out.csv("plots/weight_map.csv", &head, &rows)?;

    let sum_err = fused
        .weights
        .iter()
        .map(|r| r.iter().sum::<f64>())
        .chain((0..w.nrows()).map(|i| w.row(i).sum()))
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    let cv = match cfg.cv_folds {
        Some(f) => Some(cross_validate_fusion(&new_data, &sources, f, &FusionConfig { koh, predict_draws: cfg.predict_draws }).context("fusion cross-validation")?),
        None => None,
    };
    if let Some(c) = &cv {
        println!("{}-fold CV RMSE: fused {:.6}, single {:?}", c.folds, c.fused_rmse, c.single_rmse);
    }
    out.json(
        "fusion_summary.json",
        &FusionSummary { schema_version: REPORT_SCHEMA, ids, n_anchors: validity.anchors.len(), max_weight_sum_error: sum_err, cv },
    )?;
    Ok(())
}

// ------------------------------------------------------------ bench

fn data_file(m: &BundleManifest, name: &str) -> CliResult<DataFile> {
    let f = m.file(name).context("bench")?;
    Ok(DataFile { path: PathBuf::from(&f.path), roles: f.roles.clone() })
}

fn design_bounds(m: &BundleManifest, df: &DataFile) -> BTreeMap<String, (f64, f64)> {
    df.roles.iter().filter(|(_, r)| **r == Role::Design).filter_map(|(n, _)| m.bounds.get(n).map(|b| (n.clone(), *b))).collect()
}

fn surrogate_from(df: DataFile) -> SurrogateSource {
    SurrogateSource { data: Some(df), model: None, output: None, deterministic: true, posterior_draws: 0, mcmc: McmcSettings::default() }
}

pub fn run_bench(kind: BenchKind, seed: u64, out_flag: Option<&Path>) -> CliResult<()> {
    let dir = match out_flag {
        Some(d) => d.to_path_buf(),
        None => std::env::var_os("BHM_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(format!("bench-{kind}-{seed}"))),
    };
    let (bundle, truth) = generate_problem(kind, seed, &BenchOptions::default()).context("bench")?;
    let m = write_bundle(&dir, seed, &bundle, &truth).context("bench")?;
    let out = OutDir::create(dir)?;
    let (name, written) = match kind {
        BenchKind::Rod => {
            let cfg = CalibrateConfig {
                schema_version: CONFIG_SCHEMA,
                seed,
                output_dir: None,
                sim: data_file(&m, "sim")?,
                obs: data_file(&m, "obs")?,
                output: None,
                theta_bounds: m.bounds.clone(),
                priors: Default::default(),
                mcmc: McmcSettings::default(),
                discrepancy: true,
                tie_obs_params: true,
                predict_draws: 100,
                transient: TransientSettings::default(),
                histogram_bins: 30,
            };
            ("calibrate.json", out.json("calibrate.json", &cfg)?)
        }
        BenchKind::Ishigami => {
            let df = data_file(&m, "data")?;
            let cfg = SensitivityConfig {
                schema_version: CONFIG_SCHEMA,
                seed,
                output_dir: None,
                bounds: Some(design_bounds(&m, &df)),
                surrogate: surrogate_from(df),
                method: bhm_core::sobol::SobolMethod::Analytic,
                max_order: 2,
                qmc_points: SobolConfig::default().qmc_points,
                correlated: None,
            };
            ("sensitivity.json", out.json("sensitivity.json", &cfg)?)
        }
        BenchKind::RobustDemo => {
            let df = data_file(&m, "data")?;
            let cfg = RobustOptConfig {
                schema_version: CONFIG_SCHEMA,
                seed,
                output_dir: None,
                bounds: design_bounds(&m, &df),
                surrogate: surrogate_from(df),
                input_uncertainty: InputUncertainty::Sd(m.input_sd.clone()),
                objective: bhm_core::robust::RobustForm::MeanPlusKSd { k: 3.0 },
                ga: GaSettings::default(),
            };
            ("robust-opt.json", out.json("robust-opt.json", &cfg)?)
        }
        BenchKind::LegacyFamily => {
            let legacy = m
                .files
                .iter()
                .filter(|f| f.name != "new")
                .map(|f| LegacyFile {
                    id: f.name.clone(),
                    path: PathBuf::from(&f.path),
                    roles: f.roles.clone(),
                    extra_bounds: f
                        .roles
                        .iter()
                        .filter(|(_, r)| **r == Role::Calibration)
                        .filter_map(|(n, _)| m.bounds.get(n).map(|b| (n.clone(), *b)))
                        .collect(),
                })
                .collect();
            let cfg = FuseConfig {
                schema_version: CONFIG_SCHEMA,
                seed,
                output_dir: None,
                new_system: data_file(&m, "new")?,
                legacy,
                points: None,
                grid_points: 21,
                bounds: None,
                priors: Default::default(),
                mcmc: McmcSettings { n_steps: 3000, burn_in: 1000, n_chains: 2, ..McmcSettings::default() },
                discrepancy: true,
                predict_draws: 50,
                cv_folds: None,
            };
            ("fuse.json", out.json("fuse.json", &cfg)?)
        }
    };
    println!("wrote {kind} bundle (seed {seed}) to {}; run config {name}", out.root().display());
    info!("config at {}", written.display());
    Ok(())
}
