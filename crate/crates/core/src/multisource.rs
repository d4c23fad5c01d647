//! Fusion of models built from several legacy data sources.
//!
//! Each legacy source is calibrated against the new-system data as if it were
//! simulation output. At the new-system points every model gets a validity
//! score N(y*; μ, σ²)/σ²; a GP over logit validity interpolates the scores
//! and the normalized weights mix the model predictions.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::koh::{calibrate, CalibratedModel, CalibrationProblem, KohConfig};
use crate::stats;
use crate::surrogate::{FitConfig, Surrogate};

/// One legacy data set. Columns it has beyond the new system's design
/// variables are calibration inputs with the given bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegacySource {
    pub id: String,
    pub data: Dataset,
    #[serde(default)]
    pub extra_bounds: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegacyModel {
    pub id: String,
    pub calibrated: CalibratedModel,
    pub extra_variables: Vec<String>,
}

/// Predictive mean and latent sd at design points, plus the posterior mean
/// observation-noise variance (physical units).
#[derive(Clone, Debug, PartialEq)]
pub struct SourcePrediction {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub noise_var: f64,
}

impl LegacyModel {
    pub fn predict(&self, x: &[Vec<f64>], n_draws: usize) -> Result<SourcePrediction> {
        let p = self.calibrated.predict(x, n_draws)?;
        let model = &self.calibrated;
        let samples = model.samples();
        let s = model.standardized.scale.sd;
        let noise_var = samples.iter().map(|v| 1.0 / model.layout.noise_precision(v)).sum::<f64>() / samples.len() as f64 * s * s;
        Ok(SourcePrediction { mean: p.mean, sd: p.sd, noise_var })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub koh: KohConfig,
    pub predict_draws: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { koh: KohConfig::default(), predict_draws: 50 }
    }
}

/// Calibrates one KOH model per legacy source, concurrently. Chains of
/// source k use the configured seed offset by k.
pub fn build_legacy_models(new_data: &Dataset, sources: &[LegacySource], cfg: &KohConfig) -> Result<Vec<LegacyModel>> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("at least one legacy source is required".into()));
    }
    if !new_data.calib_names.is_empty() {
        return Err(Error::Data("new-system data must not contain calibration columns".into()));
    }
    let problems: Vec<CalibrationProblem> = sources
        .iter()
        .map(|s| {
            if s.data.design_names != new_data.design_names {
                return Err(Error::Data(format!(
                    "legacy source {} has design variables {:?}, new system has {:?}",
                    s.id, s.data.design_names, new_data.design_names
                )));
            }
            if s.data.output_names != new_data.output_names {
                return Err(Error::Data(format!("legacy source {} outputs {:?} differ from new system", s.id, s.data.output_names)));
            }
            if s.extra_bounds.len() != s.data.calib_names.len() {
                return Err(Error::Data(format!(
                    "legacy source {}: {} extra variables but {} bounds",
                    s.id,
                    s.data.calib_names.len(),
                    s.extra_bounds.len()
                )));
            }
            let mut obs = new_data.clone();
            obs.calib = Vec::new();
            Ok(CalibrationProblem { sim: s.data.clone(), obs, theta_bounds: s.extra_bounds.clone(), output: 0 })
        })
        .collect::<Result<_>>()?;
    problems
        .par_iter()
        .zip(sources)
        .enumerate()
        .map(|(k, (pr, s))| {
            let mut c = cfg.clone();
            c.mcmc.seed = cfg.mcmc.seed.wrapping_add(k as u64);
            Ok(LegacyModel { id: s.id.clone(), calibrated: calibrate(pr, &c)?, extra_variables: s.data.calib_names.clone() })
        })
        .collect()
}

/// Unnormalized validity N(y; μ, σ²)·σ⁻², with σ floored at `sigma_min`.
pub fn validity_at_anchor(mu: f64, sigma: f64, y: f64, sigma_min: f64) -> f64 {
    let s = sigma.max(sigma_min);
    stats::normal_pdf((y - mu) / s) / s / (s * s)
}

/// Normalizes weights to sum 1; all-zero (or non-finite) input falls back
/// to uniform.
pub fn normalize_weights(w: &[f64]) -> Vec<f64> {
    let clean: Vec<f64> = w.iter().map(|v| if v.is_finite() { v.clamp(0.0, f64::MAX) } else { 0.0 }).collect();
    let sum: f64 = clean.iter().sum();
    if !(sum > 1e-300) || !sum.is_finite() {
        warn!("all model-validity weights vanish; using uniform weights");
        return vec![1.0 / w.len() as f64; w.len()];
    }
    let mut out: Vec<f64> = clean.iter().map(|v| (v / sum).clamp(0.0, 1.0)).collect();
    // absorb rounding so the weights sum to 1
    let err: f64 = 1.0 - out.iter().sum::<f64>();
    let imax = (0..out.len()).max_by(|&a, &b| out[a].total_cmp(&out[b])).expect("non-empty");
    out[imax] = (out[imax] + err).clamp(0.0, 1.0);
    out
}

const LOGIT_CLIP: f64 = 1e-6;

fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_CLIP, 1.0 - LOGIT_CLIP);
    (p / (1.0 - p)).ln()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[derive(Clone, Debug)]
enum ValidityComponent {
    Constant(f64),
    Gp(Box<Surrogate>),
}

/// Input-dependent weights over K models.
#[derive(Clone, Debug)]
pub struct ValidityModel {
    pub ids: Vec<String>,
    pub anchors: Vec<Vec<f64>>,
    /// Normalized weights at the anchors, one row per anchor.
    pub anchor_weights: Vec<Vec<f64>>,
    components: Vec<ValidityComponent>,
}

impl ValidityModel {
    /// Fits validity GPs at anchor points (x*, y*). With fewer than two
    /// anchors the weights are constant.
    pub fn fit(models: &[LegacyModel], x: &[Vec<f64>], y: &[f64], n_draws: usize) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidArgument("no models to weight".into()));
        }
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch(format!("{} anchor inputs but {} outputs", x.len(), y.len())));
        }
        let k = models.len();
        let ids: Vec<String> = models.iter().map(|m| m.id.clone()).collect();
        if x.is_empty() {
            return Ok(Self { ids, anchors: vec![], anchor_weights: vec![], components: vec![ValidityComponent::Constant(1.0 / k as f64); k] });
        }
        let preds: Vec<SourcePrediction> = models.iter().map(|m| m.predict(x, n_draws)).collect::<Result<_>>()?;
        let y_sd = if y.len() > 1 { stats::sd(y) } else { 0.0 };
        let sigma_min = 1e-6 * if y_sd > 0.0 { y_sd } else { 1.0 };
        let anchor_weights: Vec<Vec<f64>> = (0..x.len())
            .map(|i| {
                let raw: Vec<f64> = preds
                    .iter()
                    .map(|p| validity_at_anchor(p.mean[i], (p.sd[i].powi(2) + p.noise_var).sqrt(), y[i], sigma_min))
                    .collect();
                normalize_weights(&raw)
            })
            .collect();
        let components = if k == 1 {
            vec![ValidityComponent::Constant(1.0)]
        } else if x.len() < 2 {
            anchor_weights[0].iter().map(|w| ValidityComponent::Constant(*w)).collect()
        } else {
            let xm = DMatrix::from_fn(x.len(), x[0].len(), |i, j| x[i][j]);
            (0..k)
                .map(|m| {
                    let t: Vec<f64> = anchor_weights.iter().map(|w| logit(w[m])).collect();
                    let spread = t.iter().copied().fold(f64::NEG_INFINITY, f64::max) - t.iter().copied().fold(f64::INFINITY, f64::min);
                    if spread < 1e-9 {
                        return Ok(ValidityComponent::Constant(sigmoid(t[0])));
                    }
                    Ok(ValidityComponent::Gp(Box::new(Surrogate::fit(&xm, &t, &FitConfig::deterministic())?)))
                })
                .collect::<Result<_>>()?
        };
        Ok(Self { ids, anchors: x.to_vec(), anchor_weights, components })
    }

    /// Uniform weights.
    pub fn uniform(models: &[LegacyModel]) -> Self {
        let k = models.len().max(1);
        Self {
            ids: models.iter().map(|m| m.id.clone()).collect(),
            anchors: vec![],
            anchor_weights: vec![],
            components: vec![ValidityComponent::Constant(1.0 / k as f64); k],
        }
    }

    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = self
            .components
            .iter()
            .map(|c| match c {
                ValidityComponent::Constant(w) => *w,
                ValidityComponent::Gp(g) => sigmoid(g.predict_mean(x)),
            })
            .collect();
        normalize_weights(&raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// weights[i][k] for test point i and model k.
    pub weights: Vec<Vec<f64>>,
    pub model_means: Vec<Vec<f64>>,
    pub model_sds: Vec<Vec<f64>>,
}

/// Moment-matched mixture of the model predictions under validity weights.
pub fn fuse_predict(models: &[LegacyModel], validity: &ValidityModel, x: &[Vec<f64>], n_draws: usize) -> Result<FusedPrediction> {
    if models.len() != validity.ids.len() {
        return Err(Error::DimensionMismatch(format!("{} models but {} validity components", models.len(), validity.ids.len())));
    }
    let preds: Vec<SourcePrediction> = models.iter().map(|m| m.predict(x, n_draws)).collect::<Result<_>>()?;
    let mut out = FusedPrediction {
        mean: Vec::with_capacity(x.len()),
        sd: Vec::with_capacity(x.len()),
        weights: Vec::with_capacity(x.len()),
        model_means: preds.iter().map(|p| p.mean.clone()).collect(),
        model_sds: preds.iter().map(|p| p.sd.clone()).collect(),
    };
    for (i, xi) in x.iter().enumerate() {
        let w = validity.weights(xi);
        let mean: f64 = w.iter().zip(&preds).map(|(wk, p)| wk * p.mean[i]).sum();
        let second: f64 = w.iter().zip(&preds).map(|(wk, p)| wk * (p.sd[i].powi(2) + p.mean[i].powi(2))).sum();
        out.mean.push(mean);
        out.sd.push((second - mean * mean).max(0.0).sqrt());
        out.weights.push(w);
    }
    Ok(out)
}

/// Cross-validated RMSE of the fused model and of every single-source model
/// on the new-system data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionCvReport {
    pub folds: usize,
    pub fused_rmse: f64,
    pub single_rmse: Vec<f64>,
    pub ids: Vec<String>,
    /// Largest |Σw − 1| seen at any queried point.
    pub max_weight_sum_error: f64,
}

pub fn cross_validate_fusion(new_data: &Dataset, sources: &[LegacySource], folds: usize, cfg: &FusionConfig) -> Result<FusionCvReport> {
    let n = new_data.len();
    if folds < 2 || folds > n {
        return Err(Error::InvalidArgument(format!("need 2 <= folds <= {n}, got {folds}")));
    }
    let k = sources.len();
    let mut fused_sq = 0.0;
    let mut single_sq = vec![0.0; k];
    let mut max_err: f64 = 0.0;
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != f).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % folds == f).collect();
        let tr = new_data.select_rows(&train);
        let mut koh = cfg.koh.clone();
        koh.mcmc.seed = cfg.koh.mcmc.seed.wrapping_add(1000 * f as u64);
        let models = build_legacy_models(&tr, sources, &koh)?;
        let y_tr = tr.output_column(0);
        let validity = ValidityModel::fit(&models, &tr.design, &y_tr, cfg.predict_draws)?;
        let x_te: Vec<Vec<f64>> = test.iter().map(|&i| new_data.design[i].clone()).collect();
        let fused = fuse_predict(&models, &validity, &x_te, cfg.predict_draws)?;
        for (j, &i) in test.iter().enumerate() {
            let y = new_data.output[i][0];
            fused_sq += (fused.mean[j] - y).powi(2);
            for m in 0..k {
                single_sq[m] += (fused.model_means[m][j] - y).powi(2);
            }
            max_err = max_err.max((fused.weights[j].iter().sum::<f64>() - 1.0).abs());
        }
        for a in &validity.anchors {
            max_err = max_err.max((validity.weights(a).iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(FusionCvReport {
        folds,
        fused_rmse: (fused_sq / n as f64).sqrt(),
        single_rmse: single_sq.iter().map(|s| (s / n as f64).sqrt()).collect(),
        ids: sources.iter().map(|s| s.id.clone()).collect(),
        max_weight_sum_error: max_err,
    })
}

/// Validity-GP inputs and targets, exposed for plotting weight maps.
pub fn weight_map(validity: &ValidityModel, grid: &[Vec<f64>]) -> DMatrix<f64> {
    let k = validity.ids.len();
    let rows: Vec<DVector<f64>> = grid.iter().map(|x| DVector::from_vec(validity.weights(x))).collect();
    DMatrix::from_fn(grid.len(), k, |i, j| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mcmc::McmcConfig;
    use crate::seed::rng_for;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn truth(x: f64) -> f64 {
        (3.0 * x).sin() + x
    }

    fn dataset(x: &[f64], y: &[f64], extra: Option<Vec<f64>>) -> Dataset {
        Dataset {
            design_names: vec!["x".into()],
            calib_names: if extra.is_some() { vec!["e".into()] } else { vec![] },
            output_names: vec!["y".into()],
            time_name: None,
            design: x.iter().map(|v| vec![*v]).collect(),
            calib: extra.map(|e| e.into_iter().map(|v| vec![v]).collect()).unwrap_or_default(),
            output: y.iter().map(|v| vec![*v]).collect(),
            time: vec![],
        }
    }

    fn quick() -> KohConfig {
        KohConfig { mcmc: McmcConfig { n_steps: 700, burn_in: 300, n_chains: 2, seed: 3, ..Default::default() }, ..Default::default() }
    }

    fn new_system(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_for(seed, "new-system");
        let x: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| truth(*v) + 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        dataset(&x, &y, None)
    }

    fn legacy(offset: f64, m: usize) -> LegacySource {
        let x: Vec<f64> = (0..m).map(|i| i as f64 / (m - 1) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| truth(*v) + offset).collect();
        LegacySource { id: format!("offset{offset}"), data: dataset(&x, &y, None), extra_bounds: vec![] }
    }

    #[test]
    fn anchor_weight_examples() {
        let a = validity_at_anchor(1.0, 0.2, 1.1, 1e-6);
        assert_eq!(normalize_weights(&[a, a]), vec![0.5, 0.5]);
        let exact = validity_at_anchor(2.0, 0.1, 2.0, 1e-6);
        let far = validity_at_anchor(2.5, 0.1, 2.0, 1e-6);
        assert!(normalize_weights(&[exact, far])[0] > 0.99);
        assert_eq!(normalize_weights(&[exact]), vec![1.0]);
        assert!(validity_at_anchor(0.0, 0.0, 0.0, 1e-6).is_finite());
        assert_eq!(normalize_weights(&[0.0, 0.0, 0.0]), vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn weights_sum_to_one() {
        let mut rng = rng_for(1, "weights");
        for _ in 0..1000 {
            let w: Vec<f64> = (0..5).map(|_| rng.random::<f64>().powi(8) * 10f64.powi(rng.random_range(-30..30))).collect();
            let n = normalize_weights(&w);
            assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn self_fusion_has_small_discrepancy() {
        let new = new_system(12, 2);
        let src = LegacySource { id: "self".into(), data: new.clone(), extra_bounds: vec![] };
        let models = build_legacy_models(&new, &[src], &quick()).unwrap();
        let x: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1 + 0.2 * i as f64]).collect();
        let p = models[0].calibrated.predict(&x, 30).unwrap();
        for j in 0..5 {
            assert!(p.delta_lower[j] <= 0.0 && 0.0 <= p.delta_upper[j], "{} {}", p.delta_lower[j], p.delta_upper[j]);
        }
    }

    #[test]
    fn single_model_fusion_is_identity() {
        let new = new_system(10, 3);
        let models = build_legacy_models(&new, &[legacy(0.3, 15)], &quick()).unwrap();
        let v = ValidityModel::fit(&models, &new.design, &new.output_column(0), 20).unwrap();
        let x = vec![vec![0.25], vec![0.6]];
        let fused = fuse_predict(&models, &v, &x, 20).unwrap();
        let own = models[0].calibrated.predict(&x, 20).unwrap();
        for j in 0..2 {
            assert_eq!(fused.weights[j], vec![1.0]);
            assert!((fused.mean[j] - own.mean[j]).abs() < 1e-12);
            assert!((fused.sd[j] - own.sd[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn extra_column_becomes_calibration_parameter() {
        let new = new_system(8, 4);
        let x: Vec<f64> = (0..20).map(|i| (i % 10) as f64 / 9.0).collect();
        let e: Vec<f64> = (0..20).map(|i| if i < 10 { 0.0 } else { 1.0 }).collect();
        let y: Vec<f64> = x.iter().zip(&e).map(|(a, b)| truth(*a) + 0.5 * b).collect();
        let src = LegacySource { id: "extra".into(), data: dataset(&x, &y, Some(e)), extra_bounds: vec![(0.0, 1.0)] };
        let models = build_legacy_models(&new, &[src], &quick()).unwrap();
        assert!(models[0].calibrated.names.iter().any(|n| n == "theta_e"));
        assert_eq!(models[0].extra_variables, vec!["e".to_string()]);
    }

    #[test]
    fn offsets_recovered_by_discrepancy() {
        let new = new_system(14, 5);
        let sources = [legacy(0.5, 20), legacy(-0.4, 25)];
        let models = build_legacy_models(&new, &sources, &quick()).unwrap();
        let x = vec![vec![0.3], vec![0.7]];
        for (m, off) in models.iter().zip([0.5, -0.4]) {
            let p = m.calibrated.predict(&x, 40).unwrap();
            for j in 0..2 {
                assert!((p.delta_mean[j] + off).abs() < 2.0 * p.delta_sd[j].max(0.02), "{} vs {}", p.delta_mean[j], -off);
            }
        }
    }

    #[test]
    fn mismatched_names_rejected() {
        let new = new_system(6, 6);
        let mut src = legacy(0.0, 10);
        src.data.design_names = vec!["z".into()];
        assert!(build_legacy_models(&new, &[src], &quick()).is_err());
        assert!(build_legacy_models(&new, &[], &quick()).is_err());
    }

    #[test]
    fn dominant_model_wins_at_anchors_and_weights_normalize() {
        let new = new_system(10, 7);
        let models = build_legacy_models(&new, &[legacy(0.0, 20), legacy(1.5, 20)], &quick()).unwrap();
        let v = ValidityModel::fit(&models, &new.design, &new.output_column(0), 20).unwrap();
        for (a, aw) in v.anchors.iter().zip(&v.anchor_weights) {
            let w = v.weights(a);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            if aw[0] > aw[1] {
                assert!(w[0] > w[1]);
            }
        }
        let all_equal = ValidityModel::uniform(&models);
        let x = vec![vec![0.4]];
        let f = fuse_predict(&models, &all_equal, &x, 10).unwrap();
        assert!((f.mean[0] - 0.5 * (f.model_means[0][0] + f.model_means[1][0])).abs() < 1e-12);
    }
}
