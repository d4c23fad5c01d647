//! Run configurations. Every file carries `schema_version` and unknown keys
//! are rejected before any computation starts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use bhm_core::data::{ingest_dataset, Dataset, Role, RoleMap};
use bhm_core::ga::GaConfig;
use bhm_core::koh::KohConfig;
use bhm_core::mcmc::{McmcConfig, PriorSpec};
use bhm_core::portable::{BasisFamily, PortableConfig};
use bhm_core::robust::RobustForm;
use bhm_core::seed::derive_seed;
use bhm_core::sobol::{CorrelatedConfig, Marginal, SobolConfig, SobolMethod};
use bhm_core::transient::TransientConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, Context};

pub const CONFIG_SCHEMA: u32 = 1;

/// A CSV file and the role of each of its columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub path: PathBuf,
    pub roles: RoleMap,
}

impl DataFile {
    pub fn load(&self, base: &Path) -> CliResult<Dataset> {
        ingest_dataset(&base.join(&self.path), &self.roles).context("data")
    }

    pub fn has_time(&self) -> bool {
        self.roles.values().any(|r| *r == Role::Time)
    }
}

/// Sampler settings; the seed comes from the top-level `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcSettings {
    pub n_steps: usize,
    pub burn_in: usize,
    pub adapt_interval: usize,
    pub n_chains: usize,
    pub initial_widths: Option<Vec<f64>>,
}

impl Default for McmcSettings {
    fn default() -> Self {
        let d = McmcConfig::default();
        Self { n_steps: d.n_steps, burn_in: d.burn_in, adapt_interval: d.adapt_interval, n_chains: d.n_chains, initial_widths: None }
    }
}

impl McmcSettings {
    pub fn to_config(&self, seed: u64, stream: &str) -> McmcConfig {
        McmcConfig {
            n_steps: self.n_steps,
            burn_in: self.burn_in,
            adapt_interval: self.adapt_interval,
            seed: derive_seed(seed, stream),
            n_chains: self.n_chains,
            initial_widths: self.initial_widths.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransientSettings {
    pub energy_threshold: f64,
    pub n_kernels: Option<usize>,
    pub ridge: f64,
}

impl Default for TransientSettings {
    fn default() -> Self {
        let d = TransientConfig::default();
        Self { energy_threshold: d.energy_threshold, n_kernels: d.n_kernels, ridge: d.ridge }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub sim: DataFile,
    pub obs: DataFile,
    /// Output column for scalar calibration; defaults to the first.
    #[serde(default)]
    pub output: Option<String>,
    pub theta_bounds: BTreeMap<String, (f64, f64)>,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default = "yes")]
    pub discrepancy: bool,
    #[serde(default = "yes")]
    pub tie_obs_params: bool,
    #[serde(default = "default_predict_draws")]
    pub predict_draws: usize,
    #[serde(default)]
    pub transient: TransientSettings,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

fn yes() -> bool {
    true
}

fn default_predict_draws() -> usize {
    100
}

fn default_bins() -> usize {
    30
}

impl CalibrateConfig {
    pub fn koh(&self) -> KohConfig {
        KohConfig {
            priors: self.priors.clone(),
            mcmc: self.mcmc.to_config(self.seed, "calibrate"),
            discrepancy: self.discrepancy,
            tie_obs_params: self.tie_obs_params,
            predict_draws: self.predict_draws,
        }
    }

    pub fn transient_config(&self) -> TransientConfig {
        TransientConfig {
            energy_threshold: self.transient.energy_threshold,
            n_kernels: self.transient.n_kernels,
            discrepancy: self.discrepancy,
            ridge: self.transient.ridge,
            priors: self.priors.clone(),
            mcmc: self.mcmc.to_config(self.seed, "calibrate"),
            predict_draws: self.predict_draws,
        }
    }

    pub fn bounds_for(&self, names: &[String]) -> CliResult<Vec<(f64, f64)>> {
        names
            .iter()
            .map(|n| self.theta_bounds.get(n).copied().ok_or_else(|| CliError::Config(format!("theta_bounds: missing entry for '{n}'"))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// A model file written by `calibrate`, `robust-opt` or `sensitivity`,
    /// or a portable model when run with `--portable`.
    pub model: PathBuf,
    /// Points to predict at; design columns only.
    pub points: DataFile,
    #[serde(default = "default_predict_draws")]
    pub n_draws: usize,
}

/// Uncertainty on the design variables: either sds or a full covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum InputUncertainty {
    Sd(BTreeMap<String, f64>),
    Covariance(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaSettings {
    pub pop_size: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub blend_alpha: f64,
    pub mutation_rate: f64,
    pub mutation_scale: f64,
    pub elites: usize,
}

impl Default for GaSettings {
    fn default() -> Self {
        let d = GaConfig::default();
        Self {
            pop_size: d.pop_size,
            generations: d.generations,
            tournament: d.tournament,
            crossover_rate: d.crossover_rate,
            blend_alpha: d.blend_alpha,
            mutation_rate: d.mutation_rate,
            mutation_scale: d.mutation_scale,
            elites: d.elites,
        }
    }
}

impl GaSettings {
    pub fn to_config(&self, seed: u64) -> GaConfig {
        GaConfig {
            pop_size: self.pop_size,
            generations: self.generations,
            seed: derive_seed(seed, "robust-opt"),
            tournament: self.tournament,
            crossover_rate: self.crossover_rate,
            blend_alpha: self.blend_alpha,
            mutation_rate: self.mutation_rate,
            mutation_scale: self.mutation_scale,
            elites: self.elites,
        }
    }
}

/// Where a surrogate comes from: training data or a saved model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSource {
    #[serde(default)]
    pub data: Option<DataFile>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    /// Output column of `data`; defaults to the first.
    #[serde(default)]
    pub output: Option<String>,
    /// Nugget prior for deterministic simulators.
    #[serde(default = "yes")]
    pub deterministic: bool,
    /// Extra GPs at posterior hyperparameter draws.
    #[serde(default)]
    pub posterior_draws: usize,
    #[serde(default)]
    pub mcmc: McmcSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustOptConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub surrogate: SurrogateSource,
    pub bounds: BTreeMap<String, (f64, f64)>,
    pub input_uncertainty: InputUncertainty,
    #[serde(default = "default_objective")]
    pub objective: RobustForm,
    #[serde(default)]
    pub ga: GaSettings,
}

fn default_objective() -> RobustForm {
    RobustForm::MeanPlusKSd { k: 3.0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrelatedSettings {
    pub marginals: BTreeMap<String, Marginal>,
    /// Gaussian-copula correlation in input order.
    pub correlation: Vec<Vec<f64>>,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_degree() -> usize {
    CorrelatedConfig::default().degree
}

fn default_samples() -> usize {
    CorrelatedConfig::default().samples
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub surrogate: SurrogateSource,
    /// Input ranges; default to the data range.
    #[serde(default)]
    pub bounds: Option<BTreeMap<String, (f64, f64)>>,
    #[serde(default = "default_method")]
    pub method: SobolMethod,
    #[serde(default = "default_order")]
    pub max_order: usize,
    #[serde(default = "default_qmc")]
    pub qmc_points: usize,
    #[serde(default)]
    pub correlated: Option<CorrelatedSettings>,
}

fn default_method() -> SobolMethod {
    SobolMethod::Analytic
}

fn default_order() -> usize {
    2
}

fn default_qmc() -> usize {
    SobolConfig::default().qmc_points
}

impl SensitivityConfig {
    pub fn sobol(&self) -> SobolConfig {
        SobolConfig { max_order: self.max_order, method: self.method, qmc_points: self.qmc_points, seed: derive_seed(self.seed, "sensitivity") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSettings {
    pub threshold: f64,
    pub family: BasisFamily,
    pub degree_main: u32,
    pub degree_pair: u32,
    pub degree_triple: u32,
    pub interior_knots: usize,
    pub interior_knots_pair: usize,
    pub samples_per_dim: usize,
    pub samples_per_basis: usize,
}

impl Default for DistillSettings {
    fn default() -> Self {
        let d = PortableConfig::default();
        Self {
            threshold: d.threshold,
            family: d.family,
            degree_main: d.degree_main,
            degree_pair: d.degree_pair,
            degree_triple: d.degree_triple,
            interior_knots: d.interior_knots,
            interior_knots_pair: d.interior_knots_pair,
            samples_per_dim: d.samples_per_dim,
            samples_per_basis: d.samples_per_basis,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Surrogate model file written by `robust-opt` or `sensitivity`.
    pub model: PathBuf,
    #[serde(default)]
    pub portable: DistillSettings,
}

impl DistillConfig {
    pub fn portable_config(&self) -> PortableConfig {
        let s = &self.portable;
        PortableConfig {
            threshold: s.threshold,
            family: s.family,
            degree_main: s.degree_main,
            degree_pair: s.degree_pair,
            degree_triple: s.degree_triple,
            interior_knots: s.interior_knots,
            interior_knots_pair: s.interior_knots_pair,
            samples_per_dim: s.samples_per_dim,
            samples_per_basis: s.samples_per_basis,
            seed: derive_seed(self.seed, "distill"),
            ..PortableConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegacyFile {
    pub id: String,
    pub path: PathBuf,
    pub roles: RoleMap,
    /// Ranges of the source's extra (calibration) variables.
    #[serde(default)]
    pub extra_bounds: BTreeMap<String, (f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub new_system: DataFile,
    pub legacy: Vec<LegacyFile>,
    /// Points for fused predictions; defaults to the new-system design.
    #[serde(default)]
    pub points: Option<DataFile>,
    /// Points per design dimension of the weight-map grid.
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    /// Design ranges for the weight-map grid; default to the data range.
    #[serde(default)]
    pub bounds: Option<BTreeMap<String, (f64, f64)>>,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub mcmc: McmcSettings,
    #[serde(default = "yes")]
    pub discrepancy: bool,
    #[serde(default = "default_fuse_draws")]
    pub predict_draws: usize,
    /// Also run k-fold cross-validation when set.
    #[serde(default)]
    pub cv_folds: Option<usize>,
}

fn default_grid() -> usize {
    21
}

fn default_fuse_draws() -> usize {
    50
}

impl FuseConfig {
    pub fn koh(&self) -> KohConfig {
        KohConfig {
            priors: self.priors.clone(),
            mcmc: self.mcmc.to_config(self.seed, "fuse"),
            discrepancy: self.discrepancy,
            tie_obs_params: true,
            predict_draws: self.predict_draws,
        }
    }
}

/// Reads a config file: checks `schema_version`, then deserializes with
/// unknown keys rejected.
pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CONFIG_SCHEMA as u64 => {}
        Some(v) => return Err(CliError::Config(format!("{}: schema_version {v} is not supported (expected {CONFIG_SCHEMA})", path.display()))),
        None => return Err(CliError::Config(format!("{}: missing key 'schema_version'", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Directory against which relative paths in a config resolve.
pub fn base_dir(config_path: &Path) -> PathBuf {
    config_path.parent().map(Path::to_path_buf).unwrap_or_default()
}
