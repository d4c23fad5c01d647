//! Synthetic desk-scale problems with known ground truth.
//!
//! Every generator is a pure function of its seed. Ground truth goes to a
//! separate `truth.json` so model-facing files never contain it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ingest_dataset, write_dataset, Dataset, RoleMap};
use crate::error::{Error, Result};
use crate::multisource::LegacySource;
use crate::qmc::ScrambledHalton;
use crate::seed::{derive_seed, rng_for};
use crate::transient::TransientProblem;

pub const BUNDLE_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchKind {
    Rod,
    Ishigami,
    LegacyFamily,
    RobustDemo,
}

impl BenchKind {
    pub const ALL: [BenchKind; 4] = [BenchKind::Rod, BenchKind::Ishigami, BenchKind::LegacyFamily, BenchKind::RobustDemo];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchKind::Rod => "rod",
            BenchKind::Ishigami => "ishigami",
            BenchKind::LegacyFamily => "legacy-family",
            BenchKind::RobustDemo => "robust-demo",
        }
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|k| k.as_str()).collect();
            Error::InvalidArgument(format!("unknown bench kind '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

/// Heated rod: flux q into the end x = 0, insulated end x = L, uniform
/// initial temperature T0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RodProblem {
    pub length: f64,
    pub conductivity: f64,
    /// Density times specific heat.
    pub heat_capacity: f64,
    pub nodes: usize,
    pub n_steps: usize,
    pub t_end: f64,
    pub sensors: Vec<f64>,
    pub q_true: f64,
    pub t0_true: f64,
    pub q_bounds: (f64, f64),
    pub t0_bounds: (f64, f64),
    /// Observation noise sd as a fraction of the observed temperature range.
    pub noise_frac: f64,
    pub n_runs: usize,
    /// Observations are taken every this many solver steps.
    pub obs_every: usize,
}

impl Default for RodProblem {
    fn default() -> Self {
        Self {
            length: 1.0,
            conductivity: 0.1,
            heat_capacity: 0.1,
            nodes: 50,
            n_steps: 200,
            t_end: 0.04,
            sensors: vec![0.05, 0.1, 0.15, 0.2, 0.25],
            q_true: 10.0,
            t0_true: 300.0,
            q_bounds: (5.0, 15.0),
            t0_bounds: (290.0, 310.0),
            noise_frac: 0.005,
            n_runs: 30,
            obs_every: 10,
        }
    }
}

impl RodProblem {
    pub fn dx(&self) -> f64 {
        self.length / (self.nodes - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_steps as f64
    }

    /// Diffusion number α·dt/dx²; the explicit scheme needs it below 1/2.
    pub fn ratio(&self) -> f64 {
        self.conductivity / self.heat_capacity * self.dt() / self.dx().powi(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 3 || self.n_steps == 0 {
            return Err(Error::InvalidArgument("rod needs at least 3 nodes and 1 time step".into()));
        }
        if !(self.length > 0.0 && self.conductivity > 0.0 && self.heat_capacity > 0.0 && self.t_end > 0.0) {
            return Err(Error::InvalidArgument("rod length, conductivity, heat capacity and duration must be positive".into()));
        }
        let r = self.ratio();
        if !(r < 0.5) {
            return Err(Error::InvalidArgument(format!("explicit scheme unstable: diffusion number {r:.4} must be < 0.5")));
        }
        if let Some(s) = self.sensors.iter().find(|s| !(**s > 0.0 && **s < self.length)) {
            return Err(Error::InvalidArgument(format!("sensor at {s} lies outside (0, {})", self.length)));
        }
        if self.obs_every == 0 || self.obs_every > self.n_steps {
            return Err(Error::InvalidArgument("obs_every must lie in 1..=n_steps".into()));
        }
        Ok(())
    }
}

/// Sensor histories on the solver's time grid (t = 0 included).
#[derive(Clone, Debug, PartialEq)]
pub struct RodSolution {
    pub times: Vec<f64>,
    /// (n_steps + 1) × n_sensors
    pub sensors: DMatrix<f64>,
    /// Temperatures at the nodes after the last step.
    pub final_field: Vec<f64>,
}

fn sample_field(field: &[f64], dx: f64, x: f64) -> f64 {
    let pos = x / dx;
    let i = (pos.floor() as usize).min(field.len() - 2);
    let w = pos - i as f64;
    (1.0 - w) * field[i] + w * field[i + 1]
}

/// Explicit finite differences with mirrored ghost nodes at both ends.
pub fn solve_rod(problem: &RodProblem, q: f64, t0: f64) -> Result<RodSolution> {
    problem.validate()?;
    let n = problem.nodes;
    let (dx, dt, r) = (problem.dx(), problem.dt(), problem.ratio());
    let ghost = 2.0 * dx * q / problem.conductivity;
    let mut t = vec![t0; n];
    let mut next = t.clone();
    let mut sensors = DMatrix::zeros(problem.n_steps + 1, problem.sensors.len());
    let record = |field: &[f64], row: usize, out: &mut DMatrix<f64>| {
        for (k, &x) in problem.sensors.iter().enumerate() {
            out[(row, k)] = sample_field(field, dx, x);
        }
    };
    record(&t, 0, &mut sensors);
    for step in 1..=problem.n_steps {
        next[0] = t[0] + r * (2.0 * t[1] - 2.0 * t[0] + ghost);
        for i in 1..n - 1 {
            next[i] = t[i] + r * (t[i - 1] - 2.0 * t[i] + t[i + 1]);
        }
        next[n - 1] = t[n - 1] + r * (2.0 * t[n - 2] - 2.0 * t[n - 1]);
        std::mem::swap(&mut t, &mut next);
        record(&t, step, &mut sensors);
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rod temperature field".into()));
    }
    Ok(RodSolution { times: (0..=problem.n_steps).map(|k| k as f64 * dt).collect(), sensors, final_field: t })
}

pub fn ishigami(x: &[f64], a: f64, b: f64) -> f64 {
    x[0].sin() + a * x[1].sin().powi(2) + b * x[2].powi(4) * x[0].sin()
}

/// Closed-form (V, S1, S2, S3, S13) of the Ishigami function on [-π, π]³.
pub fn ishigami_indices(a: f64, b: f64) -> (f64, f64, f64, f64, f64) {
    let pi4 = std::f64::consts::PI.powi(4);
    let v1 = 0.5 * (1.0 + b * pi4 / 5.0).powi(2);
    let v2 = a * a / 8.0;
    let v13 = b * b * pi4 * pi4 * 8.0 / 225.0;
    let v = v1 + v2 + v13;
    (v, v1 / v, v2 / v, 0.0, v13 / v)
}

/// Two-well test function on [0, 1]²: a narrow deep well at (0.25, 0.25) and
/// a broad shallow one at (0.7, 0.7).
pub fn robust_demo_function(x: &[f64]) -> f64 {
    let d = |c: f64| (x[0] - c).powi(2) + (x[1] - c).powi(2);
    2.0 - 1.2 * (-d(0.25) / 0.01).exp() - 0.8 * (-d(0.7) / 0.08).exp()
}

/// New-system response of the legacy family.
pub fn legacy_truth(x: &[f64]) -> f64 {
    2.0 + 0.8 * (2.0 * std::f64::consts::PI * x[0]).sin() + 1.5 * (x[1] - 0.5).powi(2) + 0.5 * x[0] * x[1]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LegacyBias {
    pub offset: f64,
    pub amplitude: f64,
    pub center: Vec<f64>,
    pub width: f64,
}

impl LegacyBias {
    pub fn eval(&self, x: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(&self.center).map(|(a, c)| (a - c).powi(2)).sum();
        self.offset + self.amplitude * (-d2 / (self.width * self.width)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub rod: RodProblem,
    pub ishigami_points: usize,
    pub legacy_sizes: Vec<usize>,
    pub legacy_new_points: usize,
    pub legacy_noise: f64,
    pub robust_points: usize,
    pub robust_input_sd: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            rod: RodProblem::default(),
            ishigami_points: 400,
            legacy_sizes: vec![10, 21, 33, 44, 55],
            legacy_new_points: 18,
            legacy_noise: 0.02,
            robust_points: 60,
            robust_input_sd: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegacyBundle {
    pub new_system: Dataset,
    pub sources: Vec<LegacySource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustBundle {
    pub data: Dataset,
    pub bounds: Vec<(f64, f64)>,
    pub input_sd: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bundle {
    Rod(TransientProblem),
    Ishigami { data: Dataset, bounds: Vec<(f64, f64)> },
    Legacy(LegacyBundle),
    RobustDemo(RobustBundle),
}

/// Values the generator used, for acceptance checks only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    pub schema_version: u32,
    pub kind: BenchKind,
    pub seed: u64,
    pub values: BTreeMap<String, f64>,
    #[serde(default)]
    pub legacy_biases: Vec<LegacyBias>,
}

fn design_dataset(names: &[&str], x: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
    let n = y.len();
    Dataset {
        design_names: names.iter().map(|s| s.to_string()).collect(),
        output_names: vec!["y".into()],
        design: x,
        calib: vec![Vec::new(); n],
        output: y.into_iter().map(|v| vec![v]).collect(),
        ..Dataset::default()
    }
}

fn rod_bundle(rod: &RodProblem, seed: u64) -> Result<(Bundle, GroundTruth)> {
    rod.validate()?;
    let truth = solve_rod(rod, rod.q_true, rod.t0_true)?;
    let range = truth.sensors.max() - truth.sensors.min();
    let noise_sd = rod.noise_frac * range;
    let design = ScrambledHalton::new(2, derive_seed(seed, "rod-design")).sample(rod.n_runs);
    let runs: Vec<(f64, f64)> = design
        .iter()
        .map(|u| (rod.q_bounds.0 + u[0] * (rod.q_bounds.1 - rod.q_bounds.0), rod.t0_bounds.0 + u[1] * (rod.t0_bounds.1 - rod.t0_bounds.0)))
        .collect();
    let sols: Vec<RodSolution> = runs.iter().map(|&(q, t0)| solve_rod(rod, q, t0)).collect::<Result<_>>()?;
    let obs_rows: Vec<usize> = (rod.obs_every..=rod.n_steps).step_by(rod.obs_every).collect();
    let mut rng = rng_for(seed, "rod-noise");
    let noisy = DMatrix::from_fn(obs_rows.len(), rod.sensors.len(), |i, k| {
        truth.sensors[(obs_rows[i], k)] + noise_sd * rng.sample::<f64, _>(StandardNormal)
    });
    let outputs = (0..rod.sensors.len())
        .map(|k| crate::transient::TransientEnsemble {
            name: format!("s{}", k + 1),
            t_sim: truth.times.clone(),
            sim_curves: DMatrix::from_fn(truth.times.len(), runs.len(), |i, j| sols[j].sensors[(i, k)]),
            t_obs: obs_rows.iter().map(|&i| truth.times[i]).collect(),
            obs_curves: DMatrix::from_fn(obs_rows.len(), 1, |i, _| noisy[(i, k)]),
        })
        .collect();
    let problem = TransientProblem {
        outputs,
        design_names: vec![],
        calib_names: vec!["q".into(), "T0".into()],
        sim_design: vec![vec![]; runs.len()],
        sim_calib: runs.iter().map(|&(q, t)| vec![q, t]).collect(),
        obs_design: vec![vec![]],
        theta_bounds: vec![rod.q_bounds, rod.t0_bounds],
    };
    let values = BTreeMap::from([("q".into(), rod.q_true), ("T0".into(), rod.t0_true), ("noise_sd".into(), noise_sd), ("diffusion_number".into(), rod.ratio())]);
    Ok((Bundle::Rod(problem), GroundTruth { schema_version: BUNDLE_SCHEMA, kind: BenchKind::Rod, seed, values, legacy_biases: vec![] }))
}

fn ishigami_bundle(n: usize, seed: u64) -> (Bundle, GroundTruth) {
    let pi = std::f64::consts::PI;
    let x: Vec<Vec<f64>> = ScrambledHalton::new(3, derive_seed(seed, "ishigami")).sample(n).into_iter().map(|u| u.iter().map(|v| -pi + 2.0 * pi * v).collect()).collect();
    let y = x.iter().map(|r| ishigami(r, 7.0, 0.1)).collect();
    let (v, s1, s2, s3, s13) = ishigami_indices(7.0, 0.1);
    let values = BTreeMap::from([
        ("a".into(), 7.0),
        ("b".into(), 0.1),
        ("variance".into(), v),
        ("S_x1".into(), s1),
        ("S_x2".into(), s2),
        ("S_x3".into(), s3),
        ("S_x1_x3".into(), s13),
    ]);
    (
        Bundle::Ishigami { data: design_dataset(&["x1", "x2", "x3"], x, y), bounds: vec![(-pi, pi); 3] },
        GroundTruth { schema_version: BUNDLE_SCHEMA, kind: BenchKind::Ishigami, seed, values, legacy_biases: vec![] },
    )
}

fn legacy_bundle(opts: &BenchOptions, seed: u64) -> Result<(Bundle, GroundTruth)> {
    if opts.legacy_sizes.is_empty() || opts.legacy_sizes.iter().any(|m| *m < 3) || opts.legacy_new_points < 3 {
        return Err(Error::InvalidArgument("legacy family needs at least one source and >= 3 points per set".into()));
    }
    let mut rng = rng_for(seed, "legacy-biases");
    let k = opts.legacy_sizes.len();
    let biases: Vec<LegacyBias> = (0..k)
        .map(|_| LegacyBias {
            offset: rng.random_range(-0.4..0.4),
            amplitude: rng.random_range(0.4..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            center: vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
            width: 0.25,
        })
        .collect();
    let mut noise = rng_for(seed, "legacy-noise");
    let mut sample = |n: usize, label: &str, bias: Option<&LegacyBias>| {
        let x = ScrambledHalton::new(2, derive_seed(seed, label)).sample(n);
        let y: Vec<f64> = x
            .iter()
            .map(|r| legacy_truth(r) + bias.map_or(0.0, |b| b.eval(r)) + opts.legacy_noise * noise.sample::<f64, _>(StandardNormal))
            .collect();
        design_dataset(&["x1", "x2"], x, y)
    };
    let new_system = sample(opts.legacy_new_points, "legacy-new", None);
    let sources = biases
        .iter()
        .zip(&opts.legacy_sizes)
        .enumerate()
        .map(|(i, (b, &m))| LegacySource { id: format!("legacy_{}", i + 1), data: sample(m, &format!("legacy-{i}"), Some(b)), extra_bounds: vec![] })
        .collect();
    let values = BTreeMap::from([("noise_sd".into(), opts.legacy_noise), ("sources".into(), k as f64)]);
    Ok((
        Bundle::Legacy(LegacyBundle { new_system, sources }),
        GroundTruth { schema_version: BUNDLE_SCHEMA, kind: BenchKind::LegacyFamily, seed, values, legacy_biases: biases },
    ))
}

fn robust_bundle(opts: &BenchOptions, seed: u64) -> (Bundle, GroundTruth) {
    let x = ScrambledHalton::new(2, derive_seed(seed, "robust-demo")).sample(opts.robust_points);
    let y = x.iter().map(|r| robust_demo_function(r)).collect();
    let values = BTreeMap::from([("input_sd".into(), opts.robust_input_sd), ("narrow_well_x".into(), 0.25), ("broad_well_x".into(), 0.7)]);
    (
        Bundle::RobustDemo(RobustBundle { data: design_dataset(&["x1", "x2"], x, y), bounds: vec![(0.0, 1.0); 2], input_sd: vec![opts.robust_input_sd; 2] }),
        GroundTruth { schema_version: BUNDLE_SCHEMA, kind: BenchKind::RobustDemo, seed, values, legacy_biases: vec![] },
    )
}

pub fn generate_problem(kind: BenchKind, seed: u64, opts: &BenchOptions) -> Result<(Bundle, GroundTruth)> {
    match kind {
        BenchKind::Rod => rod_bundle(&opts.rod, seed),
        BenchKind::Ishigami => Ok(ishigami_bundle(opts.ishigami_points, seed)),
        BenchKind::LegacyFamily => legacy_bundle(opts, seed),
        BenchKind::RobustDemo => Ok(robust_bundle(opts, seed)),
    }
}

/// One CSV of a bundle and the roles of its columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleFile {
    pub name: String,
    pub path: String,
    pub roles: RoleMap,
}

/// `bundle.json`: what a bundle directory contains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub schema_version: u32,
    pub kind: BenchKind,
    pub seed: u64,
    pub files: Vec<BundleFile>,
    /// Ranges of calibration inputs (rod, legacy extras) or design inputs.
    pub bounds: BTreeMap<String, (f64, f64)>,
    #[serde(default)]
    pub input_sd: BTreeMap<String, f64>,
}

impl BundleManifest {
    pub fn file(&self, name: &str) -> Result<&BundleFile> {
        self.files.iter().find(|f| f.name == name).ok_or_else(|| Error::Data(format!("bundle has no '{name}' file")))
    }

    pub fn bounds_for(&self, names: &[String]) -> Result<Vec<(f64, f64)>> {
        names.iter().map(|n| self.bounds.get(n).copied().ok_or_else(|| Error::Data(format!("no bounds for '{n}'")))).collect()
    }
}

/// Writes the bundle's CSVs, `bundle.json` and the `truth.json` sidecar.
pub fn write_bundle(dir: &Path, seed: u64, bundle: &Bundle, truth: &GroundTruth) -> Result<BundleManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut put = |name: &str, ds: &Dataset| -> Result<()> {
        let path = format!("{name}.csv");
        write_dataset(&dir.join(&path), ds)?;
        files.push(BundleFile { name: name.into(), path, roles: ds.role_map() });
        Ok(())
    };
    let mut bounds = BTreeMap::new();
    let mut input_sd = BTreeMap::new();
    let kind = match bundle {
        Bundle::Rod(p) => {
            let (sim, obs) = p.to_datasets()?;
            put("sim", &sim)?;
            put("obs", &obs)?;
            bounds.extend(p.calib_names.iter().cloned().zip(p.theta_bounds.iter().copied()));
            BenchKind::Rod
        }
        Bundle::Ishigami { data, bounds: b } => {
            put("data", data)?;
            bounds.extend(data.design_names.iter().cloned().zip(b.iter().copied()));
            BenchKind::Ishigami
        }
        Bundle::Legacy(l) => {
            put("new", &l.new_system)?;
            for s in &l.sources {
                put(&s.id, &s.data)?;
                bounds.extend(s.data.calib_names.iter().cloned().zip(s.extra_bounds.iter().copied()));
            }
            BenchKind::LegacyFamily
        }
        Bundle::RobustDemo(r) => {
            put("data", &r.data)?;
            bounds.extend(r.data.design_names.iter().cloned().zip(r.bounds.iter().copied()));
            input_sd.extend(r.data.design_names.iter().cloned().zip(r.input_sd.iter().copied()));
            BenchKind::RobustDemo
        }
    };
    let manifest = BundleManifest { schema_version: BUNDLE_SCHEMA, kind, seed, files, bounds, input_sd };
    fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("truth.json"), serde_json::to_string_pretty(truth)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let text = fs::read_to_string(dir.join("bundle.json")).map_err(|e| Error::Data(format!("{}: {e}", dir.join("bundle.json").display())))?;
    let m: BundleManifest = serde_json::from_str(&text)?;
    if m.schema_version != BUNDLE_SCHEMA {
        return Err(Error::Data(format!("bundle schema_version {} is not supported (expected {BUNDLE_SCHEMA})", m.schema_version)));
    }
    Ok(m)
}

/// Reads a bundle written by [`write_bundle`] (the truth sidecar is not read).
pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let m = read_manifest(dir)?;
    let load = |name: &str| -> Result<Dataset> {
        let f = m.file(name)?;
        ingest_dataset(&dir.join(&f.path), &f.roles)
    };
    Ok(match m.kind {
        BenchKind::Rod => {
            let (sim, obs) = (load("sim")?, load("obs")?);
            let b = m.bounds_for(&sim.calib_names)?;
            Bundle::Rod(TransientProblem::from_datasets(&sim, &obs, b)?)
        }
        BenchKind::Ishigami => {
            let data = load("data")?;
            let bounds = m.bounds_for(&data.design_names)?;
            Bundle::Ishigami { data, bounds }
        }
        BenchKind::LegacyFamily => {
            let new_system = load("new")?;
            let sources = m
                .files
                .iter()
                .filter(|f| f.name != "new")
                .map(|f| {
                    let data = load(&f.name)?;
                    let extra_bounds = m.bounds_for(&data.calib_names)?;
                    Ok(LegacySource { id: f.name.clone(), data, extra_bounds })
                })
                .collect::<Result<_>>()?;
            Bundle::Legacy(LegacyBundle { new_system, sources })
        }
        BenchKind::RobustDemo => {
            let data = load("data")?;
            let bounds = m.bounds_for(&data.design_names)?;
            let input_sd = data
                .design_names
                .iter()
                .map(|n| m.input_sd.get(n).copied().ok_or_else(|| Error::Data(format!("no input sd for '{n}'"))))
                .collect::<Result<_>>()?;
            Bundle::RobustDemo(RobustBundle { data, bounds, input_sd })
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flux_keeps_initial_temperature() {
        let rod = RodProblem::default();
        let s = solve_rod(&rod, 0.0, 296.5).unwrap();
        assert!(s.sensors.iter().all(|v| *v == 296.5));
        assert!(s.final_field.iter().all(|v| *v == 296.5));
    }

    #[test]
    fn unstable_step_names_the_ratio() {
        let rod = RodProblem { t_end: 1.0, ..Default::default() };
        let err = solve_rod(&rod, 1.0, 0.0).unwrap_err().to_string();
        assert!(err.contains("diffusion number") && err.contains("12.0050"), "{err}");
    }

    #[test]
    fn late_profile_follows_fourier_law() {
        // long run: interior gradient settles to -(q/k)(L - x)/L
        for (q, k) in [(10.0, 1.0), (4.0, 2.0)] {
            let rod = RodProblem { conductivity: k, heat_capacity: 1.0, nodes: 41, n_steps: 40_000, t_end: 3.0 / k, ..Default::default() };
            let f = solve_rod(&rod, q, 0.0).unwrap().final_field;
            let dx = rod.dx();
            for i in [4usize, 10, 20, 30] {
                let x = i as f64 * dx;
                let slope = (f[i + 1] - f[i - 1]) / (2.0 * dx);
                let want = -(q / k) * (1.0 - x);
                assert!((slope - want).abs() < 1e-3 * q / k, "x={x}: {slope} vs {want}");
            }
            let edge = (f[1] - f[0]) / dx;
            assert!((edge + q / k).abs() < 0.05 * q / k);
        }
    }

    #[test]
    fn refinement_converges_to_finer_reference() {
        // constant diffusion number: error is O(dx²)
        let base = RodProblem { nodes: 11, n_steps: 50, t_end: 0.1, sensors: vec![0.1, 0.3, 0.5], ..Default::default() };
        let run = |refine: usize| {
            let p = RodProblem { nodes: (base.nodes - 1) * refine + 1, n_steps: base.n_steps * refine * refine, ..base.clone() };
            let s = solve_rod(&p, 10.0, 0.0).unwrap();
            s.sensors.row(s.sensors.nrows() - 1).clone_owned()
        };
        let reference = run(8);
        let coarse = (run(1) - &reference).amax();
        let fine = (run(2) - &reference).amax();
        assert!(fine <= 0.5 * coarse, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn rod_bundle_is_deterministic_and_round_trips() {
        let opts = BenchOptions::default();
        let (a, ta) = generate_problem(BenchKind::Rod, 7, &opts).unwrap();
        let (b, tb) = generate_problem(BenchKind::Rod, 7, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), 7, &a, &ta).unwrap();
        assert_eq!(read_bundle(dir.path()).unwrap(), a);
        let Bundle::Rod(p) = &a else { panic!() };
        assert_eq!(p.outputs.len(), 5);
        assert_eq!(p.n_sim(), 30);
        assert_eq!(p.outputs[0].t_obs.len(), 20);
    }

    #[test]
    fn truth_stays_out_of_model_files() {
        let opts = BenchOptions::default();
        let dir = tempfile::tempdir().unwrap();
        let (b, t) = generate_problem(BenchKind::Rod, 3, &opts).unwrap();
        write_bundle(dir.path(), 3, &b, &t).unwrap();
        for f in ["sim.csv", "obs.csv", "bundle.json"] {
            let text = fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(!text.contains("q_true") && !text.contains("noise_sd"), "{f}");
        }
        let truth: GroundTruth = serde_json::from_str(&fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(truth.values["q"], 10.0);
    }

    #[test]
    fn every_kind_round_trips() {
        let opts = BenchOptions::default();
        for kind in BenchKind::ALL {
            let (b, t) = generate_problem(kind, 11, &opts).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let m = write_bundle(dir.path(), 11, &b, &t).unwrap();
            assert_eq!(m.kind, kind);
            assert_eq!(read_bundle(dir.path()).unwrap(), b, "{kind}");
        }
    }

    #[test]
    fn ishigami_outputs_match_formula() {
        let (b, _) = generate_problem(BenchKind::Ishigami, 5, &BenchOptions::default()).unwrap();
        let Bundle::Ishigami { data, .. } = b else { panic!() };
        assert_eq!(data.len(), 400);
        for (x, y) in data.design.iter().zip(&data.output) {
            let direct = x[0].sin() + 7.0 * x[1].sin() * x[1].sin() + 0.1 * x[2].powi(4) * x[0].sin();
            assert!((y[0] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn legacy_family_sizes() {
        let (b, t) = generate_problem(BenchKind::LegacyFamily, 2, &BenchOptions::default()).unwrap();
        let Bundle::Legacy(l) = b else { panic!() };
        assert_eq!(l.new_system.len(), 18);
        let sizes: Vec<usize> = l.sources.iter().map(|s| s.data.len()).collect();
        assert_eq!(sizes, vec![10, 21, 33, 44, 55]);
        assert_eq!(t.legacy_biases.len(), 5);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!("pump".parse::<BenchKind>().unwrap_err().to_string().contains("unknown bench kind 'pump'"));
        assert_eq!("legacy-family".parse::<BenchKind>().unwrap(), BenchKind::LegacyFamily);
    }

    #[test]
    fn sensors_outside_rod_rejected() {
        let rod = RodProblem { sensors: vec![0.0, 0.5], ..Default::default() };
        assert!(solve_rod(&rod, 1.0, 0.0).is_err());
    }
}
