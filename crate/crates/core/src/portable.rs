//! Portable surrogate: a truncated HDMR of a GP posterior mean whose effect
//! functions are fitted by sparse regression on polynomial or B-spline bases.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lasso::{lasso_cv, LassoConfig, LassoFit};
use crate::qmc::ScrambledHalton;
use crate::seed::derive_seed;
use crate::sobol::{EffectFunction, SobolReport};
use crate::surrogate::{InputScale, OutputScale, Surrogate};

pub const PORTABLE_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Polynomial,
    Spline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PortableConfig {
    pub threshold: f64,
    pub family: BasisFamily,
    pub degree_main: u32,
    pub degree_pair: u32,
    pub degree_triple: u32,
    pub interior_knots: usize,
    /// Interior knots per dim for spline interaction terms.
    pub interior_knots_pair: usize,
    pub samples_per_dim: usize,
    pub samples_per_basis: usize,
    pub lasso: LassoConfig,
    pub seed: u64,
}

impl Default for PortableConfig {
    fn default() -> Self {
        Self {
            threshold: 0.99,
            family: BasisFamily::Polynomial,
            degree_main: 5,
            degree_pair: 3,
            degree_triple: 2,
            interior_knots: 8,
            interior_knots_pair: 3,
            samples_per_dim: 200,
            samples_per_basis: 10,
            lasso: LassoConfig::default(),
            seed: 0,
        }
    }
}

/// Basis over the unit cube of a term's dims.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TermBasis {
    /// Products of (x − ½)^e over the term's dims.
    Polynomial { exponents: Vec<Vec<u32>> },
    /// Tensor products of clamped cubic B-splines on a shared knot vector.
    Spline { knots: Vec<f64>, degree: usize },
}

fn clamped_knots(interior: usize, degree: usize) -> Vec<f64> {
    let mut k = vec![0.0; degree + 1];
    k.extend((1..=interior).map(|i| i as f64 / (interior + 1) as f64));
    k.extend(std::iter::repeat_n(1.0, degree + 1));
    k
}

/// All B-spline values at x (Cox-de Boor), length knots − degree − 1.
#[cfg(test)]
fn bspline_values(knots: &[f64], degree: usize, x: f64) -> Vec<f64> {
    let mut b = Vec::new();
    bspline_values_into(knots, degree, x, &mut b);
    b
}

/// Appends the B-spline values at x to `out`.
fn bspline_values_into(knots: &[f64], degree: usize, x: f64, out: &mut Vec<f64>) {
    let nb = knots.len() - degree - 1;
    let x = x.clamp(knots[0], knots[knots.len() - 1]);
    let start = out.len();
    out.extend((0..knots.len() - 1).map(|i| {
        let last = knots[i + 1] == knots[knots.len() - 1] && knots[i] < knots[i + 1];
        if (knots[i] <= x && x < knots[i + 1]) || (last && x == knots[i + 1]) {
            1.0
        } else {
            0.0
        }
    }));
    let b = &mut out[start..];
    for p in 1..=degree {
        for i in 0..knots.len() - 1 - p {
            let l = if knots[i + p] > knots[i] { (x - knots[i]) / (knots[i + p] - knots[i]) * b[i] } else { 0.0 };
            let r = if knots[i + p + 1] > knots[i + 1] {
                (knots[i + p + 1] - x) / (knots[i + p + 1] - knots[i + 1]) * b[i + 1]
            } else {
                0.0
            };
            b[i] = l + r;
        }
    }
    out.truncate(start + nb);
}

impl TermBasis {
    pub fn polynomial(dims: usize, degree: u32) -> Self {
        let mut exps: Vec<Vec<u32>> = vec![vec![]];
        for _ in 0..dims {
            exps = exps.into_iter().flat_map(|e| (0..=degree).map(move |k| [e.clone(), vec![k]].concat())).collect();
        }
        exps.retain(|e| e.iter().any(|k| *k > 0));
        exps.sort_by_key(|e| (e.iter().sum::<u32>(), e.clone()));
        TermBasis::Polynomial { exponents: exps }
    }

    pub fn spline(interior: usize) -> Self {
        TermBasis::Spline { knots: clamped_knots(interior, 3), degree: 3 }
    }

    pub fn len(&self, dims: usize) -> usize {
        match self {
            TermBasis::Polynomial { exponents } => exponents.len(),
            TermBasis::Spline { knots, degree } => (knots.len() - degree - 1).pow(dims as u32),
        }
    }

    pub fn is_empty(&self, dims: usize) -> bool {
        self.len(dims) == 0
    }

    /// Basis values at a point in the term's unit coordinates.
    pub fn eval(&self, x: &[f64], out: &mut Vec<f64>) {
        self.eval_with(x, out, &mut Vec::new());
    }

    fn eval_with(&self, x: &[f64], out: &mut Vec<f64>, scratch: &mut Vec<f64>) {
        out.clear();
        scratch.clear();
        match self {
            TermBasis::Polynomial { exponents } => {
                let width = exponents.iter().flatten().copied().max().unwrap_or(0) as usize + 1;
                for v in x {
                    let c = v - 0.5;
                    scratch.push(1.0);
                    for _ in 1..width {
                        let last = scratch[scratch.len() - 1];
                        scratch.push(last * c);
                    }
                }
                out.extend(exponents.iter().map(|e| e.iter().enumerate().map(|(j, k)| scratch[j * width + *k as usize]).product::<f64>()));
            }
            TermBasis::Spline { knots, degree } => {
                let nb = knots.len() - degree - 1;
                for v in x {
                    bspline_values_into(knots, *degree, *v, scratch);
                }
                out.push(1.0);
                for j in 0..x.len() {
                    let vals = &scratch[j * nb..(j + 1) * nb];
                    let prev = out.len();
                    for a in 0..prev {
                        for b in vals {
                            let v = out[a] * b;
                            out.push(v);
                        }
                    }
                    out.drain(..prev);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortableTerm {
    pub dims: Vec<usize>,
    pub label: String,
    /// Sobol index of the term in the source report.
    pub index: f64,
    pub basis: TermBasis,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

impl PortableTerm {
    fn eval(&self, unit: &[f64], buf: &mut Vec<f64>, sub: &mut Vec<f64>, scratch: &mut Vec<f64>) -> f64 {
        sub.clear();
        sub.extend(self.dims.iter().map(|&k| unit[k]));
        self.basis.eval_with(sub, buf, scratch);
        self.intercept + buf.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortableModel {
    pub schema_version: u32,
    pub input_names: Vec<String>,
    pub output_name: String,
    /// Physical input domain; the model is defined on this box.
    pub input_scale: InputScale,
    pub output_scale: OutputScale,
    /// Grand mean in standardized output units.
    pub z0: f64,
    pub terms: Vec<PortableTerm>,
    pub captured_fraction: f64,
    pub threshold: f64,
}

/// One term's effect-function samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectTrainingSet {
    pub dims: Vec<usize>,
    /// m̃ × |dims| in unit coordinates.
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Greedy selection by descending index (ties broken by the
/// lexicographic multi-index) until the cumulative fraction reaches
/// `threshold`, then closed under taking lower-order subsets of every
/// selected interaction.
pub fn select_terms(report: &SobolReport, threshold: f64) -> Vec<Vec<usize>> {
    let mut order: Vec<&crate::sobol::SobolIndex> = report.indices.iter().collect();
    order.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| a.dims.cmp(&b.dims)));
    let attainable: f64 = order.iter().map(|i| i.total.max(0.0)).sum();
    let mut chosen: Vec<Vec<usize>> = Vec::new();
    if attainable < threshold {
        warn!("Sobol indices sum to {attainable:.4}, below threshold {threshold}; keeping every term");
        chosen = order.iter().map(|i| i.dims.clone()).collect();
    } else {
        let mut acc = 0.0;
        for idx in &order {
            if acc >= threshold {
                break;
            }
            chosen.push(idx.dims.clone());
            acc += idx.total;
        }
    }
    let mut closed = chosen.clone();
    for dims in &chosen {
        let n = dims.len();
        for mask in 1..(1usize << n) - 1 {
            let sub: Vec<usize> = (0..n).filter(|b| mask >> b & 1 == 1).map(|b| dims[b]).collect();
            if !closed.contains(&sub) {
                closed.push(sub);
            }
        }
    }
    closed.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    closed
}

fn basis_for(dims: usize, cfg: &PortableConfig) -> TermBasis {
    match (cfg.family, dims) {
        (BasisFamily::Polynomial, 1) => TermBasis::polynomial(1, cfg.degree_main),
        (BasisFamily::Polynomial, 2) => TermBasis::polynomial(2, cfg.degree_pair),
        (BasisFamily::Spline, 1) => TermBasis::spline(cfg.interior_knots),
        (BasisFamily::Spline, 2) => TermBasis::spline(cfg.interior_knots_pair),
        (_, d) => TermBasis::polynomial(d, cfg.degree_triple),
    }
}

pub fn training_set(effect: &EffectFunction, n_basis: usize, cfg: &PortableConfig) -> EffectTrainingSet {
    let k = effect.dims.len();
    let m = (cfg.samples_per_dim * k).max(cfg.samples_per_basis * n_basis);
    let label: Vec<String> = effect.dims.iter().map(|d| d.to_string()).collect();
    let h = ScrambledHalton::new(k, derive_seed(cfg.seed, &format!("distill-{}", label.join("-"))));
    let inputs = h.sample(m);
    let targets = inputs.par_iter().map(|x| effect.eval(x)).collect();
    EffectTrainingSet { dims: effect.dims.clone(), inputs, targets }
}

/// Sparse fit of one effect function on `basis`.
pub fn fit_effect(set: &EffectTrainingSet, basis: &TermBasis, lasso: &LassoConfig) -> Result<LassoFit> {
    if set.targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("effect-function targets".into()));
    }
    let n_basis = basis.len(set.dims.len());
    let mut buf = Vec::with_capacity(n_basis);
    let mut x = DMatrix::zeros(set.inputs.len(), n_basis);
    for (i, p) in set.inputs.iter().enumerate() {
        basis.eval(p, &mut buf);
        for (k, v) in buf.iter().enumerate() {
            x[(i, k)] = *v;
        }
    }
    lasso_cv(&x, &DVector::from_column_slice(&set.targets), lasso)
}

pub fn distill(sur: &Surrogate, report: &SobolReport, cfg: &PortableConfig) -> Result<PortableModel> {
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must lie in (0, 1], got {}", cfg.threshold)));
    }
    if report.input_names.len() != sur.dim() {
        return Err(Error::DimensionMismatch(format!("report has {} inputs, surrogate {}", report.input_names.len(), sur.dim())));
    }
    let members = sur.members();
    let selected = select_terms(report, cfg.threshold);
    let terms: Vec<PortableTerm> = selected
        .par_iter()
        .map(|dims| {
            let effect = EffectFunction::new(&members, dims)?;
            let basis = basis_for(dims.len(), cfg);
            let set = training_set(&effect, basis.len(dims.len()), cfg);
            let fit = fit_effect(&set, &basis, &cfg.lasso)?;
            Ok(PortableTerm {
                dims: dims.clone(),
                label: dims.iter().map(|&k| report.input_names[k].as_str()).collect::<Vec<_>>().join(","),
                index: report.total(dims),
                basis,
                intercept: fit.intercept,
                coefficients: fit.coef,
            })
        })
        .collect::<Result<_>>()?;
    let z0 = EffectFunction::new(&members, &[0])?.z0;
    let captured_fraction = terms.iter().map(|t| t.index).sum();
    Ok(PortableModel {
        schema_version: PORTABLE_SCHEMA,
        input_names: report.input_names.clone(),
        output_name: sur.output_name.clone(),
        input_scale: sur.input_scale.clone(),
        output_scale: sur.output_scale.clone(),
        z0,
        terms,
        captured_fraction,
        threshold: cfg.threshold,
    })
}

impl PortableModel {
    /// Standardized prediction at a unit-scaled point.
    pub fn predict_unit(&self, unit: &[f64]) -> f64 {
        let mut buf = Vec::new();
        let mut sub = Vec::new();
        let mut scratch = Vec::new();
        self.z0 + self.terms.iter().map(|t| t.eval(unit, &mut buf, &mut sub, &mut scratch)).sum::<f64>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != PORTABLE_SCHEMA {
            return Err(Error::Data(format!("unsupported portable model schema {}", self.schema_version)));
        }
        let d = self.input_names.len();
        for t in &self.terms {
            if t.dims.iter().any(|&k| k >= d) || t.coefficients.len() != t.basis.len(t.dims.len()) {
                return Err(Error::Data(format!("term {} is inconsistent with its basis", t.label)));
            }
            if t.coefficients.iter().any(|c| !c.is_finite()) || !t.intercept.is_finite() {
                return Err(Error::NonFinite(format!("coefficients of term {}", t.label)));
            }
        }
        Ok(())
    }
}

/// Physical-unit predictions at the rows of `x`.
pub fn pbhm_predict(model: &PortableModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let d = model.input_names.len();
    if x.ncols() != d {
        return Err(Error::DimensionMismatch(format!("points have {} columns, model has {d} inputs", x.ncols())));
    }
    let scale = &model.input_scale;
    let mut outside = false;
    let n = x.nrows();
    let mut out = vec![0.0; n];
    out.par_chunks_mut(1024).enumerate().for_each(|(c, chunk)| {
        let (mut row, mut buf, mut sub, mut scratch) = (vec![0.0; d], Vec::new(), Vec::new(), Vec::new());
        for (j, y) in chunk.iter_mut().enumerate() {
            let i = c * 1024 + j;
            for (k, r) in row.iter_mut().enumerate() {
                *r = (x[(i, k)] - scale.min[k]) / scale.range(k);
            }
            let z = model.z0 + model.terms.iter().map(|t| t.eval(&row, &mut buf, &mut sub, &mut scratch)).sum::<f64>();
            *y = model.output_scale.inverse(z);
        }
    });
    for i in 0..n {
        for k in 0..d {
            let u = (x[(i, k)] - scale.min[k]) / scale.range(k);
            outside |= !(-1e-9..=1.0 + 1e-9).contains(&u);
        }
    }
    if outside {
        warn!("prediction points fall outside the distilled domain");
    }
    Ok(out)
}
