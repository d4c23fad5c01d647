//! Metropolis-within-Gibbs with univariate uniform-window proposals.

use std::io::Write;

use log::debug;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::{diagnose, Diagnostics};
use crate::error::{Error, Result};
use crate::seed::rng_stream;

/// Unnormalized log posterior written as a sum of terms, so that a
/// single-coordinate update only re-evaluates the terms it touches.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|i| format!("p{i}")).collect()
    }

    fn in_support(&self, i: usize, value: f64) -> bool;

    fn initial_width(&self, _i: usize, value: f64) -> f64 {
        0.1 * value.abs().max(1.0)
    }

    fn max_width(&self, _i: usize) -> f64 {
        f64::INFINITY
    }

    fn n_terms(&self) -> usize {
        1
    }

    /// Term `k` of the log posterior at `x`; −∞ for impossible states.
    fn term(&self, x: &[f64], k: usize) -> f64;

    /// Indices of the terms that depend on coordinate `i`.
    fn terms_for(&self, _i: usize) -> Vec<usize> {
        (0..self.n_terms()).collect()
    }

    fn log_posterior(&self, x: &[f64]) -> f64 {
        (0..self.n_terms()).map(|k| self.term(x, k)).sum()
    }
}

/// Single-term target from a closure and box support.
pub struct FnTarget<F> {
    pub bounds: Vec<(f64, f64)>,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> LogTarget for FnTarget<F> {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn in_support(&self, i: usize, value: f64) -> bool {
        let (lo, hi) = self.bounds[i];
        value >= lo && value <= hi
    }

    fn term(&self, x: &[f64], _k: usize) -> f64 {
        (self.f)(x)
    }
}

/// Current position of a chain with its cached log-posterior terms.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub x: Vec<f64>,
    terms: Vec<f64>,
    pub log_post: f64,
}

impl ChainState {
    pub fn new<T: LogTarget + ?Sized>(target: &T, x: Vec<f64>) -> Result<Self> {
        if x.len() != target.dim() {
            return Err(Error::DimensionMismatch(format!(
                "initial state has {} entries, target has {}",
                x.len(),
                target.dim()
            )));
        }
        if let Some(i) = (0..x.len()).find(|&i| !target.in_support(i, x[i])) {
            return Err(Error::Sampler(format!("initial state outside support at coordinate {i}: {:?}", x)));
        }
        let terms: Vec<f64> = (0..target.n_terms()).map(|k| target.term(&x, k)).collect();
        let log_post = terms.iter().sum::<f64>();
        if !log_post.is_finite() {
            return Err(Error::Sampler(format!("log posterior is {log_post} at state {x:?}")));
        }
        Ok(Self { x, terms, log_post })
    }
}

/// One sweep over all coordinates. Returns per-coordinate acceptance flags;
/// `None` for coordinates with a zero-width proposal.
pub fn gibbs_step<T: LogTarget + ?Sized, R: Rng>(
    state: &mut ChainState,
    target: &T,
    widths: &[f64],
    rng: &mut R,
) -> Result<Vec<Option<bool>>> {
    if widths.len() != state.x.len() {
        return Err(Error::DimensionMismatch("one proposal width per coordinate required".into()));
    }
    if !state.log_post.is_finite() {
        return Err(Error::Sampler(format!("log posterior is {} at state {:?}", state.log_post, state.x)));
    }
    let mut flags = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        if w == 0.0 {
            flags.push(None);
            continue;
        }
        let proposal = state.x[i] + w * (2.0 * rng.random::<f64>() - 1.0);
        let log_u = rng.random::<f64>().ln();
        if !target.in_support(i, proposal) {
            flags.push(Some(false));
            continue;
        }
        let old = state.x[i];
        state.x[i] = proposal;
        let ks = target.terms_for(i);
        let new_terms: Vec<f64> = ks.iter().map(|&k| target.term(&state.x, k)).collect();
        let delta: f64 = ks.iter().zip(&new_terms).map(|(&k, t)| t - state.terms[k]).sum();
        if new_terms.iter().all(|t| t.is_finite()) && log_u < delta {
            for (&k, t) in ks.iter().zip(new_terms) {
                state.terms[k] = t;
            }
            state.log_post = state.terms.iter().sum();
            flags.push(Some(true));
        } else {
            state.x[i] = old;
            flags.push(Some(false));
        }
    }
    Ok(flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McmcConfig {
    /// Total sweeps including burn-in.
    pub n_steps: usize,
    pub burn_in: usize,
    /// Sweeps between proposal-width updates during burn-in.
    pub adapt_interval: usize,
    pub seed: u64,
    pub n_chains: usize,
    /// Overrides the target's default starting widths.
    pub initial_widths: Option<Vec<f64>>,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { n_steps: 10_000, burn_in: 1_000, adapt_interval: 50, seed: 0, n_chains: 4, initial_widths: None }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in > self.n_steps {
            return Err(Error::InvalidArgument(format!(
                "burn_in ({}) exceeds n_steps ({})",
                self.burn_in, self.n_steps
            )));
        }
        if self.adapt_interval == 0 {
            return Err(Error::InvalidArgument("adapt_interval must be positive".into()));
        }
        if self.n_chains == 0 {
            return Err(Error::InvalidArgument("n_chains must be positive".into()));
        }
        Ok(())
    }
}

/// Retained (post-burn-in) samples of one chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorChain {
    pub names: Vec<String>,
    /// One row per retained sweep.
    pub samples: Vec<Vec<f64>>,
    pub log_posterior: Vec<f64>,
    pub acceptance_rates: Vec<f64>,
    /// Proposal widths frozen at the end of burn-in.
    pub widths: Vec<f64>,
    pub burn_in: usize,
    pub seed: u64,
    pub stream: u64,
}

impl PosteriorChain {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|r| r[i]).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = self.names.clone();
        header.push("log_posterior".into());
        wr.write_record(&header)?;
        for (row, lp) in self.samples.iter().zip(&self.log_posterior) {
            let rec: Vec<String> = row.iter().chain(std::iter::once(lp)).map(|v| v.to_string()).collect();
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Concatenates the retained samples of several chains.
pub fn pooled(chains: &[PosteriorChain]) -> Vec<Vec<f64>> {
    chains.iter().flat_map(|c| c.samples.iter().cloned()).collect()
}

fn adapt(width: f64, rate: f64, max: f64) -> f64 {
    let w = if rate < 0.05 {
        width * 0.3
    } else if rate < 0.20 {
        width * 0.6
    } else if rate > 0.45 {
        width * 1.8
    } else {
        width
    };
    w.min(max)
}

pub fn run_chain<T: LogTarget + ?Sized>(target: &T, init: &[f64], config: &McmcConfig) -> Result<PosteriorChain> {
    run_chain_on_stream(target, init, config, 0)
}

/// Runs one chain on ChaCha stream `stream` of the config seed.
pub fn run_chain_on_stream<T: LogTarget + ?Sized>(
    target: &T,
    init: &[f64],
    config: &McmcConfig,
    stream: u64,
) -> Result<PosteriorChain> {
    config.validate()?;
    let d = target.dim();
    let mut state = ChainState::new(target, init.to_vec())?;
    let mut widths: Vec<f64> = match &config.initial_widths {
        Some(w) if w.len() == d => w.clone(),
        Some(w) => {
            return Err(Error::DimensionMismatch(format!("{} initial widths for {d} parameters", w.len())));
        }
        None => (0..d).map(|i| target.initial_width(i, init[i]).min(target.max_width(i))).collect(),
    };
    let mut rng = rng_stream(config.seed, "mcmc", stream);

    let mut window = vec![0usize; d];
    let mut window_len = 0usize;
    let mut burn_acc = vec![0usize; d];
    let mut kept_acc = vec![0usize; d];
    let retained = config.n_steps - config.burn_in;
    let mut samples = Vec::with_capacity(retained);
    let mut log_posterior = Vec::with_capacity(retained);

    for step in 0..config.n_steps {
        let flags = gibbs_step(&mut state, target, &widths, &mut rng)?;
        let in_burn = step < config.burn_in;
        for (i, f) in flags.iter().enumerate() {
            if *f == Some(true) {
                if in_burn {
                    window[i] += 1;
                    burn_acc[i] += 1;
                } else {
                    kept_acc[i] += 1;
                }
            }
        }
        if in_burn {
            window_len += 1;
            if window_len == config.adapt_interval || step + 1 == config.burn_in {
                for i in 0..d {
                    if widths[i] > 0.0 {
                        widths[i] = adapt(widths[i], window[i] as f64 / window_len as f64, target.max_width(i));
                    }
                }
                window.iter_mut().for_each(|c| *c = 0);
                window_len = 0;
            }
            if step + 1 == config.burn_in {
                debug!("stream {stream}: widths after burn-in {widths:?}");
                let active = widths.iter().any(|w| *w > 0.0);
                if active && burn_acc.iter().all(|c| *c == 0) {
                    return Err(Error::Sampler(
                        "no proposal was accepted during adaptation; inspect the priors and likelihood".into(),
                    ));
                }
            }
        } else {
            samples.push(state.x.clone());
            log_posterior.push(state.log_post);
        }
    }

    let acceptance_rates: Vec<f64> = if retained > 0 {
        kept_acc.iter().map(|c| *c as f64 / retained as f64).collect()
    } else if config.burn_in > 0 {
        burn_acc.iter().map(|c| *c as f64 / config.burn_in as f64).collect()
    } else {
        vec![0.0; d]
    };
    if retained > 0 && widths.iter().any(|w| *w > 0.0) && kept_acc.iter().all(|c| *c == 0) {
        return Err(Error::Sampler(
            "no proposal was accepted after adaptation; inspect the priors and likelihood".into(),
        ));
    }
    Ok(PosteriorChain {
        names: target.param_names(),
        samples,
        log_posterior,
        acceptance_rates,
        widths,
        burn_in: config.burn_in,
        seed: config.seed,
        stream,
    })
}

#[derive(Clone, Debug)]
pub struct ParallelRun {
    pub chains: Vec<PosteriorChain>,
    /// Present when at least two chains ran.
    pub diagnostics: Option<Diagnostics>,
}

/// Runs one chain per initial state, chain c on stream c, concurrently.
pub fn run_parallel_chains<T: LogTarget + ?Sized>(
    target: &T,
    inits: &[Vec<f64>],
    config: &McmcConfig,
) -> Result<ParallelRun> {
    if inits.is_empty() {
        return Err(Error::InvalidArgument("at least one chain is required".into()));
    }
    let chains: Vec<PosteriorChain> = inits
        .par_iter()
        .enumerate()
        .map(|(c, init)| run_chain_on_stream(target, init, config, c as u64))
        .collect::<Result<_>>()?;
    let diagnostics = if chains.len() >= 2 && chains[0].len() >= 4 { Some(diagnose(&chains)?) } else { None };
    Ok(ParallelRun { chains, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn std_normal() -> FnTarget<impl Fn(&[f64]) -> f64 + Sync> {
        FnTarget { bounds: vec![(-1e9, 1e9)], f: |x: &[f64]| -0.5 * x[0] * x[0] }
    }

    #[test]
    fn zero_width_leaves_state() {
        let t = std_normal();
        let mut s = ChainState::new(&t, vec![0.3]).unwrap();
        let flags = gibbs_step(&mut s, &t, &[0.0], &mut rng_for(0, "t")).unwrap();
        assert_eq!(flags, vec![None]);
        assert_eq!(s.x, vec![0.3]);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let t = FnTarget { bounds: vec![(-1.0, 1.0)], f: |_: &[f64]| f64::NAN };
        assert!(matches!(ChainState::new(&t, vec![0.0]), Err(Error::Sampler(_))));
    }

    #[test]
    fn standard_normal_recovered() {
        let t = std_normal();
        let cfg = McmcConfig { n_steps: 11_000, burn_in: 1_000, seed: 5, ..Default::default() };
        let ch = run_chain(&t, &[2.0], &cfg).unwrap();
        let xs = ch.column(0);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let ess = super::super::diagnostics::ess(&[&xs]);
        assert!(mean.abs() < 3.0 / ess.sqrt(), "mean {mean}, ess {ess}");
        assert!(ch.acceptance_rates[0] > 0.15 && ch.acceptance_rates[0] < 0.6);
    }

    #[test]
    fn independent_coordinates_match_one_dimensional_runs() {
        let t2 = FnTarget { bounds: vec![(-1e9, 1e9), (0.0, 1e9)], f: |x: &[f64]| -0.5 * (x[0] - 1.0).powi(2) - 2.0 * x[1] };
        let cfg = McmcConfig { n_steps: 21_000, burn_in: 1_000, seed: 2, ..Default::default() };
        let ch = run_chain(&t2, &[0.0, 1.0], &cfg).unwrap();
        let m0 = ch.column(0).iter().sum::<f64>() / ch.len() as f64;
        let m1 = ch.column(1).iter().sum::<f64>() / ch.len() as f64;
        let t_a = FnTarget { bounds: vec![(-1e9, 1e9)], f: |x: &[f64]| -0.5 * (x[0] - 1.0).powi(2) };
        let t_b = FnTarget { bounds: vec![(0.0, 1e9)], f: |x: &[f64]| -2.0 * x[0] };
        let a = run_chain(&t_a, &[0.0], &cfg).unwrap();
        let b = run_chain(&t_b, &[1.0], &cfg).unwrap();
        let ma = a.column(0).iter().sum::<f64>() / a.len() as f64;
        let mb = b.column(0).iter().sum::<f64>() / b.len() as f64;
        assert!((m0 - ma).abs() < 0.1, "{m0} vs {ma}");
        assert!((m1 - mb).abs() < 0.05, "{m1} vs {mb}");
        assert!((mb - 0.5).abs() < 0.05);
    }

    #[test]
    fn burn_in_only_gives_empty_chain() {
        let t = std_normal();
        let cfg = McmcConfig { n_steps: 200, burn_in: 200, ..Default::default() };
        let ch = run_chain(&t, &[0.0], &cfg).unwrap();
        assert!(ch.is_empty());
        assert!(ch.acceptance_rates.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn same_seed_same_chain_different_seed_differs() {
        let t = std_normal();
        let cfg = McmcConfig { n_steps: 500, burn_in: 100, seed: 9, ..Default::default() };
        assert_eq!(run_chain(&t, &[0.0], &cfg).unwrap(), run_chain(&t, &[0.0], &cfg).unwrap());
        let other = McmcConfig { seed: 10, ..cfg.clone() };
        assert_ne!(run_chain(&t, &[0.0], &cfg).unwrap().samples, run_chain(&t, &[0.0], &other).unwrap().samples);
    }

    #[test]
    fn gamma_precision_posterior_matches_quadrature() {
        // y_i ~ N(0, 1/λ), λ ~ Gamma(5, 5); posterior mean of λ by quadrature
        let ys = [0.3, -1.2, 0.8, 0.5, -0.1, 1.9, -0.7, 0.2];
        let n = ys.len() as f64;
        let ss: f64 = ys.iter().map(|y| y * y).sum();
        let logp = move |l: f64| (5.0 - 1.0) * l.ln() - 5.0 * l + 0.5 * n * l.ln() - 0.5 * l * ss;
        let (mut z, mut m) = (0.0, 0.0);
        let h = 1e-4;
        for i in 1..200_000 {
            let l = i as f64 * h;
            let p = logp(l).exp();
            z += p;
            m += l * p;
        }
        let oracle = m / z;
        let t = FnTarget { bounds: vec![(1e-300, 1e9)], f: move |x: &[f64]| if x[0] > 0.0 { logp(x[0]) } else { f64::NEG_INFINITY } };
        let cfg = McmcConfig { n_steps: 20_000, burn_in: 1_000, seed: 1, ..Default::default() };
        let ch = run_chain(&t, &[1.0], &cfg).unwrap();
        let est = ch.column(0).iter().sum::<f64>() / ch.len() as f64;
        assert!((est - oracle).abs() / oracle < 0.05, "{est} vs {oracle}");
    }

    #[test]
    fn discretized_target_histogram() {
        // pmf ∝ (k+1) on k = 0..4 via floor of a uniform-support variable
        let t = FnTarget { bounds: vec![(0.0, 4.999_999)], f: |x: &[f64]| (x[0].floor() + 1.0).ln() };
        let cfg = McmcConfig { n_steps: 101_000, burn_in: 1_000, seed: 3, ..Default::default() };
        let ch = run_chain(&t, &[2.5], &cfg).unwrap();
        let mut counts = [0.0; 5];
        for v in ch.column(0) {
            counts[v.floor() as usize] += 1.0;
        }
        let tv: f64 = (0..5).map(|k| (counts[k] / ch.len() as f64 - (k as f64 + 1.0) / 15.0).abs()).sum::<f64>() * 0.5;
        assert!(tv < 0.05, "tv {tv}");
    }

    #[test]
    fn parallel_chains_diagnostics() {
        let t = std_normal();
        let cfg = McmcConfig { n_steps: 3_000, burn_in: 500, seed: 4, ..Default::default() };
        let inits = vec![vec![-2.0], vec![-0.5], vec![0.5], vec![2.0]];
        let run = run_parallel_chains(&t, &inits, &cfg).unwrap();
        let d = run.diagnostics.unwrap();
        assert!(d.max_rhat < 1.05, "{}", d.max_rhat);
        assert_ne!(run.chains[0].samples, run.chains[1].samples);
        let single = run_parallel_chains(&t, &inits[..1], &cfg).unwrap();
        assert!(single.diagnostics.is_none());
        assert_eq!(single.chains[0].len(), 2_500);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let t = std_normal();
        let cfg = McmcConfig { n_steps: 20, burn_in: 10, ..Default::default() };
        let ch = run_chain(&t, &[0.0], &cfg).unwrap();
        let mut buf = Vec::new();
        ch.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("p0,log_posterior\n"));
        assert_eq!(s.lines().count(), 11);
    }
}
