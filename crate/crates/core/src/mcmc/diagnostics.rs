//! Split-R̂ and multi-chain effective sample size.

use serde::{Deserialize, Serialize};

use super::sampler::PosteriorChain;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub max_rhat: f64,
    pub min_ess: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Within-chain variance W and pooled variance estimate var⁺.
fn variance_parts(chains: &[&[f64]]) -> (f64, f64) {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0) as f64;
    let w = chains.iter().map(|c| var(c)).sum::<f64>() / chains.len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b = if chains.len() > 1 { n * var(&means) } else { 0.0 };
    (w, (n - 1.0) / n * w + b / n)
}

/// Split-R̂ of one scalar quantity over several chains.
pub fn split_rhat(chains: &[&[f64]]) -> f64 {
    let mut halves: Vec<&[f64]> = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        halves.push(&c[..h]);
        halves.push(&c[c.len() - h..]);
    }
    if halves.iter().any(|h| h.len() < 2) {
        return f64::NAN;
    }
    let (w, var_plus) = variance_parts(&halves);
    if w <= 0.0 {
        return 1.0;
    }
    (var_plus / w).sqrt()
}

fn autocov(x: &[f64], lag: usize) -> f64 {
    let m = mean(x);
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Effective sample size with Geyer's initial monotone positive sequence.
pub fn ess(chains: &[&[f64]]) -> f64 {
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    let total = (n * chains.len()) as f64;
    if n < 4 {
        return total;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let (w, var_plus) = variance_parts(&chains);
    if w <= 0.0 || var_plus <= 0.0 {
        return total;
    }
    let rho = |t: usize| {
        let ac = chains.iter().map(|c| autocov(c, t)).sum::<f64>() / chains.len() as f64;
        1.0 - (w - ac) / var_plus
    };
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut p = rho(t) + rho(t + 1);
        if p <= 0.0 {
            break;
        }
        p = p.min(prev);
        sum += p;
        prev = p;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum).max(1.0 / total.log10().max(1.0));
    total / tau
}

/// Per-parameter split-R̂ and ESS over ≥ 2 chains.
pub fn diagnose(chains: &[PosteriorChain]) -> Result<Diagnostics> {
    if chains.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "diagnostics need at least 2 chains, got {}",
            chains.len()
        )));
    }
    let d = chains[0].names.len();
    let mut rhat = Vec::with_capacity(d);
    let mut ess_v = Vec::with_capacity(d);
    for i in 0..d {
        let cols: Vec<Vec<f64>> = chains.iter().map(|c| c.column(i)).collect();
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        rhat.push(split_rhat(&refs));
        ess_v.push(ess(&refs));
    }
    let max_rhat = rhat.iter().copied().filter(|r| r.is_finite()).fold(1.0, f64::max);
    let min_ess = ess_v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Diagnostics { names: chains[0].names.clone(), rhat, ess: ess_v, max_rhat, min_ess })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn iid_chains_have_rhat_one_and_full_ess() {
        let mut rng = crate::seed::rng_for(1, "diag");
        let cs: Vec<Vec<f64>> = (0..4).map(|_| (0..2000).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let refs: Vec<&[f64]> = cs.iter().map(|c| c.as_slice()).collect();
        assert!((split_rhat(&refs) - 1.0).abs() < 0.01);
        let e = ess(&refs);
        assert!(e > 6000.0 && e < 10000.0, "{e}");
    }

    #[test]
    fn shifted_chains_are_flagged() {
        let mut rng = crate::seed::rng_for(2, "diag");
        let cs: Vec<Vec<f64>> =
            (0..4).map(|k| (0..500).map(|_| k as f64 + rng.sample::<f64, _>(StandardNormal)).collect()).collect();
        let refs: Vec<&[f64]> = cs.iter().map(|c| c.as_slice()).collect();
        assert!(split_rhat(&refs) > 1.5);
    }

    #[test]
    fn ar1_ess_matches_theory() {
        // AR(1) with φ = 0.9 has τ = (1+φ)/(1-φ) = 19
        let mut rng = crate::seed::rng_for(3, "diag");
        let phi: f64 = 0.9;
        let mut x = 0.0;
        let c: Vec<f64> = (0..50_000)
            .map(|_| {
                x = phi * x + (1.0 - phi * phi).sqrt() * rng.sample::<f64, _>(StandardNormal);
                x
            })
            .collect();
        let e = ess(&[&c]);
        let expected = 50_000.0 / 19.0;
        assert!((e / expected - 1.0).abs() < 0.2, "{e} vs {expected}");
    }

    #[test]
    fn one_chain_is_rejected() {
        let ch = PosteriorChain {
            names: vec!["a".into()],
            samples: vec![vec![0.0]; 10],
            log_posterior: vec![0.0; 10],
            acceptance_rates: vec![0.3],
            widths: vec![0.1],
            burn_in: 0,
            seed: 0,
            stream: 0,
        };
        assert!(diagnose(&[ch]).is_err());
    }
}
