//! Real-coded genetic algorithm with bound constraints.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub seed: u64,
    pub tournament: usize,
    pub crossover_rate: f64,
    /// BLX-α blend width.
    pub blend_alpha: f64,
    /// Per-coordinate mutation probability.
    pub mutation_rate: f64,
    /// Mutation sd as a fraction of each bound range.
    pub mutation_scale: f64,
    pub elites: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            pop_size: 100,
            generations: 10,
            seed: 0,
            tournament: 2,
            crossover_rate: 0.9,
            blend_alpha: 0.5,
            mutation_rate: 0.2,
            mutation_scale: 0.1,
            elites: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaGeneration {
    pub generation: usize,
    pub best: f64,
    pub function_calls: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best_x: Vec<f64>,
    pub best: f64,
    pub history: Vec<GaGeneration>,
    pub function_calls: usize,
}

fn evaluate<F: Fn(&[f64]) -> f64 + Sync>(f: &F, pop: &[Vec<f64>]) -> Vec<f64> {
    pop.par_iter()
        .map(|x| {
            let v = f(x);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        })
        .collect()
}

fn tournament<R: Rng>(rng: &mut R, fit: &[f64], size: usize) -> usize {
    let mut best = rng.random_range(0..fit.len());
    for _ in 1..size {
        let c = rng.random_range(0..fit.len());
        if fit[c] < fit[best] {
            best = c;
        }
    }
    best
}

/// Minimizes `f` over the box `bounds`. Generation 0 is the random initial
/// population; every later generation keeps `elites` members unchanged and
/// evaluates the rest.
pub fn ga_optimize<F: Fn(&[f64]) -> f64 + Sync>(f: F, bounds: &[(f64, f64)], cfg: &GaConfig) -> Result<GaResult> {
    if cfg.pop_size == 0 {
        return Err(Error::InvalidArgument("population must not be empty".into()));
    }
    if bounds.is_empty() || bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::InvalidArgument("bounds must be finite with lo <= hi".into()));
    }
    let mut rng = rng_for(cfg.seed, "ga");
    let d = bounds.len();
    let mut pop: Vec<Vec<f64>> = (0..cfg.pop_size)
        .map(|_| bounds.iter().map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect())
        .collect();
    let mut fit = evaluate(&f, &pop);
    let mut calls = pop.len();
    let argmin = |fit: &[f64]| (0..fit.len()).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).expect("non-empty");
    let mut history = vec![GaGeneration { generation: 0, best: fit[argmin(&fit)], function_calls: calls }];
    let elites = cfg.elites.min(cfg.pop_size);

    for gen in 1..=cfg.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]));
        let mut next: Vec<Vec<f64>> = order[..elites].iter().map(|&i| pop[i].clone()).collect();
        let mut next_fit: Vec<f64> = order[..elites].iter().map(|&i| fit[i]).collect();
        let mut children = Vec::with_capacity(cfg.pop_size - elites);
        while children.len() < cfg.pop_size - elites {
            let a = &pop[tournament(&mut rng, &fit, cfg.tournament.max(1))];
            let b = &pop[tournament(&mut rng, &fit, cfg.tournament.max(1))];
            let cross = rng.random::<f64>() < cfg.crossover_rate;
            let child: Vec<f64> = (0..d)
                .map(|k| {
                    let (lo, hi) = bounds[k];
                    let mut x = if cross {
                        let (mn, mx) = (a[k].min(b[k]), a[k].max(b[k]));
                        let ext = cfg.blend_alpha * (mx - mn);
                        mn - ext + (mx - mn + 2.0 * ext) * rng.random::<f64>()
                    } else {
                        a[k]
                    };
                    if cfg.mutation_rate > 0.0 && rng.random::<f64>() < cfg.mutation_rate {
                        let z: f64 = rng.sample(StandardNormal);
                        x += cfg.mutation_scale * (hi - lo) * z;
                    }
                    x.clamp(lo, hi)
                })
                .collect();
            children.push(child);
        }
        let child_fit = evaluate(&f, &children);
        calls += children.len();
        next.extend(children);
        next_fit.extend(child_fit);
        pop = next;
        fit = next_fit;
        history.push(GaGeneration { generation: gen, best: fit[argmin(&fit)], function_calls: calls });
    }
    let i = argmin(&fit);
    Ok(GaResult { best_x: pop[i].clone(), best: fit[i], history, function_calls: calls })
}
