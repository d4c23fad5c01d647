//! Prior families for precisions, correlations and scaled calibration parameters.

use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum Prior {
    /// Gamma(shape, rate) on (0, ∞).
    Gamma { shape: f64, rate: f64 },
    /// Beta(a, b) on (0, 1).
    Beta { a: f64, b: f64 },
    /// Uniform on [lo, hi].
    Uniform { lo: f64, hi: f64 },
}

impl Prior {
    pub fn gamma(shape: f64, rate: f64) -> Self {
        Prior::Gamma { shape, rate }
    }

    pub fn beta(a: f64, b: f64) -> Self {
        Prior::Beta { a, b }
    }

    pub fn unit() -> Self {
        Prior::Uniform { lo: 0.0, hi: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Prior::Gamma { shape, rate } => shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite(),
            Prior::Beta { a, b } => a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
            Prior::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid prior {self:?}")))
        }
    }

    /// Closed or open support bounds.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            Prior::Gamma { .. } => (0.0, f64::INFINITY),
            Prior::Beta { .. } => (0.0, 1.0),
            Prior::Uniform { lo, hi } => (lo, hi),
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        match *self {
            Prior::Gamma { .. } => x > 0.0 && x.is_finite(),
            Prior::Beta { .. } => x > 0.0 && x < 1.0,
            Prior::Uniform { lo, hi } => x >= lo && x <= hi,
        }
    }

    /// Normalized log density; −∞ outside the support.
    pub fn ln_pdf(&self, x: f64) -> f64 {
        if !self.in_support(x) {
            return f64::NEG_INFINITY;
        }
        match *self {
            Prior::Gamma { shape, rate } => shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x,
            Prior::Beta { a, b } => (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b),
            Prior::Uniform { lo, hi } => -(hi - lo).ln(),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Prior::Gamma { shape, rate } => shape / rate,
            Prior::Beta { a, b } => a / (a + b),
            Prior::Uniform { lo, hi } => 0.5 * (lo + hi),
        }
    }
}

/// Priors of one GP-plus-calibration model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    /// Marginal precisions λ_z of simulator, observation and discrepancy blocks.
    pub lambda_z: Prior,
    /// Discrepancy marginal precision λ_δz.
    pub lambda_delta: Prior,
    /// Nugget precisions λ_s.
    pub lambda_s: Prior,
    /// Observation noise precision λ_ys.
    pub lambda_noise: Prior,
    /// ρ_k = exp(−β_k/4) of every correlation parameter.
    pub rho: Prior,
    /// Scaled calibration parameters.
    pub theta: Prior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            lambda_z: Prior::gamma(5.0, 5.0),
            lambda_delta: Prior::gamma(5.0, 5.0),
            lambda_s: Prior::gamma(3.0, 0.003),
            lambda_noise: Prior::gamma(3.0, 0.3),
            rho: Prior::beta(1.0, 0.1),
            theta: Prior::unit(),
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for p in [self.lambda_z, self.lambda_delta, self.lambda_s, self.lambda_noise, self.rho, self.theta] {
            p.validate()?;
        }
        if self.rho.support() != (0.0, 1.0) {
            return Err(Error::InvalidArgument("rho prior must live on (0,1)".into()));
        }
        Ok(())
    }
}
