//! Small descriptive-statistics helpers.

use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance (n − 1 denominator); 0 for fewer than two values.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn sd(x: &[f64]) -> f64 {
    variance(x).sqrt()
}

pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Linear-interpolated empirical quantile.
pub fn quantile(x: &[f64], p: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let h = (s.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// p-quantile of an equally weighted Gaussian mixture, by bisection.
pub fn mixture_quantile(means: &[f64], sds: &[f64], p: f64) -> f64 {
    let cdf = |x: f64| {
        means
            .iter()
            .zip(sds)
            .map(|(m, s)| {
                if *s > 0.0 {
                    normal_cdf((x - m) / s)
                } else if x >= *m {
                    1.0
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            / means.len() as f64
    };
    let zmax = normal_quantile(p.max(1.0 - p)).abs() + 1.0;
    let mut lo = means.iter().zip(sds).map(|(m, s)| m - zmax * s).fold(f64::INFINITY, f64::min);
    let mut hi = means.iter().zip(sds).map(|(m, s)| m + zmax * s).fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Mean and sd of an equally weighted Gaussian mixture.
pub fn mixture_moments(means: &[f64], sds: &[f64]) -> (f64, f64) {
    let m = mean(means);
    let second = means.iter().zip(sds).map(|(mu, s)| s * s + mu * mu).sum::<f64>() / means.len() as f64;
    (m, (second - m * m).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_component_quantiles() {
        let q = mixture_quantile(&[1.0], &[2.0], 0.975);
        assert!((q - (1.0 + 2.0 * 1.959_963_984_540_054)).abs() < 1e-8);
        let (m, s) = mixture_moments(&[1.0, 3.0], &[0.0, 0.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }

    #[test]
    fn descriptive() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert!((correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]) - 0.9986).abs() < 1e-3);
        assert_eq!(variance(&[1.0]), 0.0);
    }
}
