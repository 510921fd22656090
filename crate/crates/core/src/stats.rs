//! Normal quantiles, order-statistic percentiles and binomial intervals.

use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("probability {0} outside (0, 1)")]
pub struct ProbabilityError(pub f64);

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile `Φ⁻¹(p)`: Acklam's rational approximation
/// polished by one Halley step against `erfc`.
pub fn gaussian_quantile(p: f64) -> Result<f64, ProbabilityError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProbabilityError(p));
    }
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383_577_518_672_69e2,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement; the upper tail works on the complement to avoid
    // cancellation in `Φ(x) − p`.
    let e = if p > 0.5 {
        (1.0 - p) - 0.5 * erfc(x / std::f64::consts::SQRT_2)
    } else {
        normal_cdf(x) - p
    };
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    Ok(x - u / (1.0 + 0.5 * x * u))
}

/// Percentile (0–100) by linear interpolation between order statistics at
/// rank `1 + (n − 1) q / 100`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of an empty sample");
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Wilson score interval for `successes` out of `trials` at normal quantile `z`.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// 97.5% normal quantile used for two-sided 95% intervals.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_median_is_zero() {
        assert_eq!(gaussian_quantile(0.5).unwrap(), 0.0);
    }

    #[test]
    fn quantile_rejects_bounds() {
        assert!(gaussian_quantile(0.0).is_err());
        assert!(gaussian_quantile(1.0).is_err());
        assert!(gaussian_quantile(f64::NAN).is_err());
    }

    #[test]
    fn quantile_is_antisymmetric() {
        // 1 − p is exact for these p, so the two quantiles must agree.
        for &p in &[0.0009765625, 0.015625, 0.125, 0.375] {
            let a = gaussian_quantile(p).unwrap();
            let b = gaussian_quantile(1.0 - p).unwrap();
            assert!((a + b).abs() < 1e-12, "{p}: {a} {b}");
        }
    }

    #[test]
    fn quantile_reference_values() {
        // High-precision references (mpmath, 30 digits).
        let cases = [
            (0.9, 1.281_551_565_544_600_5),
            (0.99865, 2.999_976_992_703_393),
            (0.975, 1.959_963_984_540_054),
            (1e-10, -6.361_340_902_404_056),
            (0.00135, -2.999_976_992_703_393),
        ];
        for (p, want) in cases {
            let got = gaussian_quantile(p).unwrap();
            assert!((got - want).abs() < 1e-9, "{p}: {got} vs {want}");
        }
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&xs, 99.0) - 99.01).abs() < 1e-12);
        assert_eq!(percentile(&xs, 50.0), 50.5);
        assert_eq!(percentile(&xs, 100.0), 100.0);
        assert_eq!(percentile(&[7.0], 90.0), 7.0);
    }

    #[test]
    fn wilson_contains_point_estimate() {
        let (lo, hi) = wilson_interval(10, 5000, Z_95);
        assert!(lo < 0.002 && 0.002 < hi);
        let (lo, hi) = wilson_interval(0, 5000, Z_95);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.001);
    }
}
