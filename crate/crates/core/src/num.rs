//! Special functions used by the inference code: log-gamma, regularized
//! incomplete gamma, chi-square and normal tail probabilities, and the
//! normal quantile.
//!
//! Everything is generic over [`Scalar`]; series and continued fractions
//! terminate on the scalar's own epsilon so `f32` instantiations converge too.

use crate::scalar::Scalar;

const MAX_ITER: usize = 500;

/// Natural log of the gamma function (Lanczos approximation), for `x > 0`.
pub fn ln_gamma<S: Scalar>(x: S) -> S {
    let coef: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let x = x.as_f64();
    debug_assert!(x > 0.0, "ln_gamma requires a positive argument");
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for (j, c) in coef.iter().enumerate() {
        ser += c / (x + 1.0 + j as f64);
    }
    S::of(-tmp + (2.5066282746310005 * ser / x).ln())
}

/// Regularized lower incomplete gamma `P(a, x)` by series expansion.
fn gamma_series<S: Scalar>(a: S, x: S) -> S {
    let eps = S::epsilon();
    let mut ap = a;
    let mut sum = S::one() / a;
    let mut term = sum;
    for _ in 0..MAX_ITER {
        ap = ap + S::one();
        term = term * x / ap;
        sum = sum + term;
        if term.abs() < sum.abs() * eps {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized upper incomplete gamma `Q(a, x)` by continued fraction
/// (modified Lentz), valid for `x > a + 1`.
fn gamma_continued_fraction<S: Scalar>(a: S, x: S) -> S {
    let eps = S::epsilon();
    let fpmin = S::min_positive_value() / eps;
    let mut b = x + S::one() - a;
    let mut c = S::one() / fpmin;
    let mut d = S::one() / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -S::of_usize(i) * (S::of_usize(i) - a);
        b = b + S::of(2.0);
        d = an * d + b;
        if d.abs() < fpmin {
            d = fpmin;
        }
        c = b + an / c;
        if c.abs() < fpmin {
            c = fpmin;
        }
        d = S::one() / d;
        let del = d * c;
        h = h * del;
        if (del - S::one()).abs() < eps {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Regularized lower incomplete gamma `P(a, x)` for `a > 0`, `x >= 0`.
pub fn gamma_p<S: Scalar>(a: S, x: S) -> S {
    debug_assert!(a > S::zero() && x >= S::zero());
    if x == S::zero() {
        S::zero()
    } else if x < a + S::one() {
        gamma_series(a, x)
    } else {
        S::one() - gamma_continued_fraction(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q<S: Scalar>(a: S, x: S) -> S {
    debug_assert!(a > S::zero() && x >= S::zero());
    if x == S::zero() {
        S::one()
    } else if x < a + S::one() {
        S::one() - gamma_series(a, x)
    } else {
        gamma_continued_fraction(a, x)
    }
}

/// Upper tail probability of the chi-square distribution with `df` degrees
/// of freedom: `P(X > x)`. Returns 1 for `x <= 0`.
pub fn chi2_sf<S: Scalar>(x: S, df: usize) -> S {
    debug_assert!(df >= 1, "chi-square needs at least one degree of freedom");
    if x <= S::zero() {
        return S::one();
    }
    gamma_q(S::of_usize(df) / S::of(2.0), x / S::of(2.0))
}

/// Complementary error function, computed through the incomplete gamma
/// identity `erfc(x) = Q(1/2, x^2)` for `x >= 0`.
pub fn erfc<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        gamma_q(S::of(0.5), x * x)
    } else {
        S::of(2.0) - gamma_q(S::of(0.5), x * x)
    }
}

/// Standard normal survival function `P(Z > z)`.
pub fn normal_sf<S: Scalar>(z: S) -> S {
    S::of(0.5) * erfc(z / S::of(std::f64::consts::SQRT_2))
}

/// Standard normal CDF.
pub fn normal_cdf<S: Scalar>(z: S) -> S {
    S::of(0.5) * erfc(-z / S::of(std::f64::consts::SQRT_2))
}

/// Standard normal quantile for `p` in (0, 1).
///
/// Rational approximation (Acklam) polished by one Newton step against the
/// gamma-based CDF, which brings the result to scalar precision.
pub fn normal_quantile<S: Scalar>(p: S) -> S {
    let p = p.as_f64();
    assert!(p > 0.0 && p < 1.0, "quantile needs p strictly inside (0, 1)");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
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

    // One Newton polish: x += (p - Phi(x)) / phi(x).
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let x = x + (p - normal_cdf(x)) / pdf;
    S::of(x)
}

/// Two-sided critical value for a confidence `level` in (0, 1),
/// e.g. `level = 0.95` gives 1.959964.
pub fn z_critical<S: Scalar>(level: S) -> S {
    let level = level.as_f64();
    assert!(level > 0.0 && level < 1.0, "confidence level must be inside (0, 1)");
    normal_quantile(S::of(0.5 + level / 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ln_gamma_known_points() {
        assert_relative_eq!(ln_gamma(0.5f64), 0.5723649429247001, epsilon = 1e-12);
        assert_relative_eq!(ln_gamma(1.0f64), 0.0, epsilon = 1e-12);
        assert_relative_eq!(ln_gamma(5.0f64), 24.0f64.ln(), epsilon = 1e-12);
        // recurrence Gamma(x+1) = x Gamma(x)
        for &x in &[0.3f64, 1.7, 6.2, 11.0] {
            assert_relative_eq!(ln_gamma(x + 1.0), ln_gamma(x) + x.ln(), epsilon = 1e-10);
        }
    }

    #[test]
    fn chi2_tail_reference_values() {
        // reference values computed with scipy.stats.chi2.sf
        assert_relative_eq!(chi2_sf(4.5838f64, 1), 0.032275563559769314, epsilon = 1e-10);
        assert_relative_eq!(chi2_sf(97.6818f64, 3), 4.896583866333519e-21, max_relative = 1e-8);
        assert_relative_eq!(chi2_sf(3.8415f64, 1), 0.049998772071222324, epsilon = 1e-10);
        assert_relative_eq!(chi2_sf(0.5f64, 5), 0.9921232932326296, epsilon = 1e-10);
        assert_relative_eq!(chi2_sf(189.9215f64, 1), 3.3072415456081904e-43, max_relative = 1e-8);
        // df = 2 has the closed form exp(-x/2)
        assert_relative_eq!(chi2_sf(6.0f64, 2), (-3.0f64).exp(), epsilon = 1e-12);
        assert_eq!(chi2_sf(-1.0f64, 3), 1.0);
        assert_eq!(chi2_sf(0.0f64, 3), 1.0);
    }

    #[test]
    fn chi2_tail_is_monotone_in_x() {
        let mut prev = 1.0f64;
        for i in 1..200 {
            let p = chi2_sf(i as f64 * 0.35, 4);
            assert!(p <= prev + 1e-15);
            prev = p;
        }
    }

    #[test]
    fn erfc_symmetry_and_known_points() {
        assert_relative_eq!(erfc(0.0f64), 1.0, epsilon = 1e-14);
        assert_relative_eq!(erfc(1.0f64), 0.15729920705028513, epsilon = 1e-12);
        for &x in &[0.2, 0.9, 2.1] {
            assert_relative_eq!(erfc(-x) + erfc(x), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn normal_tail_reference_values() {
        // reference values computed with scipy.stats.norm
        assert_relative_eq!(2.0 * normal_sf(2.0f64), 0.04550026389635839, epsilon = 1e-12);
        assert_relative_eq!(normal_sf(1.2f64), 0.11506967022170822, epsilon = 1e-12);
        assert_relative_eq!(normal_cdf(0.0f64), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn normal_quantile_reference_values() {
        assert_relative_eq!(normal_quantile(0.975f64), 1.959963984540054, epsilon = 1e-10);
        assert_relative_eq!(normal_quantile(0.995f64), 2.5758293035489004, epsilon = 1e-10);
        assert_relative_eq!(normal_quantile(0.5f64), 0.0, epsilon = 1e-12);
        assert_relative_eq!(z_critical(0.95f64), 1.959964, epsilon = 1e-6);
        assert_relative_eq!(z_critical(0.99f64), 2.5758293035489004, epsilon = 1e-10);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[0.001, 0.025, 0.2, 0.5, 0.77, 0.975, 0.9999] {
            let z: f64 = normal_quantile(p);
            assert_relative_eq!(normal_cdf(z), p, epsilon = 1e-12);
        }
    }

    #[test]
    fn works_at_single_precision() {
        let p: f32 = chi2_sf(4.5838f32, 1);
        assert!((p - 0.0322756).abs() < 1e-5);
        let z: f32 = normal_quantile(0.975f32);
        assert!((z - 1.959964).abs() < 1e-5);
    }
}
