//! Scalar special functions: modified Bessel functions of the second kind
//! and the standard normal density/CDF.
//!
//! `K0`/`K1` use the Abramowitz & Stegun polynomial approximations
//! (9.8.1–9.8.8), accurate to about 2e-7 relative error, which is far below
//! every tolerance this crate works at.

use statrs::function::erf::erfc;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Modified Bessel function of the first kind, order 0 (small-argument helper).
fn bessel_i0(x: f64) -> f64 {
    let t = x / 3.75;
    let t2 = t * t;
    1.0 + t2
        * (3.5156229
            + t2 * (3.0899424 + t2 * (1.2067492 + t2 * (0.2659732 + t2 * (0.0360768 + t2 * 0.0045813)))))
}

/// Modified Bessel function of the first kind, order 1 (small-argument helper).
fn bessel_i1(x: f64) -> f64 {
    let t = x / 3.75;
    let t2 = t * t;
    x * (0.5
        + t2 * (0.87890594
            + t2 * (0.51498869
                + t2 * (0.15084934 + t2 * (0.02658733 + t2 * (0.00301532 + t2 * 0.00032411))))))
}

/// Modified Bessel function of the second kind, order 0. Requires `x > 0`.
pub fn bessel_k0(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k0 requires x > 0, got {x}");
    if x <= 2.0 {
        let u = x * x / 4.0;
        -(x / 2.0).ln() * bessel_i0(x) - 0.57721566
            + u * (0.42278420
                + u * (0.23069756
                    + u * (0.03488590 + u * (0.00262698 + u * (0.00010750 + u * 0.00000740)))))
    } else {
        let w = 2.0 / x;
        let p = 1.25331414
            + w * (-0.07832358
                + w * (0.02189568
                    + w * (-0.01062446 + w * (0.00587872 + w * (-0.00251540 + w * 0.00053208)))));
        p * (-x).exp() / x.sqrt()
    }
}

/// Modified Bessel function of the second kind, order 1. Requires `x > 0`.
pub fn bessel_k1(x: f64) -> f64 {
    assert!(x > 0.0, "bessel_k1 requires x > 0, got {x}");
    if x <= 2.0 {
        let u = x * x / 4.0;
        let poly = 1.0
            + u * (0.15443144
                + u * (-0.67278579
                    + u * (-0.18156897 + u * (-0.01919402 + u * (-0.00110404 + u * -0.00004686)))));
        x * (x / 2.0).ln() * bessel_i1(x) / x + poly / x
    } else {
        let w = 2.0 / x;
        let p = 1.25331414
            + w * (0.23498619
                + w * (-0.03655620
                    + w * (0.01504268 + w * (-0.00780353 + w * (0.00325614 + w * -0.00068245)))));
        p * (-x).exp() / x.sqrt()
    }
}

/// Modified Bessel function of the second kind, order 2, by upward recurrence.
pub fn bessel_k2(x: f64) -> f64 {
    bessel_k0(x) + 2.0 * bessel_k1(x) / x
}

/// Matérn correlation with smoothness `nu = 1`: `rho(d) = kappa*d * K1(kappa*d)`.
pub fn matern_correlation_nu1(kappa: f64, dist: f64) -> f64 {
    let t = kappa * dist;
    if t <= 0.0 {
        1.0
    } else if t > 700.0 {
        0.0
    } else {
        t * bessel_k1(t)
    }
}

/// Matérn correlation for `nu` in {0.5, 1, 2}; used when comparing
/// alternative smoothness values in variogram fits.
pub fn matern_correlation(nu: f64, kappa: f64, dist: f64) -> f64 {
    let t = kappa * dist;
    if t <= 0.0 {
        return 1.0;
    }
    if t > 700.0 {
        return 0.0;
    }
    if nu == 0.5 {
        (-t).exp()
    } else if nu == 1.0 {
        t * bessel_k1(t)
    } else if nu == 2.0 {
        0.5 * t * t * bessel_k2(t)
    } else {
        panic!("unsupported smoothness nu = {nu}");
    }
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Log-density of `N(mu, variance)` at `x`.
pub fn normal_logpdf(x: f64, mu: f64, variance: f64) -> f64 {
    let d = x - mu;
    -0.5 * ((2.0 * std::f64::consts::PI * variance).ln() + d * d / variance)
}
