//! Humidity preprocessing and exploratory spatial analysis: the Box-Cox
//! power transform with profile-likelihood estimation of its exponent, and
//! empirical variograms with weighted Matérn fits.

use crate::error::{Error, Result};
use crate::mesh::Point2;
use crate::special::matern_correlation;

/// Box-Cox transform of a positive value: `(y^lambda - 1)/lambda`, with the
/// log branch at `lambda = 0`.
pub fn boxcox(y: f64, lambda: f64) -> Result<f64> {
    if !(y > 0.0) {
        return Err(Error::Domain(format!(
            "Box-Cox input must be positive, got {y}"
        )));
    }
    if lambda.abs() < 1e-10 {
        Ok(y.ln())
    } else {
        // expm1 keeps precision when lambda*ln(y) is small
        Ok((lambda * y.ln()).exp_m1() / lambda)
    }
}

/// Inverse Box-Cox; requires `1 + lambda t > 0` away from the log branch.
pub fn inverse_boxcox(t: f64, lambda: f64) -> Result<f64> {
    if lambda.abs() < 1e-10 {
        Ok(t.exp())
    } else {
        let base = lambda * t;
        if base <= -1.0 {
            return Err(Error::Domain(format!(
                "inverse Box-Cox out of range: 1 + lambda*t = {}",
                1.0 + base
            )));
        }
        Ok((base.ln_1p() / lambda).exp())
    }
}

/// Grid for the profile-likelihood search.
#[derive(Debug, Clone, Copy)]
pub struct LambdaGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            min: -2.0,
            max: 2.0,
            step: 0.01,
        }
    }
}

/// Profile Gaussian log-likelihood of the transform exponent, including
/// the Jacobian term `(lambda - 1) sum(log y)`.
fn profile_loglik(y: &[f64], lambda: f64, sum_log_y: f64) -> f64 {
    let n = y.len() as f64;
    let mut mean = 0.0;
    let transformed: Vec<f64> = y
        .iter()
        .map(|&v| boxcox(v, lambda).expect("positive input"))
        .collect();
    for t in &transformed {
        mean += t;
    }
    mean /= n;
    let var: f64 = transformed.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -0.5 * n * var.ln() + (lambda - 1.0) * sum_log_y
}

/// Grid maximizer of the profile likelihood; ties break toward 1.
pub fn estimate_lambda(y: &[f64], grid: LambdaGrid) -> Result<f64> {
    if y.len() < 10 {
        return Err(Error::Estimation(format!(
            "need at least 10 values to estimate lambda, got {}",
            y.len()
        )));
    }
    let mut sum_log_y = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in y {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Domain(format!("values must be positive and finite, got {v}")));
        }
        sum_log_y += v.ln();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 * hi {
        return Err(Error::Estimation("constant input; lambda is unidentifiable".into()));
    }
    let n_steps = ((grid.max - grid.min) / grid.step).round() as usize;
    let mut best: Option<(f64, f64)> = None; // (loglik, lambda)
    for k in 0..=n_steps {
        let lambda = grid.min + k as f64 * grid.step;
        let ll = profile_loglik(y, lambda, sum_log_y);
        if !ll.is_finite() {
            continue;
        }
        let better = match best {
            None => true,
            Some((bll, bl)) => {
                ll > bll + 1e-12
                    || ((ll - bll).abs() <= 1e-12 && (lambda - 1.0).abs() < (bl - 1.0).abs())
            }
        };
        if better {
            best = Some((ll, lambda));
        }
    }
    match best {
        Some((_, lambda)) => Ok(lambda),
        None => Err(Error::Estimation(
            "profile likelihood degenerate (constant input?)".into(),
        )),
    }
}

/// Binned Matheron semivariance estimates.
#[derive(Debug, Clone)]
pub struct EmpiricalVariogram {
    pub bin_centers: Vec<f64>,
    pub gamma_hat: Vec<f64>,
    pub counts: Vec<usize>,
    /// Number of requested bins that held no pairs and were dropped.
    pub dropped_bins: usize,
}

/// Classical estimator: per distance bin, the mean of half squared
/// differences over point pairs.
pub fn empirical_variogram(
    data: &[(Point2, f64)],
    n_bins: usize,
    max_dist: f64,
) -> Result<EmpiricalVariogram> {
    if data.len() < 2 {
        return Err(Error::Estimation(
            "variogram needs at least two observations".into(),
        ));
    }
    if n_bins == 0 || !(max_dist > 0.0) {
        return Err(Error::Domain("n_bins and max_dist must be positive".into()));
    }
    let width = max_dist / n_bins as f64;
    let mut sums = vec![0.0; n_bins];
    let mut counts = vec![0usize; n_bins];
    for i in 0..data.len() {
        for j in (i + 1)..data.len() {
            let d = data[i].0.dist(&data[j].0);
            if d >= max_dist {
                continue;
            }
            let bin = ((d / width) as usize).min(n_bins - 1);
            let diff = data[i].1 - data[j].1;
            sums[bin] += 0.5 * diff * diff;
            counts[bin] += 1;
        }
    }
    let mut out = EmpiricalVariogram {
        bin_centers: Vec::new(),
        gamma_hat: Vec::new(),
        counts: Vec::new(),
        dropped_bins: 0,
    };
    for b in 0..n_bins {
        if counts[b] == 0 {
            out.dropped_bins += 1;
            continue;
        }
        out.bin_centers.push((b as f64 + 0.5) * width);
        out.gamma_hat.push(sums[b] / counts[b] as f64);
        out.counts.push(counts[b]);
    }
    Ok(out)
}

/// Matérn variogram fit by count-weighted least squares.
#[derive(Debug, Clone, Copy)]
pub struct VariogramFit {
    pub sigma2: f64,
    pub kappa: f64,
    pub nugget: f64,
    pub wls_loss: f64,
}

fn wls_at_kappa(ev: &EmpiricalVariogram, nu: f64, kappa: f64) -> (f64, f64, f64) {
    // linear in (nugget, sigma2) with basis [1, 1 - rho(kappa h)]
    let f: Vec<f64> = ev
        .bin_centers
        .iter()
        .map(|&h| 1.0 - matern_correlation(nu, kappa, h))
        .collect();
    let w: Vec<f64> = ev.counts.iter().map(|&c| c as f64).collect();
    let (mut sw, mut swf, mut swff, mut swg, mut swfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..f.len() {
        sw += w[i];
        swf += w[i] * f[i];
        swff += w[i] * f[i] * f[i];
        swg += w[i] * ev.gamma_hat[i];
        swfg += w[i] * f[i] * ev.gamma_hat[i];
    }
    let det = sw * swff - swf * swf;
    let (mut nugget, mut sigma2) = if det.abs() > 1e-300 {
        (
            (swff * swg - swf * swfg) / det,
            (sw * swfg - swf * swg) / det,
        )
    } else {
        (0.0, 0.0)
    };
    if nugget < 0.0 || sigma2 < 0.0 {
        // try each boundary and keep the feasible minimizer
        let s_only = if swff > 0.0 { (swfg / swff).max(0.0) } else { 0.0 };
        let n_only = if sw > 0.0 { (swg / sw).max(0.0) } else { 0.0 };
        let loss = |nug: f64, s2: f64| -> f64 {
            (0..f.len())
                .map(|i| {
                    let r = ev.gamma_hat[i] - nug - s2 * f[i];
                    w[i] * r * r
                })
                .sum()
        };
        if loss(0.0, s_only) <= loss(n_only, 0.0) {
            nugget = 0.0;
            sigma2 = s_only;
        } else {
            nugget = n_only;
            sigma2 = 0.0;
        }
    }
    let loss: f64 = (0..f.len())
        .map(|i| {
            let r = ev.gamma_hat[i] - nugget - sigma2 * f[i];
            w[i] * r * r
        })
        .sum();
    (nugget, sigma2, loss)
}

/// Fit `gamma(h) = nugget + sigma2 (1 - rho_nu(kappa h))` by weighted least
/// squares: profile over a log-spaced `kappa` grid, then refine by golden
/// section.
pub fn fit_matern_variogram(ev: &EmpiricalVariogram, nu: f64) -> Result<VariogramFit> {
    if ev.bin_centers.len() < 3 {
        return Err(Error::Estimation(format!(
            "need at least 3 nonempty bins, got {}",
            ev.bin_centers.len()
        )));
    }
    let h_min = ev.bin_centers.first().copied().unwrap();
    let h_max = ev.bin_centers.last().copied().unwrap();
    let lo = (0.05 / h_max).ln();
    let hi = (30.0 / h_min).ln();
    let n_grid = 200;
    let mut best = (f64::INFINITY, lo);
    for k in 0..=n_grid {
        let lk = lo + (hi - lo) * k as f64 / n_grid as f64;
        let (_, _, loss) = wls_at_kappa(ev, nu, lk.exp());
        if loss < best.0 {
            best = (loss, lk);
        }
    }
    // golden-section refinement around the best grid point
    let span = (hi - lo) / n_grid as f64;
    let (mut a, mut b) = (best.1 - span, best.1 + span);
    let phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = wls_at_kappa(ev, nu, c.exp()).2;
    let mut fd = wls_at_kappa(ev, nu, d.exp()).2;
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = wls_at_kappa(ev, nu, c.exp()).2;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = wls_at_kappa(ev, nu, d.exp()).2;
        }
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    let kappa = (0.5 * (a + b)).exp();
    let (nugget, sigma2, loss) = wls_at_kappa(ev, nu, kappa);
    Ok(VariogramFit {
        sigma2,
        kappa,
        nugget,
        wls_loss: loss,
    })
}
