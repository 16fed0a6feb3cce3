//! Quasi-Newton maximization with finite-difference gradients.
//!
//! The hyperparameter posteriors this crate optimizes have 4-6 free
//! coordinates, so central differences are affordable and avoid analytic
//! derivatives of log-determinants. Objectives may return `-inf` for
//! invalid regions; the line search treats those as failed steps.

use crate::dense::DenseMat;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iters: usize,
    /// Convergence threshold on the max-norm of the gradient.
    pub grad_tol: f64,
    /// Relative step for central-difference gradients.
    pub fd_step_rel: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-5,
            fd_step_rel: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceRow {
    pub iter: usize,
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step_rel: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step_rel * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Maximize `f` from `x0` by BFGS with backtracking line search.
pub fn maximize(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    opts: &OptimOptions,
) -> Result<OptimResult> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::Initialization(format!(
            "objective is {fx} at the starting point"
        )));
    }

    // inverse Hessian approximation of the negated objective
    let mut h_inv = DenseMat::zeros(n);
    for i in 0..n {
        h_inv.set(i, i, 1.0);
    }
    let mut grad = fd_gradient(f, &x, opts.fd_step_rel);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iter = 0;

    while iter < opts.max_iters {
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        trace.push(TraceRow {
            iter,
            x: x.clone(),
            value: fx,
            grad_norm,
        });
        if grad_norm <= opts.grad_tol {
            converged = true;
            break;
        }

        // ascent direction d = H_inv * grad (H_inv approximates the inverse
        // of the negative Hessian)
        let mut d = h_inv.matvec(&grad);
        let mut slope: f64 = d.iter().zip(&grad).map(|(di, gi)| di * gi).sum();
        if slope <= 0.0 || !slope.is_finite() {
            // reset to steepest ascent
            for i in 0..n {
                for j in 0..n {
                    h_inv.set(i, j, if i == j { 1.0 } else { 0.0 });
                }
            }
            d = grad.clone();
            slope = grad.iter().map(|g| g * g).sum();
        }

        // backtracking Armijo line search
        let mut t = 1.0;
        let mut accepted = false;
        let mut x_new = x.clone();
        let mut f_new = f64::NEG_INFINITY;
        for _ in 0..50 {
            for i in 0..n {
                x_new[i] = x[i] + t * d[i];
            }
            f_new = f(&x_new);
            if f_new.is_finite() && f_new >= fx + 1e-4 * t * slope {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break; // no improving step at any scale: stop at the best iterate
        }

        let grad_new = fd_gradient(f, &x_new, opts.fd_step_rel);
        // BFGS update on the negated objective: s = x' - x, y = -(g' - g)
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = grad.iter().zip(&grad_new).map(|(g, gn)| g - gn).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let s_norm: f64 = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm: f64 = yv.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-12 * s_norm * y_norm {
            let hy = h_inv.matvec(&yv);
            let yhy: f64 = yv.iter().zip(&hy).map(|(a, b)| a * b).sum();
            for i in 0..n {
                for j in 0..n {
                    let upd = (sy + yhy) * s[i] * s[j] / (sy * sy)
                        - (hy[i] * s[j] + s[i] * hy[j]) / sy;
                    h_inv.add(i, j, upd);
                }
            }
        }

        x = x_new;
        fx = f_new;
        grad = grad_new;
        iter += 1;
    }

    if !converged && iter >= opts.max_iters {
        let grad_norm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        trace.push(TraceRow {
            iter,
            x: x.clone(),
            value: fx,
            grad_norm,
        });
    }

    Ok(OptimResult {
        x,
        value: fx,
        converged,
        iterations: iter,
        trace,
    })
}

/// Central second-difference Hessian of `f` at `x`.
pub fn fd_hessian(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step_rel: f64) -> DenseMat {
    let n = x.len();
    let mut h = DenseMat::zeros(n);
    let f0 = f(x);
    let steps: Vec<f64> = x.iter().map(|xi| step_rel * xi.abs().max(1.0)).collect();
    let mut xp = x.to_vec();
    for i in 0..n {
        xp[i] = x[i] + steps[i];
        let fp = f(&xp);
        xp[i] = x[i] - steps[i];
        let fm = f(&xp);
        xp[i] = x[i];
        h.set(i, i, (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let mut eval = |si: f64, sj: f64| -> f64 {
                xp[i] = x[i] + si * steps[i];
                xp[j] = x[j] + sj * steps[j];
                let v = f(&xp);
                xp[i] = x[i];
                xp[j] = x[j];
                v
            };
            let v = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * steps[i] * steps[j]);
            h.set(i, j, v);
            h.set(j, i, v);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_recovered() {
        // f(x) = -(x-a)' M (x-a), M SPD
        let a = [1.5, -2.0, 0.5];
        let m = [[2.0, 0.3, 0.0], [0.3, 1.0, 0.2], [0.0, 0.2, 3.0]];
        let mut f = |x: &[f64]| -> f64 {
            let d: Vec<f64> = x.iter().zip(&a).map(|(xi, ai)| xi - ai).collect();
            let mut q = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    q += d[i] * m[i][j] * d[j];
                }
            }
            -q
        };
        let res = maximize(&mut f, &[0.0, 0.0, 0.0], &OptimOptions::default()).unwrap();
        assert!(res.converged);
        for i in 0..3 {
            assert!((res.x[i] - a[i]).abs() < 1e-4, "coord {i}: {}", res.x[i]);
        }
    }

    #[test]
    fn handles_invalid_regions() {
        // objective is -inf for x < 0
        let mut f = |x: &[f64]| -> f64 {
            if x[0] <= 0.0 {
                f64::NEG_INFINITY
            } else {
                -(x[0].ln().powi(2))
            }
        };
        let res = maximize(&mut f, &[5.0], &OptimOptions::default()).unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-3);
        assert!(maximize(&mut f, &[-1.0], &OptimOptions::default()).is_err());
    }

    #[test]
    fn banana_converges() {
        let mut f = |x: &[f64]| -> f64 {
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            -(a * a + 10.0 * b * b)
        };
        let res = maximize(
            &mut f,
            &[-1.2, 1.0],
            &OptimOptions {
                max_iters: 500,
                grad_tol: 1e-6,
                fd_step_rel: 1e-5,
            },
        )
        .unwrap();
        assert!((res.x[0] - 1.0).abs() < 1e-2 && (res.x[1] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn hessian_of_quadratic() {
        let m = [[2.0, 0.3], [0.3, 1.0]];
        let mut f = |x: &[f64]| -> f64 {
            let mut q = 0.0;
            for i in 0..2 {
                for j in 0..2 {
                    q += x[i] * m[i][j] * x[j];
                }
            }
            -0.5 * q
        };
        let h = fd_hessian(&mut f, &[0.3, -0.7], 1e-3);
        for i in 0..2 {
            for j in 0..2 {
                assert!((h.get(i, j) + m[i][j]).abs() < 1e-6);
            }
        }
    }
}
