//! Small dense symmetric matrices.
//!
//! Used for the handful of dense problems in the crate: inverting the
//! (at most 6x6) optimizer Hessian and the weighted normal equations of
//! the variogram fit. Also serves as an independent computation route in
//! tests that cross-check the sparse solvers.

use crate::error::{Error, Result};

/// Row-major dense square matrix.
#[derive(Debug, Clone)]
pub struct DenseMat {
    pub n: usize,
    data: Vec<f64>,
}

impl DenseMat {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), n, "row {i} has wrong length");
            m.data[i * n..(i + 1) * n].copy_from_slice(r);
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let row = &self.data[i * self.n..(i + 1) * self.n];
                row.iter().zip(x).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Result<DenseMat> {
        let n = self.n;
        let mut l = DenseMat::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::IndefiniteSystem(format!(
                            "dense Cholesky pivot {i} is {s}"
                        )));
                    }
                    l.set(i, i, s.sqrt());
                } else {
                    l.set(i, j, s / l.get(j, j));
                }
            }
        }
        Ok(l)
    }

    /// Solve `self * x = b` via Cholesky (self must be SPD).
    pub fn solve_spd(&self, b: &[f64]) -> Result<Vec<f64>> {
        let l = self.cholesky()?;
        let n = self.n;
        let mut x = b.to_vec();
        // forward
        for i in 0..n {
            for k in 0..i {
                x[i] -= l.get(i, k) * x[k];
            }
            x[i] /= l.get(i, i);
        }
        // backward
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= l.get(k, i) * x[k];
            }
            x[i] /= l.get(i, i);
        }
        Ok(x)
    }

    /// Inverse of an SPD matrix.
    pub fn inverse_spd(&self) -> Result<DenseMat> {
        let n = self.n;
        let mut inv = DenseMat::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.solve_spd(&e)?;
            e[j] = 0.0;
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
        }
        Ok(inv)
    }

    /// Log-determinant of an SPD matrix.
    pub fn log_det_spd(&self) -> Result<f64> {
        let l = self.cholesky()?;
        Ok((0..self.n).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0)
    }
}
