//! Sparse symmetric positive definite factorization and matrix helpers.
//!
//! Wraps `sprs-ldl`'s LDL^T decomposition with the operations the rest of
//! the crate needs: log-determinants, quadratic forms in the inverse,
//! sampling from a Gaussian given its precision matrix, and refactorization
//! that reuses the symbolic analysis whenever the sparsity pattern is
//! unchanged.

use rand::Rng;
use rand_distr::StandardNormal;
use sprs::{CsMat, CsMatView, PermOwned, TriMat};
use sprs_ldl::{ldl_lsolve, ldl_ltsolve, LdlNumeric};

use crate::error::{Error, Result};

/// Choice of fill-reducing ordering for the factorization.
#[derive(Debug, Clone)]
pub enum Ordering {
    /// Natural ordering (no permutation).
    Natural,
    /// Reverse Cuthill-McKee computed on the matrix pattern.
    Rcm,
    /// Explicit permutation: row `i` of the permuted matrix is row
    /// `perm[i]` of the original. Must have the same length as the
    /// matrix dimension.
    Explicit(Vec<usize>),
}

/// LDL^T factorization of a sparse symmetric positive definite matrix.
///
/// Positive definiteness is enforced at construction: any non-positive
/// pivot is reported as [`Error::IndefiniteSystem`].
pub struct SpdFactor {
    ldl: LdlNumeric<f64, usize>,
    /// Permuted-to-original index map (`p[i]` = original index).
    perm: Vec<usize>,
    /// Original-to-permuted index map.
    perm_inv: Vec<usize>,
    /// Jacobi equilibration scale `s_i = 1/sqrt(q_ii)`; the factored matrix
    /// is `S Q S`, which keeps pivots well behaved when parameter draws
    /// span many orders of magnitude.
    scale: Vec<f64>,
    /// Pivots after the modified-Cholesky floor (see [`PIVOT_TOL`]).
    d_eff: Vec<f64>,
    /// Pattern fingerprint of the factored matrix, used to decide whether
    /// the symbolic analysis can be reused on refactorization.
    indptr: Vec<usize>,
    indices: Vec<usize>,
    n: usize,
}

/// Safety factor on the per-pivot roundoff bound. A computed pivot
/// `d_i = q_ii - sum_k l_ik^2 d_k` carries an absolute error of order
/// `eps * (|q_ii| + sum_k l_ik^2 |d_k|)`; pivots more negative than
/// `SAFETY` times that bound indicate a genuinely indefinite matrix, while
/// anything inside the bound is treated as a zero-within-roundoff pivot of
/// an exactly-SPD matrix and floored at the bound's scale.
const PIVOT_SAFETY: f64 = 256.0;

fn equilibrate(mat: CsMatView<f64>) -> Result<(CsMat<f64>, Vec<f64>)> {
    let n = mat.rows();
    let mut diag = vec![0.0; n];
    for (v, (r, c)) in mat.iter() {
        if r == c {
            diag[r] += *v;
        }
    }
    let mut scale = vec![0.0; n];
    for i in 0..n {
        if !(diag[i] > 0.0) || !diag[i].is_finite() {
            return Err(Error::IndefiniteSystem(format!(
                "diagonal entry {i} is {}; matrix cannot be positive definite",
                diag[i]
            )));
        }
        scale[i] = 1.0 / diag[i].sqrt();
    }
    let mut scaled = mat.to_owned();
    scale_sym(&mut scaled, &scale);
    Ok((scaled, scale))
}

fn scale_sym(m: &mut CsMat<f64>, s: &[f64]) {
    let indptr = m.indptr().to_proper().to_vec();
    let indices = m.indices().to_vec();
    let outer_is_row = m.is_csr();
    let data = m.data_mut();
    for outer in 0..indptr.len() - 1 {
        for k in indptr[outer]..indptr[outer + 1] {
            let inner = indices[k];
            let (r, c) = if outer_is_row { (outer, inner) } else { (inner, outer) };
            data[k] *= s[r] * s[c];
        }
    }
}

impl SpdFactor {
    /// Factorize with the given ordering strategy.
    pub fn new(mat: CsMatView<f64>, ordering: &Ordering) -> Result<Self> {
        let n = mat.rows();
        assert_eq!(n, mat.cols(), "matrix must be square");
        let perm: Vec<usize> = match ordering {
            Ordering::Natural => (0..n).collect(),
            Ordering::Rcm => sprs::linalg::reverse_cuthill_mckee(mat)
                .perm
                .vec()
                .to_vec(),
            Ordering::Explicit(p) => {
                assert_eq!(p.len(), n, "explicit ordering has wrong length");
                p.clone()
            }
        };
        let (scaled, scale) = equilibrate(mat)?;
        let ldl = LdlNumeric::new_perm(
            scaled.view(),
            PermOwned::new(perm.clone()),
            sprs::SymmetryCheck::DontCheckSymmetry,
        )
        .map_err(|e| Error::IndefiniteSystem(format!("LDL factorization failed: {e:?}")))?;
        let mut fac = Self {
            ldl,
            perm_inv: invert_perm(&perm),
            perm,
            scale,
            d_eff: Vec::new(),
            indptr: mat.indptr().to_proper().to_vec(),
            indices: mat.indices().to_vec(),
            n,
        };
        fac.sanitize_pivots()?;
        Ok(fac)
    }

    /// Refactorize for a matrix with new values. Reuses the symbolic
    /// analysis when the pattern is unchanged, otherwise re-runs it with
    /// the same ordering strategy semantics (RCM on the new pattern).
    pub fn refactor(&mut self, mat: CsMatView<f64>, ordering: &Ordering) -> Result<()> {
        let same_pattern = mat.rows() == self.n
            && mat.indices() == self.indices.as_slice()
            && mat.indptr().to_proper() == self.indptr.as_slice();
        if same_pattern {
            let (scaled, scale) = equilibrate(mat)?;
            self.ldl
                .update(scaled.view())
                .map_err(|e| Error::IndefiniteSystem(format!("LDL update failed: {e:?}")))?;
            self.scale = scale;
            self.sanitize_pivots()
        } else {
            *self = Self::new(mat, ordering)?;
            Ok(())
        }
    }

    fn sanitize_pivots(&mut self) -> Result<()> {
        // Element growth in L governs how much roundoff the unpivoted
        // elimination can inject into later pivots of the equilibrated
        // (unit-diagonal) matrix.
        let d = self.ldl.d();
        let mut growth: f64 = 0.0;
        for (lv, _) in self.ldl.l().iter() {
            growth = growth.max(lv.abs());
        }
        let bound = f64::EPSILON * (self.n as f64).sqrt() * (1.0 + growth * growth);
        let mut d_eff = Vec::with_capacity(self.n);
        for (i, &di) in d.iter().enumerate() {
            if !di.is_finite() || di <= -PIVOT_SAFETY * bound {
                return Err(Error::IndefiniteSystem(format!(
                    "pivot {i} is {di} (roundoff bound {bound:.3e}); matrix is not positive definite"
                )));
            }
            d_eff.push(di.max(bound));
        }
        self.d_eff = d_eff;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Log-determinant of the factored matrix.
    pub fn log_det(&self) -> f64 {
        let ld_scaled: f64 = self.d_eff.iter().map(|d| d.ln()).sum();
        let ld_scale: f64 = self.scale.iter().map(|s| s.ln()).sum();
        ld_scaled - 2.0 * ld_scale
    }

    /// Solve `A x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert_eq!(rhs.len(), self.n);
        let mut w: Vec<f64> = (0..self.n)
            .map(|i| rhs[self.perm[i]] * self.scale[self.perm[i]])
            .collect();
        let l = self.ldl.l();
        ldl_lsolve(&l, &mut w[..]);
        for (wi, di) in w.iter_mut().zip(&self.d_eff) {
            *wi /= di;
        }
        ldl_ltsolve(&l, &mut w[..]);
        (0..self.n)
            .map(|i| self.scale[i] * w[self.perm_inv[i]])
            .collect()
    }

    /// Quadratic form `a^T A^-1 a` for a sparse vector `a` given as
    /// (index, value) pairs. Costs a single sparse triangular solve.
    pub fn quad_form_inv_sparse(&self, a: &[(usize, f64)]) -> f64 {
        let mut w = vec![0.0; self.n];
        for &(idx, val) in a {
            w[self.perm_inv[idx]] += val * self.scale[idx];
        }
        let l = self.ldl.l();
        ldl_lsolve(&l, &mut w[..]);
        w.iter()
            .zip(&self.d_eff)
            .map(|(wi, di)| wi * wi / di)
            .sum()
    }

    /// Diagonal entry `(A^-1)[i, i]`.
    pub fn inv_diag_entry(&self, i: usize) -> f64 {
        self.quad_form_inv_sparse(&[(i, 1.0)])
    }

    /// Draw `z = mu + A^{-1/2} u` with `u` standard normal, i.e. a sample
    /// from `N(mu, A^-1)` where `A` is the factored precision matrix.
    pub fn sample<R: Rng>(&self, mu: &[f64], rng: &mut R) -> Vec<f64> {
        assert_eq!(mu.len(), self.n);
        let mut w: Vec<f64> = (0..self.n)
            .map(|i| {
                let u: f64 = rng.sample(StandardNormal);
                u / self.d_eff[i].sqrt()
            })
            .collect();
        let l = self.ldl.l();
        ldl_ltsolve(&l, &mut w[..]);
        (0..self.n)
            .map(|i| mu[i] + self.scale[i] * w[self.perm_inv[i]])
            .collect()
    }

    /// Number of nonzeros in the L factor (diagnostic).
    pub fn factor_nnz(&self) -> usize {
        self.ldl.nnz()
    }
}

fn invert_perm(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; p.len()];
    for (i, &pi) in p.iter().enumerate() {
        inv[pi] = i;
    }
    inv
}

/// Exact symmetrization `(m + m^T) / 2`, making matrix products that are
/// symmetric in exact arithmetic bitwise symmetric.
pub fn symmetrize(m: &CsMat<f64>) -> CsMat<f64> {
    let mt = m.transpose_view().to_owned().to_csr();
    let mut s = (m + &mt).to_csr();
    s.map_inplace(|v| 0.5 * v);
    s
}

/// Block-diagonal concatenation of square sparse matrices.
pub fn block_diag(blocks: &[CsMatView<f64>]) -> CsMat<f64> {
    let n: usize = blocks.iter().map(|b| b.rows()).sum();
    let nnz: usize = blocks.iter().map(|b| b.nnz()).sum();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(nnz);
    let mut data = Vec::with_capacity(nnz);
    indptr.push(0usize);
    let mut offset = 0usize;
    for b in blocks {
        let bc = b.to_csr();
        assert_eq!(bc.rows(), bc.cols(), "block must be square");
        let (bp, bi, bd) = (bc.indptr(), bc.indices(), bc.data());
        let bp = bp.to_proper();
        for r in 0..bc.rows() {
            for k in bp[r]..bp[r + 1] {
                indices.push(bi[k] + offset);
                data.push(bd[k]);
            }
            indptr.push(indices.len());
        }
        offset += bc.rows();
    }
    CsMat::new((n, n), indptr, indices, data)
}

/// J-fold block-diagonal repetition of a square sparse matrix.
pub fn replicate_block_diag(m: CsMatView<f64>, times: usize) -> CsMat<f64> {
    assert!(times >= 1);
    let blocks: Vec<CsMatView<f64>> = (0..times).map(|_| m.view()).collect();
    block_diag(&blocks)
}

/// Diagonal sparse matrix from a vector.
pub fn diag_matrix(d: &[f64]) -> CsMat<f64> {
    let n = d.len();
    let indptr: Vec<usize> = (0..=n).collect();
    let indices: Vec<usize> = (0..n).collect();
    CsMat::new((n, n), indptr, indices, d.to_vec())
}

/// `m^T * diag(d) * m` for CSR `m`, symmetrized.
pub fn quad_product(m: &CsMat<f64>, d: &[f64]) -> CsMat<f64> {
    assert_eq!(m.rows(), d.len());
    let mut dm = m.clone();
    scale_rows(&mut dm, d);
    let mt = m.transpose_view().to_owned().to_csr();
    let prod = (&mt * &dm).to_csr();
    symmetrize(&prod)
}

/// Scale each row of a CSR matrix by the matching diagonal entry.
pub fn scale_rows(m: &mut CsMat<f64>, d: &[f64]) {
    assert!(m.is_csr(), "scale_rows expects CSR");
    assert_eq!(m.rows(), d.len());
    let indptr = m.indptr().to_proper().to_vec();
    let data = m.data_mut();
    for r in 0..indptr.len() - 1 {
        for k in indptr[r]..indptr[r + 1] {
            data[k] *= d[r];
        }
    }
}

/// Horizontal concatenation `[a | b]` of two CSR matrices with equal row
/// counts.
pub fn hstack(a: CsMatView<f64>, b: CsMatView<f64>) -> CsMat<f64> {
    assert_eq!(a.rows(), b.rows());
    let rows = a.rows();
    let cols = a.cols() + b.cols();
    let ac = a.to_csr();
    let bc = b.to_csr();
    let mut indptr = Vec::with_capacity(rows + 1);
    let mut indices = Vec::with_capacity(ac.nnz() + bc.nnz());
    let mut data = Vec::with_capacity(ac.nnz() + bc.nnz());
    indptr.push(0usize);
    let (ap, ai, ad) = (ac.indptr().to_proper().to_vec(), ac.indices(), ac.data());
    let (bp, bi, bd) = (bc.indptr().to_proper().to_vec(), bc.indices(), bc.data());
    for r in 0..rows {
        for k in ap[r]..ap[r + 1] {
            indices.push(ai[k]);
            data.push(ad[k]);
        }
        for k in bp[r]..bp[r + 1] {
            indices.push(bi[k] + a.cols());
            data.push(bd[k]);
        }
        indptr.push(indices.len());
    }
    CsMat::new((rows, cols), indptr, indices, data)
}

/// Build a CSR matrix from triplets, summing duplicates.
pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> CsMat<f64> {
    let mut tri = TriMat::with_capacity((rows, cols), triplets.len());
    for &(r, c, v) in triplets {
        tri.add_triplet(r, c, v);
    }
    tri.to_csr()
}

/// Top-left `k x k` principal submatrix.
pub fn principal_submatrix(m: CsMatView<f64>, k: usize) -> CsMat<f64> {
    let mut triplets = Vec::new();
    for (v, (r, c)) in m.iter() {
        if r < k && c < k {
            triplets.push((r, c, *v));
        }
    }
    from_triplets(k, k, &triplets)
}

/// Sparse matrix-vector product.
pub fn matvec(m: CsMatView<f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.cols(), x.len());
    let mut out = vec![0.0; m.rows()];
    for (v, (r, c)) in m.iter() {
        out[r] += v * x[c];
    }
    out
}

/// Dense rendering (tests and small oracles only).
pub fn to_dense(m: CsMatView<f64>) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; m.cols()]; m.rows()];
    for (v, (r, c)) in m.iter() {
        out[r][c] += *v;
    }
    out
}
