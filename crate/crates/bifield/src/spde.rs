//! Sparse precision matrices for Matérn-type random fields.
//!
//! A univariate field is the solution of `b (kappa^2 - Laplacian) x = W`
//! discretized on the mesh; a bivariate field comes from the triangular
//! system where the second field is driven by the first through a third
//! operator with its own weight `b21` and scale `kappa21`. The sign of the
//! cross-correlation between the two fields is `-sign(b21)` (with `b22`
//! constrained positive), and the construction is positive definite for
//! every valid parameter value.

use sprs::CsMat;

use crate::error::{Error, Result};
use crate::fem::FemMatrices;
use crate::mesh::Mesh;
use crate::sparse::{
    block_diag, diag_matrix, from_triplets, quad_product, replicate_block_diag, Ordering,
    SpdFactor,
};

/// Univariate operator parameters; the smoothness exponent is fixed at 2.
#[derive(Debug, Clone, Copy)]
pub struct UniParams {
    pub b: f64,
    pub kappa: f64,
}

/// Parameters of the triangular bivariate system.
///
/// `b11`, `b22` must be positive; `b21` may take either sign and controls
/// the cross-correlation. All `kappa`s must be positive.
#[derive(Debug, Clone, Copy)]
pub struct BiParams {
    pub b11: f64,
    pub kappa11: f64,
    pub b21: f64,
    pub kappa21: f64,
    pub b22: f64,
    pub kappa22: f64,
}

/// Smallest admissible kappa; below this the operator is numerically
/// singular.
pub const KAPPA_MIN: f64 = 1e-8;

/// Sparse symmetric positive definite precision matrix over mesh nodes,
/// possibly stacked over fields and replicated over independent years.
#[derive(Debug, Clone)]
pub struct PrecisionMatrix {
    pub q: CsMat<f64>,
    pub n_fields: usize,
    pub n_nodes: usize,
    pub replicates: usize,
}

impl PrecisionMatrix {
    pub fn dim(&self) -> usize {
        self.q.rows()
    }
}

/// Discretized operator `b (kappa^2 - Laplacian)^(alpha/2)` on the FEM
/// basis: `alpha = 2` gives `b (kappa^2 C + G)`, `alpha = 0` gives `b C`.
pub fn operator_matrix(fem: &FemMatrices, b: f64, kappa: f64, alpha: u8) -> Result<CsMat<f64>> {
    if !b.is_finite() || !kappa.is_finite() {
        return Err(Error::Domain("non-finite operator parameter".into()));
    }
    match alpha {
        0 => {
            let mut k = diag_matrix(&fem.c_lumped);
            k.map_inplace(|v| b * v);
            Ok(k)
        }
        2 => {
            if kappa < 0.0 {
                return Err(Error::Domain(format!("kappa must be non-negative, got {kappa}")));
            }
            let c = diag_matrix(&fem.c_lumped);
            let mut k = (&c.map(|v| kappa * kappa * v) + &fem.g).to_csr();
            k.map_inplace(|v| b * v);
            Ok(k)
        }
        other => Err(Error::UnsupportedOperator(format!(
            "alpha must be 0 or 2, got {other}"
        ))),
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(Error::Domain(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

fn check_kappa(name: &str, v: f64) -> Result<()> {
    check_positive(name, v)?;
    if v <= KAPPA_MIN {
        return Err(Error::Domain(format!(
            "{name} = {v} is below the minimum {KAPPA_MIN}"
        )));
    }
    Ok(())
}

/// Precision of the univariate field: `Q = K C^-1 K` with
/// `K = b (kappa^2 C + G)`.
pub fn uni_precision(fem: &FemMatrices, p: &UniParams) -> Result<PrecisionMatrix> {
    check_positive("b", p.b)?;
    check_kappa("kappa", p.kappa)?;
    let k = operator_matrix(fem, p.b, p.kappa, 2)?;
    let inv_c: Vec<f64> = fem.c_lumped.iter().map(|c| 1.0 / c).collect();
    let q = quad_product(&k, &inv_c);
    Ok(PrecisionMatrix {
        q,
        n_fields: 1,
        n_nodes: fem.n,
        replicates: 1,
    })
}

/// Precision of the bivariate field from the triangular operator
/// `[[K11, 0], [K21, K22]]` with white-noise precision `C^-1` per block.
pub fn bi_precision(fem: &FemMatrices, p: &BiParams) -> Result<PrecisionMatrix> {
    check_positive("b11", p.b11)?;
    check_positive("b22", p.b22)?;
    check_kappa("kappa11", p.kappa11)?;
    check_kappa("kappa21", p.kappa21)?;
    check_kappa("kappa22", p.kappa22)?;
    if !p.b21.is_finite() {
        return Err(Error::Domain("b21 must be finite".into()));
    }

    let n = fem.n;
    let inv_c: Vec<f64> = fem.c_lumped.iter().map(|c| 1.0 / c).collect();
    let k11 = operator_matrix(fem, p.b11, p.kappa11, 2)?;
    let k21 = operator_matrix(fem, p.b21, p.kappa21, 2)?;
    let k22 = operator_matrix(fem, p.b22, p.kappa22, 2)?;

    // Q = [[K11 D K11 + K21 D K21, K21 D K22], [sym, K22 D K22]]
    let q11 = (&quad_product(&k11, &inv_c) + &quad_product(&k21, &inv_c)).to_csr();
    let q22 = quad_product(&k22, &inv_c);
    let dk22 = {
        let mut m = k22.clone();
        crate::sparse::scale_rows(&mut m, &inv_c);
        m
    };
    let q12 = (&k21 * &dk22).to_csr();

    let mut triplets: Vec<(usize, usize, f64)> =
        Vec::with_capacity(q11.nnz() + q22.nnz() + 2 * q12.nnz());
    for (v, (r, c)) in q11.iter() {
        triplets.push((r, c, *v));
    }
    for (v, (r, c)) in q22.iter() {
        triplets.push((r + n, c + n, *v));
    }
    for (v, (r, c)) in q12.iter() {
        triplets.push((r, c + n, *v));
        triplets.push((c + n, r, *v));
    }
    let q = from_triplets(2 * n, 2 * n, &triplets);
    Ok(PrecisionMatrix {
        q,
        n_fields: 2,
        n_nodes: n,
        replicates: 1,
    })
}

/// Independent replication: block-diagonal repetition sharing parameters.
pub fn replicate(prec: &PrecisionMatrix, times: usize) -> PrecisionMatrix {
    assert!(times >= 1, "replication count must be at least 1");
    if times == 1 {
        return prec.clone();
    }
    PrecisionMatrix {
        q: replicate_block_diag(prec.q.view(), times),
        n_fields: prec.n_fields,
        n_nodes: prec.n_nodes,
        replicates: prec.replicates * times,
    }
}

/// Correlation against one reference node.
///
/// Solves for one covariance column and normalizes by the marginal
/// standard deviations of the reference node and of each selected target
/// node. Targets are all field-`field_pair.1` nodes within `max_dist` of
/// the reference, thinned to at most `max_points` representatives chosen
/// nearest to evenly spaced distances (marginal variances cost one sparse
/// triangular solve per target). Field indices are 0-based.
pub fn correlation_curve(
    prec: &PrecisionMatrix,
    mesh: &Mesh,
    ref_node: usize,
    field_pair: (usize, usize),
    max_dist: f64,
    max_points: usize,
) -> Result<Vec<(f64, f64)>> {
    assert_eq!(prec.replicates, 1, "correlation_curve expects a single replicate");
    let n = prec.n_nodes;
    assert!(ref_node < n, "reference node out of range");
    let (fi, fj) = field_pair;
    assert!(fi < prec.n_fields && fj < prec.n_fields, "field index out of range");

    let factor = SpdFactor::new(prec.q.view(), &Ordering::Rcm)?;
    let ref_idx = fi * n + ref_node;
    let mut e = vec![0.0; prec.dim()];
    e[ref_idx] = 1.0;
    let cov_col = factor.solve(&e);
    let var_ref = cov_col[ref_idx];
    if !(var_ref > 0.0) {
        return Err(Error::IndefiniteSystem("non-positive reference variance".into()));
    }

    // candidate targets sorted by distance
    let refp = mesh.vertices[ref_node];
    let mut cands: Vec<(f64, usize)> = (0..n)
        .map(|k| (mesh.vertices[k].dist(&refp), k))
        .filter(|&(d, _)| d <= max_dist)
        .collect();
    cands.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // thin to ~max_points evenly spaced shells (always keep first/smallest)
    let selected: Vec<(f64, usize)> = if cands.len() <= max_points {
        cands
    } else {
        let mut sel = Vec::with_capacity(max_points);
        let mut pos = 0usize;
        for s in 0..max_points {
            let target = max_dist * s as f64 / (max_points - 1) as f64;
            while pos + 1 < cands.len() && cands[pos].0 < target {
                pos += 1;
            }
            sel.push(cands[pos]);
        }
        sel.dedup_by_key(|c| c.1);
        sel
    };

    let mut out = Vec::with_capacity(selected.len());
    for (d, k) in selected {
        let idx = fj * n + k;
        let var_k = if idx == ref_idx {
            var_ref
        } else {
            factor.quad_form_inv_sparse(&[(idx, 1.0)])
        };
        let corr = cov_col[idx] / (var_ref * var_k).sqrt();
        out.push((d, corr));
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

/// Zero-lag cross-correlation between the two fields at one node.
pub fn cross_correlation_at(prec: &PrecisionMatrix, node: usize) -> Result<f64> {
    assert_eq!(prec.n_fields, 2, "needs a bivariate precision");
    assert_eq!(prec.replicates, 1);
    let n = prec.n_nodes;
    let factor = SpdFactor::new(prec.q.view(), &Ordering::Rcm)?;
    let mut e = vec![0.0; prec.dim()];
    e[node] = 1.0;
    let col = factor.solve(&e);
    let var1 = col[node];
    let cov = col[n + node];
    let var2 = factor.quad_form_inv_sparse(&[(n + node, 1.0)]);
    Ok(cov / (var1 * var2).sqrt())
}

/// First distance at which the curve drops below `threshold`, linearly
/// interpolated between curve points. The curve is assumed to start at
/// its zero-distance value.
pub fn correlation_range(curve: &[(f64, f64)], threshold: f64) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::RangeUndefined { threshold });
    }
    if curve[0].1 < threshold {
        return Ok(curve[0].0);
    }
    for w in curve.windows(2) {
        let (d0, c0) = w[0];
        let (d1, c1) = w[1];
        if c0 >= threshold && c1 < threshold {
            let t = (c0 - threshold) / (c0 - c1);
            return Ok(d0 + t * (d1 - d0));
        }
    }
    Err(Error::RangeUndefined { threshold })
}

/// Block-diagonal composition of two independent univariate precisions
/// (the univariate model's spatial prior over both fields).
pub fn independent_pair_precision(
    fem: &FemMatrices,
    first: &UniParams,
    second: &UniParams,
) -> Result<PrecisionMatrix> {
    let q1 = uni_precision(fem, first)?;
    let q2 = uni_precision(fem, second)?;
    Ok(PrecisionMatrix {
        q: block_diag(&[q1.q.view(), q2.q.view()]),
        n_fields: 2,
        n_nodes: fem.n,
        replicates: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::DenseMat;
    use crate::fem::assemble_fem;
    use crate::mesh::{build_mesh, Point2};
    use crate::sparse::to_dense;
    use crate::special::matern_correlation_nu1;
    use rand::Rng;
    use rand::SeedableRng;

    fn small_mesh() -> Mesh {
        // ~30 vertices over [0,2]^2
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(2.0, 2.0),
            Point2::new(0.0, 2.0),
            Point2::new(1.0, 1.0),
        ];
        build_mesh(&pts, 0.8, 0.8).unwrap()
    }

    fn grid_mesh(extent: f64, max_edge: f64, ext: f64) -> Mesh {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(extent, 0.0),
            Point2::new(extent, extent),
            Point2::new(0.0, extent),
        ];
        build_mesh(&pts, max_edge, ext).unwrap()
    }

    #[test]
    fn operator_alpha0_is_scaled_mass() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let k = operator_matrix(&fem, 1.0, 3.0, 0).unwrap();
        let d = to_dense(k.view());
        for i in 0..fem.n {
            for j in 0..fem.n {
                let want = if i == j { fem.c_lumped[i] } else { 0.0 };
                assert_eq!(d[i][j], want);
            }
        }
    }

    #[test]
    fn operator_kappa_zero_is_scaled_stiffness() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let k = operator_matrix(&fem, 2.0, 0.0, 2).unwrap();
        let kd = to_dense(k.view());
        let gd = to_dense(fem.g.view());
        for i in 0..fem.n {
            for j in 0..fem.n {
                assert!((kd[i][j] - 2.0 * gd[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn operator_constant_vector_identity() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let k = operator_matrix(&fem, 1.0, 1.0, 2).unwrap();
        let ones = vec![1.0; fem.n];
        let k1 = crate::sparse::matvec(k.view(), &ones);
        for i in 0..fem.n {
            assert!(
                (k1[i] - fem.c_lumped[i]).abs() < 1e-10 * fem.c_lumped[i].max(1e-3),
                "row {i}"
            );
        }
    }

    #[test]
    fn operator_rejects_bad_alpha() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        assert!(matches!(
            operator_matrix(&fem, 1.0, 1.0, 1),
            Err(Error::UnsupportedOperator(_))
        ));
    }

    #[test]
    fn uni_rejects_tiny_kappa() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        assert!(uni_precision(&fem, &UniParams { b: 1.0, kappa: 1e-9 }).is_err());
        assert!(uni_precision(&fem, &UniParams { b: -1.0, kappa: 1.0 }).is_err());
    }

    /// Dense covariance from a precision matrix (test oracle route).
    fn dense_cov(q: &CsMat<f64>) -> DenseMat {
        DenseMat::from_rows(&to_dense(q.view())).inverse_spd().unwrap()
    }

    #[test]
    fn uni_marginal_variance_matches_formula() {
        // kappa = 2 -> range sqrt(8)/2 ~ 1.41; extension 3 > 2 ranges
        let kappa = 2.0;
        let b = 0.37;
        let mesh = grid_mesh(4.0, 0.12, 3.0);
        let fem = assemble_fem(&mesh);
        let prec = uni_precision(&fem, &UniParams { b, kappa }).unwrap();
        let factor = SpdFactor::new(prec.q.view(), &Ordering::Rcm).unwrap();
        let want = 1.0 / (4.0 * std::f64::consts::PI * b * b * kappa * kappa);
        // nodes well inside the original domain
        let mut checked = 0;
        for (i, p) in mesh.vertices.iter().enumerate() {
            if p.x > 1.0 && p.x < 3.0 && p.y > 1.0 && p.y < 3.0 {
                let var = factor.inv_diag_entry(i);
                assert!(
                    ((var - want) / want).abs() < 0.05,
                    "node {i}: var {var} vs {want}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn uni_correlation_matches_matern() {
        let kappa = 2.0;
        let b = 0.2;
        let mesh = grid_mesh(4.0, 0.12, 3.0);
        let fem = assemble_fem(&mesh);
        let prec = uni_precision(&fem, &UniParams { b, kappa }).unwrap();
        // reference node near the center
        let center = Point2::new(2.0, 2.0);
        let ref_node = (0..mesh.n_vertices())
            .min_by(|&a, &b| {
                mesh.vertices[a]
                    .dist(&center)
                    .partial_cmp(&mesh.vertices[b].dist(&center))
                    .unwrap()
            })
            .unwrap();
        let curve =
            correlation_curve(&prec, &mesh, ref_node, (0, 0), 3.0 / kappa, 60).unwrap();
        let mut n_checked = 0;
        for &(d, c) in &curve {
            if d >= 0.1 / kappa && d <= 3.0 / kappa {
                let want = matern_correlation_nu1(kappa, d);
                assert!(
                    (c - want).abs() <= 0.02,
                    "corr at d={d}: {c} vs matern {want}"
                );
                n_checked += 1;
            }
        }
        assert!(n_checked > 10);
        // kh = sqrt(8) point: analytic value 0.1397
        let h = 8.0_f64.sqrt() / kappa;
        let (_, c_near) = curve
            .iter()
            .min_by(|a, b| {
                (a.0 - h).abs().partial_cmp(&(b.0 - h).abs()).unwrap()
            })
            .copied()
            .unwrap();
        assert!((c_near - 0.1397).abs() < 0.025, "corr near sqrt(8)/kappa: {c_near}");
    }

    #[test]
    fn b_scales_covariance_not_correlation() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let p1 = uni_precision(&fem, &UniParams { b: 0.8, kappa: 1.5 }).unwrap();
        let c_scale = 3.0;
        let p2 = uni_precision(&fem, &UniParams { b: 0.8 * c_scale, kappa: 1.5 }).unwrap();
        let cov1 = dense_cov(&p1.q);
        let cov2 = dense_cov(&p2.q);
        let n = fem.n;
        for i in 0..n {
            for j in 0..n {
                let want = cov1.get(i, j) / (c_scale * c_scale);
                assert!(
                    (cov2.get(i, j) - want).abs() < 1e-12 * cov1.get(i, i).abs().max(1e-12),
                    "cov scaling at ({i},{j})"
                );
                let r1 = cov1.get(i, j) / (cov1.get(i, i) * cov1.get(j, j)).sqrt();
                let r2 = cov2.get(i, j) / (cov2.get(i, i) * cov2.get(j, j)).sqrt();
                assert!((r1 - r2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bi_decouples_at_zero_b21() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let p = BiParams {
            b11: 0.9,
            kappa11: 1.2,
            b21: 0.0,
            kappa21: 2.0,
            b22: 0.5,
            kappa22: 0.7,
        };
        let bi = bi_precision(&fem, &p).unwrap();
        let uni = independent_pair_precision(
            &fem,
            &UniParams { b: 0.9, kappa: 1.2 },
            &UniParams { b: 0.5, kappa: 0.7 },
        )
        .unwrap();
        let bd = to_dense(bi.q.view());
        let ud = to_dense(uni.q.view());
        let n2 = 2 * fem.n;
        for i in 0..n2 {
            for j in 0..n2 {
                assert_eq!(bd[i][j], ud[i][j], "entry ({i},{j})");
            }
        }
        // fields independent
        let gamma = cross_correlation_at(&bi, 0).unwrap();
        assert!(gamma.abs() < 1e-10);
    }

    #[test]
    fn negative_b21_gives_positive_cross_correlation() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let p = BiParams {
            b11: 1.0,
            kappa11: 1.0,
            b21: -0.8,
            kappa21: 1.0,
            b22: 1.0,
            kappa22: 1.0,
        };
        let bi = bi_precision(&fem, &p).unwrap();
        // pick an interior node
        let node = (0..mesh.n_vertices()).find(|&i| mesh.interior[i]).unwrap();
        let gamma = cross_correlation_at(&bi, node).unwrap();
        assert!(gamma > 0.0, "gamma = {gamma}");
    }

    #[test]
    fn negating_b21_mirrors_cross_covariance() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let base = BiParams {
            b11: 0.7,
            kappa11: 1.1,
            b21: 0.6,
            kappa21: 1.4,
            b22: 0.9,
            kappa22: 0.8,
        };
        let mut flipped = base;
        flipped.b21 = -base.b21;
        let q1 = bi_precision(&fem, &base).unwrap();
        let q2 = bi_precision(&fem, &flipped).unwrap();
        let c1 = dense_cov(&q1.q);
        let c2 = dense_cov(&q2.q);
        let n = fem.n;
        let scale = c1.get(0, 0);
        for i in 0..n {
            for j in 0..n {
                // marginal blocks unchanged
                assert!((c1.get(i, j) - c2.get(i, j)).abs() < 1e-10 * scale);
                assert!(
                    (c1.get(n + i, n + j) - c2.get(n + i, n + j)).abs() < 1e-10 * scale
                );
                // cross block negated
                assert!((c1.get(i, n + j) + c2.get(i, n + j)).abs() < 1e-10 * scale);
            }
        }
    }

    #[test]
    fn bi_first_field_is_exactly_the_univariate_matern() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let p = BiParams {
            b11: 0.6,
            kappa11: 1.3,
            b21: -1.1,
            kappa21: 0.9,
            b22: 0.8,
            kappa22: 1.7,
        };
        let bi = bi_precision(&fem, &p).unwrap();
        let uni = uni_precision(&fem, &UniParams { b: 0.6, kappa: 1.3 }).unwrap();
        let cb = dense_cov(&bi.q);
        let cu = dense_cov(&uni.q);
        let n = fem.n;
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (cb.get(i, j) - cu.get(i, j)).abs() < 1e-10 * cu.get(0, 0),
                    "first-field covariance mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn random_biparams_always_spd() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let logu = |rng: &mut rand_chacha::ChaCha8Rng, lo: f64, hi: f64| -> f64 {
            (rng.gen_range(lo.ln()..hi.ln())).exp()
        };
        for trial in 0..300 {
            let p = BiParams {
                b11: logu(&mut rng, 1e-3, 10.0),
                kappa11: logu(&mut rng, 0.1, 50.0),
                b21: rng.gen_range(-5.0..5.0),
                kappa21: logu(&mut rng, 0.1, 50.0),
                b22: logu(&mut rng, 1e-3, 10.0),
                kappa22: logu(&mut rng, 0.1, 50.0),
            };
            let prec = bi_precision(&fem, &p).unwrap();
            SpdFactor::new(prec.q.view(), &Ordering::Rcm)
                .unwrap_or_else(|e| panic!("trial {trial} not SPD: {e} with {p:?}"));
        }
    }

    #[test]
    fn replicate_block_structure() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let p = uni_precision(&fem, &UniParams { b: 1.0, kappa: 1.0 }).unwrap();
        let r1 = replicate(&p, 1);
        assert_eq!(r1.dim(), p.dim());
        let r5 = replicate(&p, 5);
        assert_eq!(r5.dim(), 5 * p.dim());
        let f1 = SpdFactor::new(p.q.view(), &Ordering::Rcm).unwrap();
        let f5 = SpdFactor::new(r5.q.view(), &Ordering::Rcm).unwrap();
        assert!((f5.log_det() - 5.0 * f1.log_det()).abs() < 1e-8);
    }

    #[test]
    fn replicates_are_independent() {
        let mesh = small_mesh();
        let fem = assemble_fem(&mesh);
        let p = uni_precision(&fem, &UniParams { b: 0.5, kappa: 1.0 }).unwrap();
        let r2 = replicate(&p, 2);
        let factor = SpdFactor::new(r2.q.view(), &Ordering::Rcm).unwrap();
        let n = p.dim();
        let mu = vec![0.0; 2 * n];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let m = 10_000;
        let node = 3;
        let (mut sxy, mut sx, mut sy, mut sx2, mut sy2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..m {
            let z = factor.sample(&mu, &mut rng);
            let (x, y) = (z[node], z[n + node]);
            sx += x;
            sy += y;
            sx2 += x * x;
            sy2 += y * y;
            sxy += x * y;
        }
        let mf = m as f64;
        let cov = sxy / mf - sx / mf * sy / mf;
        let vx = sx2 / mf - (sx / mf) * (sx / mf);
        let vy = sy2 / mf - (sy / mf) * (sy / mf);
        let r = cov / (vx * vy).sqrt();
        assert!(r.abs() < 0.05, "cross-replicate correlation {r}");
    }

    #[test]
    fn correlation_range_on_analytic_curve() {
        // analytic Matern curve, kappa = 1
        let kappa = 1.0;
        let curve: Vec<(f64, f64)> = (0..4000)
            .map(|i| {
                let d = i as f64 * 0.002;
                (d, matern_correlation_nu1(kappa, d))
            })
            .collect();
        let r = correlation_range(&curve, 0.1).unwrap();
        // oracle: kh K1(kh) = 0.1 at kh = 3.21432 (mpmath)
        assert!((r - 3.21432).abs() / 3.21432 < 0.01, "range {r}");
        // doubling kappa halves the range
        let curve2: Vec<(f64, f64)> = (0..4000)
            .map(|i| {
                let d = i as f64 * 0.001;
                (d, matern_correlation_nu1(2.0 * kappa, d))
            })
            .collect();
        let r2 = correlation_range(&curve2, 0.1).unwrap();
        assert!((r2 - r / 2.0).abs() / (r / 2.0) < 0.01);
        // threshold 1.0 -> 0 km
        let r0 = correlation_range(&curve, 1.0).unwrap();
        assert_eq!(r0, 0.0);
        // threshold the curve never reaches
        assert!(correlation_range(&curve[..40].to_vec(), 0.1).is_err());
    }

    #[test]
    fn fem_correlation_range_near_analytic() {
        let kappa = 2.0;
        let mesh = grid_mesh(4.0, 0.3, 3.0);
        let fem = assemble_fem(&mesh);
        let prec = uni_precision(&fem, &UniParams { b: 0.3, kappa }).unwrap();
        let center = Point2::new(2.0, 2.0);
        let ref_node = (0..mesh.n_vertices())
            .min_by(|&a, &b| {
                mesh.vertices[a]
                    .dist(&center)
                    .partial_cmp(&mesh.vertices[b].dist(&center))
                    .unwrap()
            })
            .unwrap();
        let curve = correlation_curve(&prec, &mesh, ref_node, (0, 0), 3.0, 80).unwrap();
        let r = correlation_range(&curve, 0.1).unwrap();
        let want = 3.21432 / kappa;
        assert!((r - want).abs() / want < 0.05, "range {r} vs {want}");
    }

    #[test]
    fn nnz_stays_linear_under_refinement() {
        let meshes = [
            grid_mesh(3.0, 0.6, 1.0),
            grid_mesh(3.0, 0.3, 1.0),
            grid_mesh(3.0, 0.15, 1.0),
        ];
        let mut ratios = Vec::new();
        for mesh in &meshes {
            let fem = assemble_fem(mesh);
            let p = uni_precision(&fem, &UniParams { b: 1.0, kappa: 1.0 }).unwrap();
            ratios.push(p.q.nnz() as f64 / fem.n as f64);
        }
        for r in &ratios {
            assert!(*r < 30.0, "nnz per node {r}");
        }
    }
}
