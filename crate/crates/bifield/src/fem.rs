//! P1 finite-element matrices on a triangulation.
//!
//! The lumped mass matrix keeps the white-noise precision diagonal, which
//! is what makes every precision matrix built on top of it sparse.

use sprs::CsMat;

use crate::error::{Error, Result};
use crate::mesh::{signed_area, Mesh, Point2};
use crate::sparse::from_triplets;

/// Lumped mass and stiffness matrices of piecewise-linear elements.
#[derive(Debug, Clone)]
pub struct FemMatrices {
    /// Diagonal of the lumped mass matrix; entry i is one third of the
    /// area of the triangles touching vertex i.
    pub c_lumped: Vec<f64>,
    /// Stiffness matrix (gradient inner products), symmetric with zero
    /// row sums.
    pub g: CsMat<f64>,
    pub n: usize,
}

pub fn assemble_fem(mesh: &Mesh) -> FemMatrices {
    let n = mesh.n_vertices();
    let mut c_lumped = vec![0.0; n];
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * mesh.triangles.len());

    for tri in &mesh.triangles {
        let [a, b, c] = *tri;
        let pa = mesh.vertices[a];
        let pb = mesh.vertices[b];
        let pc = mesh.vertices[c];
        let area = 0.5 * signed_area(&pa, &pb, &pc);
        debug_assert!(area > 0.0, "triangle with non-positive area");

        for &v in tri {
            c_lumped[v] += area / 3.0;
        }

        // Edge vectors opposite each vertex; local stiffness is
        // dot(e_i, e_j) / (4 * area).
        let e = [
            (pc.x - pb.x, pc.y - pb.y),
            (pa.x - pc.x, pa.y - pc.y),
            (pb.x - pa.x, pb.y - pa.y),
        ];
        for i in 0..3 {
            for j in 0..3 {
                let val = (e[i].0 * e[j].0 + e[i].1 * e[j].1) / (4.0 * area);
                triplets.push((tri[i], tri[j], val));
            }
        }
    }

    FemMatrices {
        c_lumped,
        g: from_triplets(n, n, &triplets),
        n,
    }
}

/// Barycentric projector from mesh vertices to arbitrary locations.
///
/// Row i of the result holds the (at most 3) barycentric weights of
/// `locations[i]` within its containing triangle; rows sum to one.
pub fn projector(mesh: &Mesh, locations: &[Point2]) -> Result<CsMat<f64>> {
    let locator = MeshLocator::new(mesh);
    let mut triplets = Vec::with_capacity(3 * locations.len());
    for (i, p) in locations.iter().enumerate() {
        let (tri, w) = locator
            .locate(p)
            .ok_or(Error::OutOfDomain { index: i, x: p.x, y: p.y })?;
        let t = mesh.triangles[tri];
        for k in 0..3 {
            if w[k] != 0.0 {
                triplets.push((i, t[k], w[k]));
            }
        }
    }
    Ok(from_triplets(locations.len(), mesh.n_vertices(), &triplets))
}

/// Uniform-grid point locator over the mesh triangles.
pub struct MeshLocator<'a> {
    mesh: &'a Mesh,
    xmin: f64,
    ymin: f64,
    cell: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<usize>>,
}

impl<'a> MeshLocator<'a> {
    pub fn new(mesh: &'a Mesh) -> Self {
        let mut xmin = f64::INFINITY;
        let mut ymin = f64::INFINITY;
        let mut xmax = f64::NEG_INFINITY;
        let mut ymax = f64::NEG_INFINITY;
        for p in &mesh.vertices {
            xmin = xmin.min(p.x);
            ymin = ymin.min(p.y);
            xmax = xmax.max(p.x);
            ymax = ymax.max(p.y);
        }
        // cell size ~ mean triangle diameter
        let mean_area = (mesh.total_area() / mesh.triangles.len() as f64).max(1e-30);
        let cell = (2.0 * mean_area.sqrt()).max(1e-12);
        let nx = (((xmax - xmin) / cell).ceil() as usize).max(1);
        let ny = (((ymax - ymin) / cell).ceil() as usize).max(1);
        let mut bins = vec![Vec::new(); nx * ny];
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let xs = tri.map(|v| mesh.vertices[v].x);
            let ys = tri.map(|v| mesh.vertices[v].y);
            let cx0 = (((xs.iter().cloned().fold(f64::INFINITY, f64::min) - xmin) / cell) as usize)
                .min(nx - 1);
            let cx1 = (((xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - xmin) / cell)
                as usize)
                .min(nx - 1);
            let cy0 = (((ys.iter().cloned().fold(f64::INFINITY, f64::min) - ymin) / cell) as usize)
                .min(ny - 1);
            let cy1 = (((ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ymin) / cell)
                as usize)
                .min(ny - 1);
            for cx in cx0..=cx1 {
                for cy in cy0..=cy1 {
                    bins[cy * nx + cx].push(t);
                }
            }
        }
        Self {
            mesh,
            xmin,
            ymin,
            cell,
            nx,
            ny,
            bins,
        }
    }

    /// Containing triangle and barycentric weights, or None when outside
    /// the mesh. Weights are clamped so tiny negatives from roundoff do
    /// not leak out, and rows renormalize to sum exactly to one.
    pub fn locate(&self, p: &Point2) -> Option<(usize, [f64; 3])> {
        if !p.is_finite() {
            return None;
        }
        let cx = (((p.x - self.xmin) / self.cell).floor().max(0.0) as usize).min(self.nx - 1);
        let cy = (((p.y - self.ymin) / self.cell).floor().max(0.0) as usize).min(self.ny - 1);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.bins[cy * self.nx + cx] {
            let [a, b, c] = self.mesh.triangles[t];
            let pa = self.mesh.vertices[a];
            let pb = self.mesh.vertices[b];
            let pc = self.mesh.vertices[c];
            let full = signed_area(&pa, &pb, &pc);
            let wa = signed_area(p, &pb, &pc) / full;
            let wb = signed_area(&pa, p, &pc) / full;
            let wc = signed_area(&pa, &pb, p) / full;
            let min_w = wa.min(wb).min(wc);
            if min_w >= -1e-9 {
                if best.map_or(true, |(_, _, m)| min_w > m) {
                    best = Some((t, [wa, wb, wc], min_w));
                }
            }
        }
        best.map(|(t, mut w, _)| {
            for wi in w.iter_mut() {
                if wi.abs() < 1e-12 {
                    *wi = 0.0;
                }
                *wi = wi.max(0.0);
            }
            let s: f64 = w.iter().sum();
            for wi in w.iter_mut() {
                *wi /= s;
            }
            (t, w)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_mesh;
    use crate::sparse::to_dense;
    use rand::Rng;
    use rand::SeedableRng;

    fn right_triangle_mesh() -> Mesh {
        Mesh {
            vertices: vec![
                Point2::new(0.0, 0.0),
                Point2::new(1.0, 0.0),
                Point2::new(0.0, 1.0),
            ],
            triangles: vec![[0, 1, 2]],
            interior: vec![true, true, true],
        }
    }

    #[test]
    fn single_right_triangle_lumped_mass() {
        let fem = assemble_fem(&right_triangle_mesh());
        for i in 0..3 {
            assert!((fem.c_lumped[i] - 1.0 / 6.0).abs() < 1e-15);
        }
        let total: f64 = fem.c_lumped.iter().sum();
        assert!((total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stiffness_nullspace_symmetry_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Point2> = (0..40)
            .map(|_| Point2::new(rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0)))
            .collect();
        let mesh = build_mesh(&pts, 0.7, 0.5).unwrap();
        let fem = assemble_fem(&mesh);
        let g = to_dense(fem.g.view());
        let n = fem.n;
        // G * 1 = 0 and symmetry
        for i in 0..n {
            let row_sum: f64 = g[i].iter().sum();
            assert!(row_sum.abs() < 1e-10 * fem.c_lumped[i].max(1.0), "row {i}: {row_sum}");
            for j in 0..n {
                assert!((g[i][j] - g[j][i]).abs() < 1e-12);
            }
        }
        // PSD: x^T G x >= 0 for random x
        for seed in 0..5 {
            let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..n).map(|_| r2.gen_range(-1.0..1.0)).collect();
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += x[i] * g[i][j] * x[j];
                }
            }
            assert!(q >= -1e-10);
        }
        // total lumped mass = mesh area
        let total: f64 = fem.c_lumped.iter().sum();
        assert!((total - mesh.total_area()).abs() < 1e-10);
    }

    /// Independent stiffness oracle: gradient of each basis function by
    /// solving the 3x3 linear system for its plane coefficients, then
    /// integrating grad_i . grad_j exactly (gradients are constant).
    fn stiffness_oracle_entry(mesh: &Mesh, i: usize, j: usize) -> f64 {
        let mut acc = 0.0;
        for tri in &mesh.triangles {
            if !tri.contains(&i) || !tri.contains(&j) {
                continue;
            }
            let p: Vec<Point2> = tri.iter().map(|&v| mesh.vertices[v]).collect();
            let area = 0.5 * signed_area(&p[0], &p[1], &p[2]);
            let grad = |v: usize| -> (f64, f64) {
                // plane a + b x + c y with value 1 at vertex v, 0 elsewhere
                let k = tri.iter().position(|&t| t == v).unwrap();
                let mut rhs = [0.0; 3];
                rhs[k] = 1.0;
                // solve [1 x0 y0; 1 x1 y1; 1 x2 y2] coef = rhs by Cramer
                let det = (p[1].x - p[0].x) * (p[2].y - p[0].y)
                    - (p[2].x - p[0].x) * (p[1].y - p[0].y);
                let b = (rhs[1] - rhs[0]) * (p[2].y - p[0].y)
                    - (rhs[2] - rhs[0]) * (p[1].y - p[0].y);
                let c = (rhs[2] - rhs[0]) * (p[1].x - p[0].x)
                    - (rhs[1] - rhs[0]) * (p[2].x - p[0].x);
                (b / det, c / det)
            };
            let gi = grad(i);
            let gj = grad(j);
            acc += area * (gi.0 * gj.0 + gi.1 * gj.1);
        }
        acc
    }

    #[test]
    fn stiffness_matches_quadrature_oracle_on_grid() {
        // structured grid on [0,1]^2 with h = 0.25
        let mut pts = Vec::new();
        for r in 0..5 {
            for c in 0..5 {
                pts.push(Point2::new(c as f64 * 0.25, r as f64 * 0.25));
            }
        }
        let mesh = build_mesh(&pts, 0.5, 0.0).unwrap();
        let fem = assemble_fem(&mesh);
        let g = to_dense(fem.g.view());
        for i in 0..fem.n {
            for j in 0..fem.n {
                let want = stiffness_oracle_entry(&mesh, i, j);
                assert!(
                    (g[i][j] - want).abs() < 1e-12,
                    "G[{i},{j}] = {} vs oracle {want}",
                    g[i][j]
                );
            }
        }
    }

    #[test]
    fn projector_vertex_centroid_and_reproduction() {
        let mesh = right_triangle_mesh();
        // exactly at vertex 2
        let a = projector(&mesh, &[Point2::new(0.0, 1.0)]).unwrap();
        let d = to_dense(a.view());
        assert_eq!(d[0], vec![0.0, 0.0, 1.0]);
        // centroid
        let a = projector(&mesh, &[Point2::new(1.0 / 3.0, 1.0 / 3.0)]).unwrap();
        let d = to_dense(a.view());
        for w in &d[0] {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        // random interior points reproduce their own coordinates
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Point2> = (0..50)
            .map(|_| {
                let mut x = rng.gen_range(0.0..1.0);
                let mut y = rng.gen_range(0.0..1.0);
                if x + y > 1.0 {
                    x = 1.0 - x;
                    y = 1.0 - y;
                }
                Point2::new(x, y)
            })
            .collect();
        let a = projector(&mesh, &pts).unwrap();
        let d = to_dense(a.view());
        for (i, p) in pts.iter().enumerate() {
            let rx: f64 = (0..3).map(|k| d[i][k] * mesh.vertices[k].x).sum();
            let ry: f64 = (0..3).map(|k| d[i][k] * mesh.vertices[k].y).sum();
            assert!((rx - p.x).abs() < 1e-12 && (ry - p.y).abs() < 1e-12);
            let s: f64 = d[i].iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn projector_outside_reports_index() {
        let mesh = right_triangle_mesh();
        let err = projector(
            &mesh,
            &[Point2::new(0.1, 0.1), Point2::new(5.0, 5.0)],
        )
        .unwrap_err();
        match err {
            crate::error::Error::OutOfDomain { index, .. } => assert_eq!(index, 1),
            e => panic!("wrong error {e}"),
        }
    }

    #[test]
    fn assembly_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<Point2> = (0..25)
            .map(|_| Point2::new(rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)))
            .collect();
        let mesh = build_mesh(&pts, 0.5, 0.3).unwrap();
        let f1 = assemble_fem(&mesh);
        let f2 = assemble_fem(&mesh);
        assert_eq!(f1.c_lumped, f2.c_lumped);
        assert_eq!(f1.g.data(), f2.g.data());
        assert_eq!(f1.g.indices(), f2.g.indices());
    }
}
