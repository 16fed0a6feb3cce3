//! Triangulated study region.
//!
//! Builds a 2-D triangulation covering the convex hull of the input
//! locations, inflated outward by an extension ring that absorbs boundary
//! effects of the differential operators assembled on it. Input locations
//! are always mesh vertices; the remaining vertices come from a hexagonal
//! lattice whose spacing is chosen so interior edges stay below the
//! requested maximum edge length.

use crate::error::{Error, Result};

/// Planar location in projected km coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Triangulation with an interior/extension flag per vertex.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Point2>,
    pub triangles: Vec<[usize; 3]>,
    /// True when the vertex lies inside (or on) the convex hull of the
    /// original input points, false for the extension ring.
    pub interior: Vec<bool>,
}

/// Tolerance below which two vertices are considered duplicates (km).
pub const DUPLICATE_TOL: f64 = 1e-9;
/// Input locations closer than this to an existing vertex are not
/// re-inserted (km).
pub const INSERT_TOL: f64 = 1e-6;

/// Lattice spacing as a fraction of `max_edge_km`. Local re-triangulation
/// around inserted observation points can stretch edges up to ~1.35x the
/// lattice spacing, so 0.7 keeps every interior edge below `max_edge_km`.
const LATTICE_FRACTION: f64 = 0.7;

pub fn build_mesh(points: &[Point2], max_edge_km: f64, extension_km: f64) -> Result<Mesh> {
    if points.is_empty() {
        return Err(Error::DegenerateGeometry("no input points".into()));
    }
    if !(max_edge_km > 0.0) {
        return Err(Error::Domain(format!(
            "max_edge_km must be positive, got {max_edge_km}"
        )));
    }
    if !(extension_km >= 0.0) {
        return Err(Error::Domain(format!(
            "extension_km must be non-negative, got {extension_km}"
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if !p.is_finite() {
            return Err(Error::Domain(format!("point {i} has non-finite coordinates")));
        }
    }

    let inputs = dedupe(points, DUPLICATE_TOL);
    let hull = convex_hull(&inputs);
    if hull.len() < 3 || polygon_area(&hull) <= 0.0 {
        return Err(Error::DegenerateGeometry(
            "need at least 3 non-collinear points".into(),
        ));
    }

    let spacing = max_edge_km * LATTICE_FRACTION;
    let mut vertices = inputs.clone();
    let guard = 0.35 * spacing;

    // Hexagonal lattice over the inflated bounding box, clipped to the
    // inflated hull. Lattice sites too close to an input point are skipped
    // to avoid slivers around inserted observations.
    let (mut xmin, mut ymin, mut xmax, mut ymax) = bbox(&hull);
    xmin -= extension_km + spacing;
    ymin -= extension_km + spacing;
    xmax += extension_km + spacing;
    ymax += extension_km + spacing;
    let row_step = spacing * 3.0_f64.sqrt() / 2.0;
    let n_rows = ((ymax - ymin) / row_step).ceil() as i64 + 1;
    let n_cols = ((xmax - xmin) / spacing).ceil() as i64 + 2;
    for r in 0..n_rows {
        let y = ymin + r as f64 * row_step;
        let x_off = if r % 2 == 0 { 0.0 } else { spacing / 2.0 };
        for c in 0..n_cols {
            let p = Point2::new(xmin + x_off + c as f64 * spacing, y);
            if dist_to_hull(&hull, &p) > extension_km {
                continue;
            }
            if inputs.iter().any(|q| q.dist(&p) < guard) {
                continue;
            }
            vertices.push(p);
        }
    }

    // Explicit ring at the full extension distance so the inflated hull
    // boundary is well covered even when the lattice clips unevenly.
    if extension_km > 0.0 {
        for p in offset_ring(&hull, extension_km, spacing) {
            if vertices.iter().rev().take(4096).any(|q| q.dist(&p) < guard) {
                continue;
            }
            vertices.push(p);
        }
    }

    let vertices = dedupe(&vertices, INSERT_TOL);

    let dpoints: Vec<delaunator::Point> = vertices
        .iter()
        .map(|p| delaunator::Point { x: p.x, y: p.y })
        .collect();
    let tri = delaunator::triangulate(&dpoints);
    if tri.triangles.is_empty() {
        return Err(Error::DegenerateGeometry(
            "triangulation produced no triangles".into(),
        ));
    }

    let mut triangles = Vec::with_capacity(tri.triangles.len() / 3);
    for t in tri.triangles.chunks(3) {
        let (a, b, c) = (t[0], t[1], t[2]);
        let area = signed_area(&vertices[a], &vertices[b], &vertices[c]);
        if area.abs() < 1e-14 {
            continue; // degenerate sliver from near-collinear boundary points
        }
        if area > 0.0 {
            triangles.push([a, b, c]);
        } else {
            triangles.push([a, c, b]);
        }
    }

    let interior = vertices
        .iter()
        .map(|p| dist_to_hull(&hull, p) <= DUPLICATE_TOL)
        .collect();

    Ok(Mesh {
        vertices,
        triangles,
        interior,
    })
}

impl Mesh {
    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Unique undirected edges (a < b).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|t| {
                [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]
                    .into_iter()
                    .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * signed_area(&self.vertices[a], &self.vertices[b], &self.vertices[c])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Plain-text serialization: a vertex table followed by a triangle table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("bifield-mesh v1\n");
        s.push_str(&format!("vertices {}\n", self.vertices.len()));
        for (i, p) in self.vertices.iter().enumerate() {
            s.push_str(&format!(
                "{} {} {} {}\n",
                i,
                p.x,
                p.y,
                if self.interior[i] { 1 } else { 0 }
            ));
        }
        s.push_str(&format!("triangles {}\n", self.triangles.len()));
        for t in &self.triangles {
            s.push_str(&format!("{} {} {}\n", t[0], t[1], t[2]));
        }
        s
    }

    /// Parse the plain-text format produced by [`Mesh::to_text`].
    ///
    /// Never panics on malformed input; returns a schema error instead.
    pub fn from_text(text: &str) -> Result<Mesh> {
        let mut lines = text.lines().enumerate();
        let schema = |line: usize, msg: &str| Error::Schema(format!("mesh line {}: {msg}", line + 1));

        let (ln, header) = lines
            .next()
            .ok_or_else(|| Error::Schema("empty mesh file".into()))?;
        if header.trim() != "bifield-mesh v1" {
            return Err(schema(ln, "expected header 'bifield-mesh v1'"));
        }
        let (ln, vline) = lines
            .next()
            .ok_or_else(|| Error::Schema("missing vertex count".into()))?;
        let n: usize = parse_count(vline, "vertices").map_err(|m| schema(ln, &m))?;

        let mut vertices = Vec::with_capacity(n.min(1 << 20));
        let mut interior = Vec::with_capacity(n.min(1 << 20));
        for k in 0..n {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::Schema(format!("expected {n} vertex rows, got {k}")))?;
            let mut it = line.split_whitespace();
            let id: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| schema(ln, "bad vertex id"))?;
            if id != k {
                return Err(schema(ln, &format!("vertex id {id} out of order, expected {k}")));
            }
            let x: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| schema(ln, "bad x coordinate"))?;
            let y: f64 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| schema(ln, "bad y coordinate"))?;
            if !x.is_finite() || !y.is_finite() {
                return Err(schema(ln, "non-finite coordinate"));
            }
            let flag: u8 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| schema(ln, "bad interior flag"))?;
            if flag > 1 {
                return Err(schema(ln, "interior flag must be 0 or 1"));
            }
            if it.next().is_some() {
                return Err(schema(ln, "trailing fields on vertex row"));
            }
            vertices.push(Point2::new(x, y));
            interior.push(flag == 1);
        }

        let (ln, tline) = lines
            .next()
            .ok_or_else(|| Error::Schema("missing triangle count".into()))?;
        let m: usize = parse_count(tline, "triangles").map_err(|msg| schema(ln, &msg))?;
        let mut triangles = Vec::with_capacity(m.min(1 << 20));
        for k in 0..m {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| Error::Schema(format!("expected {m} triangle rows, got {k}")))?;
            let mut ids = [0usize; 3];
            let mut it = line.split_whitespace();
            for slot in ids.iter_mut() {
                *slot = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| schema(ln, "bad triangle row"))?;
                if *slot >= n {
                    return Err(schema(ln, &format!("vertex index {} out of range", *slot)));
                }
            }
            if it.next().is_some() {
                return Err(schema(ln, "trailing fields on triangle row"));
            }
            if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
                return Err(schema(ln, "triangle repeats a vertex"));
            }
            triangles.push(ids);
        }
        for (ln, line) in lines {
            if !line.trim().is_empty() {
                return Err(schema(ln, "unexpected trailing content"));
            }
        }
        Ok(Mesh {
            vertices,
            triangles,
            interior,
        })
    }
}

fn parse_count(line: &str, keyword: &str) -> std::result::Result<usize, String> {
    let mut it = line.split_whitespace();
    match (it.next(), it.next(), it.next()) {
        (Some(k), Some(v), None) if k == keyword => v
            .parse()
            .map_err(|_| format!("bad {keyword} count '{v}'")),
        _ => Err(format!("expected '{keyword} <count>'")),
    }
}

#[inline]
pub(crate) fn signed_area(a: &Point2, b: &Point2, c: &Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn dedupe(points: &[Point2], tol: f64) -> Vec<Point2> {
    // Grid hash keyed on tol-sized cells; candidates checked against the
    // 3x3 neighborhood so near-boundary duplicates are still caught.
    use std::collections::HashMap;
    let mut kept: Vec<Point2> = Vec::with_capacity(points.len());
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    let cell = tol.max(1e-12);
    for p in points {
        let cx = (p.x / cell).floor() as i64;
        let cy = (p.y / cell).floor() as i64;
        let mut dup = false;
        'outer: for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(ids) = grid.get(&(cx + dx, cy + dy)) {
                    if ids.iter().any(|&i| kept[i].dist(p) < tol) {
                        dup = true;
                        break 'outer;
                    }
                }
            }
        }
        if !dup {
            grid.entry((cx, cy)).or_default().push(kept.len());
            kept.push(*p);
        }
    }
    kept
}

/// Convex hull, counter-clockwise, via Andrew's monotone chain.
pub(crate) fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    pts.dedup_by(|a, b| a.x == b.x && a.y == b.y);
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point2> = Vec::new();
    for p in &pts {
        while lower.len() >= 2
            && signed_area(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point2> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2
            && signed_area(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub(crate) fn polygon_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut a = 0.0;
    for i in 0..poly.len() {
        let p = &poly[i];
        let q = &poly[(i + 1) % poly.len()];
        a += p.x * q.y - q.x * p.y;
    }
    0.5 * a
}

/// Distance from a point to a convex polygon (0 when inside or on it).
pub(crate) fn dist_to_hull(hull: &[Point2], p: &Point2) -> f64 {
    let n = hull.len();
    let mut inside = true;
    for i in 0..n {
        if signed_area(&hull[i], &hull[(i + 1) % n], p) < 0.0 {
            inside = false;
            break;
        }
    }
    if inside {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..n {
        best = best.min(dist_to_segment(p, &hull[i], &hull[(i + 1) % n]));
    }
    best
}

fn dist_to_segment(p: &Point2, a: &Point2, b: &Point2) -> f64 {
    let abx = b.x - a.x;
    let aby = b.y - a.y;
    let len2 = abx * abx + aby * aby;
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p.x - a.x) * abx + (p.y - a.y) * aby) / len2;
    let t = t.clamp(0.0, 1.0);
    p.dist(&Point2::new(a.x + t * abx, a.y + t * aby))
}

/// Points at exactly `dist` outside the hull: offset edges plus corner
/// arcs, sampled at roughly `spacing`.
fn offset_ring(hull: &[Point2], dist: f64, spacing: f64) -> Vec<Point2> {
    let n = hull.len();
    let mut out = Vec::new();
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let ex = b.x - a.x;
        let ey = b.y - a.y;
        let len = ex.hypot(ey);
        if len == 0.0 {
            continue;
        }
        // outward normal of a CCW polygon edge
        let nx = ey / len;
        let ny = -ex / len;
        let steps = (len / spacing).ceil().max(1.0) as usize;
        for k in 0..=steps {
            let t = k as f64 / steps as f64;
            out.push(Point2::new(
                a.x + t * ex + dist * nx,
                a.y + t * ey + dist * ny,
            ));
        }
        // arc around vertex b, from this edge's normal to the next edge's
        let c = hull[(i + 2) % n];
        let fx = c.x - b.x;
        let fy = c.y - b.y;
        let flen = fx.hypot(fy);
        if flen == 0.0 {
            continue;
        }
        let a0 = ny.atan2(nx);
        let n2x = fy / flen;
        let n2y = -fx / flen;
        let mut a1 = n2y.atan2(n2x);
        while a1 < a0 {
            a1 += 2.0 * std::f64::consts::PI;
        }
        let arc_steps = ((a1 - a0) * dist / spacing).ceil().max(1.0) as usize;
        for k in 1..arc_steps {
            let ang = a0 + (a1 - a0) * k as f64 / arc_steps as f64;
            out.push(Point2::new(
                b.x + dist * ang.cos(),
                b.y + dist * ang.sin(),
            ));
        }
    }
    out
}

fn bbox(points: &[Point2]) -> (f64, f64, f64, f64) {
    let mut xmin = f64::INFINITY;
    let mut ymin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for p in points {
        xmin = xmin.min(p.x);
        ymin = ymin.min(p.y);
        xmax = xmax.max(p.x);
        ymax = ymax.max(p.y);
    }
    (xmin, ymin, xmax, ymax)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn unit_square_minimal() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ];
        let mesh = build_mesh(&pts, 2.0, 0.0).unwrap();
        assert!(mesh.triangles.len() >= 2);
        // covers the square
        assert!((mesh.total_area() - 1.0).abs() < 1e-12);
        // inputs are the first vertices
        for (i, p) in pts.iter().enumerate() {
            assert!(mesh.vertices[i].dist(p) < 1e-12);
        }
        assert!(mesh.interior.iter().all(|&b| b));
    }

    #[test]
    fn three_points_single_triangle() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(0.0, 3.0),
        ];
        let mesh = build_mesh(&pts, 10.0, 0.0).unwrap();
        assert!(!mesh.triangles.is_empty());
        for p in &pts {
            assert!(mesh.vertices.iter().any(|v| v.dist(p) < 1e-12));
        }
    }

    #[test]
    fn collinear_rejected() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(2.0, 2.0),
            Point2::new(3.0, 3.0),
        ];
        assert!(matches!(
            build_mesh(&pts, 1.0, 0.0),
            Err(Error::DegenerateGeometry(_))
        ));
        assert!(matches!(
            build_mesh(&pts[..2], 1.0, 1.0),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn random_points_edge_bound_and_extension() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<Point2> = (0..100)
            .map(|_| Point2::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)))
            .collect();
        let max_edge = 0.5;
        let ext = 2.0;
        let mesh = build_mesh(&pts, max_edge, ext).unwrap();
        let hull = convex_hull(&pts);
        // interior edges no longer than max_edge
        for (a, b) in mesh.edges() {
            if mesh.interior[a] && mesh.interior[b] {
                let len = mesh.vertices[a].dist(&mesh.vertices[b]);
                assert!(len <= max_edge + 1e-9, "interior edge of length {len}");
            }
        }
        // extension ring reaches just about ext beyond the hull, nowhere past it
        let mut max_d: f64 = 0.0;
        for v in &mesh.vertices {
            let d = dist_to_hull(&hull, v);
            assert!(d <= ext + 1e-9);
            max_d = max_d.max(d);
        }
        assert!(max_d > 0.95 * ext, "ring only reaches {max_d}");
        // all inputs are vertices
        for p in &pts {
            assert!(mesh.vertices.iter().any(|v| v.dist(p) < 1e-9));
        }
    }

    #[test]
    fn refinement_does_not_lose_vertices() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point2> = (0..30)
            .map(|_| Point2::new(rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0)))
            .collect();
        let coarse = build_mesh(&pts, 1.0, 1.0).unwrap();
        let fine = build_mesh(&pts, 0.5, 1.0).unwrap();
        assert!(fine.n_vertices() >= coarse.n_vertices());
    }

    #[test]
    fn triangles_positively_oriented_and_vertices_used() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point2> = (0..40)
            .map(|_| Point2::new(rng.gen_range(0.0..4.0), rng.gen_range(0.0..4.0)))
            .collect();
        let mesh = build_mesh(&pts, 0.8, 1.0).unwrap();
        for t in 0..mesh.triangles.len() {
            assert!(mesh.triangle_area(t) > 0.0);
        }
        let mut used = vec![false; mesh.n_vertices()];
        for t in &mesh.triangles {
            for &v in t {
                used[v] = true;
            }
        }
        assert!(used.iter().all(|&u| u), "every vertex belongs to a triangle");
    }

    #[test]
    fn text_roundtrip() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.25),
            Point2::new(0.5, 1.0),
            Point2::new(1.5, 1.5),
        ];
        let mesh = build_mesh(&pts, 0.4, 0.5).unwrap();
        let text = mesh.to_text();
        let back = Mesh::from_text(&text).unwrap();
        assert_eq!(mesh.triangles, back.triangles);
        assert_eq!(mesh.interior, back.interior);
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            assert_eq!(a.x, b.x);
            assert_eq!(a.y, b.y);
        }
    }

    #[test]
    fn from_text_rejects_malformed() {
        assert!(Mesh::from_text("").is_err());
        assert!(Mesh::from_text("bifield-mesh v1\nvertices 2\n0 0 0 1\n").is_err());
        assert!(Mesh::from_text("bifield-mesh v1\nvertices 1\n0 nan 0 1\ntriangles 0\n").is_err());
        assert!(
            Mesh::from_text("bifield-mesh v1\nvertices 1\n0 0 0 1\ntriangles 1\n0 0 5\n").is_err()
        );
    }

    #[test]
    fn duplicate_inputs_merged() {
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ];
        let mesh = build_mesh(&pts, 5.0, 0.0).unwrap();
        for i in 0..mesh.n_vertices() {
            for j in (i + 1)..mesh.n_vertices() {
                assert!(mesh.vertices[i].dist(&mesh.vertices[j]) > DUPLICATE_TOL);
            }
        }
    }
}
