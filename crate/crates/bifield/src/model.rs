//! Three-level hierarchical model: Gaussian observations with fixed noise,
//! linear predictors with year effects and standardized covariates, and a
//! latent field that stacks the spatial replicates with the regression
//! coefficients.

use sprs::CsMat;

use crate::error::{Error, Result};
use crate::fem::{projector, FemMatrices};
use crate::mesh::{Mesh, Point2};
use crate::sparse::{block_diag, diag_matrix, from_triplets, hstack, replicate_block_diag};
use crate::spde::{bi_precision, independent_pair_precision, BiParams, PrecisionMatrix, UniParams};
use crate::special::normal_logpdf;

/// Observed quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Field {
    Temperature,
    Humidity,
}

impl Field {
    pub fn code(&self) -> &'static str {
        match self {
            Field::Temperature => "T",
            Field::Humidity => "H",
        }
    }

    pub fn parse(s: &str) -> Result<Field> {
        match s {
            "T" | "t" => Ok(Field::Temperature),
            "H" | "h" => Ok(Field::Humidity),
            other => Err(Error::Schema(format!("unknown field '{other}' (expected T or H)"))),
        }
    }
}

/// Which spatial prior ties the two fields together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Independent fields.
    Um,
    /// Triangular system with temperature first, humidity second.
    BmTh,
    /// Triangular system with humidity first, temperature second.
    BmHt,
}

impl ModelKind {
    pub fn code(&self) -> &'static str {
        match self {
            ModelKind::Um => "um",
            ModelKind::BmTh => "bmth",
            ModelKind::BmHt => "bmht",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s.to_ascii_lowercase().as_str() {
            "um" => Ok(ModelKind::Um),
            "bmth" => Ok(ModelKind::BmTh),
            "bmht" => Ok(ModelKind::BmHt),
            other => Err(Error::Schema(format!(
                "unknown model '{other}' (expected um, bmth or bmht)"
            ))),
        }
    }

    /// Position of a field within the stacked spatial block.
    pub fn field_index(&self, field: Field) -> usize {
        match (self, field) {
            (ModelKind::BmHt, Field::Humidity) => 0,
            (ModelKind::BmHt, Field::Temperature) => 1,
            (_, Field::Temperature) => 0,
            (_, Field::Humidity) => 1,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            ModelKind::Um => 4,
            _ => 6,
        }
    }

    /// Index of the cross-coupling weight in the parameter vector, when
    /// the model has one.
    pub fn b21_index(&self) -> Option<usize> {
        match self {
            ModelKind::Um => None,
            _ => Some(2),
        }
    }

    /// Parameter names in vector order. Diagonal operators are named by the
    /// field they drive.
    pub fn param_names(&self) -> Vec<&'static str> {
        match self {
            ModelKind::Um => vec!["b_T", "kappa_T", "b_H", "kappa_H"],
            ModelKind::BmTh => vec!["b_T", "kappa_T", "b_cross", "kappa_cross", "b_H", "kappa_H"],
            ModelKind::BmHt => vec!["b_H", "kappa_H", "b_cross", "kappa_cross", "b_T", "kappa_T"],
        }
    }
}

/// Elevation standardization divisor (meters).
pub const ELEV_DIVISOR: f64 = 2e3;
/// Distance-to-ocean standardization divisor (meters).
pub const DIST_DIVISOR: f64 = 2.5e5;

/// One observation row, with humidity already on the transformed scale.
#[derive(Debug, Clone)]
pub struct Observation {
    pub station_id: String,
    pub year: i32,
    pub field: Field,
    pub value: f64,
    pub location: Point2,
    pub elevation_m: f64,
    pub dist_ocean_m: f64,
}

/// Model configuration: kind, year set, fixed noise levels and prior
/// variances.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub years: Vec<i32>,
    pub sigma_t: f64,
    pub sigma_h: f64,
    pub beta_prior_variance: f64,
    pub theta_prior_variance: f64,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, years: Vec<i32>) -> Self {
        Self {
            kind,
            years,
            sigma_t: 0.1,
            sigma_h: 0.01,
            beta_prior_variance: 100.0,
            theta_prior_variance: 100.0,
        }
    }

    pub fn sigma(&self, field: Field) -> f64 {
        match field {
            Field::Temperature => self.sigma_t,
            Field::Humidity => self.sigma_h,
        }
    }

    pub fn year_index(&self, year: i32) -> Result<usize> {
        self.years
            .iter()
            .position(|&y| y == year)
            .ok_or_else(|| Error::Schema(format!("year {year} not in the model's year set")))
    }

    pub fn n_beta(&self) -> usize {
        2 * (self.years.len() + 2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_t > 0.0) || !(self.sigma_h > 0.0) {
            return Err(Error::Domain("noise standard deviations must be positive".into()));
        }
        if !(self.beta_prior_variance > 0.0) || !(self.theta_prior_variance > 0.0) {
            return Err(Error::Domain("prior variances must be positive".into()));
        }
        if self.years.is_empty() {
            return Err(Error::Schema("the model needs at least one year".into()));
        }
        let mut sorted = self.years.clone();
        sorted.dedup();
        if sorted.len() != self.years.len() {
            return Err(Error::Schema("duplicate years in the model's year set".into()));
        }
        Ok(())
    }
}

/// Names and offsets of the regression coefficient block: for each field
/// (temperature block first) the year effects, then elevation, then
/// distance to ocean.
#[derive(Debug, Clone)]
pub struct BetaLayout {
    pub names: Vec<String>,
    n_years: usize,
}

impl BetaLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut names = Vec::with_capacity(spec.n_beta());
        for field in [Field::Temperature, Field::Humidity] {
            for y in &spec.years {
                names.push(format!("year_{y}_{}", field.code()));
            }
            names.push(format!("elev_{}", field.code()));
            names.push(format!("dist_{}", field.code()));
        }
        Self {
            names,
            n_years: spec.years.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn field_offset(&self, field: Field) -> usize {
        match field {
            Field::Temperature => 0,
            Field::Humidity => self.n_years + 2,
        }
    }

    pub fn year_col(&self, field: Field, year_idx: usize) -> usize {
        self.field_offset(field) + year_idx
    }

    pub fn elev_col(&self, field: Field) -> usize {
        self.field_offset(field) + self.n_years
    }

    pub fn dist_col(&self, field: Field) -> usize {
        self.field_offset(field) + self.n_years + 1
    }
}

/// Design matrix: one year indicator plus standardized elevation and
/// distance per row, in the row's field block.
pub fn build_design(obs: &[Observation], spec: &ModelSpec) -> Result<CsMat<f64>> {
    let layout = BetaLayout::new(spec);
    let mut triplets = Vec::with_capacity(3 * obs.len());
    for (r, o) in obs.iter().enumerate() {
        if !o.elevation_m.is_finite() || !o.dist_ocean_m.is_finite() {
            return Err(Error::Schema(format!(
                "observation {r} (station {}) has non-finite covariates",
                o.station_id
            )));
        }
        let year_idx = spec.year_index(o.year)?;
        triplets.push((r, layout.year_col(o.field, year_idx), 1.0));
        triplets.push((r, layout.elev_col(o.field), o.elevation_m / ELEV_DIVISOR));
        triplets.push((r, layout.dist_col(o.field), o.dist_ocean_m / DIST_DIVISOR));
    }
    Ok(from_triplets(obs.len(), layout.len(), &triplets))
}

/// Spatial precision over the stacked (field-major) pair of fields for one
/// replicate, in the model's field order.
pub fn spatial_precision(
    fem: &FemMatrices,
    kind: ModelKind,
    theta: &[f64],
) -> Result<PrecisionMatrix> {
    if theta.len() != kind.n_params() {
        return Err(Error::Domain(format!(
            "model {} expects {} parameters, got {}",
            kind.code(),
            kind.n_params(),
            theta.len()
        )));
    }
    match kind {
        ModelKind::Um => independent_pair_precision(
            fem,
            &UniParams { b: theta[0], kappa: theta[1] },
            &UniParams { b: theta[2], kappa: theta[3] },
        ),
        ModelKind::BmTh | ModelKind::BmHt => bi_precision(
            fem,
            &BiParams {
                b11: theta[0],
                kappa11: theta[1],
                b21: theta[2],
                kappa21: theta[3],
                b22: theta[4],
                kappa22: theta[5],
            },
        ),
    }
}

/// Joint system for the latent field z = (x, beta): prior precision,
/// observation operator, noise precision and data vector.
#[derive(Debug, Clone)]
pub struct LatentSystem {
    pub q_prior: CsMat<f64>,
    pub c_obs: CsMat<f64>,
    pub q_eps: Vec<f64>,
    pub y: Vec<f64>,
    pub n_nodes: usize,
    pub n_years: usize,
    pub beta_layout: BetaLayout,
}

impl LatentSystem {
    pub fn dim(&self) -> usize {
        self.q_prior.rows()
    }

    pub fn spatial_dim(&self) -> usize {
        self.n_years * 2 * self.n_nodes
    }
}

/// Column offsets of one observation's barycentric weights within the
/// stacked latent vector.
fn spatial_col(kind: ModelKind, n: usize, year_idx: usize, field: Field, vertex: usize) -> usize {
    year_idx * 2 * n + kind.field_index(field) * n + vertex
}

pub fn assemble_system(
    obs: &[Observation],
    mesh: &Mesh,
    fem: &FemMatrices,
    spec: &ModelSpec,
    theta: &[f64],
) -> Result<LatentSystem> {
    spec.validate()?;
    let n = fem.n;
    let j = spec.years.len();
    let n_beta = spec.n_beta();
    let spatial_dim = j * 2 * n;
    let dim = spatial_dim + n_beta;

    // prior: replicated spatial block plus the coefficient ridge
    let q_spatial = spatial_precision(fem, spec.kind, theta)?;
    let q_repl = replicate_block_diag(q_spatial.q.view(), j);
    let beta_prec = diag_matrix(&vec![1.0 / spec.beta_prior_variance; n_beta]);
    let q_prior = block_diag(&[q_repl.view(), beta_prec.view()]);

    // observation operator C = (A, X)
    let locations: Vec<Point2> = obs.iter().map(|o| o.location).collect();
    let bary = projector(mesh, &locations)?;
    let mut a_triplets = Vec::with_capacity(bary.nnz());
    for (r, o) in obs.iter().enumerate() {
        let year_idx = spec.year_index(o.year)?;
        if let Some(row) = bary.outer_view(r) {
            for (vertex, &w) in row.iter() {
                a_triplets.push((r, spatial_col(spec.kind, n, year_idx, o.field, vertex), w));
            }
        }
    }
    let a_full = from_triplets(obs.len(), spatial_dim, &a_triplets);
    let x = build_design(obs, spec)?;
    let c_obs = hstack(a_full.view(), x.view());

    let q_eps: Vec<f64> = obs.iter().map(|o| 1.0 / spec.sigma(o.field).powi(2)).collect();
    let y: Vec<f64> = obs.iter().map(|o| o.value).collect();
    for (r, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Schema(format!("observation {r} has non-finite value")));
        }
    }

    debug_assert_eq!(q_prior.rows(), dim);
    Ok(LatentSystem {
        q_prior,
        c_obs,
        q_eps,
        y,
        n_nodes: n,
        n_years: j,
        beta_layout: BetaLayout::new(spec),
    })
}

/// Log prior density of the hyperparameters: independent Gaussians on the
/// logs of the positivity-constrained parameters and on the raw
/// cross-coupling weight.
pub fn log_prior_theta(theta: &[f64], spec: &ModelSpec) -> Result<f64> {
    if theta.len() != spec.kind.n_params() {
        return Err(Error::Domain(format!(
            "model {} expects {} parameters, got {}",
            spec.kind.code(),
            spec.kind.n_params(),
            theta.len()
        )));
    }
    let b21_idx = spec.kind.b21_index();
    let v = spec.theta_prior_variance;
    let mut lp = 0.0;
    for (i, &p) in theta.iter().enumerate() {
        if Some(i) == b21_idx {
            lp += normal_logpdf(p, 0.0, v);
        } else {
            if !(p > 0.0) {
                return Err(Error::Domain(format!(
                    "parameter {} must be positive, got {p}",
                    spec.kind.param_names()[i]
                )));
            }
            lp += normal_logpdf(p.ln(), 0.0, v);
        }
    }
    Ok(lp)
}
