//! Synthetic data generation from the generative model itself: latent
//! field draws per year, linear predictor, and optional measurement noise.
//! Drives the parameter-recovery and validation-ordering checks, and the
//! `simulate` command.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::fem::{projector, FemMatrices};
use crate::mesh::{Mesh, Point2};
use crate::model::{
    build_design, spatial_precision, BetaLayout, Field, ModelSpec, Observation,
};
use crate::sparse::{matvec, Ordering, SpdFactor};

/// A measurement site with its covariates.
#[derive(Debug, Clone)]
pub struct Station {
    pub id: String,
    pub location: Point2,
    pub elevation_m: f64,
    pub dist_ocean_m: f64,
}

/// One requested synthetic observation: which station, year and field.
#[derive(Debug, Clone, Copy)]
pub struct ObsRequest {
    pub station_idx: usize,
    pub year: i32,
    pub field: Field,
}

/// Result of a simulation: observation rows (model scale; humidity is on
/// the transformed scale) plus the latent truth per year.
pub struct Simulation {
    pub observations: Vec<Observation>,
    /// Per year, the stacked latent field over mesh nodes (2n entries, in
    /// the model's field order).
    pub fields: Vec<Vec<f64>>,
}

/// Draw the latent fields and assemble noisy observations.
///
/// `beta` follows [`BetaLayout`] order. With `noise` off the observations
/// equal the linear predictor exactly. Deterministic per seed.
pub fn simulate(
    mesh: &Mesh,
    fem: &FemMatrices,
    spec: &ModelSpec,
    theta: &[f64],
    beta: &[f64],
    stations: &[Station],
    requests: &[ObsRequest],
    noise: bool,
    seed: u64,
) -> Result<Simulation> {
    spec.validate()?;
    assert_eq!(beta.len(), spec.n_beta(), "beta has wrong length");
    let q_spatial = spatial_precision(fem, spec.kind, theta)?;
    let factor = SpdFactor::new(q_spatial.q.view(), &Ordering::Rcm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zero = vec![0.0; q_spatial.dim()];
    let fields: Vec<Vec<f64>> = spec.years.iter().map(|_| factor.sample(&zero, &mut rng)).collect();

    // observation skeletons carry station metadata; values filled below
    let mut obs: Vec<Observation> = requests
        .iter()
        .map(|r| {
            let st = &stations[r.station_idx];
            Observation {
                station_id: st.id.clone(),
                year: r.year,
                field: r.field,
                value: 0.0,
                location: st.location,
                elevation_m: st.elevation_m,
                dist_ocean_m: st.dist_ocean_m,
            }
        })
        .collect();

    let locations: Vec<Point2> = obs.iter().map(|o| o.location).collect();
    let bary = projector(mesh, &locations)?;
    let x = build_design(&obs, spec)?;
    let xbeta = matvec(x.view(), beta);

    let n = fem.n;
    for (r, o) in obs.iter_mut().enumerate() {
        let year_idx = spec.year_index(o.year)?;
        let block = spec.kind.field_index(o.field) * n;
        let field_vals = &fields[year_idx];
        let mut eta = xbeta[r];
        if let Some(row) = bary.outer_view(r) {
            for (vertex, &w) in row.iter() {
                eta += w * field_vals[block + vertex];
            }
        }
        let eps: f64 = if noise {
            let u: f64 = rng.sample(rand_distr::StandardNormal);
            spec.sigma(o.field) * u
        } else {
            0.0
        };
        o.value = eta + eps;
    }

    Ok(Simulation {
        observations: obs,
        fields,
    })
}

/// Uniformly scattered stations over a rectangle, with synthetic
/// covariates drawn on realistic scales (elevation up to ~2 km, distance
/// to ocean up to ~250 km). Deterministic per seed.
pub fn random_stations(
    prefix: &str,
    count: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    seed: u64,
) -> Vec<Station> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| Station {
            id: format!("{prefix}{i:03}"),
            location: Point2::new(
                rng.gen_range(x_range.0..x_range.1),
                rng.gen_range(y_range.0..y_range.1),
            ),
            elevation_m: rng.gen_range(0.0..2000.0),
            dist_ocean_m: rng.gen_range(0.0..2.5e5),
        })
        .collect()
}

/// Every (station, year, field) combination for the given stations.
pub fn full_requests(
    n_stations_t: usize,
    n_stations_h: usize,
    years: &[i32],
) -> Vec<ObsRequest> {
    let mut out = Vec::new();
    for &year in years {
        for s in 0..n_stations_t {
            out.push(ObsRequest {
                station_idx: s,
                year,
                field: Field::Temperature,
            });
        }
        for s in 0..n_stations_h {
            out.push(ObsRequest {
                station_idx: s,
                year,
                field: Field::Humidity,
            });
        }
    }
    out
}

impl BetaLayout {
    /// Convenience for tests and the simulator: build a beta vector from
    /// per-field year effects and covariate coefficients.
    pub fn pack(
        &self,
        year_t: &[f64],
        elev_t: f64,
        dist_t: f64,
        year_h: &[f64],
        elev_h: f64,
        dist_h: f64,
    ) -> Vec<f64> {
        let mut beta = Vec::with_capacity(self.len());
        beta.extend_from_slice(year_t);
        beta.push(elev_t);
        beta.push(dist_t);
        beta.extend_from_slice(year_h);
        beta.push(elev_h);
        beta.push(dist_h);
        assert_eq!(beta.len(), self.len());
        beta
    }
}
