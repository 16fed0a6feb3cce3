//! Joined, validated dataset: stations plus observations, with humidity
//! transformed onto the model scale.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::io::csv::{parse_obs, parse_stations, RawObs};
use crate::model::{Field, Observation};
use crate::preprocess::{boxcox, estimate_lambda, LambdaGrid};
use crate::simulate::Station;

/// Fixed transform exponent or estimation from the data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    Auto,
}

impl LambdaChoice {
    pub fn parse(s: &str) -> Result<LambdaChoice> {
        if s.eq_ignore_ascii_case("auto") {
            Ok(LambdaChoice::Auto)
        } else {
            s.parse()
                .map(LambdaChoice::Fixed)
                .map_err(|_| Error::Schema(format!("lambda must be 'auto' or a number, got '{s}'")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub stations: Vec<Station>,
    /// Observations with humidity on the transformed scale.
    pub observations: Vec<Observation>,
    /// Transform exponent applied to humidity (1.0 when no humidity rows
    /// exist).
    pub lambda: f64,
    /// Whether lambda came from estimation or configuration.
    pub lambda_estimated: bool,
    /// Sorted distinct years present in the data.
    pub years: Vec<i32>,
}

/// Join parsed tables into model-ready observations.
pub fn build_dataset(
    stations: Vec<Station>,
    raw_obs: Vec<RawObs>,
    lambda: LambdaChoice,
    grid: LambdaGrid,
) -> Result<Dataset> {
    let by_id: BTreeMap<&str, usize> = stations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    for (row, o) in raw_obs.iter().enumerate() {
        if !by_id.contains_key(o.station_id.as_str()) {
            return Err(Error::Schema(format!(
                "observation row {}: unknown station '{}'",
                row + 2, // header + 1-based
                o.station_id
            )));
        }
    }

    let humidity: Vec<f64> = raw_obs
        .iter()
        .filter(|o| o.field == Field::Humidity)
        .map(|o| o.value)
        .collect();
    let (lambda_hat, estimated) = match lambda {
        LambdaChoice::Fixed(l) => (l, false),
        LambdaChoice::Auto => {
            if humidity.is_empty() {
                (1.0, false)
            } else {
                (estimate_lambda(&humidity, grid)?, true)
            }
        }
    };

    let mut years: Vec<i32> = raw_obs.iter().map(|o| o.year).collect();
    years.sort_unstable();
    years.dedup();

    let observations = raw_obs
        .into_iter()
        .map(|o| {
            let st = &stations[by_id[o.station_id.as_str()]];
            let value = match o.field {
                Field::Temperature => o.value,
                Field::Humidity => boxcox(o.value, lambda_hat)?,
            };
            Ok(Observation {
                station_id: o.station_id,
                year: o.year,
                field: o.field,
                value,
                location: st.location,
                elevation_m: st.elevation_m,
                dist_ocean_m: st.dist_ocean_m,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Dataset {
        stations,
        observations,
        lambda: lambda_hat,
        lambda_estimated: estimated,
        years,
    })
}

/// Parse both files and join them.
pub fn load_dataset(
    stations_text: &str,
    obs_text: &str,
    lambda: LambdaChoice,
    grid: LambdaGrid,
) -> Result<Dataset> {
    let stations =
        parse_stations(stations_text).map_err(|e| Error::Schema(format!("stations: {e}")))?;
    let raw = parse_obs(obs_text).map_err(|e| Error::Schema(format!("observations: {e}")))?;
    build_dataset(stations, raw, lambda, grid)
}
