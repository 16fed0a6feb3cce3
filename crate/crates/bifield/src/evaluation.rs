//! Scoring rules and the hold-out validation harness.
//!
//! Predictions are scored with MAE, MSE and the continuous ranked
//! probability score (closed form for Gaussian predictive distributions).
//! Validation holds out co-observed stations per year under three
//! settings: remove their humidity (H), their temperature (T), or both
//! (HT), refits, and scores the held-out values.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fem::FemMatrices;
use crate::inference::{optimize, predict, FitOptions, PredictTarget};
use crate::mesh::Mesh;
use crate::model::{Field, ModelKind, ModelSpec, Observation};
use crate::preprocess::inverse_boxcox;
use crate::special::{normal_cdf, normal_pdf};

pub fn mae(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(Error::Domain(format!(
            "mae needs equal non-empty lengths, got {} and {}",
            pred.len(),
            obs.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(obs)
        .map(|(p, o)| (p - o).abs())
        .sum::<f64>()
        / pred.len() as f64)
}

pub fn mse(pred: &[f64], obs: &[f64]) -> Result<f64> {
    if pred.len() != obs.len() || pred.is_empty() {
        return Err(Error::Domain(format!(
            "mse needs equal non-empty lengths, got {} and {}",
            pred.len(),
            obs.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(obs)
        .map(|(p, o)| (p - o) * (p - o))
        .sum::<f64>()
        / pred.len() as f64)
}

/// CRPS of a Gaussian predictive distribution, closed form:
/// `sigma * [z(2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]` with
/// `z = (y - mu)/sigma`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("crps needs sigma > 0, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    Ok(sigma
        * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z)
            - 1.0 / std::f64::consts::PI.sqrt()))
}

/// Mean CRPS over aligned predictions and observations.
pub fn crps_mean(preds: &[(f64, f64)], obs: &[f64]) -> Result<f64> {
    if preds.len() != obs.len() || preds.is_empty() {
        return Err(Error::Domain(format!(
            "crps_mean needs equal non-empty lengths, got {} and {}",
            preds.len(),
            obs.len()
        )));
    }
    let mut total = 0.0;
    for (&(mu, sigma), &y) in preds.iter().zip(obs) {
        total += crps_gaussian(mu, sigma, y)?;
    }
    Ok(total / preds.len() as f64)
}

/// Hold-out setting: which field(s) of the test stations leave training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Setting {
    H,
    T,
    Ht,
}

impl Setting {
    pub fn code(&self) -> &'static str {
        match self {
            Setting::H => "h",
            Setting::T => "t",
            Setting::Ht => "ht",
        }
    }

    pub fn parse(s: &str) -> Result<Setting> {
        match s.to_ascii_lowercase().as_str() {
            "h" => Ok(Setting::H),
            "t" => Ok(Setting::T),
            "ht" => Ok(Setting::Ht),
            other => Err(Error::Schema(format!(
                "unknown setting '{other}' (expected h, t or ht)"
            ))),
        }
    }

    fn holds_out(&self, field: Field) -> bool {
        match self {
            Setting::H => field == Field::Humidity,
            Setting::T => field == Field::Temperature,
            Setting::Ht => true,
        }
    }

    /// Fields whose predictions are evaluated under this setting.
    pub fn scored_fields(&self) -> Vec<Field> {
        match self {
            Setting::H => vec![Field::Humidity],
            Setting::T => vec![Field::Temperature],
            Setting::Ht => vec![Field::Temperature, Field::Humidity],
        }
    }
}

/// Per-year held-out stations.
#[derive(Debug, Clone)]
pub struct ValidationSplit {
    pub setting: Setting,
    pub seed: u64,
    pub holdout: BTreeMap<i32, Vec<String>>,
}

/// Stream keyed by (seed, year) so one year's draw never perturbs another's.
fn year_rng(seed: u64, year: i32) -> ChaCha8Rng {
    let key = seed ^ (year as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(key)
}

/// Choose up to `n_holdout` stations per year among those observing both
/// fields that year. Deterministic per (seed, year).
pub fn make_split(
    obs: &[Observation],
    setting: Setting,
    seed: u64,
    n_holdout: usize,
    years: &[i32],
) -> Result<ValidationSplit> {
    let mut holdout = BTreeMap::new();
    for &year in years {
        let mut with_t: Vec<&str> = obs
            .iter()
            .filter(|o| o.year == year && o.field == Field::Temperature)
            .map(|o| o.station_id.as_str())
            .collect();
        let mut with_h: Vec<&str> = obs
            .iter()
            .filter(|o| o.year == year && o.field == Field::Humidity)
            .map(|o| o.station_id.as_str())
            .collect();
        with_t.sort_unstable();
        with_t.dedup();
        with_h.sort_unstable();
        with_h.dedup();
        let mut both: Vec<String> = with_t
            .iter()
            .filter(|id| with_h.binary_search(id).is_ok())
            .map(|s| s.to_string())
            .collect();
        if both.is_empty() {
            return Err(Error::Schema(format!(
                "year {year} has no stations observing both fields"
            )));
        }
        let take = n_holdout.min(both.len());
        // partial Fisher-Yates over the sorted id list
        let mut rng = year_rng(seed, year);
        for i in 0..take {
            let j = i + rng.gen_range(0..both.len() - i);
            both.swap(i, j);
        }
        let mut chosen: Vec<String> = both[..take].to_vec();
        chosen.sort();
        holdout.insert(year, chosen);
    }
    Ok(ValidationSplit {
        setting,
        seed,
        holdout,
    })
}

/// Split the data into training rows and held-out test rows.
pub fn apply_split<'a>(
    obs: &'a [Observation],
    split: &ValidationSplit,
) -> (Vec<Observation>, Vec<&'a Observation>) {
    let mut train = Vec::with_capacity(obs.len());
    let mut test = Vec::new();
    for o in obs {
        let held = split
            .holdout
            .get(&o.year)
            .map(|ids| ids.binary_search(&o.station_id).is_ok())
            .unwrap_or(false)
            && split.setting.holds_out(o.field);
        if held {
            test.push(o);
        } else {
            train.push(o.clone());
        }
    }
    (train, test)
}

/// Scale on which humidity predictions are scored.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreScale {
    /// Scores on the transformed (model) scale; the predictive
    /// distribution is Gaussian there.
    Transformed,
    /// Scores on the raw scale via the monotone back-transform. The
    /// predictive distribution is no longer Gaussian: point predictions
    /// are back-transformed medians and the CRPS integral is evaluated
    /// numerically.
    Raw { lambda: f64 },
}

/// CRPS of a back-transformed Gaussian on the raw scale by quadrature of
/// the threshold integral, substituting the transformed coordinate.
fn crps_raw(mu: f64, sigma: f64, y_raw: f64, lambda: f64) -> Result<f64> {
    let t_y = crate::preprocess::boxcox(y_raw, lambda)?;
    // integrate (F(p) - H(p - y))^2 dp over raw p; p = inv(t) so
    // dp = inv'(t) dt with inv'(t) = (1 + lambda t)^(1/lambda - 1)
    let lo_t = (mu - 10.0 * sigma).max(-1.0 / lambda.max(1e-300) + 1e-12);
    let lo = if lambda.abs() < 1e-10 {
        mu - 10.0 * sigma
    } else if lambda > 0.0 {
        (mu - 10.0 * sigma).max((-1.0 / lambda) * (1.0 - 1e-12))
    } else {
        lo_t
    };
    let hi = if lambda < -1e-10 {
        (mu + 10.0 * sigma).min((-1.0 / lambda) * (1.0 - 1e-12))
    } else {
        mu + 10.0 * sigma
    };
    let f = |t: f64, heaviside: f64| -> f64 {
        let cdf = normal_cdf((t - mu) / sigma);
        let jac = if lambda.abs() < 1e-10 {
            t.exp()
        } else {
            (1.0 + lambda * t).powf(1.0 / lambda - 1.0)
        };
        (cdf - heaviside) * (cdf - heaviside) * jac
    };
    // composite Simpson per panel; the step function is constant within
    // each panel so the kink sits exactly on a boundary
    let simpson = |a: f64, b: f64, heaviside: f64| -> f64 {
        if b <= a {
            return 0.0;
        }
        let n = 400;
        let h = (b - a) / n as f64;
        let mut s = f(a, heaviside) + f(b, heaviside);
        for k in 1..n {
            let x = a + k as f64 * h;
            s += if k % 2 == 0 { 2.0 } else { 4.0 } * f(x, heaviside);
        }
        s * h / 3.0
    };
    let mid = t_y.clamp(lo, hi);
    Ok(simpson(lo, mid, 0.0) + simpson(mid, hi, 1.0))
}

/// One validation cell result.
#[derive(Debug, Clone)]
pub struct ScoreRow {
    pub model: ModelKind,
    pub setting: Setting,
    pub field: Field,
    pub year_filter: String,
    pub mae: f64,
    pub mse: f64,
    pub crps: f64,
    pub n: usize,
    pub ok: bool,
}

/// Collected validation scores.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,setting,field,year_filter,mae,mse,crps,n\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.model.code(),
                r.setting.code(),
                r.field.code(),
                r.year_filter,
                r.mae,
                r.mse,
                r.crps,
                r.n
            ));
        }
        s
    }

    pub fn get(&self, model: ModelKind, setting: Setting, field: Field) -> Option<&ScoreRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.setting == setting && r.field == field)
    }
}

/// Controls for a validation run.
#[derive(Debug, Clone)]
pub struct ValidationConfig {
    pub models: Vec<ModelKind>,
    pub settings: Vec<Setting>,
    pub seed: u64,
    pub n_holdout: usize,
    pub exclude_years: Vec<i32>,
    pub score_scale: ScoreScale,
    pub fit: FitOptions,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            models: vec![ModelKind::Um, ModelKind::BmTh, ModelKind::BmHt],
            settings: vec![Setting::H, Setting::T, Setting::Ht],
            seed: 1,
            n_holdout: 20,
            exclude_years: Vec::new(),
            score_scale: ScoreScale::Transformed,
            fit: FitOptions::default(),
        }
    }
}

/// Refit per (model, setting) cell on the training portion, predict the
/// held-out rows, and score per field. Cells whose fit fails are recorded
/// with `ok = false` and the run continues.
pub fn run_validation(
    obs: &[Observation],
    mesh: &Mesh,
    fem: &FemMatrices,
    base_spec: &ModelSpec,
    config: &ValidationConfig,
) -> Result<ScoreTable> {
    let split_years: Vec<i32> = base_spec
        .years
        .iter()
        .filter(|y| !config.exclude_years.contains(y))
        .cloned()
        .collect();
    if split_years.is_empty() {
        return Err(Error::Schema("every year excluded from validation".into()));
    }
    let year_filter = if config.exclude_years.is_empty() {
        "all".to_string()
    } else {
        let mut ex: Vec<String> = config.exclude_years.iter().map(|y| y.to_string()).collect();
        ex.sort();
        format!("excl_{}", ex.join("_"))
    };

    let mut table = ScoreTable::default();
    for &model in &config.models {
        let mut spec = base_spec.clone();
        spec.kind = model;
        for &setting in &config.settings {
            let split = make_split(obs, setting, config.seed, config.n_holdout, &split_years)?;
            let (train, test) = apply_split(obs, &split);
            let fit = match optimize(&train, mesh, fem, &spec, &config.fit) {
                Ok(f) => f,
                Err(_) => {
                    for field in setting.scored_fields() {
                        table.rows.push(ScoreRow {
                            model,
                            setting,
                            field,
                            year_filter: year_filter.clone(),
                            mae: f64::NAN,
                            mse: f64::NAN,
                            crps: f64::NAN,
                            n: 0,
                            ok: false,
                        });
                    }
                    continue;
                }
            };
            for field in setting.scored_fields() {
                let rows: Vec<&&Observation> =
                    test.iter().filter(|o| o.field == field).collect();
                if rows.is_empty() {
                    table.rows.push(ScoreRow {
                        model,
                        setting,
                        field,
                        year_filter: year_filter.clone(),
                        mae: f64::NAN,
                        mse: f64::NAN,
                        crps: f64::NAN,
                        n: 0,
                        ok: false,
                    });
                    continue;
                }
                let targets: Vec<PredictTarget> = rows
                    .iter()
                    .map(|o| PredictTarget {
                        location: o.location,
                        year: o.year,
                        field: o.field,
                        elevation_m: o.elevation_m,
                        dist_ocean_m: o.dist_ocean_m,
                    })
                    .collect();
                let preds = predict(&fit.conditional, &spec, mesh, &targets)?;
                let truth: Vec<f64> = rows.iter().map(|o| o.value).collect();

                let row = match (field, config.score_scale) {
                    (Field::Humidity, ScoreScale::Raw { lambda }) => {
                        // back-transform: medians as point predictions,
                        // quadrature CRPS for the non-Gaussian raw
                        // distribution
                        let mut p_raw = Vec::with_capacity(preds.len());
                        let mut y_raw = Vec::with_capacity(preds.len());
                        let mut crps_sum = 0.0;
                        for ((mu, sd), t) in preds.iter().zip(&truth) {
                            let med = inverse_boxcox(*mu, lambda)?;
                            let yr = inverse_boxcox(*t, lambda)?;
                            crps_sum += crps_raw(*mu, *sd, yr, lambda)?;
                            p_raw.push(med);
                            y_raw.push(yr);
                        }
                        ScoreRow {
                            model,
                            setting,
                            field,
                            year_filter: year_filter.clone(),
                            mae: mae(&p_raw, &y_raw)?,
                            mse: mse(&p_raw, &y_raw)?,
                            crps: crps_sum / preds.len() as f64,
                            n: preds.len(),
                            ok: true,
                        }
                    }
                    _ => {
                        let means: Vec<f64> = preds.iter().map(|p| p.0).collect();
                        ScoreRow {
                            model,
                            setting,
                            field,
                            year_filter: year_filter.clone(),
                            mae: mae(&means, &truth)?,
                            mse: mse(&means, &truth)?,
                            crps: crps_mean(&preds, &truth)?,
                            n: preds.len(),
                            ok: true,
                        }
                    }
                };
                table.rows.push(row);
            }
        }
    }
    Ok(table)
}
