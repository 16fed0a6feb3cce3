//! Command implementations behind the CLI: fit, predict, validate,
//! reconstruct and simulate. Each command reads the flat config, runs the
//! corresponding library machinery, writes its outputs under `out_dir`,
//! and records a manifest sufficient to reproduce the run.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{run_validation, ScoreScale, ScoreTable, Setting, ValidationConfig};
use crate::fem::{assemble_fem, FemMatrices, MeshLocator};
use crate::inference::{optimize, predict, FitOptions, FitResult, PredictTarget};
use crate::io::config::Config;
use crate::io::csv::{parse_targets, write_obs, write_stations, RawObs};
use crate::io::dataset::{load_dataset, Dataset, LambdaChoice};
use crate::io::manifest::manifest_text;
use crate::io::raster::{GridSpec, Raster, NODATA};
use crate::mesh::{build_mesh, Mesh, Point2};
use crate::model::{Field, ModelKind, ModelSpec};
use crate::preprocess::{inverse_boxcox, LambdaGrid};
use crate::simulate::{full_requests, random_stations, simulate, ObsRequest};
use crate::spde::{correlation_curve, correlation_range, cross_correlation_at, PrecisionMatrix};

fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

fn out_dir(cfg: &Config) -> PathBuf {
    PathBuf::from(cfg.get("out_dir").unwrap_or("out"))
}

fn lambda_choice(cfg: &Config) -> Result<LambdaChoice> {
    match cfg.get("lambda") {
        None | Some("auto") => Ok(LambdaChoice::Auto),
        Some(s) => LambdaChoice::parse(s),
    }
}

fn lambda_grid(cfg: &Config) -> Result<LambdaGrid> {
    Ok(LambdaGrid {
        min: cfg.get_f64("boxcox_grid_min", -2.0)?,
        max: cfg.get_f64("boxcox_grid_max", 2.0)?,
        step: cfg.get_f64("boxcox_grid_step", 0.01)?,
    })
}

/// Load the dataset and build the mesh and FEM matrices per config.
pub struct Inputs {
    pub dataset: Dataset,
    pub mesh: Mesh,
    pub fem: FemMatrices,
    pub max_edge_km: f64,
    pub extension_km: f64,
}

pub fn load_inputs(cfg: &Config) -> Result<Inputs> {
    let stations_path = cfg.require("stations")?;
    let obs_path = cfg.require("obs")?;
    let stations_text = std::fs::read_to_string(stations_path)
        .map_err(|e| Error::Schema(format!("cannot read stations '{stations_path}': {e}")))?;
    let obs_text = std::fs::read_to_string(obs_path)
        .map_err(|e| Error::Schema(format!("cannot read observations '{obs_path}': {e}")))?;
    let dataset = load_dataset(&stations_text, &obs_text, lambda_choice(cfg)?, lambda_grid(cfg)?)?;

    let pts: Vec<Point2> = dataset.stations.iter().map(|s| s.location).collect();
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for p in &pts {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let diameter = (xmax - xmin).hypot(ymax - ymin).max(1e-6);
    let max_edge_km = cfg.get_f64("mesh_max_edge_km", diameter / 15.0)?;
    let extension_km = cfg.get_f64("mesh_extension_km", 0.2 * diameter)?;
    let mesh = build_mesh(&pts, max_edge_km, extension_km)?;
    let fem = assemble_fem(&mesh);
    Ok(Inputs {
        dataset,
        mesh,
        fem,
        max_edge_km,
        extension_km,
    })
}

fn model_spec(cfg: &Config, dataset: &Dataset) -> Result<ModelSpec> {
    let kind = ModelKind::parse(cfg.get("model").unwrap_or("bmth"))?;
    let years = match cfg.get_i32_list("years")? {
        Some(y) => y,
        None => dataset.years.clone(),
    };
    let mut spec = ModelSpec::new(kind, years);
    spec.sigma_t = cfg.get_f64("sigma_t", spec.sigma_t)?;
    spec.sigma_h = cfg.get_f64("sigma_h", spec.sigma_h)?;
    spec.beta_prior_variance = cfg.get_f64("beta_prior_variance", spec.beta_prior_variance)?;
    spec.theta_prior_variance = cfg.get_f64("theta_prior_variance", spec.theta_prior_variance)?;
    spec.validate()?;
    Ok(spec)
}

fn fit_options(cfg: &Config) -> Result<FitOptions> {
    Ok(FitOptions {
        max_iters: cfg.get_usize("fit_max_iters", 200)?,
        grad_tol: cfg.get_f64("fit_grad_tol", 1e-5)?,
        theta0: cfg.get_f64_list("fit_theta0")?,
        ..Default::default()
    })
}

fn common_manifest(cfg: &Config, command: &str, inputs: Option<&Inputs>) -> Vec<(String, String)> {
    let mut m = vec![
        ("command".to_string(), command.to_string()),
        ("config_hash".to_string(), format!("{:016x}", cfg.hash())),
        (
            "version".to_string(),
            env!("CARGO_PKG_VERSION").to_string(),
        ),
        (
            "standardization_elev_divisor".to_string(),
            format!("{}", crate::model::ELEV_DIVISOR),
        ),
        (
            "standardization_dist_divisor".to_string(),
            format!("{}", crate::model::DIST_DIVISOR),
        ),
    ];
    for (k, v) in cfg.entries() {
        m.push((format!("config.{k}"), v.to_string()));
    }
    if let Some(inputs) = inputs {
        m.push(("lambda_hat".to_string(), format!("{}", inputs.dataset.lambda)));
        m.push((
            "lambda_source".to_string(),
            if inputs.dataset.lambda_estimated {
                "estimated".to_string()
            } else {
                "fixed".to_string()
            },
        ));
        m.push(("mesh_vertices".to_string(), format!("{}", inputs.mesh.n_vertices())));
        m.push(("mesh_max_edge_km".to_string(), format!("{}", inputs.max_edge_km)));
        m.push(("mesh_extension_km".to_string(), format!("{}", inputs.extension_km)));
        m.push(("n_observations".to_string(), format!("{}", inputs.dataset.observations.len())));
    }
    m
}

/// Correlation summary of a fitted spatial model.
struct CorrelationReport {
    rho_t: Option<f64>,
    rho_h: Option<f64>,
    rho_th: Option<f64>,
    gamma: Option<f64>,
}

fn correlation_report(
    mesh: &Mesh,
    prec: &PrecisionMatrix,
    kind: ModelKind,
    threshold: f64,
) -> Result<CorrelationReport> {
    // reference node: interior vertex closest to the interior centroid
    let mut cx = 0.0;
    let mut cy = 0.0;
    let mut count = 0.0;
    for (i, p) in mesh.vertices.iter().enumerate() {
        if mesh.interior[i] {
            cx += p.x;
            cy += p.y;
            count += 1.0;
        }
    }
    let centroid = Point2::new(cx / count, cy / count);
    let ref_node = (0..mesh.n_vertices())
        .filter(|&i| mesh.interior[i])
        .min_by(|&a, &b| {
            mesh.vertices[a]
                .dist(&centroid)
                .partial_cmp(&mesh.vertices[b].dist(&centroid))
                .unwrap()
        })
        .expect("mesh has interior vertices");
    let max_dist = mesh
        .vertices
        .iter()
        .map(|p| p.dist(&mesh.vertices[ref_node]))
        .fold(0.0f64, f64::max);

    let range_for = |pair: (usize, usize), absolute: bool| -> Result<Option<f64>> {
        let mut curve = correlation_curve(prec, mesh, ref_node, pair, max_dist, 120)?;
        if absolute {
            for c in curve.iter_mut() {
                c.1 = c.1.abs();
            }
        }
        match correlation_range(&curve, threshold) {
            Ok(r) => Ok(Some(r)),
            Err(Error::RangeUndefined { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    };

    let t_idx = kind.field_index(Field::Temperature);
    let h_idx = kind.field_index(Field::Humidity);
    let rho_t = range_for((t_idx, t_idx), false)?;
    let rho_h = range_for((h_idx, h_idx), false)?;
    let (rho_th, gamma) = match kind {
        ModelKind::Um => (None, None),
        _ => (
            range_for((0, 1), true)?,
            Some(cross_correlation_at(prec, ref_node)?),
        ),
    };
    Ok(CorrelationReport {
        rho_t,
        rho_h,
        rho_th,
        gamma,
    })
}

fn opt_km(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

/// Render the fit summary table.
fn fit_report(fit: &FitResult, corr: &CorrelationReport) -> String {
    let mut s = String::new();
    s.push_str(&format!("model {}\n", fit.spec.kind.code()));
    s.push_str(&format!("converged {}\n", fit.converged));
    s.push_str(&format!("iterations {}\n", fit.iterations));
    s.push_str(&format!("log_posterior {}\n", fit.log_post_at_mode));
    s.push_str(&format!("n_evals {}\n", fit.n_evals));
    for i in 0..fit.theta_hat.len() {
        s.push_str(&format!(
            "theta {} {} {}\n",
            fit.theta_names[i], fit.theta_hat[i], fit.theta_sd[i]
        ));
    }
    for i in 0..fit.beta_hat.len() {
        s.push_str(&format!(
            "beta {} {} {}\n",
            fit.beta_names[i], fit.beta_hat[i], fit.beta_sd[i]
        ));
    }
    s.push_str(&format!("correlation_range rho_T {}\n", opt_km(corr.rho_t)));
    s.push_str(&format!("correlation_range rho_H {}\n", opt_km(corr.rho_h)));
    if fit.spec.kind != ModelKind::Um {
        s.push_str(&format!(
            "correlation_range rho_TH {}\n",
            opt_km(corr.rho_th)
        ));
        if let Some(g) = corr.gamma {
            s.push_str(&format!("cross_correlation gamma {g}\n"));
        }
    }
    s
}

/// Fit the configured model and write the report, trace and manifest.
pub fn cmd_fit(cfg: &Config) -> Result<FitResult> {
    let inputs = load_inputs(cfg)?;
    let spec = model_spec(cfg, &inputs.dataset)?;
    let opts = fit_options(cfg)?;
    let fit = optimize(
        &inputs.dataset.observations,
        &inputs.mesh,
        &inputs.fem,
        &spec,
        &opts,
    )?;

    let threshold = cfg.get_f64("report_correlation", 0.1)?;
    let prec = crate::model::spatial_precision(&inputs.fem, spec.kind, &fit.theta_hat)?;
    let corr = correlation_report(&inputs.mesh, &prec, spec.kind, threshold)?;

    let dir = out_dir(cfg);
    write_text(&dir.join("fit.txt"), &fit_report(&fit, &corr))?;
    write_text(&dir.join("trace.txt"), &fit.trace_text())?;
    let mut manifest = common_manifest(cfg, "fit", Some(&inputs));
    manifest.push(("model".to_string(), spec.kind.code().to_string()));
    manifest.push(("converged".to_string(), format!("{}", fit.converged)));
    write_text(&dir.join("manifest.txt"), &manifest_text(&manifest))?;
    Ok(fit)
}

/// Fit, then predict at the target rows; writes `predictions.csv`.
pub fn cmd_predict(cfg: &Config) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let spec = model_spec(cfg, &inputs.dataset)?;
    let opts = fit_options(cfg)?;
    let targets_path = cfg.require("targets")?;
    let targets_text = std::fs::read_to_string(targets_path)
        .map_err(|e| Error::Schema(format!("cannot read targets '{targets_path}': {e}")))?;
    let rows = parse_targets(&targets_text)?;
    let fit = optimize(
        &inputs.dataset.observations,
        &inputs.mesh,
        &inputs.fem,
        &spec,
        &opts,
    )?;
    let targets: Vec<PredictTarget> = rows
        .iter()
        .map(|r| PredictTarget {
            location: r.location,
            year: r.year,
            field: r.field,
            elevation_m: r.elevation_m,
            dist_ocean_m: r.dist_ocean_m,
        })
        .collect();
    let preds = predict(&fit.conditional, &spec, &inputs.mesh, &targets)?;
    let mut csv = String::from("x_km,y_km,year,field,elevation_m,dist_ocean_m,mean,sd\n");
    for (r, (mean, sd)) in rows.iter().zip(&preds) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.location.x,
            r.location.y,
            r.year,
            r.field.code(),
            r.elevation_m,
            r.dist_ocean_m,
            mean,
            sd
        ));
    }
    let dir = out_dir(cfg);
    write_text(&dir.join("predictions.csv"), &csv)?;
    let manifest = common_manifest(cfg, "predict", Some(&inputs));
    write_text(&dir.join("manifest.txt"), &manifest_text(&manifest))?;
    Ok(())
}

/// Hold-out validation over the configured models and settings; writes
/// `scores.csv` plus a long-format copy for plotting.
pub fn cmd_validate(cfg: &Config) -> Result<ScoreTable> {
    let inputs = load_inputs(cfg)?;
    let spec = model_spec(cfg, &inputs.dataset)?;
    let models = match cfg.get_str_list("validate_models") {
        Some(list) => list
            .iter()
            .map(|s| ModelKind::parse(s))
            .collect::<Result<Vec<_>>>()?,
        None => vec![ModelKind::Um, ModelKind::BmTh, ModelKind::BmHt],
    };
    let settings = match cfg.get_str_list("validate_settings") {
        Some(list) => list
            .iter()
            .map(|s| Setting::parse(s))
            .collect::<Result<Vec<_>>>()?,
        None => vec![Setting::H, Setting::T, Setting::Ht],
    };
    let score_scale = match cfg.get("validate_score_scale") {
        None | Some("transformed") => ScoreScale::Transformed,
        Some("raw") => ScoreScale::Raw {
            lambda: inputs.dataset.lambda,
        },
        Some(other) => {
            return Err(Error::Schema(format!(
                "validate_score_scale must be 'transformed' or 'raw', got '{other}'"
            )))
        }
    };
    let config = ValidationConfig {
        models,
        settings,
        seed: cfg.get_u64("validate_seed", 1)?,
        n_holdout: cfg.get_usize("validate_n_holdout", 20)?,
        exclude_years: cfg.get_i32_list("validate_exclude_years")?.unwrap_or_default(),
        score_scale,
        fit: fit_options(cfg)?,
    };
    let table = run_validation(
        &inputs.dataset.observations,
        &inputs.mesh,
        &inputs.fem,
        &spec,
        &config,
    )?;

    let dir = out_dir(cfg);
    write_text(&dir.join("scores.csv"), &table.to_csv())?;
    // long format: one metric per row
    let mut long = String::from("model,setting,field,year_filter,metric,value\n");
    for r in &table.rows {
        for (metric, value) in [("mae", r.mae), ("mse", r.mse), ("crps", r.crps)] {
            long.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.model.code(),
                r.setting.code(),
                r.field.code(),
                r.year_filter,
                metric,
                value
            ));
        }
    }
    write_text(&dir.join("scores_long.csv"), &long)?;
    let mut manifest = common_manifest(cfg, "validate", Some(&inputs));
    manifest.push(("seed".to_string(), format!("{}", config.seed)));
    write_text(&dir.join("manifest.txt"), &manifest_text(&manifest))?;
    Ok(table)
}

/// Reconstruction summary: per (field, year) raster statistics.
pub struct ReconstructSummary {
    pub masked_cells: usize,
    pub written: Vec<String>,
}

fn reconstruct_one(
    fit: &FitResult,
    spec: &ModelSpec,
    mesh: &Mesh,
    grid: &GridSpec,
    elev: &Raster,
    dist: &Raster,
    field: Field,
    year: i32,
) -> Result<(Raster, Raster, usize)> {
    let locator = MeshLocator::new(mesh);
    let mut mean_r = Raster::filled(*grid, NODATA);
    let mut sd_r = Raster::filled(*grid, NODATA);
    let mut masked = 0usize;
    let mut targets = Vec::new();
    let mut cells = Vec::new();
    for row in 0..grid.ny {
        for col in 0..grid.nx {
            let center = grid.cell_center(col, row);
            let e = elev.get(col, row);
            let d = dist.get(col, row);
            if elev.is_nodata(e) || dist.is_nodata(d) || locator.locate(&center).is_none() {
                masked += 1;
                continue;
            }
            targets.push(PredictTarget {
                location: center,
                year,
                field,
                elevation_m: e,
                dist_ocean_m: d,
            });
            cells.push((col, row));
        }
    }
    let preds = predict(&fit.conditional, spec, mesh, &targets)?;
    for ((col, row), (mean, sd)) in cells.into_iter().zip(preds) {
        mean_r.set(col, row, mean);
        sd_r.set(col, row, sd);
    }
    Ok((mean_r, sd_r, masked))
}

/// Posterior mean/sd rasters per requested field and year, with optional
/// difference rasters against a second model.
pub fn cmd_reconstruct(cfg: &Config) -> Result<ReconstructSummary> {
    let inputs = load_inputs(cfg)?;
    let spec = model_spec(cfg, &inputs.dataset)?;
    let opts = fit_options(cfg)?;
    let grid = GridSpec::parse(cfg.require("grid")?)?;
    let elev_path = cfg.require("raster_elevation")?;
    let dist_path = cfg.require("raster_distance")?;
    let elev = Raster::from_text(&std::fs::read_to_string(elev_path).map_err(|e| {
        Error::Schema(format!("cannot read elevation raster '{elev_path}': {e}"))
    })?)?;
    let dist = Raster::from_text(&std::fs::read_to_string(dist_path).map_err(|e| {
        Error::Schema(format!("cannot read distance raster '{dist_path}': {e}"))
    })?)?;
    if !elev.aligned_with(&grid) || !dist.aligned_with(&grid) {
        return Err(Error::Schema(
            "covariate rasters must share the requested grid geometry".into(),
        ));
    }

    let years = match cfg.get_i32_list("reconstruct_years")? {
        Some(y) => y,
        None => spec.years.clone(),
    };
    let fields: Vec<Field> = match cfg.get_str_list("reconstruct_fields") {
        Some(list) => list
            .iter()
            .map(|s| Field::parse(s))
            .collect::<Result<Vec<_>>>()?,
        None => vec![Field::Temperature, Field::Humidity],
    };

    let fit = optimize(
        &inputs.dataset.observations,
        &inputs.mesh,
        &inputs.fem,
        &spec,
        &opts,
    )?;
    let compare_fit = match cfg.get("reconstruct_compare_model") {
        None => None,
        Some(code) => {
            let mut spec2 = spec.clone();
            spec2.kind = ModelKind::parse(code)?;
            Some((
                spec2.clone(),
                optimize(
                    &inputs.dataset.observations,
                    &inputs.mesh,
                    &inputs.fem,
                    &spec2,
                    &opts,
                )?,
            ))
        }
    };

    let dir = out_dir(cfg);
    let mut summary = ReconstructSummary {
        masked_cells: 0,
        written: Vec::new(),
    };
    for &year in &years {
        for &field in &fields {
            let (mean_r, sd_r, masked) = reconstruct_one(
                &fit, &spec, &inputs.mesh, &grid, &elev, &dist, field, year,
            )?;
            summary.masked_cells += masked;
            let mean_name = format!("mean_{}_{year}.asc", field.code());
            let sd_name = format!("sd_{}_{year}.asc", field.code());
            write_text(&dir.join(&mean_name), &mean_r.to_text())?;
            write_text(&dir.join(&sd_name), &sd_r.to_text())?;
            summary.written.push(mean_name);
            summary.written.push(sd_name);
            if let Some((spec2, fit2)) = &compare_fit {
                let (mean2, _, _) = reconstruct_one(
                    fit2, spec2, &inputs.mesh, &grid, &elev, &dist, field, year,
                )?;
                let mut diff = Raster::filled(grid, NODATA);
                for row in 0..grid.ny {
                    for col in 0..grid.nx {
                        let a = mean_r.get(col, row);
                        let b = mean2.get(col, row);
                        if !mean_r.is_nodata(a) && !mean2.is_nodata(b) {
                            diff.set(col, row, a - b);
                        }
                    }
                }
                let diff_name = format!("diff_mean_{}_{year}.asc", field.code());
                write_text(&dir.join(&diff_name), &diff.to_text())?;
                summary.written.push(diff_name);
            }
        }
    }
    let mut manifest = common_manifest(cfg, "reconstruct", Some(&inputs));
    manifest.push(("masked_cells".to_string(), format!("{}", summary.masked_cells)));
    write_text(&dir.join("manifest.txt"), &manifest_text(&manifest))?;
    Ok(summary)
}

/// Generate a synthetic dataset in the exact ingestion schema, plus truth
/// rasters of the latent fields when a grid is configured.
pub fn cmd_simulate(cfg: &Config) -> Result<()> {
    let kind = ModelKind::parse(cfg.get("sim_model").unwrap_or("bmth"))?;
    let years = cfg
        .get_i32_list("sim_years")?
        .unwrap_or_else(|| vec![2007, 2008, 2009, 2010, 2011]);
    let mut spec = ModelSpec::new(kind, years.clone());
    spec.sigma_t = cfg.get_f64("sigma_t", spec.sigma_t)?;
    spec.sigma_h = cfg.get_f64("sigma_h", spec.sigma_h)?;
    let theta = cfg
        .get_f64_list("sim_theta")?
        .ok_or_else(|| Error::Schema("missing required config key 'sim_theta'".into()))?;
    if theta.len() != kind.n_params() {
        return Err(Error::Schema(format!(
            "sim_theta needs {} values for model {}, got {}",
            kind.n_params(),
            kind.code(),
            theta.len()
        )));
    }
    let beta_t = cfg
        .get_f64_list("sim_beta_t")?
        .ok_or_else(|| Error::Schema("missing required config key 'sim_beta_t'".into()))?;
    let beta_h = cfg
        .get_f64_list("sim_beta_h")?
        .ok_or_else(|| Error::Schema("missing required config key 'sim_beta_h'".into()))?;
    if beta_t.len() != years.len() + 2 || beta_h.len() != years.len() + 2 {
        return Err(Error::Schema(format!(
            "sim_beta_t and sim_beta_h need {} values (year effects, elevation, distance)",
            years.len() + 2
        )));
    }
    let n_t = cfg.get_usize("sim_n_stations_t", 120)?;
    let n_h = cfg.get_usize("sim_n_stations_h", 60)?;
    if n_h > n_t {
        return Err(Error::Schema(
            "sim_n_stations_h cannot exceed sim_n_stations_t (humidity sites are a subset)".into(),
        ));
    }
    let domain = cfg
        .get_f64_list("sim_domain")?
        .unwrap_or_else(|| vec![0.0, 0.0, 100.0, 100.0]);
    if domain.len() != 4 || domain[2] <= domain[0] || domain[3] <= domain[1] {
        return Err(Error::Schema(
            "sim_domain must be 'x0,y0,x1,y1' with positive extent".into(),
        ));
    }
    let seed = cfg.get_u64("sim_seed", 1)?;
    let noise = cfg.get_bool("sim_noise", true)?;
    let lambda = cfg.get_f64("sim_lambda", 0.66)?;

    let stations = random_stations(
        "st",
        n_t,
        (domain[0], domain[2]),
        (domain[1], domain[3]),
        seed,
    );
    let diameter = (domain[2] - domain[0]).hypot(domain[3] - domain[1]);
    let max_edge = cfg.get_f64("mesh_max_edge_km", diameter / 15.0)?;
    let extension = cfg.get_f64("mesh_extension_km", 0.2 * diameter)?;
    let pts: Vec<Point2> = stations.iter().map(|s| s.location).collect();
    let mesh = build_mesh(&pts, max_edge, extension)?;
    let fem = assemble_fem(&mesh);

    let layout = crate::model::BetaLayout::new(&spec);
    let beta = layout.pack(
        &beta_t[..years.len()],
        beta_t[years.len()],
        beta_t[years.len() + 1],
        &beta_h[..years.len()],
        beta_h[years.len()],
        beta_h[years.len() + 1],
    );
    let requests: Vec<ObsRequest> = full_requests(n_t, n_h, &years);
    let sim = simulate(
        &mesh, &fem, &spec, &theta, &beta, &stations, &requests, noise, seed,
    )?;

    // observation rows in the ingestion schema; humidity back on the raw
    // measurement scale
    let mut rows = Vec::with_capacity(sim.observations.len());
    for o in &sim.observations {
        let value = match o.field {
            Field::Temperature => o.value,
            Field::Humidity => inverse_boxcox(o.value, lambda).map_err(|e| {
                Error::Domain(format!(
                    "simulated humidity {} cannot be back-transformed with lambda {lambda}: {e}; \
                     adjust sim_beta_h or sim_lambda",
                    o.value
                ))
            })?,
        };
        rows.push(RawObs {
            station_id: o.station_id.clone(),
            year: o.year,
            field: o.field,
            value,
        });
    }

    let dir = out_dir(cfg);
    write_text(&dir.join("stations.csv"), &write_stations(&stations))?;
    write_text(&dir.join("obs.csv"), &write_obs(&rows))?;

    // latent truth rasters
    if let Some(grid_str) = cfg.get("grid") {
        let grid = GridSpec::parse(grid_str)?;
        let locator = MeshLocator::new(&mesh);
        for (yi, &year) in years.iter().enumerate() {
            for field in [Field::Temperature, Field::Humidity] {
                let block = kind.field_index(field) * fem.n;
                let mut r = Raster::filled(grid, NODATA);
                for row in 0..grid.ny {
                    for col in 0..grid.nx {
                        let center = grid.cell_center(col, row);
                        if let Some((tri, w)) = locator.locate(&center) {
                            let verts = mesh.triangles[tri];
                            let mut v = 0.0;
                            for k in 0..3 {
                                v += w[k] * sim.fields[yi][block + verts[k]];
                            }
                            r.set(col, row, v);
                        }
                    }
                }
                write_text(
                    &dir.join(format!("truth_{}_{year}.asc", field.code())),
                    &r.to_text(),
                )?;
            }
        }
    }

    let mut manifest = common_manifest(cfg, "simulate", None);
    manifest.push(("seed".to_string(), format!("{seed}")));
    manifest.push(("lambda".to_string(), format!("{lambda}")));
    manifest.push(("mesh_vertices".to_string(), format!("{}", mesh.n_vertices())));
    manifest.push(("n_observations".to_string(), format!("{}", rows.len())));
    write_text(&dir.join("manifest.txt"), &manifest_text(&manifest))?;
    Ok(())
}
