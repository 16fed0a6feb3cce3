//! Hyperparameter-posterior evaluation and maximization.
//!
//! The latent field is marginalized in closed form: for each theta the
//! joint prior precision and the observation operator give the Gaussian
//! conditional `z | y, theta`, and the posterior of theta follows from the
//! ratio identity
//! `log pi(theta|y) = const + log pi(theta) + 1/2 log|Q| - 1/2 log|Q_c|
//!  + 1/2 mu_c' Q_c mu_c`.
//! Both log-determinants come from sparse LDL^T factorizations whose
//! symbolic analysis is computed once per sparsity pattern and reused for
//! every theta evaluation.

use rand::SeedableRng;
use sprs::CsMat;

use crate::dense::DenseMat;
use crate::error::{Error, Result};
use crate::fem::{FemMatrices, MeshLocator};
use crate::mesh::{Mesh, Point2};
use crate::model::{
    assemble_system, log_prior_theta, spatial_precision, BetaLayout, Field, LatentSystem,
    ModelKind, ModelSpec, Observation, DIST_DIVISOR, ELEV_DIVISOR,
};
use crate::optim::{fd_hessian, maximize, OptimOptions, OptimResult, TraceRow};
use crate::sparse::{
    block_diag, diag_matrix, principal_submatrix, replicate_block_diag, scale_rows, Ordering,
    SpdFactor,
};

/// Gaussian conditional of the latent field given the data at one theta.
pub struct ConditionalGaussian {
    pub mu_c: Vec<f64>,
    pub factor: SpdFactor,
    pub n_nodes: usize,
    pub n_years: usize,
    pub beta_layout: BetaLayout,
}

impl ConditionalGaussian {
    pub fn dim(&self) -> usize {
        self.mu_c.len()
    }

    pub fn spatial_dim(&self) -> usize {
        self.n_years * 2 * self.n_nodes
    }

    /// Coefficient estimates (the beta block of the conditional mean).
    pub fn beta_hat(&self) -> &[f64] {
        &self.mu_c[self.spatial_dim()..]
    }

    /// Posterior standard deviations of the coefficients, one sparse solve
    /// per coefficient.
    pub fn beta_sd(&self) -> Vec<f64> {
        let off = self.spatial_dim();
        (0..self.beta_layout.len())
            .map(|i| self.factor.inv_diag_entry(off + i).sqrt())
            .collect()
    }
}

/// Fill-reducing ordering for a latent system: RCM over the spatial block,
/// coefficient columns kept at the tail (they couple to many nodes and
/// would otherwise smear fill through the factor).
fn system_ordering(q_c: &CsMat<f64>, spatial_dim: usize) -> Ordering {
    let spatial = principal_submatrix(q_c.view(), spatial_dim);
    let mut perm: Vec<usize> = sprs::linalg::reverse_cuthill_mckee(spatial.view())
        .perm
        .vec()
        .to_vec();
    perm.extend(spatial_dim..q_c.rows());
    Ordering::Explicit(perm)
}

fn build_q_c(system: &LatentSystem) -> CsMat<f64> {
    if system.c_obs.rows() == 0 {
        return system.q_prior.clone();
    }
    let mut cq = system.c_obs.clone();
    scale_rows(&mut cq, &system.q_eps);
    let ct = system.c_obs.transpose_view().to_owned().to_csr();
    let ctqc = crate::sparse::symmetrize(&(&ct * &cq).to_csr());
    (&system.q_prior + &ctqc).to_csr()
}

fn information_rhs(system: &LatentSystem) -> Vec<f64> {
    let mut rhs = vec![0.0; system.dim()];
    for (v, (r, c)) in system.c_obs.iter() {
        rhs[c] += v * system.q_eps[r] * system.y[r];
    }
    rhs
}

/// Factorize the conditional precision and solve for the conditional mean.
pub fn conditional(system: &LatentSystem) -> Result<ConditionalGaussian> {
    let q_c = build_q_c(system);
    let ordering = system_ordering(&q_c, system.spatial_dim());
    let factor = SpdFactor::new(q_c.view(), &ordering)?;
    let rhs = information_rhs(system);
    let mu_c = factor.solve(&rhs);
    Ok(ConditionalGaussian {
        mu_c,
        factor,
        n_nodes: system.n_nodes,
        n_years: system.n_years,
        beta_layout: system.beta_layout.clone(),
    })
}

/// Reusable state for evaluating the hyperparameter log-posterior at many
/// theta values on one dataset.
pub struct Evaluator<'a> {
    pub spec: ModelSpec,
    mesh: &'a Mesh,
    fem: &'a FemMatrices,
    // theta-independent pieces
    c_obs: CsMat<f64>,
    q_eps: Vec<f64>,
    y: Vec<f64>,
    ctqc: Option<CsMat<f64>>,
    rhs: Vec<f64>,
    beta_layout: BetaLayout,
    n_beta: usize,
    spatial_dim: usize,
    ordering: Ordering,
    spatial_ordering: Ordering,
    qc_factor: Option<SpdFactor>,
    qs_factor: Option<SpdFactor>,
    /// Number of log-posterior evaluations performed (diagnostic).
    pub n_evals: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        obs: &[Observation],
        mesh: &'a Mesh,
        fem: &'a FemMatrices,
        spec: &ModelSpec,
    ) -> Result<Self> {
        spec.validate()?;
        // reference assembly fixes the sparsity pattern and the ordering
        let theta_ref: Vec<f64> = match spec.kind.b21_index() {
            Some(i) => {
                let mut t = vec![1.0; spec.kind.n_params()];
                t[i] = 1.0;
                t
            }
            None => vec![1.0; spec.kind.n_params()],
        };
        let system = assemble_system(obs, mesh, fem, spec, &theta_ref)?;
        let q_c = build_q_c(&system);
        let ordering = system_ordering(&q_c, system.spatial_dim());
        let qs_ref = spatial_precision(fem, spec.kind, &theta_ref)?;
        let spatial_ordering = Ordering::Explicit(
            sprs::linalg::reverse_cuthill_mckee(qs_ref.q.view())
                .perm
                .vec()
                .to_vec(),
        );
        let ctqc = if system.c_obs.rows() == 0 {
            None
        } else {
            let mut cq = system.c_obs.clone();
            scale_rows(&mut cq, &system.q_eps);
            let ct = system.c_obs.transpose_view().to_owned().to_csr();
            Some(crate::sparse::symmetrize(&(&ct * &cq).to_csr()))
        };
        let rhs = information_rhs(&system);
        Ok(Self {
            spec: spec.clone(),
            mesh,
            fem,
            c_obs: system.c_obs,
            q_eps: system.q_eps,
            y: system.y,
            ctqc,
            rhs,
            beta_layout: system.beta_layout,
            n_beta: spec.n_beta(),
            spatial_dim: system.n_years * 2 * system.n_nodes,
            ordering,
            spatial_ordering,
            qc_factor: None,
            qs_factor: None,
            n_evals: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.spatial_dim + self.n_beta
    }

    fn q_prior_at(&self, theta: &[f64]) -> Result<CsMat<f64>> {
        let qs = spatial_precision(self.fem, self.spec.kind, theta)?;
        let repl = replicate_block_diag(qs.q.view(), self.spec.years.len());
        let beta_prec = diag_matrix(&vec![1.0 / self.spec.beta_prior_variance; self.n_beta]);
        Ok(block_diag(&[repl.view(), beta_prec.view()]))
    }

    /// Log-posterior of theta up to the shared additive constant, or a
    /// domain/factorization error describing why theta is invalid.
    pub fn log_posterior_checked(&mut self, theta: &[f64]) -> Result<f64> {
        self.n_evals += 1;
        let lp = log_prior_theta(theta, &self.spec)?;

        // log|Q_prior| from one spatial replicate
        let qs = spatial_precision(self.fem, self.spec.kind, theta)?;
        match self.qs_factor.as_mut() {
            Some(f) => f.refactor(qs.q.view(), &self.spatial_ordering)?,
            None => self.qs_factor = Some(SpdFactor::new(qs.q.view(), &self.spatial_ordering)?),
        }
        let j = self.spec.years.len() as f64;
        let log_det_prior = j * self.qs_factor.as_ref().unwrap().log_det()
            + self.n_beta as f64 * (1.0 / self.spec.beta_prior_variance).ln();

        // conditional precision
        let repl = replicate_block_diag(qs.q.view(), self.spec.years.len());
        let beta_prec = diag_matrix(&vec![1.0 / self.spec.beta_prior_variance; self.n_beta]);
        let q_prior = block_diag(&[repl.view(), beta_prec.view()]);
        let q_c = match &self.ctqc {
            Some(m) => (&q_prior + m).to_csr(),
            None => q_prior,
        };
        match self.qc_factor.as_mut() {
            Some(f) => f.refactor(q_c.view(), &self.ordering)?,
            None => self.qc_factor = Some(SpdFactor::new(q_c.view(), &self.ordering)?),
        }
        let qc = self.qc_factor.as_ref().unwrap();
        let log_det_qc = qc.log_det();
        let mu = qc.solve(&self.rhs);
        // The quadratic term mu' Q_c mu = mu' rhs grows with y' Q_eps y, a
        // theta-independent constant that would drown the theta signal in
        // cancellation noise. Shift it out by working with the residual
        // form: mu' rhs - y' Q_eps y = -sum_r w_r y_r (y_r - (C mu)_r).
        let fitted = crate::sparse::matvec(self.c_obs.view(), &mu);
        let neg_half_quad_shifted: f64 = -0.5
            * self
                .q_eps
                .iter()
                .zip(&self.y)
                .zip(&fitted)
                .map(|((w, y), f)| w * y * (y - f))
                .sum::<f64>();

        Ok(lp + 0.5 * log_det_prior - 0.5 * log_det_qc + neg_half_quad_shifted)
    }

    /// Optimizer-safe objective: `-inf` instead of an error for invalid
    /// theta.
    pub fn log_posterior(&mut self, theta: &[f64]) -> f64 {
        self.log_posterior_checked(theta).unwrap_or(f64::NEG_INFINITY)
    }

    /// Conditional Gaussian of the latent field at one theta.
    pub fn conditional_at(&self, theta: &[f64]) -> Result<ConditionalGaussian> {
        let q_prior = self.q_prior_at(theta)?;
        let q_c = match &self.ctqc {
            Some(m) => (&q_prior + m).to_csr(),
            None => q_prior,
        };
        let factor = SpdFactor::new(q_c.view(), &self.ordering)?;
        let mu_c = factor.solve(&self.rhs);
        Ok(ConditionalGaussian {
            mu_c,
            factor,
            n_nodes: self.fem.n,
            n_years: self.spec.years.len(),
            beta_layout: self.beta_layout.clone(),
        })
    }
}

/// Optimization controls for [`optimize`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub fd_step_rel: f64,
    pub hessian_step_rel: f64,
    pub theta0: Option<Vec<f64>>,
    /// Parameter indices held fixed at their starting value.
    pub frozen: Vec<usize>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            grad_tol: 1e-5,
            fd_step_rel: 1e-4,
            hessian_step_rel: 1e-3,
            theta0: None,
            frozen: Vec::new(),
        }
    }
}

/// Posterior mode, curvature-based standard deviations, and the latent
/// conditional at the mode.
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta_hat: Vec<f64>,
    pub theta_names: Vec<String>,
    pub theta_sd: Vec<f64>,
    pub log_post_at_mode: f64,
    /// Hessian of the log-posterior in transformed (free) coordinates.
    pub hessian: DenseMat,
    pub hessian_ok: bool,
    pub converged: bool,
    pub iterations: usize,
    pub n_evals: usize,
    pub trace: Vec<TraceRow>,
    pub conditional: ConditionalGaussian,
    pub beta_hat: Vec<f64>,
    pub beta_sd: Vec<f64>,
    pub beta_names: Vec<String>,
}

impl FitResult {
    /// Line-oriented iteration trace: iter, theta (natural scale),
    /// log-posterior, gradient norm.
    pub fn trace_text(&self) -> String {
        let mut s = String::new();
        for row in &self.trace {
            s.push_str(&format!("iter {}", row.iter));
            for v in &row.x {
                s.push_str(&format!(" {v:.10e}"));
            }
            s.push_str(&format!(" logpost {:.10e} gradnorm {:.4e}\n", row.value, row.grad_norm));
        }
        s
    }
}

/// Natural scale <-> optimizer scale: log for positivity-constrained
/// parameters, identity for the cross weight.
fn to_internal(theta: &[f64], b21_idx: Option<usize>) -> Vec<f64> {
    theta
        .iter()
        .enumerate()
        .map(|(i, &v)| if Some(i) == b21_idx { v } else { v.ln() })
        .collect()
}

fn to_natural(phi: &[f64], b21_idx: Option<usize>) -> Vec<f64> {
    phi.iter()
        .enumerate()
        .map(|(i, &v)| if Some(i) == b21_idx { v } else { v.exp() })
        .collect()
}

/// Moment-matched starting point: a scale parameter placing the
/// correlation range at roughly a third of the domain diameter, and
/// operator weights matching each field's demeaned sample variance via
/// `var = 1/(4 pi b^2 kappa^2)`.
pub fn default_theta0(obs: &[Observation], mesh: &Mesh, spec: &ModelSpec) -> Vec<f64> {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for (i, p) in mesh.vertices.iter().enumerate() {
        if mesh.interior[i] {
            xmin = xmin.min(p.x);
            xmax = xmax.max(p.x);
            ymin = ymin.min(p.y);
            ymax = ymax.max(p.y);
        }
    }
    let diameter = ((xmax - xmin).hypot(ymax - ymin)).max(1e-6);
    let kappa0 = 8.0_f64.sqrt() / (0.3 * diameter);

    let field_variance = |field: Field| -> f64 {
        // demean per year so year effects do not inflate the estimate
        let mut by_year: std::collections::BTreeMap<i32, Vec<f64>> = Default::default();
        for o in obs.iter().filter(|o| o.field == field) {
            by_year.entry(o.year).or_default().push(o.value);
        }
        let mut ss = 0.0;
        let mut count = 0usize;
        for vals in by_year.values() {
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            for v in vals {
                ss += (v - m) * (v - m);
                count += 1;
            }
        }
        if count > 1 {
            (ss / count as f64).max(1e-12)
        } else {
            1.0
        }
    };
    let b_for = |var: f64| 1.0 / (kappa0 * (4.0 * std::f64::consts::PI * var).sqrt());

    match spec.kind {
        ModelKind::Um => {
            let vt = field_variance(Field::Temperature);
            let vh = field_variance(Field::Humidity);
            vec![b_for(vt), kappa0, b_for(vh), kappa0]
        }
        ModelKind::BmTh => {
            let vt = field_variance(Field::Temperature);
            let vh = field_variance(Field::Humidity);
            vec![b_for(vt), kappa0, 0.0, kappa0, b_for(vh), kappa0]
        }
        ModelKind::BmHt => {
            let vt = field_variance(Field::Temperature);
            let vh = field_variance(Field::Humidity);
            vec![b_for(vh), kappa0, 0.0, kappa0, b_for(vt), kappa0]
        }
    }
}

/// Maximize the hyperparameter posterior and assemble the fit summary.
pub fn optimize(
    obs: &[Observation],
    mesh: &Mesh,
    fem: &FemMatrices,
    spec: &ModelSpec,
    opts: &FitOptions,
) -> Result<FitResult> {
    let mut eval = Evaluator::new(obs, mesh, fem, spec)?;
    let b21_idx = spec.kind.b21_index();
    let n_params = spec.kind.n_params();
    let theta0 = opts
        .theta0
        .clone()
        .unwrap_or_else(|| default_theta0(obs, mesh, spec));
    if theta0.len() != n_params {
        return Err(Error::Domain(format!(
            "theta0 has {} entries, model {} needs {}",
            theta0.len(),
            spec.kind.code(),
            n_params
        )));
    }
    for (i, &v) in theta0.iter().enumerate() {
        if Some(i) != b21_idx && !(v > 0.0) {
            return Err(Error::Domain(format!(
                "starting value for {} must be positive",
                spec.kind.param_names()[i]
            )));
        }
    }
    for &i in &opts.frozen {
        if i >= n_params {
            return Err(Error::Domain(format!("frozen index {i} out of range")));
        }
    }

    let phi0_full = to_internal(&theta0, b21_idx);
    let free: Vec<usize> = (0..n_params).filter(|i| !opts.frozen.contains(i)).collect();
    let phi0: Vec<f64> = free.iter().map(|&i| phi0_full[i]).collect();

    let expand = |phi_free: &[f64]| -> Vec<f64> {
        let mut full = phi0_full.clone();
        for (k, &i) in free.iter().enumerate() {
            full[i] = phi_free[k];
        }
        to_natural(&full, b21_idx)
    };

    let optim_opts = OptimOptions {
        max_iters: opts.max_iters,
        grad_tol: opts.grad_tol,
        fd_step_rel: opts.fd_step_rel,
    };
    let result: OptimResult = {
        let mut obj = |phi_free: &[f64]| eval.log_posterior(&expand(phi_free));
        maximize(&mut obj, &phi0, &optim_opts)?
    };

    let theta_hat = expand(&result.x);
    // trace in natural coordinates
    let trace: Vec<TraceRow> = result
        .trace
        .iter()
        .map(|r| TraceRow {
            iter: r.iter,
            x: expand(&r.x),
            value: r.value,
            grad_norm: r.grad_norm,
        })
        .collect();

    // curvature at the mode, in free internal coordinates
    let hessian = {
        let mut obj = |phi_free: &[f64]| eval.log_posterior(&expand(phi_free));
        fd_hessian(&mut obj, &result.x, opts.hessian_step_rel)
    };
    let mut neg_h = DenseMat::zeros(free.len());
    for i in 0..free.len() {
        for jj in 0..free.len() {
            neg_h.set(i, jj, -hessian.get(i, jj));
        }
    }
    let (theta_sd, hessian_ok) = match neg_h.inverse_spd() {
        Ok(cov) => {
            let mut sd = vec![0.0; n_params];
            for (k, &i) in free.iter().enumerate() {
                let sd_phi = cov.get(k, k).sqrt();
                // delta method back to the natural scale
                sd[i] = if Some(i) == b21_idx {
                    sd_phi
                } else {
                    theta_hat[i] * sd_phi
                };
            }
            (sd, true)
        }
        Err(_) => (vec![f64::NAN; n_params], false),
    };

    let conditional = eval.conditional_at(&theta_hat)?;
    let beta_hat = conditional.beta_hat().to_vec();
    let beta_sd = conditional.beta_sd();
    let beta_names = conditional.beta_layout.names.clone();

    Ok(FitResult {
        spec: spec.clone(),
        theta_hat,
        theta_names: spec.kind.param_names().iter().map(|s| s.to_string()).collect(),
        theta_sd,
        log_post_at_mode: result.value,
        hessian,
        hessian_ok,
        converged: result.converged,
        iterations: result.iterations,
        n_evals: eval.n_evals,
        trace,
        conditional,
        beta_hat,
        beta_sd,
        beta_names,
    })
}

/// Draw latent-field samples from the conditional; deterministic per seed.
pub fn sample_latent(cond: &ConditionalGaussian, n_samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| cond.factor.sample(&cond.mu_c, &mut rng))
        .collect()
}

/// Prediction request: where, when, which field, and the covariates there.
#[derive(Debug, Clone)]
pub struct PredictTarget {
    pub location: Point2,
    pub year: i32,
    pub field: Field,
    pub elevation_m: f64,
    pub dist_ocean_m: f64,
}

/// Predictive means and standard deviations (including measurement noise)
/// at the targets; one sparse triangular solve per target.
pub fn predict(
    cond: &ConditionalGaussian,
    spec: &ModelSpec,
    mesh: &Mesh,
    targets: &[PredictTarget],
) -> Result<Vec<(f64, f64)>> {
    let locator = MeshLocator::new(mesh);
    let n = cond.n_nodes;
    let spatial_dim = cond.spatial_dim();
    let mut out = Vec::with_capacity(targets.len());
    for (idx, t) in targets.iter().enumerate() {
        let year_idx = spec.year_index(t.year)?;
        let (tri, w) = locator.locate(&t.location).ok_or(Error::OutOfDomain {
            index: idx,
            x: t.location.x,
            y: t.location.y,
        })?;
        let mut a: Vec<(usize, f64)> = Vec::with_capacity(6);
        let verts = mesh.triangles[tri];
        let field_block = spec.kind.field_index(t.field);
        for k in 0..3 {
            if w[k] != 0.0 {
                a.push((year_idx * 2 * n + field_block * n + verts[k], w[k]));
            }
        }
        let lay = &cond.beta_layout;
        a.push((spatial_dim + lay.year_col(t.field, year_idx), 1.0));
        a.push((spatial_dim + lay.elev_col(t.field), t.elevation_m / ELEV_DIVISOR));
        a.push((spatial_dim + lay.dist_col(t.field), t.dist_ocean_m / DIST_DIVISOR));

        let mean: f64 = a.iter().map(|&(i, v)| v * cond.mu_c[i]).sum();
        let var = cond.factor.quad_form_inv_sparse(&a) + spec.sigma(t.field).powi(2);
        out.push((mean, var.sqrt()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_fem;
    use crate::mesh::build_mesh;
    use crate::model::ModelKind;
    use crate::sparse::to_dense;

    fn tiny_mesh() -> Mesh {
        // ~16 vertices
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(2.0, 0.0),
            Point2::new(2.0, 2.0),
            Point2::new(0.0, 2.0),
        ];
        build_mesh(&pts, 1.1, 0.6).unwrap()
    }

    fn mk_obs(station: &str, year: i32, field: Field, value: f64, x: f64, y: f64) -> Observation {
        Observation {
            station_id: station.into(),
            year,
            field,
            value,
            location: Point2::new(x, y),
            elevation_m: 800.0,
            dist_ocean_m: 5e4,
        }
    }

    fn small_dataset(years: &[i32]) -> Vec<Observation> {
        let mut rng_vals = [0.7, -0.3, 1.2, 0.4, -0.9, 1.5, 0.1, -0.6];
        let mut out = Vec::new();
        let coords = [
            (0.3, 0.4),
            (1.5, 0.5),
            (0.8, 1.6),
            (1.7, 1.7),
        ];
        let mut k = 0;
        for &year in years {
            for (i, &(x, y)) in coords.iter().enumerate() {
                out.push(mk_obs(&format!("s{i}"), year, Field::Temperature, rng_vals[k % 8], x, y));
                k += 1;
                if i < 2 {
                    out.push(mk_obs(&format!("s{i}"), year, Field::Humidity, rng_vals[k % 8] * 0.5, x, y));
                    k += 1;
                }
            }
            rng_vals.rotate_left(1);
        }
        out
    }

    /// Dense oracle for the conditional: (Q + C'WC)^-1 C'Wy via dense
    /// Cholesky, built from the same LatentSystem pieces.
    fn dense_conditional(system: &LatentSystem) -> (DenseMat, Vec<f64>) {
        let dim = system.dim();
        let qd = to_dense(system.q_prior.view());
        let cd = to_dense(system.c_obs.view());
        let mut qc = DenseMat::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                let mut v = qd[i][j];
                for (r, crow) in cd.iter().enumerate() {
                    v += crow[i] * system.q_eps[r] * crow[j];
                }
                qc.set(i, j, v);
            }
        }
        let mut rhs = vec![0.0; dim];
        for (r, crow) in cd.iter().enumerate() {
            for i in 0..dim {
                rhs[i] += crow[i] * system.q_eps[r] * system.y[r];
            }
        }
        let mu = qc.solve_spd(&rhs).unwrap();
        (qc, mu)
    }

    #[test]
    fn no_observations_recovers_prior() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::Um, vec![2007]);
        let theta = [0.5, 1.2, 0.7, 0.9];
        let system = assemble_system(&[], &mesh, &fem, &spec, &theta).unwrap();
        let cond = conditional(&system).unwrap();
        assert!(cond.mu_c.iter().all(|&v| v == 0.0));
        let prior_factor = SpdFactor::new(system.q_prior.view(), &Ordering::Rcm).unwrap();
        assert!((cond.factor.log_det() - prior_factor.log_det()).abs() < 1e-8);
    }

    #[test]
    fn near_interpolation_at_tiny_noise() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let mut spec = ModelSpec::new(ModelKind::Um, vec![2007]);
        spec.sigma_t = 1e-6;
        // observation exactly at vertex 0
        let v0 = mesh.vertices[0];
        let o = mk_obs("s0", 2007, Field::Temperature, 2.34, v0.x, v0.y);
        let system = assemble_system(&[o], &mesh, &fem, &spec, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let cond = conditional(&system).unwrap();
        // C mu_c reproduces the observation
        let fitted: f64 = system
            .c_obs
            .outer_view(0)
            .unwrap()
            .iter()
            .map(|(c, &v)| v * cond.mu_c[c])
            .sum();
        assert!((fitted - 2.34).abs() < 1e-3, "fitted {fitted}");
    }

    #[test]
    fn conditional_matches_dense_oracle() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::BmTh, vec![2007, 2008]);
        let theta = [0.8, 1.3, -0.6, 1.1, 0.9, 0.7];
        let obs = small_dataset(&[2007, 2008]);
        let system = assemble_system(&obs, &mesh, &fem, &spec, &theta).unwrap();
        let cond = conditional(&system).unwrap();
        let (_, mu_dense) = dense_conditional(&system);
        let scale = mu_dense.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..system.dim() {
            assert!(
                (cond.mu_c[i] - mu_dense[i]).abs() < 1e-8 * scale,
                "mu[{i}]: {} vs {}",
                cond.mu_c[i],
                mu_dense[i]
            );
        }
        // residual norm of the normal equations
        let q_c = build_q_c(&system);
        let qmu = crate::sparse::matvec(q_c.view(), &cond.mu_c);
        let rhs = information_rhs(&system);
        let denom: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let resid: f64 = qmu
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(resid / denom <= 1e-8, "relative residual {}", resid / denom);
    }

    /// Dense marginal-likelihood oracle: y ~ N(0, C Q^-1 C' + Q_eps^-1).
    fn dense_marginal_loglik(system: &LatentSystem) -> f64 {
        let dim = system.dim();
        let n_obs = system.y.len();
        let qd = DenseMat::from_rows(&to_dense(system.q_prior.view()));
        let q_inv = qd.inverse_spd().unwrap();
        let cd = to_dense(system.c_obs.view());
        let mut sigma_y = DenseMat::zeros(n_obs);
        for r in 0..n_obs {
            for s in 0..n_obs {
                let mut v = 0.0;
                for i in 0..dim {
                    for j in 0..dim {
                        v += cd[r][i] * q_inv.get(i, j) * cd[s][j];
                    }
                }
                if r == s {
                    v += 1.0 / system.q_eps[r];
                }
                sigma_y.set(r, s, v);
            }
        }
        let alpha = sigma_y.solve_spd(&system.y).unwrap();
        let quad: f64 = alpha.iter().zip(&system.y).map(|(a, b)| a * b).sum();
        -0.5 * sigma_y.log_det_spd().unwrap() - 0.5 * quad
            - 0.5 * n_obs as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn log_posterior_differences_match_marginal_oracle() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::BmTh, vec![2007]);
        let obs = small_dataset(&[2007]);
        let mut eval = Evaluator::new(&obs, &mesh, &fem, &spec).unwrap();

        let thetas = [
            vec![0.8, 1.3, -0.6, 1.1, 0.9, 0.7],
            vec![1.2, 0.9, 0.4, 1.6, 0.5, 1.2],
            vec![0.5, 2.0, -1.5, 0.8, 1.4, 1.9],
        ];
        let mut sparse_vals = Vec::new();
        let mut oracle_vals = Vec::new();
        for th in &thetas {
            sparse_vals.push(eval.log_posterior_checked(th).unwrap());
            let system = assemble_system(&obs, &mesh, &fem, &spec, th).unwrap();
            oracle_vals.push(dense_marginal_loglik(&system) + log_prior_theta(th, &spec).unwrap());
        }
        for i in 1..thetas.len() {
            let d_sparse = sparse_vals[i] - sparse_vals[0];
            let d_oracle = oracle_vals[i] - oracle_vals[0];
            assert!(
                (d_sparse - d_oracle).abs() < 1e-6 * d_oracle.abs().max(1.0),
                "difference {i}: sparse {d_sparse} vs oracle {d_oracle}"
            );
        }
    }

    #[test]
    fn log_posterior_zero_obs_is_prior_and_deterministic() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::Um, vec![2007, 2008]);
        let mut eval = Evaluator::new(&[], &mesh, &fem, &spec).unwrap();
        let th = [0.6, 1.1, 0.8, 1.4];
        let lp = eval.log_posterior_checked(&th).unwrap();
        let want = log_prior_theta(&th, &spec).unwrap();
        assert!((lp - want).abs() < 1e-9, "{lp} vs {want}");
        let lp2 = eval.log_posterior_checked(&th).unwrap();
        assert_eq!(lp.to_bits(), lp2.to_bits(), "evaluations must be bit-identical");
    }

    #[test]
    fn log_posterior_invariant_to_row_order() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::BmHt, vec![2007]);
        let obs = small_dataset(&[2007]);
        let mut rev = obs.clone();
        rev.reverse();
        let th = [0.7, 1.0, 0.5, 1.2, 0.8, 0.9];
        let mut e1 = Evaluator::new(&obs, &mesh, &fem, &spec).unwrap();
        let mut e2 = Evaluator::new(&rev, &mesh, &fem, &spec).unwrap();
        let a = e1.log_posterior_checked(&th).unwrap();
        let b = e2.log_posterior_checked(&th).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn quad_term_nonnegative_and_logdet_monotone() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::Um, vec![2007]);
        let obs = small_dataset(&[2007]);
        for th in [[0.5, 0.8, 0.5, 0.8], [1.5, 2.0, 0.3, 1.0]] {
            let system = assemble_system(&obs, &mesh, &fem, &spec, &th).unwrap();
            let cond = conditional(&system).unwrap();
            let rhs = information_rhs(&system);
            let quad: f64 = cond.mu_c.iter().zip(&rhs).map(|(m, r)| m * r).sum();
            assert!(quad >= 0.0);
            let prior = SpdFactor::new(system.q_prior.view(), &Ordering::Rcm).unwrap();
            assert!(cond.factor.log_det() >= prior.log_det() - 1e-9);
        }
    }

    #[test]
    fn gradient_richardson_consistency() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::Um, vec![2007]);
        let obs = small_dataset(&[2007]);
        let mut eval = Evaluator::new(&obs, &mesh, &fem, &spec).unwrap();
        let th = [0.7, 1.1, 0.6, 1.3];
        let phi = to_internal(&th, None);
        let mut obj = |p: &[f64]| eval.log_posterior(&to_natural(p, None));
        let g1 = super::fd_gradient_for_tests(&mut obj, &phi, 1e-4);
        let g2 = super::fd_gradient_for_tests(&mut obj, &phi, 5e-5);
        for i in 0..4 {
            let denom = g1[i].abs().max(1.0);
            assert!(
                ((g1[i] - g2[i]) / denom).abs() < 1e-3,
                "gradient component {i}: {} vs {}",
                g1[i],
                g2[i]
            );
        }
    }

    #[test]
    fn sample_latent_moments_and_determinism() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::Um, vec![2007]);
        let obs = small_dataset(&[2007]);
        let system = assemble_system(&obs, &mesh, &fem, &spec, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let cond = conditional(&system).unwrap();

        assert!(sample_latent(&cond, 0, 7).is_empty());
        let s1 = sample_latent(&cond, 3, 7);
        let s2 = sample_latent(&cond, 3, 7);
        assert_eq!(s1, s2, "same seed must give identical draws");

        // empirical covariance against the dense inverse
        let (qc_dense, _) = dense_conditional(&system);
        let cov = qc_dense.inverse_spd().unwrap();
        let m = 100_000;
        let draws = sample_latent(&cond, m, 42);
        let dim = system.dim();
        let mut mean = vec![0.0; dim];
        for d in &draws {
            for i in 0..dim {
                mean[i] += d[i];
            }
        }
        for v in mean.iter_mut() {
            *v /= m as f64;
        }
        // check a subset of entries to keep the test quick
        let idx: Vec<usize> = (0..dim).step_by(dim / 8 + 1).collect();
        for &i in &idx {
            let se = (cov.get(i, i) / m as f64).sqrt();
            assert!(
                (mean[i] - cond.mu_c[i]).abs() < 4.0 * se + 1e-12,
                "mean[{i}] off: {} vs {}",
                mean[i],
                cond.mu_c[i]
            );
            for &j in &idx {
                let mut c = 0.0;
                for d in &draws {
                    c += (d[i] - cond.mu_c[i]) * (d[j] - cond.mu_c[j]);
                }
                c /= m as f64;
                let se_c = ((cov.get(i, i) * cov.get(j, j) + cov.get(i, j).powi(2)) / m as f64)
                    .sqrt();
                assert!(
                    (c - cov.get(i, j)).abs() <= 5.0 * se_c,
                    "cov[{i},{j}]: {} vs {}",
                    c,
                    cov.get(i, j)
                );
            }
        }
    }

    #[test]
    fn predict_matches_dense_oracle() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::BmTh, vec![2007]);
        let theta = [0.8, 1.3, -0.6, 1.1, 0.9, 0.7];
        let obs = small_dataset(&[2007]);
        let system = assemble_system(&obs, &mesh, &fem, &spec, &theta).unwrap();
        let cond = conditional(&system).unwrap();
        let targets = vec![
            PredictTarget {
                location: Point2::new(0.9, 0.8),
                year: 2007,
                field: Field::Temperature,
                elevation_m: 400.0,
                dist_ocean_m: 9e4,
            },
            PredictTarget {
                location: Point2::new(1.2, 1.4),
                year: 2007,
                field: Field::Humidity,
                elevation_m: 1200.0,
                dist_ocean_m: 2e5,
            },
        ];
        let preds = predict(&cond, &spec, &mesh, &targets).unwrap();

        // dense counterpart
        let (qc_dense, mu_dense) = dense_conditional(&system);
        let cov = qc_dense.inverse_spd().unwrap();
        let locator = MeshLocator::new(&mesh);
        for (t, &(mean, sd)) in targets.iter().zip(&preds) {
            let (tri, w) = locator.locate(&t.location).unwrap();
            let mut a = vec![0.0; system.dim()];
            for k in 0..3 {
                let fb = spec.kind.field_index(t.field);
                a[fb * fem.n + mesh.triangles[tri][k]] += w[k];
            }
            let lay = &system.beta_layout;
            let off = system.spatial_dim();
            a[off + lay.year_col(t.field, 0)] = 1.0;
            a[off + lay.elev_col(t.field)] = t.elevation_m / ELEV_DIVISOR;
            a[off + lay.dist_col(t.field)] = t.dist_ocean_m / DIST_DIVISOR;
            let want_mean: f64 = a.iter().zip(&mu_dense).map(|(ai, mi)| ai * mi).sum();
            let mut want_var = spec.sigma(t.field).powi(2);
            for i in 0..system.dim() {
                for j in 0..system.dim() {
                    want_var += a[i] * cov.get(i, j) * a[j];
                }
            }
            assert!((mean - want_mean).abs() < 1e-8 * want_mean.abs().max(1.0));
            assert!((sd - want_var.sqrt()).abs() < 1e-8);
            assert!(sd * sd >= spec.sigma(t.field).powi(2) - 1e-15);
        }
    }

    #[test]
    fn predict_interpolates_observation_under_tiny_noise() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let mut spec = ModelSpec::new(ModelKind::Um, vec![2007]);
        spec.sigma_t = 1e-6;
        let v0 = mesh.vertices[1];
        let o = mk_obs("s0", 2007, Field::Temperature, -1.7, v0.x, v0.y);
        let system = assemble_system(&[o.clone()], &mesh, &fem, &spec, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let cond = conditional(&system).unwrap();
        let preds = predict(
            &cond,
            &spec,
            &mesh,
            &[PredictTarget {
                location: o.location,
                year: 2007,
                field: Field::Temperature,
                elevation_m: o.elevation_m,
                dist_ocean_m: o.dist_ocean_m,
            }],
        )
        .unwrap();
        assert!((preds[0].0 - -1.7).abs() < 1e-3, "mean {}", preds[0].0);
    }

    #[test]
    fn um_temperature_prediction_ignores_humidity_data() {
        let mesh = tiny_mesh();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::Um, vec![2007]);
        let theta = [0.9, 1.0, 0.7, 1.2];
        let obs_all = small_dataset(&[2007]);
        let obs_t: Vec<Observation> = obs_all
            .iter()
            .filter(|o| o.field == Field::Temperature)
            .cloned()
            .collect();
        let target = PredictTarget {
            location: Point2::new(1.0, 1.0),
            year: 2007,
            field: Field::Temperature,
            elevation_m: 300.0,
            dist_ocean_m: 1e5,
        };
        let mut results = Vec::new();
        for data in [&obs_all, &obs_t] {
            let system = assemble_system(data, &mesh, &fem, &spec, &theta).unwrap();
            let cond = conditional(&system).unwrap();
            results.push(predict(&cond, &spec, &mesh, &[target.clone()]).unwrap()[0]);
        }
        assert!((results[0].0 - results[1].0).abs() < 1e-10);
        assert!((results[0].1 - results[1].1).abs() < 1e-10);
    }

    /// Mesh and simulated UM dataset informative enough for the posterior
    /// mode to be interior and well conditioned.
    fn simulated_um() -> (Mesh, crate::fem::FemMatrices, Vec<Observation>, ModelSpec) {
        use crate::simulate::{full_requests, random_stations, simulate};
        let pts = vec![
            Point2::new(0.0, 0.0),
            Point2::new(4.0, 0.0),
            Point2::new(4.0, 4.0),
            Point2::new(0.0, 4.0),
        ];
        let mesh = build_mesh(&pts, 1.2, 1.0).unwrap();
        let fem = assemble_fem(&mesh);
        let spec = ModelSpec::new(ModelKind::Um, vec![2007, 2008]);
        let theta_true = [0.2, 1.5, 0.4, 1.0];
        let layout = crate::model::BetaLayout::new(&spec);
        let beta = layout.pack(&[3.0, 1.0], -2.0, -1.5, &[2.0, 2.5], -0.3, -0.8);
        let stations = random_stations("s", 25, (0.2, 3.8), (0.2, 3.8), 11);
        let reqs = full_requests(25, 18, &spec.years);
        let sim = simulate(&mesh, &fem, &spec, &theta_true, &beta, &stations, &reqs, true, 4)
            .unwrap();
        (mesh, fem, sim.observations, spec)
    }

    #[test]
    fn optimizer_finds_same_mode_from_two_starts() {
        let (mesh, fem, obs, spec) = simulated_um();
        let mut fit = |theta0: Option<Vec<f64>>| -> Vec<f64> {
            optimize(
                &obs,
                &mesh,
                &fem,
                &spec,
                &FitOptions {
                    theta0,
                    grad_tol: 1e-6,
                    max_iters: 400,
                    ..Default::default()
                },
            )
            .unwrap()
            .theta_hat
        };
        let a = fit(None);
        let b = fit(Some(vec![0.6, 0.5, 0.1, 2.5]));
        for i in 0..4 {
            let rel = ((a[i] - b[i]) / a[i]).abs();
            assert!(rel < 1e-3, "param {i}: {} vs {}", a[i], b[i]);
        }
    }

    #[test]
    fn um_fit_equals_bivariate_fit_with_frozen_cross() {
        let (mesh, fem, obs, spec_um) = simulated_um();
        let spec_bm = ModelSpec::new(ModelKind::BmTh, spec_um.years.clone());
        let fit_um = optimize(
            &obs,
            &mesh,
            &fem,
            &spec_um,
            &FitOptions {
                max_iters: 400,
                ..Default::default()
            },
        )
        .unwrap();
        let t0 = default_theta0(&obs, &mesh, &spec_um);
        let fit_bm = optimize(
            &obs,
            &mesh,
            &fem,
            &spec_bm,
            &FitOptions {
                max_iters: 400,
                theta0: Some(vec![t0[0], t0[1], 0.0, 1.0, t0[2], t0[3]]),
                frozen: vec![2, 3],
                ..Default::default()
            },
        )
        .unwrap();
        assert!(fit_um.converged && fit_bm.converged);
        // [b_T, kappa_T, b_H, kappa_H] vs [b11, kappa11, _, _, b22, kappa22]
        let pairs = [(0usize, 0usize), (1, 1), (2, 4), (3, 5)];
        for (um_i, bm_i) in pairs {
            let rel = ((fit_um.theta_hat[um_i] - fit_bm.theta_hat[bm_i])
                / fit_um.theta_hat[um_i])
                .abs();
            assert!(
                rel < 1e-4,
                "um[{um_i}] {} vs bm[{bm_i}] {}",
                fit_um.theta_hat[um_i],
                fit_bm.theta_hat[bm_i]
            );
        }
        // frozen parameters carry no posterior spread
        assert_eq!(fit_bm.theta_sd[2], 0.0);
    }
}

#[cfg(test)]
fn fd_gradient_for_tests(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let h = step * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        let fp = f(&xp);
        xp[i] = x[i] - h;
        let fm = f(&xp);
        xp[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}
