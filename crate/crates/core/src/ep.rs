//! Expectation propagation over rank-one sites.
//!
//! Every site touches `x` only through `s = u^T x`, so its Gaussian
//! approximation is `exp(lambda1 s - lambda2 s^2 / 2)` and the global
//! approximation is `N(tau I) * prod_i site_i`. One update computes the cavity
//! marginal along `u` straight from the current state, matches the tilted
//! moments, and applies the change of `(lambda1, lambda2)` as a rank-one update
//! or downdate of the stored Cholesky factor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{
    gram_inverse, GaussianError, MomentParam, NaturalParam, UpperFactor,
};
use crate::linalg::{axpy, dot, norm2, sub, Matrix};
use crate::parallel::{join, Execution};
use crate::problem::InverseProblem;
use crate::site_laplace::{laplace_site_moments, LaplaceSiteInput};
use crate::site_poisson::{poisson_site_moments, PoissonSiteInput};
use crate::tilted::TiltedMoments;

/// Cavity denominators `1 - c lambda2` at or below this are treated as improper.
pub const CAVITY_GUARD: f64 = 1e-12;
/// Tilted variances below this cannot be inverted.
pub const MIN_TILTED_VARIANCE: f64 = 1e-300;
/// Two-sided 95% standard normal quantile.
pub const HPD_Z95: f64 = 1.959964;
/// The moment form switches to the parallel matrix-vector kernels from this size.
const PARALLEL_MIN_DIM: usize = 192;

#[derive(Debug, Error)]
pub enum EpError {
    #[error("inconsistent initialization: {0}")]
    Initialization(String),
    #[error("site index {0} out of range")]
    SiteIndex(usize),
    #[error(transparent)]
    Gaussian(#[from] GaussianError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Why a site update left the state untouched.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SkipReason {
    #[error("cavity variance is not positive (1 - c lambda2 = {0})")]
    NegativeCavityVariance(f64),
    #[error("tilted moments failed: {0}")]
    Quadrature(String),
    #[error("tilted variance {0} cannot be inverted")]
    DegenerateVariance(f64),
    #[error("rank-one downdate lost positive definiteness")]
    LossOfPositivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parameterization {
    /// Precision mean and precision factor.
    Natural,
    /// Mean and covariance factor.
    Moment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SiteKind {
    /// Count `y` with background `r`, supported on `s > b`.
    Poisson { y: u64, r: f64, b: f64 },
    /// `(alpha/2) exp(-alpha |s|)`.
    Laplace { alpha: f64 },
    /// Exact Gaussian factor `N(s | mean, variance)`; moment matching is exact.
    Gaussian { mean: f64, variance: f64 },
}

impl SiteKind {
    /// Mean and variance of `site(s) N(s | m, v)`.
    pub fn tilted_moments(&self, m: f64, v: f64) -> Result<TiltedMoments, SkipReason> {
        let fail = |e: &dyn std::fmt::Display| SkipReason::Quadrature(e.to_string());
        match *self {
            SiteKind::Poisson { y, r, b } => PoissonSiteInput::new(m, v, y, r, b)
                .and_then(|p| poisson_site_moments(&p))
                .map_err(|e| fail(&e)),
            SiteKind::Laplace { alpha } => LaplaceSiteInput::new(m, v, alpha)
                .and_then(|p| laplace_site_moments(&p))
                .map_err(|e| fail(&e)),
            SiteKind::Gaussian { mean, variance } => {
                let c_s = v * variance / (v + variance);
                Ok(TiltedMoments {
                    s_bar: (m * variance + mean * v) / (v + variance),
                    c_s,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub u: Vec<f64>,
    pub kind: SiteKind,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl SiteRecord {
    pub fn new(u: Vec<f64>, kind: SiteKind) -> Self {
        Self {
            u,
            kind,
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GaussianState {
    Natural(NaturalParam),
    Moment(MomentParam),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EPConfig {
    /// Base precision `tau I` of the initial approximation.
    pub tau: f64,
    pub max_sweeps: usize,
    /// Stop once `|mu_k - mu_{k-1}| / |mu_k|` falls below this.
    pub tol: f64,
    pub seed: u64,
    pub parameterization: Parameterization,
    /// Covariance deltas are only tracked up to this dimension.
    pub cov_cap: usize,
    pub execution: Execution,
}

impl Default for EPConfig {
    fn default() -> Self {
        Self {
            tau: 1e-2,
            max_sweeps: 4,
            tol: 1e-8,
            seed: 0,
            parameterization: Parameterization::Natural,
            cov_cap: 200,
            execution: Execution::default(),
        }
    }
}

impl EPConfig {
    pub fn validate(&self) -> Result<(), EpError> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(EpError::Initialization("tau must be positive".into()));
        }
        if self.max_sweeps == 0 {
            return Err(EpError::Initialization("max_sweeps must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(EpError::Initialization("tol must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Cavity marginal of `u^T x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CavityMarginal {
    pub mean: f64,
    pub variance: f64,
}

/// Projections of the current state onto one direction.
struct Projection {
    /// `u^T C u`.
    c: f64,
    /// `u^T mu`.
    t: f64,
    /// `C u`, moment form only.
    cu: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteOutcome {
    pub cavity: CavityMarginal,
    pub tilted: TiltedMoments,
    pub delta_lambda1: f64,
    pub delta_lambda2: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub negative_cavity: usize,
    pub quadrature: usize,
    pub degenerate_variance: usize,
    pub loss_of_positivity: usize,
}

impl SkipCounts {
    pub fn record(&mut self, reason: &SkipReason) {
        match reason {
            SkipReason::NegativeCavityVariance(_) => self.negative_cavity += 1,
            SkipReason::Quadrature(_) => self.quadrature += 1,
            SkipReason::DegenerateVariance(_) => self.degenerate_variance += 1,
            SkipReason::LossOfPositivity => self.loss_of_positivity += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.negative_cavity + self.quadrature + self.degenerate_variance + self.loss_of_positivity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EPState {
    pub param: GaussianState,
    pub sites: Vec<SiteRecord>,
    pub tau: f64,
    pub sweep_count: usize,
    pub rng_seed: u64,
    pub skipped: SkipCounts,
    #[serde(skip, default)]
    pub execution: Execution,
    #[serde(skip, default)]
    scratch: Scratch,
}

/// Reused buffers for rank-one modifications. Never part of the state's value.
#[derive(Debug, Clone, Default)]
struct Scratch {
    work: Vec<f64>,
    backup: Vec<f64>,
}

impl PartialEq for Scratch {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl EPState {
    /// `N(0, I / tau)` in the requested form with all site parameters zero.
    pub fn new(
        n: usize,
        sites: Vec<SiteRecord>,
        tau: f64,
        parameterization: Parameterization,
    ) -> Result<Self, EpError> {
        if let Some(i) = sites.iter().position(|s| s.u.len() != n) {
            return Err(EpError::Initialization(format!(
                "site {i} has direction of length {}, expected {n}",
                sites[i].u.len()
            )));
        }
        if !(tau > 0.0) {
            return Err(EpError::Initialization("tau must be positive".into()));
        }
        let param = match parameterization {
            Parameterization::Natural => GaussianState::Natural(NaturalParam {
                h: vec![0.0; n],
                chol_lambda: UpperFactor::scaled_identity(n, tau),
            }),
            Parameterization::Moment => GaussianState::Moment(MomentParam {
                mu: vec![0.0; n],
                chol_c: UpperFactor::scaled_identity(n, 1.0 / tau),
            }),
        };
        let mut sites = sites;
        for s in &mut sites {
            s.lambda1 = 0.0;
            s.lambda2 = 0.0;
        }
        Ok(Self {
            param,
            sites,
            tau,
            sweep_count: 0,
            rng_seed: 0,
            skipped: SkipCounts::default(),
            execution: Execution::default(),
            scratch: Scratch::default(),
        })
    }

    /// Poisson sites for the rows of `A`, then Laplace sites for the rows of `L`.
    /// All-zero rows are constant factors (a ray missing the image) and get no site.
    pub fn from_problem(problem: &InverseProblem, config: &EPConfig) -> Result<Self, EpError> {
        config.validate()?;
        problem
            .validate()
            .map_err(|e| EpError::Initialization(e.to_string()))?;
        let mut sites = Vec::with_capacity(problem.num_counts() + problem.num_prior_rows());
        for (i, row) in problem.a.row_iter().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            let kind = SiteKind::Poisson {
                y: problem.y[i],
                r: problem.r[i],
                b: problem.lower_bound(i),
            };
            sites.push(SiteRecord::new(row.to_vec(), kind));
        }
        for row in problem.l.row_iter() {
            if row.iter().all(|&v| v == 0.0) {
                continue;
            }
            sites.push(SiteRecord::new(
                row.to_vec(),
                SiteKind::Laplace {
                    alpha: problem.alpha,
                },
            ));
        }
        let mut state = Self::new(problem.dim(), sites, config.tau, config.parameterization)?;
        state.rng_seed = config.seed;
        state.execution = config.execution;
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        match &self.param {
            GaussianState::Natural(p) => p.dim(),
            GaussianState::Moment(p) => p.dim(),
        }
    }

    pub fn parameterization(&self) -> Parameterization {
        match self.param {
            GaussianState::Natural(_) => Parameterization::Natural,
            GaussianState::Moment(_) => Parameterization::Moment,
        }
    }

    pub fn mean(&self) -> Result<Vec<f64>, EpError> {
        Ok(match &self.param {
            GaussianState::Natural(p) => p.mean()?,
            GaussianState::Moment(p) => p.mu.clone(),
        })
    }

    pub fn covariance(&self) -> Result<Matrix, EpError> {
        Ok(match &self.param {
            GaussianState::Natural(p) => gram_inverse(&p.chol_lambda)?,
            GaussianState::Moment(p) => p.covariance(),
        })
    }

    pub fn marginal_variances(&self) -> Result<Vec<f64>, EpError> {
        Ok(match &self.param {
            GaussianState::Natural(p) => p.chol_lambda.inverse_gram_diag_with(self.execution)?,
            GaussianState::Moment(p) => p.chol_c.gram_diag(),
        })
    }

    /// Fanning out costs more than it saves on small factors.
    fn kernel_execution(&self) -> Execution {
        if self.dim() >= PARALLEL_MIN_DIM {
            self.execution
        } else {
            Execution::Sequential
        }
    }

    fn project(&self, u: &[f64]) -> Result<Projection, GaussianError> {
        match &self.param {
            GaussianState::Natural(p) => {
                let r = &p.chol_lambda;
                // z = R^{-T} u and w = R^{-T} h; then c = z.z and u^T mu = z.w.
                let exec = self.kernel_execution();
                let (z, w) = if exec.is_parallel() {
                    join(
                        exec,
                        || {
                            let mut z = u.to_vec();
                            r.solve_lower_in_place(&mut z).map(|_| z)
                        },
                        || {
                            let mut w = p.h.clone();
                            r.solve_lower_in_place(&mut w).map(|_| w)
                        },
                    )
                } else {
                    let (mut z, mut w) = (u.to_vec(), p.h.clone());
                    let solved = r.solve_lower_pair_in_place(&mut z, &mut w);
                    (solved.clone().map(|_| z), solved.map(|_| w))
                };
                let (z, w) = (z?, w?);
                Ok(Projection {
                    c: dot(&z, &z),
                    t: dot(&z, &w),
                    cu: None,
                })
            }
            GaussianState::Moment(p) => {
                let s = &p.chol_c;
                let exec = self.kernel_execution();
                let q = s.mul_upper_with(exec, u);
                let cu = s.mul_lower_with(exec, &q);
                Ok(Projection {
                    c: dot(&q, &q),
                    t: dot(u, &p.mu),
                    cu: Some(cu),
                })
            }
        }
    }

    fn cavity_from(&self, proj: &Projection, site: &SiteRecord) -> Result<CavityMarginal, SkipReason> {
        let denom = 1.0 - proj.c * site.lambda2;
        if !(denom > CAVITY_GUARD) {
            return Err(SkipReason::NegativeCavityVariance(denom));
        }
        Ok(CavityMarginal {
            mean: (proj.t - proj.c * site.lambda1) / denom,
            variance: proj.c / denom,
        })
    }

    /// Marginal of `u_i^T x` under the approximation with site `i` removed,
    /// without touching the stored factor.
    pub fn cavity_marginal(&self, i: usize) -> Result<CavityMarginal, EpError> {
        let site = self.sites.get(i).ok_or(EpError::SiteIndex(i))?;
        let proj = self.project(&site.u)?;
        self.cavity_from(&proj, site)
            .map_err(|e| EpError::Initialization(e.to_string()))
    }

    /// One moment-matching step for site `i`. On `Err` the state is unchanged.
    pub fn site_update(&mut self, i: usize) -> Result<SiteOutcome, SkipReason> {
        let site = &self.sites[i];
        let proj = self
            .project(&site.u)
            .map_err(|e| SkipReason::Quadrature(e.to_string()))?;
        let cavity = self.cavity_from(&proj, site)?;
        let tilted = site.kind.tilted_moments(cavity.mean, cavity.variance)?;
        if !(tilted.c_s >= MIN_TILTED_VARIANCE) || !tilted.c_s.is_finite() || !tilted.s_bar.is_finite()
        {
            return Err(SkipReason::DegenerateVariance(tilted.c_s));
        }
        let lambda1 = tilted.s_bar / tilted.c_s - cavity.mean / cavity.variance;
        let lambda2 = 1.0 / tilted.c_s - 1.0 / cavity.variance;
        let d1 = lambda1 - site.lambda1;
        let d2 = lambda2 - site.lambda2;
        let u = &self.sites[i].u;
        match &mut self.param {
            GaussianState::Natural(p) => {
                apply_rank_one(&mut p.chol_lambda, u, d2, &mut self.scratch)?;
                axpy(d1, u, &mut p.h);
            }
            GaussianState::Moment(p) => {
                let cu = proj.cu.expect("moment projection carries C u");
                let coef = (tilted.c_s - proj.c) / (proj.c * proj.c);
                apply_rank_one(&mut p.chol_c, &cu, coef, &mut self.scratch)?;
                axpy((tilted.s_bar - proj.t) / proj.c, &cu, &mut p.mu);
            }
        }
        let site = &mut self.sites[i];
        site.lambda1 = lambda1;
        site.lambda2 = lambda2;
        Ok(SiteOutcome {
            cavity,
            tilted,
            delta_lambda1: d1,
            delta_lambda2: d2,
        })
    }

    /// Site update that records skips instead of returning them.
    pub fn try_site_update(&mut self, i: usize) -> bool {
        match self.site_update(i) {
            Ok(_) => true,
            Err(reason) => {
                self.skipped.record(&reason);
                false
            }
        }
    }

    /// Base precision plus `sum_i lambda2_i u_i u_i^T`, and `sum_i lambda1_i u_i`.
    pub fn reconstruct_from_sites(&self) -> (Matrix, Vec<f64>) {
        let n = self.dim();
        let mut prec = Matrix::identity(n).scale(self.tau);
        let mut h = vec![0.0; n];
        for s in &self.sites {
            prec.add_outer(s.lambda2, &s.u, &s.u);
            axpy(s.lambda1, &s.u, &mut h);
        }
        (prec, h)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (factor, vector) = match &self.param {
            GaussianState::Natural(p) => (p.chol_lambda.as_slice().to_vec(), p.h.clone()),
            GaussianState::Moment(p) => (p.chol_c.as_slice().to_vec(), p.mu.clone()),
        };
        Checkpoint {
            n: self.dim(),
            parameterization: self.parameterization(),
            factor,
            vector,
            lambda1: self.sites.iter().map(|s| s.lambda1).collect(),
            lambda2: self.sites.iter().map(|s| s.lambda2).collect(),
            tau: self.tau,
            seed: self.rng_seed,
            sweep_count: self.sweep_count,
        }
    }

    /// Restores factor, vector and site parameters; the site directions must
    /// come from the same problem.
    pub fn restore(&mut self, cp: &Checkpoint) -> Result<(), EpError> {
        if cp.n != self.dim() || cp.vector.len() != cp.n {
            return Err(EpError::Checkpoint(format!("dimension {} does not match {}", cp.n, self.dim())));
        }
        if cp.lambda1.len() != self.sites.len() || cp.lambda2.len() != self.sites.len() {
            return Err(EpError::Checkpoint("site count does not match".into()));
        }
        let factor = UpperFactor::from_row_major(cp.n, cp.factor.clone())?;
        self.param = match cp.parameterization {
            Parameterization::Natural => GaussianState::Natural(NaturalParam::new(cp.vector.clone(), factor)?),
            Parameterization::Moment => GaussianState::Moment(MomentParam::new(cp.vector.clone(), factor)?),
        };
        for (s, (&l1, &l2)) in self.sites.iter_mut().zip(cp.lambda1.iter().zip(&cp.lambda2)) {
            s.lambda1 = l1;
            s.lambda2 = l2;
        }
        self.tau = cp.tau;
        self.rng_seed = cp.seed;
        self.sweep_count = cp.sweep_count;
        Ok(())
    }
}

/// `R^T R + coef v v^T` in place.
fn apply_rank_one(r: &mut UpperFactor, v: &[f64], coef: f64, scratch: &mut Scratch) -> Result<(), SkipReason> {
    if coef == 0.0 {
        return Ok(());
    }
    let scale = coef.abs().sqrt();
    scratch.work.clear();
    scratch.work.extend(v.iter().map(|x| x * scale));
    if coef > 0.0 {
        r.update_in_place(&mut scratch.work);
        Ok(())
    } else {
        r.downdate_in_place(&mut scratch.work, &mut scratch.backup)
            .map_err(|_| SkipReason::LossOfPositivity)
    }
}

/// Text-serializable snapshot of an EP run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n: usize,
    pub parameterization: Parameterization,
    /// Upper factor, row-major.
    pub factor: Vec<f64>,
    /// `h` in natural form, `mu` in moment form.
    pub vector: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    pub tau: f64,
    pub seed: u64,
    pub sweep_count: usize,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EpError> {
        serde_json::from_str(s).map_err(|e| EpError::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    /// `|mu_k - mu_*|_2` after each sweep, `mu_*` being the final mean.
    pub mu_deltas: Vec<f64>,
    /// Spectral norm `|C_k - C_*|`, empty above the configured dimension cap.
    pub cov_deltas: Vec<f64>,
    /// `|mu_k - mu_{k-1}|_2 / |mu_k|_2` per sweep.
    pub relative_changes: Vec<f64>,
    pub relative_change_last: f64,
    pub sweeps: usize,
    pub updates: usize,
    pub skipped: SkipCounts,
}

/// Runs sweeps on an existing state. Each sweep visits every site once in a
/// fresh permutation drawn from a generator seeded with `config.seed`.
pub fn run_state(state: &mut EPState, config: &EPConfig) -> Result<ConvergenceReport, EpError> {
    config.validate()?;
    state.rng_seed = config.seed;
    state.execution = config.execution;
    let n = state.dim();
    let track_cov = n <= config.cov_cap;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..state.sites.len()).collect();
    let mut prev = state.mean()?;
    let mut means = Vec::new();
    let mut covs = Vec::new();
    let mut report = ConvergenceReport::default();
    for _ in 0..config.max_sweeps {
        order.shuffle(&mut rng);
        for &i in &order {
            if state.try_site_update(i) {
                report.updates += 1;
            }
        }
        state.sweep_count += 1;
        report.sweeps += 1;
        let mu = state.mean()?;
        let change = norm2(&sub(&mu, &prev)) / norm2(&mu).max(f64::MIN_POSITIVE);
        report.relative_changes.push(change);
        if track_cov {
            covs.push(state.covariance()?);
        }
        prev = mu.clone();
        means.push(mu);
        if change < config.tol {
            break;
        }
    }
    if let Some(last) = means.last() {
        report.mu_deltas = means.iter().map(|m| norm2(&sub(m, last))).collect();
    }
    if let Some(last) = covs.last() {
        report.cov_deltas = covs
            .iter()
            .map(|c| c.sub(last).symmetric_spectral_norm(200))
            .collect();
    }
    report.relative_change_last = report.relative_changes.last().copied().unwrap_or(0.0);
    report.skipped = state.skipped.clone();
    Ok(report)
}

/// Builds the state for `problem` and runs `config.max_sweeps` sweeps.
pub fn run_sweeps(
    problem: &InverseProblem,
    config: &EPConfig,
) -> Result<(EPState, ConvergenceReport), EpError> {
    let mut state = EPState::from_problem(problem, config)?;
    let report = run_state(&mut state, config)?;
    Ok((state, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub hpd_lower: Vec<f64>,
    pub hpd_upper: Vec<f64>,
    pub covariance: Option<Matrix>,
}

impl PosteriorSummary {
    /// Gaussian summary with a `mean +- z sd` band.
    pub fn from_moments(mean: Vec<f64>, variances: Vec<f64>, z: f64, covariance: Option<Matrix>) -> Self {
        let (hpd_lower, hpd_upper) = mean
            .iter()
            .zip(&variances)
            .map(|(m, v)| {
                let w = z * v.max(0.0).sqrt();
                (m - w, m + w)
            })
            .unzip();
        Self {
            mean,
            variances,
            hpd_lower,
            hpd_upper,
            covariance,
        }
    }

    pub fn std_devs(&self) -> Vec<f64> {
        self.variances.iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

pub fn posterior_summary(state: &EPState, include_covariance: bool) -> Result<PosteriorSummary, EpError> {
    let mean = state.mean()?;
    let variances = state.marginal_variances()?;
    let cov = if include_covariance {
        Some(state.covariance()?)
    } else {
        None
    };
    Ok(PosteriorSummary::from_moments(mean, variances, HPD_Z95, cov))
}
