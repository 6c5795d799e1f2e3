//! Reference methods: MAP on the smoothed objective, the Laplace approximation
//! around it, and random-walk Metropolis sampling of the exact posterior.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{NaturalParam, UpperFactor};
use crate::linalg::{axpy, dot, norm2, Matrix, SparseRows};
use crate::problem::InverseProblem;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("point is infeasible: rate {rate} at count {index}")]
    InfeasiblePoint { index: usize, rate: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("Hessian could not be factorized even after ridging")]
    HessianAssemblyFailure,
    #[error("starting point has zero posterior density")]
    NoFeasibleStart,
}

/// Negative log posterior with the absolute values smoothed as
/// `sqrt(t^2 + epsilon^2)`.
#[derive(Debug, Clone)]
pub struct SmoothedObjective<'a> {
    pub problem: &'a InverseProblem,
    pub epsilon: f64,
    a: SparseRows,
    l: SparseRows,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianVariant {
    Exact,
    /// Prior weights frozen at the expansion point (lagged diffusivity).
    Lagged,
}

/// `1e-6` times the intensity scale `sum(y) / sum(A)`.
pub fn default_epsilon(problem: &InverseProblem) -> f64 {
    let counts: f64 = problem.y.iter().map(|&v| v as f64).sum();
    let mass: f64 = problem.a.as_slice().iter().sum();
    let scale = if mass > 0.0 && counts > 0.0 { counts / mass } else { 1.0 };
    1e-6 * scale
}

impl<'a> SmoothedObjective<'a> {
    pub fn new(problem: &'a InverseProblem, epsilon: f64) -> Result<Self, BaselineError> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(BaselineError::InvalidArgument("epsilon must be positive"));
        }
        Ok(Self {
            problem,
            epsilon,
            a: SparseRows::from_dense(&problem.a),
            l: SparseRows::from_dense(&problem.l),
        })
    }

    /// Same problem, different smoothing; reuses the sparse copies.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, BaselineError> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(BaselineError::InvalidArgument("epsilon must be positive"));
        }
        Ok(Self {
            epsilon,
            ..self.clone()
        })
    }

    fn rates(&self, x: &[f64]) -> Result<Vec<f64>, BaselineError> {
        let p = self.problem;
        let mut rates = self.a.matvec(x);
        for (i, v) in rates.iter_mut().enumerate() {
            *v += p.r[i];
            if p.y[i] > 0 && !(*v > 0.0) {
                return Err(BaselineError::InfeasiblePoint { index: i, rate: *v });
            }
        }
        Ok(rates)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, BaselineError> {
        let p = self.problem;
        let rates = self.rates(x)?;
        let mut j = 0.0;
        for (i, &rate) in rates.iter().enumerate() {
            if p.y[i] > 0 {
                j -= p.y[i] as f64 * rate.ln();
            }
            j += rate;
        }
        let e2 = self.epsilon * self.epsilon;
        for t in self.l.matvec(x) {
            j += p.alpha * (t * t + e2).sqrt();
        }
        Ok(j)
    }

    pub fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), BaselineError> {
        let p = self.problem;
        let rates = self.rates(x)?;
        let mut j = 0.0;
        let mut w = vec![0.0; rates.len()];
        for (i, &rate) in rates.iter().enumerate() {
            let y = p.y[i] as f64;
            if p.y[i] > 0 {
                j -= y * rate.ln();
                w[i] = 1.0 - y / rate;
            } else {
                w[i] = 1.0;
            }
            j += rate;
        }
        let mut g = self.a.matvec_t(&w);
        let e2 = self.epsilon * self.epsilon;
        let lx = self.l.matvec(x);
        let mut v = vec![0.0; lx.len()];
        for (k, &t) in lx.iter().enumerate() {
            let root = (t * t + e2).sqrt();
            j += p.alpha * root;
            v[k] = p.alpha * t / root;
        }
        if !v.is_empty() {
            axpy(1.0, &self.l.matvec_t(&v), &mut g);
        }
        Ok((j, g))
    }

    /// Hessian at `x`; the lagged variant weighs the prior rows by
    /// `alpha / sqrt(t^2 + epsilon^2)`.
    pub fn hessian(&self, x: &[f64], variant: HessianVariant) -> Result<Matrix, BaselineError> {
        let p = self.problem;
        let rates = self.rates(x)?;
        let n = p.dim();
        let mut h = Matrix::zeros(n, n);
        for (i, &rate) in rates.iter().enumerate() {
            if p.y[i] > 0 {
                self.a.add_row_outer(i, p.y[i] as f64 / (rate * rate), &mut h);
            }
        }
        let e2 = self.epsilon * self.epsilon;
        for (k, t) in self.l.matvec(x).into_iter().enumerate() {
            let q = t * t + e2;
            let wgt = match variant {
                HessianVariant::Exact => p.alpha * e2 / (q * q.sqrt()),
                HessianVariant::Lagged => p.alpha / q.sqrt(),
            };
            self.l.add_row_outer(k, wgt, &mut h);
        }
        h.symmetrize();
        Ok(h)
    }
}

/// Differentiable objective for the projected quasi-Newton solver.
pub trait Objective {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), BaselineError>;
}

impl Objective for SmoothedObjective<'_> {
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>), BaselineError> {
        SmoothedObjective::value_grad(self, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Lower bound imposed on every coordinate.
    pub floor: f64,
    /// Converged once the projected gradient norm is below `tol (1 + |J|)`.
    pub tol: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            memory: 10,
            floor: 1e-12,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The last line search found no decrease; `x` is the best iterate.
    pub line_search_failure: bool,
    pub projected_gradient_norm: f64,
    /// Objective after each accepted step, starting value first.
    pub history: Vec<f64>,
}

fn projected_gradient(x: &[f64], g: &[f64], floor: f64) -> Vec<f64> {
    x.iter()
        .zip(g)
        .map(|(&xi, &gi)| xi - (xi - gi).max(floor))
        .collect()
}

/// Projected limited-memory BFGS on `{x >= floor}`.
///
/// Coordinates sitting on the bound with a gradient pushing outward are frozen
/// for the step; the two-loop direction is computed on the rest and every trial
/// point is projected back before the Armijo test.
pub fn solve_map_with<O: Objective>(
    obj: &O,
    x0: &[f64],
    opts: &MapOptions,
) -> Result<MapResult, BaselineError> {
    if x0.iter().any(|&v| !(v > 0.0)) {
        return Err(BaselineError::InvalidArgument("starting point must be strictly positive"));
    }
    let n = x0.len();
    let mut x: Vec<f64> = x0.iter().map(|&v| v.max(opts.floor)).collect();
    let (mut f, mut g) = obj.value_grad(&x)?;
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut history = vec![f];
    let mut result = MapResult {
        x: Vec::new(),
        value: f,
        iterations: 0,
        converged: false,
        line_search_failure: false,
        projected_gradient_norm: f64::INFINITY,
        history: Vec::new(),
    };
    for it in 0..opts.max_iter {
        let pg = norm2(&projected_gradient(&x, &g, opts.floor));
        result.projected_gradient_norm = pg;
        if pg <= opts.tol * (1.0 + f.abs()) {
            result.converged = true;
            break;
        }
        let active: Vec<bool> = (0..n).map(|j| x[j] <= opts.floor && g[j] > 0.0).collect();
        let mut q: Vec<f64> = (0..n).map(|j| if active[j] { 0.0 } else { g[j] }).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * dot(s, &q);
            axpy(-a, y, &mut q);
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            axpy(a - b, s, &mut q);
        }
        let mut d: Vec<f64> = (0..n).map(|j| if active[j] { 0.0 } else { -q[j] }).collect();
        let gd = dot(&g, &d);
        if !(gd < 0.0) {
            mem.clear();
            d = (0..n).map(|j| if active[j] { 0.0 } else { -g[j] }).collect();
        }
        let mut t = if mem.is_empty() { (1.0 / norm2(&d)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&d)
                .map(|(xi, di)| (xi + t * di).max(opts.floor))
                .collect();
            if let Ok((ft, gt)) = obj.value_grad(&trial) {
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                if ft <= f + 1e-4 * dot(&g, &step) && ft.is_finite() {
                    accepted = Some((trial, ft, gt, step));
                    break;
                }
            }
            t *= 0.5;
        }
        result.iterations = it + 1;
        let Some((xn, fn_, gn, s)) = accepted else {
            result.line_search_failure = true;
            break;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * norm2(&s) * norm2(&y) {
            if mem.len() == opts.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let stalled = fn_ >= f - 1e-15 * f.abs().max(1.0) && fn_ <= f;
        x = xn;
        f = fn_;
        g = gn;
        history.push(f);
        if stalled && mem.is_empty() {
            break;
        }
    }
    result.projected_gradient_norm = norm2(&projected_gradient(&x, &g, opts.floor));
    if result.projected_gradient_norm <= opts.tol * (1.0 + f.abs()) {
        result.converged = true;
    }
    result.x = x;
    result.value = f;
    result.history = history;
    Ok(result)
}

/// Projected quasi-Newton MAP with continuation in the smoothing: stages run
/// at `epsilon * 10^k` down to `obj.epsilon`, each warm-started from the last
/// and capped at `max_iter` iterations. Small smoothings are badly conditioned
/// and stall from a cold start. The first stage sits at `1e-2` times the
/// intensity scale; `history` and `converged` describe the final stage.
pub fn solve_map(
    obj: &SmoothedObjective,
    x0: &[f64],
    max_iter: usize,
) -> Result<MapResult, BaselineError> {
    let opts = MapOptions {
        max_iter,
        ..MapOptions::default()
    };
    let start = 1e4 * default_epsilon(obj.problem);
    let mut stages = Vec::new();
    let mut eps = obj.epsilon;
    while eps * 10.0 <= start {
        eps *= 10.0;
        stages.push(eps);
    }
    let mut x = x0.to_vec();
    let mut iterations = 0;
    for &e in stages.iter().rev() {
        let res = solve_map_with(&obj.with_epsilon(e)?, &x, &opts)?;
        iterations += res.iterations;
        x = res.x;
    }
    let mut res = solve_map_with(obj, &x, &opts)?;
    res.iterations += iterations;
    Ok(res)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceApproximation {
    pub param: NaturalParam,
    /// Diagonal shift added to make the Hessian positive definite (0 if none).
    pub ridge: f64,
}

/// Gaussian with precision `Hessian(x_map)` and mean `x_map`.
pub fn laplace_approximation(
    obj: &SmoothedObjective,
    x_map: &[f64],
    variant: HessianVariant,
) -> Result<LaplaceApproximation, BaselineError> {
    let hess = obj.hessian(x_map, variant)?;
    let n = hess.rows();
    let mut ridge = 0.0;
    let base = 1e-10 * hess.trace().abs().max(f64::MIN_POSITIVE) / n.max(1) as f64;
    for attempt in 0..12 {
        let mut h = hess.clone();
        if attempt > 0 {
            ridge = base * 10f64.powi(attempt - 1);
            for j in 0..n {
                h[(j, j)] += ridge;
            }
        }
        if let Ok(r) = UpperFactor::cholesky(&h) {
            let prec_mean = h.matvec(x_map);
            return Ok(LaplaceApproximation {
                param: NaturalParam::new(prec_mean, r).map_err(|_| BaselineError::HessianAssemblyFailure)?,
                ridge,
            });
        }
    }
    Err(BaselineError::HessianAssemblyFailure)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    /// Total iterations, burn-in included.
    pub chain_length: usize,
    pub burn_in: usize,
    pub target_acceptance: f64,
    pub step_adapt_interval: usize,
    pub seed: u64,
    pub initial_step: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chain_length: 300_000,
            burn_in: 100_000,
            target_acceptance: 0.23,
            step_adapt_interval: 500,
            seed: 0,
            initial_step: 0.1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.burn_in >= self.chain_length {
            return Err(BaselineError::InvalidArgument("burn_in must be below chain_length"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(BaselineError::InvalidArgument("target acceptance must lie in (0, 1)"));
        }
        if self.step_adapt_interval == 0 || !(self.initial_step > 0.0) {
            return Err(BaselineError::InvalidArgument("adaptation interval and step must be positive"));
        }
        Ok(())
    }
}

/// Dense covariances are only accumulated up to this dimension.
pub const MCMC_DENSE_COV_MAX: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McmcResult {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub covariance: Option<Matrix>,
    /// Over the kept (post burn-in) iterations.
    pub acceptance_rate: f64,
    pub step_size: f64,
    pub kept: usize,
}

/// Random-walk Metropolis with isotropic Gaussian proposals. During burn-in the
/// step is multiplied by `exp(rate - target)` after every adaptation window;
/// afterwards it is frozen and the chain statistics are accumulated (Welford).
pub fn run_rwmh_density<F: Fn(&[f64]) -> f64>(
    log_density: F,
    x0: &[f64],
    config: &McmcConfig,
) -> Result<McmcResult, BaselineError> {
    config.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut lp = log_density(&x);
    if !lp.is_finite() {
        return Err(BaselineError::NoFeasibleStart);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut step = config.initial_step;
    let dense = n <= MCMC_DENSE_COV_MAX;
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut comoment = if dense { Some(Matrix::zeros(n, n)) } else { None };
    let mut delta = vec![0.0; n];
    let mut proposal = vec![0.0; n];
    let (mut window_acc, mut kept_acc, mut kept) = (0usize, 0usize, 0usize);
    for it in 0..config.chain_length {
        for (p, xi) in proposal.iter_mut().zip(&x) {
            let z: f64 = rng.sample(StandardNormal);
            *p = xi + step * z;
        }
        let lq = log_density(&proposal);
        let u: f64 = rng.gen();
        let accept = lq.is_finite() && u.ln() < lq - lp;
        if accept {
            std::mem::swap(&mut x, &mut proposal);
            lp = lq;
        }
        if it < config.burn_in {
            window_acc += accept as usize;
            if (it + 1) % config.step_adapt_interval == 0 {
                let rate = window_acc as f64 / config.step_adapt_interval as f64;
                step *= (rate - config.target_acceptance).exp();
                window_acc = 0;
            }
            continue;
        }
        kept_acc += accept as usize;
        kept += 1;
        let k = kept as f64;
        for j in 0..n {
            delta[j] = x[j] - mean[j];
            mean[j] += delta[j] / k;
        }
        for j in 0..n {
            m2[j] += delta[j] * (x[j] - mean[j]);
        }
        if let Some(c) = comoment.as_mut() {
            // Rank-one Welford update: C += (k-1)/k delta delta^T.
            let scale = (k - 1.0) / k;
            for i in 0..n {
                let di = scale * delta[i];
                let row = c.row_mut(i);
                for j in i..n {
                    row[j] += di * delta[j];
                }
            }
        }
    }
    let denom = (kept as f64 - 1.0).max(1.0);
    let covariance = comoment.map(|mut c| {
        for i in 0..n {
            for j in i..n {
                let v = c[(i, j)] / denom;
                c[(i, j)] = v;
                c[(j, i)] = v;
            }
        }
        c
    });
    Ok(McmcResult {
        mean,
        variances: m2.iter().map(|v| v / denom).collect(),
        covariance,
        acceptance_rate: kept_acc as f64 / kept.max(1) as f64,
        step_size: step,
        kept,
    })
}

/// Samples the exact posterior of `problem` (zero density off the constraint set).
pub fn run_rwmh(
    problem: &InverseProblem,
    x0: &[f64],
    config: &McmcConfig,
) -> Result<McmcResult, BaselineError> {
    if x0.len() != problem.dim() {
        return Err(BaselineError::InvalidArgument("start has the wrong dimension"));
    }
    run_rwmh_density(|x| problem.log_posterior(x), x0, config)
}

/// Marginal variances of a Laplace approximation.
pub fn laplace_variances(approx: &LaplaceApproximation) -> Vec<f64> {
    approx
        .param
        .chol_lambda
        .inverse_gram_diag()
        .expect("factor has a positive diagonal")
}
