use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use poisson_ep::ep::{EPConfig, Parameterization};
use poisson_ep::parallel::Execution;
use poisson_ep::problem::{Constraint, ProblemSettings, ProblemSpec};

use crate::error::CliError;

pub const OUTPUT_DIR_ENV: &str = "EP_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ep,
    Map,
    Laplace,
    Mcmc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ep => "ep",
            Method::Map => "map",
            Method::Laplace => "laplace",
            Method::Mcmc => "mcmc",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.trim() {
            "ep" => Ok(Method::Ep),
            "map" => Ok(Method::Map),
            "laplace" => Ok(Method::Laplace),
            "mcmc" => Ok(Method::Mcmc),
            other => Err(CliError::Validation(format!("unknown method '{other}'"))),
        }
    }
}

/// Everything a run needs. Unknown keys are rejected so typos surface early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: ProblemSpec,
    pub constraint: Constraint,
    pub alpha: f64,
    pub count_scale: f64,
    pub background: f64,
    pub parameterization: Parameterization,
    pub max_sweeps: usize,
    pub tol: f64,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub output_dir: Option<PathBuf>,
    /// Smoothing of the prior for MAP and Laplace; `None` picks a data-scaled default.
    pub epsilon: Option<f64>,
    pub map_max_iter: usize,
    pub mcmc_chain_length: usize,
    pub mcmc_burn_in: usize,
    pub execution: Execution,
    /// Run the requested methods on separate threads.
    pub parallel_methods: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::Phillips { n: 100 },
            constraint: Constraint::C2,
            alpha: 1.0,
            count_scale: 1.0,
            background: 0.0,
            parameterization: Parameterization::Natural,
            max_sweeps: 4,
            tol: 1e-6,
            seed: 1,
            methods: vec![Method::Ep],
            output_dir: None,
            epsilon: None,
            map_max_iter: 2000,
            mcmc_chain_length: 300_000,
            mcmc_burn_in: 100_000,
            execution: Execution::default(),
            parallel_methods: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Validation(msg.to_string()));
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.max_sweeps == 0 {
            return bad("max_sweeps must be at least 1");
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty");
        }
        if !(self.tol >= 0.0) {
            return bad("tol must be nonnegative");
        }
        if !(self.count_scale > 0.0) {
            return bad("count_scale must be positive");
        }
        if !(self.background >= 0.0) {
            return bad("background must be nonnegative");
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0) {
                return bad("epsilon must be positive");
            }
        }
        if self.mcmc_burn_in >= self.mcmc_chain_length {
            return bad("mcmc_burn_in must be smaller than mcmc_chain_length");
        }
        let size_ok = match self.problem {
            ProblemSpec::Phillips { n } => n >= 2,
            ProblemSpec::Tomo {
                width,
                height,
                n_angles,
                n_detectors,
                ..
            } => width >= 2 && height >= 2 && n_angles >= 1 && n_detectors >= 1,
        };
        if !size_ok {
            return bad("problem dimensions are too small");
        }
        Ok(())
    }

    /// Flag, then config file, then the environment.
    pub fn resolve_output_dir(&mut self) -> Result<PathBuf, CliError> {
        if self.output_dir.is_none() {
            self.output_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
        }
        self.output_dir
            .clone()
            .ok_or_else(|| CliError::Validation(format!("no output directory: pass --output-dir or set {OUTPUT_DIR_ENV}")))
    }

    pub fn problem_settings(&self) -> ProblemSettings {
        ProblemSettings {
            spec: self.problem.clone(),
            constraint: self.constraint,
            alpha: self.alpha,
            count_scale: self.count_scale,
            background: self.background,
            seed: self.seed,
        }
    }

    pub fn ep_config(&self) -> EPConfig {
        EPConfig {
            max_sweeps: self.max_sweeps,
            tol: self.tol,
            seed: self.seed,
            parameterization: self.parameterization,
            execution: self.execution,
            ..EPConfig::default()
        }
    }
}
