#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::excessive_precision)]
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use poisson_ep::ep::Parameterization;
use poisson_ep::parallel::Execution;
use poisson_ep::problem::{Constraint, ProblemSpec};

use config::{Method, RunConfig};
use error::CliError;

#[derive(Parser)]
#[command(name = "poisson-ep", version, about = "EP inference for Poisson inverse problems with TV-type priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a problem bundle (forward map, data, ground truth) and write it out.
    Generate(RunArgs),
    /// Run the configured methods and write estimates, bands and metrics.
    Infer {
        #[command(flatten)]
        run: RunArgs,
        /// Use an existing bundle instead of generating one from the config.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Side-by-side metrics of two or more result directories.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
        /// Where to write comparison.csv and comparison.json; the table is printed either way.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check the site moment routines against the quadrature oracle.
    Selftest {
        #[arg(long, default_value_t = 500)]
        cases: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Natural,
    Moment,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConstraintArg {
    C2,
    C3,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

/// Flags override the config file, which overrides defaults.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replace the problem with a Phillips problem of this size.
    #[arg(long)]
    phillips: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    count_scale: Option<f64>,
    #[arg(long)]
    background: Option<f64>,
    #[arg(long, value_enum)]
    constraint: Option<ConstraintArg>,
    #[arg(long, value_enum)]
    parameterization: Option<ParamArg>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated subset of ep, map, laplace, mcmc.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Falls back to $EP_OUTPUT_DIR.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    map_max_iter: Option<usize>,
    #[arg(long)]
    mcmc_chain_length: Option<usize>,
    #[arg(long)]
    mcmc_burn_in: Option<usize>,
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
    /// Run the requested methods concurrently.
    #[arg(long)]
    parallel_methods: bool,
}

impl RunArgs {
    fn resolve(&self) -> Result<(RunConfig, PathBuf), CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
                RunConfig::from_json(&text)?
            }
            None => RunConfig::default(),
        };
        if let Some(n) = self.phillips {
            cfg.problem = ProblemSpec::Phillips { n };
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(alpha, count_scale, background, max_sweeps, tol, seed, map_max_iter, mcmc_chain_length, mcmc_burn_in);
        if let Some(c) = self.constraint {
            cfg.constraint = match c {
                ConstraintArg::C2 => Constraint::C2,
                ConstraintArg::C3 => Constraint::C3,
            };
        }
        if let Some(p) = self.parameterization {
            cfg.parameterization = match p {
                ParamArg::Natural => Parameterization::Natural,
                ParamArg::Moment => Parameterization::Moment,
            };
        }
        if let Some(e) = self.execution {
            cfg.execution = match e {
                ExecArg::Sequential => Execution::Sequential,
                ExecArg::Parallel => Execution::Parallel,
            };
        }
        if let Some(list) = &self.methods {
            cfg.methods = list.iter().map(|m| Method::parse(m)).collect::<Result<_, _>>()?;
        }
        if self.epsilon.is_some() {
            cfg.epsilon = self.epsilon;
        }
        if self.output_dir.is_some() {
            cfg.output_dir = self.output_dir.clone();
        }
        cfg.parallel_methods |= self.parallel_methods;
        cfg.validate()?;
        let dir = cfg.resolve_output_dir()?;
        Ok((cfg, dir))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => {
            let (cfg, dir) = args.resolve()?;
            let path = commands::generate(&cfg, &dir)?;
            println!("wrote {}", path.display());
        }
        Command::Infer { run, bundle } => {
            let (cfg, dir) = run.resolve()?;
            let out = commands::infer(&cfg, &dir, bundle.as_deref())?;
            println!("wrote {} files to {}", out.written.len(), dir.display());
            if !out.errors.is_empty() {
                let list: Vec<String> = out.errors.iter().map(|(m, e)| format!("{m}: {e}")).collect();
                return Err(CliError::Numerical(list.join("; ")));
            }
        }
        Command::Compare { dirs, output_dir } => {
            let rows = commands::compare(&dirs)?;
            let dir = output_dir.or_else(|| std::env::var_os(config::OUTPUT_DIR_ENV).map(PathBuf::from));
            if let Some(dir) = dir {
                commands::write_comparison(&rows, &dir)?;
            }
            print!("{}", commands::comparison_csv(&rows));
        }
        Command::Selftest { cases, seed } => {
            let s = commands::selftest(cases, seed);
            println!(
                "poisson: {} cases, worst error {:.2e}; laplace: {} cases, worst error {:.2e}",
                s.poisson_cases, s.worst_poisson, s.laplace_cases, s.worst_laplace
            );
            if !s.failures.is_empty() {
                for f in s.failures.iter().take(10) {
                    eprintln!("  {f}");
                }
                return Err(CliError::Numerical(format!("{} oracle mismatches", s.failures.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
