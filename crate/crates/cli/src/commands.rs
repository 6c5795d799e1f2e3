use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use poisson_ep::baselines::{
    default_epsilon, laplace_approximation, laplace_variances, run_rwmh, solve_map, HessianVariant, MapResult,
    McmcConfig, SmoothedObjective,
};
use poisson_ep::ep::{posterior_summary, run_sweeps};
use poisson_ep::metrics::{compute_metrics, emit_report, hpd_band, MethodResult, MetricsFile, RunReport};
use poisson_ep::oracle;
use poisson_ep::problem::{ProblemBundle, ProblemError};
use poisson_ep::site_laplace::{laplace_site_moments, LaplaceSiteInput};
use poisson_ep::site_poisson::{poisson_site_moments, select_scheme, PoissonSiteInput, Scheme};

use crate::config::{Method, RunConfig};
use crate::error::CliError;

const HPD_LEVEL: f64 = 0.95;

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn problem_error(e: ProblemError) -> CliError {
    match e {
        ProblemError::Io(e) => CliError::Io(e),
        other => CliError::Validation(other.to_string()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Timestamps and wall-times live here and nowhere else, so every other output
/// is byte-identical across reruns.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub command: String,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_time_s: BTreeMap<String, f64>,
}

impl Metadata {
    fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: unix_now(),
            ..Self::default()
        }
    }

    fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.finished_unix = unix_now();
        write_json(&dir.join("metadata.json"), &self)
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)
}

pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<PathBuf, CliError> {
    let meta = Metadata::start("generate");
    echo_config(cfg, dir)?;
    let started = Instant::now();
    let bundle = ProblemBundle::build(&cfg.problem_settings()).map_err(problem_error)?;
    let path = dir.join("bundle.json");
    bundle.save(&path).map_err(problem_error)?;
    let mut truth = String::from("coordinate,truth\n");
    for (i, v) in bundle.x_true.iter().enumerate() {
        truth.push_str(&format!("{i},{v:.10e}\n"));
    }
    std::fs::write(dir.join("truth.csv"), truth)?;
    let mut meta = meta;
    meta.wall_time_s.insert("generate".into(), started.elapsed().as_secs_f64());
    meta.finish(dir)?;
    Ok(path)
}

/// Constant start at the data scale `sum(y) / sum(A)`; strictly inside every
/// constraint set since `A` is nonnegative.
fn constant_start(bundle: &ProblemBundle) -> Vec<f64> {
    let p = &bundle.problem;
    let total_a: f64 = p.a.as_slice().iter().sum();
    let total_y: f64 = p.y.iter().map(|&v| v as f64).sum();
    let level = if total_a > 0.0 && total_y > 0.0 { total_y / total_a } else { 1.0 };
    vec![level; p.dim()]
}

struct Context<'a> {
    cfg: &'a RunConfig,
    bundle: &'a ProblemBundle,
    peak: f64,
}

impl Context<'_> {
    fn epsilon(&self) -> f64 {
        self.cfg.epsilon.unwrap_or_else(|| default_epsilon(&self.bundle.problem))
    }

    fn result(&self, estimate: Vec<f64>, band: Option<(Vec<f64>, Vec<f64>)>) -> Result<MethodResult, String> {
        let metrics = compute_metrics(&estimate, &self.bundle.x_true, self.peak, self.bundle.image_shape)
            .map_err(|e| e.to_string())?;
        let (band_lower, band_upper) = band.unzip();
        Ok(MethodResult {
            estimate,
            band_lower,
            band_upper,
            metrics,
            convergence: None,
            extras: BTreeMap::new(),
        })
    }

    fn map(&self) -> Result<MapResult, String> {
        let obj = SmoothedObjective::new(&self.bundle.problem, self.epsilon()).map_err(|e| e.to_string())?;
        solve_map(&obj, &constant_start(self.bundle), self.cfg.map_max_iter).map_err(|e| e.to_string())
    }

    fn run(&self, method: Method, map: Option<&MapResult>) -> Result<(MethodResult, Option<MapResult>), String> {
        let problem = &self.bundle.problem;
        match method {
            Method::Ep => {
                let (state, report) = run_sweeps(problem, &self.cfg.ep_config()).map_err(|e| e.to_string())?;
                let summary = posterior_summary(&state, false).map_err(|e| e.to_string())?;
                let mut out = self.result(summary.mean, Some((summary.hpd_lower, summary.hpd_upper)))?;
                out.extras.insert("sweeps".into(), report.sweeps as f64);
                out.extras.insert("updates".into(), report.updates as f64);
                out.extras.insert("relative_change_last".into(), report.relative_change_last);
                let s = &report.skipped;
                let skipped = s.negative_cavity + s.quadrature + s.degenerate_variance + s.loss_of_positivity;
                out.extras.insert("skipped_updates".into(), skipped as f64);
                out.convergence = Some(report);
                Ok((out, None))
            }
            Method::Map => {
                let res = self.map()?;
                let mut out = self.result(res.x.clone(), None)?;
                out.extras.insert("iterations".into(), res.iterations as f64);
                out.extras.insert("converged".into(), f64::from(u8::from(res.converged)));
                out.extras.insert("objective".into(), res.value);
                out.extras.insert("epsilon".into(), self.epsilon());
                Ok((out, Some(res)))
            }
            Method::Laplace => {
                let owned;
                let map = match map {
                    Some(m) => m,
                    None => {
                        owned = self.map()?;
                        &owned
                    }
                };
                let obj = SmoothedObjective::new(problem, self.epsilon()).map_err(|e| e.to_string())?;
                let approx = laplace_approximation(&obj, &map.x, HessianVariant::Exact).map_err(|e| e.to_string())?;
                let sd: Vec<f64> = laplace_variances(&approx).iter().map(|v| v.max(0.0).sqrt()).collect();
                let band = hpd_band(&map.x, &sd, HPD_LEVEL).map_err(|e| e.to_string())?;
                let mut out = self.result(map.x.clone(), Some(band))?;
                out.extras.insert("ridge".into(), approx.ridge);
                out.extras.insert("epsilon".into(), self.epsilon());
                Ok((out, None))
            }
            Method::Mcmc => {
                let mc = run_rwmh(
                    problem,
                    &constant_start(self.bundle),
                    &McmcConfig {
                        chain_length: self.cfg.mcmc_chain_length,
                        burn_in: self.cfg.mcmc_burn_in,
                        seed: self.cfg.seed,
                        ..McmcConfig::default()
                    },
                )
                .map_err(|e| e.to_string())?;
                let sd: Vec<f64> = mc.variances.iter().map(|v| v.max(0.0).sqrt()).collect();
                let band = hpd_band(&mc.mean, &sd, HPD_LEVEL).map_err(|e| e.to_string())?;
                let mut out = self.result(mc.mean, Some(band))?;
                out.extras.insert("acceptance_rate".into(), mc.acceptance_rate);
                out.extras.insert("step_size".into(), mc.step_size);
                out.extras.insert("kept".into(), mc.kept as f64);
                Ok((out, None))
            }
        }
    }
}

type Timed = (Method, Result<MethodResult, String>, f64);

pub struct InferOutcome {
    pub written: Vec<String>,
    pub errors: BTreeMap<String, String>,
}

/// Runs every requested method; a failing method is recorded and the others
/// still run. Returns a numerical error after writing outputs if any failed.
pub fn infer(cfg: &RunConfig, dir: &Path, bundle_path: Option<&Path>) -> Result<InferOutcome, CliError> {
    let mut meta = Metadata::start("infer");
    echo_config(cfg, dir)?;
    let bundle = match bundle_path {
        Some(p) => ProblemBundle::load(p).map_err(problem_error)?,
        None => {
            let b = ProblemBundle::build(&cfg.problem_settings()).map_err(problem_error)?;
            b.save(&dir.join("bundle.json")).map_err(problem_error)?;
            b
        }
    };
    let peak = bundle.x_true.iter().copied().fold(0.0_f64, f64::max);
    let ctx = Context {
        cfg,
        bundle: &bundle,
        peak: if peak > 0.0 { peak } else { 1.0 },
    };
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();

    let timed: Vec<Timed> = if cfg.parallel_methods {
        std::thread::scope(|scope| {
            let handles: Vec<_> = methods
                .iter()
                .map(|&m| {
                    let ctx = &ctx;
                    scope.spawn(move || {
                        let t = Instant::now();
                        let r = ctx.run(m, None).map(|(out, _)| out);
                        (m, r, t.elapsed().as_secs_f64())
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("method thread panicked"))
                .collect()
        })
    } else {
        // Sorted order puts MAP before Laplace, which then reuses the optimum.
        let mut map_result = None;
        let mut out = Vec::new();
        for &m in &methods {
            let t = Instant::now();
            let r = ctx.run(m, map_result.as_ref()).map(|(res, map)| {
                if map.is_some() {
                    map_result = map;
                }
                res
            });
            out.push((m, r, t.elapsed().as_secs_f64()));
        }
        out
    };

    let mut report = RunReport {
        truth: bundle.x_true.clone(),
        image_shape: bundle.image_shape,
        peak_value: ctx.peak,
        ..RunReport::default()
    };
    for (m, r, secs) in timed {
        meta.wall_time_s.insert(m.name().into(), secs);
        match r {
            Ok(res) => {
                report.methods.insert(m.name().into(), res);
            }
            Err(e) => {
                report.errors.insert(m.name().into(), e);
            }
        }
    }
    let written = emit_report(dir, &report).map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    meta.finish(dir)?;
    Ok(InferOutcome {
        written,
        errors: report.errors,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub method: String,
    pub l2_error: f64,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub wall_time_s: Option<f64>,
    /// Differences against the same method in the first run.
    pub d_l2_error: Option<f64>,
    pub d_psnr: Option<f64>,
    pub d_ssim: Option<f64>,
}

fn load_run(dir: &Path) -> Result<(MetricsFile, Option<Metadata>), CliError> {
    let missing = |reason: String| CliError::MissingResult {
        path: dir.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(dir.join("metrics.json")).map_err(|e| missing(format!("metrics.json: {e}")))?;
    let metrics: MetricsFile = serde_json::from_str(&text).map_err(|e| missing(format!("metrics.json: {e}")))?;
    let meta = std::fs::read_to_string(dir.join("metadata.json"))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok());
    Ok((metrics, meta))
}

fn opt_diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

pub fn compare(dirs: &[PathBuf]) -> Result<Vec<ComparisonRow>, CliError> {
    if dirs.len() < 2 {
        return Err(CliError::Validation("compare needs at least two result directories".into()));
    }
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
    let first = &runs[0].0;
    let mut rows = Vec::new();
    for (dir, (metrics, meta)) in dirs.iter().zip(&runs) {
        for (name, m) in &metrics.methods {
            let base = first.methods.get(name);
            rows.push(ComparisonRow {
                run: dir.display().to_string(),
                method: name.clone(),
                l2_error: m.l2_error,
                psnr: m.psnr,
                ssim: m.ssim,
                wall_time_s: meta.as_ref().and_then(|x| x.wall_time_s.get(name).copied()),
                d_l2_error: base.map(|b| m.l2_error - b.l2_error),
                d_psnr: base.and_then(|b| opt_diff(m.psnr, b.psnr)),
                d_ssim: base.and_then(|b| opt_diff(m.ssim, b.ssim)),
            });
        }
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let f = |v: Option<f64>| v.map(|v| format!("{v:.10e}")).unwrap_or_default();
    let mut out = String::from("run,method,l2_error,psnr,ssim,wall_time_s,d_l2_error,d_psnr,d_ssim\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.run,
            r.method,
            f(Some(r.l2_error)),
            f(r.psnr),
            f(r.ssim),
            f(r.wall_time_s),
            f(r.d_l2_error),
            f(r.d_psnr),
            f(r.d_ssim)
        ));
    }
    out
}

pub fn write_comparison(rows: &[ComparisonRow], dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("comparison.csv"), comparison_csv(rows))?;
    write_json(&dir.join("comparison.json"), &json!({ "rows": rows }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SelftestSummary {
    pub poisson_cases: usize,
    pub laplace_cases: usize,
    pub worst_poisson: f64,
    pub worst_laplace: f64,
    pub failures: Vec<String>,
}

fn scaled_errors(got_mean: f64, got_var: f64, want_mean: f64, want_var: f64) -> f64 {
    let scale = want_mean.abs().max(want_var.sqrt());
    ((got_mean - want_mean).abs() / scale).max(((got_var - want_var) / want_var).abs())
}

/// Random site inputs against the adaptive quadrature oracle.
pub fn selftest(cases: usize, seed: u64) -> SelftestSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SelftestSummary {
        poisson_cases: cases,
        laplace_cases: cases,
        ..SelftestSummary::default()
    };
    for _ in 0..cases {
        let m = rng.gen_range(-20.0..20.0);
        let s2 = 10f64.powf(rng.gen_range(-4.0..2.0));
        let y = rng.gen_range(0..=300u64);
        let r = [0.0, 0.1, 1.0][rng.gen_range(0..3)];
        let b = if rng.gen::<bool>() { 0.0 } else { -r };
        let label = format!("poisson(m={m}, sigma2={s2}, y={y}, r={r}, b={b})");
        let Ok(input) = PoissonSiteInput::new(m, s2, y, r, b) else {
            s.failures.push(format!("{label}: rejected"));
            continue;
        };
        let tol = if select_scheme(&input) == Scheme::Scaled { 1e-5 } else { 1e-7 };
        match (poisson_site_moments(&input), oracle::poisson_moments(&input)) {
            (Ok(g), Ok(w)) => {
                let e = scaled_errors(g.s_bar, g.c_s, w.s_bar, w.c_s);
                s.worst_poisson = s.worst_poisson.max(e);
                if !(e <= tol) {
                    s.failures.push(format!("{label}: error {e:.2e}"));
                }
            }
            (g, w) => s.failures.push(format!("{label}: site {:?}, oracle {:?}", g.err(), w.err())),
        }
    }
    for _ in 0..cases {
        let mu = rng.gen_range(-50.0..50.0);
        let s2 = 10f64.powf(rng.gen_range(-4.0..4.0));
        let alpha = 10f64.powf(rng.gen_range(-3.0..3.0));
        let label = format!("laplace(mu={mu}, sigma2={s2}, alpha={alpha})");
        let Ok(input) = LaplaceSiteInput::new(mu, s2, alpha) else {
            s.failures.push(format!("{label}: rejected"));
            continue;
        };
        match (laplace_site_moments(&input), oracle::laplace_moments(&input)) {
            (Ok(g), Ok(w)) => {
                let e = scaled_errors(g.s_bar, g.c_s, w.s_bar, w.c_s);
                s.worst_laplace = s.worst_laplace.max(e);
                if !(e <= 1e-6) {
                    s.failures.push(format!("{label}: error {e:.2e}"));
                }
            }
            (g, w) => s.failures.push(format!("{label}: site {:?}, oracle {:?}", g.err(), w.err())),
        }
    }
    s
}
