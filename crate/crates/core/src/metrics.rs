//! Reconstruction metrics, credible bands and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ep::ConvergenceReport;
use crate::problem::to_pgm;
use crate::special::std_normal_quantile;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("image smaller than the {0}x{0} window")]
    WindowTooLarge(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Json(#[from] serde_json::Error),
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(())
}

pub fn l2_error(x: &[f64], x_ref: &[f64]) -> Result<f64, MetricsError> {
    same_len(x, x_ref)?;
    Ok(crate::linalg::norm2(&crate::linalg::sub(x, x_ref)))
}

pub fn mse(x: &[f64], x_ref: &[f64]) -> Result<f64, MetricsError> {
    same_len(x, x_ref)?;
    if x.is_empty() {
        return Err(MetricsError::InvalidArgument("empty signal"));
    }
    Ok(x.iter().zip(x_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; an exact match gives `+inf`.
pub fn psnr(x: &[f64], x_ref: &[f64], peak: f64) -> Result<f64, MetricsError> {
    if !(peak > 0.0) {
        return Err(MetricsError::InvalidArgument("peak must be positive"));
    }
    let e = mse(x, x_ref)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / e).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimOptions {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl SsimOptions {
    pub fn with_range(dynamic_range: f64) -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range,
        }
    }
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = 0.5 * (window as f64 - 1.0);
    let mut w: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of a row-major image.
fn filter_valid(img: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (width - k + 1, height - k + 1);
    let mut rows = vec![0.0; ow * height];
    for r in 0..height {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|t| taps[t] * img[r * width + c + t]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|t| taps[t] * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over all windows that fit inside the image.
pub fn ssim(
    x: &[f64],
    x_ref: &[f64],
    width: usize,
    height: usize,
    opts: &SsimOptions,
) -> Result<f64, MetricsError> {
    same_len(x, x_ref)?;
    if x.len() != width * height {
        return Err(MetricsError::DimensionMismatch(x.len(), width * height));
    }
    if opts.window == 0 || width < opts.window || height < opts.window {
        return Err(MetricsError::WindowTooLarge(opts.window));
    }
    let taps = gaussian_taps(opts.window, opts.sigma);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
    let mx = filter_valid(x, width, height, &taps);
    let my = filter_valid(x_ref, width, height, &taps);
    let mxx = filter_valid(&prod(x, x), width, height, &taps);
    let myy = filter_valid(&prod(x_ref, x_ref), width, height, &taps);
    let mxy = filter_valid(&prod(x, x_ref), width, height, &taps);
    let c1 = (opts.k1 * opts.dynamic_range).powi(2);
    let c2 = (opts.k2 * opts.dynamic_range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let va = mxx[i] - a * a;
            let vb = myy[i] - b * b;
            let cov = mxy[i] - a * b;
            ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Per-coordinate Gaussian band `mean +- z sd` with `z` the two-sided quantile.
pub fn hpd_band(mean: &[f64], sd: &[f64], level: f64) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    same_len(mean, sd)?;
    if !(0.0..1.0).contains(&level) {
        return Err(MetricsError::InvalidArgument("level must lie in [0, 1)"));
    }
    let z = if level == 0.0 {
        0.0
    } else {
        std_normal_quantile(0.5 + 0.5 * level)
    };
    Ok(mean
        .iter()
        .zip(sd)
        .map(|(m, s)| (m - z * s, m + z * s))
        .unzip())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub l2_error: f64,
    /// `None` for an exact match.
    pub psnr: Option<f64>,
    /// Only for images at least one window wide.
    pub ssim: Option<f64>,
    pub peak_value: f64,
}

pub fn compute_metrics(
    x: &[f64],
    x_ref: &[f64],
    peak: f64,
    image_shape: Option<(usize, usize)>,
) -> Result<MetricsBundle, MetricsError> {
    let p = psnr(x, x_ref, peak)?;
    let s = match image_shape {
        Some((w, h)) if w >= 11 && h >= 11 => Some(ssim(x, x_ref, w, h, &SsimOptions::with_range(peak))?),
        _ => None,
    };
    Ok(MetricsBundle {
        l2_error: l2_error(x, x_ref)?,
        psnr: p.is_finite().then_some(p),
        ssim: s,
        peak_value: peak,
    })
}

/// Outcome of one method on one problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub estimate: Vec<f64>,
    pub band_lower: Option<Vec<f64>>,
    pub band_upper: Option<Vec<f64>>,
    pub metrics: MetricsBundle,
    pub convergence: Option<ConvergenceReport>,
    /// Method-specific scalars (acceptance rate, ridge, iterations...).
    pub extras: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub truth: Vec<f64>,
    pub image_shape: Option<(usize, usize)>,
    pub peak_value: f64,
    pub methods: BTreeMap<String, MethodResult>,
    pub errors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub peak_value: f64,
    pub methods: BTreeMap<String, MetricsBundle>,
    pub errors: BTreeMap<String, String>,
}

impl RunReport {
    pub fn metrics_file(&self) -> MetricsFile {
        MetricsFile {
            peak_value: self.peak_value,
            methods: self
                .methods
                .iter()
                .map(|(k, v)| (k.clone(), v.metrics.clone()))
                .collect(),
            errors: self.errors.clone(),
        }
    }

    /// Coordinates of the cross section: everything in 1D, the middle row in 2D.
    pub fn cross_section_indices(&self) -> Vec<usize> {
        match self.image_shape {
            Some((w, h)) => (0..w).map(|c| (h / 2) * w + c).collect(),
            None => (0..self.truth.len()).collect(),
        }
    }
}

fn fmt_num(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.10e}"),
        None => String::new(),
    }
}

/// `coordinate,truth,map,ep_mean,band_lower,band_upper`; the band is EP's.
pub fn cross_section_csv(report: &RunReport) -> String {
    let mut out = String::from("coordinate,truth,map,ep_mean,band_lower,band_upper\n");
    let map = report.methods.get("map");
    let ep = report.methods.get("ep");
    let pick = |m: Option<&MethodResult>, f: fn(&MethodResult) -> Option<&Vec<f64>>, i: usize| {
        m.and_then(f).and_then(|v| v.get(i).copied())
    };
    for (k, &i) in report.cross_section_indices().iter().enumerate() {
        let _ = writeln!(
            out,
            "{k},{},{},{},{},{}",
            fmt_num(report.truth.get(i).copied()),
            fmt_num(pick(map, |m| Some(&m.estimate), i)),
            fmt_num(pick(ep, |m| Some(&m.estimate), i)),
            fmt_num(pick(ep, |m| m.band_lower.as_ref(), i)),
            fmt_num(pick(ep, |m| m.band_upper.as_ref(), i)),
        );
    }
    out
}

/// `sweep,mu_delta,cov_delta,relative_change`.
pub fn convergence_csv(report: &ConvergenceReport) -> String {
    let mut out = String::from("sweep,mu_delta,cov_delta,relative_change\n");
    for k in 0..report.mu_deltas.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            k + 1,
            fmt_num(Some(report.mu_deltas[k])),
            fmt_num(report.cov_deltas.get(k).copied()),
            fmt_num(report.relative_changes.get(k).copied()),
        );
    }
    out
}

/// Writes `metrics.json`, `cross_section.csv`, `estimates.json`, one
/// `convergence_<method>.csv` per method with a report and, for images, one PGM
/// per estimate plus the truth. Identical reports give identical files.
pub fn emit_report(dir: &Path, report: &RunReport) -> Result<Vec<String>, MetricsError> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<(), MetricsError> {
        std::fs::write(dir.join(&name), body)?;
        written.push(name);
        Ok(())
    };
    put(
        "metrics.json".into(),
        serde_json::to_string_pretty(&report.metrics_file())?,
    )?;
    put("cross_section.csv".into(), cross_section_csv(report))?;
    put("estimates.json".into(), serde_json::to_string(report)?)?;
    for (name, m) in &report.methods {
        if let Some(c) = &m.convergence {
            put(format!("convergence_{name}.csv"), convergence_csv(c))?;
        }
        let mut csv = String::from("coordinate,estimate,band_lower,band_upper\n");
        for (i, v) in m.estimate.iter().enumerate() {
            let lo = m.band_lower.as_ref().and_then(|b| b.get(i).copied());
            let hi = m.band_upper.as_ref().and_then(|b| b.get(i).copied());
            let _ = writeln!(csv, "{i},{},{},{}", fmt_num(Some(*v)), fmt_num(lo), fmt_num(hi));
        }
        put(format!("mean_{name}.csv"), csv)?;
        if let Some((w, h)) = report.image_shape {
            put(format!("{name}.pgm"), to_pgm(w, h, &m.estimate, report.peak_value))?;
        }
    }
    if let Some((w, h)) = report.image_shape {
        put("truth.pgm".into(), to_pgm(w, h, &report.truth, report.peak_value))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn l2_examples() {
        assert_eq!(l2_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l2_error(&[3.0, 4.0], &[0.0, 0.0]).unwrap(), 5.0);
        assert!(l2_error(&[1.0], &[1.0, 2.0]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_vec(&mut rng, 500), random_vec(&mut rng, 500));
        let mut acc = 0.0;
        for i in 0..500 {
            acc += (a[i] - b[i]) * (a[i] - b[i]);
        }
        assert!((l2_error(&a, &b).unwrap() - acc.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        assert!(psnr(&[2.0], &[0.0], 2.0).unwrap().abs() < 1e-15);
        assert!((psnr(&[0.1, -0.1], &[0.0, 0.0], 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&[1.0], &[1.0], 1.0).unwrap(), f64::INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (random_vec(&mut rng, 64), random_vec(&mut rng, 64));
        let m: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / 64.0;
        assert!((psnr(&a, &b, 1.0).unwrap() - 10.0 * (1.0 / m).log10()).abs() < 1e-10);
    }

    /// Direct evaluation window by window with explicit 2D weights.
    fn ssim_reference(x: &[f64], y: &[f64], w: usize, h: usize, o: &SsimOptions) -> f64 {
        let k = o.window;
        let c = 0.5 * (k as f64 - 1.0);
        let mut wts = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
                wts[i * k + j] = (-d2 / (2.0 * o.sigma * o.sigma)).exp();
            }
        }
        let s: f64 = wts.iter().sum();
        wts.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = ((o.k1 * o.dynamic_range).powi(2), (o.k2 * o.dynamic_range).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for r0 in 0..=h - k {
            for c0 in 0..=w - k {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (r0 + i) * w + c0 + j;
                        mx += wts[i * k + j] * x[p];
                        my += wts[i * k + j] * y[p];
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let p = (r0 + i) * w + c0 + j;
                        vx += wts[i * k + j] * (x[p] - mx).powi(2);
                        vy += wts[i * k + j] * (y[p] - my).powi(2);
                        cxy += wts[i * k + j] * (x[p] - mx) * (y[p] - my);
                    }
                }
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2)
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_vec(&mut rng, 16 * 16);
        let opts = SsimOptions::with_range(1.0);
        assert!((ssim(&a, &a, 16, 16, &opts).unwrap() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = a.iter().map(|v| v + 5.0).collect();
        assert!(ssim(&shifted, &a, 16, 16, &opts).unwrap() < 1.0);
        let small = SsimOptions { window: 5, ..opts };
        let (x, y) = (random_vec(&mut rng, 64), random_vec(&mut rng, 64));
        let fast = ssim(&x, &y, 8, 8, &small).unwrap();
        let slow = ssim_reference(&x, &y, 8, 8, &small);
        assert!((fast - slow).abs() < 1e-10, "{fast} {slow}");
        assert!(matches!(ssim(&x, &y, 8, 8, &opts), Err(MetricsError::WindowTooLarge(11))));
    }

    #[test]
    fn hpd_examples() {
        let (lo, hi) = hpd_band(&[0.0], &[1.0], 0.95).unwrap();
        assert!((hi[0] - 1.959964).abs() < 1e-6 && (lo[0] + 1.959964).abs() < 1e-6);
        let (lo, hi) = hpd_band(&[3.0], &[2.0], 0.0).unwrap();
        assert_eq!((lo[0], hi[0]), (3.0, 3.0));
    }

    #[test]
    fn hpd_coverage() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mean, sd) = (1.5, 0.7);
        let (lo, hi) = hpd_band(&[mean], &[sd], 0.95).unwrap();
        let d = Normal::new(mean, sd).unwrap();
        let n = 100_000;
        let inside = (0..n)
            .filter(|_| {
                let v = d.sample(&mut rng);
                v >= lo[0] && v <= hi[0]
            })
            .count();
        let cov = inside as f64 / n as f64;
        assert!((0.94..=0.96).contains(&cov), "{cov}");
    }

    fn tiny_report() -> RunReport {
        let mut methods = BTreeMap::new();
        let truth = vec![1.0, 2.0, 3.0];
        let est = vec![1.1, 1.9, 3.2];
        methods.insert(
            "ep".to_string(),
            MethodResult {
                estimate: est.clone(),
                band_lower: Some(vec![0.9, 1.7, 3.0]),
                band_upper: Some(vec![1.3, 2.1, 3.4]),
                metrics: compute_metrics(&est, &truth, 3.0, None).unwrap(),
                convergence: Some(ConvergenceReport {
                    mu_deltas: vec![0.5, 0.0],
                    relative_changes: vec![1.0, 0.1],
                    ..Default::default()
                }),
                extras: BTreeMap::new(),
            },
        );
        RunReport {
            truth,
            image_shape: None,
            peak_value: 3.0,
            methods,
            errors: BTreeMap::new(),
        }
    }

    #[test]
    fn report_files() {
        let empty = tempfile::tempdir().unwrap();
        let files = emit_report(empty.path(), &RunReport::default()).unwrap();
        assert!(files.contains(&"metrics.json".to_string()));
        let csv = std::fs::read_to_string(empty.path().join("cross_section.csv")).unwrap();
        assert_eq!(csv, "coordinate,truth,map,ep_mean,band_lower,band_upper\n");

        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        emit_report(d1.path(), &tiny_report()).unwrap();
        emit_report(d2.path(), &tiny_report()).unwrap();
        for f in ["metrics.json", "cross_section.csv", "convergence_ep.csv", "mean_ep.csv"] {
            let a = std::fs::read(d1.path().join(f)).unwrap();
            let b = std::fs::read(d2.path().join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        let csv = std::fs::read_to_string(d1.path().join("cross_section.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert_eq!(
            csv.lines().nth(1).unwrap(),
            "0,1.0000000000e0,,1.1000000000e0,9.0000000000e-1,1.3000000000e0"
        );
        let json = std::fs::read_to_string(d1.path().join("metrics.json")).unwrap();
        let back: MetricsFile = serde_json::from_str(&json).unwrap();
        assert_eq!(back, tiny_report().metrics_file());
        let generic: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(generic["methods"]["ep"]["psnr"].is_number());
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_vec(&mut rng, 144), random_vec(&mut rng, 144));
            let o = SsimOptions::with_range(1.0);
            let s1 = ssim(&a, &b, 12, 12, &o).unwrap();
            let s2 = ssim(&b, &a, 12, 12, &o).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!(s1 <= 1.0);
        }

        #[test]
        fn psnr_decreases_with_error(e1 in 1e-3..1.0f64, factor in 1.01..10.0f64) {
            let r = [0.0; 4];
            let p1 = psnr(&[e1; 4], &r, 1.0).unwrap();
            let p2 = psnr(&[e1 * factor; 4], &r, 1.0).unwrap();
            prop_assert!(p2 < p1);
        }

        #[test]
        fn band_scales_with_sd(sd in 1e-3..10.0f64, k in 0.1..10.0f64) {
            let (l1, u1) = hpd_band(&[0.0], &[sd], 0.9).unwrap();
            let (l2, u2) = hpd_band(&[0.0], &[k * sd], 0.9).unwrap();
            prop_assert!(((u2[0] - l2[0]) - k * (u1[0] - l1[0])).abs() < 1e-12 * k * sd.max(1.0) * 10.0);
        }
    }
}
