//! Poisson inverse problems: forward maps, constraints, prior operators, data.
//!
//! A problem couples counts `y_i ~ Poisson(a_i^T x + r_i)` with a Laplace prior
//! `(alpha/2) exp(-alpha |L_i^T x|)` on the rows of a difference operator, and a
//! positivity constraint realized per count as a lower bound on `a_i^T x`.

use std::f64::consts::PI;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Matrix};
use crate::parallel::{map_range, Execution};

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("forward map has a negative entry at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize },
    #[error("negative Poisson rate {rate} at row {index}")]
    NegativeRate { index: usize, rate: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed bundle: {0}")]
    Format(#[from] serde_json::Error),
}

/// Feasible set making the likelihood well defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Constraint {
    /// `A x > 0`.
    C2,
    /// `A x + r > 0`.
    C3,
}

impl Constraint {
    /// Lower integration bound on `a_i^T x` for a count with background `r`.
    pub fn lower_bound(self, r: f64) -> f64 {
        match self {
            Constraint::C2 => 0.0,
            Constraint::C3 => -r,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InverseProblem {
    pub a: Matrix,
    pub r: Vec<f64>,
    pub y: Vec<u64>,
    pub l: Matrix,
    pub alpha: f64,
    pub constraint: Constraint,
}

impl InverseProblem {
    pub fn new(
        a: Matrix,
        r: Vec<f64>,
        y: Vec<u64>,
        l: Matrix,
        alpha: f64,
        constraint: Constraint,
    ) -> Result<Self, ProblemError> {
        let p = Self {
            a,
            r,
            y,
            l,
            alpha,
            constraint,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), ProblemError> {
        let (m1, n) = self.a.shape();
        if self.r.len() != m1 || self.y.len() != m1 {
            return Err(ProblemError::DimensionMismatch(format!(
                "A has {m1} rows, r has {}, y has {}",
                self.r.len(),
                self.y.len()
            )));
        }
        if self.l.rows() > 0 && self.l.cols() != n {
            return Err(ProblemError::DimensionMismatch(format!(
                "L has {} columns, A has {n}",
                self.l.cols()
            )));
        }
        for (i, row) in self.a.row_iter().enumerate() {
            if let Some(j) = row.iter().position(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(ProblemError::NegativeEntry { row: i, col: j });
            }
        }
        if self.r.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(ProblemError::InvalidParameter("background must be nonnegative"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(ProblemError::InvalidParameter("alpha must be positive"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    pub fn num_counts(&self) -> usize {
        self.a.rows()
    }

    pub fn num_prior_rows(&self) -> usize {
        self.l.rows()
    }

    pub fn lower_bound(&self, i: usize) -> f64 {
        self.constraint.lower_bound(self.r[i])
    }

    /// `x` lies in every `V_i^+`. All-zero rows (rays missing the image) only
    /// contribute a constant and impose nothing.
    pub fn is_feasible(&self, x: &[f64]) -> bool {
        self.a
            .row_iter()
            .enumerate()
            .all(|(i, row)| is_zero_row(row) || dot(row, x) > self.lower_bound(i))
    }

    /// Log posterior up to a constant (the `log y_i!` terms and all-zero rows are
    /// dropped), `-inf` outside the constraint set.
    pub fn log_posterior(&self, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, row) in self.a.row_iter().enumerate() {
            if is_zero_row(row) {
                continue;
            }
            let s = dot(row, x);
            if !(s > self.lower_bound(i)) {
                return f64::NEG_INFINITY;
            }
            let rate = s + self.r[i];
            if self.y[i] > 0 {
                total += self.y[i] as f64 * rate.ln();
            }
            total -= rate;
        }
        let log_half_alpha = (0.5 * self.alpha).ln();
        for row in self.l.row_iter() {
            total += log_half_alpha - self.alpha * dot(row, x).abs();
        }
        total
    }
}

fn is_zero_row(row: &[f64]) -> bool {
    row.iter().all(|&v| v == 0.0)
}

/// `x > 0` componentwise (the positivity set used by the MAP baseline).
pub fn in_c1(x: &[f64]) -> bool {
    x.iter().all(|&v| v > 0.0)
}

pub fn in_c2(a: &Matrix, x: &[f64]) -> bool {
    a.row_iter().all(|row| dot(row, x) > 0.0)
}

pub fn in_c3(a: &Matrix, r: &[f64], x: &[f64]) -> bool {
    a.row_iter().zip(r).all(|(row, &ri)| dot(row, x) + ri > 0.0)
}

/// Phillips kernel profile: `10 + 10 cos(pi s / 3)` on `[-3, 3]`, `10` elsewhere.
pub fn phillips_profile(s: f64) -> f64 {
    if s.abs() <= 3.0 {
        10.0 + 10.0 * (PI * s / 3.0).cos()
    } else {
        10.0
    }
}

/// Piecewise-constant Galerkin discretization on `[-6, 6]` with midpoint
/// collocation: `A[i][j] = w K(s_i, t_j)`, `w = 12/n`. Returns `(A, x_true)`.
pub fn build_phillips(n: usize) -> Result<(Matrix, Vec<f64>), ProblemError> {
    if n < 10 {
        return Err(ProblemError::InvalidParameter("Phillips grid needs n >= 10"));
    }
    let w = 12.0 / n as f64;
    let node = |i: usize| -6.0 + (i as f64 + 0.5) * w;
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = w * phillips_profile(node(i) - node(j));
        }
    }
    let x = (0..n).map(|j| phillips_profile(node(j))).collect();
    Ok((a, x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom2D {
    pub width: usize,
    pub height: usize,
    /// Row-major, row 0 at the top.
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SheppLogan,
    Bars,
    Disk,
}

// (intensity, semi-axis x, semi-axis y, center x, center y, rotation degrees)
const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

impl Phantom2D {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, ProblemError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(ProblemError::DimensionMismatch(format!(
                "{width}x{height} phantom with {} pixels",
                pixels.len()
            )));
        }
        if pixels.iter().any(|&v| !(v >= 0.0)) {
            return Err(ProblemError::InvalidParameter("phantom intensities must be nonnegative"));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Pixel-center coordinates in `[-1, 1]^2`, y pointing up.
    fn unit_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = -1.0 + (2.0 * col as f64 + 1.0) / self.width as f64;
        let y = 1.0 - (2.0 * row as f64 + 1.0) / self.height as f64;
        (x, y)
    }

    fn from_fn(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut p = Self::zeros(width, height);
        for row in 0..height {
            for col in 0..width {
                let (x, y) = p.unit_center(row, col);
                p.pixels[row * width + col] = f(x, y).max(0.0);
            }
        }
        p
    }

    /// Composite of ten ellipses with intensities in `[0, 1]`.
    pub fn shepp_logan(width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| {
            let mut v = 0.0;
            for [val, ax, ay, cx, cy, deg] in SHEPP_LOGAN {
                let (s, c) = deg.to_radians().sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / ax;
                let w = (-s * dx + c * dy) / ay;
                if u * u + w * w <= 1.0 {
                    v += val;
                }
            }
            v
        })
    }

    /// Warm disk crossed by vertical hot bars of decreasing width.
    pub fn bars(width: usize, height: usize) -> Self {
        let px = 2.0 / width as f64;
        Self::from_fn(width, height, |x, y| {
            if x * x + y * y > 0.81 {
                return 0.0;
            }
            let mut v = 0.25;
            if y.abs() <= 0.5 {
                // Bars 3, 2 and 1 pixels wide with equal gaps.
                let mut left = -0.7;
                for w in [3.0, 3.0, 2.0, 2.0, 1.0, 1.0] {
                    let right = left + w * px;
                    if x >= left && x < right {
                        v = 1.0;
                    }
                    left = right + w * px;
                }
            }
            v
        })
    }

    pub fn disk(width: usize, height: usize, radius: f64) -> Self {
        Self::from_fn(width, height, |x, y| {
            if x * x + y * y <= radius * radius {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn of_kind(kind: PhantomKind, width: usize, height: usize) -> Self {
        match kind {
            PhantomKind::SheppLogan => Self::shepp_logan(width, height),
            PhantomKind::Bars => Self::bars(width, height),
            PhantomKind::Disk => Self::disk(width, height, 0.8),
        }
    }
}

/// Parallel-beam geometry over a `width x height` grid of unit pixels centered at
/// the origin. Detectors are spread evenly over the grid diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomoGeometry {
    pub width: usize,
    pub height: usize,
    pub n_angles: usize,
    pub n_detectors: usize,
    pub pixel_size: f64,
}

impl TomoGeometry {
    pub fn new(width: usize, height: usize, n_angles: usize, n_detectors: usize) -> Self {
        Self {
            width,
            height,
            n_angles,
            n_detectors,
            pixel_size: 1.0,
        }
    }

    pub fn angle(&self, k: usize) -> f64 {
        PI * k as f64 / self.n_angles as f64
    }

    pub fn detector_spacing(&self) -> f64 {
        let w = self.width as f64 * self.pixel_size;
        let h = self.height as f64 * self.pixel_size;
        (w * w + h * h).sqrt() / self.n_detectors as f64
    }

    pub fn offset(&self, j: usize) -> f64 {
        (j as f64 - 0.5 * (self.n_detectors as f64 - 1.0)) * self.detector_spacing()
    }

    /// Ray `p(t) = offset * normal + t * direction` for row `(angle, detector)`.
    pub fn ray(&self, k: usize, j: usize) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.angle(k).sin_cos();
        let d = self.offset(j);
        ([d * c, d * s], [-s, c])
    }

    fn x_edge(&self, i: usize) -> f64 {
        (i as f64 - 0.5 * self.width as f64) * self.pixel_size
    }

    fn y_edge(&self, i: usize) -> f64 {
        (0.5 * self.height as f64 - i as f64) * self.pixel_size
    }

    /// Pixel-intersection lengths of one ray, Siddon style: collect the ray
    /// parameters of every grid-line crossing inside the box, then credit each
    /// segment to the pixel containing its midpoint.
    pub fn ray_weights(&self, k: usize, j: usize) -> Vec<(usize, f64)> {
        let (p, d) = self.ray(k, j);
        let (xmin, xmax) = (self.x_edge(0), self.x_edge(self.width));
        let (ymax, ymin) = (self.y_edge(0), self.y_edge(self.height));
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for (pc, dc, a, b) in [(p[0], d[0], xmin, xmax), (p[1], d[1], ymin, ymax)] {
            if dc.abs() < 1e-15 {
                if pc < a || pc > b {
                    return Vec::new();
                }
            } else {
                let (t0, t1) = ((a - pc) / dc, (b - pc) / dc);
                lo = lo.max(t0.min(t1));
                hi = hi.min(t0.max(t1));
            }
        }
        if !(hi > lo) {
            return Vec::new();
        }
        let mut ts = vec![lo, hi];
        if d[0].abs() >= 1e-15 {
            ts.extend((0..=self.width).map(|i| (self.x_edge(i) - p[0]) / d[0]));
        }
        if d[1].abs() >= 1e-15 {
            ts.extend((0..=self.height).map(|i| (self.y_edge(i) - p[1]) / d[1]));
        }
        ts.retain(|&t| t >= lo && t <= hi);
        ts.sort_by(|a, b| a.total_cmp(b));
        let mut out: Vec<(usize, f64)> = Vec::new();
        for w in ts.windows(2) {
            let len = w[1] - w[0];
            if len <= 1e-12 * self.pixel_size {
                continue;
            }
            let tm = 0.5 * (w[0] + w[1]);
            let x = p[0] + tm * d[0];
            let y = p[1] + tm * d[1];
            let col = ((x - xmin) / self.pixel_size).floor();
            let row = ((ymax - y) / self.pixel_size).floor();
            if col < 0.0 || row < 0.0 {
                continue;
            }
            let (col, row) = (col as usize, row as usize);
            if col >= self.width || row >= self.height {
                continue;
            }
            let idx = row * self.width + col;
            match out.last_mut() {
                Some((last, l)) if *last == idx => *l += len,
                _ => out.push((idx, len)),
            }
        }
        out
    }
}

/// Dense system matrix with rows ordered `(angle, detector)`.
pub fn build_tomo(
    phantom: &Phantom2D,
    n_angles: usize,
    n_detectors: usize,
) -> Result<Matrix, ProblemError> {
    if n_angles == 0 || n_detectors == 0 || phantom.pixels.is_empty() {
        return Err(ProblemError::InvalidParameter("empty tomography geometry"));
    }
    let geo = TomoGeometry::new(phantom.width, phantom.height, n_angles, n_detectors);
    Ok(build_tomo_geometry(&geo, Execution::default()))
}

pub fn build_tomo_geometry(geo: &TomoGeometry, exec: Execution) -> Matrix {
    let n = geo.width * geo.height;
    let m = geo.n_angles * geo.n_detectors;
    let rows = map_range(exec, m, |row| {
        let mut dense = vec![0.0; n];
        for (idx, len) in geo.ray_weights(row / geo.n_detectors, row % geo.n_detectors) {
            dense[idx] += len;
        }
        dense
    });
    Matrix::from_row_major(m, n, rows.concat()).expect("shape by construction")
}

/// First differences `x[i+1] - x[i]`, one row each.
pub fn build_diff_operator(n: usize) -> Result<Matrix, ProblemError> {
    if n < 2 {
        return Err(ProblemError::InvalidParameter("difference operator needs n >= 2"));
    }
    let mut l = Matrix::zeros(n - 1, n);
    for i in 0..n - 1 {
        l[(i, i)] = -1.0;
        l[(i, i + 1)] = 1.0;
    }
    Ok(l)
}

/// Anisotropic TV: horizontal differences (row by row), then vertical ones.
pub fn build_tv_operator(width: usize, height: usize) -> Result<Matrix, ProblemError> {
    if width < 2 || height < 2 {
        return Err(ProblemError::InvalidParameter("TV operator needs both sides >= 2"));
    }
    let n = width * height;
    let m = (width - 1) * height + width * (height - 1);
    let mut l = Matrix::zeros(m, n);
    let mut k = 0;
    for row in 0..height {
        for col in 0..width - 1 {
            l[(k, row * width + col)] = -1.0;
            l[(k, row * width + col + 1)] = 1.0;
            k += 1;
        }
    }
    for row in 0..height - 1 {
        for col in 0..width {
            l[(k, row * width + col)] = -1.0;
            l[(k, (row + 1) * width + col)] = 1.0;
            k += 1;
        }
    }
    Ok(l)
}

/// Independent draws `y_i ~ Poisson(a_i^T x + r_i)`.
pub fn sample_poisson_data(
    a: &Matrix,
    x_true: &[f64],
    r: &[f64],
    seed: u64,
) -> Result<Vec<u64>, ProblemError> {
    if a.cols() != x_true.len() || a.rows() != r.len() {
        return Err(ProblemError::DimensionMismatch("A, x and r disagree".into()));
    }
    let rates: Vec<f64> = a.matvec(x_true).iter().zip(r).map(|(s, r)| s + r).collect();
    if let Some(i) = rates.iter().position(|&v| !(v >= 0.0)) {
        return Err(ProblemError::NegativeRate {
            index: i,
            rate: rates[i],
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rates
        .iter()
        .map(|&rate| {
            if rate == 0.0 {
                0
            } else {
                let d = Poisson::new(rate).expect("positive finite rate");
                d.sample(&mut rng) as u64
            }
        })
        .collect())
}

/// `A / factor`, the low-count variant of a problem.
pub fn count_regime_scale(a: &Matrix, factor: f64) -> Result<Matrix, ProblemError> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(ProblemError::InvalidParameter("count scale must be positive"));
    }
    Ok(a.scale(1.0 / factor))
}

/// Declarative description of a benchmark problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Phillips {
        n: usize,
    },
    Tomo {
        width: usize,
        height: usize,
        phantom: PhantomKind,
        n_angles: usize,
        n_detectors: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSettings {
    pub spec: ProblemSpec,
    pub constraint: Constraint,
    pub alpha: f64,
    /// Forward map is divided by this factor before sampling (3 for low counts).
    pub count_scale: f64,
    /// Constant background added to every rate.
    pub background: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProblemBundle {
    pub settings: ProblemSettings,
    pub problem: InverseProblem,
    pub x_true: Vec<f64>,
    /// Image shape for 2D problems.
    pub image_shape: Option<(usize, usize)>,
}

impl ProblemBundle {
    pub fn build(settings: &ProblemSettings) -> Result<Self, ProblemError> {
        let (a, x_true, l, shape) = match settings.spec {
            ProblemSpec::Phillips { n } => {
                let (a, x) = build_phillips(n)?;
                (a, x, build_diff_operator(n)?, None)
            }
            ProblemSpec::Tomo {
                width,
                height,
                phantom,
                n_angles,
                n_detectors,
            } => {
                let ph = Phantom2D::of_kind(phantom, width, height);
                let a = build_tomo(&ph, n_angles, n_detectors)?;
                (a, ph.pixels, build_tv_operator(width, height)?, Some((width, height)))
            }
        };
        let a = count_regime_scale(&a, settings.count_scale)?;
        if !(settings.background >= 0.0) {
            return Err(ProblemError::InvalidParameter("background must be nonnegative"));
        }
        let r = vec![settings.background; a.rows()];
        let y = sample_poisson_data(&a, &x_true, &r, settings.seed)?;
        let problem = InverseProblem::new(a, r, y, l, settings.alpha, settings.constraint)?;
        Ok(Self {
            settings: settings.clone(),
            problem,
            x_true,
            image_shape: shape,
        })
    }

    pub fn to_json(&self) -> Result<String, ProblemError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self, ProblemError> {
        let b: Self = serde_json::from_str(s)?;
        b.problem.validate()?;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<(), ProblemError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Plain PGM (P2, maxval 65535). Values are mapped linearly from `[0, peak]`
/// and clipped.
pub fn to_pgm(width: usize, height: usize, values: &[f64], peak: f64) -> String {
    let mut out = format!("P2\n{width} {height}\n65535\n");
    for row in values.chunks(width).take(height) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let q = if peak > 0.0 { (v / peak).clamp(0.0, 1.0) } else { 0.0 };
                ((q * 65535.0).round() as u32).to_string()
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
