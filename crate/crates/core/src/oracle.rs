//! Brute-force reference moments by adaptive Gauss-Kronrod quadrature.
//!
//! Integrates the raw tilted densities directly, sharing no code with the site
//! evaluators. Used by the test suites and by the `selftest` command.

use thiserror::Error;

use crate::site_laplace::LaplaceSiteInput;
use crate::site_poisson::PoissonSiteInput;
use crate::tilted::TiltedMoments;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("quadrature did not reach tolerance after {0} subdivisions")]
    NoConvergence(usize),
    #[error("density has no mass")]
    ZeroMass,
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

const MAX_INTERVALS: usize = 4000;
const LOG_DROP: f64 = 60.0;

type Triple = [f64; 3];

struct Segment {
    a: f64,
    b: f64,
    value: Triple,
    err: Triple,
}

fn kronrod<F: Fn(f64) -> Triple>(f: &F, a: f64, b: f64) -> Segment {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = [0.0; 3];
    let mut g = [0.0; 3];
    for d in 0..3 {
        k[d] = WGK[7] * fc[d];
        g[d] = WG[3] * fc[d];
    }
    for j in 0..7 {
        let x = h * XGK[j];
        let f1 = f(c - x);
        let f2 = f(c + x);
        for d in 0..3 {
            let s = f1[d] + f2[d];
            k[d] += WGK[j] * s;
            if j % 2 == 1 {
                g[d] += WG[j / 2] * s;
            }
        }
    }
    let mut value = [0.0; 3];
    let mut err = [0.0; 3];
    for d in 0..3 {
        value[d] = k[d] * h;
        err[d] = ((k[d] - g[d]) * h).abs();
    }
    Segment { a, b, value, err }
}

/// Integrates a vector-valued integrand over consecutive breakpoints until every
/// component's error estimate falls below `tol[d]`.
fn integrate<F: Fn(f64) -> Triple>(f: &F, points: &[f64], tol: Triple) -> Result<Triple, OracleError> {
    let mut segs: Vec<Segment> = points
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| kronrod(f, w[0], w[1]))
        .collect();
    loop {
        let mut total = [0.0; 3];
        let mut err = [0.0; 3];
        for s in &segs {
            for d in 0..3 {
                total[d] += s.value[d];
                err[d] += s.err[d];
            }
        }
        if (0..3).all(|d| err[d] <= tol[d]) {
            return Ok(total);
        }
        if segs.len() >= MAX_INTERVALS {
            return Err(OracleError::NoConvergence(segs.len()));
        }
        // Split the segment with the largest tolerance-weighted error.
        let (idx, _) = segs
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (0..3).map(|d| s.err[d] / tol[d]).fold(0.0, f64::max)))
            .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        let s = segs.swap_remove(idx);
        let mid = 0.5 * (s.a + s.b);
        if !(mid > s.a && mid < s.b) {
            return Err(OracleError::NoConvergence(segs.len()));
        }
        segs.push(kronrod(f, s.a, mid));
        segs.push(kronrod(f, mid, s.b));
    }
}

/// Mean and variance of a log-concave density `exp(log_f)` on `(lower, inf)`.
///
/// `mode` must be the maximizer, `scale` a lower estimate of the width, and
/// `kinks` any points where `log_f` is not smooth. Also returns the log of the
/// total mass.
pub fn log_concave_moments<F: Fn(f64) -> f64>(
    log_f: F,
    lower: Option<f64>,
    mode: f64,
    scale: f64,
    kinks: &[f64],
) -> Result<(f64, f64, f64), OracleError> {
    let peak = log_f(mode);
    let reach = |dir: f64| -> f64 {
        let mut t = scale;
        while log_f(mode + dir * t) > peak - LOG_DROP {
            t *= 2.0;
        }
        t
    };
    let hi = mode + reach(1.0);
    let lo = match lower {
        Some(l) if mode - reach(-1.0) < l => l,
        _ => mode - reach(-1.0),
    };
    let mut points = vec![lo, mode, hi];
    points.extend(kinks.iter().copied().filter(|&k| k > lo && k < hi));
    points.sort_by(|a, b| a.total_cmp(b));
    points.dedup();
    let integrand = |s: f64| -> Triple {
        let w = (log_f(s) - peak).exp();
        let d = s - mode;
        [w, d * w, d * d * w]
    };
    // Coarse pass fixes the tolerance scale.
    let coarse = integrate(&integrand, &points, [f64::INFINITY; 3])?;
    if !(coarse[0] > 0.0) {
        return Err(OracleError::ZeroMass);
    }
    let width = (coarse[2] / coarse[0]).sqrt();
    // The Kronrod-Gauss difference overstates the error of converged panels, so
    // 1e-13 here still leaves the result close to full precision.
    let tol = [1e-13 * coarse[0], 1e-13 * coarse[0] * width, 1e-13 * coarse[2]];
    let [z, m1, m2] = integrate(&integrand, &points, tol)?;
    let shift = m1 / z;
    Ok((mode + shift, m2 / z - shift * shift, peak + z.ln()))
}

fn poisson_mode(input: &PoissonSiteInput) -> f64 {
    let c = input.m - input.sigma2;
    let r = input.r;
    let y = input.y as f64;
    // Positive root of (s - c)(s + r) = y sigma2, written to avoid cancellation.
    let p = c - r;
    let disc = ((c + r) * (c + r) + 4.0 * y * input.sigma2).sqrt();
    let root = if p >= 0.0 {
        0.5 * (p + disc)
    } else {
        let q = c * r + y * input.sigma2;
        if disc - p > 0.0 {
            2.0 * q / (disc - p)
        } else {
            0.5 * (p + disc)
        }
    };
    root.max(input.b)
}

/// Reference `(s_bar, C_s)` for a Poisson site.
pub fn poisson_moments(input: &PoissonSiteInput) -> Result<TiltedMoments, OracleError> {
    let c = input.m - input.sigma2;
    let (r, y, s2) = (input.r, input.y as f64, input.sigma2);
    let mode = poisson_mode(input);
    let u_mode = mode + r;
    // Log density relative to the mode, expanded in d = s - mode: both terms can
    // be huge in absolute value, and subtracting them afterwards loses digits.
    let log_f = |s: f64| {
        if s < input.b {
            return f64::NEG_INFINITY;
        }
        let d = s - mode;
        let lik = if y == 0.0 {
            0.0
        } else if s + r > 0.0 {
            y * (d / u_mode).ln_1p()
        } else {
            return f64::NEG_INFINITY;
        };
        lik - d * (d + 2.0 * (mode - c)) / (2.0 * s2)
    };
    let curv = 1.0 / s2 + if y > 0.0 { y / (u_mode * u_mode) } else { 0.0 };
    let scale = 1e-3 / curv.sqrt();
    let (mean, var, _) = log_concave_moments(log_f, Some(input.b), mode, scale, &[])?;
    Ok(TiltedMoments {
        s_bar: mean,
        c_s: var,
    })
}

/// Reference `(I_0, I_1, I_2)` with `I_j = int_b^inf (s + r)^j N(s | m - sigma2, sigma2) ds`.
pub fn poisson_base_integrals(input: &PoissonSiteInput) -> Result<[f64; 3], OracleError> {
    let c = input.m - input.sigma2;
    let s2 = input.sigma2;
    let norm = -(2.0 * std::f64::consts::PI * s2).ln() * 0.5;
    let log_f = |s: f64| norm - (s - c) * (s - c) / (2.0 * s2);
    let mode = c.max(input.b);
    let (mean, var, log_z) = log_concave_moments(log_f, Some(input.b), mode, 1e-3 * s2.sqrt(), &[])?;
    let z = log_z.exp();
    let u = mean + input.r;
    Ok([z, z * u, z * (var + u * u)])
}

/// Reference `(s_bar, C_s)` for a Laplace site.
pub fn laplace_moments(input: &LaplaceSiteInput) -> Result<TiltedMoments, OracleError> {
    let (mu, s2, alpha) = (input.mu, input.sigma2, input.alpha);
    let pull = alpha * s2;
    let mode = if mu > pull {
        mu - pull
    } else if mu < -pull {
        mu + pull
    } else {
        0.0
    };
    let log_f = |s: f64| {
        let d = s - mode;
        -alpha * (s.abs() - mode.abs()) - d * (d + 2.0 * (mode - mu)) / (2.0 * s2)
    };
    let scale = 1e-3 * s2.sqrt().min(1.0 / alpha);
    let (mean, var, _) = log_concave_moments(log_f, None, mode, scale, &[0.0])?;
    Ok(TiltedMoments {
        s_bar: mean,
        c_s: var,
    })
}
