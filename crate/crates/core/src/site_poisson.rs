//! Tilted moments of a Poisson likelihood site
//! `t(s) = (s + r)^y e^{-(s + r)}` on `s > b` against a Gaussian cavity `N(m, sigma2)`.
//!
//! All paths work with `I_y = int_b^inf (s + r)^y N(s | m - sigma2, sigma2) ds`,
//! so that `s_bar = I_{y+1}/I_y - r` and `C_s = I_{y+2}/I_y - (I_{y+1}/I_y)^2`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::{erf, erfc, erfcx};
use crate::tilted::{forward_is_stable, power_ratios, RatioError, TiltedMoments};

/// Counts at or below this use the forward recursion on absolute integrals.
pub const Y_SWITCH: u64 = 30;
/// Below this standardized shift the mass under the bound `b = 0` is below
/// `1e-19` of the total, so the bound is interchangeable with `b = -r`.
const NEGLIGIBLE_TRUNCATION_SHIFT: f64 = -9.0;
/// Largest intermediate tolerated by the forward recursion.
const RECURSION_LIMIT: f64 = 1e290;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoissonError {
    #[error("invalid Poisson site input: {0}")]
    InvalidInput(&'static str),
    #[error("base integral I0 underflowed to zero (eta = {eta})")]
    UnderflowDetected { eta: f64 },
    #[error("recursion exceeded the overflow limit at count {y}")]
    OverflowDetected { y: u64 },
    #[error("ratio sequence became nonpositive at index {index}")]
    NonpositiveRatio { index: usize },
    #[error("ratio path requires r = 0 or b = -r")]
    OutsideRatioValidity,
    #[error("base integrals are normalized; the recursion needs absolute values")]
    NormalizedBase,
    #[error("every quadrature path failed")]
    QuadratureFailure,
}

impl From<RatioError> for PoissonError {
    fn from(e: RatioError) -> Self {
        match e {
            RatioError::NonpositiveRatio { index } => PoissonError::NonpositiveRatio { index },
            RatioError::InvalidShift(_) => PoissonError::InvalidInput("non-finite shift"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonSiteInput {
    /// Cavity marginal mean.
    pub m: f64,
    /// Cavity marginal variance.
    pub sigma2: f64,
    /// Observed count.
    pub y: u64,
    /// Background.
    pub r: f64,
    /// Lower integration bound, 0 or -r.
    pub b: f64,
}

impl PoissonSiteInput {
    pub fn new(m: f64, sigma2: f64, y: u64, r: f64, b: f64) -> Result<Self, PoissonError> {
        let input = Self { m, sigma2, y, r, b };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<(), PoissonError> {
        if !self.m.is_finite() {
            return Err(PoissonError::InvalidInput("m must be finite"));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(PoissonError::InvalidInput("sigma2 must be positive and finite"));
        }
        if !(self.r >= 0.0) || !self.r.is_finite() {
            return Err(PoissonError::InvalidInput("r must be nonnegative"));
        }
        if self.b != 0.0 && self.b != -self.r {
            return Err(PoissonError::InvalidInput("b must be 0 or -r"));
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// `(sigma2 - m + b) / sqrt(2 sigma2)`
    pub fn eta(&self) -> f64 {
        (self.sigma2 - self.m + self.b) / (2.0 * self.sigma2).sqrt()
    }

    /// `m - sigma2 + b + 2r`
    pub fn c1(&self) -> f64 {
        self.m - self.sigma2 + self.b + 2.0 * self.r
    }

    /// `m - sigma2 + r`
    pub fn c2(&self) -> f64 {
        self.m - self.sigma2 + self.r
    }

    /// Whether the ratio sequence applies: the integrand's power base vanishes at the bound.
    pub fn ratio_path_valid(&self) -> bool {
        self.r == 0.0 || self.b == -self.r
    }

    /// Standardized shift of `u = s + r` measured from the bound `u = b + r`.
    fn shift_u(&self) -> f64 {
        -self.c2() / self.sigma()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    /// Error function form, `eta < 5`.
    Direct = 1,
    /// Complementary error function form, `5 <= eta <= 26`.
    Complement = 2,
    /// `I0`-normalized form through erfcx, `eta > 26`.
    Scaled = 3,
}

impl Scheme {
    pub fn id(self) -> u8 {
        self as u8
    }
}

pub fn select_scheme(input: &PoissonSiteInput) -> Scheme {
    let eta = input.eta();
    if eta < 5.0 {
        Scheme::Direct
    } else if eta <= 26.0 {
        Scheme::Complement
    } else {
        Scheme::Scaled
    }
}

/// `I0, I1, I2`, or `1, I1/I0, I2/I0` when `normalized`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseIntegrals {
    pub scheme: Scheme,
    pub values: [f64; 3],
    pub normalized: bool,
}

/// `1 - erf(eta)` as scheme 1 prescribes; the complement is taken directly once
/// the subtraction would cancel.
fn one_minus_erf(eta: f64) -> f64 {
    if eta < 0.5 {
        1.0 - erf(eta)
    } else {
        erfc(eta)
    }
}

pub fn base_integrals(input: &PoissonSiteInput) -> Result<BaseIntegrals, PoissonError> {
    input.validate()?;
    let scheme = select_scheme(input);
    let eta = input.eta();
    let (c1, c2, s2) = (input.c1(), input.c2(), input.sigma2);
    if scheme == Scheme::Scaled {
        let k = (2.0 * s2 / PI).sqrt() / erfcx(eta);
        return Ok(BaseIntegrals {
            scheme,
            values: [1.0, k + c2, k * c1 + c2 * c2 + s2],
            normalized: true,
        });
    }
    let tail = match scheme {
        Scheme::Direct => one_minus_erf(eta),
        _ => erfc(eta),
    };
    if tail == 0.0 {
        return Err(PoissonError::UnderflowDetected { eta });
    }
    let dens = (s2 / (2.0 * PI)).sqrt() * (-eta * eta).exp();
    Ok(BaseIntegrals {
        scheme,
        values: [
            0.5 * tail,
            dens + 0.5 * c2 * tail,
            dens * c1 + 0.5 * (c2 * c2 + s2) * tail,
        ],
        normalized: false,
    })
}

/// Forward recursion from the base integrals to `(I_y, I_{y+1}, I_{y+2})`.
#[allow(non_snake_case)]
pub fn recursive_I(input: &PoissonSiteInput, base: &BaseIntegrals) -> Result<[f64; 3], PoissonError> {
    input.validate()?;
    if base.normalized {
        return Err(PoissonError::NormalizedBase);
    }
    let y = input.y;
    if y == 0 {
        return Ok(base.values);
    }
    let c2 = input.c2();
    let s2 = input.sigma2;
    let eta = input.eta();
    // sigma2 * f(b) where f is the shifted Gaussian density.
    let boundary = (s2 / (2.0 * PI)).sqrt() * (-eta * eta).exp();
    let base_pow = input.b + input.r;
    let [mut a, mut b, mut c] = base.values;
    for k in 3..=(y + 2) {
        let boundary_term = if base_pow == 0.0 {
            0.0
        } else {
            boundary * base_pow.powf((k - 1) as f64)
        };
        let next = c2 * c + s2 * (k - 1) as f64 * b + boundary_term;
        a = b;
        b = c;
        c = next;
        if !(next.abs() <= RECURSION_LIMIT) {
            return Err(PoissonError::OverflowDetected { y: k });
        }
    }
    Ok([a, b, c])
}

/// `I_{y+1}/I_y` and `I_{y+2}/I_y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioPair {
    pub ratio_yp1: f64,
    pub ratio_yp2: f64,
}

/// Ratio sequence `L_k = k I_{k-1} / I_k`, from which both moments follow.
///
/// Seeded from the base integrals and evolved forward by
/// `L_k = k / (c2 + sigma2 L_{k-1})` while that is stable; otherwise the same
/// sequence is taken from the backward (minimal-solution) recurrence.
pub fn ratio_l(input: &PoissonSiteInput) -> Result<RatioPair, PoissonError> {
    Ok(ratio_state(input)?.pair)
}

struct RatioState {
    pair: RatioPair,
    /// `I_{y+2}/I_y - (I_{y+1}/I_y)^2` without the subtraction.
    variance: f64,
}

fn ratio_state(input: &PoissonSiteInput) -> Result<RatioState, PoissonError> {
    input.validate()?;
    if !input.ratio_path_valid() {
        return Err(PoissonError::OutsideRatioValidity);
    }
    let y = input.y as usize;
    let kmax = y + 2;
    let sigma = input.sigma();
    let s2 = input.sigma2;
    let z = input.shift_u();
    let mut l = vec![0.0; kmax + 1];
    let variance;
    if forward_is_stable(z, kmax) {
        let base = base_integrals(input)?;
        let [i0, i1, _] = base.values;
        let c2 = input.c2();
        l[1] = i0 / i1;
        for k in 2..=kmax {
            l[k] = k as f64 / (c2 + s2 * l[k - 1]);
        }
        // rho_k = I_{k+1}/I_k = c2 + sigma2 L_k for k >= 1; rho_0 carries the boundary term.
        let rho = |k: usize| if k == 0 { i1 / i0 } else { c2 + s2 * l[k] };
        variance = if y == 0 {
            // rho_1 - rho_0 = sigma2 L_1 - (rho_0 - c2), the last term being the boundary part.
            let boundary_part = sigma * crate::special::inverse_mills(z);
            rho(0) * (s2 * l[1] - boundary_part)
        } else {
            // dL_k = L_k - L_{k-1} obeys
            // dL_k = (rho_{k-2} - (k-1) sigma2 dL_{k-1}) / (rho_{k-1} rho_{k-2}), k >= 3,
            // which contracts when the forward map is stable.
            let mut dl = l[2] - l[1];
            for k in 3..=y + 1 {
                dl = (rho(k - 2) - (k - 1) as f64 * s2 * dl) / (rho(k - 1) * rho(k - 2));
            }
            rho(y) * s2 * dl
        };
    } else {
        let r = power_ratios(z, kmax - 1)?;
        for k in 1..=kmax {
            l[k] = k as f64 / (sigma * r[k - 1]);
        }
        variance = s2 * r[y] * (r[y + 1] - r[y]);
    }
    if let Some(i) = l[1..].iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(PoissonError::NonpositiveRatio { index: i + 1 });
    }
    let (y1, y2) = ((y + 1) as f64, (y + 2) as f64);
    let (l1, l2) = (l[y + 1], l[y + 2]);
    Ok(RatioState {
        pair: RatioPair {
            ratio_yp1: y1 / l1,
            ratio_yp2: (y1.ln() + y2.ln() - l1.ln() - l2.ln()).exp(),
        },
        variance,
    })
}

fn moments_from_ratios(q1: f64, q2: f64, r: f64) -> TiltedMoments {
    TiltedMoments {
        s_bar: q1 - r,
        c_s: q2 - q1 * q1,
    }
}

/// Binomial route for `b = 0`, `r > 0`: expands `(s + r)^k` and uses the
/// one-sided power moments of `s` in log space.
fn binomial_moments(input: &PoissonSiteInput) -> Result<TiltedMoments, PoissonError> {
    let y = input.y as usize;
    let sigma = input.sigma();
    let z = -(input.m - input.sigma2) / sigma;
    let ratios = power_ratios(z, y + 1)?;
    // log(sigma^k J_k / J_0)
    let mut log_moment = Vec::with_capacity(y + 3);
    log_moment.push(0.0);
    for (k, rk) in ratios.iter().enumerate() {
        log_moment.push(log_moment[k] + (sigma * rk).ln());
    }
    let ln_r = input.r.ln();
    let log_sum = |n: usize| -> f64 {
        let mut log_binom = 0.0;
        let terms: Vec<f64> = (0..=n)
            .map(|k| {
                if k > 0 {
                    log_binom += ((n - k + 1) as f64).ln() - (k as f64).ln();
                }
                log_binom + (n - k) as f64 * ln_r + log_moment[k]
            })
            .collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    };
    let (l0, l1, l2) = (log_sum(y), log_sum(y + 1), log_sum(y + 2));
    let q1 = (l1 - l0).exp();
    let q2 = (l2 - l0).exp();
    Ok(moments_from_ratios(q1, q2, input.r))
}

fn recursion_moments(input: &PoissonSiteInput) -> Result<TiltedMoments, PoissonError> {
    let base = base_integrals(input)?;
    let [iy, iy1, iy2] = recursive_I(input, &base)?;
    if !(iy > 0.0) {
        return Err(PoissonError::UnderflowDetected { eta: input.eta() });
    }
    Ok(moments_from_ratios(iy1 / iy, iy2 / iy, input.r))
}

fn ratio_moments(input: &PoissonSiteInput) -> Result<TiltedMoments, PoissonError> {
    let st = ratio_state(input)?;
    Ok(TiltedMoments {
        s_bar: st.pair.ratio_yp1 - input.r,
        c_s: st.variance,
    })
}

/// The path `poisson_site_moments` takes for a given input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoissonPath {
    Recursion,
    Ratio,
    /// Ratio path with the bound moved from 0 to -r (mass below 0 negligible).
    RatioShiftedBound,
    Binomial,
}

pub fn choose_path(input: &PoissonSiteInput) -> PoissonPath {
    let scheme = select_scheme(input);
    if scheme != Scheme::Scaled
        && input.y <= Y_SWITCH
        && forward_is_stable(input.shift_u(), input.y as usize + 2)
    {
        return PoissonPath::Recursion;
    }
    if input.ratio_path_valid() {
        PoissonPath::Ratio
    } else if -(input.m - input.sigma2) / input.sigma() <= NEGLIGIBLE_TRUNCATION_SHIFT {
        PoissonPath::RatioShiftedBound
    } else {
        PoissonPath::Binomial
    }
}

fn run_path(input: &PoissonSiteInput, path: PoissonPath) -> Result<TiltedMoments, PoissonError> {
    match path {
        PoissonPath::Recursion => recursion_moments(input),
        PoissonPath::Ratio => ratio_moments(input),
        PoissonPath::RatioShiftedBound => {
            let shifted = PoissonSiteInput { b: -input.r, ..*input };
            ratio_moments(&shifted)
        }
        PoissonPath::Binomial => binomial_moments(input),
    }
}

pub fn poisson_site_moments(input: &PoissonSiteInput) -> Result<TiltedMoments, PoissonError> {
    input.validate()?;
    let first = choose_path(input);
    let fallbacks: &[PoissonPath] = if input.ratio_path_valid() {
        &[PoissonPath::Ratio]
    } else {
        &[PoissonPath::Binomial]
    };
    for &path in std::iter::once(&first).chain(fallbacks) {
        if let Ok(mom) = run_path(input, path) {
            if mom.is_valid() {
                return Ok(mom);
            }
        }
    }
    Err(PoissonError::QuadratureFailure)
}
