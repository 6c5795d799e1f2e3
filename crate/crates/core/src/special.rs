//! Scalar special functions used by the site quadratures.
//!
//! `erf`, `erfc` and `erfcx` follow the fdlibm rational approximations. The
//! scaled complement reuses the `[1.25, 28)` fit directly so that no `exp(x^2)`
//! factor is ever formed there.

use std::f64::consts::{FRAC_2_SQRT_PI, PI, SQRT_2};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecialError {
    #[error("tail expansion requested at eta = {eta}, below the validity threshold {min_eta}")]
    EtaBelowValidity { eta: f64, min_eta: f64 },
    #[error("argument {0} outside the domain of log1p")]
    DomainError(f64),
    #[error("invalid tail series configuration: {0}")]
    InvalidConfig(&'static str),
}

/// 1/sqrt(2*pi)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
/// sqrt(pi/2)
const SQRT_PI_OVER_2: f64 = 1.253_314_137_315_500_3;
/// 1/sqrt(pi)
const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

const ERX: f64 = 8.45062911510467529297e-01;
const EFX8: f64 = 1.02703333676410069053e+00;
const PP0: f64 = 1.28379167095512558561e-01;
const PP1: f64 = -3.25042107247001499370e-01;
const PP2: f64 = -2.84817495755985104766e-02;
const PP3: f64 = -5.77027029648944159157e-03;
const PP4: f64 = -2.37630166566501626084e-05;
const QQ1: f64 = 3.97917223959155352819e-01;
const QQ2: f64 = 6.50222499887672944485e-02;
const QQ3: f64 = 5.08130628187576562776e-03;
const QQ4: f64 = 1.32494738004321644526e-04;
const QQ5: f64 = -3.96022827877536812320e-06;
// erf(1+s) = ERX + P/Q, |s| < 0.25
const PA0: f64 = -2.36211856075265944077e-03;
const PA1: f64 = 4.14856118683748331666e-01;
const PA2: f64 = -3.72207876035701323847e-01;
const PA3: f64 = 3.18346619901161753674e-01;
const PA4: f64 = -1.10894694282396677476e-01;
const PA5: f64 = 3.54783043256182359371e-02;
const PA6: f64 = -2.16637559486879084300e-03;
const QA1: f64 = 1.06420880400844228286e-01;
const QA2: f64 = 5.40397917702171048937e-01;
const QA3: f64 = 7.18286544141962662868e-02;
const QA4: f64 = 1.26171219808761642112e-01;
const QA5: f64 = 1.36370839120290507362e-02;
const QA6: f64 = 1.19844998467991074170e-02;
// erfc(x) = exp(-x^2 - 0.5625 + R/S)/x, 1.25 <= x < 1/0.35
const RA0: f64 = -9.86494403484714822705e-03;
const RA1: f64 = -6.93858572707181764372e-01;
const RA2: f64 = -1.05586262253232909814e+01;
const RA3: f64 = -6.23753324503260060396e+01;
const RA4: f64 = -1.62396669462573470355e+02;
const RA5: f64 = -1.84605092906711035994e+02;
const RA6: f64 = -8.12874355063065934246e+01;
const RA7: f64 = -9.81432934416914548592e+00;
const SA1: f64 = 1.96512716674392571292e+01;
const SA2: f64 = 1.37657754143519042600e+02;
const SA3: f64 = 4.34565877475229228821e+02;
const SA4: f64 = 6.45387271733267880336e+02;
const SA5: f64 = 4.29008140027567833386e+02;
const SA6: f64 = 1.08635005541779435134e+02;
const SA7: f64 = 6.57024977031928170135e+00;
const SA8: f64 = -6.04244152148580987438e-02;
// 1/0.35 <= x < 28
const RB0: f64 = -9.86494292470009928597e-03;
const RB1: f64 = -7.99283237680523006574e-01;
const RB2: f64 = -1.77579549177547519889e+01;
const RB3: f64 = -1.60636384855821916062e+02;
const RB4: f64 = -6.37566443368389627722e+02;
const RB5: f64 = -1.02509513161107724954e+03;
const RB6: f64 = -4.83519191608651397019e+02;
const SB1: f64 = 3.03380607434824582924e+01;
const SB2: f64 = 3.25792512996573918826e+02;
const SB3: f64 = 1.53672958608443695994e+03;
const SB4: f64 = 3.19985821950859553908e+03;
const SB5: f64 = 2.55305040643316442583e+03;
const SB6: f64 = 4.74528541206955367215e+02;
const SB7: f64 = -2.24409524465858183362e+01;

/// erf(x)/x - 1 on |x| < 0.84375.
fn small_ratio(x: f64) -> f64 {
    let z = x * x;
    let r = PP0 + z * (PP1 + z * (PP2 + z * (PP3 + z * PP4)));
    let s = 1.0 + z * (QQ1 + z * (QQ2 + z * (QQ3 + z * (QQ4 + z * QQ5))));
    r / s
}

/// erfc(x) for 0.84375 <= x < 1.25.
fn erfc_near_one(x: f64) -> f64 {
    let s = x - 1.0;
    let p = PA0 + s * (PA1 + s * (PA2 + s * (PA3 + s * (PA4 + s * (PA5 + s * PA6)))));
    let q = 1.0 + s * (QA1 + s * (QA2 + s * (QA3 + s * (QA4 + s * (QA5 + s * QA6)))));
    1.0 - ERX - p / q
}

/// The exponent correction -0.5625 + R/S for 1.25 <= x < 28.
fn tail_exponent(x: f64) -> f64 {
    let s = 1.0 / (x * x);
    let (r, big_s) = if x < 1.0 / 0.35 {
        (
            RA0 + s * (RA1 + s * (RA2 + s * (RA3 + s * (RA4 + s * (RA5 + s * (RA6 + s * RA7)))))),
            1.0 + s
                * (SA1
                    + s * (SA2 + s * (SA3 + s * (SA4 + s * (SA5 + s * (SA6 + s * (SA7 + s * SA8))))))),
        )
    } else {
        (
            RB0 + s * (RB1 + s * (RB2 + s * (RB3 + s * (RB4 + s * (RB5 + s * RB6))))),
            1.0 + s * (SB1 + s * (SB2 + s * (SB3 + s * (SB4 + s * (SB5 + s * (SB6 + s * SB7)))))),
        )
    };
    -0.5625 + r / big_s
}

/// erfc(x) for x >= 1.25, split as in fdlibm so the exponent keeps full precision.
fn erfc_tail(x: f64) -> f64 {
    if x >= 28.0 {
        // exp(-784) is already subnormal; use the asymptotic form until it flushes.
        return (-x * x).exp() * erfcx_asymptotic(x);
    }
    let z = f64::from_bits(x.to_bits() & 0xffff_ffff_0000_0000);
    (-z * z).exp() * ((z - x) * (z + x) + tail_exponent(x)).exp() / x
}

/// Asymptotic expansion of erfcx for x >= 28.
fn erfcx_asymptotic(x: f64) -> f64 {
    let inv = 1.0 / x;
    let q = 0.5 * inv * inv;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 1.0;
    while n < 40.0 {
        term *= -(2.0 * n - 1.0) * q;
        sum += term;
        if term.abs() < 1e-18 {
            break;
        }
        n += 1.0;
    }
    INV_SQRT_PI * inv * sum
}

pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    if ax < 0.84375 {
        if ax < 3.725_290_298_461_914e-9 {
            return 0.125 * (8.0 * x + EFX8 * x);
        }
        return x + x * small_ratio(x);
    }
    let y = if ax < 1.25 {
        1.0 - erfc_near_one(ax)
    } else if ax < 6.0 {
        1.0 - erfc_tail(ax)
    } else {
        1.0
    };
    y.copysign(x)
}

pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    let ax = x.abs();
    if ax < 0.84375 {
        if ax < 1.387_778_780_781_445_7e-17 {
            return 1.0 - x;
        }
        let y = small_ratio(x);
        if x < 0.25 {
            return 1.0 - (x + x * y);
        }
        return 0.5 - (x - 0.5 + x * y);
    }
    let tail = if ax < 1.25 { erfc_near_one(ax) } else { erfc_tail(ax) };
    if x < 0.0 {
        2.0 - tail
    } else {
        tail
    }
}

/// Scaled complementary error function exp(x^2) * erfc(x).
pub fn erfcx(x: f64) -> f64 {
    if x.is_nan() {
        return x;
    }
    if x < 0.0 {
        if x < -26.7 {
            return f64::INFINITY;
        }
        let ax = -x;
        return 2.0 * (ax * ax).exp() - erfcx(ax);
    }
    if x < 0.84375 {
        (x * x).exp() * erfc(x)
    } else if x < 1.25 {
        (x * x).exp() * erfc_near_one(x)
    } else if x < 28.0 {
        tail_exponent(x).exp() / x
    } else {
        erfcx_asymptotic(x)
    }
}

/// Truncation control for the divergent tail expansion of the Gaussian upper tail.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TailSeriesConfig {
    pub max_terms: usize,
    pub min_eta: f64,
}

impl Default for TailSeriesConfig {
    fn default() -> Self {
        Self {
            max_terms: 10,
            min_eta: 5.0,
        }
    }
}

impl TailSeriesConfig {
    pub fn new(max_terms: usize, min_eta: f64) -> Result<Self, SpecialError> {
        if max_terms < 8 {
            return Err(SpecialError::InvalidConfig("max_terms must be at least 8"));
        }
        if !(min_eta >= 5.0) {
            return Err(SpecialError::InvalidConfig("min_eta must be at least 5"));
        }
        Ok(Self { max_terms, min_eta })
    }
}

/// g(eta) = sum_n (-1)^n (2n-1)!! eta^(-2n), truncated at `max_terms` terms or
/// before the first term that grows in magnitude.
///
/// 1 - Phi(eta) = phi(eta) g(eta) / eta.
pub fn gauss_tail_ratio(eta: f64, cfg: TailSeriesConfig) -> Result<f64, SpecialError> {
    if !(eta >= cfg.min_eta) {
        return Err(SpecialError::EtaBelowValidity {
            eta,
            min_eta: cfg.min_eta,
        });
    }
    let x = 1.0 / (eta * eta);
    let mut term = 1.0_f64;
    let mut sum = 1.0_f64;
    for n in 1..cfg.max_terms {
        let next = -term * (2 * n - 1) as f64 * x;
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
    }
    Ok(sum)
}

/// Exact value of the tail ratio eta * (1 - Phi(eta)) / phi(eta), via erfcx.
pub fn mills_g(eta: f64) -> f64 {
    eta * SQRT_PI_OVER_2 * erfcx(eta / SQRT_2)
}

/// Inverse Mills ratio phi(z) / (1 - Phi(z)).
pub fn inverse_mills(z: f64) -> f64 {
    (2.0 / PI).sqrt() / erfcx(z / SQRT_2)
}

pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Phi(x). Below -5 the lower tail comes from the tail expansion at -x.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x >= -5.0 || x.is_nan() {
        return 0.5 * erfc(-x / SQRT_2);
    }
    let eta = -x;
    let cfg = TailSeriesConfig {
        max_terms: 64,
        min_eta: 5.0,
    };
    let g = gauss_tail_ratio(eta, cfg).unwrap_or(1.0);
    std_normal_pdf(eta) * g / eta
}

/// 1 - Phi(x) with full relative accuracy in the upper tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

pub fn log1p_stable(x: f64) -> Result<f64, SpecialError> {
    if !(x > -1.0) {
        return Err(SpecialError::DomainError(x));
    }
    Ok(x.ln_1p())
}

/// d/dx erf(x) = 2/sqrt(pi) exp(-x^2); used by the quantile refinement.
fn erf_derivative(x: f64) -> f64 {
    FRAC_2_SQRT_PI * (-x * x).exp()
}

/// Standard normal quantile, refined by Newton steps on erfc.
pub fn std_normal_quantile(p: f64) -> f64 {
    if !(p > 0.0 && p < 1.0) {
        return if p == 0.0 {
            f64::NEG_INFINITY
        } else if p == 1.0 {
            f64::INFINITY
        } else {
            f64::NAN
        };
    }
    // Initial guess from the logistic-type approximation, then Newton on
    // 0.5 erfc(-x/sqrt2) = p, working on the smaller tail.
    let (q, sign) = if p < 0.5 { (p, -1.0) } else { (1.0 - p, 1.0) };
    let t = (-2.0 * q.ln()).sqrt();
    let mut z = t - (2.515517 + 0.802853 * t + 0.010328 * t * t)
        / (1.0 + 1.432788 * t + 0.189269 * t * t + 0.001308 * t * t * t);
    for _ in 0..6 {
        let f = 0.5 * erfc(z / SQRT_2) - q;
        let df = -0.5 * erf_derivative(z / SQRT_2) / SQRT_2;
        let step = f / df;
        z -= step;
        if step.abs() < 1e-15 * z.abs().max(1.0) {
            break;
        }
    }
    sign * z
}
