//! Tilted moments of a Laplace site `(alpha/2) e^{-alpha |s|}` against `N(mu, sigma2)`.
//!
//! The site splits into the half lines `s > 0` and `s <= 0`; with
//! `A = alpha sigma + |mu|/sigma` and `B = alpha sigma - |mu|/sigma` the weight of
//! the far half relative to the near half is
//! `beta = e^{2 alpha |mu|} Q(A) / Q(B) = (alpha sigma2 - |mu|) g(A) / ((alpha sigma2 + |mu|) g(B))`,
//! `Q` being the standard normal upper tail and `g` the tail ratio `eta Q(eta) / phi(eta)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::{
    gauss_tail_ratio, inverse_mills, log1p_stable, mills_g, std_normal_sf, TailSeriesConfig,
};
use crate::tilted::{truncated_standard_moments, TiltedMoments};

/// Tail-series threshold: below it Q is evaluated directly.
pub const TAIL_ETA: f64 = 5.0;
/// From here on the divergent series, stopped at its smallest term, is exact to
/// double precision; below it the tail ratio comes from erfcx.
const SERIES_ETA: f64 = 12.0;
/// Relative rounding-error estimate above which the closed form is replaced by the
/// two-half mixture.
const CLOSED_FORM_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LaplaceError {
    #[error("invalid Laplace site input: {0}")]
    InvalidInput(&'static str),
    #[error("tail expansion unavailable: argument {0} below the tail threshold")]
    TailRegimeUnavailable(f64),
    #[error("every evaluation branch failed")]
    QuadratureFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceSiteInput {
    pub mu: f64,
    pub sigma2: f64,
    pub alpha: f64,
}

impl LaplaceSiteInput {
    pub fn new(mu: f64, sigma2: f64, alpha: f64) -> Result<Self, LaplaceError> {
        let input = Self { mu, sigma2, alpha };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<(), LaplaceError> {
        if !self.mu.is_finite() {
            return Err(LaplaceError::InvalidInput("mu must be finite"));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(LaplaceError::InvalidInput("sigma2 must be positive and finite"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(LaplaceError::InvalidInput("alpha must be positive and finite"));
        }
        Ok(())
    }

    fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// `(A, B)` as in the module docs.
    pub fn tail_arguments(&self) -> (f64, f64) {
        let s = self.sigma();
        let a = self.alpha * s;
        let m = self.mu.abs() / s;
        (a + m, a - m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BetaBranch {
    /// Both tail arguments at most 5: direct upper-tail probabilities.
    Direct,
    /// Only the far argument exceeds 5: expansion for it, direct tail for the other.
    Mixed,
    /// Both arguments at least 5.
    Tail,
}

fn tail_g(eta: f64) -> f64 {
    if eta >= SERIES_ETA {
        let cfg = TailSeriesConfig {
            max_terms: 400,
            min_eta: TAIL_ETA,
        };
        gauss_tail_ratio(eta, cfg).expect("eta above threshold")
    } else {
        mills_g(eta)
    }
}

/// beta from the tail expansion; requires `B >= 5`.
pub fn tail_beta(input: &LaplaceSiteInput) -> Result<f64, LaplaceError> {
    input.validate()?;
    let (a, b) = input.tail_arguments();
    if !(b >= TAIL_ETA) {
        return Err(LaplaceError::TailRegimeUnavailable(b));
    }
    let near = input.alpha * input.sigma2;
    let mu = input.mu.abs();
    Ok((near - mu) * tail_g(a) / ((near + mu) * tail_g(b)))
}

/// beta and the branch that produced it.
pub fn beta_ratio(input: &LaplaceSiteInput) -> Result<(f64, BetaBranch), LaplaceError> {
    input.validate()?;
    let (a, b) = input.tail_arguments();
    if b >= TAIL_ETA {
        return Ok((tail_beta(input)?, BetaBranch::Tail));
    }
    if a <= TAIL_ETA {
        let scale = (2.0 * input.alpha * input.mu.abs()).exp();
        return Ok((scale * std_normal_sf(a) / std_normal_sf(b), BetaBranch::Direct));
    }
    // e^{2 alpha |mu|} phi(A) = phi(B), so beta = lambda(B) g(A) / A.
    Ok((inverse_mills(b) * tail_g(a) / a, BetaBranch::Mixed))
}

/// Closed-form moments with a first-order rounding-error estimate
/// `(moments, relative error of s_bar, relative error of c_s)`.
pub fn laplace_moments_closed_form(
    input: &LaplaceSiteInput,
) -> Result<(TiltedMoments, f64, f64), LaplaceError> {
    let (beta, branch) = beta_ratio(input)?;
    let (_, b) = input.tail_arguments();
    let (mu, s2, alpha) = (input.mu, input.sigma2, input.alpha);
    let near = alpha * s2;
    let sgn = if mu < 0.0 { -1.0 } else { 1.0 };
    let frac = 1.0 - 2.0 / (1.0 + beta);
    let s_bar = mu + near * sgn * frac;
    let first = if branch == BetaBranch::Tail {
        -2.0 * near * (near - mu.abs()) / (tail_g(b) * (1.0 + beta))
    } else {
        -2.0 * near * input.sigma() * inverse_mills(b) / (1.0 + beta)
    };
    let inv = 1.0 / near;
    let spread = (-2.0 * inv.ln()
        + log1p_stable(1.0 / (alpha * alpha * s2)).map_err(|_| LaplaceError::QuadratureFailure)?)
    .exp();
    let shift = mu - s_bar;
    let c_s = first + spread - shift * shift;
    let eps = f64::EPSILON;
    let mean_err = 4.0 * eps * (mu.abs() + near * (1.0 + frac.abs()));
    let var_err = 8.0 * eps * (first.abs() + spread + shift * shift) + 2.0 * shift.abs() * mean_err;
    let scale = s_bar.abs().max(c_s.abs().sqrt());
    let mom = TiltedMoments { s_bar, c_s };
    Ok((mom, mean_err / scale, var_err / c_s.abs()))
}

/// Moments as the mixture of the two truncated Gaussian halves.
pub fn laplace_moments_split(input: &LaplaceSiteInput) -> Result<TiltedMoments, LaplaceError> {
    let (beta, _) = beta_ratio(input)?;
    let (a, b) = input.tail_arguments();
    let sigma = input.sigma();
    let fail = |_| LaplaceError::QuadratureFailure;
    // Near half (same side as mu) has shift B, far half has shift A.
    let (m_near, v_near) = truncated_standard_moments(b).map_err(fail)?;
    let (m_far, v_far) = truncated_standard_moments(a).map_err(fail)?;
    let w_near = 1.0 / (1.0 + beta);
    let w_far = beta / (1.0 + beta);
    let sgn = if input.mu < 0.0 { -1.0 } else { 1.0 };
    let gap = m_near + m_far;
    let s_bar = sgn * sigma * (w_near * m_near - w_far * m_far);
    let c_s = input.sigma2 * (w_near * v_near + w_far * v_far + w_near * w_far * gap * gap);
    Ok(TiltedMoments { s_bar, c_s })
}

pub fn laplace_site_moments(input: &LaplaceSiteInput) -> Result<TiltedMoments, LaplaceError> {
    input.validate()?;
    if let Ok((mom, mean_err, var_err)) = laplace_moments_closed_form(input) {
        if mom.is_valid() && mean_err <= CLOSED_FORM_TOLERANCE && var_err <= CLOSED_FORM_TOLERANCE {
            return Ok(mom);
        }
    }
    match laplace_moments_split(input) {
        Ok(mom) if mom.is_valid() => Ok(mom),
        _ => Err(LaplaceError::QuadratureFailure),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    fn site(mu: f64, sigma2: f64, alpha: f64) -> LaplaceSiteInput {
        LaplaceSiteInput::new(mu, sigma2, alpha).unwrap()
    }

    #[test]
    fn rejects_bad_input() {
        assert!(LaplaceSiteInput::new(f64::NAN, 1.0, 1.0).is_err());
        assert!(LaplaceSiteInput::new(0.0, 0.0, 1.0).is_err());
        assert!(LaplaceSiteInput::new(0.0, 1.0, -1.0).is_err());
        assert!(matches!(
            tail_beta(&site(0.0, 1.0, 1.0)),
            Err(LaplaceError::TailRegimeUnavailable(_))
        ));
    }

    #[test]
    fn frozen_reference_cases() {
        // 50-digit quadrature (tests/data/oracle_values.py).
        let cases = [
            (2.0, 1.0, 1.0, 1.161088907843145516964991, 0.7673574027921495140870736),
            (0.3, 1e4, 5.0, 2.399952001507139472490998e-6, 0.07999840005599757068376494),
            (-7.0, 0.04, 30.0, -5.799999999999999975019982, 0.04000000000000000083266727),
            (40.0, 1e-4, 1e-3, 39.99999989999999999999999, 0.0001000000000000000047921736),
            (1.0, 9.0, 0.5, 0.3443674041845807013684526, 3.142257262162226834510071),
        ];
        for (mu, s2, alpha, sb, cs) in cases {
            let t = laplace_site_moments(&site(mu, s2, alpha)).unwrap();
            assert!(rel(t.s_bar, sb) < 1e-9, "s_bar at {mu} {s2} {alpha}: {}", t.s_bar);
            assert!(rel(t.c_s, cs) < 1e-9, "c_s at {mu} {s2} {alpha}: {}", t.c_s);
        }
    }

    #[test]
    fn beta_examples() {
        let (b, branch) = beta_ratio(&site(3.0, 100.0, 1.0)).unwrap();
        assert_eq!(branch, BetaBranch::Tail);
        assert!(rel(b, 0.9428274194499084443006672) < 1e-12);
        let (b, branch) = beta_ratio(&site(1.0, 0.5, 2.0)).unwrap();
        assert_eq!(branch, BetaBranch::Direct);
        assert!(rel(b, 0.2553956763105057438650886) < 1e-12);
        let (bp, _) = beta_ratio(&site(3.0, 100.0, 1.0)).unwrap();
        let (bm, _) = beta_ratio(&site(-3.0, 100.0, 1.0)).unwrap();
        assert_eq!(bp, bm);
    }

    #[test]
    fn centered_site_is_symmetric() {
        for (s2, alpha) in [(1.0, 1.0), (0.01, 40.0), (50.0, 0.3)] {
            let t = laplace_site_moments(&site(0.0, s2, alpha)).unwrap();
            assert_eq!(t.s_bar, 0.0);
            assert!(t.c_s > 0.0 && t.c_s < s2);
            let q = oracle::laplace_moments(&site(0.0, s2, alpha)).unwrap();
            assert!(rel(t.c_s, q.c_s) < 1e-9);
        }
    }

    #[test]
    fn flat_prior_limit() {
        let t = laplace_site_moments(&site(0.7, 2.0, 1e-8)).unwrap();
        assert!((t.s_bar - 0.7).abs() < 1e-7);
        assert!(rel(t.c_s, 2.0) < 1e-7);
    }

    #[test]
    fn split_and_closed_form_agree_when_both_are_accurate() {
        for (mu, s2, alpha) in [(0.5, 1.0, 1.0), (2.0, 3.0, 0.2), (-1.0, 0.5, 2.0)] {
            let p = site(mu, s2, alpha);
            let (cf, e1, e2) = laplace_moments_closed_form(&p).unwrap();
            assert!(e1 < 1e-12 && e2 < 1e-12);
            let sp = laplace_moments_split(&p).unwrap();
            assert!(rel(cf.s_bar, sp.s_bar) < 1e-11);
            assert!(rel(cf.c_s, sp.c_s) < 1e-11);
        }
    }

    #[test]
    fn tail_and_direct_beta_agree_near_threshold() {
        // B just above 5 with A small enough for direct evaluation.
        for (mu, s2, alpha) in [(0.2, 1.0, 5.3), (1.0, 4.0, 3.0), (-0.5, 0.25, 12.0)] {
            let p = site(mu, s2, alpha);
            let (a, b) = p.tail_arguments();
            assert!(b >= TAIL_ETA && a < 30.0);
            let direct = (2.0 * alpha * f64::abs(mu)).exp() * std_normal_sf(a) / std_normal_sf(b);
            assert!(rel(tail_beta(&p).unwrap(), direct) < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn matches_quadrature(mu in -20.0..20.0f64, ls2 in -4.0..2.0f64, la in -3.0..2.0f64) {
            let p = site(mu, 10f64.powf(ls2), 10f64.powf(la));
            let t = laplace_site_moments(&p).unwrap();
            let q = oracle::laplace_moments(&p).unwrap();
            let scale = q.c_s.sqrt();
            prop_assert!((t.s_bar - q.s_bar).abs() <= 1e-8 * q.s_bar.abs().max(scale));
            prop_assert!(rel(t.c_s, q.c_s) < 1e-8);
        }

        #[test]
        fn antisymmetric_in_mu(mu in 0.0..30.0f64, ls2 in -4.0..2.0f64, la in -3.0..2.0f64) {
            let (s2, alpha) = (10f64.powf(ls2), 10f64.powf(la));
            let a = laplace_site_moments(&site(mu, s2, alpha)).unwrap();
            let b = laplace_site_moments(&site(-mu, s2, alpha)).unwrap();
            prop_assert_eq!(a.s_bar, -b.s_bar);
            prop_assert_eq!(a.c_s, b.c_s);
        }

        #[test]
        fn variance_contracts(mu in -30.0..30.0f64, ls2 in -4.0..3.0f64, la in -3.0..2.0f64) {
            let s2 = 10f64.powf(ls2);
            let t = laplace_site_moments(&site(mu, s2, 10f64.powf(la))).unwrap();
            prop_assert!(t.c_s > 0.0 && t.c_s <= s2 * (1.0 + 1e-12));
            // The mean is pulled toward zero but never past it.
            prop_assert!(t.s_bar.abs() <= mu.abs() * (1.0 + 1e-12) + 1e-300);
        }
    }
}
