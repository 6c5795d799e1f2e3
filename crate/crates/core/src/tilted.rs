//! Tilted moments and the ratio engine for one-sided Gaussian power moments.
//!
//! For a shift `z` let `J_k(z) = int_0^inf t^k phi(t + z) dt`. The ratios
//! `R_k = J_{k+1} / J_k` satisfy `R_k = k / R_{k-1} - z`, with `R_0 = lambda(z) - z`
//! where `lambda` is the inverse Mills ratio. Forward evolution amplifies relative
//! errors by roughly `exp(2 z sqrt(k))`, so for positive shifts the sequence is
//! taken as the minimal solution of the backward map `R_{k-1} = k / (z + R_k)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::special::inverse_mills;

/// Mean and variance of a one-dimensional tilted distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedMoments {
    pub s_bar: f64,
    pub c_s: f64,
}

impl TiltedMoments {
    pub fn is_valid(&self) -> bool {
        self.s_bar.is_finite() && self.c_s.is_finite() && self.c_s > 0.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RatioError {
    #[error("ratio sequence produced a nonpositive or non-finite value at index {index}")]
    NonpositiveRatio { index: usize },
    #[error("shift {0} is not finite")]
    InvalidShift(f64),
}

/// Accumulated log contraction the backward recurrence must reach before its
/// starting error is negligible in double precision.
const BACKWARD_LOG_CONTRACTION: f64 = 40.0;
/// Relative error amplification budget (as an exponent) tolerated in forward mode.
const FORWARD_LOG_GROWTH: f64 = 2.0;

/// Whether forward evolution up to index `kmax` stays within the error budget.
pub fn forward_is_stable(z: f64, kmax: usize) -> bool {
    z <= 0.0 || 2.0 * z * ((kmax + 1) as f64).sqrt() <= FORWARD_LOG_GROWTH
}

/// Large-k fixed point of `R = k / (z + R)`.
fn asymptotic_ratio(z: f64, k: usize) -> f64 {
    let k = k as f64;
    2.0 * k / (z + (z * z + 4.0 * k).sqrt())
}

/// `R_0 ..= R_kmax` for shift `z`.
pub fn power_ratios(z: f64, kmax: usize) -> Result<Vec<f64>, RatioError> {
    if !z.is_finite() {
        return Err(RatioError::InvalidShift(z));
    }
    let out = if forward_is_stable(z, kmax) {
        forward_ratios(z, kmax)
    } else {
        backward_ratios(z, kmax)
    };
    match out.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        Some(index) => Err(RatioError::NonpositiveRatio { index }),
        None => Ok(out),
    }
}

fn forward_ratios(z: f64, kmax: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(kmax + 1);
    let mut r = inverse_mills(z) - z;
    out.push(r);
    for k in 1..=kmax {
        r = k as f64 / r - z;
        out.push(r);
    }
    out
}

fn backward_ratios(z: f64, kmax: usize) -> Vec<f64> {
    // Depth: each backward step contracts errors by q_k = k / (z + R_k)^2.
    let mut top = kmax + 1;
    let mut acc = 0.0;
    while acc < BACKWARD_LOG_CONTRACTION {
        let rk = asymptotic_ratio(z, top);
        let s = z + rk;
        acc += (s * s / top as f64).ln();
        top += 1;
    }
    let mut out = vec![0.0; kmax + 1];
    let mut r = asymptotic_ratio(z, top);
    for k in (1..=top).rev() {
        r = k as f64 / (z + r);
        if k - 1 <= kmax {
            out[k - 1] = r;
        }
    }
    out
}

/// Mean and variance of `t > 0` with density proportional to `phi(t + z)`.
pub fn truncated_standard_moments(z: f64) -> Result<(f64, f64), RatioError> {
    if z <= 0.0 {
        if !z.is_finite() {
            return Err(RatioError::InvalidShift(z));
        }
        // X = t + z is a standard normal truncated to X > z.
        let lam = inverse_mills(z);
        let mean = lam - z;
        let var = 1.0 - lam * mean;
        return Ok((mean, var));
    }
    let r = power_ratios(z, 1)?;
    Ok((r[0], r[0] * (r[1] - r[0])))
}
