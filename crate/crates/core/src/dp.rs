// SPDX-License-Identifier: Apache-2.0

//! Clamped two-sided geometric mechanism for bounded integer sums.
//!
//! Values lie in `[0, B]`, so changing one of them moves the sum by at most
//! `B`. Noise is drawn with `Pr[G = g] ∝ α^|g|`, `α = e^{-ε/B}`, and the noisy
//! sum is clamped to `[0, B·m]`. Clamping is post-processing, so the release
//! stays ε-differentially private.

use num::{BigInt, BigRational};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::CanonicalWriter;
use crate::rng::{Prob, RandomSource, Stream};

/// Exact probabilities in enumeration tables are multiples of `2^-48`.
pub const PROB_RESOLUTION_BITS: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Geometric,
    /// Releases the exact sum. Not private; test hook and negative control.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpParams {
    pub epsilon: f64,
    pub value_bound: u64,
    #[serde(default)]
    pub noise: NoiseMode,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpError {
    #[error("value {value} outside [0, {bound}]")]
    ValueOutOfRange { value: u64, bound: u64 },
    #[error("cannot summarize an empty list")]
    Empty,
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
}

impl DpParams {
    pub fn new(epsilon: f64, value_bound: u64) -> Result<Self, DpError> {
        let p = DpParams {
            epsilon,
            value_bound,
            noise: NoiseMode::Geometric,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn without_noise(mut self) -> Self {
        self.noise = NoiseMode::Disabled;
        self
    }

    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(DpError::InvalidParams("epsilon must be positive and finite"));
        }
        if self.value_bound < 1 {
            return Err(DpError::InvalidParams("value bound must be at least 1"));
        }
        Ok(())
    }

    /// Per-unit decay `α = e^{-ε/B}`.
    pub fn alpha(&self) -> f64 {
        (-self.epsilon / self.value_bound as f64).exp()
    }

    pub fn max_output(&self, m: u64) -> u64 {
        self.value_bound * m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Summary {
    pub noisy_sum: u64,
    pub m: u64,
}

impl Summary {
    pub fn write(&self, w: &mut CanonicalWriter) {
        w.u64(self.noisy_sum).u64(self.m);
    }
}

pub fn summarize(
    values: &[u64],
    params: &DpParams,
    draws: &mut dyn RandomSource,
    stream: Stream,
) -> Result<Summary, DpError> {
    params.validate()?;
    if values.is_empty() {
        return Err(DpError::Empty);
    }
    let mut total = 0u64;
    for &v in values {
        if v > params.value_bound {
            return Err(DpError::ValueOutOfRange {
                value: v,
                bound: params.value_bound,
            });
        }
        total += v;
    }
    let m = values.len() as u64;
    let noisy_sum = match params.noise {
        NoiseMode::Disabled => total,
        NoiseMode::Geometric => draws.clamped_sum(stream, params, m, total),
    };
    Ok(Summary { noisy_sum, m })
}

/// `Pr[G = 0] = (1-α)/(1+α)`.
pub fn geometric_pmf(params: &DpParams, g: i64) -> f64 {
    if params.noise == NoiseMode::Disabled {
        return if g == 0 { 1.0 } else { 0.0 };
    }
    let a = params.alpha();
    (1.0 - a) / (1.0 + a) * a.powf(g.unsigned_abs() as f64)
}

/// `Pr[G ≥ k] = α^k / (1+α)` for `k ≥ 0`.
fn upper_tail(alpha: f64, k: u64) -> f64 {
    alpha.powf(k as f64) / (1.0 + alpha)
}

/// Exact (closed-form, floating point) distribution of the clamped release.
pub fn clamped_pmf(params: &DpParams, m: u64, true_sum: u64) -> Vec<(u64, f64)> {
    let top = params.max_output(m);
    let s = true_sum.min(top);
    if params.noise == NoiseMode::Disabled {
        return vec![(s, 1.0)];
    }
    let a = params.alpha();
    (0..=top)
        .map(|o| {
            let p = if o == 0 {
                upper_tail(a, s)
            } else if o == top {
                upper_tail(a, top - s)
            } else {
                geometric_pmf(params, o as i64 - s as i64)
            };
            (o, p)
        })
        .collect()
}

/// Release distribution quantized to multiples of `2^-48`, summing to exactly
/// one. Rounding residue is assigned to the true-sum outcome; zero-mass
/// outcomes are dropped.
pub fn noise_distribution(params: &DpParams, m: u64, true_sum: u64) -> Vec<(u64, Prob)> {
    let pmf = clamped_pmf(params, m, true_sum);
    let scale = (1u64 << PROB_RESOLUTION_BITS) as f64;
    let mut units: Vec<(u64, i128)> = pmf
        .iter()
        .map(|&(o, p)| (o, (p * scale).round() as i128))
        .collect();
    let total: i128 = units.iter().map(|&(_, u)| u).sum();
    let residue = (1i128 << PROB_RESOLUTION_BITS) - total;
    let s = true_sum.min(params.max_output(m));
    if let Some(slot) = units.iter_mut().find(|(o, _)| *o == s) {
        slot.1 += residue;
    }
    let den = BigInt::from(1u64 << PROB_RESOLUTION_BITS);
    units
        .into_iter()
        .filter(|&(_, u)| u > 0)
        .map(|(o, u)| (o, BigRational::new(BigInt::from(u), den.clone())))
        .collect()
}

/// Smallest `g` with `Pr[G ≤ g] ≥ u`, for `u ∈ (0, 1)`.
pub fn geometric_inverse_cdf(params: &DpParams, u: f64) -> i64 {
    if params.noise == NoiseMode::Disabled {
        return 0;
    }
    const CAP: f64 = (1u64 << 40) as f64;
    let a = params.alpha();
    let ln_a = a.ln();
    if u < a / (1.0 + a) {
        let k = ((u * (1.0 + a)).ln() / ln_a).floor().clamp(1.0, CAP);
        -(k as i64)
    } else {
        let x = (((1.0 - u) * (1.0 + a)).ln() / ln_a).ceil() - 1.0;
        x.clamp(0.0, CAP) as i64
    }
}

pub fn clamp_release(params: &DpParams, m: u64, raw: i64) -> u64 {
    raw.clamp(0, params.max_output(m) as i64) as u64
}
