//! Resampling schemes and the weighted-resampling correction.
//!
//! All schemes draw ancestor indices from arbitrary probabilities `r`, not
//! necessarily the normalized weights. Resampling from `r` stays unbiased
//! as long as each post-resampling weight is corrected by `w / (N r)`;
//! resampling from the *detached* weights with that correction leaves the
//! forward pass untouched (every corrected weight is exactly 1/N) while
//! routing weight gradients into the surviving particles.

use alloc::vec::Vec;
use core::fmt;

use crate::ad::{Tape, Var};
use crate::math;
use crate::rng::CounterRng;

/// Floor applied to resampling probabilities that underflowed to zero.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Multinomial,
    Stratified,
    Systematic,
}

#[derive(Debug, PartialEq)]
pub enum ResampleError {
    /// Probability is zero or negative at an index with nonzero weight.
    BadProbability { index: usize, value: f64 },
    /// Probabilities do not sum to 1.
    NotNormalized { sum: f64 },
    LengthMismatch,
}

impl fmt::Display for ResampleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ResampleError::BadProbability { index, value } => {
                write!(f, "resampling probability {value} at index {index}")
            }
            ResampleError::NotNormalized { sum } => write!(f, "probabilities sum to {sum}"),
            ResampleError::LengthMismatch => write!(f, "length mismatch"),
        }
    }
}

/// Normalized resampling probabilities.
#[derive(Clone, Debug)]
pub struct ResampleProbs {
    r: Vec<f64>,
    /// How many entries were lifted to the floor (weight underflow).
    pub floored: usize,
}

impl ResampleProbs {
    /// Validated constructor: strictly positive entries summing to 1.
    pub fn new(r: Vec<f64>) -> Result<Self, ResampleError> {
        for (i, &p) in r.iter().enumerate() {
            if !(p > 0.0) || !p.is_finite() {
                return Err(ResampleError::BadProbability { index: i, value: p });
            }
        }
        let sum: f64 = r.iter().sum();
        if math::abs(sum - 1.0) > 1e-12 {
            return Err(ResampleError::NotNormalized { sum });
        }
        Ok(ResampleProbs { r, floored: 0 })
    }

    /// From normalized log-weights (detached values). Entries that
    /// underflow to zero are lifted to `PROB_FLOOR` and renormalized,
    /// with the count reported rather than hidden.
    pub fn from_log_weights(logw_norm: &[f64]) -> Self {
        let mut r: Vec<f64> = logw_norm.iter().map(|&lw| math::exp(lw)).collect();
        let mut floored = 0;
        for p in r.iter_mut() {
            if *p < PROB_FLOOR {
                *p = PROB_FLOOR;
                floored += 1;
            }
        }
        let sum: f64 = r.iter().sum();
        for p in r.iter_mut() {
            *p /= sum;
        }
        ResampleProbs { r, floored }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.r
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }
}

/// Mixture of the weights and the uniform distribution:
/// `r_i = alpha * w_i + (1 - alpha) / N`.
pub fn soft_alpha_probs(w_norm: &[f64], alpha: f64) -> Result<ResampleProbs, ResampleError> {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
    let n = w_norm.len() as f64;
    let r: Vec<f64> = w_norm.iter().map(|&w| alpha * w + (1.0 - alpha) / n).collect();
    let sum: f64 = r.iter().sum();
    Ok(ResampleProbs { r: r.into_iter().map(|p| p / sum).collect(), floored: 0 })
}

/// Inverse-CDF lookup for a sorted sequence of points in (0, 1].
fn invert_cdf(r: &[f64], points: &[f64], out: &mut Vec<usize>) {
    let mut cum = r[0];
    let mut idx = 0usize;
    for &u in points {
        while u > cum && idx + 1 < r.len() {
            idx += 1;
            cum += r[idx];
        }
        out.push(idx);
    }
}

/// Draw N ancestor indices from `R(r)` under the chosen scheme.
///
/// Stratified and systematic draws are generated in increasing order, so a
/// single cumulative pass inverts them; multinomial sorts nothing and pays
/// an O(N^2) worst case, which is irrelevant at the particle counts used
/// here. Every scheme consumes a deterministic number of draws from `rng`.
pub fn draw_ancestors(scheme: Scheme, r: &ResampleProbs, rng: &mut CounterRng) -> Vec<usize> {
    let n = r.len();
    let rs = r.as_slice();
    let mut ancestors = Vec::with_capacity(n);
    match scheme {
        Scheme::Multinomial => {
            for _ in 0..n {
                let u = rng.uniform();
                let mut cum = rs[0];
                let mut idx = 0usize;
                while u > cum && idx + 1 < n {
                    idx += 1;
                    cum += rs[idx];
                }
                ancestors.push(idx);
            }
        }
        Scheme::Stratified => {
            let points: Vec<f64> = (0..n).map(|k| (k as f64 + rng.uniform()) / n as f64).collect();
            invert_cdf(rs, &points, &mut ancestors);
        }
        Scheme::Systematic => {
            let u = rng.uniform();
            let points: Vec<f64> = (0..n).map(|k| (k as f64 + u) / n as f64).collect();
            invert_cdf(rs, &points, &mut ancestors);
        }
    }
    ancestors
}

/// Result of a weighted resampling step over tape-valued weights.
pub struct WeightedResample {
    pub ancestors: Vec<usize>,
    /// Corrected weights `w[a_i] / (N r[a_i])` as tape nodes.
    pub weights: Vec<Var>,
}

/// Weighted resampling with arbitrary probabilities: pick ancestors from
/// `R(r)` and correct each offspring weight to `w[a] / (N r[a])`.
pub fn weighted_resample(
    tape: &Tape,
    w_norm: &[Var],
    r: &ResampleProbs,
    scheme: Scheme,
    rng: &mut CounterRng,
) -> Result<WeightedResample, ResampleError> {
    if w_norm.len() != r.len() {
        return Err(ResampleError::LengthMismatch);
    }
    for (i, (&w, &p)) in w_norm.iter().zip(r.as_slice()).enumerate() {
        if tape.value(w) > 0.0 && !(p > 0.0) {
            return Err(ResampleError::BadProbability { index: i, value: p });
        }
    }
    let n = w_norm.len();
    let ancestors = draw_ancestors(scheme, r, rng);
    let weights = ancestors
        .iter()
        .map(|&a| {
            let denom = tape.constant(n as f64 * r.as_slice()[a]);
            tape.div(w_norm[a], denom)
        })
        .collect();
    Ok(WeightedResample { ancestors, weights })
}

/// Stop-gradient resampling in the log domain: ancestors are drawn from
/// the detached normalized weights and each post-resampling log-weight is
/// `-log N + (logw[a] - stop(logw[a]))` — exactly `-log N` on the forward
/// pass, with the ancestral weight's gradient attached.
pub struct SgrResample {
    pub ancestors: Vec<usize>,
    pub log_weights: Vec<Var>,
}

pub fn sgr_resample(
    tape: &Tape,
    logw_norm: &[Var],
    scheme: Scheme,
    rng: &mut CounterRng,
) -> SgrResample {
    let values = tape.values(logw_norm);
    let probs = ResampleProbs::from_log_weights(&values);
    let ancestors = draw_ancestors(scheme, &probs, rng);
    let n = logw_norm.len() as f64;
    let log_weights = ancestors
        .iter()
        .map(|&a| {
            let corr = tape.dice(logw_norm[a]);
            tape.add_const(corr, -math::ln(n))
        })
        .collect();
    SgrResample { ancestors, log_weights }
}

/// Effective sample size `1 / sum(w_i^2)` of normalized weights; lies in
/// `[1, N]`.
pub fn effective_sample_size(w_norm: &[f64]) -> f64 {
    1.0 / w_norm.iter().map(|w| w * w).sum::<f64>()
}

/// ESS from normalized log-weights.
pub fn ess_from_log_weights(logw_norm: &[f64]) -> f64 {
    let m = logw_norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for &lw in logw_norm {
        s += math::exp(2.0 * (lw - m));
    }
    math::exp(-2.0 * m) / s
}
