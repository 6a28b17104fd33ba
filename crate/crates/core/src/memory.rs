//! Token-capacity accounting and the chance-constrained batch bound.
//!
//! The total footprint of a batch of `b` requests is a sum of iid
//! per-request lengths, approximately normal with mean `b * m` and
//! variance `b * v`. The scheduler keeps the probability of that sum
//! exceeding the token capacity below `epsilon_m` by bounding `b`, and
//! linearizes the bound into a safety buffer so the per-step decision
//! only needs the current mean length.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::workload::LengthMoments;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("overflow tolerance must lie strictly in (0, 1), got {0}")]
    InvalidEpsilon(f64),

    #[error("invalid memory config: {0}")]
    InvalidConfig(String),

    #[error("invalid length moments: {0}")]
    InvalidMoments(String),

    #[error("batch size must be >= 1")]
    ZeroBatch,

    #[error("reference batch size must be >= 1")]
    ZeroReferenceBatch,

    #[error(
        "no batch size >= 1 satisfies the memory constraint \
         (m = {m}, v = {v}, capacity = {token_capacity}, epsilon = {epsilon_m})"
    )]
    Infeasible {
        m: f64,
        v: f64,
        token_capacity: u64,
        epsilon_m: f64,
    },
}

/// KV-cache budget expressed in bytes and derived token capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub m_max_bytes: u64,
    pub bytes_per_token: u64,
    pub epsilon_m: f64,
    token_capacity: u64,
}

impl MemoryConfig {
    pub fn new(m_max_bytes: u64, bytes_per_token: u64, epsilon_m: f64) -> Result<Self, MemoryError> {
        if m_max_bytes == 0 {
            return Err(MemoryError::InvalidConfig("m_max_bytes must be > 0".into()));
        }
        if bytes_per_token == 0 {
            return Err(MemoryError::InvalidConfig("bytes_per_token must be > 0".into()));
        }
        let token_capacity = m_max_bytes / bytes_per_token;
        if token_capacity == 0 {
            return Err(MemoryError::InvalidConfig(
                "budget holds less than one token".into(),
            ));
        }
        if !(epsilon_m.is_finite() && epsilon_m > 0.0 && epsilon_m < 1.0) {
            return Err(MemoryError::InvalidEpsilon(epsilon_m));
        }
        Ok(Self {
            m_max_bytes,
            bytes_per_token,
            epsilon_m,
            token_capacity,
        })
    }

    /// Maximum number of tokens the KV budget can hold.
    pub fn token_capacity(&self) -> u64 {
        self.token_capacity
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn validate_moments(moments: LengthMoments) -> Result<(), MemoryError> {
    if !(moments.m.is_finite() && moments.m > 0.0) {
        return Err(MemoryError::InvalidMoments(format!(
            "mean must be positive, got {}",
            moments.m
        )));
    }
    if !(moments.v.is_finite() && moments.v >= 0.0) {
        return Err(MemoryError::InvalidMoments(format!(
            "variance must be nonnegative, got {}",
            moments.v
        )));
    }
    Ok(())
}

/// Upper quantile of the standard normal: the z with `P(Z > z) = epsilon_m`.
pub fn normal_upper_quantile(epsilon_m: f64) -> Result<f64, MemoryError> {
    if !(epsilon_m.is_finite() && epsilon_m > 0.0 && epsilon_m < 1.0) {
        return Err(MemoryError::InvalidEpsilon(epsilon_m));
    }
    Ok(std_normal().inverse_cdf(1.0 - epsilon_m))
}

/// Probability that the total footprint of `batch` iid requests exceeds
/// the token capacity, under the normal approximation. Degenerates to the
/// indicator of `batch * m > capacity` when the variance is zero.
pub fn overflow_probability(
    moments: LengthMoments,
    batch: u32,
    token_capacity: u64,
) -> Result<f64, MemoryError> {
    validate_moments(moments)?;
    if batch == 0 {
        return Err(MemoryError::ZeroBatch);
    }
    let b = f64::from(batch);
    let mean = b * moments.m;
    let capacity = token_capacity as f64;
    if moments.v == 0.0 {
        return Ok(if mean > capacity { 1.0 } else { 0.0 });
    }
    let sd = (b * moments.v).sqrt();
    Ok(1.0 - std_normal().cdf((capacity - mean) / sd))
}

/// Largest batch size whose overflow probability stays within `epsilon_m`.
///
/// Solved in closed form from the quadratic in sqrt(batch), then snapped to
/// the exact integer boundary of `overflow_probability(..) <= epsilon_m`
/// (the probability is strictly increasing in the batch size, so the
/// boundary is well defined).
pub fn chance_constrained_batch_bound(
    moments: LengthMoments,
    token_capacity: u64,
    epsilon_m: f64,
) -> Result<u64, MemoryError> {
    validate_moments(moments)?;
    let theta = normal_upper_quantile(epsilon_m)?;
    let capacity = token_capacity as f64;

    if moments.v == 0.0 {
        let bound = (capacity / moments.m).floor() as u64;
        if bound == 0 {
            return Err(MemoryError::Infeasible {
                m: moments.m,
                v: moments.v,
                token_capacity,
                epsilon_m,
            });
        }
        return Ok(bound);
    }

    // Positive root of  m * x^2 + theta * sqrt(v) * x - capacity = 0  with
    // x = sqrt(batch); valid for either sign of theta.
    let sd1 = moments.v.sqrt();
    let disc = theta * theta * moments.v + 4.0 * moments.m * capacity;
    let root = (disc.sqrt() - theta * sd1) / (2.0 * moments.m);
    let guess = if root > 0.0 { (root * root).floor() as u64 } else { 0 };

    let within = |b: u64| -> Result<bool, MemoryError> {
        if b == 0 || b > u64::from(u32::MAX) {
            return Ok(false);
        }
        Ok(overflow_probability(moments, b as u32, token_capacity)? <= epsilon_m)
    };

    let mut bound = guess.max(1);
    if within(bound)? {
        while within(bound + 1)? {
            bound += 1;
        }
    } else {
        while bound > 1 && !within(bound)? {
            bound -= 1;
        }
        if !within(bound)? {
            return Err(MemoryError::Infeasible {
                m: moments.m,
                v: moments.v,
                token_capacity,
                epsilon_m,
            });
        }
    }
    Ok(bound)
}

/// Token headroom reserved so the linearized admission rule stays inside
/// the chance constraint.
///
/// Evaluated at a reference batch size (normally the chance-constrained
/// bound), the buffer is the capacity left over after the expected
/// footprint of that batch: with it, `linear_batch_bound` is tangent to
/// the exact bound at the reference point. A buffer of the full capacity
/// means no admission.
pub fn safety_buffer(
    moments: LengthMoments,
    token_capacity: u64,
    epsilon_m: f64,
    reference_batch: u64,
) -> Result<u64, MemoryError> {
    validate_moments(moments)?;
    if !(epsilon_m.is_finite() && epsilon_m > 0.0 && epsilon_m < 1.0) {
        return Err(MemoryError::InvalidEpsilon(epsilon_m));
    }
    if reference_batch == 0 {
        return Err(MemoryError::ZeroReferenceBatch);
    }
    let spare = token_capacity as f64 - reference_batch as f64 * moments.m;
    Ok(spare.max(0.0).floor().min(token_capacity as f64) as u64)
}

/// Refreshes the safety buffer from current window moments: computes the
/// chance-constrained bound and evaluates the buffer there. When no batch
/// size is feasible the buffer consumes the whole capacity (no admission).
pub fn compute_safety_buffer(moments: LengthMoments, config: &MemoryConfig) -> u64 {
    match chance_constrained_batch_bound(moments, config.token_capacity(), config.epsilon_m) {
        Ok(bound) => safety_buffer(moments, config.token_capacity(), config.epsilon_m, bound)
            .unwrap_or(config.token_capacity()),
        Err(_) => config.token_capacity(),
    }
}

/// Linearized batch bound: how many mean-sized requests fit in the
/// capacity left after the safety buffer.
pub fn linear_batch_bound(
    moments: LengthMoments,
    token_capacity: u64,
    buffer: u64,
) -> Result<u64, MemoryError> {
    validate_moments(moments)?;
    if buffer >= token_capacity {
        return Err(MemoryError::Infeasible {
            m: moments.m,
            v: moments.v,
            token_capacity,
            epsilon_m: f64::NAN,
        });
    }
    let bound = ((token_capacity - buffer) as f64 / moments.m).floor() as u64;
    if bound == 0 {
        return Err(MemoryError::Infeasible {
            m: moments.m,
            v: moments.v,
            token_capacity,
            epsilon_m: f64::NAN,
        });
    }
    Ok(bound)
}
