//! Aggregation of simulation results into throughput and latency
//! statistics, SLA compliance checks, and capacity bisection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimResult;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("result has no steps or no latency samples")]
    EmptyResult,

    #[error("result spans zero time")]
    ZeroSpan,

    #[error("bisection tolerance must be positive, got {0}")]
    InvalidTolerance(f64),

    #[error("search bounds must satisfy 0 < lo <= hi, got [{lo}, {hi}]")]
    InvalidBounds { lo: f64, hi: f64 },

    #[error("infeasible SLA: the system is non-compliant even at {qps} qps")]
    InfeasibleSla { qps: f64 },

    #[error("could not bracket the capacity: still compliant at {qps} qps")]
    Unbracketed { qps: f64 },

    #[error("capacity probe failed: {0}")]
    ProbeFailed(String),
}

/// Run-level summary of one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub throughput_tps: f64,
    pub tbt_mean_ms: f64,
    pub tbt_p95_ms: f64,
    pub tbt_p99_ms: f64,
    /// Mean decode batch utilization relative to the decided target.
    pub mean_batch_occupancy: f64,
    /// Mean KV occupancy relative to the token capacity.
    pub mean_token_occupancy_frac: f64,
    /// Fraction of steps whose occupancy transiently exceeded capacity.
    pub overflow_rate: f64,
}

/// Nearest-rank percentile of a sorted sample, `p` in (0, 100].
pub fn nearest_rank_percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Reduces a simulation result to its summary statistics.
pub fn summarize(result: &SimResult) -> Result<Summary, MetricsError> {
    if result.step_records.is_empty() {
        return Err(MetricsError::EmptyResult);
    }
    let span_ms = result.totals.span_ms;
    if !(span_ms.is_finite() && span_ms > 0.0) {
        return Err(MetricsError::ZeroSpan);
    }

    let mut samples: Vec<f64> = result
        .request_records
        .iter()
        .flat_map(|r| r.tbt_samples.iter().copied())
        .collect();
    if samples.is_empty() {
        return Err(MetricsError::EmptyResult);
    }
    samples.sort_by(f64::total_cmp);
    let tbt_mean_ms = samples.iter().sum::<f64>() / samples.len() as f64;
    let tbt_p95_ms = nearest_rank_percentile(&samples, 95.0);
    let tbt_p99_ms = nearest_rank_percentile(&samples, 99.0);

    let decode_steps: Vec<_> = result
        .step_records
        .iter()
        .filter(|s| s.tokens_out > 0)
        .collect();
    let mean_batch_occupancy = if decode_steps.is_empty() {
        0.0
    } else {
        decode_steps
            .iter()
            .map(|s| f64::from(s.n_decode) / f64::from(s.b_target.max(1)))
            .sum::<f64>()
            / decode_steps.len() as f64
    };

    let n_steps = result.step_records.len() as f64;
    let mean_token_occupancy_frac = result
        .step_records
        .iter()
        .map(|s| s.occupancy_tokens as f64 / result.token_capacity as f64)
        .sum::<f64>()
        / n_steps;
    let overflow_rate =
        result.step_records.iter().filter(|s| s.overflow).count() as f64 / n_steps;

    Ok(Summary {
        throughput_tps: result.totals.tokens_generated as f64 / (span_ms / 1000.0),
        tbt_mean_ms,
        tbt_p95_ms,
        tbt_p99_ms,
        mean_batch_occupancy,
        mean_token_occupancy_frac,
        overflow_rate,
    })
}

/// Latency statistic checked against the SLA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlaStatistic {
    Mean,
    P95,
    #[default]
    P99,
}

/// True when the selected latency statistic stays within the SLA target
/// plus its tolerance.
pub fn sla_compliant(
    summary: &Summary,
    d_sla_ms: f64,
    epsilon_d_ms: f64,
    stat: SlaStatistic,
) -> bool {
    let value = match stat {
        SlaStatistic::Mean => summary.tbt_mean_ms,
        SlaStatistic::P95 => summary.tbt_p95_ms,
        SlaStatistic::P99 => summary.tbt_p99_ms,
    };
    value <= d_sla_ms + epsilon_d_ms
}

/// Bisection on the arrival rate: returns the largest compliant rate
/// within `tol_qps`, assuming compliance is monotone in the rate.
///
/// `probe` runs one full experiment at the given rate and reports
/// compliance. The lower bound must be compliant; a compliant upper
/// bound is expanded by doubling before the bisection starts.
pub fn capacity_search<F>(
    qps_lo: f64,
    qps_hi: f64,
    tol_qps: f64,
    mut probe: F,
) -> Result<f64, MetricsError>
where
    F: FnMut(f64) -> Result<bool, MetricsError>,
{
    if !(tol_qps.is_finite() && tol_qps > 0.0) {
        return Err(MetricsError::InvalidTolerance(tol_qps));
    }
    if !(qps_lo.is_finite() && qps_hi.is_finite() && qps_lo > 0.0 && qps_lo <= qps_hi) {
        return Err(MetricsError::InvalidBounds { lo: qps_lo, hi: qps_hi });
    }
    if !probe(qps_lo)? {
        return Err(MetricsError::InfeasibleSla { qps: qps_lo });
    }
    let mut lo = qps_lo;
    let mut hi = qps_hi;
    let mut expansions = 0;
    while probe(hi)? {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 24 {
            return Err(MetricsError::Unbracketed { qps: hi });
        }
    }
    while hi - lo > tol_qps {
        let mid = 0.5 * (lo + hi);
        if probe(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}
