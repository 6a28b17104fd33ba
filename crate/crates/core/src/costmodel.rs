//! Affine latency models for decode steps and prefill, least-squares
//! calibration, and the steady-state throughput curve.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CostModelError {
    #[error("invalid latency coefficient: {0}")]
    InvalidCoefficient(String),

    #[error("batch size must be >= 1")]
    ZeroBatch,

    #[error("token count must be >= 1")]
    ZeroTokens,

    #[error("SLA target must be positive, got {0}")]
    InvalidSla(f64),

    #[error("calibration requires at least 2 samples with distinct batch sizes")]
    DegenerateFit,

    #[error("fitted slope {0} is not positive; latency must increase with batch size")]
    NonPositiveSlope(f64),

    #[error("calibration {path}, line {line}: {message}")]
    CalibrationParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("failed to read calibration {path}: {source}")]
    CalibrationIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Affine decode-step and prefill cost models.
///
/// A decode iteration over a batch of `b` requests takes
/// `decode_base_ms + decode_per_seq_ms * b` milliseconds; prefilling `T`
/// prompt tokens takes `prefill_base_ms + prefill_per_token_ms * T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub decode_base_ms: f64,
    pub decode_per_seq_ms: f64,
    pub prefill_base_ms: f64,
    pub prefill_per_token_ms: f64,
}

impl LatencyModel {
    pub fn new(
        decode_base_ms: f64,
        decode_per_seq_ms: f64,
        prefill_base_ms: f64,
        prefill_per_token_ms: f64,
    ) -> Result<Self, CostModelError> {
        let check_finite = |name: &str, x: f64| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(CostModelError::InvalidCoefficient(format!(
                    "{name} must be finite, got {x}"
                )))
            }
        };
        check_finite("decode_base_ms", decode_base_ms)?;
        check_finite("decode_per_seq_ms", decode_per_seq_ms)?;
        check_finite("prefill_base_ms", prefill_base_ms)?;
        check_finite("prefill_per_token_ms", prefill_per_token_ms)?;
        if decode_base_ms < 0.0 {
            return Err(CostModelError::InvalidCoefficient(
                "decode_base_ms must be >= 0".into(),
            ));
        }
        if decode_per_seq_ms <= 0.0 {
            return Err(CostModelError::InvalidCoefficient(
                "decode_per_seq_ms must be > 0".into(),
            ));
        }
        if prefill_base_ms < 0.0 {
            return Err(CostModelError::InvalidCoefficient(
                "prefill_base_ms must be >= 0".into(),
            ));
        }
        if prefill_per_token_ms <= 0.0 {
            return Err(CostModelError::InvalidCoefficient(
                "prefill_per_token_ms must be > 0".into(),
            ));
        }
        Ok(Self {
            decode_base_ms,
            decode_per_seq_ms,
            prefill_base_ms,
            prefill_per_token_ms,
        })
    }

    /// Duration of one decode iteration over `batch` running requests.
    pub fn step_latency_ms(&self, batch: u32) -> Result<f64, CostModelError> {
        if batch == 0 {
            return Err(CostModelError::ZeroBatch);
        }
        Ok(self.decode_base_ms + self.decode_per_seq_ms * f64::from(batch))
    }

    /// Duration of a dedicated prefill pass over `tokens` prompt tokens.
    pub fn prefill_latency_ms(&self, tokens: u64) -> Result<f64, CostModelError> {
        if tokens == 0 {
            return Err(CostModelError::ZeroTokens);
        }
        Ok(self.prefill_base_ms + self.prefill_per_token_ms * tokens as f64)
    }

    /// Steady-state token throughput at a sustained batch size, in tokens/s.
    ///
    /// Each iteration emits `batch` tokens and takes `step_latency_ms`.
    pub fn steady_state_throughput(&self, batch: u32) -> Result<f64, CostModelError> {
        let step_ms = self.step_latency_ms(batch)?;
        Ok(1000.0 * f64::from(batch) / step_ms)
    }

    /// Largest batch size whose decode step stays within the SLA target,
    /// or 0 when even a single request violates it.
    pub fn max_batch_within_sla(&self, d_sla_ms: f64) -> Result<u32, CostModelError> {
        if !(d_sla_ms.is_finite() && d_sla_ms > 0.0) {
            return Err(CostModelError::InvalidSla(d_sla_ms));
        }
        let raw = (d_sla_ms - self.decode_base_ms) / self.decode_per_seq_ms;
        if raw < 1.0 {
            return Ok(0);
        }
        let mut b = raw.floor().min(f64::from(u32::MAX - 1)) as u32;
        // Fix up floating-point dust so the result is exactly the largest
        // integer with step_latency_ms(b) <= d_sla_ms.
        while self.step_latency_ms(b + 1).unwrap_or(f64::INFINITY) <= d_sla_ms {
            b += 1;
        }
        while b >= 1 && self.step_latency_ms(b)? > d_sla_ms {
            b -= 1;
        }
        Ok(b)
    }
}

/// Ordinary least-squares fit of the decode-step model: returns
/// `(decode_base_ms, decode_per_seq_ms)` from `(batch, measured_ms)` samples.
pub fn fit_step_latency(samples: &[(u32, f64)]) -> Result<(f64, f64), CostModelError> {
    if samples.len() < 2 {
        return Err(CostModelError::DegenerateFit);
    }
    let n = samples.len() as f64;
    let sx: f64 = samples.iter().map(|&(b, _)| f64::from(b)).sum();
    let sy: f64 = samples.iter().map(|&(_, y)| y).sum();
    let sxx: f64 = samples.iter().map(|&(b, _)| f64::from(b) * f64::from(b)).sum();
    let sxy: f64 = samples.iter().map(|&(b, y)| f64::from(b) * y).sum();
    let denom = n * sxx - sx * sx;
    if denom == 0.0 {
        return Err(CostModelError::DegenerateFit);
    }
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    if slope <= 0.0 {
        return Err(CostModelError::NonPositiveSlope(slope));
    }
    Ok((intercept, slope))
}

const CALIBRATION_HEADER: &str = "batch_size,step_latency_ms";

/// Reads `(batch, measured_ms)` calibration samples from a CSV file with
/// header `batch_size,step_latency_ms`.
pub fn load_calibration(path: &Path) -> Result<Vec<(u32, f64)>, CostModelError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| CostModelError::CalibrationIo {
        path: display.clone(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == CALIBRATION_HEADER => {}
        _ => {
            return Err(CostModelError::CalibrationParse {
                path: display,
                line: 1,
                message: format!("expected header `{CALIBRATION_HEADER}`"),
            })
        }
    }
    let mut samples = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| CostModelError::CalibrationParse {
            path: display.clone(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 2 {
            return Err(parse_err(format!("expected 2 fields, got {}", fields.len())));
        }
        let batch: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad batch_size `{}`", fields[0])))?;
        let ms: f64 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad step_latency_ms `{}`", fields[1])))?;
        if batch == 0 {
            return Err(parse_err("batch_size must be >= 1".into()));
        }
        if !(ms.is_finite() && ms > 0.0) {
            return Err(parse_err("step_latency_ms must be positive".into()));
        }
        samples.push((batch, ms));
    }
    if samples.len() < 2 {
        return Err(CostModelError::DegenerateFit);
    }
    Ok(samples)
}

/// Reference two-point calibration of the decode-step model
/// (batch 100 at 50 ms, batch 230 at 80 ms), used by fixtures and tests.
pub fn reference_two_point_model() -> LatencyModel {
    let (a0, a1) = fit_step_latency(&[(100, 50.0), (230, 80.0)]).expect("collinear fit");
    LatencyModel::new(a0, a1, 0.0, 0.05).expect("valid coefficients")
}
