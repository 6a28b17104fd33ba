//! Request-stream generation: arrival processes, sequence-length
//! distributions, trace loading, and online length-moment estimation.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors produced by workload construction and trace parsing.
#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid length distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid arrival process: {0}")]
    InvalidArrival(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("trace {path}, line {line}: {message}")]
    TraceParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("failed to read trace {path}: {source}")]
    TraceIo {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("length window is empty")]
    EmptyWindow,
}

/// One inference request: arrival time plus prompt and output lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestSpec {
    pub id: u64,
    pub arrival_ms: f64,
    /// Prompt tokens.
    pub l_in: u32,
    /// Output tokens to generate.
    pub l_out: u32,
}

impl RequestSpec {
    pub fn new(id: u64, arrival_ms: f64, l_in: u32, l_out: u32) -> Result<Self, WorkloadError> {
        if l_in < 1 {
            return Err(WorkloadError::InvalidRequest(format!(
                "request {id}: l_in must be >= 1"
            )));
        }
        if l_out < 1 {
            return Err(WorkloadError::InvalidRequest(format!(
                "request {id}: l_out must be >= 1"
            )));
        }
        if !arrival_ms.is_finite() || arrival_ms < 0.0 {
            return Err(WorkloadError::InvalidRequest(format!(
                "request {id}: arrival_ms must be finite and >= 0"
            )));
        }
        Ok(Self {
            id,
            arrival_ms,
            l_in,
            l_out,
        })
    }

    /// Total token footprint once the request has fully decoded.
    pub fn total_tokens(&self) -> u64 {
        u64::from(self.l_in) + u64::from(self.l_out)
    }

    /// Checks the configured maximum sequence length.
    pub fn check_max_len(&self, l_max: u32) -> Result<(), WorkloadError> {
        if self.total_tokens() > u64::from(l_max) {
            return Err(WorkloadError::InvalidRequest(format!(
                "request {}: l_in + l_out = {} exceeds l_max = {}",
                self.id,
                self.total_tokens(),
                l_max
            )));
        }
        Ok(())
    }
}

/// A piecewise-constant arrival-rate segment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    pub start_ms: f64,
    pub rate_qps: f64,
}

/// Request arrival process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArrivalProcess {
    /// Every request arrives at t = 0 (saturation experiments).
    AllAtOnce,
    /// Homogeneous Poisson process.
    Poisson { rate_qps: f64 },
    /// Piecewise-constant-rate Poisson process.
    PiecewisePoisson { segments: Vec<RateSegment> },
    /// Arrivals come from a trace file; see [`load_trace`].
    Trace { path: String },
}

impl ArrivalProcess {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        match self {
            ArrivalProcess::AllAtOnce | ArrivalProcess::Trace { .. } => Ok(()),
            ArrivalProcess::Poisson { rate_qps } => {
                if !(rate_qps.is_finite() && *rate_qps > 0.0) {
                    return Err(WorkloadError::InvalidArrival(format!(
                        "poisson rate must be positive, got {rate_qps}"
                    )));
                }
                Ok(())
            }
            ArrivalProcess::PiecewisePoisson { segments } => {
                if segments.is_empty() {
                    return Err(WorkloadError::InvalidArrival(
                        "piecewise-poisson requires at least one segment".into(),
                    ));
                }
                if segments[0].start_ms != 0.0 {
                    return Err(WorkloadError::InvalidArrival(
                        "first segment must start at 0 ms".into(),
                    ));
                }
                for pair in segments.windows(2) {
                    if pair[1].start_ms <= pair[0].start_ms {
                        return Err(WorkloadError::InvalidArrival(
                            "segment starts must be strictly increasing".into(),
                        ));
                    }
                }
                for seg in segments {
                    if !(seg.rate_qps.is_finite() && seg.rate_qps > 0.0) {
                        return Err(WorkloadError::InvalidArrival(format!(
                            "segment rate must be positive, got {}",
                            seg.rate_qps
                        )));
                    }
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LengthKind {
    Fixed { value: u32 },
    Lognormal { log_mean: f64, log_std: f64 },
    Empirical { samples: Vec<u32> },
}

/// Sequence-length distribution, truncated to `[1, l_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthDistribution {
    kind: LengthKind,
    l_max: u32,
}

impl LengthDistribution {
    pub fn fixed(value: u32, l_max: u32) -> Result<Self, WorkloadError> {
        if l_max < 1 {
            return Err(WorkloadError::InvalidDistribution("l_max must be >= 1".into()));
        }
        if value < 1 || value > l_max {
            return Err(WorkloadError::InvalidDistribution(format!(
                "fixed value {value} outside [1, {l_max}]"
            )));
        }
        Ok(Self {
            kind: LengthKind::Fixed { value },
            l_max,
        })
    }

    pub fn lognormal(log_mean: f64, log_std: f64, l_max: u32) -> Result<Self, WorkloadError> {
        if l_max < 1 {
            return Err(WorkloadError::InvalidDistribution("l_max must be >= 1".into()));
        }
        if !log_mean.is_finite() || !log_std.is_finite() || log_std < 0.0 {
            return Err(WorkloadError::InvalidDistribution(format!(
                "lognormal parameters must be finite with log_std >= 0, got ({log_mean}, {log_std})"
            )));
        }
        Ok(Self {
            kind: LengthKind::Lognormal { log_mean, log_std },
            l_max,
        })
    }

    pub fn empirical(samples: Vec<u32>, l_max: u32) -> Result<Self, WorkloadError> {
        if l_max < 1 {
            return Err(WorkloadError::InvalidDistribution("l_max must be >= 1".into()));
        }
        if samples.is_empty() {
            return Err(WorkloadError::InvalidDistribution(
                "empirical distribution requires at least one sample".into(),
            ));
        }
        if let Some(bad) = samples.iter().find(|&&s| s < 1 || s > l_max) {
            return Err(WorkloadError::InvalidDistribution(format!(
                "empirical sample {bad} outside [1, {l_max}]"
            )));
        }
        Ok(Self {
            kind: LengthKind::Empirical { samples },
            l_max,
        })
    }

    pub fn l_max(&self) -> u32 {
        self.l_max
    }

    fn sample_one(&self, rng: &mut ChaCha8Rng) -> u32 {
        match &self.kind {
            LengthKind::Fixed { value } => *value,
            LengthKind::Lognormal { log_mean, log_std } => {
                let dist = LogNormal::new(*log_mean, *log_std)
                    .expect("parameters validated at construction");
                let x: f64 = dist.sample(rng);
                (x.round() as i64).clamp(1, i64::from(self.l_max)) as u32
            }
            LengthKind::Empirical { samples } => {
                let idx = Uniform::new(0, samples.len())
                    .expect("nonempty validated at construction")
                    .sample(rng);
                samples[idx]
            }
        }
    }

    /// Analytic mean and variance, used as prior moments before any
    /// requests have been observed. Truncation at `l_max` is ignored.
    pub fn mean_var(&self) -> (f64, f64) {
        match &self.kind {
            LengthKind::Fixed { value } => (f64::from(*value), 0.0),
            LengthKind::Lognormal { log_mean, log_std } => {
                let s2 = log_std * log_std;
                let mean = (log_mean + s2 / 2.0).exp();
                let var = (s2.exp() - 1.0) * (2.0 * log_mean + s2).exp();
                (mean, var)
            }
            LengthKind::Empirical { samples } => {
                let n = samples.len() as f64;
                let mean = samples.iter().map(|&s| f64::from(s)).sum::<f64>() / n;
                let var = samples
                    .iter()
                    .map(|&s| {
                        let d = f64::from(s) - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n;
                (mean, var)
            }
        }
    }
}

/// Per-request mean and variance of the total token footprint,
/// i.e. the sum of the prompt-length and output-length moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthMoments {
    /// Expected tokens per request (prompt + output).
    pub m: f64,
    /// Variance of tokens per request.
    pub v: f64,
}

impl LengthMoments {
    pub fn new(m: f64, v: f64) -> Result<Self, WorkloadError> {
        if !m.is_finite() || m < 2.0 {
            return Err(WorkloadError::InvalidRequest(format!(
                "moment mean must be >= 2 (both lengths are >= 1), got {m}"
            )));
        }
        if !v.is_finite() || v < 0.0 {
            return Err(WorkloadError::InvalidRequest(format!(
                "moment variance must be >= 0, got {v}"
            )));
        }
        Ok(Self { m, v })
    }
}

/// Draws `n` (prompt, output) length pairs. Deterministic for a fixed seed.
pub fn sample_length_pairs(
    dist_in: &LengthDistribution,
    dist_out: &LengthDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<(u32, u32)>, WorkloadError> {
    if n == 0 {
        return Err(WorkloadError::InvalidRequest("n must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| (dist_in.sample_one(&mut rng), dist_out.sample_one(&mut rng)))
        .collect())
}

/// Generates `count` nondecreasing arrival timestamps in milliseconds.
/// Deterministic for a fixed seed.
pub fn generate_arrivals(
    proc: &ArrivalProcess,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>, WorkloadError> {
    proc.validate()?;
    if count == 0 {
        return Err(WorkloadError::InvalidArrival("count must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match proc {
        ArrivalProcess::AllAtOnce => Ok(vec![0.0; count]),
        ArrivalProcess::Poisson { rate_qps } => {
            // Exponential inter-arrivals with mean 1000 / rate milliseconds.
            let exp = Exp::new(rate_qps / 1000.0).expect("rate validated");
            let mut t = 0.0;
            Ok((0..count)
                .map(|_| {
                    t += exp.sample(&mut rng);
                    t
                })
                .collect())
        }
        ArrivalProcess::PiecewisePoisson { segments } => {
            let mut out = Vec::with_capacity(count);
            let mut t = 0.0_f64;
            let mut seg_idx = 0usize;
            while out.len() < count {
                let boundary = segments
                    .get(seg_idx + 1)
                    .map_or(f64::INFINITY, |s| s.start_ms);
                let rate = segments[seg_idx].rate_qps;
                let exp = Exp::new(rate / 1000.0).expect("rate validated");
                let dt: f64 = exp.sample(&mut rng);
                // Memorylessness lets us redraw when crossing a boundary.
                if t + dt <= boundary {
                    t += dt;
                    out.push(t);
                } else {
                    t = boundary;
                    seg_idx += 1;
                }
            }
            Ok(out)
        }
        ArrivalProcess::Trace { .. } => Err(WorkloadError::InvalidArrival(
            "trace arrivals must be loaded with load_trace, not generated".into(),
        )),
    }
}

const TRACE_HEADER: &str = "arrival_ms,l_in,l_out";

/// Loads a request trace from a CSV file with header `arrival_ms,l_in,l_out`.
///
/// Ids are assigned by row order; the result is sorted by arrival time,
/// stable by id.
pub fn load_trace(path: &Path) -> Result<Vec<RequestSpec>, WorkloadError> {
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| WorkloadError::TraceIo {
        path: display.clone(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == TRACE_HEADER => {}
        Some((_, header)) => {
            return Err(WorkloadError::TraceParse {
                path: display,
                line: 1,
                message: format!("expected header `{TRACE_HEADER}`, got `{}`", header.trim()),
            })
        }
        None => {
            return Err(WorkloadError::TraceParse {
                path: display,
                line: 1,
                message: "empty file".into(),
            })
        }
    }

    let mut specs = Vec::new();
    let mut id = 0u64;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(WorkloadError::TraceParse {
                path: display,
                line: line_no,
                message: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse_err = |message: String| WorkloadError::TraceParse {
            path: display.clone(),
            line: line_no,
            message,
        };
        let arrival_ms: f64 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad arrival_ms `{}`", fields[0])))?;
        let l_in: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad l_in `{}`", fields[1])))?;
        let l_out: u32 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad l_out `{}`", fields[2])))?;
        let spec = RequestSpec::new(id, arrival_ms, l_in, l_out)
            .map_err(|e| parse_err(e.to_string()))?;
        specs.push(spec);
        id += 1;
    }
    if specs.is_empty() {
        return Err(WorkloadError::TraceParse {
            path: display,
            line: 1,
            message: "trace contains no requests".into(),
        });
    }
    specs.sort_by(|a, b| {
        a.arrival_ms
            .partial_cmp(&b.arrival_ms)
            .expect("arrivals validated finite")
            .then(a.id.cmp(&b.id))
    });
    Ok(specs)
}

/// Population mean/variance of the summed lengths over an observation window.
pub fn estimate_moments(window: &[(u32, u32)]) -> Result<LengthMoments, WorkloadError> {
    if window.is_empty() {
        return Err(WorkloadError::EmptyWindow);
    }
    let n = window.len() as f64;
    let (sum_in, sum_out) = window.iter().fold((0.0, 0.0), |(a, b), &(i, o)| {
        (a + f64::from(i), b + f64::from(o))
    });
    let mean_in = sum_in / n;
    let mean_out = sum_out / n;
    let (var_in, var_out) = window.iter().fold((0.0, 0.0), |(a, b), &(i, o)| {
        let di = f64::from(i) - mean_in;
        let dr = f64::from(o) - mean_out;
        (a + di * di, b + dr * dr)
    });
    LengthMoments::new(mean_in + mean_out, (var_in + var_out) / n)
}

/// Sliding window over recently admitted requests, feeding the
/// scheduler's length statistics.
#[derive(Debug, Clone)]
pub struct MomentWindow {
    window: VecDeque<(u32, u32)>,
    capacity: usize,
}

impl MomentWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            window: VecDeque::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, l_in: u32, l_out: u32) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back((l_in, l_out));
    }

    /// Current window moments, or `None` when nothing has been observed
    /// (callers fall back to configured priors).
    pub fn moments(&self) -> Option<LengthMoments> {
        if self.window.is_empty() {
            return None;
        }
        let pairs: Vec<(u32, u32)> = self.window.iter().copied().collect();
        Some(estimate_moments(&pairs).expect("window nonempty"))
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }
}
