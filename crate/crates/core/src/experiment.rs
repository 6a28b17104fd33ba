//! Experiment runner: config parsing and validation, workload assembly,
//! single runs, sweeps, and SLA capacity search.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{self, CostModelError, LatencyModel};
use crate::engine::{self, EngineConfig, EngineError, EngineMode, PreemptionMode, SimResult, StepRecord};
use crate::memory::{MemoryConfig, MemoryError};
use crate::metrics::{self, MetricsError, SlaStatistic, Summary};
use crate::policy::{BatchPolicy, PolicyError, PolicyKind, PolicyParams};
use crate::workload::{
    self, ArrivalProcess, LengthDistribution, LengthMoments, RequestSpec, WorkloadError,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config validation failed: {0}")]
    Validation(String),

    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Schema {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error(transparent)]
    Workload(#[from] WorkloadError),

    #[error(transparent)]
    CostModel(#[from] CostModelError),

    #[error(transparent)]
    Memory(#[from] MemoryError),

    #[error(transparent)]
    Policy(#[from] PolicyError),

    #[error(transparent)]
    Engine(#[from] EngineError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

// ---------------------------------------------------------------------------
// Config schema
// ---------------------------------------------------------------------------

/// Length distribution as written in config files; the truncation bound
/// comes from the workload-level `l_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LengthSpec {
    Fixed { value: u32 },
    Lognormal { log_mean: f64, log_std: f64 },
    Empirical { samples: Vec<u32> },
}

impl LengthSpec {
    fn build(&self, l_max: u32) -> Result<LengthDistribution, WorkloadError> {
        match self {
            LengthSpec::Fixed { value } => LengthDistribution::fixed(*value, l_max),
            LengthSpec::Lognormal { log_mean, log_std } => {
                LengthDistribution::lognormal(*log_mean, *log_std, l_max)
            }
            LengthSpec::Empirical { samples } => {
                LengthDistribution::empirical(samples.clone(), l_max)
            }
        }
    }
}

fn default_l_max() -> u32 {
    4096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    #[serde(default)]
    pub length_in: Option<LengthSpec>,
    #[serde(default)]
    pub length_out: Option<LengthSpec>,
    #[serde(default)]
    pub count: Option<usize>,
    /// Alternative stopping rule: generate arrivals until this horizon.
    #[serde(default)]
    pub duration_ms: Option<f64>,
    #[serde(default = "default_l_max")]
    pub l_max: u32,
}

/// Latency model given inline or calibrated from a measurement CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencySpec {
    Coefficients {
        decode_base_ms: f64,
        decode_per_seq_ms: f64,
        prefill_base_ms: f64,
        prefill_per_token_ms: f64,
    },
    Calibrated {
        calibration_csv: String,
        #[serde(default)]
        prefill_base_ms: f64,
        prefill_per_token_ms: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySpec {
    pub m_max_bytes: u64,
    pub bytes_per_token: u64,
    pub epsilon_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    #[serde(default)]
    pub b_fixed: Option<u32>,
    #[serde(default = "defaults::b_min")]
    pub b_min: u32,
    #[serde(default = "defaults::b_max")]
    pub b_max: u32,
    #[serde(default = "defaults::d_sla_ms")]
    pub d_sla_ms: f64,
    #[serde(default = "defaults::epsilon_d_ms")]
    pub epsilon_d_ms: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: u32,
    #[serde(default = "defaults::delta")]
    pub delta: u32,
    #[serde(default = "defaults::refresh_period")]
    pub refresh_period: u32,
    #[serde(default = "defaults::w_sla")]
    pub w_sla: usize,
    #[serde(default = "defaults::w_len")]
    pub w_len: usize,
    /// Statistic compared against the SLA target.
    #[serde(default)]
    pub sla_statistic: SlaStatistic,
}

mod defaults {
    pub fn b_min() -> u32 {
        1
    }
    pub fn b_max() -> u32 {
        256
    }
    pub fn d_sla_ms() -> f64 {
        50.0
    }
    pub fn epsilon_d_ms() -> f64 {
        2.0
    }
    pub fn alpha() -> u32 {
        8
    }
    pub fn delta() -> u32 {
        2
    }
    pub fn refresh_period() -> u32 {
        100
    }
    pub fn w_sla() -> usize {
        20
    }
    pub fn w_len() -> usize {
        256
    }
}

impl PolicySpec {
    pub fn params(&self) -> PolicyParams {
        PolicyParams {
            b_min: self.b_min,
            b_max: self.b_max,
            d_sla_ms: self.d_sla_ms,
            epsilon_d_ms: self.epsilon_d_ms,
            alpha: self.alpha,
            delta: self.delta,
            refresh_period: self.refresh_period,
            w_sla: self.w_sla,
            w_len: self.w_len,
        }
    }

    pub fn build(&self) -> Result<BatchPolicy, PolicyError> {
        BatchPolicy::new(self.kind, self.b_fixed, self.params())
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            PolicyKind::Static => "static",
            PolicyKind::Memory => "memory",
            PolicyKind::Sla => "sla",
            PolicyKind::Combined => "combined",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyList {
    One(PolicySpec),
    Many(Vec<PolicySpec>),
}

impl PolicyList {
    pub fn as_slice(&self) -> &[PolicySpec] {
        match self {
            PolicyList::One(p) => std::slice::from_ref(p),
            PolicyList::Many(ps) => ps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineSpec {
    #[serde(default = "defaults_engine::mode")]
    pub mode: EngineMode,
    #[serde(default)]
    pub swap_penalty_ms: f64,
    #[serde(default = "defaults_engine::max_queue")]
    pub max_queue: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults_engine {
    use crate::engine::EngineMode;
    pub fn mode() -> EngineMode {
        EngineMode::PdSeparate
    }
    pub fn max_queue() -> usize {
        1_000_000
    }
}

impl Default for EngineSpec {
    fn default() -> Self {
        Self {
            mode: EngineMode::PdSeparate,
            swap_penalty_ms: 0.0,
            max_queue: defaults_engine::max_queue(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputSpec {
    #[serde(default)]
    pub summary_json: Option<String>,
    #[serde(default)]
    pub steps_csv: Option<String>,
}

/// One experiment: workload, models, one or more policies, engine knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub workload: WorkloadSpec,
    pub latency: LatencySpec,
    pub memory: MemorySpec,
    pub policy: PolicyList,
    #[serde(default)]
    pub engine: EngineSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|source| ExperimentError::Schema {
            path: path.to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }
}

// ---------------------------------------------------------------------------
// Building and running
// ---------------------------------------------------------------------------

/// A validated experiment with materialized models. The workload is
/// rebuilt per run so probes can override the arrival rate.
#[derive(Debug, Clone)]
pub struct BuiltExperiment {
    pub config: ExperimentConfig,
    pub latency: LatencyModel,
    pub memory: MemoryConfig,
    pub engine: EngineConfig,
    pub prior_moments: LengthMoments,
    base_dir: PathBuf,
}

fn validate_workload_spec(w: &WorkloadSpec) -> Result<(), ExperimentError> {
    w.arrival.validate()?;
    let is_trace = matches!(w.arrival, ArrivalProcess::Trace { .. });
    if !is_trace {
        if w.length_in.is_none() || w.length_out.is_none() {
            return Err(ExperimentError::Validation(
                "length_in and length_out are required unless arrivals come from a trace".into(),
            ));
        }
        match (w.count, w.duration_ms) {
            (Some(c), None) if c >= 1 => {}
            (None, Some(d)) if d.is_finite() && d > 0.0 => {
                if matches!(w.arrival, ArrivalProcess::AllAtOnce) {
                    return Err(ExperimentError::Validation(
                        "all-at-once arrivals need a request count, not a duration".into(),
                    ));
                }
            }
            _ => {
                return Err(ExperimentError::Validation(
                    "exactly one of count (>= 1) or duration_ms (> 0) must be set".into(),
                ))
            }
        }
    }
    if w.l_max < 2 {
        return Err(ExperimentError::Validation("l_max must be >= 2".into()));
    }
    Ok(())
}

pub fn build(config: ExperimentConfig, base_dir: &Path) -> Result<BuiltExperiment, ExperimentError> {
    validate_workload_spec(&config.workload)?;

    let latency = match &config.latency {
        LatencySpec::Coefficients {
            decode_base_ms,
            decode_per_seq_ms,
            prefill_base_ms,
            prefill_per_token_ms,
        } => LatencyModel::new(
            *decode_base_ms,
            *decode_per_seq_ms,
            *prefill_base_ms,
            *prefill_per_token_ms,
        )?,
        LatencySpec::Calibrated {
            calibration_csv,
            prefill_base_ms,
            prefill_per_token_ms,
        } => {
            let samples = costmodel::load_calibration(&base_dir.join(calibration_csv))?;
            let (a0, a1) = costmodel::fit_step_latency(&samples)?;
            LatencyModel::new(a0, a1, *prefill_base_ms, *prefill_per_token_ms)?
        }
    };

    let memory = MemoryConfig::new(
        config.memory.m_max_bytes,
        config.memory.bytes_per_token,
        config.memory.epsilon_m,
    )?;

    if config.policy.as_slice().is_empty() {
        return Err(ExperimentError::Validation(
            "at least one policy must be configured".into(),
        ));
    }
    for p in config.policy.as_slice() {
        p.build()?; // validates kind-specific fields and hyper-parameters
    }

    let engine = EngineConfig {
        mode: config.engine.mode,
        swap_penalty_ms: config.engine.swap_penalty_ms,
        preemption: PreemptionMode::Recompute,
        max_queue: config.engine.max_queue,
        seed: config.engine.seed,
    };
    if !(engine.swap_penalty_ms.is_finite() && engine.swap_penalty_ms >= 0.0) {
        return Err(ExperimentError::Validation(
            "swap_penalty_ms must be finite and >= 0".into(),
        ));
    }

    let prior_moments = prior_moments_for(&config.workload, base_dir)?;

    Ok(BuiltExperiment {
        config,
        latency,
        memory,
        engine,
        prior_moments,
        base_dir: base_dir.to_path_buf(),
    })
}

/// Loads, parses, and validates a config file in one step.
pub fn load_and_build(path: &Path) -> Result<BuiltExperiment, ExperimentError> {
    let config = ExperimentConfig::load(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    build(config, base)
}

fn prior_moments_for(w: &WorkloadSpec, base_dir: &Path) -> Result<LengthMoments, ExperimentError> {
    match &w.arrival {
        ArrivalProcess::Trace { path } => {
            let specs = workload::load_trace(&base_dir.join(path))?;
            let pairs: Vec<(u32, u32)> = specs.iter().map(|s| (s.l_in, s.l_out)).collect();
            Ok(workload::estimate_moments(&pairs)?)
        }
        _ => {
            let d_in = w
                .length_in
                .as_ref()
                .expect("validated")
                .build(w.l_max)?;
            let d_out = w
                .length_out
                .as_ref()
                .expect("validated")
                .build(w.l_max)?;
            let (mi, vi) = d_in.mean_var();
            let (mo, vo) = d_out.mean_var();
            Ok(LengthMoments {
                m: (mi + mo).max(2.0),
                v: (vi + vo).max(0.0),
            })
        }
    }
}

impl BuiltExperiment {
    /// Materializes the request stream. `qps_override` replaces the
    /// arrival process with a Poisson process at that rate (used by
    /// capacity probes); `seed_override` replaces the engine seed.
    pub fn build_requests(
        &self,
        seed_override: Option<u64>,
        qps_override: Option<f64>,
    ) -> Result<Vec<RequestSpec>, ExperimentError> {
        let w = &self.config.workload;
        let seed = seed_override.unwrap_or(self.engine.seed);

        if let ArrivalProcess::Trace { path } = &w.arrival {
            if qps_override.is_some() {
                return Err(ExperimentError::Validation(
                    "cannot override the arrival rate of a trace workload".into(),
                ));
            }
            let specs = workload::load_trace(&self.base_dir.join(path))?;
            for s in &specs {
                s.check_max_len(w.l_max)?;
            }
            return Ok(specs);
        }

        let arrival = match qps_override {
            Some(rate) => ArrivalProcess::Poisson { rate_qps: rate },
            None => w.arrival.clone(),
        };
        let d_in = w.length_in.as_ref().expect("validated").build(w.l_max)?;
        let d_out = w.length_out.as_ref().expect("validated").build(w.l_max)?;

        let arrivals = match (w.count, w.duration_ms) {
            (Some(count), _) => workload::generate_arrivals(&arrival, count, seed)?,
            (None, Some(horizon)) => {
                // Generate in blocks until the horizon is crossed.
                let mut count = 256usize;
                loop {
                    let candidate = workload::generate_arrivals(&arrival, count, seed)?;
                    if candidate.last().copied().unwrap_or(0.0) > horizon {
                        let trimmed: Vec<f64> = candidate
                            .into_iter()
                            .take_while(|&t| t <= horizon)
                            .collect();
                        if trimmed.is_empty() {
                            return Err(ExperimentError::Validation(
                                "no arrivals within duration_ms".into(),
                            ));
                        }
                        break trimmed;
                    }
                    count *= 2;
                    if count > 50_000_000 {
                        return Err(ExperimentError::Validation(
                            "duration_ms produces too many requests".into(),
                        ));
                    }
                }
            }
            (None, None) => unreachable!("validated"),
        };

        let lengths = workload::sample_length_pairs(&d_in, &d_out, arrivals.len(), seed)?;
        let mut specs = Vec::with_capacity(arrivals.len());
        for (i, (t, (l_in, l_out))) in arrivals.iter().zip(lengths).enumerate() {
            // Joint truncation: the pair must respect l_in + l_out <= l_max.
            let l_in = l_in.min(w.l_max - 1);
            let l_out = l_out.min(w.l_max - l_in).max(1);
            specs.push(RequestSpec::new(i as u64, *t, l_in, l_out)?);
        }
        Ok(specs)
    }

    /// One simulation run with the given policy.
    pub fn simulate(
        &self,
        policy_spec: &PolicySpec,
        seed_override: Option<u64>,
        qps_override: Option<f64>,
    ) -> Result<(SimResult, Summary), ExperimentError> {
        let requests = self.build_requests(seed_override, qps_override)?;
        let policy = policy_spec.build()?;
        let result = engine::run(
            &requests,
            policy,
            &self.latency,
            &self.memory,
            &self.engine,
            self.prior_moments,
        )?;
        let summary = metrics::summarize(&result)?;
        Ok((result, summary))
    }
}

// ---------------------------------------------------------------------------
// Capacity search
// ---------------------------------------------------------------------------

/// A capacity probe counts as overloaded when the run takes more than
/// this factor of its arrival span: the server is no longer keeping up
/// with the offered rate.
pub const SPAN_STRETCH_LIMIT: f64 = 1.25;

/// Largest Poisson arrival rate the configured system handles while
/// meeting the SLA, per policy. Probes replace the arrival process with
/// a Poisson process and reuse one seed (common random numbers). A probe
/// is compliant when the run completes, the latency statistic meets the
/// SLA, and the makespan stays within [`SPAN_STRETCH_LIMIT`] of the
/// arrival span.
pub fn capacity_search(
    built: &BuiltExperiment,
    policy_spec: &PolicySpec,
    qps_lo: f64,
    qps_hi: f64,
    tol_qps: f64,
) -> Result<f64, ExperimentError> {
    let probe_seed = built.engine.seed;
    let probe = |qps: f64| -> Result<bool, MetricsError> {
        let (result, summary) = match built.simulate(policy_spec, Some(probe_seed), Some(qps)) {
            Ok(ok) => ok,
            // Aborts (queue overflow) mean the rate is not sustainable.
            Err(ExperimentError::Engine(EngineError::QueueOverflow { .. })) => return Ok(false),
            Err(e) => return Err(MetricsError::ProbeFailed(e.to_string())),
        };
        if !metrics::sla_compliant(
            &summary,
            policy_spec.d_sla_ms,
            policy_spec.epsilon_d_ms,
            policy_spec.sla_statistic,
        ) {
            return Ok(false);
        }
        let arrival_span = result
            .request_records
            .iter()
            .map(|r| r.arrival_ms)
            .fold(0.0f64, f64::max);
        if arrival_span > 0.0 && result.totals.finished_ms > SPAN_STRETCH_LIMIT * arrival_span {
            return Ok(false);
        }
        Ok(true)
    };
    Ok(metrics::capacity_search(qps_lo, qps_hi, tol_qps, probe)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityReport {
    pub d_sla_ms: f64,
    pub tol_qps: f64,
    pub capacities: Vec<PolicyCapacity>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyCapacity {
    pub policy: String,
    pub capacity_qps: f64,
}

/// Runs the capacity search for every configured policy.
pub fn capacity_report(
    built: &BuiltExperiment,
    qps_lo: f64,
    qps_hi: f64,
    tol_qps: f64,
) -> Result<CapacityReport, ExperimentError> {
    let specs = built.config.policy.as_slice();
    let mut capacities = Vec::with_capacity(specs.len());
    for spec in specs {
        let capacity_qps = capacity_search(built, spec, qps_lo, qps_hi, tol_qps)?;
        capacities.push(PolicyCapacity {
            policy: spec.label().to_string(),
            capacity_qps,
        });
    }
    Ok(CapacityReport {
        d_sla_ms: specs.first().map_or(0.0, |s| s.d_sla_ms),
        tol_qps,
        capacities,
    })
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    BatchSize,
    Qps,
    DSla,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "batch_size" => Ok(SweepAxis::BatchSize),
            "qps" => Ok(SweepAxis::Qps),
            "d_sla" => Ok(SweepAxis::DSla),
            other => Err(format!("unknown sweep axis `{other}`")),
        }
    }
}

pub const SWEEP_HEADER: &str = "axis,value,throughput_tps,tbt_mean_ms,tbt_p95_ms,tbt_p99_ms,\
mean_batch_occupancy,mean_token_occupancy_frac,overflow_rate,sla_batch_model";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub summary: Summary,
    /// Largest batch the calibrated model allows at the row's SLA target.
    pub sla_batch_model: u32,
}

/// Runs one simulation per axis value, in input order.
pub fn sweep(
    built: &BuiltExperiment,
    axis: SweepAxis,
    values: &[f64],
    seed_override: Option<u64>,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if values.is_empty() {
        return Err(ExperimentError::Validation("sweep values are empty".into()));
    }
    let policies = built.config.policy.as_slice();
    if policies.len() != 1 {
        return Err(ExperimentError::Validation(
            "sweeps require exactly one configured policy".into(),
        ));
    }
    let base_policy = &policies[0];

    match axis {
        SweepAxis::BatchSize => {
            if base_policy.kind != PolicyKind::Static {
                return Err(ExperimentError::Validation(
                    "batch_size sweeps require a static policy".into(),
                ));
            }
            for &v in values {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(ExperimentError::Validation(format!(
                        "batch_size values must be positive integers, got {v}"
                    )));
                }
            }
        }
        SweepAxis::Qps => {
            if !matches!(
                built.config.workload.arrival,
                ArrivalProcess::Poisson { .. }
            ) {
                return Err(ExperimentError::Validation(
                    "qps sweeps require a poisson arrival process".into(),
                ));
            }
            for &v in values {
                if !(v.is_finite() && v > 0.0) {
                    return Err(ExperimentError::Validation(format!(
                        "qps values must be positive, got {v}"
                    )));
                }
            }
        }
        SweepAxis::DSla => {
            if !matches!(base_policy.kind, PolicyKind::Sla | PolicyKind::Combined) {
                return Err(ExperimentError::Validation(
                    "d_sla sweeps require an sla or combined policy".into(),
                ));
            }
            for &v in values {
                if !(v.is_finite() && v > 0.0) {
                    return Err(ExperimentError::Validation(format!(
                        "d_sla values must be positive, got {v}"
                    )));
                }
            }
        }
    }

    let axis_name = match axis {
        SweepAxis::BatchSize => "batch_size",
        SweepAxis::Qps => "qps",
        SweepAxis::DSla => "d_sla",
    };

    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut policy = base_policy.clone();
        let mut qps_override = None;
        match axis {
            SweepAxis::BatchSize => {
                policy.b_fixed = Some(value as u32);
                policy.b_max = policy.b_max.max(value as u32);
            }
            SweepAxis::Qps => qps_override = Some(value),
            SweepAxis::DSla => policy.d_sla_ms = value,
        }
        let (_, summary) = built.simulate(&policy, seed_override, qps_override)?;
        let sla_target = match axis {
            SweepAxis::DSla => value,
            _ => policy.d_sla_ms,
        };
        rows.push(SweepRow {
            axis: axis_name.to_string(),
            value,
            summary,
            sla_batch_model: built.latency.max_batch_within_sla(sla_target)?,
        });
    }
    Ok(rows)
}

pub fn sweep_rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.summary;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            s.throughput_tps,
            s.tbt_mean_ms,
            s.tbt_p95_ms,
            s.tbt_p99_ms,
            s.mean_batch_occupancy,
            s.mean_token_occupancy_frac,
            s.overflow_rate,
            r.sla_batch_model
        )
        .expect("write to string");
    }
    out
}

/// Parses a sweep CSV produced by [`sweep_rows_to_csv`].
pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == SWEEP_HEADER => {}
        _ => {
            return Err(ExperimentError::Validation(
                "sweep csv: unexpected header".into(),
            ))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(ExperimentError::Validation(format!(
                "sweep csv line {}: expected 10 fields",
                i + 2
            )));
        }
        let num = |s: &str| -> Result<f64, ExperimentError> {
            s.trim()
                .parse()
                .map_err(|_| ExperimentError::Validation(format!("sweep csv: bad number `{s}`")))
        };
        rows.push(SweepRow {
            axis: f[0].to_string(),
            value: num(f[1])?,
            summary: Summary {
                throughput_tps: num(f[2])?,
                tbt_mean_ms: num(f[3])?,
                tbt_p95_ms: num(f[4])?,
                tbt_p99_ms: num(f[5])?,
                mean_batch_occupancy: num(f[6])?,
                mean_token_occupancy_frac: num(f[7])?,
                overflow_rate: num(f[8])?,
            },
            sla_batch_model: num(f[9])? as u32,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Step log IO
// ---------------------------------------------------------------------------

pub const STEP_HEADER: &str =
    "t_ms,b_target,n_decode,prefill_tokens,step_ms,tokens_out,occupancy,overflow";

pub fn steps_to_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from(STEP_HEADER);
    out.push('\n');
    for s in steps {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.t_ms,
            s.b_target,
            s.n_decode,
            s.n_prefill_tokens,
            s.step_ms,
            s.tokens_out,
            s.occupancy_tokens,
            u8::from(s.overflow)
        )
        .expect("write to string");
    }
    out
}

/// Parses a per-step event log produced by [`steps_to_csv`].
pub fn parse_steps_csv(text: &str) -> Result<Vec<StepRecord>, ExperimentError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == STEP_HEADER => {}
        _ => {
            return Err(ExperimentError::Validation(
                "step csv: unexpected header".into(),
            ))
        }
    }
    let mut steps = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(ExperimentError::Validation(format!(
                "step csv line {}: expected 8 fields",
                i + 2
            )));
        }
        let bad = |s: &str| ExperimentError::Validation(format!("step csv: bad field `{s}`"));
        steps.push(StepRecord {
            t_ms: f[0].trim().parse().map_err(|_| bad(f[0]))?,
            b_target: f[1].trim().parse().map_err(|_| bad(f[1]))?,
            n_decode: f[2].trim().parse().map_err(|_| bad(f[2]))?,
            n_prefill_tokens: f[3].trim().parse().map_err(|_| bad(f[3]))?,
            step_ms: f[4].trim().parse().map_err(|_| bad(f[4]))?,
            tokens_out: f[5].trim().parse().map_err(|_| bad(f[5]))?,
            occupancy_tokens: f[6].trim().parse().map_err(|_| bad(f[6]))?,
            overflow: f[7].trim() == "1",
        });
    }
    Ok(steps)
}

/// Serializes a summary (or labelled summaries for multi-policy configs)
/// as deterministic, pretty-printed JSON.
pub fn summaries_to_json(summaries: &[(String, Summary)]) -> String {
    if summaries.len() == 1 {
        serde_json::to_string_pretty(&summaries[0].1).expect("serializable")
    } else {
        let map: serde_json::Map<String, serde_json::Value> = summaries
            .iter()
            .map(|(label, s)| {
                (
                    label.clone(),
                    serde_json::to_value(s).expect("serializable"),
                )
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("serializable")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_config_json() -> String {
        r#"{
            "workload": {
                "arrival": {"kind": "all-at-once"},
                "length_in": {"kind": "fixed", "value": 8},
                "length_out": {"kind": "fixed", "value": 16},
                "count": 12,
                "l_max": 512
            },
            "latency": {
                "decode_base_ms": 10.0, "decode_per_seq_ms": 1.0,
                "prefill_base_ms": 0.0, "prefill_per_token_ms": 0.5
            },
            "memory": {"m_max_bytes": 100000, "bytes_per_token": 1, "epsilon_m": 0.02},
            "policy": {"kind": "static", "b_fixed": 4},
            "engine": {"mode": "pd-separate", "swap_penalty_ms": 0.0, "max_queue": 1000, "seed": 7}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_config_builds_and_runs() {
        let cfg = ExperimentConfig::from_json(&minimal_config_json(), "inline").unwrap();
        let built = build(cfg, Path::new(".")).unwrap();
        let spec = built.config.policy.as_slice()[0].clone();
        let (result, summary) = built.simulate(&spec, None, None).unwrap();
        assert_eq!(result.totals.tokens_generated, 12 * 16);
        assert!(summary.throughput_tps > 0.0);
    }

    #[test]
    fn epsilon_out_of_range_is_validation_error() {
        let text = minimal_config_json().replace("\"epsilon_m\": 0.02", "\"epsilon_m\": 1.5");
        let cfg = ExperimentConfig::from_json(&text, "inline").unwrap();
        let err = build(cfg, Path::new("."));
        assert!(matches!(err, Err(ExperimentError::Memory(_))));
    }

    #[test]
    fn static_policy_requires_b_fixed() {
        let text = minimal_config_json().replace(", \"b_fixed\": 4", "");
        let cfg = ExperimentConfig::from_json(&text, "inline").unwrap();
        assert!(matches!(
            build(cfg, Path::new(".")),
            Err(ExperimentError::Policy(_))
        ));
    }

    #[test]
    fn policy_list_accepts_one_or_many() {
        let one = ExperimentConfig::from_json(&minimal_config_json(), "inline").unwrap();
        assert_eq!(one.policy.as_slice().len(), 1);
        let text = minimal_config_json().replace(
            r#""policy": {"kind": "static", "b_fixed": 4}"#,
            r#""policy": [{"kind": "static", "b_fixed": 4}, {"kind": "sla", "d_sla_ms": 20}]"#,
        );
        let many = ExperimentConfig::from_json(&text, "inline").unwrap();
        assert_eq!(many.policy.as_slice().len(), 2);
    }

    #[test]
    fn determinism_identical_summary_json() {
        let cfg = ExperimentConfig::from_json(&minimal_config_json(), "inline").unwrap();
        let built = build(cfg, Path::new(".")).unwrap();
        let spec = built.config.policy.as_slice()[0].clone();
        let (_, s1) = built.simulate(&spec, None, None).unwrap();
        let (_, s2) = built.simulate(&spec, None, None).unwrap();
        let j1 = summaries_to_json(&[("static".into(), s1)]);
        let j2 = summaries_to_json(&[("static".into(), s2)]);
        assert_eq!(j1, j2);
    }

    #[test]
    fn steps_csv_round_trip() {
        let cfg = ExperimentConfig::from_json(&minimal_config_json(), "inline").unwrap();
        let built = build(cfg, Path::new(".")).unwrap();
        let spec = built.config.policy.as_slice()[0].clone();
        let (result, _) = built.simulate(&spec, None, None).unwrap();
        let csv = steps_to_csv(&result.step_records);
        let parsed = parse_steps_csv(&csv).unwrap();
        assert_eq!(parsed, result.step_records);
    }

    #[test]
    fn duration_stopping_rule_generates_until_horizon() {
        let text = minimal_config_json()
            .replace(r#""arrival": {"kind": "all-at-once"}"#, r#""arrival": {"kind": "poisson", "rate_qps": 100.0}"#)
            .replace("\"count\": 12,", "\"duration_ms\": 2000.0,");
        let cfg = ExperimentConfig::from_json(&text, "inline").unwrap();
        let built = build(cfg, Path::new(".")).unwrap();
        let reqs = built.build_requests(None, None).unwrap();
        assert!(!reqs.is_empty());
        assert!(reqs.iter().all(|r| r.arrival_ms <= 2000.0));
        // Roughly 200 expected at 100 qps over 2 s.
        assert!(reqs.len() > 100 && reqs.len() < 400, "n = {}", reqs.len());
    }

    #[test]
    fn sweep_axis_validation() {
        let cfg = ExperimentConfig::from_json(&minimal_config_json(), "inline").unwrap();
        let built = build(cfg, Path::new(".")).unwrap();
        // qps axis on all-at-once arrivals is invalid.
        let err = sweep(&built, SweepAxis::Qps, &[1.0], None);
        assert!(matches!(err, Err(ExperimentError::Validation(_))));
        // empty values list is invalid.
        let err = sweep(&built, SweepAxis::BatchSize, &[], None);
        assert!(matches!(err, Err(ExperimentError::Validation(_))));
    }
}
