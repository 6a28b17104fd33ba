//! Batch-size decision procedures: static baseline, memory-constrained
//! and SLA-constrained dynamic batching, and their combination.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::{self, MemoryConfig};
use crate::workload::LengthMoments;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy inputs: {0}")]
    InvalidInputs(String),

    #[error("invalid policy configuration: {0}")]
    InvalidConfig(String),
}

/// Telemetry the scheduler sees at each decision point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyInputs {
    /// Batch size decided at the previous step.
    pub b_prev: u32,
    /// Requests waiting in queue or currently prefilling.
    pub n_prefill: u32,
    /// Requests currently decoding.
    pub n_decode: u32,
    /// Current window length moments.
    pub moments: LengthMoments,
    /// Trailing mean decode-step latency (0 when no history).
    pub tau_bar_ms: f64,
    /// Trailing mean decode batch size (0 when no history).
    pub b_bar: f64,
}

/// Which constraint produced the decided batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rationale {
    Static,
    MemoryBound,
    SlaBound,
    CombinedMin,
    CarriedOver,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyDecision {
    pub b_t: u32,
    pub rationale: Rationale,
}

/// Persistent search bounds and hyper-parameters of the SLA-constrained
/// policy's latency-feedback search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlaSearchState {
    pub b_low: u32,
    pub b_high: u32,
    pub d_sla_ms: f64,
    pub epsilon_d_ms: f64,
    /// Controls the width of the search interval.
    pub alpha: u32,
    /// Corrective drift applied to the far bound each adjustment.
    pub delta: u32,
    pub b_min: u32,
    pub b_max: u32,
}

impl SlaSearchState {
    pub fn new(
        d_sla_ms: f64,
        epsilon_d_ms: f64,
        alpha: u32,
        delta: u32,
        b_min: u32,
        b_max: u32,
    ) -> Result<Self, PolicyError> {
        if !(d_sla_ms.is_finite() && d_sla_ms > 0.0) {
            return Err(PolicyError::InvalidConfig(format!(
                "d_sla_ms must be positive, got {d_sla_ms}"
            )));
        }
        if !(epsilon_d_ms.is_finite() && epsilon_d_ms >= 0.0) {
            return Err(PolicyError::InvalidConfig(format!(
                "epsilon_d_ms must be >= 0, got {epsilon_d_ms}"
            )));
        }
        if b_min < 1 || b_min > b_max {
            return Err(PolicyError::InvalidConfig(format!(
                "need 1 <= b_min <= b_max, got [{b_min}, {b_max}]"
            )));
        }
        if alpha < 1 || delta < 1 || alpha <= delta {
            return Err(PolicyError::InvalidConfig(format!(
                "need alpha > delta >= 1 to keep the search interval open, got alpha = {alpha}, delta = {delta}"
            )));
        }
        Ok(Self {
            b_low: b_min,
            b_high: b_max,
            d_sla_ms,
            epsilon_d_ms,
            alpha,
            delta,
            b_min,
            b_max,
        })
    }
}

/// Fixed-batch baseline: always returns the preset batch size.
pub fn decide_static(b_fixed: u32) -> Result<PolicyDecision, PolicyError> {
    if b_fixed == 0 {
        return Err(PolicyError::InvalidConfig("b_fixed must be >= 1".into()));
    }
    Ok(PolicyDecision {
        b_t: b_fixed,
        rationale: Rationale::Static,
    })
}

/// Memory-constrained dynamic batching.
///
/// Adjusts only when there are both running decodes and pending prefill
/// work; otherwise the previous batch size carries over. The adjusted
/// size is the linearized bound clamped between the number of running
/// requests and the hard maximum.
pub fn decide_memory_bound(
    inputs: &PolicyInputs,
    token_capacity: u64,
    buffer: u64,
    b_max: u32,
) -> Result<PolicyDecision, PolicyError> {
    if inputs.b_prev == 0 {
        return Err(PolicyError::InvalidInputs("b_prev must be >= 1".into()));
    }
    if b_max == 0 {
        return Err(PolicyError::InvalidInputs("b_max must be >= 1".into()));
    }
    if !(inputs.moments.m.is_finite() && inputs.moments.m > 0.0) {
        return Err(PolicyError::InvalidInputs(format!(
            "mean request length must be positive, got {}",
            inputs.moments.m
        )));
    }
    if inputs.n_decode == 0 || inputs.n_prefill == 0 {
        return Ok(PolicyDecision {
            b_t: inputs.b_prev.min(b_max),
            rationale: Rationale::CarriedOver,
        });
    }
    let headroom = token_capacity.saturating_sub(buffer) as f64;
    let raw = (headroom / inputs.moments.m).floor();
    let bound = if raw >= f64::from(u32::MAX) {
        u32::MAX
    } else {
        raw.max(0.0) as u32
    };
    let b_t = bound.max(inputs.n_decode).min(b_max);
    Ok(PolicyDecision {
        b_t,
        rationale: Rationale::MemoryBound,
    })
}

/// SLA-constrained dynamic batching: a latency-feedback binary search.
///
/// Compares recent mean decode latency against the SLA deadband and
/// moves the temporary search bounds accordingly, emitting the interval
/// midpoint. Returns the carried-over previous batch size when there is
/// no decode history yet.
pub fn decide_sla_bound(
    state: &SlaSearchState,
    inputs: &PolicyInputs,
) -> Result<(PolicyDecision, SlaSearchState), PolicyError> {
    if inputs.b_prev == 0 {
        return Err(PolicyError::InvalidInputs("b_prev must be >= 1".into()));
    }
    if !(inputs.tau_bar_ms.is_finite() && inputs.tau_bar_ms >= 0.0) {
        return Err(PolicyError::InvalidInputs(format!(
            "tau_bar_ms must be finite and >= 0, got {}",
            inputs.tau_bar_ms
        )));
    }
    if inputs.b_bar <= 0.0 {
        return Ok((
            PolicyDecision {
                b_t: inputs.b_prev.min(state.b_max).max(state.b_min),
                rationale: Rationale::CarriedOver,
            },
            *state,
        ));
    }

    let b_bar = inputs.b_bar.round() as i64;
    let lo_prev = i64::from(state.b_low);
    let hi_prev = i64::from(state.b_high);
    let alpha = i64::from(state.alpha);
    let delta = i64::from(state.delta);
    let b_min = i64::from(state.b_min);
    let b_max = i64::from(state.b_max);
    let half = alpha / 2;

    let (mut lo, mut hi);
    if inputs.tau_bar_ms > state.d_sla_ms + state.epsilon_d_ms {
        // Too slow: pull the ceiling down to the observed batch.
        hi = b_bar.max(lo_prev + alpha);
        lo = (lo_prev - delta).max(b_min);
    } else if inputs.tau_bar_ms < state.d_sla_ms - state.epsilon_d_ms {
        // Latency slack: raise the floor to the observed batch.
        lo = b_bar.min(hi_prev - alpha);
        hi = (hi_prev + delta).min(b_max);
    } else {
        // Inside the deadband: collapse the interval around the observation.
        hi = (b_bar + half).min(b_max);
        lo = (b_bar - half).max(b_min);
    }

    lo = lo.clamp(b_min, b_max);
    hi = hi.clamp(b_min, b_max);
    if lo > hi {
        lo = hi;
    }

    let mut b_t = (lo + hi) / 2;
    b_t = b_t.max(i64::from(inputs.n_decode)).min(b_max);

    let next = SlaSearchState {
        b_low: lo as u32,
        b_high: hi as u32,
        ..*state
    };
    Ok((
        PolicyDecision {
            b_t: b_t as u32,
            rationale: Rationale::SlaBound,
        },
        next,
    ))
}

/// Combines the memory and SLA decisions by taking the minimum; the
/// rationale records which constraint was binding.
pub fn decide_combined(mem: PolicyDecision, sla: PolicyDecision) -> PolicyDecision {
    match mem.b_t.cmp(&sla.b_t) {
        std::cmp::Ordering::Less => PolicyDecision {
            b_t: mem.b_t,
            rationale: Rationale::MemoryBound,
        },
        std::cmp::Ordering::Greater => PolicyDecision {
            b_t: sla.b_t,
            rationale: Rationale::SlaBound,
        },
        std::cmp::Ordering::Equal => PolicyDecision {
            b_t: mem.b_t,
            rationale: Rationale::CombinedMin,
        },
    }
}

/// Which decision procedure drives the scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Static,
    Memory,
    Sla,
    Combined,
}

/// Scheduler hyper-parameters shared across policies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub b_min: u32,
    pub b_max: u32,
    pub d_sla_ms: f64,
    pub epsilon_d_ms: f64,
    pub alpha: u32,
    pub delta: u32,
    /// Engine steps between safety-buffer refreshes.
    pub refresh_period: u32,
    /// Trailing decode steps feeding tau_bar and b_bar.
    pub w_sla: usize,
    /// Admitted requests kept in the length-moment window.
    pub w_len: usize,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self {
            b_min: 1,
            b_max: 256,
            d_sla_ms: 50.0,
            epsilon_d_ms: 2.0,
            alpha: 8,
            delta: 2,
            refresh_period: 100,
            w_sla: 20,
            w_len: 256,
        }
    }
}

impl PolicyParams {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.b_min < 1 || self.b_min > self.b_max {
            return Err(PolicyError::InvalidConfig(format!(
                "need 1 <= b_min <= b_max, got [{}, {}]",
                self.b_min, self.b_max
            )));
        }
        if self.refresh_period == 0 {
            return Err(PolicyError::InvalidConfig("refresh_period must be >= 1".into()));
        }
        if self.w_sla == 0 || self.w_len == 0 {
            return Err(PolicyError::InvalidConfig("w_sla and w_len must be >= 1".into()));
        }
        // The SLA fields are validated by SlaSearchState, built for every
        // policy so combined can always consult it.
        SlaSearchState::new(
            self.d_sla_ms,
            self.epsilon_d_ms,
            self.alpha,
            self.delta,
            self.b_min,
            self.b_max,
        )?;
        Ok(())
    }
}

/// Stateful batch-size policy owned by one engine instance.
#[derive(Debug, Clone)]
pub struct BatchPolicy {
    kind: PolicyKind,
    b_fixed: u32,
    params: PolicyParams,
    sla_state: SlaSearchState,
    buffer: u64,
    steps_until_refresh: u32,
    b_prev: u32,
}

impl BatchPolicy {
    pub fn new(kind: PolicyKind, b_fixed: Option<u32>, params: PolicyParams) -> Result<Self, PolicyError> {
        params.validate()?;
        let b_fixed = match kind {
            PolicyKind::Static => {
                let b = b_fixed.ok_or_else(|| {
                    PolicyError::InvalidConfig("static policy requires b_fixed".into())
                })?;
                if b == 0 || b > params.b_max {
                    return Err(PolicyError::InvalidConfig(format!(
                        "b_fixed must lie in [1, b_max = {}], got {b}",
                        params.b_max
                    )));
                }
                b
            }
            _ => b_fixed.unwrap_or(0),
        };
        let sla_state = SlaSearchState::new(
            params.d_sla_ms,
            params.epsilon_d_ms,
            params.alpha,
            params.delta,
            params.b_min,
            params.b_max,
        )?;
        Ok(Self {
            kind,
            b_fixed,
            params,
            sla_state,
            buffer: 0,
            steps_until_refresh: 0,
            b_prev: params.b_min,
        })
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    /// Current safety buffer (memory and combined policies).
    pub fn buffer(&self) -> u64 {
        self.buffer
    }

    /// One scheduling decision; called by the engine before each admission
    /// round. Refreshes the safety buffer every `refresh_period` calls.
    pub fn decide(
        &mut self,
        n_prefill: u32,
        n_decode: u32,
        moments: LengthMoments,
        tau_bar_ms: f64,
        b_bar: f64,
        mem_cfg: &MemoryConfig,
    ) -> Result<PolicyDecision, PolicyError> {
        if matches!(self.kind, PolicyKind::Memory | PolicyKind::Combined) {
            if self.steps_until_refresh == 0 {
                self.buffer = memory::compute_safety_buffer(moments, mem_cfg);
                self.steps_until_refresh = self.params.refresh_period;
            }
            self.steps_until_refresh -= 1;
        }

        let inputs = PolicyInputs {
            b_prev: self.b_prev,
            n_prefill,
            n_decode,
            moments,
            tau_bar_ms,
            b_bar,
        };

        let decision = match self.kind {
            PolicyKind::Static => decide_static(self.b_fixed)?,
            PolicyKind::Memory => decide_memory_bound(
                &inputs,
                mem_cfg.token_capacity(),
                self.buffer,
                self.params.b_max,
            )?,
            PolicyKind::Sla => {
                let (decision, next) = decide_sla_bound(&self.sla_state, &inputs)?;
                self.sla_state = next;
                decision
            }
            PolicyKind::Combined => {
                let mem = decide_memory_bound(
                    &inputs,
                    mem_cfg.token_capacity(),
                    self.buffer,
                    self.params.b_max,
                )?;
                let (sla, next) = decide_sla_bound(&self.sla_state, &inputs)?;
                self.sla_state = next;
                decide_combined(mem, sla)
            }
        };
        self.b_prev = decision.b_t;
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inputs(
        b_prev: u32,
        n_prefill: u32,
        n_decode: u32,
        m: f64,
        tau_bar: f64,
        b_bar: f64,
    ) -> PolicyInputs {
        PolicyInputs {
            b_prev,
            n_prefill,
            n_decode,
            moments: LengthMoments { m, v: 0.0 },
            tau_bar_ms: tau_bar,
            b_bar,
        }
    }

    fn search_state() -> SlaSearchState {
        SlaSearchState::new(50.0, 2.0, 8, 2, 1, 256).unwrap()
    }

    #[test]
    fn static_policy_is_constant() {
        assert_eq!(decide_static(256).unwrap().b_t, 256);
        assert_eq!(decide_static(1).unwrap().b_t, 1);
        let a = decide_static(42).unwrap();
        let b = decide_static(42).unwrap();
        assert_eq!(a, b);
        assert!(decide_static(0).is_err());
    }

    #[test]
    fn memory_bound_hand_execution() {
        // capacity 12000, buffer 2000, mean 400 -> 25.
        let d = decide_memory_bound(&inputs(10, 5, 10, 400.0, 0.0, 0.0), 12_000, 2000, 256).unwrap();
        assert_eq!(d.b_t, 25);
        assert_eq!(d.rationale, Rationale::MemoryBound);
    }

    #[test]
    fn memory_bound_clamps_to_running() {
        let d = decide_memory_bound(&inputs(10, 5, 30, 400.0, 0.0, 0.0), 12_000, 2000, 256).unwrap();
        assert_eq!(d.b_t, 30);
    }

    #[test]
    fn memory_bound_carries_over_without_prefill() {
        let d = decide_memory_bound(&inputs(17, 0, 10, 400.0, 0.0, 0.0), 12_000, 2000, 256).unwrap();
        assert_eq!(d.b_t, 17);
        assert_eq!(d.rationale, Rationale::CarriedOver);
    }

    #[test]
    fn memory_bound_clamps_to_b_max() {
        let d = decide_memory_bound(&inputs(10, 5, 10, 4.0, 0.0, 0.0), 12_000, 0, 256).unwrap();
        assert_eq!(d.b_t, 256);
    }

    #[test]
    fn memory_bound_full_buffer_means_no_admission_slots() {
        let d = decide_memory_bound(&inputs(10, 5, 10, 400.0, 0.0, 0.0), 12_000, 12_000, 256).unwrap();
        assert_eq!(d.b_t, 10); // clamped up to the running count
    }

    #[test]
    fn memory_bound_rejects_zero_mean() {
        let mut bad = inputs(10, 5, 10, 400.0, 0.0, 0.0);
        bad.moments.m = 0.0;
        assert!(decide_memory_bound(&bad, 12_000, 0, 256).is_err());
    }

    #[test]
    fn sla_branch_too_slow() {
        let (d, next) = decide_sla_bound(&search_state(), &inputs(64, 0, 0, 400.0, 60.0, 128.0)).unwrap();
        assert_eq!(next.b_high, 128); // max(128, 1 + 8)
        assert_eq!(next.b_low, 1); // max(1 - 2, 1)
        assert_eq!(d.b_t, 64); // floor((1 + 128) / 2)
    }

    #[test]
    fn sla_branch_slack() {
        let (d, next) = decide_sla_bound(&search_state(), &inputs(64, 0, 0, 400.0, 40.0, 128.0)).unwrap();
        assert_eq!(next.b_low, 128); // min(128, 256 - 8)
        assert_eq!(next.b_high, 256); // min(256 + 2, 256)
        assert_eq!(d.b_t, 192);
    }

    #[test]
    fn sla_branch_deadband_fixed_point() {
        let (d, next) = decide_sla_bound(&search_state(), &inputs(64, 0, 0, 400.0, 50.0, 128.0)).unwrap();
        assert_eq!(next.b_high, 132);
        assert_eq!(next.b_low, 124);
        assert_eq!(d.b_t, 128);
    }

    #[test]
    fn sla_without_history_carries_over() {
        let state = search_state();
        let (d, next) = decide_sla_bound(&state, &inputs(9, 0, 0, 400.0, 0.0, 0.0)).unwrap();
        assert_eq!(d.b_t, 9);
        assert_eq!(d.rationale, Rationale::CarriedOver);
        assert_eq!(next, state);
    }

    #[test]
    fn sla_decision_respects_running_count() {
        let (d, _) = decide_sla_bound(&search_state(), &inputs(64, 0, 200, 400.0, 50.0, 128.0)).unwrap();
        assert_eq!(d.b_t, 200);
    }

    #[test]
    fn combined_takes_min_and_labels_it() {
        let mem = PolicyDecision { b_t: 25, rationale: Rationale::MemoryBound };
        let sla = PolicyDecision { b_t: 64, rationale: Rationale::SlaBound };
        let d = decide_combined(mem, sla);
        assert_eq!((d.b_t, d.rationale), (25, Rationale::MemoryBound));

        let mem2 = PolicyDecision { b_t: 100, rationale: Rationale::MemoryBound };
        let d2 = decide_combined(mem2, sla);
        assert_eq!((d2.b_t, d2.rationale), (64, Rationale::SlaBound));

        let mem3 = PolicyDecision { b_t: 64, rationale: Rationale::MemoryBound };
        let d3 = decide_combined(mem3, sla);
        assert_eq!((d3.b_t, d3.rationale), (64, Rationale::CombinedMin));
    }

    #[test]
    fn state_requires_alpha_above_delta() {
        assert!(SlaSearchState::new(50.0, 2.0, 2, 2, 1, 256).is_err());
        assert!(SlaSearchState::new(50.0, 2.0, 1, 2, 1, 256).is_err());
        assert!(SlaSearchState::new(50.0, 2.0, 8, 2, 0, 256).is_err());
    }

    #[test]
    fn memory_bound_monotone_in_mean_before_clamp() {
        let mut last = u32::MAX;
        for m in [200.0, 300.0, 400.0, 600.0, 900.0] {
            let d = decide_memory_bound(&inputs(1, 5, 1, m, 0.0, 0.0), 12_000, 2000, 10_000).unwrap();
            assert!(d.b_t <= last, "bound must not increase with mean length");
            last = d.b_t;
        }
    }

    proptest! {
        #[test]
        fn sla_bounds_stay_ordered_over_random_sequences(
            seed_states in proptest::collection::vec((0.0f64..120.0, 0.0f64..300.0), 1..60),
            b_min in 1u32..16, width in 1u32..512,
        ) {
            let b_max = b_min + width;
            let mut state = SlaSearchState::new(50.0, 2.0, 8, 2, b_min, b_max).unwrap();
            let mut b_prev = b_min;
            for (tau, b_bar) in seed_states {
                let i = inputs(b_prev, 0, 0, 400.0, tau, b_bar);
                let (d, next) = decide_sla_bound(&state, &i).unwrap();
                prop_assert!(next.b_min <= next.b_low);
                prop_assert!(next.b_low <= next.b_high);
                prop_assert!(next.b_high <= next.b_max);
                prop_assert!((1..=b_max).contains(&d.b_t));
                state = next;
                b_prev = d.b_t;
            }
        }

        #[test]
        fn sla_is_deterministic(tau in 0.0f64..120.0, b_bar in 1.0f64..256.0, b_prev in 1u32..256) {
            let i = inputs(b_prev, 0, 0, 400.0, tau, b_bar);
            let a = decide_sla_bound(&search_state(), &i).unwrap();
            let b = decide_sla_bound(&search_state(), &i).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn combined_never_exceeds_either_bound(mb in 1u32..1000, sb in 1u32..1000) {
            let mem = PolicyDecision { b_t: mb, rationale: Rationale::MemoryBound };
            let sla = PolicyDecision { b_t: sb, rationale: Rationale::SlaBound };
            let d = decide_combined(mem, sla);
            prop_assert!(d.b_t <= mb && d.b_t <= sb);
            prop_assert_eq!(d.b_t, mb.min(sb));
        }
    }
}
