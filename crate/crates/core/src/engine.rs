//! Deterministic discrete-event simulation of a continuous-batching
//! inference server: admission, prefill, decode, completion, and
//! overflow preemption, with separate or fused prefill scheduling.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{CostModelError, LatencyModel};
use crate::memory::MemoryConfig;
use crate::policy::{BatchPolicy, PolicyError};
use crate::workload::{LengthMoments, MomentWindow, RequestSpec};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("workload is empty")]
    EmptyWorkload,

    #[error("workload is not sorted by arrival time")]
    UnsortedWorkload,

    #[error("queue overflow at t = {t_ms} ms: {len} waiting requests exceed max_queue = {max_queue}")]
    QueueOverflow { t_ms: f64, len: usize, max_queue: usize },

    #[error(
        "request {id} cannot fit: needs {tokens} tokens but the capacity is {token_capacity}"
    )]
    RequestExceedsCapacity { id: u64, tokens: u64, token_capacity: u64 },

    #[error("engine stalled at t = {t_ms} ms with no processable work")]
    Stalled { t_ms: f64 },

    #[error(transparent)]
    Cost(#[from] CostModelError),

    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// How prefill work shares the accelerator with decode iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineMode {
    /// Admission batches run a dedicated prefill pass before joining decode.
    PdSeparate,
    /// Each iteration fuses running decodes with a prompt chunk.
    PdFused,
}

/// Overflow mitigation. Preempted requests drop their cache and
/// re-prefill everything they had produced when readmitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreemptionMode {
    Recompute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mode: EngineMode,
    pub swap_penalty_ms: f64,
    pub preemption: PreemptionMode,
    pub max_queue: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            mode: EngineMode::PdSeparate,
            swap_penalty_ms: 0.0,
            preemption: PreemptionMode::Recompute,
            max_queue: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Queued,
    Prefilling,
    Running,
    Preempted,
    Finished,
}

/// One scheduler iteration: either a dedicated prefill pass, a decode
/// iteration, or a fused step carrying both.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step start time.
    pub t_ms: f64,
    /// Batch size decided by the policy for this step.
    pub b_target: u32,
    /// Requests decoding during the step.
    pub n_decode: u32,
    /// Prompt tokens prefetched during the step.
    pub n_prefill_tokens: u64,
    pub step_ms: f64,
    /// Tokens emitted by the step (one per decoding request).
    pub tokens_out: u32,
    /// KV occupancy after the step, post-preemption.
    pub occupancy_tokens: u64,
    /// True when occupancy transiently exceeded the token capacity.
    pub overflow: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub arrival_ms: f64,
    /// First admission time.
    pub admit_ms: f64,
    pub finish_ms: f64,
    /// Duration of the decode step that emitted each token.
    pub tbt_samples: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Totals {
    pub tokens_generated: u64,
    /// Wall-clock span from the first step start to the last step end.
    pub span_ms: f64,
    pub started_ms: f64,
    pub finished_ms: f64,
    pub preemptions: u64,
    pub peak_queue: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub step_records: Vec<StepRecord>,
    pub request_records: Vec<RequestRecord>,
    pub totals: Totals,
    pub token_capacity: u64,
}

/// FCFS admission: how many head-of-queue requests fit into the
/// available batch slots and token headroom. The first request that does
/// not fit blocks the rest.
pub fn admissible_count(
    queue_footprints: &[u64],
    n_running: usize,
    b_t: u32,
    headroom_tokens: u64,
) -> usize {
    let slots = (b_t as usize).saturating_sub(n_running);
    let mut admitted = 0usize;
    let mut used = 0u64;
    for &fp in queue_footprints.iter().take(slots) {
        if used + fp > headroom_tokens {
            break;
        }
        used += fp;
        admitted += 1;
    }
    admitted
}

/// LIFO preemption plan: how many of the most recently admitted requests
/// must drop their cache so the remainder fits the capacity. Returns
/// `None` when even the oldest request alone exceeds the capacity.
pub fn overflow_preemptions(
    footprints_in_admission_order: &[u64],
    token_capacity: u64,
) -> Option<usize> {
    let mut occupancy: u64 = footprints_in_admission_order.iter().sum();
    let mut victims = 0usize;
    let mut remaining = footprints_in_admission_order.len();
    while occupancy > token_capacity {
        if remaining <= 1 {
            return None;
        }
        remaining -= 1;
        occupancy -= footprints_in_admission_order[remaining];
        victims += 1;
    }
    Some(victims)
}

/// Prompt-token chunk processed by a fused iteration: the batch slots not
/// taken by running decodes.
pub fn fused_chunk_tokens(b_t: u32, n_decode: u32) -> u64 {
    u64::from(b_t.saturating_sub(n_decode))
}

/// Duration of a fused iteration: the decode cost of the running batch
/// plus the per-token cost of the prompt chunk sharing it.
pub fn fused_step_duration(
    model: &LatencyModel,
    n_decode: u32,
    chunk_tokens: u64,
) -> Result<f64, CostModelError> {
    let decode = if n_decode > 0 {
        model.step_latency_ms(n_decode)?
    } else {
        0.0
    };
    Ok(decode + model.prefill_per_token_ms * chunk_tokens as f64)
}

#[derive(Debug, Clone)]
struct ReqState {
    spec: RequestSpec,
    phase: Phase,
    tokens_generated: u32,
    /// Prompt tokens (plus recompute tokens) this admission must prefill.
    prefill_target: u32,
    prefill_done: u32,
    /// Tokens currently held in the KV cache.
    kv_tokens: u64,
    admit_ms: f64,
    finish_ms: f64,
    tbt: Vec<f64>,
    in_window: bool,
}

impl ReqState {
    fn new(spec: RequestSpec) -> Self {
        Self {
            spec,
            phase: Phase::Queued,
            tokens_generated: 0,
            prefill_target: spec.l_in,
            prefill_done: 0,
            kv_tokens: 0,
            admit_ms: f64::NAN,
            finish_ms: f64::NAN,
            tbt: Vec::new(),
            in_window: false,
        }
    }
}

struct Sim<'a> {
    reqs: Vec<ReqState>,
    queue: VecDeque<usize>,
    prefilling: VecDeque<usize>,
    running: Vec<usize>,
    occupancy: u64,
    t: f64,
    next_arrival: usize,
    finished: usize,
    tokens_generated: u64,
    preemptions: u64,
    peak_queue: usize,
    moment_window: MomentWindow,
    step_window: VecDeque<(f64, f64)>,
    w_sla: usize,
    latency: &'a LatencyModel,
    memory: &'a MemoryConfig,
    cfg: &'a EngineConfig,
    prior: LengthMoments,
    steps: Vec<StepRecord>,
}

impl<'a> Sim<'a> {
    fn capacity(&self) -> u64 {
        self.memory.token_capacity()
    }

    fn ingest_arrivals(&mut self) -> Result<(), EngineError> {
        while self.next_arrival < self.reqs.len()
            && self.reqs[self.next_arrival].spec.arrival_ms <= self.t
        {
            self.queue.push_back(self.next_arrival);
            self.next_arrival += 1;
            if self.queue.len() > self.cfg.max_queue {
                return Err(EngineError::QueueOverflow {
                    t_ms: self.t,
                    len: self.queue.len(),
                    max_queue: self.cfg.max_queue,
                });
            }
        }
        self.peak_queue = self.peak_queue.max(self.queue.len());
        Ok(())
    }

    fn window_stats(&self) -> (f64, f64) {
        if self.step_window.is_empty() {
            return (0.0, 0.0);
        }
        let n = self.step_window.len() as f64;
        let (sum_tau, sum_b) = self
            .step_window
            .iter()
            .fold((0.0, 0.0), |(a, b), &(tau, nb)| (a + tau, b + nb));
        (sum_tau / n, sum_b / n)
    }

    fn push_step_window(&mut self, tau: f64, batch_equiv: f64) {
        if self.step_window.len() == self.w_sla {
            self.step_window.pop_front();
        }
        self.step_window.push_back((tau, batch_equiv));
    }

    fn note_admitted(&mut self, idx: usize) {
        let r = &mut self.reqs[idx];
        if r.admit_ms.is_nan() {
            r.admit_ms = self.t;
        }
        if !r.in_window {
            r.in_window = true;
            self.moment_window.push(r.spec.l_in, r.spec.l_out);
        }
    }

    fn evict_to_queue_head(&mut self, idx: usize) {
        let r = &mut self.reqs[idx];
        self.occupancy -= r.kv_tokens;
        r.kv_tokens = 0;
        r.phase = Phase::Preempted;
        // Recompute on readmission: the next prefill covers the prompt and
        // everything generated so far.
        r.prefill_target = r.spec.l_in + r.tokens_generated;
        r.prefill_done = 0;
        self.queue.push_front(idx);
        self.preemptions += 1;
    }

    /// Emits one token per running request and retires completions.
    /// Returns (emitters, finished).
    fn decode_emissions(&mut self) -> (Vec<usize>, Vec<usize>) {
        let emitters: Vec<usize> = self.running.clone();
        for &i in &emitters {
            let r = &mut self.reqs[i];
            r.tokens_generated += 1;
            r.kv_tokens += 1;
        }
        self.occupancy += emitters.len() as u64;
        self.tokens_generated += emitters.len() as u64;

        let mut finished = Vec::new();
        self.running.retain(|&i| {
            if self.reqs[i].tokens_generated == self.reqs[i].spec.l_out {
                finished.push(i);
                false
            } else {
                true
            }
        });
        for &i in &finished {
            let r = &mut self.reqs[i];
            self.occupancy -= r.kv_tokens;
            r.kv_tokens = 0;
            r.phase = Phase::Finished;
        }
        self.finished += finished.len();
        (emitters, finished)
    }

    /// LIFO overflow preemption across the active sets, newest first.
    fn resolve_overflow(&mut self, newly_prefilled: &mut Vec<usize>) -> Result<usize, EngineError> {
        let mut victims = 0usize;
        while self.occupancy > self.capacity() {
            if let Some(idx) = newly_prefilled.pop() {
                self.evict_to_queue_head(idx);
            } else if let Some(idx) = self.prefilling.pop_back() {
                self.evict_to_queue_head(idx);
            } else if self.running.len() > 1 {
                let idx = self.running.pop().expect("nonempty");
                self.evict_to_queue_head(idx);
            } else if let Some(&idx) = self.running.last() {
                let r = &self.reqs[idx];
                return Err(EngineError::RequestExceedsCapacity {
                    id: r.spec.id,
                    tokens: r.kv_tokens,
                    token_capacity: self.capacity(),
                });
            } else {
                return Err(EngineError::Stalled { t_ms: self.t });
            }
            victims += 1;
        }
        Ok(victims)
    }

    fn record(&mut self, rec: StepRecord) {
        self.steps.push(rec);
    }
}

/// Runs the simulation until every request finishes.
///
/// The per-iteration loop: ingest arrivals, consult the policy, admit
/// FCFS within batch slots and token headroom, charge prefill (a
/// dedicated pass in separate mode, a shared chunk in fused mode), run
/// one decode iteration, retire completions, and preempt on overflow.
pub fn run(
    workload: &[RequestSpec],
    mut policy: BatchPolicy,
    latency: &LatencyModel,
    memory: &MemoryConfig,
    cfg: &EngineConfig,
    prior_moments: LengthMoments,
) -> Result<SimResult, EngineError> {
    if workload.is_empty() {
        return Err(EngineError::EmptyWorkload);
    }
    if workload.windows(2).any(|w| w[0].arrival_ms > w[1].arrival_ms) {
        return Err(EngineError::UnsortedWorkload);
    }

    let w_len = policy.params().w_len;
    let w_sla = policy.params().w_sla;
    let mut sim = Sim {
        reqs: workload.iter().map(|&s| ReqState::new(s)).collect(),
        queue: VecDeque::new(),
        prefilling: VecDeque::new(),
        running: Vec::new(),
        occupancy: 0,
        t: 0.0,
        next_arrival: 0,
        finished: 0,
        tokens_generated: 0,
        preemptions: 0,
        peak_queue: 0,
        moment_window: MomentWindow::new(w_len),
        step_window: VecDeque::new(),
        w_sla,
        latency,
        memory,
        cfg,
        prior: prior_moments,
        steps: Vec::new(),
    };

    loop {
        sim.ingest_arrivals()?;
        if sim.finished == sim.reqs.len() {
            break;
        }
        if sim.running.is_empty() && sim.prefilling.is_empty() && sim.queue.is_empty() {
            // Idle: jump to the next arrival.
            debug_assert!(sim.next_arrival < sim.reqs.len());
            sim.t = sim.t.max(sim.reqs[sim.next_arrival].spec.arrival_ms);
            continue;
        }

        let moments = sim.moment_window.moments().unwrap_or(sim.prior);
        let (tau_bar, b_bar) = sim.window_stats();
        let n_prefill = (sim.queue.len() + sim.prefilling.len()) as u32;
        let n_decode = sim.running.len() as u32;
        let decision = policy.decide(n_prefill, n_decode, moments, tau_bar, b_bar, memory)?;
        let b_t = decision.b_t;

        match cfg.mode {
            EngineMode::PdSeparate => step_pd_separate(&mut sim, b_t)?,
            EngineMode::PdFused => step_pd_fused(&mut sim, b_t)?,
        }
    }

    let started_ms = sim.steps.first().map_or(0.0, |s| s.t_ms);
    let finished_ms = sim.steps.last().map_or(0.0, |s| s.t_ms + s.step_ms);
    let request_records = sim
        .reqs
        .iter()
        .map(|r| RequestRecord {
            id: r.spec.id,
            arrival_ms: r.spec.arrival_ms,
            admit_ms: r.admit_ms,
            finish_ms: r.finish_ms,
            tbt_samples: r.tbt.clone(),
        })
        .collect();
    Ok(SimResult {
        step_records: sim.steps,
        request_records,
        totals: Totals {
            tokens_generated: sim.tokens_generated,
            span_ms: finished_ms - started_ms,
            started_ms,
            finished_ms,
            preemptions: sim.preemptions,
            peak_queue: sim.peak_queue,
        },
        token_capacity: memory.token_capacity(),
    })
}

fn step_pd_separate(sim: &mut Sim<'_>, b_t: u32) -> Result<(), EngineError> {
    // Admission within slots and token headroom, head-of-line blocking.
    let headroom = sim.capacity().saturating_sub(sim.occupancy);
    let footprints: Vec<u64> = sim
        .queue
        .iter()
        .map(|&i| u64::from(sim.reqs[i].prefill_target) + 1)
        .collect();
    let admitted_n = admissible_count(&footprints, sim.running.len(), b_t, headroom);

    if admitted_n == 0 && sim.running.is_empty() {
        // Nothing can ever progress if the head does not fit an empty system.
        let &head = sim.queue.front().expect("queue nonempty here");
        let need = u64::from(sim.reqs[head].prefill_target) + 1;
        if need > sim.capacity() {
            return Err(EngineError::RequestExceedsCapacity {
                id: sim.reqs[head].spec.id,
                tokens: need,
                token_capacity: sim.capacity(),
            });
        }
        return Err(EngineError::Stalled { t_ms: sim.t });
    }

    let admitted: Vec<usize> = (0..admitted_n)
        .map(|_| sim.queue.pop_front().expect("count within queue"))
        .collect();

    // Dedicated prefill pass for the admission batch; decodes stall.
    if !admitted.is_empty() {
        let total_tokens: u64 = admitted
            .iter()
            .map(|&i| u64::from(sim.reqs[i].prefill_target))
            .sum();
        let dur = sim.latency.prefill_latency_ms(total_tokens)?;
        for &i in &admitted {
            sim.note_admitted(i);
            let r = &mut sim.reqs[i];
            r.prefill_done = r.prefill_target;
            r.kv_tokens = u64::from(r.prefill_target);
            r.phase = Phase::Running;
            sim.occupancy += u64::from(r.prefill_target);
        }
        let rec = StepRecord {
            t_ms: sim.t,
            b_target: b_t,
            n_decode: sim.running.len() as u32,
            n_prefill_tokens: total_tokens,
            step_ms: dur,
            tokens_out: 0,
            occupancy_tokens: sim.occupancy,
            overflow: sim.occupancy > sim.capacity(),
        };
        sim.record(rec);
        sim.t += dur;
        sim.running.extend(admitted);
    }

    // One decode iteration.
    if sim.running.is_empty() {
        return Ok(());
    }
    let n_decode = sim.running.len() as u32;
    let base = sim.latency.step_latency_ms(n_decode)?;
    let step_start = sim.t;

    let (emitters, finished) = sim.decode_emissions();
    let overflowed = sim.occupancy > sim.capacity();
    let victims = if overflowed {
        let fps: Vec<u64> = sim.running.iter().map(|&i| sim.reqs[i].kv_tokens).collect();
        match overflow_preemptions(&fps, sim.capacity()) {
            Some(k) => {
                for _ in 0..k {
                    let idx = sim.running.pop().expect("victims within running");
                    sim.evict_to_queue_head(idx);
                }
                k
            }
            None => {
                let &survivor = sim.running.first().expect("nonempty on overflow");
                return Err(EngineError::RequestExceedsCapacity {
                    id: sim.reqs[survivor].spec.id,
                    tokens: sim.reqs[survivor].kv_tokens,
                    token_capacity: sim.capacity(),
                });
            }
        }
    } else {
        0
    };

    let dur = base + victims as f64 * sim.cfg.swap_penalty_ms;
    let t_end = step_start + dur;
    for &i in &emitters {
        sim.reqs[i].tbt.push(dur);
    }
    for &i in &finished {
        sim.reqs[i].finish_ms = t_end;
    }
    sim.push_step_window(dur, f64::from(n_decode));
    let rec = StepRecord {
        t_ms: step_start,
        b_target: b_t,
        n_decode,
        n_prefill_tokens: 0,
        step_ms: dur,
        tokens_out: n_decode,
        occupancy_tokens: sim.occupancy,
        overflow: overflowed,
    };
    sim.record(rec);
    sim.t = t_end;
    Ok(())
}

fn step_pd_fused(sim: &mut Sim<'_>, b_t: u32) -> Result<(), EngineError> {
    let n_decode = sim.running.len() as u32;
    let budget = fused_chunk_tokens(b_t, n_decode);

    // Spend the chunk budget FCFS across the prefill queue; prompts may
    // split across steps.
    let mut chunk_left = budget;
    let mut chunk_written: u64 = 0;
    let mut newly_prefilled: Vec<usize> = Vec::new();
    while chunk_left > 0 {
        let head = if let Some(&h) = sim.prefilling.front() {
            h
        } else if let Some(&q) = sim.queue.front() {
            let need = u64::from(sim.reqs[q].prefill_target) + 1;
            if need > sim.capacity() {
                return Err(EngineError::RequestExceedsCapacity {
                    id: sim.reqs[q].spec.id,
                    tokens: need,
                    token_capacity: sim.capacity(),
                });
            }
            if sim.occupancy + need > sim.capacity() {
                break; // head-of-line blocked on memory
            }
            let q = sim.queue.pop_front().expect("peeked");
            sim.note_admitted(q);
            sim.reqs[q].phase = Phase::Prefilling;
            sim.prefilling.push_back(q);
            q
        } else {
            break;
        };
        let r = &mut sim.reqs[head];
        let remaining = u64::from(r.prefill_target - r.prefill_done);
        let written = remaining.min(chunk_left);
        r.prefill_done += written as u32;
        r.kv_tokens += written;
        sim.occupancy += written;
        chunk_written += written;
        chunk_left -= written;
        if r.prefill_done == r.prefill_target {
            let done = sim.prefilling.pop_front().expect("head present");
            debug_assert_eq!(done, head);
            newly_prefilled.push(done);
        }
    }

    if n_decode == 0 && chunk_written == 0 {
        return Err(EngineError::Stalled { t_ms: sim.t });
    }

    let base = fused_step_duration(sim.latency, n_decode, chunk_written)?;
    let step_start = sim.t;

    let (emitters, finished) = sim.decode_emissions();
    let overflowed = sim.occupancy > sim.capacity();
    let victims = sim.resolve_overflow(&mut newly_prefilled)?;

    let dur = base + victims as f64 * sim.cfg.swap_penalty_ms;
    let t_end = step_start + dur;
    for &i in &emitters {
        sim.reqs[i].tbt.push(dur);
    }
    for &i in &finished {
        sim.reqs[i].finish_ms = t_end;
    }
    // Completed prefills join the decode batch from the next iteration.
    for idx in newly_prefilled {
        sim.reqs[idx].phase = Phase::Running;
        sim.running.push(idx);
    }
    // Only token-emitting iterations feed the latency feedback; the batch
    // equivalent counts chunk tokens sharing the iteration.
    if n_decode > 0 {
        sim.push_step_window(dur, f64::from(n_decode) + chunk_written as f64);
    }
    let rec = StepRecord {
        t_ms: step_start,
        b_target: b_t,
        n_decode,
        n_prefill_tokens: chunk_written,
        step_ms: dur,
        tokens_out: n_decode,
        occupancy_tokens: sim.occupancy,
        overflow: overflowed,
    };
    sim.record(rec);
    sim.t = t_end;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyKind, PolicyParams};
    use approx::assert_relative_eq;

    fn spec(id: u64, arrival: f64, l_in: u32, l_out: u32) -> RequestSpec {
        RequestSpec::new(id, arrival, l_in, l_out).unwrap()
    }

    fn static_policy(b: u32) -> BatchPolicy {
        let params = PolicyParams {
            b_max: 4096,
            ..PolicyParams::default()
        };
        BatchPolicy::new(PolicyKind::Static, Some(b), params).unwrap()
    }

    fn big_memory() -> MemoryConfig {
        MemoryConfig::new(100_000_000, 1, 0.02).unwrap()
    }

    fn prior() -> LengthMoments {
        LengthMoments { m: 12.0, v: 0.0 }
    }

    #[test]
    fn single_request_hand_simulation() {
        // prefill 8 tokens at 1 ms/token, then 4 decode steps of 11 ms.
        let model = LatencyModel::new(10.0, 1.0, 0.0, 1.0).unwrap();
        let workload = vec![spec(0, 0.0, 8, 4)];
        let result = run(
            &workload,
            static_policy(1),
            &model,
            &big_memory(),
            &EngineConfig::default(),
            prior(),
        )
        .unwrap();
        assert_eq!(result.totals.tokens_generated, 4);
        assert_relative_eq!(result.totals.finished_ms, 52.0, max_relative = 1e-12);
        assert_relative_eq!(result.totals.span_ms, 52.0, max_relative = 1e-12);
        let r = &result.request_records[0];
        assert_relative_eq!(r.finish_ms, 52.0, max_relative = 1e-12);
        assert_eq!(r.tbt_samples, vec![11.0; 4]);
    }

    #[test]
    fn two_identical_requests_share_every_step() {
        let model = LatencyModel::new(10.0, 1.0, 0.0, 1.0).unwrap();
        let workload = vec![spec(0, 0.0, 8, 4), spec(1, 0.0, 8, 4)];
        let result = run(
            &workload,
            static_policy(2),
            &model,
            &big_memory(),
            &EngineConfig::default(),
            prior(),
        )
        .unwrap();
        let finishes: Vec<f64> = result.request_records.iter().map(|r| r.finish_ms).collect();
        assert_eq!(finishes[0], finishes[1]);
        // Decode steps cost a0 + 2 a1 = 12 ms.
        let decode_steps: Vec<&StepRecord> = result
            .step_records
            .iter()
            .filter(|s| s.tokens_out > 0)
            .collect();
        assert!(decode_steps.iter().all(|s| (s.step_ms - 12.0).abs() < 1e-12));
        // Prefill pass covers both prompts: 16 tokens -> 16 ms.
        assert_relative_eq!(result.step_records[0].step_ms, 16.0, max_relative = 1e-12);
        assert_relative_eq!(result.totals.finished_ms, 64.0, max_relative = 1e-12);
    }

    #[test]
    fn admission_happens_before_decode_when_idle() {
        let model = LatencyModel::new(10.0, 1.0, 0.0, 1.0).unwrap();
        let workload = vec![spec(0, 0.0, 4, 2), spec(1, 100.0, 4, 2)];
        let result = run(
            &workload,
            static_policy(1),
            &model,
            &big_memory(),
            &EngineConfig::default(),
            prior(),
        )
        .unwrap();
        // Second request arrives after the first finished (t = 26): the
        // engine must idle-jump and still serve it.
        assert_eq!(result.totals.tokens_generated, 4);
        let r1 = &result.request_records[1];
        assert_relative_eq!(r1.admit_ms, 100.0, max_relative = 1e-12);
    }

    #[test]
    fn conservation_every_request_finishes() {
        let model = LatencyModel::new(5.0, 0.5, 0.0, 0.1).unwrap();
        let workload: Vec<RequestSpec> = (0..40)
            .map(|i| spec(i, f64::from(i as u32) * 7.0, 16 + (i % 5) as u32, 8 + (i % 11) as u32))
            .collect();
        let expected: u64 = workload.iter().map(|s| u64::from(s.l_out)).sum();
        let result = run(
            &workload,
            static_policy(8),
            &model,
            &big_memory(),
            &EngineConfig::default(),
            prior(),
        )
        .unwrap();
        assert_eq!(result.totals.tokens_generated, expected);
        assert!(result.request_records.iter().all(|r| r.finish_ms.is_finite()));
    }

    #[test]
    fn clock_is_strictly_monotone() {
        let model = LatencyModel::new(5.0, 0.5, 0.0, 0.1).unwrap();
        let workload: Vec<RequestSpec> =
            (0..30).map(|i| spec(i, f64::from(i as u32) * 3.0, 8, 16)).collect();
        let result = run(
            &workload,
            static_policy(4),
            &model,
            &big_memory(),
            &EngineConfig::default(),
            prior(),
        )
        .unwrap();
        for w in result.step_records.windows(2) {
            assert!(w[1].t_ms > w[0].t_ms, "timestamps must strictly increase");
        }
    }

    #[test]
    fn determinism_bitwise_identical_runs() {
        let model = LatencyModel::new(5.0, 0.5, 0.0, 0.1).unwrap();
        let workload: Vec<RequestSpec> =
            (0..50).map(|i| spec(i, f64::from(i as u32) * 2.5, 8 + (i % 7) as u32, 8)).collect();
        let cfg = EngineConfig::default();
        let mem = big_memory();
        let a = run(&workload, static_policy(6), &model, &mem, &cfg, prior()).unwrap();
        let b = run(&workload, static_policy(6), &model, &mem, &cfg, prior()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn admissible_count_examples() {
        // Slots bound: b_t = 4 with 2 running admits 2 of 5 queued.
        assert_eq!(admissible_count(&[10, 10, 10, 10, 10], 2, 4, 1000), 2);
        // Head-of-line blocking: a 201-token head blocks smaller followers.
        assert_eq!(admissible_count(&[201, 10], 0, 4, 100), 0);
        // No slots.
        assert_eq!(admissible_count(&[10], 3, 3, 1000), 0);
    }

    #[test]
    fn overflow_preemption_examples() {
        // occupancy = capacity + 10, newest footprint 50 -> one victim.
        assert_eq!(overflow_preemptions(&[100, 100, 50], 240), Some(1));
        // Under capacity: no-op.
        assert_eq!(overflow_preemptions(&[100, 100], 240), Some(0));
        // Identical footprints overflowing by k*f -> exactly k victims.
        assert_eq!(overflow_preemptions(&[50; 10], 350), Some(3));
        // Even the oldest alone cannot fit.
        assert_eq!(overflow_preemptions(&[300], 240), None);
    }

    #[test]
    fn fused_chunk_rule() {
        assert_eq!(fused_chunk_tokens(64, 60), 4);
        assert_eq!(fused_chunk_tokens(64, 64), 0);
        assert_eq!(fused_chunk_tokens(64, 70), 0);
        assert_eq!(fused_chunk_tokens(32, 0), 32);
    }

    #[test]
    fn fused_duration_is_additive() {
        let model = LatencyModel::new(10.0, 1.0, 0.0, 0.5).unwrap();
        assert_relative_eq!(fused_step_duration(&model, 60, 4).unwrap(), 70.0 + 2.0);
        // Prefill-only step costs just the chunk.
        assert_relative_eq!(fused_step_duration(&model, 0, 32).unwrap(), 16.0);
    }

    #[test]
    fn pd_fused_processes_prompts_in_chunks() {
        let model = LatencyModel::new(10.0, 1.0, 0.0, 1.0).unwrap();
        let workload = vec![spec(0, 0.0, 10, 3)];
        let cfg = EngineConfig {
            mode: EngineMode::PdFused,
            ..EngineConfig::default()
        };
        let result = run(&workload, static_policy(4), &model, &big_memory(), &cfg, prior()).unwrap();
        // Chunk budget 4/step with a 10-token prompt: 3 prefill-only steps
        // (4 + 4 + 2 tokens), then 3 decode steps.
        let prefill_tokens: Vec<u64> =
            result.step_records.iter().map(|s| s.n_prefill_tokens).collect();
        assert_eq!(&prefill_tokens[..3], &[4, 4, 2]);
        assert_eq!(result.totals.tokens_generated, 3);
        // First decode step: batch 1 plus chunk 3 slots unused (queue empty).
        let decode_steps: Vec<&StepRecord> =
            result.step_records.iter().filter(|s| s.tokens_out > 0).collect();
        assert_eq!(decode_steps.len(), 3);
        assert!(decode_steps.iter().all(|s| s.n_decode == 1));
    }

    #[test]
    fn preemption_frees_memory_and_recomputes() {
        // Capacity 30 tokens: two requests of l_in=10 admit (10+1 each
        // reserved), then decode pushes occupancy over 30 and the newest
        // must be preempted, requeued, and eventually finish.
        let model = LatencyModel::new(1.0, 1.0, 0.0, 0.1).unwrap();
        let mem = MemoryConfig::new(30, 1, 0.02).unwrap();
        let workload = vec![spec(0, 0.0, 10, 8), spec(1, 0.0, 10, 8)];
        let cfg = EngineConfig {
            swap_penalty_ms: 2.0,
            ..EngineConfig::default()
        };
        let result = run(&workload, static_policy(2), &model, &mem, &cfg, prior()).unwrap();
        assert!(result.totals.preemptions > 0);
        assert_eq!(result.totals.tokens_generated, 16);
        assert!(result.step_records.iter().any(|s| s.overflow));
        // Post-preemption occupancy never exceeds capacity in the records.
        assert!(result
            .step_records
            .iter()
            .all(|s| s.occupancy_tokens <= mem.token_capacity()));
    }

    #[test]
    fn single_oversized_request_is_fatal() {
        let model = LatencyModel::new(1.0, 1.0, 0.0, 0.1).unwrap();
        let mem = MemoryConfig::new(20, 1, 0.02).unwrap();
        let workload = vec![spec(0, 0.0, 10, 30)]; // needs 40 tokens eventually
        let err = run(
            &workload,
            static_policy(1),
            &model,
            &mem,
            &EngineConfig::default(),
            prior(),
        );
        assert!(matches!(err, Err(EngineError::RequestExceedsCapacity { id: 0, .. })));
    }

    #[test]
    fn queue_overflow_aborts() {
        let model = LatencyModel::new(1.0, 1.0, 0.0, 0.1).unwrap();
        let workload: Vec<RequestSpec> = (0..10).map(|i| spec(i, 0.0, 4, 4)).collect();
        let cfg = EngineConfig {
            max_queue: 5,
            ..EngineConfig::default()
        };
        let err = run(&workload, static_policy(1), &model, &big_memory(), &cfg, prior());
        assert!(matches!(err, Err(EngineError::QueueOverflow { .. })));
    }

    #[test]
    fn tbt_samples_match_step_durations() {
        let model = LatencyModel::new(5.0, 0.5, 0.0, 0.1).unwrap();
        let workload: Vec<RequestSpec> = (0..12).map(|i| spec(i, 0.0, 8, 6)).collect();
        let result = run(
            &workload,
            static_policy(4),
            &model,
            &big_memory(),
            &EngineConfig::default(),
            prior(),
        )
        .unwrap();
        let mut durations: Vec<f64> = result
            .step_records
            .iter()
            .filter(|s| s.tokens_out > 0)
            .map(|s| s.step_ms)
            .collect();
        let mut samples: Vec<f64> = result
            .request_records
            .iter()
            .flat_map(|r| r.tbt_samples.iter().copied())
            .collect();
        durations.sort_by(f64::total_cmp);
        samples.sort_by(f64::total_cmp);
        samples.dedup();
        durations.dedup();
        assert_eq!(samples, durations);
    }
}
