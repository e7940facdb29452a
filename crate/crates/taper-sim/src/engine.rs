//! The continuous-batching event loop: KV-gated admission, prefill delay,
//! per-step policy invocation, latency realization, request advancement,
//! paged KV accounting, predictor refresh, and record emission.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crate::costmodel::{
    refresh_model, GroundTruthModel, LinearLatencyModel, SampleWindow, StepComposition,
};
use crate::generation::{
    canonical_output, LifecycleEvent, Position, RequestRuntime, RequestState, SeqTag, StepGrant,
};
use crate::metrics::{MetricsLog, PhaseRecord, RequestOutcome, StepRecord, MS_PER_MIN};
use crate::policy::{
    deadline_of, plan_fixed, plan_taper, Allocation, ConstantPredictor, PolicyKind, StepPredictor,
};
use crate::workload::{RequestScript, Stage, Trace};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EngineConfig {
    pub slo_tpot_ms: f64,
    pub kv_capacity_blocks: u64,
    pub kv_block_size: u32,
    pub prefill_ms_per_token: f64,
    pub refresh_interval_min: f64,
    pub window_capacity: usize,
    /// Admit a request only when its whole KV footprint (prompt plus every
    /// scripted output token) fits in unreserved capacity. Disabling this
    /// admits on prefix fit alone and leans on preemption instead.
    pub reserve_full_need: bool,
    /// Keep per-request canonical output logs (memory-heavy; tests only).
    pub record_outputs: bool,
}

impl Default for EngineConfig {
    fn default() -> EngineConfig {
        EngineConfig {
            slo_tpot_ms: 50.0,
            kv_capacity_blocks: 1200,
            kv_block_size: 16,
            prefill_ms_per_token: 0.1,
            refresh_interval_min: 10.0,
            window_capacity: 200,
            reserve_full_need: true,
            record_outputs: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationConfig {
    /// Remove the slack budget: the planner widens without a latency cap.
    pub unbounded_budget: bool,
    /// Freeze each request's opportunistic width at phase open.
    pub no_replanning: bool,
    /// Replace the fitted predictor with a constant (milliseconds).
    pub constant_predictor: Option<f64>,
}

impl AblationConfig {
    pub fn any(&self) -> bool {
        self.unbounded_budget || self.no_replanning || self.constant_predictor.is_some()
    }
}

pub type SeqKey = (u32, SeqTag);

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KvError {
    #[error("kv exhausted: need {needed} blocks, {free} free")]
    Exhausted { needed: u64, free: u64 },
    #[error("request {0} not resident")]
    NotResident(u64),
    #[error("request {0} already resident")]
    AlreadyResident(u64),
}

#[derive(Debug, Clone, Default)]
struct RequestKv {
    prefix_blocks: u64,
    /// Per-sequence generated token counts and the blocks backing them.
    locals: BTreeMap<SeqKey, (u64, u64)>,
}

/// Paged KV accounting: prefix blocks charged once per request and shared by
/// its branches; branch-local (and serial-local) blocks charged lazily at
/// block boundaries; nothing moves on deferral.
#[derive(Debug, Clone)]
pub struct KvLedger {
    capacity: u64,
    free: u64,
    block_size: u32,
    requests: BTreeMap<u64, RequestKv>,
    /// Block-allocating token charges since the last drain, for the
    /// deferral audit.
    step_charges: Vec<(u64, SeqKey)>,
    pub total_mutations: u64,
}

impl KvLedger {
    pub fn new(capacity: u64, block_size: u32) -> KvLedger {
        KvLedger {
            capacity,
            free: capacity,
            block_size,
            requests: BTreeMap::new(),
            step_charges: Vec::new(),
            total_mutations: 0,
        }
    }

    pub fn blocks_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(u64::from(self.block_size))
    }

    pub fn free_blocks(&self) -> u64 {
        self.free
    }

    pub fn used_blocks(&self) -> u64 {
        self.capacity - self.free
    }

    /// Charge the prompt prefix plus any previously generated sequences (a
    /// resumed request re-enters with its cursors intact).
    pub fn activate(
        &mut self,
        id: u64,
        prompt_tokens: u64,
        existing: &[(SeqKey, u64)],
    ) -> Result<(), KvError> {
        if self.requests.contains_key(&id) {
            return Err(KvError::AlreadyResident(id));
        }
        let prefix = self.blocks_for(prompt_tokens);
        let locals: BTreeMap<SeqKey, (u64, u64)> = existing
            .iter()
            .map(|&(key, tokens)| (key, (tokens, self.blocks_for(tokens))))
            .collect();
        let needed = prefix + locals.values().map(|&(_, b)| b).sum::<u64>();
        if needed > self.free {
            return Err(KvError::Exhausted { needed, free: self.free });
        }
        self.free -= needed;
        self.total_mutations += 1;
        self.requests.insert(id, RequestKv { prefix_blocks: prefix, locals });
        Ok(())
    }

    /// Account one generated token on a sequence. Allocates a block only at
    /// a block boundary; a sequence with zero tokens holds zero blocks.
    pub fn charge_token(&mut self, id: u64, key: SeqKey) -> Result<(), KvError> {
        let req = self.requests.get_mut(&id).ok_or(KvError::NotResident(id))?;
        let entry = req.locals.entry(key).or_insert((0, 0));
        entry.0 += 1;
        let needed = entry.0.div_ceil(u64::from(self.block_size));
        if needed > entry.1 {
            if self.free == 0 {
                entry.0 -= 1;
                return Err(KvError::Exhausted { needed: 1, free: 0 });
            }
            self.free -= 1;
            entry.1 = needed;
            self.total_mutations += 1;
            self.step_charges.push((id, key));
        }
        Ok(())
    }

    /// Release every block the request holds; returns the freed count.
    pub fn release(&mut self, id: u64) -> Result<u64, KvError> {
        let req = self.requests.remove(&id).ok_or(KvError::NotResident(id))?;
        let freed = req.prefix_blocks + req.locals.values().map(|&(_, b)| b).sum::<u64>();
        self.free += freed;
        self.total_mutations += 1;
        debug_assert!(self.free <= self.capacity, "double free");
        Ok(freed)
    }

    pub fn drain_step_charges(&mut self) -> Vec<(u64, SeqKey)> {
        std::mem::take(&mut self.step_charges)
    }

    pub fn local_tokens(&self, id: u64, key: SeqKey) -> u64 {
        self.requests
            .get(&id)
            .and_then(|r| r.locals.get(&key))
            .map_or(0, |&(t, _)| t)
    }

    pub fn resident_blocks(&self, id: u64) -> Option<u64> {
        self.requests
            .get(&id)
            .map(|r| r.prefix_blocks + r.locals.values().map(|&(_, b)| b).sum::<u64>())
    }
}

/// Every sequence of the script that holds KV once generated, with its full
/// scripted token count.
fn script_sequences(script: &RequestScript) -> Vec<(SeqKey, u64)> {
    let mut out = Vec::new();
    for (s, stage) in script.stages.iter().enumerate() {
        let s = s as u32;
        match stage {
            Stage::Serial { tokens } => out.push(((s, SeqTag::Serial), u64::from(*tokens))),
            Stage::Parallel { header_tokens, branch_lengths, reduce_tokens } => {
                out.push(((s, SeqTag::Header), u64::from(*header_tokens)));
                for (i, &len) in branch_lengths.iter().enumerate() {
                    out.push(((s, SeqTag::Branch(i as u32)), u64::from(len)));
                }
                out.push(((s, SeqTag::Reduce), u64::from(*reduce_tokens)));
            }
        }
    }
    out.retain(|&(_, t)| t > 0);
    out
}

/// Sequences the runtime has generated so far (resident KV on resume).
fn resident_sequences(rt: &RequestRuntime) -> Vec<(SeqKey, u64)> {
    let mut out = Vec::new();
    for (s, stage) in rt.script.stages.iter().enumerate() {
        if s > rt.stage_index {
            break;
        }
        let key_stage = s as u32;
        if s < rt.stage_index {
            out.extend(
                script_sequences(&rt.script)
                    .into_iter()
                    .filter(|&((st, _), _)| st == key_stage),
            );
            continue;
        }
        match stage {
            Stage::Serial { .. } => {
                let done = rt.serial_progress();
                if done > 0 {
                    out.push(((key_stage, SeqTag::Serial), done));
                }
            }
            Stage::Parallel { branch_lengths, .. } => {
                let (header, reduce) = (rt.header_progress(), rt.reduce_progress());
                if header > 0 {
                    out.push(((key_stage, SeqTag::Header), header));
                }
                for i in 0..branch_lengths.len() {
                    let tokens = u64::from(rt.branch_cursor(i));
                    if tokens > 0 {
                        out.push(((key_stage, SeqTag::Branch(i as u32)), tokens));
                    }
                }
                if reduce > 0 {
                    out.push(((key_stage, SeqTag::Reduce), reduce));
                }
            }
        }
    }
    out
}

/// Full KV footprint of a script in blocks, prefix included.
pub fn script_need_blocks(script: &RequestScript, ledger: &KvLedger) -> u64 {
    ledger.blocks_for(u64::from(script.prompt))
        + script_sequences(script)
            .iter()
            .map(|&(_, t)| ledger.blocks_for(t))
            .sum::<u64>()
}

enum Predictor {
    Fitted(LinearLatencyModel),
    Constant(ConstantPredictor),
}

impl Predictor {
    fn as_dyn(&self) -> &dyn StepPredictor {
        match self {
            Predictor::Fitted(m) => m,
            Predictor::Constant(c) => c,
        }
    }
}

struct LiveRequest {
    rt: RequestRuntime,
    need_blocks: u64,
    prefill_done_ms: f64,
    max_tpot: f64,
    phase_start: Option<f64>,
    phase_tokens: u64,
    preemptions: u32,
}

/// Run one simulation to completion. Bit-deterministic for fixed inputs.
pub fn run_simulation(
    trace: &Trace,
    policy: &PolicyKind,
    gt: &GroundTruthModel,
    initial_predictor: LinearLatencyModel,
    cfg: &EngineConfig,
    ablations: &AblationConfig,
) -> MetricsLog {
    let mut log = MetricsLog {
        policy: policy.name(),
        slo_tpot_ms: cfg.slo_tpot_ms,
        ..MetricsLog::default()
    };
    let mut ledger = KvLedger::new(cfg.kv_capacity_blocks, cfg.kv_block_size);
    let mut predictor = match ablations.constant_predictor {
        Some(v) => Predictor::Constant(ConstantPredictor(v)),
        None => Predictor::Fitted(initial_predictor),
    };
    let mut window = SampleWindow::new(cfg.window_capacity);
    let mut outputs: BTreeMap<u64, Vec<(u32, SeqTag, u32)>> = BTreeMap::new();

    // Pending requests ordered FCFS by prefill completion.
    let mut pending: Vec<LiveRequest> = Vec::new();
    for script in &trace.scripts {
        let need = script_need_blocks(script, &ledger);
        if need > cfg.kv_capacity_blocks {
            log.unschedulable.push(script.id);
            continue;
        }
        log.arrivals_per_min
            .entry((script.arrival_ms / MS_PER_MIN) as u64)
            .and_modify(|c| *c += 1)
            .or_insert(1);
        let mut rt = RequestRuntime::new(Arc::clone(script));
        rt.log_output = cfg.record_outputs;
        pending.push(LiveRequest {
            prefill_done_ms: script.arrival_ms
                + cfg.prefill_ms_per_token * f64::from(script.prompt),
            rt,
            need_blocks: need,
            max_tpot: 0.0,
            phase_start: None,
            phase_tokens: 0,
            preemptions: 0,
        });
    }
    pending.sort_by(|a, b| {
        a.prefill_done_ms
            .total_cmp(&b.prefill_done_ms)
            .then(a.rt.id().cmp(&b.rt.id()))
    });

    let mut active: BTreeMap<u64, LiveRequest> = BTreeMap::new();
    let mut reserved_blocks = 0u64;
    let mut now = 0.0f64;
    let mut step_index = 0u64;
    let mut next_refresh_ms = cfg.refresh_interval_min * MS_PER_MIN;
    // no-replanning state: width frozen at phase open, per request.
    let mut frozen_width: BTreeMap<u64, u32> = BTreeMap::new();

    loop {
        if active.is_empty() && pending.is_empty() {
            break;
        }
        if active.is_empty() {
            now = now.max(pending[0].prefill_done_ms);
        }
        // FCFS admission, head-of-line blocking on KV reservation.
        while let Some(head) = pending.first() {
            if head.prefill_done_ms > now {
                break;
            }
            let fits = if cfg.reserve_full_need {
                reserved_blocks + head.need_blocks <= cfg.kv_capacity_blocks
            } else {
                // Prefix fit only, but a resumed request re-enters with its
                // generated sequences resident.
                let locals: u64 = resident_sequences(&head.rt)
                    .iter()
                    .map(|&(_, t)| ledger.blocks_for(t))
                    .sum();
                ledger.blocks_for(u64::from(head.rt.script.prompt)) + locals
                    <= ledger.free_blocks()
            };
            if !fits {
                break;
            }
            let mut req = pending.remove(0);
            let resident = resident_sequences(&req.rt);
            ledger
                .activate(req.rt.id(), u64::from(req.rt.script.prompt), &resident)
                .expect("admission checked capacity");
            reserved_blocks += req.need_blocks;
            req.rt.state = RequestState::Active;
            req.rt.activation_ms = now;
            req.rt.last_progress_ms = now;
            if req.rt.position() == Position::Branches && req.phase_start.is_none() {
                req.phase_start = Some(now);
            }
            active.insert(req.rt.id(), req);
        }
        ledger.drain_step_charges(); // activation charges are not deferrals
        if active.is_empty() {
            // Head of queue cannot start yet; jump to its prefill completion.
            now = pending[0].prefill_done_ms;
            continue;
        }

        // Plan the step.
        let refs: Vec<&RequestRuntime> = active.values().map(|r| &r.rt).collect();
        let planner_t0 = Instant::now();
        let (mut alloc, budget_ms) = match policy {
            PolicyKind::Taper { rho, utility } => {
                let (alloc, sb, stats) = plan_taper(
                    &refs,
                    predictor.as_dyn(),
                    *rho,
                    utility,
                    now,
                    cfg.slo_tpot_ms,
                    ablations.unbounded_budget,
                );
                log.planner.push(stats);
                (alloc, Some(sb.budget))
            }
            fixed => (plan_fixed(&refs, fixed), None),
        };
        log.planner_wall_ns.push(planner_t0.elapsed().as_nanos() as u64);

        if ablations.no_replanning {
            apply_frozen_widths(&mut alloc, &active, &mut frozen_width);
        }

        // Without full reservation the planned step may not fit; preempt the
        // latest-deadline request and replan until it does.
        if !cfg.reserve_full_need {
            let mut needed = 0u64;
            for (&id, req) in active.iter() {
                let pick = alloc.protected_picks[&id];
                let stage = req.rt.stage_index as u32;
                let keys: Vec<SeqKey> = match pick {
                    SeqTag::Branch(first) => {
                        let mut branches =
                            alloc.opportunistic.get(&id).cloned().unwrap_or_default();
                        branches.push(first as usize);
                        branches
                            .into_iter()
                            .map(|b| (stage, SeqTag::Branch(b as u32)))
                            .collect()
                    }
                    tag => vec![(stage, tag)],
                };
                for key in keys {
                    if ledger.local_tokens(id, key) % u64::from(cfg.kv_block_size) == 0 {
                        needed += 1;
                    }
                }
            }
            if needed > ledger.free_blocks() {
                let victim =
                    select_preemption_victim(active.values().map(|r| &r.rt), cfg.slo_tpot_ms)
                        .expect("active set nonempty");
                let mut req = active.remove(&victim).expect("victim is active");
                ledger.release(victim).expect("victim is resident");
                ledger.drain_step_charges();
                reserved_blocks -= req.need_blocks;
                req.rt.state = RequestState::Waiting;
                req.prefill_done_ms =
                    now + cfg.prefill_ms_per_token * f64::from(req.rt.script.prompt);
                req.phase_start = None;
                req.phase_tokens = 0;
                req.preemptions += 1;
                log.preemptions += 1;
                frozen_width.remove(&victim);
                let idx = pending.partition_point(|p| {
                    p.prefill_done_ms < req.prefill_done_ms
                        || (p.prefill_done_ms == req.prefill_done_ms
                            && p.rt.id() < req.rt.id())
                });
                pending.insert(idx, req);
                continue;
            }
        }

        let predicted = predictor.as_dyn().predict(alloc.composition);
        if let Some(budget) = budget_ms {
            if !ablations.no_replanning && predicted > budget + 1e-9 {
                log.budget_violations += 1;
            }
        }
        let realized = gt.realize_latency(alloc.composition, step_index);
        assert!(realized > 0.0, "step latency must be positive");
        let step_end = now + realized;

        // Advance everyone and account KV for admitted tokens only.
        let mut deliveries: Vec<(u64, u32, u32)> = Vec::new();
        let mut finished: Vec<u64> = Vec::new();
        let mut admitted: Vec<(u64, SeqKey)> = Vec::new();
        for (&id, req) in active.iter_mut() {
            let pick = alloc.protected_picks[&id];
            let stage = req.rt.stage_index as u32;
            let opportunistic = alloc.opportunistic.get(&id).cloned().unwrap_or_default();
            let grant = match pick {
                SeqTag::Branch(first) => {
                    let mut branches: Vec<usize> = opportunistic.clone();
                    branches.push(first as usize);
                    branches.sort_unstable();
                    StepGrant::Branches(branches)
                }
                _ => StepGrant::Serial,
            };
            let prev_progress = req.rt.last_progress_ms;
            let (serial_n, parallel_n) = match &grant {
                StepGrant::Serial => (1u32, 0u32),
                StepGrant::Branches(b) => (0, b.len() as u32),
            };
            match &grant {
                StepGrant::Serial => {
                    ledger.charge_token(id, (stage, pick)).expect("reserved kv");
                    admitted.push((id, (stage, pick)));
                }
                StepGrant::Branches(branches) => {
                    for &b in branches {
                        let key = (stage, SeqTag::Branch(b as u32));
                        ledger.charge_token(id, key).expect("reserved kv");
                        admitted.push((id, key));
                    }
                }
            }
            let events = req.rt.advance(&grant, step_end).expect("planned grant is valid");

            if serial_n > 0 {
                let lat = step_end - prev_progress;
                log.serial_samples.push((step_end, lat));
                req.max_tpot = req.max_tpot.max(lat);
            }
            req.phase_tokens += u64::from(parallel_n);
            deliveries.push((id, serial_n, parallel_n));

            for event in &events {
                match event {
                    LifecycleEvent::PhaseComplete => {
                        let start = req.phase_start.take().expect("phase was open");
                        let phase = PhaseRecord {
                            request_id: id,
                            start_ms: start,
                            end_ms: step_end,
                            tokens: req.phase_tokens,
                        };
                        let eff = (phase.end_ms - phase.start_ms) / phase.tokens as f64;
                        req.max_tpot = req.max_tpot.max(eff);
                        log.phases.push(phase);
                        req.phase_tokens = 0;
                        frozen_width.remove(&id);
                    }
                    LifecycleEvent::RequestFinished => finished.push(id),
                    _ => {}
                }
            }
            if !req.rt.is_finished()
                && req.rt.position() == Position::Branches
                && req.phase_start.is_none()
            {
                req.phase_start = Some(step_end);
            }
        }

        // Deferral audit: every block charge this step must belong to an
        // admitted sequence.
        for charge in ledger.drain_step_charges() {
            if !admitted.contains(&charge) {
                log.deferral_mutations += 1;
            }
        }

        for id in finished {
            let req = active.remove(&id).expect("finished request is active");
            ledger.release(id).expect("finished request is resident");
            reserved_blocks -= req.need_blocks;
            if cfg.record_outputs {
                outputs.insert(id, canonical_output(&req.rt.output_log));
            }
            log.outcomes.insert(
                id,
                RequestOutcome {
                    request_id: id,
                    arrival_ms: req.rt.script.arrival_ms,
                    activation_ms: req.rt.activation_ms,
                    completion_ms: step_end,
                    total_tokens: req.rt.tokens_emitted(),
                    max_tpot: req.max_tpot,
                    met_slo: req.max_tpot <= cfg.slo_tpot_ms,
                },
            );
        }

        window.push(alloc.composition, realized);
        while step_end >= next_refresh_ms {
            if let Predictor::Fitted(model) = &predictor {
                let (refreshed, _degenerate) = refresh_model(*model, &window);
                predictor = Predictor::Fitted(refreshed);
            }
            log.refresh_count += 1;
            next_refresh_ms += cfg.refresh_interval_min * MS_PER_MIN;
        }

        log.steps.push(StepRecord {
            step_index,
            start_ms: now,
            end_ms: step_end,
            composition: alloc.composition,
            predicted_ms: predicted,
            realized_ms: realized,
            budget_ms,
            granted_opportunistic: alloc.granted_opportunistic(),
            ready_opportunistic: alloc.ready_opportunistic,
            deliveries,
        });
        now = step_end;
        step_index += 1;
    }

    log.outputs = outputs;
    log
}

/// The no-replanning ablation: a request's opportunistic width is fixed at
/// the value granted when its phase first planned, and held until reduce.
fn apply_frozen_widths(
    alloc: &mut Allocation,
    active: &BTreeMap<u64, LiveRequest>,
    frozen: &mut BTreeMap<u64, u32>,
) {
    let mut composition = StepComposition::empty();
    for (&id, req) in active {
        let pick = alloc.protected_picks[&id];
        composition.add_sequence(req.rt.visible_context(pick) as f64);
        if req.rt.position() != Position::Branches {
            continue;
        }
        let planned = alloc.granted.get(&id).copied().unwrap_or(0);
        let width = *frozen.entry(id).or_insert(planned);
        let protected_branch = match pick {
            SeqTag::Branch(i) => i as usize,
            _ => unreachable!(),
        };
        let avail: Vec<usize> = req
            .rt
            .ready_branches()
            .into_iter()
            .filter(|&b| b != protected_branch)
            .collect();
        let take = (width as usize).min(avail.len());
        let chosen: Vec<usize> = avail[..take].to_vec();
        for &b in &chosen {
            composition.add_sequence(req.rt.visible_context(SeqTag::Branch(b as u32)) as f64);
        }
        alloc.granted.insert(id, take as u32);
        alloc.opportunistic.insert(id, chosen);
    }
    alloc.composition = composition;
}

/// Preemption victim choice: the active request with the latest deadline
/// (most slack), identified for callers that run without full reservation.
pub fn select_preemption_victim<'a, I>(active: I, slo_tpot_ms: f64) -> Option<u64>
where
    I: Iterator<Item = &'a RequestRuntime>,
{
    active
        .max_by(|a, b| {
            deadline_of(a, slo_tpot_ms)
                .total_cmp(&deadline_of(b, slo_tpot_ms))
                .then(a.id().cmp(&b.id()))
        })
        .map(|r| r.id())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Stage;

    fn serial_script(id: u64, arrival: f64, prompt: u32, tokens: u32) -> RequestScript {
        RequestScript {
            id,
            arrival_ms: arrival,
            prompt,
            stages: vec![Stage::Serial { tokens }],
            class: None,
        }
    }

    fn parallel_script(id: u64, arrival: f64, prompt: u32, branches: Vec<u32>) -> RequestScript {
        RequestScript {
            id,
            arrival_ms: arrival,
            prompt,
            stages: vec![
                Stage::Serial { tokens: 4 },
                Stage::Parallel { header_tokens: 1, branch_lengths: branches, reduce_tokens: 3 },
                Stage::Serial { tokens: 2 },
            ],
            class: None,
        }
    }

    fn quiet_gt(sigma: f64) -> GroundTruthModel {
        GroundTruthModel {
            base: LinearLatencyModel::new(5.0, 0.05, 0.001),
            noise_sigma: sigma,
            seed: 1,
        }
    }

    fn run(
        scripts: Vec<RequestScript>,
        policy: PolicyKind,
        sigma: f64,
        cfg: EngineConfig,
    ) -> MetricsLog {
        let trace = Trace::from_scripts(scripts);
        let gt = quiet_gt(sigma);
        run_simulation(&trace, &policy, &gt, gt.base, &cfg, &AblationConfig::default())
    }

    #[test]
    fn single_serial_request_walkthrough() {
        let log = run(
            vec![serial_script(1, 0.0, 100, 10)],
            PolicyKind::Off,
            0.0,
            EngineConfig::default(),
        );
        assert_eq!(log.steps.len(), 10);
        // Context grows each step, so noise-free latency strictly increases.
        for pair in log.steps.windows(2) {
            assert!(pair[1].realized_ms > pair[0].realized_ms);
        }
        let out = &log.outcomes[&1];
        assert_eq!(out.total_tokens, 10);
        assert!(out.met_slo);
        // Activation waits out the prefill delay: 100 tokens at 0.1 ms.
        assert_eq!(out.activation_ms, 10.0);
    }

    #[test]
    fn policies_coincide_on_serial_only_work() {
        let scripts: Vec<RequestScript> = (0..5)
            .map(|i| serial_script(i, i as f64 * 20.0, 50 + i as u32 * 10, 20))
            .collect();
        let mut a = run(scripts.clone(), PolicyKind::Off, 0.02, EngineConfig::default());
        let mut b = run(scripts, PolicyKind::Eager, 0.02, EngineConfig::default());
        a.policy = String::new();
        b.policy = String::new();
        a.planner_wall_ns.clear();
        b.planner_wall_ns.clear();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let scripts = vec![
            parallel_script(1, 0.0, 80, vec![6, 5, 7]),
            serial_script(2, 5.0, 60, 15),
            parallel_script(3, 12.0, 120, vec![4, 4]),
        ];
        let policy = PolicyKind::Taper { rho: 0.8, utility: crate::policy::UtilityCurve::Linear };
        let mut a = run(scripts.clone(), policy.clone(), 0.02, EngineConfig::default());
        let mut b = run(scripts, policy, 0.02, EngineConfig::default());
        // Planner wall times are host measurements, not simulated state.
        a.planner_wall_ns.clear();
        b.planner_wall_ns.clear();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn token_conservation_across_policies() {
        let scripts = vec![
            parallel_script(1, 0.0, 80, vec![6, 5, 7]),
            serial_script(2, 5.0, 60, 15),
            parallel_script(3, 12.0, 120, vec![4, 4]),
        ];
        let expected: u64 = scripts.iter().map(|s| s.total_output_tokens()).sum();
        for policy in [
            PolicyKind::Off,
            PolicyKind::Cap { k: 2 },
            PolicyKind::Eager,
            PolicyKind::Taper { rho: 0.8, utility: crate::policy::UtilityCurve::Linear },
        ] {
            let log = run(scripts.clone(), policy, 0.02, EngineConfig::default());
            let delivered: u64 = log.steps.iter().map(|s| s.tokens()).sum();
            assert_eq!(delivered, expected);
            assert_eq!(log.outcomes.len(), 3);
        }
    }

    #[test]
    fn canonical_outputs_invariant_across_policies() {
        let scripts = vec![
            parallel_script(1, 0.0, 80, vec![6, 5, 7]),
            parallel_script(2, 3.0, 90, vec![3, 8, 4, 5]),
            serial_script(3, 6.0, 40, 12),
        ];
        let cfg = EngineConfig { record_outputs: true, ..EngineConfig::default() };
        let reference = run(scripts.clone(), PolicyKind::Off, 0.02, cfg.clone());
        for policy in [
            PolicyKind::Cap { k: 2 },
            PolicyKind::Eager,
            PolicyKind::Taper { rho: 0.8, utility: crate::policy::UtilityCurve::Linear },
        ] {
            let log = run(scripts.clone(), policy.clone(), 0.02, cfg.clone());
            assert_eq!(log.outputs, reference.outputs, "{policy:?} diverged");
        }
    }

    #[test]
    fn kv_ledger_block_arithmetic() {
        let mut kv = KvLedger::new(100, 16);
        kv.activate(1, 100, &[]).unwrap();
        assert_eq!(kv.used_blocks(), 7, "ceil(100/16)");
        // 33 tokens on one branch -> 3 branch-local blocks.
        for _ in 0..33 {
            kv.charge_token(1, (0, SeqTag::Branch(0))).unwrap();
        }
        assert_eq!(kv.used_blocks(), 10);
        // A branch with zero generated tokens holds zero blocks.
        assert_eq!(kv.resident_blocks(1), Some(10));
        kv.release(1).unwrap();
        assert_eq!(kv.free_blocks(), 100);
    }

    #[test]
    fn kv_rejects_double_activation_and_unknown_release() {
        let mut kv = KvLedger::new(10, 16);
        kv.activate(1, 16, &[]).unwrap();
        assert_eq!(kv.activate(1, 16, &[]).unwrap_err(), KvError::AlreadyResident(1));
        assert_eq!(kv.release(9).unwrap_err(), KvError::NotResident(9));
    }

    #[test]
    fn kv_exhaustion_is_reported() {
        let mut kv = KvLedger::new(2, 16);
        kv.activate(1, 32, &[]).unwrap();
        let err = kv.charge_token(1, (0, SeqTag::Serial));
        // First token of a new sequence needs a block and none are free.
        assert_eq!(err.unwrap_err(), KvError::Exhausted { needed: 1, free: 0 });
    }

    #[test]
    fn oversized_request_is_reported_not_dropped() {
        let cfg = EngineConfig { kv_capacity_blocks: 4, ..EngineConfig::default() };
        let log = run(
            vec![serial_script(1, 0.0, 1000, 10), serial_script(2, 0.0, 16, 10)],
            PolicyKind::Off,
            0.0,
            cfg,
        );
        assert_eq!(log.unschedulable, vec![1]);
        assert_eq!(log.outcomes.len(), 1);
    }

    #[test]
    fn deferral_leaves_ledger_untouched() {
        // A wide phase under Cap(2): most branches are ready but deferred
        // every step; the audit must see zero unattributed block charges.
        let scripts = vec![parallel_script(1, 0.0, 80, vec![20, 20, 20, 20, 20, 20])];
        let log = run(scripts, PolicyKind::Cap { k: 2 }, 0.0, EngineConfig::default());
        assert!(log.steps.iter().any(|s| s.ready_opportunistic > s.granted_opportunistic));
        assert_eq!(log.deferral_mutations, 0);
    }

    #[test]
    fn refresh_cadence_matches_schedule() {
        let cfg = EngineConfig { refresh_interval_min: 0.002, ..EngineConfig::default() };
        let log = run(vec![serial_script(1, 0.0, 100, 200)], PolicyKind::Off, 0.0, cfg);
        let expected = (log.steps.last().unwrap().end_ms / 120.0).floor() as u64;
        assert!(expected >= 3, "span {} ms", log.span_ms());
        assert_eq!(log.refresh_count, expected);
    }

    #[test]
    fn taper_budget_safety_holds() {
        let scripts: Vec<RequestScript> = (0..10)
            .map(|i| parallel_script(i, i as f64 * 15.0, 100, vec![10, 12, 9, 11]))
            .collect();
        let log = run(
            scripts,
            PolicyKind::Taper { rho: 0.8, utility: crate::policy::UtilityCurve::Linear },
            0.02,
            EngineConfig::default(),
        );
        assert_eq!(log.budget_violations, 0);
        for step in &log.steps {
            let budget = step.budget_ms.expect("taper records budgets");
            assert!(step.predicted_ms <= budget + 1e-9);
        }
        assert!(log.planner.iter().all(|p| p.within_bound()));
    }

    #[test]
    fn deferral_slows_phase_by_width_factor() {
        // One request, fanout 4, equal branches: Off serializes the phase
        // (one branch token per step) while Eager advances all four.
        let script = parallel_script(1, 0.0, 100, vec![25, 25, 25, 25]);
        let off = run(vec![script.clone()], PolicyKind::Off, 0.0, EngineConfig::default());
        let eager = run(vec![script], PolicyKind::Eager, 0.0, EngineConfig::default());
        let off_eff = {
            let p = &off.phases[0];
            (p.end_ms - p.start_ms) / p.tokens as f64
        };
        let eager_eff = {
            let p = &eager.phases[0];
            (p.end_ms - p.start_ms) / p.tokens as f64
        };
        let ratio = off_eff / eager_eff;
        assert!((3.0..=4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn preemption_requeues_and_completes() {
        // Without full reservation and with a tiny ledger the engine must
        // preempt; the run still completes every request.
        let cfg = EngineConfig {
            kv_capacity_blocks: 30,
            reserve_full_need: false,
            ..EngineConfig::default()
        };
        let scripts: Vec<RequestScript> =
            (0..4).map(|i| serial_script(i, 0.0, 100, 120)).collect();
        let log = run(scripts, PolicyKind::Off, 0.0, cfg);
        assert_eq!(log.outcomes.len(), 4);
        let delivered: u64 = log.steps.iter().map(|s| s.tokens()).sum();
        assert_eq!(delivered, 480);
    }

    #[test]
    fn victim_selection_prefers_latest_deadline() {
        let mut a = RequestRuntime::new(Arc::new(serial_script(1, 0.0, 10, 5)));
        let mut b = RequestRuntime::new(Arc::new(serial_script(2, 0.0, 10, 5)));
        a.last_progress_ms = 100.0;
        b.last_progress_ms = 140.0;
        let victim = select_preemption_victim([&a, &b].into_iter(), 50.0);
        assert_eq!(victim, Some(2));
    }
}
