//! Token-by-token execution of request scripts.
//!
//! The runtime enforces the visibility rule (a branch sees the shared prefix,
//! the phase header, and its own prior tokens, never a sibling) and the reduce
//! barrier (reduce tokens start only after every branch completes). Tokens are
//! opaque ordinals; schedule invariance makes their content irrelevant to the
//! simulator.

use std::sync::Arc;

use rand::Rng;

use crate::workload::{RequestScript, Stage};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AdvanceError {
    #[error("request {0} is already finished")]
    Finished(u64),
    #[error("request {req}: branch {branch} is complete or out of range")]
    BranchUnavailable { req: u64, branch: usize },
    #[error("request {req}: serial advance during an open parallel stage")]
    SerialDuringBranches { req: u64 },
    #[error("request {req}: branch advance outside a parallel stage")]
    BranchOutsideParallel { req: u64 },
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ScheduleError {
    #[error("step {step}: {source}")]
    InvalidStep { step: usize, source: AdvanceError },
    #[error("barrier violated at step {step}: reduce admitted before all branches complete")]
    BarrierViolated { step: usize },
    #[error("schedule ended before the script completed")]
    Incomplete,
}

/// Where a token was emitted, in canonical order within a stage:
/// header, then branches ascending, then reduce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum SeqTag {
    Serial,
    Header,
    Branch(u32),
    Reduce,
}

impl SeqTag {
    fn canonical_rank(self) -> (u8, u32) {
        match self {
            SeqTag::Serial => (0, 0),
            SeqTag::Header => (0, 0),
            SeqTag::Branch(i) => (1, i),
            SeqTag::Reduce => (2, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct OutputEntry {
    pub stage_index: u32,
    pub seq: SeqTag,
    pub ordinal: u32,
    pub sim_time_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RequestState {
    Waiting,
    Prefilling,
    Active,
    Finished,
}

/// Sub-position within the current stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    /// A serial stage, or the header / reduce segment of a parallel stage.
    SerialLike(SeqTag),
    /// The branches of a parallel stage are open.
    Branches,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LifecycleEvent {
    BranchComplete(usize),
    /// All branches of the current parallel stage completed; the reduce
    /// segment opens in the same step's bookkeeping.
    PhaseComplete,
    StageComplete,
    RequestFinished,
}

/// What one request is granted in one decode step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepGrant {
    Serial,
    /// Ascending branch indices; includes the protected branch pick.
    Branches(Vec<usize>),
}

/// Live cursor state of one request.
#[derive(Debug, Clone)]
pub struct RequestRuntime {
    pub script: Arc<RequestScript>,
    pub state: RequestState,
    pub stage_index: usize,
    serial_cursor: u32,
    header_cursor: u32,
    reduce_cursor: u32,
    branch_cursors: Vec<u32>,
    reduce_open: bool,
    pub last_progress_ms: f64,
    pub activation_ms: f64,
    tokens_emitted: u64,
    pub output_log: Vec<OutputEntry>,
    pub log_output: bool,
}

impl RequestRuntime {
    pub fn new(script: Arc<RequestScript>) -> RequestRuntime {
        let mut rt = RequestRuntime {
            script,
            state: RequestState::Waiting,
            stage_index: 0,
            serial_cursor: 0,
            header_cursor: 0,
            reduce_cursor: 0,
            branch_cursors: Vec::new(),
            reduce_open: false,
            last_progress_ms: 0.0,
            activation_ms: 0.0,
            tokens_emitted: 0,
            output_log: Vec::new(),
            log_output: false,
        };
        rt.enter_stage();
        rt
    }

    pub fn id(&self) -> u64 {
        self.script.id
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    pub fn tokens_emitted(&self) -> u64 {
        self.tokens_emitted
    }

    pub fn branch_cursor(&self, branch: usize) -> u32 {
        self.branch_cursors[branch]
    }

    pub fn serial_progress(&self) -> u64 {
        u64::from(self.serial_cursor)
    }

    pub fn header_progress(&self) -> u64 {
        u64::from(self.header_cursor)
    }

    pub fn reduce_progress(&self) -> u64 {
        u64::from(self.reduce_cursor)
    }

    fn stage(&self) -> &Stage {
        &self.script.stages[self.stage_index]
    }

    fn enter_stage(&mut self) {
        self.serial_cursor = 0;
        self.header_cursor = 0;
        self.reduce_cursor = 0;
        self.reduce_open = false;
        self.branch_cursors.clear();
        if self.stage_index < self.script.stages.len() {
            if let Stage::Parallel { branch_lengths, .. } = self.stage() {
                self.branch_cursors = vec![0; branch_lengths.len()];
            }
        }
    }

    /// Current position within the stage program.
    pub fn position(&self) -> Position {
        match self.stage() {
            Stage::Serial { .. } => Position::SerialLike(SeqTag::Serial),
            Stage::Parallel { header_tokens, .. } => {
                if self.header_cursor < *header_tokens {
                    Position::SerialLike(SeqTag::Header)
                } else if self.reduce_open {
                    Position::SerialLike(SeqTag::Reduce)
                } else {
                    Position::Branches
                }
            }
        }
    }

    /// Incomplete branches of the current parallel stage. Empty in serial,
    /// header, and reduce segments, and at the barrier.
    pub fn ready_branches(&self) -> Vec<usize> {
        match self.position() {
            Position::Branches => {
                let Stage::Parallel { branch_lengths, .. } = self.stage() else {
                    unreachable!()
                };
                self.branch_cursors
                    .iter()
                    .zip(branch_lengths)
                    .enumerate()
                    .filter(|(_, (&cur, &len))| cur < len)
                    .map(|(i, _)| i)
                    .collect()
            }
            Position::SerialLike(_) => Vec::new(),
        }
    }

    /// The protected single-token pick: the serial continuation, or the
    /// lowest incomplete branch.
    pub fn protected_pick(&self) -> SeqTag {
        match self.position() {
            Position::SerialLike(tag) => tag,
            Position::Branches => {
                let lowest = self
                    .ready_branches()
                    .into_iter()
                    .next()
                    .expect("open parallel stage with no incomplete branch");
                SeqTag::Branch(lowest as u32)
            }
        }
    }

    /// Tokens visible to the next token of `seq`: prompt, completed prior
    /// stages, and the current stage's visible part. Sibling branches are
    /// excluded by construction.
    pub fn visible_context(&self, seq: SeqTag) -> u64 {
        let mut ctx = u64::from(self.script.prompt);
        for stage in &self.script.stages[..self.stage_index] {
            ctx += stage.total_tokens();
        }
        match seq {
            SeqTag::Serial => ctx += u64::from(self.serial_cursor),
            SeqTag::Header => ctx += u64::from(self.header_cursor),
            SeqTag::Branch(i) => {
                ctx += u64::from(self.header_cursor) + u64::from(self.branch_cursors[i as usize]);
            }
            SeqTag::Reduce => {
                ctx += u64::from(self.header_cursor)
                    + self.branch_cursors.iter().map(|&c| u64::from(c)).sum::<u64>()
                    + u64::from(self.reduce_cursor);
            }
        }
        ctx
    }

    fn log(&mut self, seq: SeqTag, ordinal: u32, now: f64) {
        if self.log_output {
            self.output_log.push(OutputEntry {
                stage_index: self.stage_index as u32,
                seq,
                ordinal,
                sim_time_ms: now,
            });
        }
    }

    /// Advance by one token on each admitted sequence. Branch emissions are
    /// logged in ascending branch index within the step.
    pub fn advance(
        &mut self,
        grant: &StepGrant,
        now: f64,
    ) -> Result<Vec<LifecycleEvent>, AdvanceError> {
        if self.is_finished() {
            return Err(AdvanceError::Finished(self.id()));
        }
        let mut events = Vec::new();
        let mut emitted = 0u64;
        match (grant, self.position()) {
            (StepGrant::Serial, Position::SerialLike(tag)) => {
                match tag {
                    SeqTag::Serial => {
                        let Stage::Serial { tokens } = *self.stage() else { unreachable!() };
                        self.log(SeqTag::Serial, self.serial_cursor, now);
                        self.serial_cursor += 1;
                        emitted += 1;
                        if self.serial_cursor == tokens {
                            events.push(LifecycleEvent::StageComplete);
                        }
                    }
                    SeqTag::Header => {
                        let Stage::Parallel { header_tokens, .. } = *self.stage() else {
                            unreachable!()
                        };
                        self.log(SeqTag::Header, self.header_cursor, now);
                        self.header_cursor += 1;
                        emitted += 1;
                        debug_assert!(self.header_cursor <= header_tokens);
                    }
                    SeqTag::Reduce => {
                        let Stage::Parallel { reduce_tokens, .. } = *self.stage() else {
                            unreachable!()
                        };
                        self.log(SeqTag::Reduce, self.reduce_cursor, now);
                        self.reduce_cursor += 1;
                        emitted += 1;
                        if self.reduce_cursor == reduce_tokens {
                            events.push(LifecycleEvent::StageComplete);
                        }
                    }
                    SeqTag::Branch(_) => unreachable!(),
                }
            }
            (StepGrant::Serial, Position::Branches) => {
                return Err(AdvanceError::SerialDuringBranches { req: self.id() });
            }
            (StepGrant::Branches(_), Position::SerialLike(_)) => {
                return Err(AdvanceError::BranchOutsideParallel { req: self.id() });
            }
            (StepGrant::Branches(branches), Position::Branches) => {
                let Stage::Parallel { branch_lengths, reduce_tokens, .. } = self.stage().clone()
                else {
                    unreachable!()
                };
                for &i in branches {
                    if i >= self.branch_cursors.len() || self.branch_cursors[i] >= branch_lengths[i]
                    {
                        return Err(AdvanceError::BranchUnavailable { req: self.id(), branch: i });
                    }
                    self.log(SeqTag::Branch(i as u32), self.branch_cursors[i], now);
                    self.branch_cursors[i] += 1;
                    emitted += 1;
                    if self.branch_cursors[i] == branch_lengths[i] {
                        events.push(LifecycleEvent::BranchComplete(i));
                    }
                }
                let barrier = self
                    .branch_cursors
                    .iter()
                    .zip(&branch_lengths)
                    .all(|(&c, &l)| c == l);
                if barrier {
                    events.push(LifecycleEvent::PhaseComplete);
                    self.reduce_open = true;
                    if reduce_tokens == 0 {
                        events.push(LifecycleEvent::StageComplete);
                    }
                }
            }
        }
        if events.contains(&LifecycleEvent::StageComplete) {
            self.stage_index += 1;
            if self.stage_index == self.script.stages.len() {
                self.state = RequestState::Finished;
                events.push(LifecycleEvent::RequestFinished);
            } else {
                self.enter_stage();
            }
        }
        if emitted > 0 {
            self.tokens_emitted += emitted;
            self.last_progress_ms = now;
        }
        Ok(events)
    }
}

/// Canonical output of an emitted log: per stage, header tokens in order,
/// branches ascending each in token order, then reduce. Timestamps are
/// stripped.
pub fn canonical_output(log: &[OutputEntry]) -> Vec<(u32, SeqTag, u32)> {
    let mut out: Vec<(u32, SeqTag, u32)> = log
        .iter()
        .map(|e| (e.stage_index, e.seq, e.ordinal))
        .collect();
    out.sort_by_key(|&(stage, seq, ordinal)| (stage, seq.canonical_rank(), ordinal));
    out
}

/// Replay one schedule against a fresh runtime; returns the canonical output.
pub fn replay_schedule(
    script: &Arc<RequestScript>,
    schedule: &[StepGrant],
) -> Result<Vec<(u32, SeqTag, u32)>, ScheduleError> {
    let mut rt = RequestRuntime::new(Arc::clone(script));
    rt.state = RequestState::Active;
    rt.log_output = true;
    for (step, grant) in schedule.iter().enumerate() {
        if rt.is_finished() {
            return Err(ScheduleError::InvalidStep {
                step,
                source: AdvanceError::Finished(script.id),
            });
        }
        rt.advance(grant, step as f64)
            .map_err(|source| match source {
                AdvanceError::SerialDuringBranches { .. } => {
                    ScheduleError::BarrierViolated { step }
                }
                source => ScheduleError::InvalidStep { step, source },
            })?;
    }
    if !rt.is_finished() {
        return Err(ScheduleError::Incomplete);
    }
    Ok(canonical_output(&rt.output_log))
}

/// Executable invariance check: two valid schedules of the same script must
/// produce identical canonical outputs. Exists to catch engine bugs; with
/// scripted deterministic tokens this must always return true.
pub fn check_schedule_invariance(
    script: &Arc<RequestScript>,
    schedule_a: &[StepGrant],
    schedule_b: &[StepGrant],
) -> Result<bool, ScheduleError> {
    let out_a = replay_schedule(script, schedule_a)?;
    let out_b = replay_schedule(script, schedule_b)?;
    Ok(out_a == out_b)
}

/// The all-sequential schedule: one token per step, branches in index order.
pub fn sequential_schedule(script: &RequestScript) -> Vec<StepGrant> {
    let mut steps = Vec::new();
    for stage in &script.stages {
        match stage {
            Stage::Serial { tokens } => {
                steps.extend(std::iter::repeat(StepGrant::Serial).take(*tokens as usize));
            }
            Stage::Parallel { header_tokens, branch_lengths, reduce_tokens } => {
                steps.extend(std::iter::repeat(StepGrant::Serial).take(*header_tokens as usize));
                for (i, &len) in branch_lengths.iter().enumerate() {
                    steps.extend(
                        std::iter::repeat(StepGrant::Branches(vec![i])).take(len as usize),
                    );
                }
                steps.extend(std::iter::repeat(StepGrant::Serial).take(*reduce_tokens as usize));
            }
        }
    }
    steps
}

/// A random valid schedule: serial segments advance one token per step;
/// within a parallel stage a random non-empty subset of incomplete branches
/// advances each step.
pub fn random_valid_schedule<R: Rng>(script: &Arc<RequestScript>, rng: &mut R) -> Vec<StepGrant> {
    let mut rt = RequestRuntime::new(Arc::clone(script));
    rt.state = RequestState::Active;
    let mut steps = Vec::new();
    while !rt.is_finished() {
        let grant = match rt.position() {
            Position::SerialLike(_) => StepGrant::Serial,
            Position::Branches => {
                let ready = rt.ready_branches();
                let mut picked: Vec<usize> =
                    ready.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
                if picked.is_empty() {
                    picked.push(ready[rng.gen_range(0..ready.len())]);
                }
                StepGrant::Branches(picked)
            }
        };
        rt.advance(&grant, steps.len() as f64).expect("generated grant must be valid");
        steps.push(grant);
    }
    steps
}

/// A random script for invariance testing.
pub fn random_script<R: Rng>(id: u64, rng: &mut R) -> RequestScript {
    let n_stages = rng.gen_range(1..=4);
    let mut stages = Vec::new();
    for _ in 0..n_stages {
        if rng.gen_bool(0.6) {
            let fanout = rng.gen_range(2..=5);
            stages.push(Stage::Parallel {
                header_tokens: rng.gen_range(0..4),
                branch_lengths: (0..fanout).map(|_| rng.gen_range(1..8)).collect(),
                reduce_tokens: rng.gen_range(0..4),
            });
        } else {
            stages.push(Stage::Serial { tokens: rng.gen_range(1..10) });
        }
    }
    RequestScript {
        id,
        arrival_ms: 0.0,
        prompt: rng.gen_range(1..64),
        stages,
        class: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn parallel_script(branches: Vec<u32>) -> Arc<RequestScript> {
        Arc::new(RequestScript {
            id: 1,
            arrival_ms: 0.0,
            prompt: 10,
            stages: vec![Stage::Parallel {
                header_tokens: 0,
                branch_lengths: branches,
                reduce_tokens: 2,
            }],
            class: None,
        })
    }

    fn active(script: &Arc<RequestScript>) -> RequestRuntime {
        let mut rt = RequestRuntime::new(Arc::clone(script));
        rt.state = RequestState::Active;
        rt
    }

    #[test]
    fn ready_branches_excludes_complete() {
        let script = parallel_script(vec![3, 4, 5]);
        let mut rt = active(&script);
        for _ in 0..3 {
            rt.advance(&StepGrant::Branches(vec![0]), 0.0).unwrap();
        }
        rt.advance(&StepGrant::Branches(vec![1]), 0.0).unwrap();
        rt.advance(&StepGrant::Branches(vec![1]), 0.0).unwrap();
        assert_eq!(rt.ready_branches(), vec![1, 2]);
    }

    #[test]
    fn serial_stage_has_no_ready_branches() {
        let script = Arc::new(RequestScript {
            id: 1,
            arrival_ms: 0.0,
            prompt: 0,
            stages: vec![Stage::Serial { tokens: 3 }],
            class: None,
        });
        let rt = active(&script);
        assert!(rt.ready_branches().is_empty());
        assert_eq!(rt.protected_pick(), SeqTag::Serial);
    }

    #[test]
    fn barrier_empties_ready_set_and_opens_reduce() {
        let script = parallel_script(vec![1, 1]);
        let mut rt = active(&script);
        let events = rt.advance(&StepGrant::Branches(vec![0, 1]), 0.0).unwrap();
        assert!(events.contains(&LifecycleEvent::PhaseComplete));
        assert!(rt.ready_branches().is_empty());
        assert_eq!(rt.position(), Position::SerialLike(SeqTag::Reduce));
    }

    #[test]
    fn branch_completion_events() {
        let script = parallel_script(vec![3, 4]);
        let mut rt = active(&script);
        for _ in 0..2 {
            rt.advance(&StepGrant::Branches(vec![0, 1]), 0.0).unwrap();
        }
        rt.advance(&StepGrant::Branches(vec![1]), 0.0).unwrap();
        // cursors now [2,3]; admit {0} -> BranchComplete(0)
        let events = rt.advance(&StepGrant::Branches(vec![0]), 0.0).unwrap();
        assert_eq!(events, vec![LifecycleEvent::BranchComplete(0)]);
        // cursors [3,3]; admit {1} -> BranchComplete(1) + PhaseComplete
        let events = rt.advance(&StepGrant::Branches(vec![1]), 0.0).unwrap();
        assert!(events.contains(&LifecycleEvent::BranchComplete(1)));
        assert!(events.contains(&LifecycleEvent::PhaseComplete));
    }

    #[test]
    fn last_serial_token_finishes_request() {
        let script = Arc::new(RequestScript {
            id: 7,
            arrival_ms: 0.0,
            prompt: 0,
            stages: vec![Stage::Serial { tokens: 1 }],
            class: None,
        });
        let mut rt = active(&script);
        let events = rt.advance(&StepGrant::Serial, 5.0).unwrap();
        assert!(events.contains(&LifecycleEvent::RequestFinished));
        assert!(rt.is_finished());
        assert_eq!(rt.last_progress_ms, 5.0);
    }

    #[test]
    fn advancing_finished_branch_errors() {
        let script = parallel_script(vec![1, 2]);
        let mut rt = active(&script);
        rt.advance(&StepGrant::Branches(vec![0]), 0.0).unwrap();
        let err = rt.advance(&StepGrant::Branches(vec![0]), 0.0).unwrap_err();
        assert_eq!(err, AdvanceError::BranchUnavailable { req: 1, branch: 0 });
    }

    #[test]
    fn serial_during_open_parallel_errors() {
        let script = parallel_script(vec![2, 2]);
        let mut rt = active(&script);
        let err = rt.advance(&StepGrant::Serial, 0.0).unwrap_err();
        assert_eq!(err, AdvanceError::SerialDuringBranches { req: 1 });
    }

    #[test]
    fn round_robin_vs_sequential_invariant() {
        let script = parallel_script(vec![2, 2]);
        let round_robin = vec![
            StepGrant::Branches(vec![0]),
            StepGrant::Branches(vec![1]),
            StepGrant::Branches(vec![0]),
            StepGrant::Branches(vec![1]),
            StepGrant::Serial,
            StepGrant::Serial,
        ];
        let sequential = sequential_schedule(&script);
        assert!(check_schedule_invariance(&script, &round_robin, &sequential).unwrap());
    }

    #[test]
    fn premature_reduce_reports_barrier_violation() {
        let script = parallel_script(vec![2, 2]);
        let bad = vec![
            StepGrant::Branches(vec![0]),
            StepGrant::Branches(vec![0]),
            StepGrant::Serial, // branch 1 incomplete
        ];
        let err = replay_schedule(&script, &bad).unwrap_err();
        assert_eq!(err, ScheduleError::BarrierViolated { step: 2 });
    }

    #[test]
    fn random_schedules_are_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for i in 0..50 {
            let script = Arc::new(random_script(i, &mut rng));
            let baseline = sequential_schedule(&script);
            for _ in 0..3 {
                let schedule = random_valid_schedule(&script, &mut rng);
                assert!(
                    check_schedule_invariance(&script, &schedule, &baseline).unwrap(),
                    "script {i} diverged"
                );
            }
        }
    }

    #[test]
    fn total_tokens_independent_of_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let script = Arc::new(random_script(1, &mut rng));
        let schedule = random_valid_schedule(&script, &mut rng);
        let mut rt = active(&script);
        for g in &schedule {
            rt.advance(g, 0.0).unwrap();
        }
        assert_eq!(rt.tokens_emitted(), script.total_output_tokens());
    }

    #[test]
    fn visible_context_excludes_siblings() {
        let script = Arc::new(RequestScript {
            id: 1,
            arrival_ms: 0.0,
            prompt: 100,
            stages: vec![Stage::Parallel {
                header_tokens: 2,
                branch_lengths: vec![5, 5],
                reduce_tokens: 1,
            }],
            class: None,
        });
        let mut rt = active(&script);
        rt.advance(&StepGrant::Serial, 0.0).unwrap();
        rt.advance(&StepGrant::Serial, 0.0).unwrap();
        rt.advance(&StepGrant::Branches(vec![0, 1]), 0.0).unwrap();
        rt.advance(&StepGrant::Branches(vec![0]), 0.0).unwrap();
        // branch 0: prompt 100 + header 2 + own 2; sibling's 1 token invisible.
        assert_eq!(rt.visible_context(SeqTag::Branch(0)), 104);
        assert_eq!(rt.visible_context(SeqTag::Branch(1)), 103);
    }
}
