//! Step-width policies: the protected baseline, the slack budget, branch
//! externality, fixed-width baselines, and the greedy slack-budgeted planner.
//!
//! The planner is split in two layers. `plan_taper` snapshots live requests
//! into abstract widening candidates; `plan_widening` runs the greedy loop
//! over those candidates. The oracle module drives `plan_widening` directly
//! with synthetic instances.

use std::collections::BTreeMap;

use crate::costmodel::{LinearLatencyModel, StepComposition};
use crate::generation::{Position, RequestRuntime, SeqTag};

/// Score denominator guard; any tiny positive constant preserves ordering.
pub const EPS: f64 = 1e-9;

/// Anything the planner can query for step cost. The linear model is the
/// production predictor; the constant predictor is an ablation.
pub trait StepPredictor {
    fn predict(&self, s: StepComposition) -> f64;
}

impl StepPredictor for LinearLatencyModel {
    fn predict(&self, s: StepComposition) -> f64 {
        LinearLatencyModel::predict(self, s)
    }
}

/// Ablation predictor: every composition costs the same. A conservative
/// constant (above the SLO) makes the planner refuse all opportunistic
/// width, since the budget never rises above the baseline cost.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPredictor(pub f64);

impl StepPredictor for ConstantPredictor {
    fn predict(&self, _s: StepComposition) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityCurve {
    Linear,
    /// u(k) = ln(1 + k); the first opportunistic branch matters most.
    Concave,
    /// Linear utility scaled by tenant-class weight (unknown classes get 1).
    Weighted { weights: BTreeMap<String, f64> },
}

impl UtilityCurve {
    pub fn weight_for(&self, class: Option<&str>) -> f64 {
        match self {
            UtilityCurve::Weighted { weights } => class
                .and_then(|c| weights.get(c))
                .copied()
                .unwrap_or(1.0),
            _ => 1.0,
        }
    }

    pub fn shape(&self) -> CurveShape {
        match self {
            UtilityCurve::Concave => CurveShape::Concave,
            _ => CurveShape::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveShape {
    Linear,
    Concave,
}

impl CurveShape {
    pub fn value(self, weight: f64, k: u32) -> f64 {
        match self {
            CurveShape::Linear => weight * f64::from(k),
            CurveShape::Concave => weight * (1.0 + f64::from(k)).ln(),
        }
    }

    pub fn marginal(self, weight: f64, k: u32) -> f64 {
        self.value(weight, k + 1) - self.value(weight, k)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Off,
    Cap { k: u32 },
    Eager,
    Taper { rho: f64, utility: UtilityCurve },
}

impl PolicyKind {
    pub fn name(&self) -> String {
        match self {
            PolicyKind::Off => "off".into(),
            PolicyKind::Cap { k } => format!("cap{k}"),
            PolicyKind::Eager => "eager".into(),
            PolicyKind::Taper { .. } => "taper".into(),
        }
    }
}

/// One step's width decision across the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    /// Opportunistic branches granted beyond the protected token, per request.
    pub granted: BTreeMap<u64, u32>,
    /// The granted branch indices, ascending, excluding the protected pick.
    pub opportunistic: BTreeMap<u64, Vec<usize>>,
    /// Every active request's guaranteed single-token slot.
    pub protected_picks: BTreeMap<u64, SeqTag>,
    pub composition: StepComposition,
    /// Ready opportunistic branches that existed this step (granted or not).
    pub ready_opportunistic: u64,
}

impl Allocation {
    pub fn granted_opportunistic(&self) -> u64 {
        self.granted.values().map(|&k| u64::from(k)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlackBudget {
    pub t0: f64,
    pub min_slack: f64,
    pub budget: f64,
}

pub fn slack_budget(t0: f64, min_slack: f64, rho: f64) -> SlackBudget {
    SlackBudget { t0, min_slack, budget: t0 + rho * (min_slack - t0).max(0.0) }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct PlannerStats {
    pub predictor_evals: u64,
    pub initial_candidates: u64,
    pub grants: u64,
    pub prunes: u64,
}

impl PlannerStats {
    /// The complexity contract: each greedy sweep evaluates at most every
    /// surviving candidate once, and every sweep but the last commits a
    /// grant or prunes at least one candidate.
    pub fn within_bound(&self) -> bool {
        // One evaluation for the protected baseline, then each greedy sweep
        // touches at most every initial candidate once.
        self.predictor_evals <= 1 + self.initial_candidates * (1 + self.grants + self.prunes)
    }
}

/// Build S_0: one sequence per active request. Serial-like positions
/// contribute their continuation; open parallel stages contribute the lowest
/// incomplete branch.
pub fn build_protected_composition(
    active: &[&RequestRuntime],
) -> (StepComposition, BTreeMap<u64, SeqTag>) {
    let mut composition = StepComposition::empty();
    let mut picks = BTreeMap::new();
    for req in active {
        let pick = req.protected_pick();
        composition.add_sequence(req.visible_context(pick) as f64);
        picks.insert(req.id(), pick);
    }
    (composition, picks)
}

/// Deadline of a request's next token: last progress plus the per-token SLO.
pub fn deadline_of(req: &RequestRuntime, slo_tpot_ms: f64) -> f64 {
    req.last_progress_ms + slo_tpot_ms
}

pub fn compute_slack_budget(
    active: &[&RequestRuntime],
    model: &dyn StepPredictor,
    rho: f64,
    now: f64,
    slo_tpot_ms: f64,
) -> SlackBudget {
    let (composition, _) = build_protected_composition(active);
    let t0 = model.predict(composition);
    let min_slack = active
        .iter()
        .map(|r| deadline_of(r, slo_tpot_ms) - now)
        .fold(f64::INFINITY, f64::min);
    slack_budget(t0, min_slack, rho)
}

/// E_t(k): what every co-batched request pays for the widened step.
pub fn compute_externality(
    model: &dyn StepPredictor,
    widened: StepComposition,
    baseline: StepComposition,
) -> f64 {
    assert!(
        widened.n_tokens >= baseline.n_tokens
            && widened.aggregate_context >= baseline.aggregate_context - 1e-9,
        "widened composition must contain the baseline"
    );
    model.predict(widened) - model.predict(baseline)
}

/// The opportunistic branches a request exposes beyond its protected pick,
/// ascending, paired with each branch's visible context.
fn opportunistic_branches(req: &RequestRuntime) -> Vec<(usize, f64)> {
    if req.position() != Position::Branches {
        return Vec::new();
    }
    let ready = req.ready_branches();
    let protected = match req.protected_pick() {
        SeqTag::Branch(i) => i as usize,
        _ => unreachable!("open parallel stage protects a branch"),
    };
    ready
        .into_iter()
        .filter(|&i| i != protected)
        .map(|i| (i, req.visible_context(SeqTag::Branch(i as u32)) as f64))
        .collect()
}

/// Fixed-width baselines: Off grants nothing, Cap(k) grants up to k-1 beyond
/// the protected branch, Eager grants every ready branch.
pub fn plan_fixed(active: &[&RequestRuntime], kind: &PolicyKind) -> Allocation {
    let (mut composition, protected_picks) = build_protected_composition(active);
    let mut granted = BTreeMap::new();
    let mut opportunistic = BTreeMap::new();
    let mut ready_total = 0u64;
    for req in active {
        let avail = opportunistic_branches(req);
        ready_total += avail.len() as u64;
        let take = match kind {
            PolicyKind::Off => 0,
            PolicyKind::Cap { k } => avail.len().min((*k as usize).saturating_sub(1)),
            PolicyKind::Eager => avail.len(),
            PolicyKind::Taper { .. } => panic!("plan_fixed called with taper policy"),
        };
        let chosen: Vec<usize> = avail[..take].iter().map(|&(i, _)| i).collect();
        for &(_, ctx) in &avail[..take] {
            composition.add_sequence(ctx);
        }
        granted.insert(req.id(), take as u32);
        opportunistic.insert(req.id(), chosen);
    }
    Allocation {
        granted,
        opportunistic,
        protected_picks,
        composition,
        ready_opportunistic: ready_total,
    }
}

/// One request's view inside the greedy loop.
#[derive(Debug, Clone)]
pub struct WidenCandidate {
    pub id: u64,
    /// Visible context of each successive opportunistic branch, in grant order.
    pub branch_contexts: Vec<f64>,
    pub weight: f64,
    pub curve: CurveShape,
}

/// Greedy widening over abstract candidates: repeatedly commit the highest
/// utility-per-cost branch that keeps the predicted step within budget,
/// pruning any candidate whose next branch is infeasible (monotonicity makes
/// all its later branches infeasible too). Ties break to the lowest id.
pub fn plan_widening(
    model: &dyn StepPredictor,
    baseline: StepComposition,
    budget: f64,
    candidates: &[WidenCandidate],
) -> (BTreeMap<u64, u32>, StepComposition, PlannerStats) {
    let mut granted: BTreeMap<u64, u32> = candidates.iter().map(|c| (c.id, 0)).collect();
    let mut stats = PlannerStats {
        initial_candidates: candidates.iter().filter(|c| !c.branch_contexts.is_empty()).count()
            as u64,
        ..PlannerStats::default()
    };
    let mut live: Vec<&WidenCandidate> =
        candidates.iter().filter(|c| !c.branch_contexts.is_empty()).collect();
    let mut step = baseline;
    let mut step_cost = model.predict(step);

    while !live.is_empty() {
        let mut best: Option<(f64, u64, StepComposition, f64)> = None;
        let mut infeasible: Vec<u64> = Vec::new();
        for cand in &live {
            let k = granted[&cand.id];
            let mut widened = step;
            widened.add_sequence(cand.branch_contexts[k as usize]);
            let widened_cost = model.predict(widened);
            stats.predictor_evals += 1;
            if widened_cost > budget {
                infeasible.push(cand.id);
                continue;
            }
            let du = cand.curve.marginal(cand.weight, k);
            let dt = widened_cost - step_cost;
            let score = du / (EPS + dt.max(0.0));
            let better = match best {
                None => true,
                Some((best_score, best_id, _, _)) => {
                    score > best_score || (score == best_score && cand.id < best_id)
                }
            };
            if better {
                best = Some((score, cand.id, widened, widened_cost));
            }
        }
        stats.prunes += infeasible.len() as u64;
        live.retain(|c| !infeasible.contains(&c.id));
        let Some((score, id, widened, widened_cost)) = best else { break };
        if score <= 0.0 {
            break;
        }
        step = widened;
        step_cost = widened_cost;
        let k = granted.get_mut(&id).unwrap();
        *k += 1;
        stats.grants += 1;
        let exhausted = candidates
            .iter()
            .find(|c| c.id == id)
            .map(|c| (*k as usize) >= c.branch_contexts.len())
            .unwrap();
        if exhausted {
            live.retain(|c| c.id != id);
        }
    }
    (granted, step, stats)
}

/// The full per-step planner: protect every request, size the slack budget,
/// then greedily widen. `unbounded_budget` is the no-slack-budget ablation.
pub fn plan_taper(
    active: &[&RequestRuntime],
    model: &dyn StepPredictor,
    rho: f64,
    utility: &UtilityCurve,
    now: f64,
    slo_tpot_ms: f64,
    unbounded_budget: bool,
) -> (Allocation, SlackBudget, PlannerStats) {
    let (baseline, protected_picks) = build_protected_composition(active);
    let t0 = model.predict(baseline);
    let min_slack = active
        .iter()
        .map(|r| deadline_of(r, slo_tpot_ms) - now)
        .fold(f64::INFINITY, f64::min);
    let mut sb = slack_budget(t0, min_slack, rho);
    if unbounded_budget {
        sb.budget = f64::INFINITY;
    }

    let per_request: Vec<(u64, Vec<(usize, f64)>)> =
        active.iter().map(|r| (r.id(), opportunistic_branches(r))).collect();
    let ready_total: u64 = per_request.iter().map(|(_, v)| v.len() as u64).sum();

    // No slack to spend: the budget cannot cover any widening, so return the
    // protected composition without touching the greedy loop.
    if sb.budget <= sb.t0 && !unbounded_budget {
        let granted = per_request.iter().map(|(id, _)| (*id, 0)).collect();
        let opportunistic = per_request.iter().map(|(id, _)| (*id, Vec::new())).collect();
        let stats = PlannerStats {
            predictor_evals: 1,
            initial_candidates: per_request.iter().filter(|(_, v)| !v.is_empty()).count() as u64,
            ..PlannerStats::default()
        };
        return (
            Allocation {
                granted,
                opportunistic,
                protected_picks,
                composition: baseline,
                ready_opportunistic: ready_total,
            },
            sb,
            stats,
        );
    }

    let class_of: BTreeMap<u64, Option<String>> =
        active.iter().map(|r| (r.id(), r.script.class.clone())).collect();
    let candidates: Vec<WidenCandidate> = per_request
        .iter()
        .map(|(id, branches)| WidenCandidate {
            id: *id,
            branch_contexts: branches.iter().map(|&(_, ctx)| ctx).collect(),
            weight: utility.weight_for(class_of[id].as_deref()),
            curve: utility.shape(),
        })
        .collect();

    let (granted, composition, mut stats) = plan_widening(model, baseline, sb.budget, &candidates);
    stats.predictor_evals += 1; // t0

    let opportunistic: BTreeMap<u64, Vec<usize>> = per_request
        .iter()
        .map(|(id, branches)| {
            let k = granted.get(id).copied().unwrap_or(0) as usize;
            (*id, branches[..k].iter().map(|&(i, _)| i).collect())
        })
        .collect();

    (
        Allocation {
            granted,
            opportunistic,
            protected_picks,
            composition,
            ready_opportunistic: ready_total,
        },
        sb,
        stats,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::{RequestRuntime, RequestState, StepGrant};
    use crate::workload::{RequestScript, Stage};
    use std::sync::Arc;

    fn serial_req(id: u64, prompt: u32) -> RequestRuntime {
        let script = Arc::new(RequestScript {
            id,
            arrival_ms: 0.0,
            prompt,
            stages: vec![Stage::Serial { tokens: 100 }],
            class: None,
        });
        let mut rt = RequestRuntime::new(script);
        rt.state = RequestState::Active;
        rt
    }

    fn parallel_req(id: u64, prompt: u32, branches: Vec<u32>) -> RequestRuntime {
        let script = Arc::new(RequestScript {
            id,
            arrival_ms: 0.0,
            prompt,
            stages: vec![Stage::Parallel {
                header_tokens: 0,
                branch_lengths: branches,
                reduce_tokens: 2,
            }],
            class: None,
        });
        let mut rt = RequestRuntime::new(script);
        rt.state = RequestState::Active;
        rt
    }

    #[test]
    fn protected_composition_sums_contexts() {
        let (a, b, c) = (serial_req(1, 100), serial_req(2, 200), serial_req(3, 300));
        let (comp, picks) = build_protected_composition(&[&a, &b, &c]);
        assert_eq!(comp.n_tokens, 3);
        assert_eq!(comp.aggregate_context, 600.0);
        assert_eq!(picks.len(), 3);
        assert!(picks.values().all(|&p| p == SeqTag::Serial));
    }

    #[test]
    fn protected_pick_is_lowest_incomplete_branch() {
        let mut req = parallel_req(1, 10, vec![1, 3, 3]);
        req.advance(&StepGrant::Branches(vec![0]), 0.0).unwrap();
        let (_, picks) = build_protected_composition(&[&req]);
        assert_eq!(picks[&1], SeqTag::Branch(1));
    }

    #[test]
    fn empty_batch_is_empty_composition() {
        let (comp, picks) = build_protected_composition(&[]);
        assert_eq!(comp, StepComposition::empty());
        assert!(picks.is_empty());
    }

    #[test]
    fn slack_budget_formula() {
        let sb = slack_budget(10.0, 40.0, 0.8);
        assert_eq!(sb.budget, 34.0);
        let clamped = slack_budget(10.0, 5.0, 0.8);
        assert_eq!(clamped.budget, 10.0);
        let boundary = slack_budget(10.0, 10.0, 1.0);
        assert_eq!(boundary.budget, 10.0);
        assert!(sb.budget >= sb.t0 && clamped.budget >= clamped.t0);
    }

    #[test]
    fn compute_slack_budget_takes_most_urgent_deadline() {
        let mut a = serial_req(1, 100);
        let mut b = serial_req(2, 100);
        a.last_progress_ms = 90.0; // deadline 140
        b.last_progress_ms = 110.0; // deadline 160
        let model = LinearLatencyModel::new(5.0, 0.5, 0.002);
        // t0 = 5 + 1 + 0.4 = 6.4; min_slack = 140 - 100 = 40
        let sb = compute_slack_budget(&[&a, &b], &model, 0.5, 100.0, 50.0);
        assert!((sb.t0 - 6.4).abs() < 1e-12);
        assert_eq!(sb.min_slack, 40.0);
        assert!((sb.budget - (6.4 + 0.5 * 33.6)).abs() < 1e-12);
    }

    #[test]
    fn externality_examples() {
        let model = LinearLatencyModel::new(5.0, 0.05, 0.001);
        let base = StepComposition { n_tokens: 3, aggregate_context: 600.0 };
        assert_eq!(compute_externality(&model, base, base), 0.0);
        let mut widened = base;
        widened.add_sequence(100.0);
        let e = compute_externality(&model, widened, base);
        assert!((e - 0.15).abs() < 1e-12);
    }

    #[test]
    fn externality_monotone_over_nested_allocations() {
        let model = LinearLatencyModel::new(5.0, 0.05, 0.001);
        let base = StepComposition { n_tokens: 2, aggregate_context: 300.0 };
        let contexts = [50.0, 80.0, 120.0, 200.0];
        let mut prev = 0.0;
        let mut comp = base;
        for ctx in contexts {
            comp.add_sequence(ctx);
            let e = compute_externality(&model, comp, base);
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn fixed_policies_grant_by_definition() {
        let req = parallel_req(1, 10, vec![2, 2, 2, 2, 2]); // 5 branches, 4 ready beyond protected
        let off = plan_fixed(&[&req], &PolicyKind::Off);
        assert_eq!(off.granted[&1], 0);
        let (protected, _) = build_protected_composition(&[&req]);
        assert_eq!(off.composition, protected);

        let cap2 = plan_fixed(&[&req], &PolicyKind::Cap { k: 2 });
        assert_eq!(cap2.granted[&1], 1);
        assert_eq!(cap2.opportunistic[&1], vec![1]);

        let eager = plan_fixed(&[&req], &PolicyKind::Eager);
        assert_eq!(eager.granted[&1], 4);
        assert_eq!(eager.ready_opportunistic, 4);
        assert_eq!(eager.composition.n_tokens, 5);
    }

    #[test]
    fn widening_respects_budget_and_prefers_cheap_branches() {
        // Two single-branch candidates with marginal costs 3 ms and 5 ms;
        // t0 = 10, budget = 14. Only the 3 ms branch fits.
        let model = LinearLatencyModel { a: 0.0, b: 1e-9, c: 1.0 };
        let base = StepComposition { n_tokens: 0, aggregate_context: 10.0 };
        let cands = vec![
            WidenCandidate { id: 1, branch_contexts: vec![3.0], weight: 1.0, curve: CurveShape::Linear },
            WidenCandidate { id: 2, branch_contexts: vec![5.0], weight: 1.0, curve: CurveShape::Linear },
        ];
        let (granted, comp, stats) = plan_widening(&model, base, 14.0, &cands);
        assert_eq!(granted[&1], 1);
        assert_eq!(granted[&2], 0);
        assert!(model.predict(comp) <= 14.0 + 1e-9);
        assert!(stats.within_bound());
    }

    #[test]
    fn widening_stops_at_budget_boundary() {
        // 3 branches of marginal cost 1 each, budget allows 2 beyond t0 = 10.
        let model = LinearLatencyModel { a: 0.0, b: 1e-9, c: 1.0 };
        let base = StepComposition { n_tokens: 0, aggregate_context: 10.0 };
        let cands = vec![WidenCandidate {
            id: 1,
            branch_contexts: vec![1.0, 1.0, 1.0],
            weight: 1.0,
            curve: CurveShape::Linear,
        }];
        let (granted, _, stats) = plan_widening(&model, base, 12.5, &cands);
        assert_eq!(granted[&1], 2);
        assert_eq!(stats.prunes, 1);
        assert!(stats.within_bound());
    }

    #[test]
    fn widening_breaks_ties_to_lowest_id() {
        let model = LinearLatencyModel { a: 0.0, b: 1e-9, c: 1.0 };
        let base = StepComposition::empty();
        let cands = vec![
            WidenCandidate { id: 9, branch_contexts: vec![2.0], weight: 1.0, curve: CurveShape::Linear },
            WidenCandidate { id: 4, branch_contexts: vec![2.0], weight: 1.0, curve: CurveShape::Linear },
        ];
        let (granted, _, _) = plan_widening(&model, base, 2.1, &cands);
        assert_eq!((granted[&4], granted[&9]), (1, 0));
    }

    #[test]
    fn taper_with_no_slack_grants_nothing() {
        let mut req = parallel_req(1, 100, vec![4, 4, 4]);
        req.last_progress_ms = 0.0;
        let model = LinearLatencyModel::new(20.0, 0.05, 0.001);
        // now = 60 puts the deadline (50) in the past: min_slack < 0 < t0.
        let (alloc, sb, _) =
            plan_taper(&[&req], &model, 0.8, &UtilityCurve::Linear, 60.0, 50.0, false);
        assert_eq!(sb.budget, sb.t0);
        assert_eq!(alloc.granted_opportunistic(), 0);
        let (protected, _) = build_protected_composition(&[&req]);
        assert_eq!(alloc.composition, protected);
    }

    #[test]
    fn taper_admits_within_budget_and_reports_safety() {
        let serial = serial_req(2, 500);
        let par = parallel_req(1, 100, vec![4, 4, 4]);
        let model = LinearLatencyModel::new(5.0, 0.05, 0.01);
        let (alloc, sb, stats) =
            plan_taper(&[&par, &serial], &model, 0.8, &UtilityCurve::Linear, 0.0, 50.0, false);
        assert!(model.predict(alloc.composition) <= sb.budget + 1e-9);
        assert_eq!(alloc.protected_picks.len(), 2);
        assert_eq!(alloc.granted[&1], 2, "both opportunistic branches fit");
        assert!(stats.within_bound());
    }

    #[test]
    fn taper_unbounded_budget_is_eager() {
        let par = parallel_req(1, 100, vec![4, 4, 4, 4]);
        let model = LinearLatencyModel::new(45.0, 1.0, 0.01);
        let (alloc, _, _) =
            plan_taper(&[&par], &model, 0.8, &UtilityCurve::Linear, 0.0, 50.0, true);
        assert_eq!(alloc.granted[&1], 3);
    }

    #[test]
    fn constant_predictor_above_slo_grants_nothing() {
        let par = parallel_req(1, 100, vec![4, 4, 4]);
        let model = ConstantPredictor(60.0);
        let (alloc, sb, _) =
            plan_taper(&[&par], &model, 0.8, &UtilityCurve::Linear, 0.0, 50.0, false);
        assert_eq!(sb.budget, sb.t0);
        assert_eq!(alloc.granted_opportunistic(), 0);
    }

    #[test]
    fn prune_is_terminal_for_a_request() {
        // First branch of id 2 is infeasible; the planner must not evaluate
        // its second branch. id 1 grants twice. Evals: sweep 1 evaluates both
        // (prune 2, grant 1), sweep 2 evaluates only id 1.
        let model = LinearLatencyModel { a: 0.0, b: 1e-9, c: 1.0 };
        let base = StepComposition::empty();
        let cands = vec![
            WidenCandidate { id: 1, branch_contexts: vec![1.0, 1.0], weight: 1.0, curve: CurveShape::Linear },
            WidenCandidate { id: 2, branch_contexts: vec![50.0, 0.1], weight: 1.0, curve: CurveShape::Linear },
        ];
        let (granted, _, stats) = plan_widening(&model, base, 2.5, &cands);
        assert_eq!((granted[&1], granted[&2]), (2, 0));
        assert_eq!(stats.predictor_evals, 3);
        assert!(stats.within_bound());
    }

    #[test]
    fn concave_utility_spreads_grants() {
        // Equal costs, concave utility: second branch of one request is worth
        // less than first branch of another, so grants alternate.
        let model = LinearLatencyModel { a: 0.0, b: 1e-9, c: 1.0 };
        let cands = vec![
            WidenCandidate { id: 1, branch_contexts: vec![1.0, 1.0], weight: 1.0, curve: CurveShape::Concave },
            WidenCandidate { id: 2, branch_contexts: vec![1.0, 1.0], weight: 1.0, curve: CurveShape::Concave },
        ];
        let (granted, _, _) = plan_widening(&model, StepComposition::empty(), 3.5, &cands);
        assert_eq!((granted[&1], granted[&2]), (2, 1));
    }

    #[test]
    fn weighted_utility_prefers_heavier_class() {
        let model = LinearLatencyModel { a: 0.0, b: 1e-9, c: 1.0 };
        let cands = vec![
            WidenCandidate { id: 1, branch_contexts: vec![1.0], weight: 1.0, curve: CurveShape::Linear },
            WidenCandidate { id: 2, branch_contexts: vec![1.0], weight: 5.0, curve: CurveShape::Linear },
        ];
        let (granted, _, _) = plan_widening(&model, StepComposition::empty(), 1.5, &cands);
        assert_eq!((granted[&1], granted[&2]), (0, 1));
    }
}
