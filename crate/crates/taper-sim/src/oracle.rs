//! Exact reference solver for small width-allocation instances, and a
//! harness that replays the same instance through the greedy planner.
//!
//! Instances assume additive marginal costs, which lets the oracle enumerate
//! every grant vector exactly. The harness encodes the instance into the
//! greedy planner through a linear predictor whose context coefficient is 1,
//! so each branch's context equals its marginal cost.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::costmodel::{LinearLatencyModel, StepComposition};
use crate::policy::{plan_widening, CurveShape, WidenCandidate};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleRequest {
    /// Cost of each successive opportunistic branch, in grant order.
    pub marginal_costs: Vec<f64>,
    #[serde(default = "default_weight")]
    pub weight: f64,
    #[serde(default)]
    pub concave: bool,
}

fn default_weight() -> f64 {
    1.0
}

impl OracleRequest {
    fn curve(&self) -> CurveShape {
        if self.concave { CurveShape::Concave } else { CurveShape::Linear }
    }

    fn utility(&self, k: u32) -> f64 {
        self.curve().value(self.weight, k)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AllocationInstance {
    pub requests: Vec<OracleRequest>,
    /// Externality budget: total marginal cost admitted must not exceed it.
    pub budget: f64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OracleError {
    #[error("instance has {0} branches; exhaustive search is capped at 24")]
    TooLarge(usize),
    #[error("marginal costs must be positive")]
    NonPositiveCost,
}

impl AllocationInstance {
    pub fn validate(&self) -> Result<(), OracleError> {
        let branches: usize = self.requests.iter().map(|r| r.marginal_costs.len()).sum();
        if branches > 24 {
            return Err(OracleError::TooLarge(branches));
        }
        if self
            .requests
            .iter()
            .any(|r| r.marginal_costs.iter().any(|&c| c <= 0.0))
        {
            return Err(OracleError::NonPositiveCost);
        }
        Ok(())
    }
}

/// Exhaustive optimum over all grant vectors. Ties break to the
/// lexicographically smallest vector.
pub fn optimal_allocation(inst: &AllocationInstance) -> Result<(Vec<u32>, f64), OracleError> {
    inst.validate()?;
    let mut best_alloc = vec![0u32; inst.requests.len()];
    let mut best_utility = 0.0f64;
    let mut current = vec![0u32; inst.requests.len()];
    enumerate(inst, 0, 0.0, 0.0, &mut current, &mut best_alloc, &mut best_utility);
    Ok((best_alloc, best_utility))
}

fn enumerate(
    inst: &AllocationInstance,
    idx: usize,
    cost: f64,
    utility: f64,
    current: &mut Vec<u32>,
    best_alloc: &mut Vec<u32>,
    best_utility: &mut f64,
) {
    if idx == inst.requests.len() {
        let better = utility > *best_utility
            || (utility == *best_utility && current < best_alloc);
        if better {
            *best_alloc = current.clone();
            *best_utility = utility;
        }
        return;
    }
    let req = &inst.requests[idx];
    let mut branch_cost = 0.0;
    for k in 0..=req.marginal_costs.len() as u32 {
        if k > 0 {
            branch_cost += req.marginal_costs[k as usize - 1];
        }
        if cost + branch_cost > inst.budget + 1e-12 {
            break;
        }
        current[idx] = k;
        enumerate(inst, idx + 1, cost + branch_cost, utility + req.utility(k), current, best_alloc, best_utility);
    }
    current[idx] = 0;
}

#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub greedy_allocation: Vec<u32>,
    pub greedy_utility: f64,
    pub optimal_allocation: Vec<u32>,
    pub optimal_utility: f64,
    pub ratio: f64,
}

/// Run both solvers on the same instance. The greedy side goes through
/// `plan_widening` with an additive encoding: predictor (a=0, b→0, c=1) and
/// branch context = marginal cost − b, so each grant costs exactly its
/// marginal cost and feasibility matches the oracle's budget.
pub fn compare_greedy(inst: &AllocationInstance) -> Result<Comparison, OracleError> {
    inst.validate()?;
    let b = 1e-12;
    let model = LinearLatencyModel { a: 0.0, b, c: 1.0 };
    let candidates: Vec<WidenCandidate> = inst
        .requests
        .iter()
        .enumerate()
        .map(|(i, r)| WidenCandidate {
            id: i as u64,
            branch_contexts: r.marginal_costs.iter().map(|&c| c - b).collect(),
            weight: r.weight,
            curve: r.curve(),
        })
        .collect();
    let (granted, _, _) =
        plan_widening(&model, StepComposition::empty(), inst.budget, &candidates);
    let greedy_allocation: Vec<u32> = (0..inst.requests.len())
        .map(|i| granted.get(&(i as u64)).copied().unwrap_or(0))
        .collect();
    let greedy_utility: f64 = inst
        .requests
        .iter()
        .zip(&greedy_allocation)
        .map(|(r, &k)| r.utility(k))
        .sum();
    let (optimal, optimal_utility) = optimal_allocation(inst)?;
    let ratio = if optimal_utility == 0.0 { 1.0 } else { greedy_utility / optimal_utility };
    Ok(Comparison {
        greedy_allocation,
        greedy_utility,
        optimal_allocation: optimal,
        optimal_utility,
        ratio,
    })
}

/// A random instance for the greedy-ratio harness: up to `max_requests`
/// requests of up to `max_branches` branches, costs U(0.5, 5), mixed curves.
pub fn random_instance<R: Rng>(rng: &mut R, max_requests: usize, max_branches: usize) -> AllocationInstance {
    let n = rng.gen_range(1..=max_requests);
    let requests: Vec<OracleRequest> = (0..n)
        .map(|_| {
            let branches = rng.gen_range(1..=max_branches);
            OracleRequest {
                marginal_costs: (0..branches).map(|_| rng.gen_range(0.5..5.0)).collect(),
                weight: rng.gen_range(0.8..1.25),
                concave: rng.gen_bool(0.5),
            }
        })
        .collect();
    let total: f64 = requests.iter().flat_map(|r| &r.marginal_costs).sum();
    AllocationInstance { requests, budget: rng.gen_range(0.0..total * 1.1) }
}

/// Summary of a batch of random comparisons.
#[derive(Debug, Clone, Serialize)]
pub struct RatioSummary {
    pub instances: usize,
    pub min_ratio: f64,
    pub mean_ratio: f64,
}

pub fn ratio_harness<R: Rng>(rng: &mut R, instances: usize) -> RatioSummary {
    let mut min_ratio = f64::INFINITY;
    let mut sum = 0.0;
    for _ in 0..instances {
        let inst = random_instance(rng, 6, 4);
        let cmp = compare_greedy(&inst).expect("harness instances are in range");
        min_ratio = min_ratio.min(cmp.ratio);
        sum += cmp.ratio;
    }
    RatioSummary { instances, min_ratio, mean_ratio: sum / instances as f64 }
}

/// Map a grant vector to per-request counts for reporting.
pub fn as_map(allocation: &[u32]) -> BTreeMap<usize, u32> {
    allocation.iter().copied().enumerate().collect()
}
