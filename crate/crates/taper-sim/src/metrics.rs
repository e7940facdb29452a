//! Evaluation metrics over simulation logs: throughput, goodput, SLO
//! attainment, per-class TPOT percentiles, branch admission rate, and the
//! windowed CSV export.
//!
//! Token latencies come in two classes. Serial-class tokens (serial stages,
//! phase headers, reduce segments) are judged per token. Parallel-class
//! tokens are judged per phase through effective TPOT: phase duration over
//! total phase tokens.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::costmodel::StepComposition;
use crate::generation::SeqTag;
use crate::policy::PlannerStats;

pub const MS_PER_MIN: f64 = 60_000.0;

#[derive(Debug, Clone, Serialize)]
pub struct RequestOutcome {
    pub request_id: u64,
    pub arrival_ms: f64,
    pub activation_ms: f64,
    pub completion_ms: f64,
    pub total_tokens: u64,
    /// Max over serial per-token latencies and per-phase effective TPOTs.
    pub max_tpot: f64,
    pub met_slo: bool,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PhaseRecord {
    pub request_id: u64,
    pub start_ms: f64,
    pub end_ms: f64,
    pub tokens: u64,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("phase generated no tokens")]
    EmptyPhase,
    #[error("no samples in class")]
    EmptyClass,
    #[error("no completed requests")]
    NoCompletions,
}

/// Wall-clock duration of the phase divided by its total token count.
pub fn effective_tpot(phase: &PhaseRecord) -> Result<f64, MetricsError> {
    if phase.tokens == 0 {
        return Err(MetricsError::EmptyPhase);
    }
    Ok((phase.end_ms - phase.start_ms) / phase.tokens as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step_index: u64,
    pub start_ms: f64,
    pub end_ms: f64,
    pub composition: StepComposition,
    pub predicted_ms: f64,
    pub realized_ms: f64,
    /// Planner budget for this step; absent under fixed policies.
    pub budget_ms: Option<f64>,
    pub granted_opportunistic: u64,
    pub ready_opportunistic: u64,
    /// (request, serial-class tokens, parallel-class tokens) delivered.
    pub deliveries: Vec<(u64, u32, u32)>,
}

impl StepRecord {
    pub fn tokens(&self) -> u64 {
        self.deliveries.iter().map(|&(_, s, p)| u64::from(s) + u64::from(p)).sum()
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricsLog {
    pub policy: String,
    pub slo_tpot_ms: f64,
    pub steps: Vec<StepRecord>,
    /// (delivery time, latency) of every serial-class token.
    pub serial_samples: Vec<(f64, f64)>,
    pub phases: Vec<PhaseRecord>,
    pub outcomes: BTreeMap<u64, RequestOutcome>,
    pub arrivals_per_min: BTreeMap<u64, u64>,
    pub planner: Vec<PlannerStats>,
    pub planner_wall_ns: Vec<u64>,
    pub budget_violations: u64,
    pub deferral_mutations: u64,
    pub preemptions: u64,
    pub refresh_count: u64,
    pub unschedulable: Vec<u64>,
    /// Canonical per-request outputs, populated only when the engine is
    /// configured to record them.
    pub outputs: BTreeMap<u64, Vec<(u32, SeqTag, u32)>>,
}

impl MetricsLog {
    pub fn span_ms(&self) -> f64 {
        self.steps.last().map(|s| s.end_ms).unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct WindowSummary {
    /// Tokens per second, all requests.
    pub throughput: f64,
    /// Tokens per second from requests whose final outcome met the SLO.
    pub goodput: f64,
    /// Granted / ready opportunistic branches; 1.0 when none were ready.
    pub admission_rate: f64,
    pub empty: bool,
}

pub fn summarize_window(log: &MetricsLog, t0_ms: f64, t1_ms: f64) -> WindowSummary {
    assert!(t1_ms > t0_ms, "window must have positive duration");
    let secs = (t1_ms - t0_ms) / 1000.0;
    let mut tokens = 0u64;
    let mut good_tokens = 0u64;
    let mut granted = 0u64;
    let mut ready = 0u64;
    let mut any = false;
    for step in &log.steps {
        if step.end_ms < t0_ms || step.end_ms >= t1_ms {
            continue;
        }
        any = true;
        granted += step.granted_opportunistic;
        ready += step.ready_opportunistic;
        for &(req, s, p) in &step.deliveries {
            let t = u64::from(s) + u64::from(p);
            tokens += t;
            if log.outcomes.get(&req).map(|o| o.met_slo).unwrap_or(false) {
                good_tokens += t;
            }
        }
    }
    WindowSummary {
        throughput: tokens as f64 / secs,
        goodput: good_tokens as f64 / secs,
        admission_rate: if ready == 0 { 1.0 } else { granted as f64 / ready as f64 },
        empty: !any,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpotClass {
    Serial,
    Parallel,
}

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest sample.
pub fn nearest_rank(samples: &mut Vec<f64>, p: f64) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptyClass);
    }
    samples.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * samples.len() as f64).ceil().max(1.0) as usize;
    Ok(samples[rank.min(samples.len()) - 1])
}

/// Percentile of per-token latencies (serial class) or per-phase effective
/// TPOTs (parallel class), optionally restricted to a time window.
pub fn tpot_percentile(
    log: &MetricsLog,
    class: TpotClass,
    p: f64,
    window_ms: Option<(f64, f64)>,
) -> Result<f64, MetricsError> {
    let in_window = |t: f64| window_ms.map(|(lo, hi)| t >= lo && t < hi).unwrap_or(true);
    let mut samples: Vec<f64> = match class {
        TpotClass::Serial => log
            .serial_samples
            .iter()
            .filter(|&&(t, _)| in_window(t))
            .map(|&(_, v)| v)
            .collect(),
        TpotClass::Parallel => log
            .phases
            .iter()
            .filter(|ph| in_window(ph.end_ms))
            .map(|ph| effective_tpot(ph).expect("recorded phases have tokens"))
            .collect(),
    };
    nearest_rank(&mut samples, p)
}

pub fn slo_attainment(log: &MetricsLog) -> Result<f64, MetricsError> {
    if log.outcomes.is_empty() {
        return Err(MetricsError::NoCompletions);
    }
    let met = log.outcomes.values().filter(|o| o.met_slo).count();
    Ok(met as f64 / log.outcomes.len() as f64)
}

pub const CSV_HEADER: &str = "window_start_min,policy,req_rate,mean_step_latency_ms,throughput,goodput,attainment,serial_p99_tpot,parallel_p99_tpot,admission_rate";

/// Per-minute time series, one row per simulated minute.
pub fn export_csv<W: Write>(log: &MetricsLog, mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    let minutes = (log.span_ms() / MS_PER_MIN).ceil() as u64;
    for m in 0..minutes {
        let (lo, hi) = (m as f64 * MS_PER_MIN, (m + 1) as f64 * MS_PER_MIN);
        let w = summarize_window(log, lo, hi);
        let steps: Vec<&StepRecord> = log
            .steps
            .iter()
            .filter(|s| s.end_ms >= lo && s.end_ms < hi)
            .collect();
        let mean_latency = if steps.is_empty() {
            0.0
        } else {
            steps.iter().map(|s| s.realized_ms).sum::<f64>() / steps.len() as f64
        };
        let req_rate =
            log.arrivals_per_min.get(&m).copied().unwrap_or(0) as f64 / 60.0;
        let completions: Vec<&RequestOutcome> = log
            .outcomes
            .values()
            .filter(|o| o.completion_ms >= lo && o.completion_ms < hi)
            .collect();
        let attainment = if completions.is_empty() {
            1.0
        } else {
            completions.iter().filter(|o| o.met_slo).count() as f64 / completions.len() as f64
        };
        let fmt = |r: Result<f64, MetricsError>| {
            r.map(|v| format!("{v:.3}")).unwrap_or_default()
        };
        writeln!(
            out,
            "{},{},{:.4},{:.3},{:.3},{:.3},{:.4},{},{},{:.4}",
            m,
            log.policy,
            req_rate,
            mean_latency,
            w.throughput,
            w.goodput,
            attainment,
            fmt(tpot_percentile(log, TpotClass::Serial, 99.0, Some((lo, hi)))),
            fmt(tpot_percentile(log, TpotClass::Parallel, 99.0, Some((lo, hi)))),
            w.admission_rate,
        )?;
    }
    Ok(())
}

/// Whole-run aggregates for the summary JSON.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub policy: String,
    pub requests_completed: usize,
    pub total_tokens: u64,
    pub span_ms: f64,
    pub throughput: f64,
    pub goodput: f64,
    pub attainment: f64,
    pub mean_step_latency_ms: f64,
    pub serial_p99_tpot: Option<f64>,
    pub parallel_p99_tpot: Option<f64>,
    pub admission_rate: f64,
    pub budget_violations: u64,
    pub deferral_mutations: u64,
    pub planner_median_wall_ns: Option<u64>,
    pub planner_within_bound: bool,
}

pub fn summarize_run(log: &MetricsLog) -> RunSummary {
    let span = log.span_ms().max(1e-9);
    let w = summarize_window(log, 0.0, span + 1.0);
    let mean_step = if log.steps.is_empty() {
        0.0
    } else {
        log.steps.iter().map(|s| s.realized_ms).sum::<f64>() / log.steps.len() as f64
    };
    let mut wall = log.planner_wall_ns.clone();
    wall.sort_unstable();
    RunSummary {
        policy: log.policy.clone(),
        requests_completed: log.outcomes.len(),
        total_tokens: log.steps.iter().map(|s| s.tokens()).sum(),
        span_ms: log.span_ms(),
        throughput: w.throughput,
        goodput: w.goodput,
        attainment: slo_attainment(log).unwrap_or(1.0),
        mean_step_latency_ms: mean_step,
        serial_p99_tpot: tpot_percentile(log, TpotClass::Serial, 99.0, None).ok(),
        parallel_p99_tpot: tpot_percentile(log, TpotClass::Parallel, 99.0, None).ok(),
        admission_rate: w.admission_rate,
        budget_violations: log.budget_violations,
        deferral_mutations: log.deferral_mutations,
        planner_median_wall_ns: (!wall.is_empty()).then(|| wall[wall.len() / 2]),
        planner_within_bound: log.planner.iter().all(|p| p.within_bound()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step(idx: u64, end: f64, realized: f64, deliveries: Vec<(u64, u32, u32)>) -> StepRecord {
        StepRecord {
            step_index: idx,
            start_ms: end - realized,
            end_ms: end,
            composition: StepComposition::empty(),
            predicted_ms: realized,
            realized_ms: realized,
            budget_ms: None,
            granted_opportunistic: 0,
            ready_opportunistic: 0,
            deliveries,
        }
    }

    fn outcome(id: u64, met: bool, completion: f64) -> RequestOutcome {
        RequestOutcome {
            request_id: id,
            arrival_ms: 0.0,
            activation_ms: 0.0,
            completion_ms: completion,
            total_tokens: 0,
            max_tpot: if met { 10.0 } else { 100.0 },
            met_slo: met,
        }
    }

    #[test]
    fn window_throughput_and_goodput() {
        // 10 s window: request 1 meets SLO with 100 tokens, request 2
        // violates with 50 -> throughput 15 tok/s, goodput 10 tok/s.
        let mut log = MetricsLog::default();
        log.steps.push(step(0, 5000.0, 10.0, vec![(1, 100, 0), (2, 50, 0)]));
        log.outcomes.insert(1, outcome(1, true, 5000.0));
        log.outcomes.insert(2, outcome(2, false, 5000.0));
        let w = summarize_window(&log, 0.0, 10_000.0);
        assert_eq!(w.throughput, 15.0);
        assert_eq!(w.goodput, 10.0);
        assert!(w.goodput <= w.throughput);
    }

    #[test]
    fn admission_rate_vacuous_without_ready_branches() {
        let mut log = MetricsLog::default();
        log.steps.push(step(0, 10.0, 10.0, vec![(1, 1, 0)]));
        let w = summarize_window(&log, 0.0, 100.0);
        assert_eq!(w.admission_rate, 1.0);
    }

    #[test]
    fn admission_rate_zero_when_ready_but_ungranted() {
        let mut log = MetricsLog::default();
        let mut s = step(0, 10.0, 10.0, vec![(1, 0, 1)]);
        s.ready_opportunistic = 3;
        log.steps.push(s);
        let w = summarize_window(&log, 0.0, 100.0);
        assert_eq!(w.admission_rate, 0.0);
    }

    #[test]
    fn empty_window_is_flagged() {
        let log = MetricsLog::default();
        let w = summarize_window(&log, 0.0, 100.0);
        assert!(w.empty);
        assert_eq!(w.throughput, 0.0);
    }

    #[test]
    fn effective_tpot_examples() {
        let phase = PhaseRecord { request_id: 1, start_ms: 0.0, end_ms: 200.0, tokens: 40 };
        assert_eq!(effective_tpot(&phase).unwrap(), 5.0);
        let single = PhaseRecord { request_id: 1, start_ms: 0.0, end_ms: 100.0, tokens: 10 };
        assert_eq!(effective_tpot(&single).unwrap(), 10.0);
        let empty = PhaseRecord { request_id: 1, start_ms: 0.0, end_ms: 1.0, tokens: 0 };
        assert_eq!(effective_tpot(&empty).unwrap_err(), MetricsError::EmptyPhase);
    }

    #[test]
    fn nearest_rank_percentiles() {
        let mut s = vec![10.0, 20.0, 30.0, 40.0];
        assert_eq!(nearest_rank(&mut s.clone(), 50.0).unwrap(), 20.0);
        assert_eq!(nearest_rank(&mut s.clone(), 99.0).unwrap(), 40.0);
        assert_eq!(nearest_rank(&mut s.clone(), 1.0).unwrap(), 10.0);
        let mut one = vec![7.0];
        assert_eq!(nearest_rank(&mut one, 50.0).unwrap(), 7.0);
        // Monotone in p.
        let mut prev = f64::NEG_INFINITY;
        for p in [1.0, 25.0, 50.0, 75.0, 99.0] {
            let v = nearest_rank(&mut s, p).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn attainment_ratio() {
        let mut log = MetricsLog::default();
        for i in 0..100 {
            log.outcomes.insert(i, outcome(i, i != 0, 0.0));
        }
        assert_eq!(slo_attainment(&log).unwrap(), 0.99);
        log.outcomes.insert(0, outcome(0, true, 0.0));
        assert_eq!(slo_attainment(&log).unwrap(), 1.0);
        assert_eq!(slo_attainment(&MetricsLog::default()).unwrap_err(), MetricsError::NoCompletions);
    }

    #[test]
    fn csv_shape() {
        let empty = MetricsLog::default();
        let mut buf = Vec::new();
        export_csv(&empty, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);

        let mut log = MetricsLog::default();
        log.policy = "off".into();
        log.steps.push(step(0, 30_000.0, 12.0, vec![(1, 5, 0)]));
        log.serial_samples.push((30_000.0, 12.0));
        let mut buf = Vec::new();
        export_csv(&log, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2, "header plus one window");
        assert!(text.lines().nth(1).unwrap().starts_with("0,off,"));

        // Row count tracks the simulated span.
        log.steps.push(step(1, 150_000.0, 12.0, vec![(1, 5, 0)]));
        let mut buf = Vec::new();
        export_csv(&log, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 3);
    }

    #[test]
    fn attainment_one_implies_goodput_equals_throughput() {
        let mut log = MetricsLog::default();
        log.steps.push(step(0, 100.0, 10.0, vec![(1, 10, 2), (2, 8, 0)]));
        log.outcomes.insert(1, outcome(1, true, 100.0));
        log.outcomes.insert(2, outcome(2, true, 100.0));
        let w = summarize_window(&log, 0.0, 1000.0);
        assert_eq!(w.throughput, w.goodput);
    }
}
