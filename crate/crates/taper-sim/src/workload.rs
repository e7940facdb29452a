//! Trace format, synthetic multi-regime trace generation, and workload metrics.
//!
//! A trace is a line-oriented JSONL file: one request per line with keys
//! `id`, `arrival_ms`, `prompt`, `stages`. A stage is either `{"serial": N}`
//! or `{"parallel": {"header": H, "branches": [L, ...], "reduce": R}}`.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("line {line}: invalid JSON: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    InvalidRecord { line: usize, msg: String },
    #[error("trace is empty")]
    EmptyTrace,
    #[error("regime spec has no segments")]
    EmptySegments,
    #[error("degenerate regime spec: {0}")]
    DegenerateSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One segment of a request's output: a serial run of tokens, or a parallel
/// phase with a fanout of independent branches behind a reduce barrier.
///
/// Branch headers are folded into each branch's length; only the phase-level
/// header is kept separate because it decodes serially before the branches
/// open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StageRepr", into = "StageRepr")]
pub enum Stage {
    Serial {
        tokens: u32,
    },
    Parallel {
        header_tokens: u32,
        branch_lengths: Vec<u32>,
        reduce_tokens: u32,
    },
}

impl Stage {
    pub fn is_parallel(&self) -> bool {
        matches!(self, Stage::Parallel { .. })
    }

    pub fn fanout(&self) -> usize {
        match self {
            Stage::Serial { .. } => 0,
            Stage::Parallel { branch_lengths, .. } => branch_lengths.len(),
        }
    }

    /// Total output tokens contributed by this stage.
    pub fn total_tokens(&self) -> u64 {
        match self {
            Stage::Serial { tokens } => u64::from(*tokens),
            Stage::Parallel {
                header_tokens,
                branch_lengths,
                reduce_tokens,
            } => {
                u64::from(*header_tokens)
                    + branch_lengths.iter().map(|&l| u64::from(l)).sum::<u64>()
                    + u64::from(*reduce_tokens)
            }
        }
    }

    /// Tokens generated inside branches (the PTS numerator).
    pub fn branch_tokens(&self) -> u64 {
        match self {
            Stage::Serial { .. } => 0,
            Stage::Parallel { branch_lengths, .. } => {
                branch_lengths.iter().map(|&l| u64::from(l)).sum()
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            Stage::Serial { tokens } => {
                if *tokens == 0 {
                    return Err("serial stage must have at least one token".into());
                }
            }
            Stage::Parallel { branch_lengths, .. } => {
                if branch_lengths.len() < 2 {
                    return Err(format!("fanout < 2 (got {})", branch_lengths.len()));
                }
                if branch_lengths.iter().any(|&l| l == 0) {
                    return Err("branch lengths must be >= 1".into());
                }
            }
        }
        Ok(())
    }
}

// Wire representation: {"serial": N} | {"parallel": {...}}.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StageRepr {
    Serial { serial: u32 },
    Parallel { parallel: ParallelRepr },
}

#[derive(Serialize, Deserialize)]
struct ParallelRepr {
    #[serde(default)]
    header: u32,
    branches: Vec<u32>,
    #[serde(default)]
    reduce: u32,
}

impl TryFrom<StageRepr> for Stage {
    type Error = String;
    fn try_from(r: StageRepr) -> Result<Self, String> {
        let stage = match r {
            StageRepr::Serial { serial } => Stage::Serial { tokens: serial },
            StageRepr::Parallel { parallel } => Stage::Parallel {
                header_tokens: parallel.header,
                branch_lengths: parallel.branches,
                reduce_tokens: parallel.reduce,
            },
        };
        stage.validate()?;
        Ok(stage)
    }
}

impl From<Stage> for StageRepr {
    fn from(s: Stage) -> StageRepr {
        match s {
            Stage::Serial { tokens } => StageRepr::Serial { serial: tokens },
            Stage::Parallel {
                header_tokens,
                branch_lengths,
                reduce_tokens,
            } => StageRepr::Parallel {
                parallel: ParallelRepr {
                    header: header_tokens,
                    branches: branch_lengths,
                    reduce: reduce_tokens,
                },
            },
        }
    }
}

/// A request as a program of serial and parallel stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestScript {
    pub id: u64,
    pub arrival_ms: f64,
    pub prompt: u32,
    pub stages: Vec<Stage>,
    /// Tenant class, consulted by weighted utility curves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl RequestScript {
    pub fn is_decomposable(&self) -> bool {
        self.stages.iter().any(Stage::is_parallel)
    }

    pub fn total_output_tokens(&self) -> u64 {
        self.stages.iter().map(Stage::total_tokens).sum()
    }

    pub fn branch_tokens(&self) -> u64 {
        self.stages.iter().map(Stage::branch_tokens).sum()
    }

    fn validate(&self) -> Result<(), String> {
        if self.arrival_ms < 0.0 {
            return Err("negative arrival time".into());
        }
        if self.stages.is_empty() {
            return Err("stages must be non-empty".into());
        }
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// Sorted by arrival time.
    pub scripts: Vec<Arc<RequestScript>>,
    pub metadata: BTreeMap<String, String>,
    /// Set when the input was not arrival-sorted and had to be re-sorted.
    pub sorted_on_parse: bool,
}

impl Trace {
    pub fn from_scripts(mut scripts: Vec<RequestScript>) -> Trace {
        scripts.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
        Trace {
            scripts: scripts.into_iter().map(Arc::new).collect(),
            metadata: BTreeMap::new(),
            sorted_on_parse: false,
        }
    }

    pub fn len(&self) -> usize {
        self.scripts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scripts.is_empty()
    }

    pub fn span_ms(&self) -> f64 {
        self.scripts.last().map(|s| s.arrival_ms).unwrap_or(0.0)
    }
}

/// Parse a JSONL trace. Non-monotone arrivals are sorted with a flag rather
/// than rejected; malformed records are hard errors with line numbers.
pub fn parse_trace<R: BufRead>(reader: R) -> Result<Trace, WorkloadError> {
    let mut scripts: Vec<RequestScript> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let script: RequestScript =
            serde_json::from_str(&line).map_err(|e| WorkloadError::Syntax {
                line: line_no,
                msg: e.to_string(),
            })?;
        script.validate().map_err(|msg| WorkloadError::InvalidRecord {
            line: line_no,
            msg,
        })?;
        scripts.push(script);
    }
    let sorted = scripts
        .windows(2)
        .all(|w| w[0].arrival_ms <= w[1].arrival_ms);
    let mut trace = Trace::from_scripts(scripts);
    trace.sorted_on_parse = !sorted;
    Ok(trace)
}

pub fn serialize_trace<W: Write>(trace: &Trace, mut writer: W) -> Result<(), WorkloadError> {
    for script in &trace.scripts {
        serde_json::to_writer(&mut writer, script.as_ref())
            .map_err(|e| WorkloadError::Io(e.into()))?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub duration_min: f64,
    pub rate_rps: f64,
}

fn default_output_tokens() -> LengthStats {
    LengthStats { mean: 240.0, std: 60.0 }
}

fn default_second_phase_prob() -> f64 {
    0.25
}

/// Generation targets for a synthetic multi-regime trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub segments: Vec<Segment>,
    pub pdr_target: f64,
    /// Percentile -> fanout anchors, e.g. {10: 2, 25: 3, 50: 4, 75: 5, 90: 7}.
    pub fanout_percentiles: BTreeMap<u32, u32>,
    pub pts_target: f64,
    pub prompt_length: LengthStats,
    pub slo_tpot_ms: f64,
    #[serde(default = "default_output_tokens")]
    pub output_tokens: LengthStats,
    /// Probability that a decomposable request has a second parallel phase.
    #[serde(default = "default_second_phase_prob")]
    pub second_phase_prob: f64,
}

impl RegimeSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.segments.is_empty() {
            return Err(WorkloadError::EmptySegments);
        }
        if self.segments.iter().any(|s| s.rate_rps <= 0.0 || s.duration_min <= 0.0) {
            return Err(WorkloadError::DegenerateSpec(
                "segment rates and durations must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.pdr_target) {
            return Err(WorkloadError::DegenerateSpec("pdr_target outside [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.pts_target) {
            return Err(WorkloadError::DegenerateSpec("pts_target outside [0,1)".into()));
        }
        if self.fanout_percentiles.is_empty() {
            return Err(WorkloadError::DegenerateSpec("empty fanout percentile table".into()));
        }
        let mut prev = 0;
        for (&p, &v) in &self.fanout_percentiles {
            if p == 0 || p >= 100 {
                return Err(WorkloadError::DegenerateSpec("percentile outside (0,100)".into()));
            }
            if v < prev {
                return Err(WorkloadError::DegenerateSpec(
                    "fanout percentiles must be non-decreasing".into(),
                ));
            }
            if v < 2 {
                return Err(WorkloadError::DegenerateSpec("fanout anchors must be >= 2".into()));
            }
            prev = v;
        }
        if self.prompt_length.mean <= 0.0 || self.output_tokens.mean <= 0.0 {
            return Err(WorkloadError::DegenerateSpec("length means must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse-transform fanout sampler built from percentile anchors.
///
/// The CDF is linearly interpolated in fanout between anchors, clamped to the
/// first anchor below it and held flat at the last anchor above it, then
/// rounded to the nearest integer (minimum 2).
pub struct FanoutSampler {
    // (cumulative probability, fanout) anchors, ascending.
    anchors: Vec<(f64, f64)>,
}

impl FanoutSampler {
    pub fn new(percentiles: &BTreeMap<u32, u32>) -> FanoutSampler {
        let anchors = percentiles
            .iter()
            .map(|(&p, &v)| (f64::from(p) / 100.0, f64::from(v)))
            .collect();
        FanoutSampler { anchors }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.gen();
        let first = self.anchors[0];
        let last = *self.anchors.last().unwrap();
        let value = if u <= first.0 {
            first.1
        } else if u >= last.0 {
            last.1
        } else {
            let mut v = last.1;
            for w in self.anchors.windows(2) {
                let (p0, f0) = w[0];
                let (p1, f1) = w[1];
                if u < p1 {
                    v = f0 + (f1 - f0) * (u - p0) / (p1 - p0);
                    break;
                }
            }
            v
        };
        (value.round() as u32).max(2)
    }
}

fn lognormal_from_stats(stats: LengthStats) -> Result<LogNormal<f64>, WorkloadError> {
    if stats.mean <= 0.0 || stats.std < 0.0 {
        return Err(WorkloadError::DegenerateSpec("invalid length distribution".into()));
    }
    // Moment-match a log-normal to the requested mean and std.
    let cv2 = (stats.std / stats.mean).powi(2);
    let sigma2 = (1.0 + cv2).ln();
    let mu = stats.mean.ln() - sigma2 / 2.0;
    LogNormal::new(mu, sigma2.sqrt())
        .map_err(|e| WorkloadError::DegenerateSpec(e.to_string()))
}

/// Build the stage program for one decomposable request: serial preamble,
/// one or two parallel phases, serial tail. Branch tokens are sized so that
/// the request's parallel token share equals `pts` up to rounding.
fn decomposable_stages<R: Rng>(
    total_output: u64,
    pts: f64,
    sampler: &FanoutSampler,
    second_phase_prob: f64,
    rng: &mut R,
) -> Vec<Stage> {
    let phases: usize = if rng.gen::<f64>() < second_phase_prob && total_output >= 96 {
        2
    } else {
        1
    };
    let mut fanouts: Vec<u32> = (0..phases).map(|_| sampler.sample(rng)).collect();
    let min_branch_total: u64 = fanouts.iter().map(|&n| u64::from(n)).sum();
    let mut branch_total = ((total_output as f64) * pts).round() as u64;
    branch_total = branch_total.clamp(min_branch_total, total_output.saturating_sub(phases as u64 + 1));
    if branch_total < min_branch_total {
        // Output too short for the drawn structure; fall back to one phase.
        fanouts.truncate(1);
        branch_total = branch_total.max(u64::from(fanouts[0]));
    }
    let serial_total = total_output - branch_total;

    // Serial split: preamble, per-phase header and reduce, tail.
    let header_share = (serial_total as f64 * 0.10).floor() as u64;
    let reduce_share = (serial_total as f64 * 0.25).floor() as u64;
    let tail = (serial_total as f64 * 0.15).floor() as u64;
    let preamble = serial_total - header_share - reduce_share - tail;

    let mut stages = Vec::new();
    if preamble > 0 {
        stages.push(Stage::Serial { tokens: preamble as u32 });
    }
    let n_phases = fanouts.len() as u64;
    for (i, &fanout) in fanouts.iter().enumerate() {
        let is_last = i + 1 == fanouts.len();
        let phase_branch = if is_last {
            branch_total - (branch_total / n_phases) * (n_phases - 1)
        } else {
            branch_total / n_phases
        };
        let header = header_share / n_phases;
        let reduce = reduce_share / n_phases;
        // Near-even branch lengths with +/-10% jitter, each >= 1.
        let n = fanout as usize;
        let base = (phase_branch / fanout as u64).max(1);
        let mut lengths: Vec<u32> = (0..n)
            .map(|_| {
                let jitter = 1.0 + rng.gen_range(-0.10..0.10);
                ((base as f64 * jitter).round() as u32).max(1)
            })
            .collect();
        // Repair the sum to match the phase budget exactly.
        let mut sum: i64 = lengths.iter().map(|&l| i64::from(l)).sum();
        let target = phase_branch as i64;
        let mut j = 0;
        while sum != target {
            let idx = j % n;
            if sum < target {
                lengths[idx] += 1;
                sum += 1;
            } else if lengths[idx] > 1 {
                lengths[idx] -= 1;
                sum -= 1;
            }
            j += 1;
        }
        stages.push(Stage::Parallel {
            header_tokens: header as u32,
            branch_lengths: lengths,
            reduce_tokens: reduce as u32,
        });
    }
    if tail > 0 {
        stages.push(Stage::Serial { tokens: tail as u32 });
    }
    if stages.is_empty() {
        stages.push(Stage::Serial { tokens: total_output.max(1) as u32 });
    }
    stages
}

/// Synthesize a trace: piecewise-homogeneous Poisson arrivals per segment,
/// decomposable requests with probability `pdr_target`, fanouts from the
/// percentile table, branch token share matching `pts_target`.
/// Bit-deterministic per seed.
pub fn generate_trace(spec: &RegimeSpec, seed: u64) -> Result<Trace, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prompt_dist = lognormal_from_stats(spec.prompt_length)?;
    let output_dist = lognormal_from_stats(spec.output_tokens)?;
    let sampler = FanoutSampler::new(&spec.fanout_percentiles);

    let mut scripts = Vec::new();
    let mut id: u64 = 1;
    let mut segment_start_ms = 0.0;
    for segment in &spec.segments {
        let seg_span_ms = segment.duration_min * 60_000.0;
        let mean_gap_ms = 1000.0 / segment.rate_rps;
        let mut t = segment_start_ms;
        loop {
            // Exponential inter-arrival gap.
            let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            t += -mean_gap_ms * u.ln();
            if t >= segment_start_ms + seg_span_ms {
                break;
            }
            let prompt = (prompt_dist.sample(&mut rng).round() as u32).max(1);
            let total_output = (output_dist.sample(&mut rng).round() as u64).max(8);
            let decomposable = rng.gen::<f64>() < spec.pdr_target;
            let stages = if decomposable {
                decomposable_stages(
                    total_output,
                    spec.pts_target,
                    &sampler,
                    spec.second_phase_prob,
                    &mut rng,
                )
            } else {
                vec![Stage::Serial { tokens: total_output as u32 }]
            };
            scripts.push(RequestScript {
                id,
                arrival_ms: t,
                prompt,
                stages,
                class: None,
            });
            id += 1;
        }
        segment_start_ms += seg_span_ms;
    }
    if scripts.is_empty() {
        return Err(WorkloadError::DegenerateSpec(
            "no arrivals generated; rates too low for the segment spans".into(),
        ));
    }
    let mut trace = Trace::from_scripts(scripts);
    trace.metadata.insert("seed".into(), seed.to_string());
    Ok(trace)
}

/// PDR / PTS / ABF over a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStats {
    /// Proportion of decomposable requests.
    pub pdr: f64,
    /// Mean, over decomposable requests, of branch tokens / total output tokens.
    pub pts: f64,
    /// Mean branch fanout over all parallel stages.
    pub abf: f64,
}

pub fn characterize(trace: &Trace) -> Result<WorkloadStats, WorkloadError> {
    if trace.is_empty() {
        return Err(WorkloadError::EmptyTrace);
    }
    let total = trace.len() as f64;
    let mut decomposable = 0usize;
    let mut pts_sum = 0.0;
    let mut fanout_sum = 0u64;
    let mut parallel_stages = 0u64;
    for script in &trace.scripts {
        if script.is_decomposable() {
            decomposable += 1;
            pts_sum += script.branch_tokens() as f64 / script.total_output_tokens() as f64;
        }
        for stage in &script.stages {
            if stage.is_parallel() {
                fanout_sum += stage.fanout() as u64;
                parallel_stages += 1;
            }
        }
    }
    Ok(WorkloadStats {
        pdr: decomposable as f64 / total,
        pts: if decomposable > 0 { pts_sum / decomposable as f64 } else { 0.0 },
        abf: if parallel_stages > 0 {
            fanout_sum as f64 / parallel_stages as f64
        } else {
            0.0
        },
    })
}
