//! Step latency prediction: the linear predictor, a noisy ground-truth twin
//! standing in for hardware, OLS fitting over a rolling sample window, and
//! MAPE evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::VecDeque;

/// Floor for fitted slope coefficients; keeps the predictor strictly
/// monotone when noise drives an OLS estimate slightly negative.
pub const COEFF_FLOOR: f64 = 1e-6;

/// A candidate decode step: how many sequences advance one token, and their
/// total visible context. The sole input to the cost model.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepComposition {
    pub n_tokens: u32,
    pub aggregate_context: f64,
}

impl StepComposition {
    pub fn empty() -> StepComposition {
        StepComposition { n_tokens: 0, aggregate_context: 0.0 }
    }

    pub fn add_sequence(&mut self, context: f64) {
        self.n_tokens += 1;
        self.aggregate_context += context;
    }
}

/// T(S) = a + b * n_tokens + c * aggregate_context, with b, c > 0 so that
/// widening a step always costs something.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinearLatencyModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LinearLatencyModel {
    pub fn new(a: f64, b: f64, c: f64) -> LinearLatencyModel {
        assert!(a >= 0.0 && b > 0.0 && c > 0.0, "coefficients must satisfy a >= 0, b > 0, c > 0");
        LinearLatencyModel { a, b, c }
    }

    pub fn predict(&self, s: StepComposition) -> f64 {
        self.a + self.b * f64::from(s.n_tokens) + self.c * s.aggregate_context
    }
}

/// Simulated hardware: the base model plus multiplicative truncated-normal
/// noise, reproducible per (seed, step_index).
#[derive(Debug, Clone, Copy)]
pub struct GroundTruthModel {
    pub base: LinearLatencyModel,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl GroundTruthModel {
    pub fn realize_latency(&self, s: StepComposition, step_index: u64) -> f64 {
        let clean = self.base.predict(s);
        if self.noise_sigma == 0.0 {
            return clean;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step_index);
        let normal = Normal::new(0.0, self.noise_sigma).expect("sigma must be finite");
        let eps = normal
            .sample(&mut rng)
            .clamp(-3.0 * self.noise_sigma, 3.0 * self.noise_sigma);
        clean * (1.0 + eps)
    }
}

/// Rolling window of (composition, observed latency) pairs.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    samples: VecDeque<(StepComposition, f64)>,
    capacity: usize,
}

impl SampleWindow {
    pub fn new(capacity: usize) -> SampleWindow {
        SampleWindow { samples: VecDeque::with_capacity(capacity), capacity }
    }

    pub fn push(&mut self, s: StepComposition, observed_ms: f64) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back((s, observed_ms));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(StepComposition, f64)> {
        self.samples.iter()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FitError {
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("rank-deficient design matrix: {feature} carries no independent variation")]
    RankDeficient { feature: &'static str },
}

#[derive(Debug, Clone, Copy)]
pub struct FitResult {
    pub model: LinearLatencyModel,
    /// Set when a fitted slope came out non-positive and was clamped to the
    /// floor; callers should treat the fit as suspect.
    pub clamped: bool,
}

/// Ordinary least squares over (1, n_tokens, aggregate_context) -> latency.
/// Solves the centered normal equations; exact on noise-free linear data.
pub fn fit_ols(window: &SampleWindow) -> Result<FitResult, FitError> {
    if window.len() < 3 {
        return Err(FitError::TooFewSamples(window.len()));
    }
    let m = window.len() as f64;
    let (mut mean_n, mut mean_l, mut mean_y) = (0.0, 0.0, 0.0);
    for (s, y) in window.iter() {
        mean_n += f64::from(s.n_tokens);
        mean_l += s.aggregate_context;
        mean_y += y;
    }
    mean_n /= m;
    mean_l /= m;
    mean_y /= m;

    let (mut snn, mut sll, mut snl, mut sny, mut sly) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut scale_n, mut scale_l) = (0.0f64, 0.0f64);
    for (s, y) in window.iter() {
        let dn = f64::from(s.n_tokens) - mean_n;
        let dl = s.aggregate_context - mean_l;
        let dy = y - mean_y;
        snn += dn * dn;
        sll += dl * dl;
        snl += dn * dl;
        sny += dn * dy;
        sly += dl * dy;
        scale_n = scale_n.max(dn.abs());
        scale_l = scale_l.max(dl.abs());
    }

    let tol = 1e-12;
    if snn <= tol * scale_n.max(1.0).powi(2) {
        return Err(FitError::RankDeficient { feature: "n_tokens" });
    }
    if sll <= tol * scale_l.max(1.0).powi(2) {
        return Err(FitError::RankDeficient { feature: "aggregate_context" });
    }
    let det = snn * sll - snl * snl;
    if det.abs() <= tol * snn * sll {
        return Err(FitError::RankDeficient { feature: "aggregate_context" });
    }

    let b = (sll * sny - snl * sly) / det;
    let c = (snn * sly - snl * sny) / det;
    let clamped = b <= 0.0 || c <= 0.0;
    let b = if b <= 0.0 { COEFF_FLOOR } else { b };
    let c = if c <= 0.0 { COEFF_FLOOR } else { c };
    let a = (mean_y - b * mean_n - c * mean_l).max(0.0);
    Ok(FitResult { model: LinearLatencyModel { a, b, c }, clamped })
}

/// Refit over the window; a degenerate window keeps the prior model and sets
/// the flag. The engine invokes this on a simulated 10-minute cadence.
pub fn refresh_model(prior: LinearLatencyModel, window: &SampleWindow) -> (LinearLatencyModel, bool) {
    match fit_ols(window) {
        Ok(fit) => (fit.model, false),
        Err(_) => (prior, true),
    }
}

/// Mean absolute percentage error of the model over observed samples.
pub fn evaluate_mape<'a, I>(model: LinearLatencyModel, samples: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a (StepComposition, f64)>,
{
    let (mut total, mut count) = (0.0, 0usize);
    for &(s, obs) in samples {
        total += (model.predict(s) - obs).abs() / obs;
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// The profiling grid: `n_points` batch sizes crossed with `l_points`
/// per-sequence context lengths.
pub fn profiling_grid(n_points: u32, l_points: u32) -> Vec<StepComposition> {
    let mut grid = Vec::new();
    for i in 1..=n_points {
        let n = i * 4;
        for j in 1..=l_points {
            let per_seq = 128.0 * f64::from(j);
            grid.push(StepComposition {
                n_tokens: n,
                aggregate_context: f64::from(n) * per_seq,
            });
        }
    }
    grid
}
