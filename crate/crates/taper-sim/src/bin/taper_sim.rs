//! Operator entry point: single runs, parameter sweeps, trace generation and
//! characterization, predictor fitting, and the small-instance oracle.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use taper_sim::costmodel::{
    evaluate_mape, fit_ols, profiling_grid, GroundTruthModel, LinearLatencyModel, SampleWindow,
    StepComposition,
};
use taper_sim::engine::{run_simulation, AblationConfig, EngineConfig};
use taper_sim::metrics::{export_csv, summarize_run, MetricsLog, RunSummary};
use taper_sim::oracle::{compare_greedy, AllocationInstance};
use taper_sim::policy::{PolicyKind, UtilityCurve};
use taper_sim::workload::{characterize, generate_trace, parse_trace, serialize_trace, RegimeSpec, Trace};

#[derive(Parser)]
#[command(name = "taper-sim", about = "Decode-serving simulator with slack-budgeted branch admission")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write step records, CSV, and a summary.
    Run(RunArgs),
    /// Run a cross-product of policies, rho, SLO, PDR, and ablations.
    Sweep(SweepArgs),
    /// Generate a synthetic trace from a regime spec.
    Generate(GenerateArgs),
    /// Print PDR/PTS/ABF for a trace.
    Characterize(CharacterizeArgs),
    /// Fit latency coefficients from profiling samples.
    Fit(FitArgs),
    /// Solve a small allocation instance exactly and compare to the greedy.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_parser = parse_policy_name)]
    policy: String,
    #[arg(long, value_parser = parse_rho)]
    rho: Option<f64>,
    #[arg(long, default_value = "linear")]
    utility: String,
    #[arg(long)]
    slo_ms: Option<f64>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec (TOML) listing axes and the base inputs.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Regime spec (JSON).
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CharacterizeArgs {
    #[arg(long)]
    trace: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    /// Profiling samples (JSON array of {n_tokens, aggregate_context,
    /// latency_ms}). When absent, samples are synthesized from the ground
    /// truth in --config over the standard grid.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Allocation instance (JSON).
    #[arg(long)]
    instance: PathBuf,
}

fn parse_rho(s: &str) -> Result<f64, String> {
    let rho: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if rho > 0.0 && rho <= 1.0 {
        Ok(rho)
    } else {
        Err(format!("rho must be in (0, 1], got {rho}"))
    }
}

fn parse_policy_name(s: &str) -> Result<String, String> {
    match s {
        "off" | "cap2" | "cap5" | "eager" | "taper" => Ok(s.to_string()),
        other => Err(format!("unknown policy {other:?} (expected off|cap2|cap5|eager|taper)")),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct GroundTruthConfig {
    a: f64,
    b: f64,
    c: f64,
    noise_sigma: f64,
}

impl Default for GroundTruthConfig {
    fn default() -> GroundTruthConfig {
        GroundTruthConfig { a: 6.0, b: 0.02, c: 0.0015, noise_sigma: 0.02 }
    }
}

/// Run configuration file: engine settings plus the ground-truth latency
/// coefficients. Flags override individual fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    slo_tpot_ms: f64,
    kv_capacity_blocks: u64,
    kv_block_size: u32,
    prefill_ms_per_token: f64,
    refresh_interval_min: f64,
    window_capacity: usize,
    ground_truth: GroundTruthConfig,
    /// Tenant class weights for the weighted utility curve.
    utility_weights: BTreeMap<String, f64>,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let e = EngineConfig::default();
        RunConfig {
            slo_tpot_ms: e.slo_tpot_ms,
            kv_capacity_blocks: e.kv_capacity_blocks,
            kv_block_size: e.kv_block_size,
            prefill_ms_per_token: e.prefill_ms_per_token,
            refresh_interval_min: e.refresh_interval_min,
            window_capacity: e.window_capacity,
            ground_truth: GroundTruthConfig::default(),
            utility_weights: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    fn engine(&self) -> EngineConfig {
        EngineConfig {
            slo_tpot_ms: self.slo_tpot_ms,
            kv_capacity_blocks: self.kv_capacity_blocks,
            kv_block_size: self.kv_block_size,
            prefill_ms_per_token: self.prefill_ms_per_token,
            refresh_interval_min: self.refresh_interval_min,
            window_capacity: self.window_capacity,
            ..EngineConfig::default()
        }
    }

    fn ground_truth(&self, seed: u64) -> GroundTruthModel {
        GroundTruthModel {
            base: LinearLatencyModel::new(
                self.ground_truth.a,
                self.ground_truth.b,
                self.ground_truth.c,
            ),
            noise_sigma: self.ground_truth.noise_sigma,
            seed,
        }
    }
}

fn build_policy(name: &str, rho: Option<f64>, utility: &UtilityCurve) -> Result<PolicyKind> {
    Ok(match name {
        "off" => PolicyKind::Off,
        "cap2" => PolicyKind::Cap { k: 2 },
        "cap5" => PolicyKind::Cap { k: 5 },
        "eager" => PolicyKind::Eager,
        "taper" => PolicyKind::Taper { rho: rho.unwrap_or(0.8), utility: utility.clone() },
        other => bail!("unknown policy {other:?}"),
    })
}

fn build_utility(name: &str, weights: &BTreeMap<String, f64>) -> Result<UtilityCurve> {
    Ok(match name {
        "linear" => UtilityCurve::Linear,
        "concave" => UtilityCurve::Concave,
        "weighted" => UtilityCurve::Weighted { weights: weights.clone() },
        other => bail!("unknown utility {other:?} (expected linear|concave|weighted)"),
    })
}

fn load_trace(path: &Path) -> Result<Trace> {
    let file = fs::File::open(path).with_context(|| format!("opening trace {}", path.display()))?;
    parse_trace(BufReader::new(file)).with_context(|| format!("parsing trace {}", path.display()))
}

/// Profile the ground truth over the standard grid and fit the initial
/// predictor, mirroring offline calibration against real hardware.
fn profile_and_fit(gt: &GroundTruthModel) -> Result<LinearLatencyModel> {
    let grid = profiling_grid(20, 25);
    let mut window = SampleWindow::new(grid.len());
    for (i, &s) in grid.iter().enumerate() {
        window.push(s, gt.realize_latency(s, i as u64));
    }
    Ok(fit_ols(&window).context("fitting profiling grid")?.model)
}

fn write_run_outputs(log: &MetricsLog, out_dir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let steps = fs::File::create(out_dir.join("steps.jsonl"))?;
    let mut steps = BufWriter::new(steps);
    for step in &log.steps {
        serde_json::to_writer(&mut steps, step)?;
        steps.write_all(b"\n")?;
    }
    steps.flush()?;

    let csv = fs::File::create(out_dir.join("metrics.csv"))?;
    export_csv(log, BufWriter::new(csv))?;

    let summary = summarize_run(log);
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn cmd_run(args: &RunArgs) -> Result<()> {
    let mut config = RunConfig::load(args.config.as_deref())?;
    if let Some(slo) = args.slo_ms {
        config.slo_tpot_ms = slo;
    }
    let utility = build_utility(&args.utility, &config.utility_weights)?;
    let policy = build_policy(&args.policy, args.rho, &utility)?;
    let trace = load_trace(&args.trace)?;
    let gt = config.ground_truth(args.seed);
    let predictor = profile_and_fit(&gt)?;
    let log = run_simulation(
        &trace,
        &policy,
        &gt,
        predictor,
        &config.engine(),
        &AblationConfig::default(),
    );
    let summary = write_run_outputs(&log, &args.out)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

/// Sweep spec: axis lists plus the base inputs. Either a fixed trace or a
/// regime spec (required for the pdr axis) must be given.
#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepSpec {
    policies: Vec<String>,
    rho: Vec<f64>,
    slo_ms: Vec<f64>,
    pdr: Vec<f64>,
    ablations: Vec<String>,
    constant_predictor_ms: f64,
    trace: Option<PathBuf>,
    regime: Option<PathBuf>,
    config: Option<PathBuf>,
    utility: String,
}

impl Default for SweepSpec {
    fn default() -> SweepSpec {
        SweepSpec {
            policies: vec!["taper".into()],
            rho: vec![0.8],
            slo_ms: vec![50.0],
            pdr: Vec::new(),
            ablations: vec!["none".into()],
            constant_predictor_ms: 60.0,
            trace: None,
            regime: None,
            config: None,
            utility: "linear".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct SweepCell {
    policy: String,
    rho: f64,
    slo_ms: f64,
    pdr: Option<f64>,
    ablation: String,
}

impl SweepCell {
    fn label(&self) -> String {
        let pdr = self.pdr.map(|p| format!("_pdr{p}")).unwrap_or_default();
        format!("{}_rho{}_slo{}{}_{}", self.policy, self.rho, self.slo_ms, pdr, self.ablation)
    }
}

fn ablation_config(name: &str, constant_ms: f64) -> Result<AblationConfig> {
    Ok(match name {
        "none" => AblationConfig::default(),
        "no-slack-budget" => AblationConfig { unbounded_budget: true, ..AblationConfig::default() },
        "no-replanning" => AblationConfig { no_replanning: true, ..AblationConfig::default() },
        "constant-predictor" => AblationConfig {
            constant_predictor: Some(constant_ms),
            ..AblationConfig::default()
        },
        other => bail!(
            "unknown ablation {other:?} (expected none|no-slack-budget|no-replanning|constant-predictor)"
        ),
    })
}

fn sweep_cells(spec: &SweepSpec) -> Result<Vec<SweepCell>> {
    for rho in &spec.rho {
        if !(*rho > 0.0 && *rho <= 1.0) {
            bail!("rho must be in (0, 1], got {rho}");
        }
    }
    let pdrs: Vec<Option<f64>> = if spec.pdr.is_empty() {
        vec![None]
    } else {
        spec.pdr.iter().copied().map(Some).collect()
    };
    let mut cells = Vec::new();
    for policy in &spec.policies {
        parse_policy_name(policy).map_err(anyhow::Error::msg)?;
        // rho only parameterizes the budgeted planner.
        let rhos: &[f64] = if policy == "taper" { &spec.rho } else { &spec.rho[..1] };
        for &rho in rhos {
            for &slo in &spec.slo_ms {
                for &pdr in &pdrs {
                    for ablation in &spec.ablations {
                        ablation_config(ablation, spec.constant_predictor_ms)?;
                        cells.push(SweepCell {
                            policy: policy.clone(),
                            rho,
                            slo_ms: slo,
                            pdr,
                            ablation: ablation.clone(),
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn run_cell(
    cell: &SweepCell,
    spec: &SweepSpec,
    base_config: &RunConfig,
    fixed_trace: Option<&Trace>,
    regime: Option<&RegimeSpec>,
    seed: u64,
) -> Result<RunSummary> {
    let mut config = base_config.clone();
    config.slo_tpot_ms = cell.slo_ms;
    let utility = build_utility(&spec.utility, &config.utility_weights)?;
    let policy = build_policy(&cell.policy, Some(cell.rho), &utility)?;
    let ablations = ablation_config(&cell.ablation, spec.constant_predictor_ms)?;

    let generated;
    let trace = match (cell.pdr, fixed_trace) {
        (Some(pdr), _) => {
            let regime = regime.context("pdr axis requires a regime spec")?;
            let mut regime = regime.clone();
            regime.pdr_target = pdr;
            generated = generate_trace(&regime, seed)?;
            &generated
        }
        (None, Some(trace)) => trace,
        (None, None) => bail!("sweep spec needs either a trace or a regime spec"),
    };

    let gt = config.ground_truth(seed);
    let predictor = profile_and_fit(&gt)?;
    let log = run_simulation(trace, &policy, &gt, predictor, &config.engine(), &ablations);
    Ok(summarize_run(&log))
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading sweep spec {}", args.spec.display()))?;
    let spec: SweepSpec = toml::from_str(&text)
        .with_context(|| format!("parsing sweep spec {}", args.spec.display()))?;
    let base_config = RunConfig::load(spec.config.as_deref())?;
    let fixed_trace = spec.trace.as_deref().map(load_trace).transpose()?;
    let regime: Option<RegimeSpec> = spec
        .regime
        .as_deref()
        .map(|p| -> Result<RegimeSpec> {
            let text =
                fs::read_to_string(p).with_context(|| format!("reading regime {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing regime {}", p.display()))
        })
        .transpose()?;

    let cells = sweep_cells(&spec)?;
    let threads = std::env::var("TAPER_SIM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;

    use rayon::prelude::*;
    let results: Vec<(SweepCell, Result<RunSummary>)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let summary = run_cell(
                    cell,
                    &spec,
                    &base_config,
                    fixed_trace.as_ref(),
                    regime.as_ref(),
                    args.seed,
                );
                (cell.clone(), summary)
            })
            .collect()
    });

    fs::create_dir_all(&args.out)?;
    let mut csv = BufWriter::new(fs::File::create(args.out.join("sweep.csv"))?);
    writeln!(
        csv,
        "policy,rho,slo_ms,pdr,ablation,throughput,goodput,attainment,mean_step_latency_ms,admission_rate"
    )?;
    for (cell, result) in results {
        let summary = result.with_context(|| format!("cell {}", cell.label()))?;
        writeln!(
            csv,
            "{},{},{},{},{},{:.3},{:.3},{:.4},{:.3},{:.4}",
            cell.policy,
            cell.rho,
            cell.slo_ms,
            cell.pdr.map(|p| p.to_string()).unwrap_or_default(),
            cell.ablation,
            summary.throughput,
            summary.goodput,
            summary.attainment,
            summary.mean_step_latency_ms,
            summary.admission_rate,
        )?;
        fs::write(
            args.out.join(format!("{}.json", cell.label())),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }
    csv.flush()?;
    println!("wrote {} cells to {}", cells.len(), args.out.display());
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.spec)
        .with_context(|| format!("reading regime spec {}", args.spec.display()))?;
    let spec: RegimeSpec = serde_json::from_str(&text)
        .with_context(|| format!("parsing regime spec {}", args.spec.display()))?;
    let trace = generate_trace(&spec, args.seed)?;
    let file = fs::File::create(&args.out)?;
    serialize_trace(&trace, BufWriter::new(file))?;
    println!("wrote {} requests to {}", trace.len(), args.out.display());
    Ok(())
}

fn cmd_characterize(args: &CharacterizeArgs) -> Result<()> {
    let trace = load_trace(&args.trace)?;
    let stats = characterize(&trace)?;
    println!("{}", serde_json::to_string_pretty(&stats)?);
    Ok(())
}

#[derive(Debug, Deserialize)]
struct ProfilingSample {
    n_tokens: u32,
    aggregate_context: f64,
    latency_ms: f64,
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let mut window;
    match &args.samples {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading samples {}", path.display()))?;
            let samples: Vec<ProfilingSample> = serde_json::from_str(&text)
                .with_context(|| format!("parsing samples {}", path.display()))?;
            window = SampleWindow::new(samples.len().max(1));
            for s in &samples {
                let mut comp = StepComposition::empty();
                comp.n_tokens = s.n_tokens;
                comp.aggregate_context = s.aggregate_context;
                window.push(comp, s.latency_ms);
            }
        }
        None => {
            let config = RunConfig::load(args.config.as_deref())?;
            let gt = config.ground_truth(args.seed);
            let grid = profiling_grid(20, 25);
            window = SampleWindow::new(grid.len());
            for (i, &s) in grid.iter().enumerate() {
                window.push(s, gt.realize_latency(s, i as u64));
            }
        }
    }
    let fit = fit_ols(&window).context("ols fit")?;
    let mape = evaluate_mape(fit.model, window.iter());
    let report = serde_json::json!({
        "a": fit.model.a,
        "b": fit.model.b,
        "c": fit.model.c,
        "clamped": fit.clamped,
        "in_sample_mape": mape,
    });
    let text = serde_json::to_string_pretty(&report)?;
    match &args.out {
        Some(path) => fs::write(path, &text)?,
        None => {}
    }
    println!("{text}");
    Ok(())
}

fn cmd_oracle(args: &OracleArgs) -> Result<()> {
    let text = fs::read_to_string(&args.instance)
        .with_context(|| format!("reading instance {}", args.instance.display()))?;
    let instance: AllocationInstance = serde_json::from_str(&text)
        .with_context(|| format!("parsing instance {}", args.instance.display()))?;
    let comparison = compare_greedy(&instance)?;
    println!("{}", serde_json::to_string_pretty(&comparison)?);
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Characterize(args) => cmd_characterize(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Oracle(args) => cmd_oracle(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
