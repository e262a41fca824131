//! Experiment orchestration: seeded Monte-Carlo sweeps over cache capacity,
//! popularity skew, or D2D incentive, with CSV results and a run manifest.
//!
//! Rates inside the solvers are Mnats/s, so physical bandwidths enter the
//! cost models scaled by 1e-6 (one hertz carries one nat per second) and an
//! energy objective comes out in megajoules. Conversions to joules, kWh, or
//! kJ/Hz happen here, exactly once, at the reporting boundary.

use crate::baselines::{self, Policy};
use crate::cost::CostModel;
use crate::d2d;
use crate::demand::{build_view, derive_seed, sample_trace, DemandTrace, FileCatalog};
use crate::sbs::{self, SolveOptions};
use crate::NATS_PER_MNAT;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Debug)]
pub enum ExperimentError {
    Config(String),
    Io(std::io::Error),
    Parse(String),
}

impl fmt::Display for ExperimentError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExperimentError::Config(m) => write!(f, "config error: {m}"),
            ExperimentError::Io(e) => write!(f, "i/o error: {e}"),
            ExperimentError::Parse(m) => write!(f, "parse error: {m}"),
        }
    }
}

impl std::error::Error for ExperimentError {}

impl From<std::io::Error> for ExperimentError {
    fn from(e: std::io::Error) -> Self {
        ExperimentError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Sbs,
    D2d,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Sbs => "sbs",
            Scenario::D2d => "d2d",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceConfig {
    pub num_slots: usize,
    pub slot_seconds: f64,
    pub num_users: usize,
    pub num_files: usize,
    /// File lengths are drawn uniformly from this range (Mnats).
    pub length_range: (f64, f64),
    pub zipf_skew: f64,
    pub idle_probability: f64,
    pub num_traces: usize,
    pub master_seed: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            num_slots: 20,
            slot_seconds: 10.0,
            num_users: 3,
            num_files: 2000,
            length_range: (0.3, 150.0),
            zipf_skew: 1.0,
            idle_probability: 0.0,
            num_traces: 200,
            master_seed: 1,
        }
    }
}

impl TraceConfig {
    /// Expected file length (Mnats) of the configured uniform range.
    pub fn mean_length(&self) -> f64 {
        0.5 * (self.length_range.0 + self.length_range.1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    /// One of `energy`, `energy_cost`, `bandwidth`, `traffic`,
    /// `linear_incentive`.
    pub kind: String,
    /// Total physical bandwidth (Hz); split evenly across users in the
    /// distributed scenario.
    pub bandwidth_hz: f64,
    pub channel_gain: f64,
    pub static_power_w: f64,
    pub side_power_w: f64,
    pub price_per_kwh: f64,
    /// Incentive paid per Mnat delivered over D2D links.
    pub incentive_per_mnat: f64,
    pub fixed_power_w: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            kind: "energy".into(),
            bandwidth_hz: 10.0e6,
            channel_gain: 1.0,
            static_power_w: 0.0,
            side_power_w: 0.0,
            price_per_kwh: 0.3,
            incentive_per_mnat: 0.0,
            fixed_power_w: 1.0,
        }
    }
}

impl CostConfig {
    /// Build the cost model of one link with the given bandwidth share,
    /// with rates in Mnats/s (so bandwidths and powers scale by 1e-6).
    pub fn build(&self, bandwidth_share_hz: f64) -> Result<CostModel, ExperimentError> {
        let w = bandwidth_share_hz / NATS_PER_MNAT;
        match self.kind.as_str() {
            "energy" => Ok(CostModel::Energy {
                bandwidth: w,
                channel_gain: self.channel_gain,
                static_power: self.static_power_w / NATS_PER_MNAT,
                side_power: self.side_power_w / NATS_PER_MNAT,
            }),
            "energy_cost" => Ok(CostModel::EnergyCost {
                bandwidth: w,
                channel_gain: self.channel_gain,
                static_power: self.static_power_w / NATS_PER_MNAT,
                side_power: self.side_power_w / NATS_PER_MNAT,
                price_per_kwh: self.price_per_kwh,
                watts_per_power_unit: NATS_PER_MNAT,
            }),
            "bandwidth" => Ok(CostModel::Bandwidth {
                fixed_power: self.fixed_power_w / NATS_PER_MNAT,
                channel_gain: self.channel_gain,
            }),
            "traffic" => Ok(CostModel::Traffic),
            "linear_incentive" => {
                Ok(CostModel::LinearIncentive { price_per_mnat: self.incentive_per_mnat })
            }
            other => Err(ExperimentError::Config(format!("unknown cost kind \"{other}\""))),
        }
    }

    pub fn units(&self) -> &'static str {
        match self.kind.as_str() {
            "energy" => "MJ",
            "energy_cost" | "linear_incentive" => "$",
            "bandwidth" => "MHz_s",
            _ => "Mnats",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacitySpec {
    /// Capacity as a percentage of one user's expected requested data over
    /// the horizon: `C = c_hat * N * mean_length / 100`.
    pub c_hat: Option<f64>,
    /// Raw override in Mnats; wins over `c_hat`.
    pub c_mnats: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepVariable {
    #[serde(rename = "c_hat")]
    CacheFraction,
    #[serde(rename = "gamma")]
    ZipfSkew,
    #[serde(rename = "xi_user")]
    IncentivePerMnat,
}

impl SweepVariable {
    pub fn name(&self) -> &'static str {
        match self {
            SweepVariable::CacheFraction => "c_hat",
            SweepVariable::ZipfSkew => "gamma",
            SweepVariable::IncentivePerMnat => "xi_user",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub step0: Option<f64>,
    pub recover_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { max_iters: 150_000, tol: 1e-3, step0: None, recover_every: 250 }
    }
}

impl SolverConfig {
    pub fn options(&self) -> SolveOptions {
        SolveOptions {
            max_iters: self.max_iters,
            tol: self.tol,
            step0: self.step0,
            recover_every: self.recover_every,
            ..SolveOptions::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub trace: TraceConfig,
    pub cost: CostConfig,
    pub capacity: CapacitySpec,
    pub sweep: Option<SweepConfig>,
    pub solver: SolverConfig,
    /// Allow same-slot duplicates to be served over D2D within their slot.
    pub instantaneous_d2d: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Scenario::Sbs,
            trace: TraceConfig::default(),
            cost: CostConfig::default(),
            capacity: CapacitySpec { c_hat: Some(10.0), c_mnats: None },
            sweep: None,
            solver: SolverConfig::default(),
            instantaneous_d2d: false,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Cache capacity in Mnats for the base (non-swept) configuration.
    pub fn capacity_mnats(&self) -> Result<f64, ExperimentError> {
        if let Some(c) = self.capacity.c_mnats {
            return Ok(c);
        }
        match self.capacity.c_hat {
            Some(hat) => {
                Ok(hat * self.trace.num_slots as f64 * self.trace.mean_length() / 100.0)
            }
            None => Err(ExperimentError::Config(
                "capacity needs either c_hat or c_mnats".into(),
            )),
        }
    }

    /// Stable hash of the serialized configuration (FNV-1a, hex).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in text.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// One aggregated result line of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub scenario: String,
    pub sweep_var: String,
    pub sweep_value: f64,
    pub policy: String,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
    pub units: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Everything a sweep produces.
#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub rows: Vec<ResultRow>,
    /// (sweep value, trace index) pairs whose solver hit the iteration cap.
    pub nonconverged: Vec<(f64, usize)>,
    pub manifest: serde_json::Value,
}

/// Per-trace objective of every policy at one sweep point.
#[derive(Debug, Clone)]
struct TraceOutcome {
    objectives: Vec<(String, f64)>,
    converged: bool,
}

fn sample_catalog(trace_cfg: &TraceConfig, skew: f64, index: u64) -> FileCatalog {
    let seed = derive_seed(trace_cfg.master_seed, 2 * index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = trace_cfg.length_range;
    let lengths: Vec<f64> =
        (0..trace_cfg.num_files).map(|_| lo + rng.gen::<f64>() * (hi - lo)).collect();
    FileCatalog::with_zipf(lengths, skew).expect("valid catalog")
}

/// Build the trace for one Monte-Carlo index, deterministically.
pub fn build_trace(
    trace_cfg: &TraceConfig,
    skew: f64,
    index: u64,
) -> Result<DemandTrace, ExperimentError> {
    let catalog = sample_catalog(trace_cfg, skew, index);
    sample_trace(
        &catalog,
        trace_cfg.num_slots,
        trace_cfg.num_users,
        trace_cfg.slot_seconds,
        derive_seed(trace_cfg.master_seed, 2 * index + 1),
        trace_cfg.idle_probability,
    )
    .map_err(|e| ExperimentError::Config(e.to_string()))
}

const POLICIES: [Policy; 4] = [Policy::NoCaching, Policy::Lru, Policy::Pdca, Policy::Lca];

fn run_sbs_trace(
    config: &ExperimentConfig,
    skew: f64,
    capacity: f64,
    index: u64,
) -> Result<TraceOutcome, ExperimentError> {
    let trace = build_trace(&config.trace, skew, index)?;
    let view = build_view(&trace);
    let cost = config.cost.build(config.cost.bandwidth_hz)?;
    let opts = config.solver.options();
    let mut objectives = Vec::with_capacity(POLICIES.len() + 1);
    let mut solve_opts = opts.clone();
    for policy in POLICIES {
        let b = baselines::run(policy, &view, &cost, capacity, &opts);
        if let Some(q) = b.induced_cached {
            solve_opts.cache_candidates.push(q);
        }
        objectives.push((policy.name().to_string(), b.objective));
    }
    let optimal = sbs::solve(&view, capacity, &cost, &solve_opts);
    objectives.insert(0, ("optimal".to_string(), optimal.objective));
    Ok(TraceOutcome { objectives, converged: optimal.certificate.converged })
}

fn run_d2d_trace(
    config: &ExperimentConfig,
    skew: f64,
    capacity: f64,
    incentive: f64,
    index: u64,
) -> Result<TraceOutcome, ExperimentError> {
    let trace = build_trace(&config.trace, skew, index)?;
    let users = config.trace.num_users;
    let share = config.cost.bandwidth_hz / users as f64;
    let per_user_cost = config.cost.build(share)?;
    let per_user_capacity = capacity / users as f64;
    let opts = config.solver.options();

    let problem = d2d::build_problem(
        &trace,
        vec![per_user_capacity; users],
        vec![per_user_cost.clone(); users],
        d2d::uniform_d2d_costs(users, incentive),
        config.instantaneous_d2d,
    )
    .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let optimal = d2d::solve(&problem, &opts);

    let mut objectives = vec![("optimal".to_string(), optimal.objective)];
    // Baselines run per user on its own demand, without D2D cooperation.
    for policy in POLICIES {
        let mut total = 0.0;
        for u in 0..users {
            let view = build_view(&trace.single_user(u));
            total +=
                baselines::run(policy, &view, &per_user_cost, per_user_capacity, &opts).objective;
        }
        objectives.push((policy.name().to_string(), total));
    }
    if config.cost.kind == "energy_cost" {
        let eco = d2d::economics(
            &problem,
            &optimal,
            config.cost.price_per_kwh,
            incentive,
            NATS_PER_MNAT,
        )
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
        objectives.push(("electricity".to_string(), eco.electricity));
        objectives.push(("incentives".to_string(), eco.incentives));
        objectives.push(("d2d_volume".to_string(), optimal.d2d_volume()));
    }
    Ok(TraceOutcome { objectives, converged: optimal.certificate.converged })
}

/// Mean and 95% Student-t confidence half-width.
pub fn mean_and_ci95(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    assert!(n > 0, "no samples");
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let se = (var / n as f64).sqrt();
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let t = StudentsT::new(0.0, 1.0, n as f64 - 1.0)
        .expect("valid dof")
        .inverse_cdf(0.975);
    (mean, t * se)
}

/// Run the configured sweep with up to `jobs` worker threads. Results are
/// deterministic and independent of the worker count.
pub fn run_sweep(config: &ExperimentConfig, jobs: usize) -> Result<SweepOutput, ExperimentError> {
    let start = std::time::Instant::now();
    let sweep = match &config.sweep {
        Some(s) if !s.values.is_empty() => s.clone(),
        Some(_) => return Err(ExperimentError::Config("sweep has no values".into())),
        None => SweepConfig {
            variable: SweepVariable::CacheFraction,
            values: vec![config.capacity.c_hat.unwrap_or(10.0)],
        },
    };
    if sweep.variable == SweepVariable::IncentivePerMnat && config.scenario == Scenario::Sbs {
        return Err(ExperimentError::Config(
            "the incentive sweep applies to the d2d scenario only".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;

    let hash = config.hash();
    let mut rows = Vec::new();
    let mut nonconverged = Vec::new();
    for &value in &sweep.values {
        let skew = match sweep.variable {
            SweepVariable::ZipfSkew => value,
            _ => config.trace.zipf_skew,
        };
        let capacity = match sweep.variable {
            SweepVariable::CacheFraction => {
                value * config.trace.num_slots as f64 * config.trace.mean_length() / 100.0
            }
            _ => config.capacity_mnats()?,
        };
        let incentive = match sweep.variable {
            SweepVariable::IncentivePerMnat => value,
            _ => config.cost.incentive_per_mnat,
        };

        let outcomes: Vec<Result<TraceOutcome, ExperimentError>> = pool.install(|| {
            use rayon::prelude::*;
            (0..config.trace.num_traces as u64)
                .into_par_iter()
                .map(|index| match config.scenario {
                    Scenario::Sbs => run_sbs_trace(config, skew, capacity, index),
                    Scenario::D2d => run_d2d_trace(config, skew, capacity, incentive, index),
                })
                .collect()
        });

        let mut by_policy: Vec<(String, Vec<f64>)> = Vec::new();
        for (index, outcome) in outcomes.into_iter().enumerate() {
            let outcome = outcome?;
            if !outcome.converged {
                nonconverged.push((value, index));
            }
            for (policy, objective) in outcome.objectives {
                match by_policy.iter_mut().find(|(p, _)| *p == policy) {
                    Some((_, v)) => v.push(objective),
                    None => by_policy.push((policy, vec![objective])),
                }
            }
        }
        for (policy, samples) in by_policy {
            let (mean, ci95) = mean_and_ci95(&samples);
            let units = match policy.as_str() {
                "d2d_volume" => "Mnats".to_string(),
                _ => config.cost.units().to_string(),
            };
            rows.push(ResultRow {
                scenario: config.scenario.name().to_string(),
                sweep_var: sweep.variable.name().to_string(),
                sweep_value: value,
                policy,
                mean,
                ci95,
                n: samples.len(),
                units,
                seed: config.trace.master_seed,
                config_hash: hash.clone(),
            });
        }
    }

    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "config_hash": hash,
        "rows": rows.len(),
        "nonconverged": nonconverged
            .iter()
            .map(|(v, i)| serde_json::json!({"sweep_value": v, "trace": i}))
            .collect::<Vec<_>>(),
        "wall_seconds": start.elapsed().as_secs_f64(),
    });
    Ok(SweepOutput { rows, nonconverged, manifest })
}

const CSV_HEADER: &str =
    "scenario,sweep_var,sweep_value,policy,mean,ci95,n,units,seed,config_hash";

/// Serialize rows in the fixed results schema.
pub fn results_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario,
            r.sweep_var,
            fmt_f64(r.sweep_value),
            r.policy,
            fmt_f64(r.mean),
            fmt_f64(r.ci95),
            r.n,
            r.units,
            r.seed,
            r.config_hash
        ));
    }
    out
}

fn fmt_f64(x: f64) -> String {
    // Round-trippable shortest representation; deterministic per bit pattern.
    format!("{x}")
}

/// Parse a results CSV back into rows (inverse of [`results_to_csv`]).
pub fn results_from_csv(text: &str) -> Result<Vec<ResultRow>, ExperimentError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(ExperimentError::Parse(format!(
                "unexpected results header {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 10 {
            return Err(ExperimentError::Parse(format!(
                "line {}: expected 10 fields, got {}",
                i + 2,
                parts.len()
            )));
        }
        let field = |j: usize| -> Result<f64, ExperimentError> {
            parts[j]
                .parse()
                .map_err(|e| ExperimentError::Parse(format!("line {}: {e}", i + 2)))
        };
        rows.push(ResultRow {
            scenario: parts[0].to_string(),
            sweep_var: parts[1].to_string(),
            sweep_value: field(2)?,
            policy: parts[3].to_string(),
            mean: field(4)?,
            ci95: field(5)?,
            n: parts[6]
                .parse()
                .map_err(|e| ExperimentError::Parse(format!("line {}: {e}", i + 2)))?,
            units: parts[7].to_string(),
            seed: parts[8]
                .parse()
                .map_err(|e| ExperimentError::Parse(format!("line {}: {e}", i + 2)))?,
            config_hash: parts[9].to_string(),
        });
    }
    Ok(rows)
}

/// Percentage saved by each policy against a reference policy, per sweep
/// value: `100 (1 - mean / mean_ref)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SavingsRow {
    pub sweep_value: f64,
    pub policy: String,
    pub percent: f64,
}

pub fn savings(rows: &[ResultRow], reference: &str) -> Result<Vec<SavingsRow>, ExperimentError> {
    let mut out = Vec::new();
    let mut values: Vec<f64> = rows.iter().map(|r| r.sweep_value).collect();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();
    for value in values {
        let reference_mean = rows
            .iter()
            .find(|r| r.sweep_value == value && r.policy == reference)
            .map(|r| r.mean)
            .ok_or_else(|| {
                ExperimentError::Parse(format!(
                    "reference policy \"{reference}\" missing at sweep value {value}"
                ))
            })?;
        for r in rows.iter().filter(|r| r.sweep_value == value) {
            out.push(SavingsRow {
                sweep_value: value,
                policy: r.policy.clone(),
                percent: 100.0 * (1.0 - r.mean / reference_mean),
            });
        }
    }
    Ok(out)
}

/// Known plot layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    /// Energy vs cache capacity, single-cache scenario.
    Fig5a,
    /// Energy vs cache capacity, distributed scenario.
    Fig5b,
    /// Energy vs popularity skew, single-cache scenario.
    Fig6a,
    /// Energy vs popularity skew, distributed scenario.
    Fig6b,
    /// Operator money flows vs the D2D incentive.
    Fig7,
}

impl Figure {
    pub fn parse(name: &str) -> Option<Figure> {
        match name {
            "fig5a" => Some(Figure::Fig5a),
            "fig5b" => Some(Figure::Fig5b),
            "fig6a" => Some(Figure::Fig6a),
            "fig6b" => Some(Figure::Fig6b),
            "fig7" => Some(Figure::Fig7),
            _ => None,
        }
    }
}

const PLOT_HEADER: &str = "x,series,y,y_err,axis";

/// Emit plot-ready long-format CSV for one figure. Energy figures convert
/// megajoule means to kJ/Hz using the configured total bandwidth; the
/// incentive figure tags the incentive series onto the secondary axis.
pub fn emit_plot_data(rows: &[ResultRow], figure: Figure, bandwidth_hz: f64) -> String {
    let mut out = String::from(PLOT_HEADER);
    out.push('\n');
    let (scenario, sweep_var) = match figure {
        Figure::Fig5a => ("sbs", "c_hat"),
        Figure::Fig5b => ("d2d", "c_hat"),
        Figure::Fig6a => ("sbs", "gamma"),
        Figure::Fig6b => ("d2d", "gamma"),
        Figure::Fig7 => ("d2d", "xi_user"),
    };
    let mut selected: Vec<&ResultRow> = rows
        .iter()
        .filter(|r| r.scenario == scenario && r.sweep_var == sweep_var)
        .collect();
    selected.sort_by(|a, b| {
        a.sweep_value.partial_cmp(&b.sweep_value).unwrap().then(a.policy.cmp(&b.policy))
    });
    match figure {
        Figure::Fig7 => {
            for r in selected {
                let (series, axis) = match r.policy.as_str() {
                    "optimal" => ("C", "y"),
                    "electricity" => ("E", "y"),
                    "incentives" => ("I", "y2"),
                    _ => continue,
                };
                out.push_str(&format!(
                    "{},{series},{},{},{axis}\n",
                    fmt_f64(r.sweep_value),
                    fmt_f64(r.mean),
                    fmt_f64(r.ci95)
                ));
            }
        }
        _ => {
            // kJ per hertz: megajoules * 1e6 / W / 1e3.
            let scale = 1e3 / bandwidth_hz;
            for r in selected {
                if r.units != "MJ" {
                    continue;
                }
                out.push_str(&format!(
                    "{},{},{},{},y\n",
                    fmt_f64(r.sweep_value),
                    r.policy,
                    fmt_f64(r.mean * scale),
                    fmt_f64(r.ci95 * scale)
                ));
            }
        }
    }
    out
}

/// One parsed plot point.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotPoint {
    pub x: f64,
    pub series: String,
    pub y: f64,
    pub y_err: f64,
    pub axis: String,
}

pub fn plot_data_from_csv(text: &str) -> Result<Vec<PlotPoint>, ExperimentError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == PLOT_HEADER => {}
        other => {
            return Err(ExperimentError::Parse(format!("unexpected plot header {other:?}")))
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(ExperimentError::Parse(format!(
                "line {}: expected 5 fields",
                i + 2
            )));
        }
        let num = |j: usize| -> Result<f64, ExperimentError> {
            parts[j]
                .parse()
                .map_err(|e| ExperimentError::Parse(format!("line {}: {e}", i + 2)))
        };
        points.push(PlotPoint {
            x: num(0)?,
            series: parts[1].to_string(),
            y: num(2)?,
            y_err: num(3)?,
            axis: parts[4].to_string(),
        });
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            trace: TraceConfig {
                num_slots: 5,
                slot_seconds: 1.0,
                num_users: 2,
                num_files: 8,
                length_range: (0.5, 3.0),
                zipf_skew: 1.0,
                idle_probability: 0.0,
                num_traces: 4,
                master_seed: 11,
            },
            cost: CostConfig { bandwidth_hz: 2e6, ..Default::default() },
            solver: SolverConfig { max_iters: 20_000, tol: 1e-3, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn capacity_formula_follows_the_percentage() {
        let config = ExperimentConfig::default();
        // 10% of 20 slots x 75.15 Mnats.
        assert!((config.capacity_mnats().unwrap() - 150.3).abs() < 1e-9);
        let override_cfg = ExperimentConfig {
            capacity: CapacitySpec { c_hat: Some(10.0), c_mnats: Some(15.03) },
            ..ExperimentConfig::default()
        };
        assert_eq!(override_cfg.capacity_mnats().unwrap(), 15.03);
    }

    #[test]
    fn zero_capacity_sweep_collapses_all_policies() {
        let mut config = small_config();
        config.sweep = Some(SweepConfig {
            variable: SweepVariable::CacheFraction,
            values: vec![0.0],
        });
        let out = run_sweep(&config, 2).unwrap();
        let means: Vec<f64> = ["optimal", "no_caching", "lru", "pdca", "lca"]
            .iter()
            .map(|p| out.rows.iter().find(|r| r.policy == *p).unwrap().mean)
            .collect();
        for m in &means[1..] {
            assert!(
                (m - means[0]).abs() <= 1e-6 * means[0].abs().max(1.0),
                "means {means:?}"
            );
        }
    }

    #[test]
    fn sweeps_are_deterministic_across_worker_counts() {
        let mut config = small_config();
        config.sweep = Some(SweepConfig {
            variable: SweepVariable::CacheFraction,
            values: vec![5.0, 20.0],
        });
        let csv1 = results_to_csv(&run_sweep(&config, 1).unwrap().rows);
        let csv4 = results_to_csv(&run_sweep(&config, 4).unwrap().rows);
        assert_eq!(csv1, csv4);
        let again = results_to_csv(&run_sweep(&config, 4).unwrap().rows);
        assert_eq!(csv4, again);
    }

    #[test]
    fn results_csv_round_trips() {
        let mut config = small_config();
        config.sweep = Some(SweepConfig {
            variable: SweepVariable::CacheFraction,
            values: vec![12.5],
        });
        let out = run_sweep(&config, 2).unwrap();
        let csv = results_to_csv(&out.rows);
        let back = results_from_csv(&csv).unwrap();
        assert_eq!(out.rows, back);
    }

    #[test]
    fn every_policy_improves_with_capacity() {
        let mut config = small_config();
        config.trace.num_traces = 6;
        config.sweep = Some(SweepConfig {
            variable: SweepVariable::CacheFraction,
            values: vec![0.0, 15.0, 40.0],
        });
        let out = run_sweep(&config, 2).unwrap();
        for policy in ["optimal", "no_caching", "lru", "pdca", "lca"] {
            let mut means: Vec<(f64, f64)> = out
                .rows
                .iter()
                .filter(|r| r.policy == policy)
                .map(|r| (r.sweep_value, r.mean))
                .collect();
            means.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in means.windows(2) {
                assert!(
                    w[1].1 <= w[0].1 + 1e-6 * w[0].1.abs().max(1.0),
                    "{policy}: mean rose with capacity: {:?} -> {:?}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn savings_of_the_reference_is_zero() {
        let mut config = small_config();
        config.sweep = Some(SweepConfig {
            variable: SweepVariable::CacheFraction,
            values: vec![10.0],
        });
        let out = run_sweep(&config, 2).unwrap();
        let table = savings(&out.rows, "no_caching").unwrap();
        let self_row =
            table.iter().find(|r| r.policy == "no_caching").expect("reference present");
        assert_eq!(self_row.percent, 0.0);
        let optimal = table.iter().find(|r| r.policy == "optimal").unwrap();
        assert!(optimal.percent >= -1e-9);
    }

    #[test]
    fn plot_data_round_trips_and_scales() {
        let rows = vec![ResultRow {
            scenario: "sbs".into(),
            sweep_var: "c_hat".into(),
            sweep_value: 10.0,
            policy: "optimal".into(),
            mean: 123.0, // MJ
            ci95: 4.0,
            n: 7,
            units: "MJ".into(),
            seed: 1,
            config_hash: "x".into(),
        }];
        let csv = emit_plot_data(&rows, Figure::Fig5a, 10.0e6);
        let points = plot_data_from_csv(&csv).unwrap();
        assert_eq!(points.len(), 1);
        // 123 MJ over 10 MHz = 12.3 J/Hz = 0.0123 kJ/Hz.
        assert!((points[0].y - 0.0123).abs() < 1e-12);
        let empty = emit_plot_data(&[], Figure::Fig5a, 10.0e6);
        assert_eq!(empty.trim_end(), PLOT_HEADER);
        assert!(plot_data_from_csv(&empty).unwrap().is_empty());
    }

    #[test]
    fn confidence_intervals_shrink_with_samples() {
        // Synthetic data with constant variance: the half-width drops like
        // 1/sqrt(n) up to the t-quantile factor.
        let base: Vec<f64> = (0..400).map(|i| ((i * 37) % 100) as f64).collect();
        let (_, ci_small) = mean_and_ci95(&base[..100]);
        let (_, ci_large) = mean_and_ci95(&base);
        assert!(ci_large < ci_small, "{ci_large} vs {ci_small}");
        assert!((ci_small / ci_large - 2.0).abs() < 0.25, "ratio {}", ci_small / ci_large);
    }

    #[test]
    fn t_quantiles_match_reference_values() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        // Textbook two-sided 95% quantiles.
        for (df, expected) in [(1.0, 12.706), (10.0, 2.228), (100.0, 1.984)] {
            let t = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(0.975);
            assert!((t - expected).abs() < 2e-3, "df {df}: {t}");
        }
    }

    #[test]
    fn incentive_sweep_rejected_for_the_single_cache_scenario() {
        let mut config = small_config();
        config.sweep = Some(SweepConfig {
            variable: SweepVariable::IncentivePerMnat,
            values: vec![0.0, 1.0],
        });
        assert!(matches!(run_sweep(&config, 1), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn d2d_sweep_runs_and_orders_policies() {
        let mut config = small_config();
        config.scenario = Scenario::D2d;
        config.trace.num_traces = 3;
        config.sweep = Some(SweepConfig {
            variable: SweepVariable::CacheFraction,
            values: vec![25.0],
        });
        let out = run_sweep(&config, 2).unwrap();
        let mean = |p: &str| out.rows.iter().find(|r| r.policy == p).unwrap().mean;
        let optimal = mean("optimal");
        for p in ["no_caching", "lru", "pdca", "lca"] {
            assert!(optimal <= mean(p) + 1e-6 * mean(p).abs().max(1.0), "{p}");
        }
    }

    #[test]
    fn config_json_round_trips_with_unknown_fields_rejected() {
        let config = ExperimentConfig::default();
        let text = serde_json::to_string(&config).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        assert!(ExperimentConfig::from_json("{\"bogus\": 1}").is_err());
    }
}
