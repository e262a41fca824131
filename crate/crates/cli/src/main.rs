//! Experiment command line: trace generation, single solves, baselines,
//! Monte-Carlo sweeps, and plot-data extraction.
//!
//! Exit codes: 0 success, 2 configuration error, 3 at least one solver did
//! not reach its gap tolerance (results are still written), 4 I/O error.

use clap::{Parser, Subcommand};
use edgecache::baselines::{self, Policy};
use edgecache::d2d;
use edgecache::demand::{build_view, load_trace, save_trace, DemandTrace};
use edgecache::experiment::{
    build_trace, emit_plot_data, results_from_csv, results_to_csv, run_sweep, savings,
    ExperimentConfig, ExperimentError, Figure, Scenario,
};
use edgecache::sbs;
use edgecache::NATS_PER_MNAT;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "edgecache", version, about = "Joint caching and transmission scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a demand trace and write it as JSON.
    GenTrace {
        /// Experiment config JSON; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Monte-Carlo trace index to derive.
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Output path for the trace JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one instance to a schedule JSON.
    Solve {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scenario override: sbs or d2d.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Solve this trace file instead of sampling one.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Where to write the schedule JSON (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one comparison policy on an instance.
    Baseline {
        /// Policy: none, lru, pdca, or lca.
        #[arg(long)]
        policy: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured Monte-Carlo sweep; writes results.csv and
    /// manifest.json into the output directory.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print percentage savings of every policy against a reference.
    Summarize {
        /// results.csv produced by `sweep`.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "no_caching")]
        reference: String,
        /// Optional CSV output path for the savings table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reshape sweep results into plot-ready series for one figure.
    Plotdata {
        #[arg(long = "in")]
        input: PathBuf,
        /// One of fig5a, fig5b, fig6a, fig6b, fig7.
        #[arg(long)]
        figure: String,
        /// Config used for unit conversion (bandwidth); defaults apply
        /// when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                ExperimentError::Io(_) => ExitCode::from(4),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(
    path: &Option<PathBuf>,
    seed: Option<u64>,
    scenario: Option<&str>,
) -> Result<ExperimentConfig, ExperimentError> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        config.trace.master_seed = s;
    }
    if let Some(name) = scenario {
        config.scenario = match name {
            "sbs" => Scenario::Sbs,
            "d2d" => Scenario::D2d,
            other => {
                return Err(ExperimentError::Config(format!("unknown scenario \"{other}\"")))
            }
        };
    }
    Ok(config)
}

fn instance_trace(
    config: &ExperimentConfig,
    trace_path: &Option<PathBuf>,
    index: u64,
) -> Result<DemandTrace, ExperimentError> {
    match trace_path {
        Some(p) => load_trace(p).map_err(|e| match e {
            edgecache::demand::DemandError::Io(io) => ExperimentError::Io(io),
            other => ExperimentError::Config(other.to_string()),
        }),
        None => build_trace(&config.trace, config.trace.zipf_skew, index),
    }
}

fn write_or_print(path: &Option<PathBuf>, text: &str) -> Result<(), ExperimentError> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            std::fs::write(p, text)?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, ExperimentError> {
    match cli.command {
        Command::GenTrace { config, seed, index, out } => {
            let config = load_config(&config, seed, None)?;
            let trace = build_trace(&config.trace, config.trace.zipf_skew, index)?;
            if let Some(dir) = out.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            save_trace(&trace, &out).map_err(|e| match e {
                edgecache::demand::DemandError::Io(io) => ExperimentError::Io(io),
                other => ExperimentError::Config(other.to_string()),
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve { config, scenario, seed, index, trace, out } => {
            let config = load_config(&config, seed, scenario.as_deref())?;
            let trace = instance_trace(&config, &trace, index)?;
            let capacity = config.capacity_mnats()?;
            let opts = config.solver.options();
            let converged = match config.scenario {
                Scenario::Sbs => {
                    let view = build_view(&trace);
                    let cost = config.cost.build(config.cost.bandwidth_hz)?;
                    let s = sbs::solve(&view, capacity, &cost, &opts);
                    let doc = serde_json::json!({
                        "rates": s.rates,
                        "cached": s.cached,
                        "objective": s.objective,
                        "dual_bound": s.certificate.dual_bound,
                        "gap": s.certificate.gap,
                        "iterations": s.certificate.iterations,
                        "converged": s.certificate.converged,
                        "units": config.cost.units(),
                    });
                    write_or_print(&out, &serde_json::to_string_pretty(&doc).unwrap())?;
                    s.certificate.converged
                }
                Scenario::D2d => {
                    let users = config.trace.num_users;
                    let cost = config.cost.build(config.cost.bandwidth_hz / users as f64)?;
                    let problem = d2d::build_problem(
                        &trace,
                        vec![capacity / users as f64; users],
                        vec![cost; users],
                        d2d::uniform_d2d_costs(users, config.cost.incentive_per_mnat),
                        config.instantaneous_d2d,
                    )
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                    let s = d2d::solve(&problem, &opts);
                    let economics = d2d::economics(
                        &problem,
                        &s,
                        config.cost.price_per_kwh,
                        config.cost.incentive_per_mnat,
                        NATS_PER_MNAT,
                    )
                    .ok();
                    let doc = serde_json::json!({
                        "mbs_rates": s.mbs_rates,
                        "d2d_data": s.d2d_data,
                        "cached": s.cached,
                        "objective": s.objective,
                        "certificate": {
                            "dual_bound": s.certificate.dual_bound,
                            "gap": s.certificate.gap,
                            "iterations": s.certificate.iterations,
                            "converged": s.certificate.converged,
                        },
                        "economics": economics.map(|e| serde_json::json!({
                            "electricity": e.electricity,
                            "incentives": e.incentives,
                            "total": e.total,
                        })),
                        "units": config.cost.units(),
                    });
                    write_or_print(&out, &serde_json::to_string_pretty(&doc).unwrap())?;
                    s.certificate.converged
                }
            };
            Ok(if converged { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Baseline { policy, config, seed, index, trace, out } => {
            let config = load_config(&config, seed, None)?;
            let policy = match policy.as_str() {
                "none" => Policy::NoCaching,
                "lru" => Policy::Lru,
                "pdca" => Policy::Pdca,
                "lca" => Policy::Lca,
                other => {
                    return Err(ExperimentError::Config(format!("unknown policy \"{other}\"")))
                }
            };
            let trace = instance_trace(&config, &trace, index)?;
            let view = build_view(&trace);
            let cost = config.cost.build(config.cost.bandwidth_hz)?;
            let capacity = config.capacity_mnats()?;
            let b = baselines::run(policy, &view, &cost, capacity, &config.solver.options());
            let doc = serde_json::json!({
                "policy": b.policy.name(),
                "rates": b.rates,
                "objective": b.objective,
                "cache_occupancy": b.cache_occupancy,
                "units": config.cost.units(),
            });
            write_or_print(&out, &serde_json::to_string_pretty(&doc).unwrap())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, seed, out, jobs } => {
            let config = load_config(&config, seed, None)?;
            let output = run_sweep(&config, jobs)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("results.csv"), results_to_csv(&output.rows))?;
            std::fs::write(
                out.join("manifest.json"),
                serde_json::to_string_pretty(&output.manifest).unwrap(),
            )?;
            if output.nonconverged.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!(
                    "warning: {} run(s) stopped at the iteration cap; see manifest.json",
                    output.nonconverged.len()
                );
                Ok(ExitCode::from(3))
            }
        }
        Command::Summarize { input, reference, out } => {
            let rows = results_from_csv(&read_file(&input)?)?;
            let table = savings(&rows, &reference)?;
            let mut text = String::from("sweep_value,policy,savings_percent\n");
            for row in &table {
                text.push_str(&format!("{},{},{}\n", row.sweep_value, row.policy, row.percent));
            }
            print!("{text}");
            if let Some(p) = out {
                std::fs::write(p, &text)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Plotdata { input, figure, config, out } => {
            let figure = Figure::parse(&figure)
                .ok_or_else(|| ExperimentError::Config(format!("unknown figure \"{figure}\"")))?;
            let config = load_config(&config, None, None)?;
            let rows = results_from_csv(&read_file(&input)?)?;
            let csv = emit_plot_data(&rows, figure, config.cost.bandwidth_hz);
            write_or_print(&out, &csv)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn read_file(path: &Path) -> Result<String, ExperimentError> {
    Ok(std::fs::read_to_string(path)?)
}
