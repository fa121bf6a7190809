//! Command-line driver: config loading, single runs, sweeps over
//! (model x tp x sublayer x mode), and the reduce-scatter size sweep used to
//! validate the link model against the alpha-beta oracle.
//!
//! Exit codes: 0 ok, 1 config error, 2 run failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;

use crate::config::{CollectiveKind, SimConfig};
use crate::engine::RunMode;
use crate::report::{geomean, SimReport};
use crate::sim::{run_collective_only, run_full};
use crate::workloads::{self, Sublayer};
use crate::IntPayload;

#[derive(Debug, Parser)]
#[command(
    name = "fusesim",
    about = "Discrete-event multi-GPU simulator for fused GEMM + ring-collective overlap"
)]
pub struct Args {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Run mode: sequential | fused | fused-mca | ideal-overlap | ideal-overlap-nmc.
    #[arg(long)]
    pub mode: Option<String>,

    /// Sweep instead of a single run: "small-models" (built-in models x tp x
    /// sublayer x all modes), "small-models-2x-cu" (same with doubled CU
    /// count over the same network), or "rs-validation" (RS sizes 6-192 MB
    /// vs the alpha-beta oracle).
    #[arg(long)]
    pub sweep: Option<String>,

    /// Directory for JSON reports / CSV summaries (stdout when omitted).
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    /// Write a per-event CSV trace next to the report (single runs).
    #[arg(long)]
    pub trace: bool,

    /// Carry functional integer payloads (small workloads only).
    #[arg(long)]
    pub functional: bool,
}

pub fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("run failure: {msg}");
            ExitCode::from(2)
        }
    }
}

enum CliError {
    Config(String),
    Run(String),
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crate::sim::SimError> for CliError {
    fn from(e: crate::sim::SimError) -> Self {
        match e {
            crate::sim::SimError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

fn run(args: &Args) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let (cfg, warnings) = SimConfig::load(path)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            cfg
        }
        None => SimConfig::default(),
    };
    if args.functional {
        cfg.sim.functional = true;
    }
    if args.trace {
        cfg.sim.trace = true;
    }
    if let Some(mode) = &args.mode {
        cfg.sim.mode = RunMode::parse(mode)
            .ok_or_else(|| CliError::Config(format!("unknown mode `{mode}`")))?;
    }

    match args.sweep.as_deref() {
        None => single_run(&cfg, args),
        Some("small-models") => sweep_small_models(&cfg, args),
        Some("small-models-2x-cu") => {
            // compute scales faster than the network: double the CUs, keep
            // the links and memory the same
            cfg.system.n_cus *= 2;
            sweep_small_models(&cfg, args)
        }
        Some("rs-validation") => sweep_rs_validation(&cfg, args),
        Some(other) => Err(CliError::Config(format!(
            "unknown sweep `{other}` (expected small-models, small-models-2x-cu, or rs-validation)"
        ))),
    }
}

fn single_run(cfg: &SimConfig, args: &Args) -> Result<(), CliError> {
    if cfg.workload.is_explicit() && cfg.workload.m == 0 {
        return Err(CliError::Config(
            "no workload: set [workload] model/tp/sublayer or m/n/k".to_string(),
        ));
    }
    let art = run_full::<IntPayload>(cfg.sim.mode, cfg)?;
    emit_report(&art.report, args.out_dir.as_deref())?;
    if let (Some(trace), Some(dir)) = (&art.trace, args.out_dir.as_deref()) {
        let path = dir.join(format!("trace-{}-{}.csv", sanitize(&art.report.workload), art.report.mode));
        std::fs::write(&path, trace).map_err(|e| CliError::Run(e.to_string()))?;
        eprintln!("trace written to {}", path.display());
    }
    Ok(())
}

fn emit_report(report: &SimReport, out_dir: Option<&Path>) -> Result<(), CliError> {
    match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Run(e.to_string()))?;
            let path = dir.join(format!("report-{}-{}.json", sanitize(&report.workload), report.mode));
            std::fs::write(&path, report.to_json()).map_err(|e| CliError::Run(e.to_string()))?;
            eprintln!("report written to {}", path.display());
        }
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

fn sanitize(label: &str) -> String {
    label.replace('/', "_")
}

/// One row of the sweep summary.
struct SweepRow {
    case: String,
    mode: RunMode,
    total_ns: u64,
    speedup_vs_sequential: f64,
    dram_total: u64,
}

fn sweep_small_models(base: &SimConfig, args: &Args) -> Result<(), CliError> {
    let mut rows: Vec<SweepRow> = Vec::new();
    let mut reports: Vec<SimReport> = Vec::new();
    for model in workloads::SMALL_MODELS {
        for &tp in &[8usize, 16] {
            for sub in Sublayer::ALL {
                let mut cfg = base.clone();
                cfg.system.n_gpus = tp; // ring size tracks the slicing degree
                cfg.workload.model = model.to_string();
                cfg.workload.tp = tp;
                cfg.workload.sublayer = sub.as_str().to_string();
                cfg.workload.m = 0;
                cfg.workload.n = 0;
                cfg.workload.k = 0;
                cfg.collective.kind = CollectiveKind::RingAr;
                cfg.sim.functional = false;
                cfg.sim.trace = false;
                let case = format!("{model}/tp{tp}/{}", sub.as_str());
                let mut seq_total = 0u64;
                for mode in RunMode::ALL {
                    let report = run_full::<IntPayload>(mode, &cfg)
                        .map_err(|e| CliError::Run(format!("case {case} mode {mode}: {e}")))?
                        .report;
                    if mode == RunMode::Sequential {
                        seq_total = report.runtime.total_ns;
                    }
                    rows.push(SweepRow {
                        case: case.clone(),
                        mode,
                        total_ns: report.runtime.total_ns,
                        speedup_vs_sequential: seq_total as f64 / report.runtime.total_ns as f64,
                        dram_total: report.dram_total,
                    });
                    reports.push(report);
                }
            }
        }
    }

    let mut csv = String::from("case,mode,total_ns,speedup_vs_sequential,dram_total_bytes\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.4},{}\n",
            r.case, r.mode, r.total_ns, r.speedup_vs_sequential, r.dram_total
        ));
    }
    for mode in RunMode::ALL {
        let ratios: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.speedup_vs_sequential)
            .collect();
        let g = geomean(&ratios).map_err(|e| CliError::Run(e.to_string()))?;
        csv.push_str(&format!("geomean,{},,{:.4},\n", mode, g));
    }

    match args.out_dir.as_deref() {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Run(e.to_string()))?;
            std::fs::write(dir.join("sweep-summary.csv"), &csv)
                .map_err(|e| CliError::Run(e.to_string()))?;
            for report in &reports {
                let path = dir
                    .join(format!("report-{}-{}.json", sanitize(&report.workload), report.mode));
                std::fs::write(&path, report.to_json())
                    .map_err(|e| CliError::Run(e.to_string()))?;
            }
            eprintln!("{} runs; summary at {}", rows.len(), dir.join("sweep-summary.csv").display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

/// Baseline ring-RS over 6-192 MB on the configured device count, compared
/// with the alpha-beta oracle (N-1) * (latency + chunk/bandwidth).
fn sweep_rs_validation(base: &SimConfig, args: &Args) -> Result<(), CliError> {
    let mut cfg = base.clone();
    cfg.sim.functional = false;
    cfg.sim.trace = false;
    let n = cfg.system.n_gpus as u64;
    let mut csv = String::from("bytes,sim_ns,alpha_beta_ns,error_pct\n");
    for mb in [6u64, 12, 24, 48, 96, 192] {
        let bytes = mb * 1_000_000;
        let (report, _) =
            run_collective_only::<IntPayload>(&cfg, CollectiveKind::RingRs, bytes, None)
                .map_err(|e| CliError::Run(format!("rs {mb} MB: {e}")))?;
        let chunk = bytes / n;
        let oracle_ns = (n - 1) as f64
            * (cfg.system.link_latency_ns as f64
                + chunk as f64 / cfg.system.link_bandwidth_gbps);
        let sim_ns = report.runtime.rs_ns as f64;
        let err = (sim_ns - oracle_ns) / oracle_ns * 100.0;
        csv.push_str(&format!("{bytes},{},{:.0},{:.2}\n", report.runtime.rs_ns, oracle_ns, err));
    }
    match args.out_dir.as_deref() {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| CliError::Run(e.to_string()))?;
            std::fs::write(dir.join("rs-validation.csv"), &csv)
                .map_err(|e| CliError::Run(e.to_string()))?;
            eprintln!("validation table at {}", dir.join("rs-validation.csv").display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}
