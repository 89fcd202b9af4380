//! `sipcond` command line: simulation, CBM sampling, birth–death chain
//! formulas and verification suites.
//!
//! Exit codes: 0 success, 1 failed check, 2 invalid configuration, 3 I/O.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use sipcond::bdchain::{self, BDSpec, Variant};
use sipcond::cbm::{self, CBMParams, PathOptions};
use sipcond::condensate::{LabeledState, TraceTracker, TrackerOptions};
use sipcond::engine::{self, run_replicas, Flow, Observer, SimEvent, StateView};
use sipcond::stats::mean_stderr;
use sipcond::suite::{self, SuiteError};
use sipcond::verify::VerifyError;
use thiserror::Error;

use crate::config::{RunConfig, VerifyConfig};

pub const SUMMARY_SCHEMA: &str = "sipcond/summary/v1";
pub const REPORT_SCHEMA: &str = "sipcond/report/v1";
pub const BD_SCHEMA: &str = "sipcond/bd-exact/v1";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<SuiteError> for CliError {
    fn from(e: SuiteError) -> Self {
        match e {
            SuiteError::Verify(VerifyError::InsufficientData { .. }) | SuiteError::Invalid(_) | SuiteError::Model(_) => {
                CliError::Config(e.to_string())
            }
            other => CliError::Failed(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "sipcond", version, about = "Condensing inclusion process toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate replicas and write trace events and a summary.
    Simulate(RunArgs),
    /// Sample coalescing Brownian motions started from the condensates.
    Cbm(RunArgs),
    /// Exact absorption probability and hitting time of a birth–death chain.
    BdExact(BdArgs),
    /// Run a verification suite and write report.json.
    Verify(VerifyArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON run configuration (or a summary.json from an earlier run).
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record raw jumps in events.jsonl (simulate only).
    #[arg(long)]
    record_events: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Inner,
    Edge,
}

#[derive(clap::Args)]
struct BdArgs {
    /// Absorbing level M.
    #[arg(long = "m")]
    m: u64,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    #[arg(long, default_value_t = 1e-4)]
    d: f64,
    #[arg(long, value_enum, default_value = "inner")]
    variant: VariantArg,
    /// Starting level.
    #[arg(long, default_value_t = 1)]
    i: u64,
}

#[derive(clap::Args)]
struct VerifyArgs {
    /// Suite to run.
    #[arg(long)]
    which: String,
    /// JSON document with a `verify` section of suite settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the replica count of the selected suite.
    #[arg(long)]
    replicas: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Cbm(args) => cmd_cbm(&args),
        Command::BdExact(args) => cmd_bd_exact(&args),
        Command::Verify(args) => cmd_verify(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sipcond: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_run(args: &RunArgs) -> Result<config::Resolved, CliError> {
    let mut cfg: RunConfig = config::parse(config::read_document(&args.config)?)?;
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.output_dir = config::output_dir(&cfg.output_dir);
    if args.record_events {
        cfg.record_events = true;
    }
    cfg.resolve()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

/// Raw jumps, kept only when enabled.
struct RawLog {
    enabled: bool,
    events: Vec<SimEvent>,
}

impl Observer for RawLog {
    fn on_event(&mut self, event: &SimEvent, _holding: f64, _state: StateView<'_>) -> Flow {
        if self.enabled {
            self.events.push(*event);
        }
        Flow::Continue
    }
}

fn cmd_simulate(args: &RunArgs) -> Result<(), CliError> {
    let resolved = load_run(args)?;
    let cfg = &resolved.config;
    let params = resolved.params;
    let start = LabeledState::from_view(&resolved.start);
    let eta0 = resolved.start.to_configuration();
    let options = TrackerOptions {
        stop_on_atypical: false,
        record_events: true,
        probes: cfg.probes.clone(),
        ..TrackerOptions::default()
    };
    let plans = engine::plans(cfg.master_seed, cfg.replicas, cfg.t_end);
    log::info!("simulating {} replicas to t = {}", cfg.replicas, cfg.t_end);
    let outputs = run_replicas(
        &params,
        &eta0,
        &plans,
        |_| {
            (
                TraceTracker::new(&params, start.clone(), options.clone()).expect("validated start"),
                RawLog {
                    enabled: cfg.record_events,
                    events: Vec::new(),
                },
            )
        },
        |obs| obs,
    );

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let events_path = dir.join("events.jsonl");
    let file = File::create(&events_path).map_err(io_err(&events_path))?;
    let mut out = BufWriter::new(file);
    let mut replicas = Vec::with_capacity(outputs.len());
    let mut fractions = Vec::with_capacity(outputs.len());
    for output in outputs {
        let (outcome, (tracker, raw)) = output.result.map_err(|e| CliError::Failed(e.to_string()))?;
        let r = output.replica_index;
        let mut lines: Vec<(f64, u8, Value)> = Vec::new();
        for e in &raw.events {
            lines.push((e.t, 0, json!({ "replica": r, "t": e.t, "from": e.from, "to": e.to })));
        }
        for e in tracker.events() {
            lines.push((
                e.t_raw,
                1,
                json!({
                    "replica": r,
                    "t_trace": e.t_trace,
                    "t_raw": e.t_raw,
                    "positions": e.after.positions(),
                    "masses": e.after.masses(),
                    "kind": e.kind.as_str(),
                }),
            ));
        }
        // a trace record follows the raw jump that caused it
        lines.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, _, line) in lines {
            serde_json::to_writer(&mut out, &line).map_err(|e| CliError::Io(e.to_string()))?;
            out.write_all(b"\n").map_err(io_err(&events_path))?;
        }
        let clock = tracker.clock();
        fractions.push(clock.fraction_outside());
        replicas.push(json!({
            "replica": r,
            "events": outcome.events,
            "t_stop": outcome.t_stop,
            "final_state": outcome.final_state.occupancy(),
            "trace_clock": { "t_total": clock.t_total, "t_in_e": clock.t_in_e },
            "trace_jumps": tracker.trace_jumps(),
            "atypical_at": tracker.atypical().map(|a| a.0),
            "first_merge": tracker.first_merge(),
            "labels": { "positions": tracker.labeled().positions(), "masses": tracker.labeled().masses() },
            "displacement": tracker.displacement(),
            "probes": tracker.probes(),
        }));
    }
    out.flush().map_err(io_err(&events_path))?;
    let fraction = mean_stderr(&fractions);
    let summary = json!({
        "schema": SUMMARY_SCHEMA,
        "command": "simulate",
        "config": cfg,
        "theta": params.theta(),
        "condensing_indicator": params.condensing_indicator(),
        "fraction_outside": fraction,
        "replicas": replicas,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("wrote {} and summary.json", events_path.display());
    Ok(())
}

fn cmd_cbm(args: &RunArgs) -> Result<(), CliError> {
    let resolved = load_run(args)?;
    let cfg = &resolved.config;
    let len = cfg.l as f64;
    let u0: Vec<f64> = match &cfg.u0 {
        Some(u) => u.clone(),
        None => resolved.start.positions.iter().map(|&x| x as f64 / len).collect(),
    };
    let rho = cfg.rho.unwrap_or(resolved.params.rho());
    let params = CBMParams::new(u0.len(), rho, cfg.dt, true).map_err(|e| CliError::Config(e.to_string()))?;
    let options = PathOptions {
        probes: cfg.probes.clone(),
        stop_when_single: true,
    };
    let paths = cbm::sample_ensemble(&params, &u0, cfg.t_end, &options, cfg.master_seed, cfg.replicas)
        .map_err(|e| CliError::Config(e.to_string()))?;

    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let paths_path = dir.join("paths.jsonl");
    let file = File::create(&paths_path).map_err(io_err(&paths_path))?;
    let mut out = BufWriter::new(file);
    for (i, p) in paths.iter().enumerate() {
        let line = json!({
            "path": i,
            "coalescences": p.coalescences,
            "probes": p.probes,
            "final_positions": p.final_state.positions(),
            "final_clusters": p.final_state.cluster_count(),
        });
        serde_json::to_writer(&mut out, &line).map_err(|e| CliError::Io(e.to_string()))?;
        out.write_all(b"\n").map_err(io_err(&paths_path))?;
    }
    out.flush().map_err(io_err(&paths_path))?;
    let firsts: Vec<f64> = paths.iter().filter_map(|p| p.first_coalescence()).collect();
    let pair_law = (u0.len() == 2).then(|| {
        let (p, mean) = cbm::pair_exit_law(cbm::torus_gap(u0[0], u0[1]), rho);
        json!({ "p_gap_closes": p, "mean_time": mean })
    });
    let summary = json!({
        "schema": SUMMARY_SCHEMA,
        "command": "cbm",
        "config": cfg,
        "u0": u0,
        "rho": rho,
        "paths": paths.len(),
        "coalesced": firsts.len(),
        "first_coalescence": (!firsts.is_empty()).then(|| mean_stderr(&firsts)),
        "pair_exit_law": pair_law,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("wrote {} and summary.json", paths_path.display());
    Ok(())
}

fn cmd_bd_exact(args: &BdArgs) -> Result<(), CliError> {
    let variant = match args.variant {
        VariantArg::Inner => Variant::Inner,
        VariantArg::Edge => Variant::Edge,
    };
    let spec = BDSpec::new(args.m, args.theta, args.d, variant).map_err(|e| CliError::Config(e.to_string()))?;
    let p = bdchain::absorb_prob(&spec, args.i).map_err(|e| CliError::Config(e.to_string()))?;
    let eh = bdchain::expected_hitting(&spec, args.i).map_err(|e| CliError::Config(e.to_string()))?;
    let b = bdchain::bounds(&spec);
    let at_one = bdchain::bounds_check(&spec);
    let report = json!({
        "schema": BD_SCHEMA,
        "m": args.m,
        "theta": args.theta,
        "d": args.d,
        "variant": match args.variant { VariantArg::Inner => "Inner", VariantArg::Edge => "Edge" },
        "i": args.i,
        "p": p,
        "eh": eh,
        "bounds": {
            "p_lower": b.p_lower,
            "p_upper": b.p_upper,
            "eh_upper": b.eh_upper,
            "hold_at_1": at_one.is_ok(),
        },
    });
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?);
    Ok(())
}

/// Applies `--replicas` to the suite being run.
fn override_replicas(cfg: &mut suite::SuiteConfig, which: &str, r: usize) {
    match which {
        "detailed-balance" => cfg.detailed_balance.samples = r,
        "exact-small" => {
            cfg.exact_small.resolvent.replicas = r;
        }
        "bd-oracle" => cfg.bd_oracle.walks = r,
        "coupling" => cfg.coupling.excursions = r,
        "cbm-selfcheck" => cfg.cbm_selfcheck.paths = r,
        "theorem1" => cfg.theorem1.replicas = r,
        "theorem2" => cfg.theorem2.replicas = r,
        "time-change" => cfg.time_change.desk.replicas = r,
        "theorem4" => {
            cfg.theorem4.compare.sip_replicas = r;
            cfg.theorem4.compare.cbm_replicas = r;
            if let Some(f) = cfg.theorem4.fallback.as_deref_mut() {
                f.compare.sip_replicas = r;
                f.compare.cbm_replicas = r;
            }
        }
        _ => {}
    }
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    let mut cfg: VerifyConfig = match &args.config {
        Some(path) => config::parse(config::read_document(path)?)?,
        None => VerifyConfig::default(),
    };
    if !suite::SUITES.contains(&args.which.as_str()) {
        return Err(CliError::Config(format!(
            "unknown suite {:?}; expected one of {}",
            args.which,
            suite::SUITES.join(", ")
        )));
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(r) = args.replicas {
        override_replicas(&mut cfg.verify, &args.which, r);
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.output_dir = config::output_dir(&cfg.output_dir);
    let report = suite::run_suite(&args.which, &cfg.verify, cfg.master_seed)?;
    for c in &report.checks {
        println!(
            "{} {}: {} {} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.comparison,
            c.threshold
        );
    }
    let doc = json!({
        "schema": REPORT_SCHEMA,
        "which": args.which,
        "seed": cfg.master_seed,
        "passed": report.passed,
        "report": report,
        "config": cfg,
    });
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("report.json"), &doc)?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Failed(format!("suite {} failed", args.which)))
    }
}
