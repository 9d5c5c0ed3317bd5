//! Command-line front end: open-loop simulation, surrogate fitting,
//! closed-loop MPC runs, and trace comparison.
//!
//! Exit codes: 0 on success, 1 on usage/configuration errors, 2 on
//! numerical failures (singular systems, degenerate states, failed line
//! searches).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use edmd_mpc::harness::{
    compare_docs, export_report, export_rows_csv, export_trace_json, import_trace_json,
    load_scenario, run_scenario, sim_rows, simulate_scenario, trace_rows, ExportFormat, Scenario,
};
use edmd_mpc::mpc::{init_edmd_model, MpcMode, MpcTrace};
use edmd_mpc::plant::steady_state;
use edmd_mpc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "edmd-mpc",
    version,
    about = "Lifted linear surrogates and model predictive dose scheduling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop plant run (uncontrolled or fixed-dose), exported as CSV
    Simulate {
        /// Scenario file (JSON)
        #[arg(long)]
        scenario: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect identification snapshots and fit a lifted surrogate
    Fit {
        /// Scenario file (JSON)
        #[arg(long)]
        scenario: PathBuf,
        /// Input encoding: edmd-c or edmd-d
        #[arg(long, value_parser = parse_surrogate_mode)]
        mode: MpcMode,
        /// Output model file (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop MPC run; writes trace.csv and trace.json
    Mpc {
        /// Scenario file (JSON)
        #[arg(long)]
        scenario: PathBuf,
        /// Controller: edmd-c, edmd-d or nonlinear
        #[arg(long, value_parser = parse_mode)]
        mode: MpcMode,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Override the scenario's seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare two exported traces (--b is the reference)
    Compare {
        /// Trace document (trace.json from `mpc`)
        #[arg(long)]
        a: PathBuf,
        /// Reference trace document
        #[arg(long)]
        b: PathBuf,
        /// Output report file (JSON)
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_mode(s: &str) -> std::result::Result<MpcMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_surrogate_mode(s: &str) -> std::result::Result<MpcMode, String> {
    match parse_mode(s)? {
        MpcMode::Nonlinear => Err("fit needs a surrogate encoding: edmd-c or edmd-d".into()),
        mode => Ok(mode),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here as non-error displays
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { scenario, out } => cmd_simulate(&scenario, &out),
        Command::Fit {
            scenario,
            mode,
            out,
        } => cmd_fit(&scenario, mode, &out),
        Command::Mpc {
            scenario,
            mode,
            out,
            seed,
        } => cmd_mpc(&scenario, mode, &out, seed),
        Command::Compare { a, b, out } => cmd_compare(&a, &b, &out),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn cmd_simulate(scenario_path: &Path, out: &Path) -> Result<()> {
    let scenario = load_scenario(scenario_path)?;
    let (trace, schedule, _params) = simulate_scenario(&scenario)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let rows = sim_rows(&trace, &schedule);
    let csv_path = out.join("simulate.csv");
    export_rows_csv(&rows, &csv_path)?;
    let last = rows.last().expect("simulation produces at least one row");
    println!(
        "simulated {} steps ({} days): output {:.6} -> {:.6}",
        rows.len() - 1,
        scenario.total_days,
        rows[0].hemoglobin,
        last.hemoglobin
    );
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_fit(scenario_path: &Path, mode: MpcMode, out: &Path) -> Result<()> {
    let scenario = load_scenario(scenario_path)?;
    let params = scenario.resolve_params()?;
    let config = scenario.mpc_config(mode, &params)?;
    let template = scenario.schedule_template(identification_days(&scenario, params.dt, &config));
    let state0 = steady_state(&params, params.e_base)?;
    let (model, snapshots) = init_edmd_model(&params, &state0, &template, &config)?;
    fs::write(out, model.to_json()?).map_err(|e| io_err(out, e))?;
    println!(
        "fit {mode}: {} snapshots, lifted dimension {}, svd tolerance {:.1e}",
        snapshots.m(),
        model.lifted_dim(),
        model.svd_tol
    );
    println!(
        "residuals: dynamics {:.6e}, reconstruction {:.6e}",
        model.residual_dynamics, model.residual_reconstruction
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Identification window end: long enough for the snapshot count, and at
/// least the treatment plus one prediction horizon (mirrors the closed
/// loop's template).
fn identification_days(scenario: &Scenario, dt: f64, config: &edmd_mpc::mpc::MpcConfig) -> f64 {
    let horizon_days = config.horizon_steps as f64 * dt;
    let ident_days = config.n_init_snapshots as f64 * dt;
    (scenario.total_days + horizon_days).max(ident_days)
}

fn cmd_mpc(scenario_path: &Path, mode: MpcMode, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut scenario = load_scenario(scenario_path)?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    let (trace, model) = run_scenario(&scenario, mode)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let csv_path = out.join("trace.csv");
    export_rows_csv(&trace_rows(&trace), &csv_path)?;
    let json_path = out.join("trace.json");
    let echo = serde_json::json!({
        "scenario": scenario,
        "mode": mode.to_string(),
    });
    export_trace_json(&trace, echo, &json_path)?;
    print_mpc_summary(mode, &trace);
    if let Some(model) = model {
        println!(
            "final surrogate: lifted dimension {}, residuals {:.3e}/{:.3e}",
            model.lifted_dim(),
            model.residual_dynamics,
            model.residual_reconstruction
        );
    }
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

fn print_mpc_summary(mode: MpcMode, trace: &MpcTrace) {
    let updates = trace.records.iter().filter(|r| r.update_fired).count();
    let doses = trace.records.iter().filter(|r| r.dose_applied > 0.0).count();
    println!(
        "{mode}: {} steps, {doses} doses, {updates} model updates, final output {:.6}",
        trace.records.len(),
        trace.outputs.last().copied().unwrap_or(f64::NAN)
    );
    println!(
        "solver wall {:.4}s (identification {:.4}s, updates {:.4}s)",
        trace.solve_wall_seconds(),
        trace.init_wall_seconds,
        trace.update_wall_seconds
    );
}

fn cmd_compare(a: &Path, b: &Path, out: &Path) -> Result<()> {
    let doc_a = import_trace_json(a)?;
    let doc_b = import_trace_json(b)?;
    let report = compare_docs(&doc_a, &doc_b)?;
    export_report(&report, out, ExportFormat::Json)?;
    println!(
        "relative output error {:.6e}; solver speed-up {:.2}x (inclusive {:.2}x)",
        report.rel_error, report.speed_up, report.inclusive_speed_up
    );
    println!("wrote {}", out.display());
    Ok(())
}
