//! Scenario ingestion, run orchestration, persistence and comparison.
//!
//! A scenario is a small versioned JSON document: total treatment length,
//! the weekly injection pattern, optional no-injection windows, plant and
//! controller overrides, cost weights and a seed. Loading is strict —
//! misspelled keys are rejected rather than silently defaulted — and every
//! invariant violation names the offending value.
//!
//! Traces persist as CSV (one row per time-grid point, plot-ready) or as
//! JSON (the same rows plus a configuration echo and version stamp); both
//! round-trip exactly. Comparison mirrors the headline metrics of the
//! study this artifact reproduces: space-time relative output error
//! against the reference trace and solver-time speed-up, with inclusive
//! timings reported alongside.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::BfgsOptions;
use crate::edmd::EdmdModel;
use crate::error::{Error, Result};
use crate::mpc::{run_edmd_mpc, run_nonlinear_mpc, MpcConfig, MpcMode, MpcTrace, OcpWeights};
use crate::plant::{self, steady_state, DoseSchedule, PkModel, PlantParams, SimTrace};
use crate::spectral::build_grid;

/// Version stamp of the scenario schema and the exported documents.
pub const SCENARIO_FORMAT_VERSION: u32 = 1;

fn default_version() -> u32 {
    SCENARIO_FORMAT_VERSION
}

fn default_total_days() -> f64 {
    21.0
}

fn default_injection_days() -> Vec<f64> {
    vec![1.0, 3.0, 5.0]
}

fn default_u_max() -> f64 {
    0.05
}

fn default_seed() -> u64 {
    42
}

/// Saturable-elimination override of the dose model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PkOverride {
    pub v_max: f64,
    pub k_m_elim: f64,
}

/// Optional plant-parameter overrides; anything omitted keeps the
/// desk-scale default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantOverrides {
    pub n: Option<usize>,
    pub n_pop: Option<usize>,
    pub kappa0: Option<f64>,
    pub kappa1: Option<f64>,
    pub v0: Option<f64>,
    pub v1: Option<f64>,
    pub k_m: Option<f64>,
    pub g0: Option<f64>,
    pub alpha: Option<f64>,
    pub k_a: Option<f64>,
    pub k_e: Option<f64>,
    pub v_d: Option<f64>,
    pub e_base: Option<f64>,
    pub dt: Option<f64>,
    pub omega5: Option<f64>,
    /// Switch to saturable elimination; omitted means the linear model.
    pub michaelis_menten: Option<PkOverride>,
}

/// Controller overrides; anything omitted keeps the documented default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcOverrides {
    /// Prediction window in days (converted to steps with the plant dt).
    pub horizon_days: f64,
    pub tau_upd: f64,
    pub m_edmd: usize,
    pub n_init_snapshots: usize,
    /// Dictionary depth; `None` uses each mode's default.
    pub n_l: Option<usize>,
    /// Fit truncation; `None` uses each mode's default.
    pub svd_tol: Option<f64>,
    pub warm_start: bool,
    pub append_refit: bool,
    pub solver_tol: f64,
    pub solver_max_iter: usize,
}

impl Default for MpcOverrides {
    fn default() -> Self {
        let bfgs = BfgsOptions::default();
        MpcOverrides {
            horizon_days: 14.0,
            tau_upd: 0.01,
            m_edmd: 30,
            n_init_snapshots: 120,
            n_l: None,
            svd_tol: None,
            warm_start: true,
            append_refit: false,
            solver_tol: bfgs.tol,
            solver_max_iter: bfgs.max_iter,
        }
    }
}

fn default_weights() -> OcpWeights {
    OcpWeights::default()
}

/// One experiment definition, as read from a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_version")]
    pub version: u32,
    /// Total treatment length T in days.
    #[serde(default = "default_total_days")]
    pub total_days: f64,
    /// Injection days within each week (strictly increasing, in [0, 7)).
    #[serde(default = "default_injection_days")]
    pub injection_days: Vec<f64>,
    /// Half-open `[start, end)` day windows with forced zero dosing.
    #[serde(default)]
    pub skip_windows: Vec<[f64; 2]>,
    /// Dose cap per injection.
    #[serde(default = "default_u_max")]
    pub u_max: f64,
    /// Fixed amplitude for open-loop simulation runs; `None` simulates
    /// the uncontrolled plant.
    #[serde(default)]
    pub fixed_dose: Option<f64>,
    #[serde(default)]
    pub plant: PlantOverrides,
    #[serde(default)]
    pub mpc: MpcOverrides,
    #[serde(default = "default_weights")]
    pub weights: OcpWeights,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        serde_json::from_str("{}").expect("the empty document is a valid scenario")
    }
}

impl Scenario {
    /// Parse a scenario document, filling defaults and checking every
    /// invariant. Unknown keys and version mismatches are schema errors;
    /// invariant breaches are range errors.
    pub fn from_json(document: &str) -> Result<Scenario> {
        let scenario: Scenario = serde_json::from_str(document)
            .map_err(|e| Error::Schema(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCENARIO_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported scenario version {} (this build reads version {})",
                self.version, SCENARIO_FORMAT_VERSION
            )));
        }
        if !(self.total_days > 0.0) {
            return Err(Error::Range(format!(
                "total_days must be positive, got {}",
                self.total_days
            )));
        }
        for (i, &day) in self.injection_days.iter().enumerate() {
            if !(0.0..7.0).contains(&day) {
                return Err(Error::Range(format!(
                    "injection day {day} is outside the weekly range [0, 7)"
                )));
            }
            if day > self.total_days {
                return Err(Error::Range(format!(
                    "injection day {day} exceeds the treatment length {}",
                    self.total_days
                )));
            }
            if i > 0 && day <= self.injection_days[i - 1] {
                return Err(Error::Range(
                    "injection days must be strictly increasing".into(),
                ));
            }
        }
        for w in &self.skip_windows {
            let [lo, hi] = *w;
            if !(lo < hi) || lo < 0.0 || hi > self.total_days {
                return Err(Error::Range(format!(
                    "skip window [{lo}, {hi}) must be nonempty and inside [0, {}]",
                    self.total_days
                )));
            }
        }
        if !(self.u_max >= 0.0) || !self.u_max.is_finite() {
            return Err(Error::Range(format!(
                "u_max must be finite and >= 0, got {}",
                self.u_max
            )));
        }
        if let Some(d) = self.fixed_dose {
            if !(0.0..=self.u_max).contains(&d) {
                return Err(Error::Range(format!(
                    "fixed_dose {d} is outside [0, {}]",
                    self.u_max
                )));
            }
        }
        if !(self.mpc.horizon_days > 0.0) {
            return Err(Error::Range(format!(
                "horizon_days must be positive, got {}",
                self.mpc.horizon_days
            )));
        }
        self.resolve_params()?.validate()
    }

    /// Build the plant parameters with overrides applied.
    pub fn resolve_params(&self) -> Result<PlantParams> {
        let mut p = PlantParams::default();
        let o = &self.plant;
        if let Some(n) = o.n {
            p.grid = build_grid(n, p.grid.x_lo, p.grid.x_hi)?;
        }
        if let Some(v) = o.n_pop {
            p.n_pop = v;
        }
        if let Some(v) = o.kappa0 {
            p.kappa0 = v;
        }
        if let Some(v) = o.kappa1 {
            p.kappa1 = v;
        }
        if let Some(v) = o.v0 {
            p.v0 = v;
        }
        if let Some(v) = o.v1 {
            p.v1 = v;
        }
        if let Some(v) = o.k_m {
            p.k_m = v;
        }
        if let Some(v) = o.g0 {
            p.g0 = v;
        }
        if let Some(v) = o.alpha {
            p.alpha = v;
        }
        if let Some(v) = o.k_a {
            p.k_a = v;
        }
        if let Some(v) = o.k_e {
            p.k_e = v;
        }
        if let Some(v) = o.v_d {
            p.v_d = v;
        }
        if let Some(v) = o.e_base {
            p.e_base = v;
        }
        if let Some(v) = o.dt {
            p.dt = v;
        }
        if let Some(v) = o.omega5 {
            p.omega5 = v;
        }
        if let Some(mm) = o.michaelis_menten {
            p.pk = PkModel::MichaelisMenten {
                v_max: mm.v_max,
                k_m_elim: mm.k_m_elim,
            };
        }
        p.validate()?;
        Ok(p)
    }

    /// Number of closed-loop steps (T / dt, rounded).
    pub fn total_steps(&self, params: &PlantParams) -> usize {
        ((self.total_days / params.dt).round() as usize).max(1)
    }

    /// Injection times over `[0, t_end)` from the weekly pattern, with
    /// zero placeholder amplitudes. The template extends past T by the
    /// prediction window so horizons near the end still see the assumed
    /// future appointments.
    pub fn schedule_template(&self, t_end: f64) -> DoseSchedule {
        let mut times = Vec::new();
        let mut week = 0.0;
        while week < t_end {
            for &day in &self.injection_days {
                let t = week + day;
                if t < t_end {
                    times.push(t);
                }
            }
            week += 7.0;
        }
        let doses = vec![0.0; times.len()];
        DoseSchedule::new(times, doses, self.u_max)
            .expect("validated pattern yields a valid schedule")
    }

    /// Controller configuration for a given mode.
    pub fn mpc_config(&self, mode: MpcMode, params: &PlantParams) -> Result<MpcConfig> {
        let horizon_steps = (self.mpc.horizon_days / params.dt).round() as usize;
        if horizon_steps == 0 {
            return Err(Error::Range(format!(
                "horizon of {} days is below one {}-day step",
                self.mpc.horizon_days, params.dt
            )));
        }
        let mut config = MpcConfig::new(mode, self.total_steps(params));
        config.horizon_steps = horizon_steps;
        config.tau_upd = self.mpc.tau_upd;
        config.m_edmd = self.mpc.m_edmd;
        config.n_init_snapshots = self.mpc.n_init_snapshots;
        config.n_l = self.mpc.n_l.unwrap_or_else(|| mode.default_depth().max(1));
        config.svd_tol = self.mpc.svd_tol.unwrap_or_else(|| mode.default_svd_tol());
        config.seed = self.seed;
        config.warm_start = self.mpc.warm_start;
        config.append_refit = self.mpc.append_refit;
        config.skip_windows = self.skip_windows.iter().map(|&[a, b]| (a, b)).collect();
        config.bfgs.tol = self.mpc.solver_tol;
        config.bfgs.max_iter = self.mpc.solver_max_iter;
        config.validate()?;
        Ok(config)
    }
}

/// Read and validate a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    match serde_json::from_str::<Scenario>(&text) {
        Ok(s) => {
            s.validate()?;
            Ok(s)
        }
        Err(e) if e.classify() == serde_json::error::Category::Data => {
            Err(Error::Schema(e.to_string()))
        }
        Err(e) => Err(Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        }),
    }
}

/// Run a scenario under one controller. Surrogate modes also return the
/// final fitted model.
pub fn run_scenario(
    scenario: &Scenario,
    mode: MpcMode,
) -> Result<(MpcTrace, Option<EdmdModel>)> {
    let params = scenario.resolve_params()?;
    let config = scenario.mpc_config(mode, &params)?;
    // the template must reach every appointment a late horizon can see,
    // and cover the identification window of the surrogate modes
    let horizon_days = config.horizon_steps as f64 * params.dt;
    let ident_days = config.n_init_snapshots as f64 * params.dt;
    let t_end = (scenario.total_days + horizon_days).max(ident_days);
    let template = scenario.schedule_template(t_end);
    match mode {
        MpcMode::Nonlinear => {
            let trace = run_nonlinear_mpc(&params, &template, &config, &scenario.weights)?;
            Ok((trace, None))
        }
        _ => {
            let (trace, model) = run_edmd_mpc(&params, &template, &config, &scenario.weights)?;
            Ok((trace, Some(model)))
        }
    }
}

/// Open-loop plant run: uncontrolled, or with the scenario's fixed dose
/// applied at every injection time.
pub fn simulate_scenario(scenario: &Scenario) -> Result<(SimTrace, DoseSchedule, PlantParams)> {
    let params = scenario.resolve_params()?;
    let state0 = steady_state(&params, params.e_base)?;
    let schedule = match scenario.fixed_dose {
        Some(amplitude) => {
            let template = scenario.schedule_template(scenario.total_days);
            let doses = vec![amplitude; template.len()];
            DoseSchedule::new(template.times().to_vec(), doses, scenario.u_max)?
        }
        None => DoseSchedule::empty(scenario.u_max),
    };
    let steps = scenario.total_steps(&params);
    let trace = plant::simulate(&params, &state0, &schedule, steps)?;
    Ok((trace, schedule, params))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// One exported time-grid point. Row 0 is the initial state (no dose, no
/// solve); row i ≥ 1 reports step i of the loop, timestamped at the step's
/// end so `hemoglobin` is the value the plotted trace passes through at
/// `t_days`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub t_days: f64,
    pub dose_applied: f64,
    pub hemoglobin: f64,
    pub surrogate_error: f64,
    pub update_fired: bool,
    pub solve_wall_seconds: f64,
}

/// Flatten a closed-loop trace into exported rows.
pub fn trace_rows(trace: &MpcTrace) -> Vec<TraceRow> {
    let mut rows = Vec::with_capacity(trace.outputs.len());
    if let Some(&p0) = trace.outputs.first() {
        let t0 = trace
            .records
            .first()
            .map_or(0.0, |r| r.t);
        rows.push(TraceRow {
            step: 0,
            t_days: t0,
            dose_applied: 0.0,
            hemoglobin: p0,
            surrogate_error: 0.0,
            update_fired: false,
            solve_wall_seconds: 0.0,
        });
    }
    for (i, r) in trace.records.iter().enumerate() {
        rows.push(TraceRow {
            step: i + 1,
            t_days: r.state_after.t,
            dose_applied: r.dose_applied,
            hemoglobin: trace.outputs[i + 1],
            surrogate_error: r.error_norm,
            update_fired: r.update_fired,
            solve_wall_seconds: r.solve_wall_seconds,
        });
    }
    rows
}

/// Flatten an open-loop simulation into the same row shape (no solver, no
/// surrogate; doses read off the schedule).
pub fn sim_rows(trace: &SimTrace, schedule: &DoseSchedule) -> Vec<TraceRow> {
    trace
        .states
        .iter()
        .zip(&trace.outputs)
        .enumerate()
        .map(|(i, (state, &p))| {
            let dose = if i == 0 {
                0.0
            } else {
                let t_prev = trace.states[i - 1].t;
                schedule
                    .times()
                    .iter()
                    .zip(schedule.doses())
                    .filter(|(&tj, _)| tj >= t_prev && tj < state.t)
                    .map(|(_, &u)| u)
                    .sum()
            };
            TraceRow {
                step: i,
                t_days: state.t,
                dose_applied: dose,
                hemoglobin: p,
                surrogate_error: 0.0,
                update_fired: false,
                solve_wall_seconds: 0.0,
            }
        })
        .collect()
}

/// Export formats of traces and reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "json" => Ok(ExportFormat::Json),
            other => Err(Error::Format(format!(
                "unknown export format '{other}' (expected csv or json)"
            ))),
        }
    }
}

/// JSON envelope around the exported rows: version stamp, the
/// configuration that produced the run, and run-level timings the CSV
/// cannot carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceDoc {
    pub version: u32,
    /// Echo of the scenario/config that produced the trace (free-form).
    pub config: serde_json::Value,
    pub init_wall_seconds: f64,
    pub update_wall_seconds: f64,
    pub rows: Vec<TraceRow>,
}

/// Write rows as CSV with exactly the documented column set.
pub fn export_rows_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(&display, e))?;
    if rows.is_empty() {
        // serde-driven headers only appear on the first record, so write
        // them explicitly for the empty export
        writer
            .write_record([
                "step",
                "t_days",
                "dose_applied",
                "hemoglobin",
                "surrogate_error",
                "update_fired",
                "solve_wall_seconds",
            ])
            .map_err(|e| csv_error(&display, e))?;
    }
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(&display, e))?;
    }
    writer.flush().map_err(|e| Error::io(display, e))?;
    Ok(())
}

/// Read rows back from a CSV export.
pub fn import_rows_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(&display, e))?;
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record.map_err(|e| csv_error(&display, e))?);
    }
    Ok(rows)
}

/// Write a trace document (rows + config echo + timings) as JSON.
pub fn export_trace_json(
    trace: &MpcTrace,
    config_echo: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let doc = TraceDoc {
        version: SCENARIO_FORMAT_VERSION,
        config: config_echo,
        init_wall_seconds: trace.init_wall_seconds,
        update_wall_seconds: trace.update_wall_seconds,
        rows: trace_rows(trace),
    };
    write_json(&doc, path)
}

/// Read a JSON trace document back.
pub fn import_trace_json(path: impl AsRef<Path>) -> Result<TraceDoc> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::io(display.clone(), e))?;
    let doc: TraceDoc = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: display,
        message: e.to_string(),
    })?;
    if doc.version != SCENARIO_FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported trace version {} (this build reads version {})",
            doc.version, SCENARIO_FORMAT_VERSION
        )));
    }
    Ok(doc)
}

fn csv_error(path: &str, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.to_string(), io),
        other => Error::Parse {
            path: path.to_string(),
            message: format!("{other:?}"),
        },
    }
}

fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        path: display.clone(),
        message: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(display, e))
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

/// Headline comparison of two runs over the same time grid; `b` is the
/// reference (the nonlinear controller in the study's tables).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub version: u32,
    /// Space-time relative output error ‖P_a − P_b‖₂ / ‖P_b‖₂.
    pub rel_error: f64,
    /// Summed solver wall seconds of each run.
    pub wall_a: f64,
    pub wall_b: f64,
    /// wall_b / wall_a (how many times faster run a's solver was).
    pub speed_up: f64,
    /// Wall seconds including identification and refits.
    pub inclusive_wall_a: f64,
    pub inclusive_wall_b: f64,
    pub inclusive_speed_up: f64,
    /// Pointwise relative output error at every grid time.
    pub error_series: Vec<f64>,
}

/// Compare two traces; `trace_b` is the reference.
pub fn compare(trace_a: &MpcTrace, trace_b: &MpcTrace) -> Result<ComparisonReport> {
    compare_rows(
        &trace_rows(trace_a),
        trace_a.init_wall_seconds + trace_a.update_wall_seconds,
        &trace_rows(trace_b),
        trace_b.init_wall_seconds + trace_b.update_wall_seconds,
    )
}

/// Compare two exported trace documents; `doc_b` is the reference. Same
/// report as [`compare`], computed from files instead of live runs.
pub fn compare_docs(doc_a: &TraceDoc, doc_b: &TraceDoc) -> Result<ComparisonReport> {
    compare_rows(
        &doc_a.rows,
        doc_a.init_wall_seconds + doc_a.update_wall_seconds,
        &doc_b.rows,
        doc_b.init_wall_seconds + doc_b.update_wall_seconds,
    )
}

fn compare_rows(
    rows_a: &[TraceRow],
    overhead_a: f64,
    rows_b: &[TraceRow],
    overhead_b: f64,
) -> Result<ComparisonReport> {
    if rows_a.len() != rows_b.len() {
        return Err(Error::GridMismatch(format!(
            "{} vs {} grid points",
            rows_a.len(),
            rows_b.len()
        )));
    }
    for (ra, rb) in rows_a.iter().zip(rows_b) {
        if (ra.t_days - rb.t_days).abs() > 1e-9 {
            return Err(Error::GridMismatch(format!(
                "step times diverge: {} vs {}",
                ra.t_days, rb.t_days
            )));
        }
    }
    let diff_sq: f64 = rows_a
        .iter()
        .zip(rows_b)
        .map(|(a, b)| (a.hemoglobin - b.hemoglobin).powi(2))
        .sum();
    let ref_sq: f64 = rows_b.iter().map(|b| b.hemoglobin * b.hemoglobin).sum();
    let rel_error = if ref_sq > 0.0 {
        (diff_sq / ref_sq).sqrt()
    } else {
        diff_sq.sqrt()
    };
    let error_series = rows_a
        .iter()
        .zip(rows_b)
        .map(|(a, b)| (a.hemoglobin - b.hemoglobin).abs() / b.hemoglobin.abs().max(1e-300))
        .collect();
    let wall_a: f64 = rows_a.iter().map(|r| r.solve_wall_seconds).sum();
    let wall_b: f64 = rows_b.iter().map(|r| r.solve_wall_seconds).sum();
    Ok(ComparisonReport {
        version: SCENARIO_FORMAT_VERSION,
        rel_error,
        wall_a,
        wall_b,
        speed_up: wall_b / wall_a,
        inclusive_wall_a: wall_a + overhead_a,
        inclusive_wall_b: wall_b + overhead_b,
        inclusive_speed_up: (wall_b + overhead_b) / (wall_a + overhead_a),
        error_series,
    })
}

/// Write a comparison report as JSON (the only format reports support;
/// their natural shape is nested, not tabular).
pub fn export_report(
    report: &ComparisonReport,
    path: impl AsRef<Path>,
    format: ExportFormat,
) -> Result<()> {
    match format {
        ExportFormat::Json => write_json(report, path),
        ExportFormat::Csv => Err(Error::Format(
            "comparison reports export as json only".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mpc::MpcRecord;
    use nalgebra::DVector;

    fn synthetic_trace(outputs: Vec<f64>, wall: f64) -> MpcTrace {
        let params = PlantParams::default();
        let state0 = steady_state(&params, params.e_base).unwrap();
        let records = (0..outputs.len() - 1)
            .map(|i| MpcRecord {
                t: i as f64 * 0.5,
                dose_applied: 0.1,
                state_after: state0.clone(),
                surrogate_prediction: Some(DVector::zeros(2)),
                error_norm: 0.001 * i as f64,
                update_fired: i % 3 == 0,
                solve_wall_seconds: wall,
                solve_converged: true,
            })
            .collect();
        MpcTrace {
            records,
            outputs,
            init_wall_seconds: 0.5,
            update_wall_seconds: 0.25,
        }
    }

    #[test]
    fn empty_document_gives_the_default_scenario() {
        let s = Scenario::from_json("{}").unwrap();
        assert_eq!(s.total_days, 21.0);
        assert_eq!(s.injection_days, vec![1.0, 3.0, 5.0]);
        assert!(s.skip_windows.is_empty());
        assert_eq!(s.u_max, 0.05);
        assert_eq!(s.seed, 42);
        assert_eq!(s.mpc.horizon_days, 14.0);
        assert_eq!(s.weights.target, 5.0);
        let params = s.resolve_params().unwrap();
        assert_eq!(s.total_steps(&params), 42);
    }

    #[test]
    fn skip_week_scenario_matches_the_long_test() {
        let s = Scenario::from_json(
            r#"{"total_days": 49.0, "skip_windows": [[21.0, 28.0]]}"#,
        )
        .unwrap();
        let params = s.resolve_params().unwrap();
        assert_eq!(s.total_steps(&params), 98);
        let config = s.mpc_config(MpcMode::EdmdD, &params).unwrap();
        assert_eq!(config.skip_windows, vec![(21.0, 28.0)]);
        assert_eq!(config.horizon_steps, 28);
        assert_eq!(config.n_l, 6);
        assert_eq!(config.svd_tol, 1e-3);
        let config_c = s.mpc_config(MpcMode::EdmdC, &params).unwrap();
        assert_eq!(config_c.n_l, 2);
        assert_eq!(config_c.svd_tol, 1e-6);
    }

    #[test]
    fn explicit_svd_tol_overrides_both_modes() {
        let s = Scenario::from_json(r#"{"mpc": {"svd_tol": 1e-8}}"#).unwrap();
        let params = s.resolve_params().unwrap();
        for mode in [MpcMode::EdmdC, MpcMode::EdmdD] {
            assert_eq!(s.mpc_config(mode, &params).unwrap().svd_tol, 1e-8);
        }
    }

    #[test]
    fn unknown_keys_are_schema_errors_naming_the_key() {
        let err = Scenario::from_json(r#"{"total_dayz": 21.0}"#).unwrap_err();
        match err {
            Error::Schema(msg) => assert!(msg.contains("total_dayz"), "message: {msg}"),
            other => panic!("expected a schema error, got {other:?}"),
        }
        // nested objects are strict too
        let err = Scenario::from_json(r#"{"mpc": {"tau_update": 0.01}}"#).unwrap_err();
        assert!(matches!(err, Error::Schema(m) if m.contains("tau_update")));
    }

    #[test]
    fn invariant_breaches_are_range_errors() {
        assert!(matches!(
            Scenario::from_json(r#"{"total_days": -1.0}"#),
            Err(Error::Range(_))
        ));
        // injection day beyond the treatment length
        assert!(matches!(
            Scenario::from_json(r#"{"total_days": 2.0, "injection_days": [1.0, 3.0]}"#),
            Err(Error::Range(_))
        ));
        // skip window outside [0, T]
        assert!(matches!(
            Scenario::from_json(r#"{"skip_windows": [[14.0, 28.0]]}"#),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            Scenario::from_json(r#"{"injection_days": [5.0, 1.0]}"#),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            Scenario::from_json(r#"{"fixed_dose": 0.3}"#),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        assert!(matches!(
            Scenario::from_json(r#"{"version": 2}"#),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn plant_overrides_apply() {
        let s = Scenario::from_json(
            r#"{"plant": {"n": 8, "kappa0": 0.3, "michaelis_menten": {"v_max": 0.5, "k_m_elim": 0.5}}}"#,
        )
        .unwrap();
        let p = s.resolve_params().unwrap();
        assert_eq!(p.grid.n, 8);
        assert_eq!(p.kappa0, 0.3);
        assert!(matches!(p.pk, PkModel::MichaelisMenten { .. }));
        // overrides still pass through parameter validation
        assert!(Scenario::from_json(r#"{"plant": {"v0": -1.0}}"#).is_err());
    }

    #[test]
    fn template_covers_each_week() {
        let s = Scenario::default();
        let template = s.schedule_template(14.0);
        assert_eq!(template.times(), &[1.0, 3.0, 5.0, 8.0, 10.0, 12.0]);
        assert!(template.doses().iter().all(|&d| d == 0.0));
        assert_eq!(template.u_max(), 0.05);
    }

    #[test]
    fn compare_examples() {
        let base = vec![1.0, 1.1, 1.25, 1.4];
        let a = synthetic_trace(base.clone(), 0.002);
        let b = synthetic_trace(base.clone(), 0.01);
        let report = compare(&a, &b).unwrap();
        assert_eq!(report.rel_error, 0.0, "identical outputs");
        assert!((report.speed_up - 5.0).abs() < 1e-9, "wall ratio 0.01/0.002");
        assert!(report.error_series.iter().all(|&e| e == 0.0));

        // a uniform 1% inflation gives exactly 1% relative error
        let inflated: Vec<f64> = base.iter().map(|p| 1.01 * p).collect();
        let a = synthetic_trace(inflated, 0.002);
        let report = compare(&a, &b).unwrap();
        assert!(
            (report.rel_error - 0.01).abs() < 1e-12,
            "got {}",
            report.rel_error
        );
        for e in &report.error_series {
            assert!((e - 0.01).abs() < 1e-12);
        }

        // disjoint grids are rejected
        let short = synthetic_trace(vec![1.0, 1.1], 0.002);
        assert!(matches!(compare(&short, &b), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = synthetic_trace(vec![1.0, 1.0625, 1.128_906_25, 1.3], 0.00213);
        let rows = trace_rows(&trace);
        export_rows_csv(&rows, &path).unwrap();
        let back = import_rows_csv(&path).unwrap();
        assert_eq!(rows, back, "CSV round trip must be bit-exact");
        // spot-check the header line is exactly the documented columns
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "step,t_days,dose_applied,hemoglobin,surrogate_error,update_fired,solve_wall_seconds"
        ));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.json");
        let trace = synthetic_trace(vec![1.0, 1.0625, 1.3], 0.00213);
        let echo = serde_json::json!({"scenario": "unit-test"});
        export_trace_json(&trace, echo.clone(), &path).unwrap();
        let doc = import_trace_json(&path).unwrap();
        assert_eq!(doc.rows, trace_rows(&trace));
        assert_eq!(doc.config, echo);
        assert_eq!(doc.init_wall_seconds, trace.init_wall_seconds);
    }

    #[test]
    fn empty_trace_exports_a_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        export_rows_csv(&[], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.trim(),
            "step,t_days,dose_applied,hemoglobin,surrogate_error,update_fired,solve_wall_seconds"
        );
        assert!(import_rows_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn unknown_format_is_a_usage_error() {
        assert!(matches!(
            "yaml".parse::<ExportFormat>(),
            Err(Error::Format(_))
        ));
        assert_eq!("csv".parse::<ExportFormat>().unwrap(), ExportFormat::Csv);
        let report = compare(
            &synthetic_trace(vec![1.0, 1.1], 0.01),
            &synthetic_trace(vec![1.0, 1.1], 0.01),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            export_report(&report, dir.path().join("r.csv"), ExportFormat::Csv),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_file_reports_the_path() {
        let err = load_scenario("/nonexistent/scenario.json").unwrap_err();
        match err {
            Error::Io { path, .. } => assert!(path.contains("nonexistent")),
            other => panic!("expected an I/O error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{ not json").unwrap();
        assert!(matches!(
            load_scenario(&path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn sim_rows_attribute_doses_to_their_step() {
        let s = Scenario::from_json(
            r#"{"total_days": 4.0, "injection_days": [1.0, 3.0], "fixed_dose": 0.04}"#,
        )
        .unwrap();
        let (trace, schedule, _params) = simulate_scenario(&s).unwrap();
        let rows = sim_rows(&trace, &schedule);
        assert_eq!(rows.len(), 9, "8 steps plus the initial state");
        // injections at days 1 and 3 land in the rows ending at 1.5 and 3.5
        let dosed: Vec<usize> = rows
            .iter()
            .filter(|r| r.dose_applied > 0.0)
            .map(|r| r.step)
            .collect();
        assert_eq!(dosed, vec![3, 7]);
        let total: f64 = rows.iter().map(|r| r.dose_applied).sum();
        assert!((total - 0.08).abs() < 1e-12, "both doses accounted once");
    }
}
