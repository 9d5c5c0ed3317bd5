//! Receding-horizon dose control.
//!
//! Two controllers share one loop skeleton. The surrogate controller fits
//! a lifted linear model from an identification run, solves the convex
//! lifted problem each step, and refits the model whenever its one-step
//! prediction drifts from the plant by more than an update tolerance. The
//! reference controller solves the full nonlinear problem each step with
//! the same horizon, weights and constraints; it needs no surrogate and
//! never updates anything.
//!
//! Both apply only the first step's decision, advance the true plant one
//! step, and slide the horizon — so modelling error is corrected by
//! feedback rather than accumulated over the whole treatment.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{
    solve_ocp_lifted_cached, solve_ocp_nonlinear, BfgsOptions, DoseMap, InputMap, OcpSpec,
    OutputPredictor, SolveReport,
};
use crate::edmd::{
    collect_snapshots, fit, observed_state, Dictionary, EdmdModel, InputEncoding, SnapshotSet,
};
use crate::error::{Error, Result};
use crate::plant::{self, hemoglobin, steady_state, DoseSchedule, PlantParams, PlantState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which controller drives the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MpcMode {
    /// Surrogate controller, concentration-encoded input.
    EdmdC,
    /// Surrogate controller, dose-encoded input.
    EdmdD,
    /// Full nonlinear solves against the plant itself.
    Nonlinear,
}

impl MpcMode {
    /// Input encoding of the surrogate variants; `None` for the
    /// model-free reference controller.
    pub fn encoding(self) -> Option<InputEncoding> {
        match self {
            MpcMode::EdmdC => Some(InputEncoding::Concentration),
            MpcMode::EdmdD => Some(InputEncoding::Dose),
            MpcMode::Nonlinear => None,
        }
    }

    /// Default dictionary depth: the dose encoding needs a deeper basis
    /// because the injection impulse is harder to express than the smooth
    /// concentration signal.
    pub fn default_depth(self) -> usize {
        match self {
            MpcMode::EdmdC => 2,
            MpcMode::EdmdD => 6,
            MpcMode::Nonlinear => 0,
        }
    }

    /// Default fit truncation for the closed loop. The dose encoding gets
    /// a much heavier cutoff: its sparse impulse inputs carry little
    /// energy next to the unresolved upstream state, and the weakly
    /// determined directions a light cutoff keeps absorb the dose
    /// response with the wrong long-horizon sign. The concentration
    /// encoding is better conditioned and keeps more of the spectrum.
    pub fn default_svd_tol(self) -> f64 {
        match self {
            MpcMode::EdmdC => 1e-6,
            MpcMode::EdmdD => 1e-3,
            MpcMode::Nonlinear => 1e-10,
        }
    }
}

impl std::fmt::Display for MpcMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MpcMode::EdmdC => "edmd-c",
            MpcMode::EdmdD => "edmd-d",
            MpcMode::Nonlinear => "nonlinear",
        })
    }
}

impl std::str::FromStr for MpcMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edmd-c" => Ok(MpcMode::EdmdC),
            "edmd-d" => Ok(MpcMode::EdmdD),
            "nonlinear" => Ok(MpcMode::Nonlinear),
            other => Err(Error::Format(format!(
                "unknown controller mode '{other}' (expected edmd-c, edmd-d or nonlinear)"
            ))),
        }
    }
}

/// Loop configuration: horizon, update policy and solver knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcConfig {
    pub mode: MpcMode,
    /// Prediction horizon M in steps; the window spans `M·dt` days.
    pub horizon_steps: usize,
    /// Number of closed-loop steps to run (T/dt).
    pub total_steps: usize,
    /// Update tolerance on the one-step surrogate error; `INFINITY`
    /// disables updates, `0.0` fires on any nonzero error.
    pub tau_upd: f64,
    /// Refit window length in steps.
    pub m_edmd: usize,
    /// Snapshot count of the identification run that seeds the model.
    pub n_init_snapshots: usize,
    /// Dictionary depth N_L.
    pub n_l: usize,
    /// Relative singular-value cutoff for the fits.
    pub svd_tol: f64,
    /// Seed of the dithered identification doses.
    pub seed: u64,
    /// Shift the previous optimum one step as the next initial guess.
    pub warm_start: bool,
    /// Append refit windows to the retained snapshot set instead of
    /// replacing the training data.
    pub append_refit: bool,
    /// Half-open time windows `[lo, hi)` during which injections are
    /// impossible; dose variables falling inside are clamped to zero.
    pub skip_windows: Vec<(f64, f64)>,
    pub bfgs: BfgsOptions,
}

impl MpcConfig {
    /// Desk-scale defaults for a given controller; the caller still picks
    /// `total_steps`.
    pub fn new(mode: MpcMode, total_steps: usize) -> Self {
        MpcConfig {
            mode,
            horizon_steps: 28,
            total_steps,
            tau_upd: 0.01,
            m_edmd: 30,
            n_init_snapshots: 120,
            n_l: mode.default_depth().max(1),
            svd_tol: mode.default_svd_tol(),
            seed: 42,
            warm_start: true,
            append_refit: false,
            skip_windows: Vec::new(),
            bfgs: BfgsOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 || self.total_steps == 0 {
            return Err(Error::InvalidParameter(
                "horizon and total steps must be >= 1".into(),
            ));
        }
        if !(self.tau_upd >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "update tolerance must be >= 0, got {}",
                self.tau_upd
            )));
        }
        if self.mode != MpcMode::Nonlinear {
            if self.m_edmd == 0 || self.n_init_snapshots == 0 || self.n_l == 0 {
                return Err(Error::InvalidParameter(
                    "surrogate controllers need m_edmd, n_init_snapshots and n_l >= 1".into(),
                ));
            }
            if !(self.svd_tol > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "svd_tol must be positive, got {}",
                    self.svd_tol
                )));
            }
        }
        for &(lo, hi) in &self.skip_windows {
            if !(lo < hi) || lo < 0.0 {
                return Err(Error::Range(format!(
                    "skip window [{lo}, {hi}) is empty or negative"
                )));
            }
        }
        Ok(())
    }
}

/// Cost weights shared by every horizon problem in a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcpWeights {
    /// Quadratic penalty γ on each dose variable.
    pub dose_weight: f64,
    /// Tracking weight σ_ω on the output error integral.
    pub track_weight: f64,
    /// Terminal weight σ_f on the final output error.
    pub term_weight: f64,
    /// Output target P^d.
    pub target: f64,
}

impl Default for OcpWeights {
    fn default() -> Self {
        OcpWeights {
            dose_weight: 0.05,
            track_weight: 1.0,
            term_weight: 0.5,
            target: 5.0,
        }
    }
}

/// One closed-loop step of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcRecord {
    /// Step start time t_i.
    pub t: f64,
    /// Dose actually injected during `[t_i, t_{i+1})`; zero when no
    /// injection was due.
    pub dose_applied: f64,
    /// Plant state at t_{i+1}, after the step.
    pub state_after: PlantState,
    /// Surrogate one-step prediction of the observed state at t_{i+1};
    /// `None` for the nonlinear controller.
    pub surrogate_prediction: Option<DVector<f64>>,
    /// Relative one-step prediction error (zero for the nonlinear
    /// controller, which has no surrogate).
    pub error_norm: f64,
    /// Whether this step's error triggered a model refit.
    pub update_fired: bool,
    /// Wall-clock seconds spent in this step's horizon solve.
    pub solve_wall_seconds: f64,
    /// Whether that solve reached its stationarity tolerance.
    pub solve_converged: bool,
}

/// Full closed-loop run: per-step records plus the output trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MpcTrace {
    /// One record per step, `total_steps` of them.
    pub records: Vec<MpcRecord>,
    /// Tracked output at every grid time, `total_steps + 1` values
    /// starting at the initial state.
    pub outputs: Vec<f64>,
    /// Wall-clock seconds of the identification run and initial fit
    /// (zero for the nonlinear controller).
    pub init_wall_seconds: f64,
    /// Cumulative wall-clock seconds spent refitting the surrogate.
    pub update_wall_seconds: f64,
}

impl MpcTrace {
    /// Total solver wall time across all steps.
    pub fn solve_wall_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.solve_wall_seconds).sum()
    }

    /// Everything the controller cost: solves plus identification and
    /// refits.
    pub fn inclusive_wall_seconds(&self) -> f64 {
        self.solve_wall_seconds() + self.init_wall_seconds + self.update_wall_seconds
    }

    /// Doses applied per step (zeros where no injection was due).
    pub fn doses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dose_applied).collect()
    }
}

/// Relative one-step prediction error `‖y_plant − ŷ‖ / ‖y_plant‖`,
/// falling back to the absolute error when the plant state is numerically
/// zero.
pub fn surrogate_error(y_plant: &DVector<f64>, y_surrogate: &DVector<f64>) -> f64 {
    assert_eq!(
        y_plant.len(),
        y_surrogate.len(),
        "prediction error needs equal lengths"
    );
    let denom = y_plant.norm();
    let diff = (y_plant - y_surrogate).norm();
    if denom < 1e-12 {
        diff
    } else {
        diff / denom
    }
}

/// Update decision: fire iff the error strictly exceeds the tolerance.
pub fn update_trigger(y_plant: &DVector<f64>, y_surrogate: &DVector<f64>, tau_upd: f64) -> bool {
    surrogate_error(y_plant, y_surrogate) > tau_upd
}

/// Dithered identification schedule: the template's injection times
/// restricted to the snapshot window, with amplitudes drawn uniformly
/// from `[0, u_max]`. Dosing stays on the clinical appointment grid so
/// the identification trajectory explores the same regime the controller
/// later operates in; the dithering provides the excitation the
/// regression needs.
fn identification_schedule(
    template: &DoseSchedule,
    dt: f64,
    n_snapshots: usize,
    seed: u64,
) -> DoseSchedule {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window_end = n_snapshots as f64 * dt;
    let times: Vec<f64> = template
        .times()
        .iter()
        .copied()
        .filter(|&tj| tj < window_end)
        .collect();
    let doses: Vec<f64> = (0..times.len())
        .map(|_| rng.gen_range(0.0..=template.u_max()))
        .collect();
    DoseSchedule::new_unchecked(times, doses, template.u_max())
}

/// Seed the surrogate: run the dithered identification experiment from
/// `state0` and fit the lifted model on its snapshots. The template
/// should cover the window `[0, n_init_snapshots·dt)`; appointments
/// beyond its end simply leave the tail of the window unforced. Returns
/// the model together with the snapshot set (kept for append-mode
/// refits).
pub fn init_edmd_model(
    params: &PlantParams,
    state0: &PlantState,
    template: &DoseSchedule,
    config: &MpcConfig,
) -> Result<(EdmdModel, SnapshotSet)> {
    let encoding = config.mode.encoding().ok_or_else(|| Error::ModeMismatch {
        model: "nonlinear".into(),
        problem: "surrogate initialization".into(),
    })?;
    let dictionary = Dictionary::legendre(params.grid.n, config.n_l, params.omega5)?;
    let schedule =
        identification_schedule(template, params.dt, config.n_init_snapshots, config.seed);
    let snapshots = collect_snapshots(
        params,
        state0,
        &schedule,
        config.n_init_snapshots,
        encoding,
        &dictionary,
    )?;
    let model = fit(&snapshots, &dictionary, config.svd_tol)?;
    Ok((model, snapshots))
}

/// Dose variables visible from `t0`: template times inside the horizon
/// window, with bounds clamped to zero inside skip windows.
fn horizon_doses(
    template: &DoseSchedule,
    config: &MpcConfig,
    t0: f64,
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    let t_end = t0 + config.horizon_steps as f64 * dt;
    let mut times = Vec::new();
    let mut bounds = Vec::new();
    for &tj in template.times() {
        if tj >= t0 && tj < t_end {
            let skipped = config
                .skip_windows
                .iter()
                .any(|&(lo, hi)| tj >= lo && tj < hi);
            times.push(tj);
            bounds.push(if skipped { 0.0 } else { template.u_max() });
        }
    }
    (times, bounds)
}

/// Initial guess: carry over the previous optimum by injection time, fill
/// newly visible variables with the previous last value, and project.
fn warm_start_guess(
    times: &[f64],
    bounds: &[f64],
    prev_times: &[f64],
    prev_u: &DVector<f64>,
) -> DVector<f64> {
    let tail = if prev_u.len() > 0 {
        prev_u[prev_u.len() - 1]
    } else {
        0.0
    };
    let raw = DVector::from_fn(times.len(), |j, _| {
        prev_times
            .iter()
            .position(|&pt| pt == times[j])
            .map_or(tail, |p| prev_u[p])
    });
    crate::control::project_box(&raw, bounds)
}

fn ocp_spec(
    weights: &OcpWeights,
    config: &MpcConfig,
    dt: f64,
    bounds: Vec<f64>,
    dose_map: DoseMap,
) -> OcpSpec {
    OcpSpec {
        horizon_steps: config.horizon_steps,
        dose_weights: vec![weights.dose_weight; bounds.len()],
        track_weight: weights.track_weight,
        term_weight: weights.term_weight,
        target: weights.target,
        dose_map,
        upper_bounds: bounds,
        dt,
    }
}

/// Solve one horizon, tolerating a stalled line search: the guess (already
/// feasible) is kept and the step is marked non-converged instead of
/// aborting the whole run.
fn solve_step<S>(solve: S, u_init: &DVector<f64>) -> Result<(SolveReport, f64)>
where
    S: FnOnce() -> Result<SolveReport>,
{
    let clock = Instant::now();
    let outcome = solve();
    let wall = clock.elapsed().as_secs_f64();
    match outcome {
        Ok(report) => Ok((report, wall)),
        Err(Error::LineSearchFailure(_)) => Ok((
            SolveReport {
                minimizer: u_init.clone(),
                objective: f64::NAN,
                proj_grad_norm: f64::NAN,
                iterations: 0,
                converged: false,
                objective_history: Vec::new(),
            },
            wall,
        )),
        Err(e) => Err(e),
    }
}

/// Index of the dose variable injected during the first step, if any.
fn first_step_dose(times: &[f64], t0: f64, dt: f64) -> Option<usize> {
    times.iter().position(|&tj| tj >= t0 && tj < t0 + dt)
}

/// Run the surrogate-driven loop. The schedule template fixes the
/// injection times and the dose cap; its amplitudes are ignored — they
/// are the decision variables. Returns the closed-loop trace and the
/// model as of the final step (useful for persistence and diagnostics).
///
/// Each step solves the convex lifted problem over `[t_i, t_i + M·dt]`,
/// injects the first decision, advances the true plant, and compares the
/// surrogate's one-step prediction against the measured state; an error
/// above `tau_upd` triggers a refit on `m_edmd` steps simulated under the
/// just-planned doses. Runs are deterministic for a fixed seed.
pub fn run_edmd_mpc(
    params: &PlantParams,
    schedule_template: &DoseSchedule,
    config: &MpcConfig,
    weights: &OcpWeights,
) -> Result<(MpcTrace, EdmdModel)> {
    params.validate()?;
    config.validate()?;
    let encoding = config.mode.encoding().ok_or_else(|| Error::ModeMismatch {
        model: "nonlinear".into(),
        problem: "run_edmd_mpc".into(),
    })?;
    let dt = params.dt;
    let u_max = schedule_template.u_max();
    let state0 = steady_state(params, params.e_base)?;

    let init_clock = Instant::now();
    let (mut model, init_snapshots) = init_edmd_model(params, &state0, schedule_template, config)?;
    let init_wall_seconds = init_clock.elapsed().as_secs_f64();
    let mut retained = if config.append_refit {
        Some(init_snapshots)
    } else {
        None
    };
    // the output impulse response only changes when the model does
    let mut predictor = OutputPredictor::new(&model, config.horizon_steps);

    let mut state = state0;
    let mut history_times: Vec<f64> = Vec::new();
    let mut history_doses: Vec<f64> = Vec::new();
    let mut prev_times: Vec<f64> = Vec::new();
    let mut prev_u = DVector::zeros(0);
    let mut records = Vec::with_capacity(config.total_steps);
    let mut outputs = vec![hemoglobin(params, &state)];
    let mut update_wall_seconds = 0.0;

    for _ in 0..config.total_steps {
        let t_i = state.t;
        let (times, bounds) = horizon_doses(schedule_template, config, t_i, dt);
        let history = DoseSchedule::new_unchecked(
            history_times.clone(),
            history_doses.clone(),
            u_max,
        );

        let map = match encoding {
            InputEncoding::Dose => {
                InputMap::doses(params, t_i, config.horizon_steps, &times)?
            }
            InputEncoding::Concentration => InputMap::concentration(
                params,
                &history,
                t_i,
                config.horizon_steps,
                &times,
            )?,
        };
        let spec = ocp_spec(weights, config, dt, bounds.clone(), DoseMap::Lifted(map));
        let z0 = model.dictionary.lift(&observed_state(&state))?;
        let u_init = if config.warm_start {
            warm_start_guess(&times, &bounds, &prev_times, &prev_u)
        } else {
            DVector::zeros(times.len())
        };

        let (report, solve_wall_seconds) = solve_step(
            || solve_ocp_lifted_cached(&predictor, &model, &spec, &z0, &u_init, &config.bfgs),
            &u_init,
        )?;
        let u_opt = report.minimizer.clone();

        // inject the first step's decision (if an appointment is due now)
        let due = first_step_dose(&times, t_i, dt);
        let dose_applied = due.map_or(0.0, |j| u_opt[j]);
        if due.is_some() {
            history_times.push(times[due.unwrap()]);
            history_doses.push(dose_applied);
        }
        let applied = DoseSchedule::new_unchecked(
            history_times.clone(),
            history_doses.clone(),
            u_max,
        );
        let state_next = plant::plant_step(params, &state, &applied)?;

        // one-step surrogate prediction under the same first input
        let in_0 = match &spec.dose_map {
            DoseMap::Lifted(map) => map.base[0] + (map.gain.row(0) * &u_opt)[0],
            DoseMap::PlantTimes { .. } => unreachable!("lifted loop builds lifted maps"),
        };
        let z1 = &model.a * &z0 + &model.b * in_0;
        let y_hat = &model.c * &z1;
        let y_plant = observed_state(&state_next);
        let error_norm = surrogate_error(&y_plant, &y_hat);
        let update_fired = error_norm > config.tau_upd;

        if update_fired {
            let update_clock = Instant::now();
            // refit on snapshots simulated under the plan we just made
            let mut plan_times = history_times.clone();
            let mut plan_doses = history_doses.clone();
            for (j, &tj) in times.iter().enumerate() {
                if Some(j) != due {
                    plan_times.push(tj);
                    plan_doses.push(u_opt[j]);
                }
            }
            let plan = DoseSchedule::new_unchecked(plan_times, plan_doses, u_max);
            let window = collect_snapshots(
                params,
                &state,
                &plan,
                config.m_edmd,
                encoding,
                &model.dictionary,
            )?;
            let training = match retained.as_mut() {
                Some(kept) => {
                    *kept = kept.concat(&window)?;
                    kept.clone()
                }
                None => window,
            };
            model = fit(&training, &model.dictionary, config.svd_tol)?;
            predictor = OutputPredictor::new(&model, config.horizon_steps);
            update_wall_seconds += update_clock.elapsed().as_secs_f64();
        }

        outputs.push(hemoglobin(params, &state_next));
        records.push(MpcRecord {
            t: t_i,
            dose_applied,
            state_after: state_next.clone(),
            surrogate_prediction: Some(y_hat),
            error_norm,
            update_fired,
            solve_wall_seconds,
            solve_converged: report.converged,
        });
        prev_times = times;
        prev_u = u_opt;
        state = state_next;
    }

    Ok((
        MpcTrace {
            records,
            outputs,
            init_wall_seconds,
            update_wall_seconds,
        },
        model,
    ))
}

/// Run the reference loop: identical horizon, weights and constraints,
/// but every step solves the full nonlinear problem against the plant.
/// No surrogate exists, so prediction errors and updates never appear in
/// the trace.
pub fn run_nonlinear_mpc(
    params: &PlantParams,
    schedule_template: &DoseSchedule,
    config: &MpcConfig,
    weights: &OcpWeights,
) -> Result<MpcTrace> {
    params.validate()?;
    config.validate()?;
    if config.mode != MpcMode::Nonlinear {
        return Err(Error::ModeMismatch {
            model: config.mode.to_string(),
            problem: "run_nonlinear_mpc".into(),
        });
    }
    let dt = params.dt;
    let u_max = schedule_template.u_max();
    let mut state = steady_state(params, params.e_base)?;

    // forward differences cap the attainable stationarity near sqrt(eps)
    let mut bfgs = config.bfgs.clone();
    bfgs.tol = bfgs.tol.max(1e-6);

    let mut history_times: Vec<f64> = Vec::new();
    let mut history_doses: Vec<f64> = Vec::new();
    let mut prev_times: Vec<f64> = Vec::new();
    let mut prev_u = DVector::zeros(0);
    let mut records = Vec::with_capacity(config.total_steps);
    let mut outputs = vec![hemoglobin(params, &state)];

    for _ in 0..config.total_steps {
        let t_i = state.t;
        let (times, bounds) = horizon_doses(schedule_template, config, t_i, dt);
        let history = DoseSchedule::new_unchecked(
            history_times.clone(),
            history_doses.clone(),
            u_max,
        );
        let spec = ocp_spec(
            weights,
            config,
            dt,
            bounds.clone(),
            DoseMap::PlantTimes {
                times: times.clone(),
                history,
            },
        );
        let u_init = if config.warm_start {
            warm_start_guess(&times, &bounds, &prev_times, &prev_u)
        } else {
            DVector::zeros(times.len())
        };

        let (report, solve_wall_seconds) = solve_step(
            || solve_ocp_nonlinear(params, &spec, &state, &u_init, &bfgs),
            &u_init,
        )?;
        let u_opt = report.minimizer.clone();

        let due = first_step_dose(&times, t_i, dt);
        let dose_applied = due.map_or(0.0, |j| u_opt[j]);
        if due.is_some() {
            history_times.push(times[due.unwrap()]);
            history_doses.push(dose_applied);
        }
        let applied = DoseSchedule::new_unchecked(
            history_times.clone(),
            history_doses.clone(),
            u_max,
        );
        let state_next = plant::plant_step(params, &state, &applied)?;

        outputs.push(hemoglobin(params, &state_next));
        records.push(MpcRecord {
            t: t_i,
            dose_applied,
            state_after: state_next.clone(),
            surrogate_prediction: None,
            error_norm: 0.0,
            update_fired: false,
            solve_wall_seconds,
            solve_converged: report.converged,
        });
        prev_times = times;
        prev_u = u_opt;
        state = state_next;
    }

    Ok(MpcTrace {
        records,
        outputs,
        init_wall_seconds: 0.0,
        update_wall_seconds: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights() -> OcpWeights {
        OcpWeights {
            dose_weight: 0.05,
            track_weight: 1.0,
            term_weight: 0.5,
            target: 3.0,
        }
    }

    /// Injection times on days 1, 3 and 5 of each week over `[0, t_end)`.
    fn weekly_template(t_end: f64, u_max: f64) -> DoseSchedule {
        let mut times = Vec::new();
        let mut week = 0.0;
        while week < t_end {
            for day in [1.0, 3.0, 5.0] {
                let t = week + day;
                if t < t_end {
                    times.push(t);
                }
            }
            week += 7.0;
        }
        let doses = vec![0.0; times.len()];
        DoseSchedule::new(times, doses, u_max).unwrap()
    }

    /// Small, fast surrogate configuration for unit tests.
    fn small_config(mode: MpcMode, total_steps: usize) -> MpcConfig {
        let mut c = MpcConfig::new(mode, total_steps);
        c.horizon_steps = 8;
        c.n_l = 2;
        c.n_init_snapshots = 80;
        c.m_edmd = 16;
        c
    }

    #[test]
    fn trigger_examples() {
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(!update_trigger(&y, &y, 0.01), "identical states never fire");
        let inflated = &y * 1.02;
        assert!(update_trigger(&y, &inflated, 0.01), "2% error > 1% fires");
        let close = &y * 1.005;
        assert!(!update_trigger(&y, &close, 0.01), "0.5% error stays quiet");
        // absolute fallback at numerically zero plant states
        let zero = DVector::zeros(3);
        let tiny = DVector::from_vec(vec![0.0, 0.0, 0.02]);
        assert!(update_trigger(&zero, &tiny, 0.01));
        assert!(!update_trigger(&zero, &(&tiny * 0.1), 0.01));
    }

    #[test]
    fn infinite_tolerance_never_updates_and_keeps_the_model() {
        let params = PlantParams::default();
        let template = weekly_template(8.0, 0.25);
        let mut config = small_config(MpcMode::EdmdD, 8);
        config.tau_upd = f64::INFINITY;
        let (trace, final_model) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        assert!(trace.records.iter().all(|r| !r.update_fired));
        assert_eq!(trace.update_wall_seconds, 0.0);

        // without updates the returned model is the initial fit, bit for bit
        let state0 = steady_state(&params, params.e_base).unwrap();
        let (initial, _) = init_edmd_model(&params, &state0, &template, &config).unwrap();
        assert_eq!(final_model.a, initial.a);
        assert_eq!(final_model.b, initial.b);
        assert_eq!(final_model.c, initial.c);
    }

    #[test]
    fn zero_tolerance_updates_whenever_the_error_is_nonzero() {
        let params = PlantParams::default();
        let template = weekly_template(8.0, 0.25);
        let mut config = small_config(MpcMode::EdmdD, 6);
        config.tau_upd = 0.0;
        let (trace, _) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        for r in &trace.records {
            assert_eq!(r.update_fired, r.error_norm > 0.0);
        }
        assert!(
            trace.records.iter().any(|r| r.update_fired),
            "a surrogate of a nonlinear plant cannot be exact at every step"
        );
    }

    #[test]
    fn zero_dose_cap_reduces_to_the_uncontrolled_plant() {
        let params = PlantParams::default();
        let template = weekly_template(8.0, 0.0);
        let config = small_config(MpcMode::EdmdD, 8);
        let (trace, _) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        assert!(trace.records.iter().all(|r| r.dose_applied == 0.0));

        let state0 = steady_state(&params, params.e_base).unwrap();
        let free = plant::simulate(&params, &state0, &DoseSchedule::empty(0.0), 8).unwrap();
        assert_eq!(trace.outputs, free.outputs, "dose-free runs must coincide");

        let mut nl_config = small_config(MpcMode::Nonlinear, 8);
        nl_config.mode = MpcMode::Nonlinear;
        let nl = run_nonlinear_mpc(&params, &template, &nl_config, &weights()).unwrap();
        assert_eq!(nl.outputs, free.outputs);
    }

    #[test]
    fn fixed_seeds_reproduce_traces_exactly() {
        let params = PlantParams::default();
        let template = weekly_template(8.0, 0.25);
        let config = small_config(MpcMode::EdmdC, 8);
        let (a, model_a) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        let (b, model_b) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(a.doses(), b.doses());
        assert_eq!(model_a.a, model_b.a);

        let nl_config = small_config(MpcMode::Nonlinear, 6);
        let na = run_nonlinear_mpc(&params, &template, &nl_config, &weights()).unwrap();
        let nb = run_nonlinear_mpc(&params, &template, &nl_config, &weights()).unwrap();
        assert_eq!(na.outputs, nb.outputs);
        assert_eq!(na.doses(), nb.doses());
    }

    #[test]
    fn warm_start_changes_work_not_answers() {
        let params = PlantParams::default();
        let template = weekly_template(8.0, 0.25);
        let mut config = small_config(MpcMode::EdmdD, 10);
        config.warm_start = true;
        let (warm, _) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        config.warm_start = false;
        let (cold, _) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        for (pw, pc) in warm.outputs.iter().zip(&cold.outputs) {
            assert!(
                (pw - pc).abs() <= 1e-6,
                "warm and cold starts disagree: {pw} vs {pc}"
            );
        }
    }

    #[test]
    fn trace_shapes_and_feasibility() {
        let params = PlantParams::default();
        let template = weekly_template(10.0, 0.25);
        let config = small_config(MpcMode::EdmdD, 12);
        let (trace, _) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        assert_eq!(trace.records.len(), 12);
        assert_eq!(trace.outputs.len(), 13);
        for (i, r) in trace.records.iter().enumerate() {
            assert!((r.t - i as f64 * params.dt).abs() < 1e-9);
            assert!(r.dose_applied >= 0.0 && r.dose_applied <= 0.25);
            assert!(r.error_norm >= 0.0);
            assert!(r.surrogate_prediction.is_some());
        }
        assert!(trace.init_wall_seconds > 0.0);
        // doses are only applied at template injection times
        for r in &trace.records {
            if r.dose_applied > 0.0 {
                assert!(template
                    .times()
                    .iter()
                    .any(|&tj| tj >= r.t && tj < r.t + params.dt));
            }
        }
    }

    #[test]
    fn skip_windows_clamp_injections_to_zero() {
        let params = PlantParams::default();
        let template = weekly_template(10.0, 0.25);
        let mut config = small_config(MpcMode::EdmdD, 14);
        config.skip_windows = vec![(2.0, 6.0)];
        let (trace, _) = run_edmd_mpc(&params, &template, &config, &weights()).unwrap();
        for r in &trace.records {
            if r.t >= 2.0 - 1e-9 && r.t < 6.0 {
                assert_eq!(r.dose_applied, 0.0, "skipped appointment at t = {}", r.t);
            }
        }
        // the days-1 injection before the window is still allowed
        let first = &trace.records[2];
        assert!((first.t - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nonlinear_first_dose_matches_a_direct_solve() {
        let params = PlantParams::default();
        let template = DoseSchedule::new(vec![0.0], vec![0.0], 0.25).unwrap();
        let mut config = small_config(MpcMode::Nonlinear, 1);
        config.horizon_steps = 6;
        config.warm_start = false;
        let trace = run_nonlinear_mpc(&params, &template, &config, &weights()).unwrap();

        // rebuild the very same first-horizon problem by hand
        let state0 = steady_state(&params, params.e_base).unwrap();
        let spec = OcpSpec {
            horizon_steps: 6,
            dose_weights: vec![weights().dose_weight],
            track_weight: weights().track_weight,
            term_weight: weights().term_weight,
            target: weights().target,
            dose_map: DoseMap::PlantTimes {
                times: vec![0.0],
                history: DoseSchedule::empty(0.25),
            },
            upper_bounds: vec![0.25],
            dt: params.dt,
        };
        let mut bfgs = config.bfgs.clone();
        bfgs.tol = bfgs.tol.max(1e-6);
        let direct =
            solve_ocp_nonlinear(&params, &spec, &state0, &DVector::zeros(1), &bfgs).unwrap();
        assert_eq!(trace.records[0].dose_applied, direct.minimizer[0]);
    }

    #[test]
    fn mode_checks_are_enforced() {
        let params = PlantParams::default();
        let template = weekly_template(8.0, 0.25);
        let nl = small_config(MpcMode::Nonlinear, 4);
        assert!(matches!(
            run_edmd_mpc(&params, &template, &nl, &weights()),
            Err(Error::ModeMismatch { .. })
        ));
        let ed = small_config(MpcMode::EdmdD, 4);
        assert!(matches!(
            run_nonlinear_mpc(&params, &template, &ed, &weights()),
            Err(Error::ModeMismatch { .. })
        ));
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [MpcMode::EdmdC, MpcMode::EdmdD, MpcMode::Nonlinear] {
            let s = mode.to_string();
            assert_eq!(s.parse::<MpcMode>().unwrap(), mode);
        }
        assert!("edmd-x".parse::<MpcMode>().is_err());
        // serde uses the same spelling as Display/FromStr
        let json = serde_json::to_string(&MpcMode::EdmdC).unwrap();
        assert_eq!(json, "\"edmd-c\"");
    }

    #[test]
    fn config_validation_rejects_degenerate_setups() {
        let mut c = MpcConfig::new(MpcMode::EdmdD, 10);
        c.horizon_steps = 0;
        assert!(c.validate().is_err());
        let mut c = MpcConfig::new(MpcMode::EdmdD, 10);
        c.tau_upd = -1.0;
        assert!(c.validate().is_err());
        let mut c = MpcConfig::new(MpcMode::EdmdD, 10);
        c.skip_windows = vec![(5.0, 5.0)];
        assert!(c.validate().is_err());
        let mut c = MpcConfig::new(MpcMode::EdmdD, 10);
        c.n_l = 0;
        assert!(c.validate().is_err());
        // the nonlinear controller ignores surrogate knobs
        let mut c = MpcConfig::new(MpcMode::Nonlinear, 10);
        c.n_l = 0;
        assert!(c.validate().is_ok());
    }
}
