//! Finite-horizon dose optimization.
//!
//! The cost is the trapezoidal discretization of a tracking functional plus
//! a quadratic dose penalty. Two objective backends share one solver:
//!
//! - the LIFTED path rolls the fitted linear surrogate and differentiates
//!   exactly through it with an adjoint recursion;
//! - the NONLINEAR path simulates the full plant and uses forward finite
//!   differences (the dose count per horizon is small).
//!
//! The solver is a projected BFGS: gradient projection onto the box
//! `0 ≤ u_j ≤ ub_j` with a quasi-Newton model maintained on the free
//! variables and Armijo backtracking along the projection arc.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::edmd::{EdmdModel, InputEncoding};
use crate::error::{Error, Result};
use crate::plant::{self, DoseSchedule, PkModel, PlantParams, PlantState};

/// Affine map from the horizon's dose variables to the surrogate's input
/// signal: `in_k = base_k + Σ_j gain[k][j] u_j` for `k = 0..M−1`.
///
/// For the dose encoding the base is zero and the gain is an indicator of
/// which step contains each injection time. For the concentration encoding
/// the base carries the baseline plus the tails of already-applied doses,
/// and the gain holds the unit-dose response kernels; that construction
/// requires the linear dose model — a saturable elimination makes the
/// concentration nonlinear in the doses, and no affine map exists.
#[derive(Debug, Clone, PartialEq)]
pub struct InputMap {
    pub mode: InputEncoding,
    pub base: DVector<f64>,
    pub gain: DMatrix<f64>,
}

impl InputMap {
    /// Build the map for the dose-impulse encoding: dose `j` enters the
    /// input at the step whose window `[t_k, t_{k+1})` contains its
    /// injection time.
    pub fn doses(
        params: &PlantParams,
        t0: f64,
        horizon_steps: usize,
        dose_times: &[f64],
    ) -> Result<InputMap> {
        let gain = DMatrix::from_fn(horizon_steps, dose_times.len(), |k, j| {
            let t_k = t0 + k as f64 * params.dt;
            if dose_times[j] >= t_k && dose_times[j] < t_k + params.dt {
                1.0
            } else {
                0.0
            }
        });
        for (j, &tj) in dose_times.iter().enumerate() {
            if gain.column(j).iter().all(|&g| g == 0.0) {
                return Err(Error::Range(format!(
                    "dose variable {j} (t = {tj}) lies outside the horizon \
                     [{t0}, {})",
                    t0 + horizon_steps as f64 * params.dt
                )));
            }
        }
        Ok(InputMap {
            mode: InputEncoding::Dose,
            base: DVector::zeros(horizon_steps),
            gain,
        })
    }

    /// Build the map for the concentration encoding. `history` holds the
    /// injections already applied (their tails are fixed); the decision
    /// doses contribute through the unit-dose response kernel.
    pub fn concentration(
        params: &PlantParams,
        history: &DoseSchedule,
        t0: f64,
        horizon_steps: usize,
        dose_times: &[f64],
    ) -> Result<InputMap> {
        if let PkModel::MichaelisMenten { .. } = params.pk {
            return Err(Error::InvalidParameter(
                "the concentration encoding needs the linear dose model; with \
                 Michaelis-Menten elimination the concentration is not affine \
                 in the doses (use the dose encoding or the nonlinear solver)"
                    .into(),
            ));
        }
        let base = DVector::from_fn(horizon_steps, |k, _| {
            plant::epo_concentration(params, history, t0 + k as f64 * params.dt)
        });
        let gain = DMatrix::from_fn(horizon_steps, dose_times.len(), |k, j| {
            plant::bateman_kernel(params, t0 + k as f64 * params.dt - dose_times[j])
        });
        for (j, &tj) in dose_times.iter().enumerate() {
            if tj < t0 || tj >= t0 + horizon_steps as f64 * params.dt {
                return Err(Error::Range(format!(
                    "dose variable {j} (t = {tj}) lies outside the horizon"
                )));
            }
        }
        Ok(InputMap {
            mode: InputEncoding::Concentration,
            base,
            gain,
        })
    }
}

/// How the dose variables reach the dynamics.
#[derive(Debug, Clone, PartialEq)]
pub enum DoseMap {
    /// Affine map into the surrogate input signal (lifted solves).
    Lifted(InputMap),
    /// Injection times of the decision variables plus the already-applied
    /// schedule whose concentration tails still act on the plant
    /// (nonlinear solves).
    PlantTimes {
        times: Vec<f64>,
        history: DoseSchedule,
    },
}

impl DoseMap {
    fn n_u(&self) -> usize {
        match self {
            DoseMap::Lifted(map) => map.gain.ncols(),
            DoseMap::PlantTimes { times, .. } => times.len(),
        }
    }
}

/// One finite-horizon problem: weights, target, horizon and dose layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpSpec {
    /// Number of time steps M in the horizon; outputs run over 0..=M.
    pub horizon_steps: usize,
    /// Quadratic dose penalty γ_j per decision variable.
    pub dose_weights: Vec<f64>,
    /// Tracking weight σ_ω on the trapezoidal output error integral.
    pub track_weight: f64,
    /// Terminal weight σ_f on the final output error.
    pub term_weight: f64,
    /// Output target P^d.
    pub target: f64,
    pub dose_map: DoseMap,
    /// Per-variable upper bound; the lower bound is always 0.
    pub upper_bounds: Vec<f64>,
    pub dt: f64,
}

impl OcpSpec {
    pub fn n_u(&self) -> usize {
        self.dose_weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_steps == 0 {
            return Err(Error::InvalidParameter("horizon must be >= 1 step".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        let n_u = self.dose_weights.len();
        if self.upper_bounds.len() != n_u || self.dose_map.n_u() != n_u {
            return Err(Error::LengthMismatch(format!(
                "dose layout disagrees: {} weights, {} bounds, {} mapped variables",
                n_u,
                self.upper_bounds.len(),
                self.dose_map.n_u()
            )));
        }
        if self.dose_weights.iter().any(|&g| g < 0.0)
            || self.track_weight < 0.0
            || self.term_weight < 0.0
        {
            return Err(Error::InvalidParameter(
                "cost weights must be nonnegative".into(),
            ));
        }
        let any_positive = self.track_weight > 0.0
            || self.term_weight > 0.0
            || self.dose_weights.iter().any(|&g| g > 0.0);
        if !any_positive {
            return Err(Error::InvalidParameter(
                "at least one cost weight must be strictly positive".into(),
            ));
        }
        if self.upper_bounds.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(Error::Range("upper bounds must be finite and >= 0".into()));
        }
        if let DoseMap::Lifted(map) = &self.dose_map {
            if map.gain.nrows() != self.horizon_steps || map.base.len() != self.horizon_steps {
                return Err(Error::InvalidDimension(format!(
                    "input map covers {} steps, horizon has {}",
                    map.gain.nrows(),
                    self.horizon_steps
                )));
            }
        }
        Ok(())
    }
}

/// Evaluate the discretized cost on a recorded output trace:
/// `½ Σ_j γ_j u_j² + (σ_ω/2)·Trap[(P_k − P^d)²] + (σ_f/2)(P_M − P^d)²`.
pub fn eval_cost(spec: &OcpSpec, outputs: &[f64], u: &DVector<f64>) -> Result<f64> {
    if outputs.len() != spec.horizon_steps + 1 {
        return Err(Error::LengthMismatch(format!(
            "output trace has {} entries, horizon needs {}",
            outputs.len(),
            spec.horizon_steps + 1
        )));
    }
    if u.len() != spec.n_u() {
        return Err(Error::LengthMismatch(format!(
            "{} doses for {} dose weights",
            u.len(),
            spec.n_u()
        )));
    }
    let mut j = 0.0;
    for (gamma, uj) in spec.dose_weights.iter().zip(u.iter()) {
        j += 0.5 * gamma * uj * uj;
    }
    let m = spec.horizon_steps;
    let mut trap = 0.0;
    for (k, &p) in outputs.iter().enumerate() {
        let w = if k == 0 || k == m { 0.5 } else { 1.0 };
        trap += w * (p - spec.target).powi(2);
    }
    j += 0.5 * spec.track_weight * spec.dt * trap;
    j += 0.5 * spec.term_weight * (outputs[m] - spec.target).powi(2);
    Ok(j)
}

/// Output functional row in lifted coordinates: the tracked scalar of the
/// reconstructed state, `P = ω₅^{1/2}(C z)₀`.
fn output_row(model: &EdmdModel) -> RowDVector<f64> {
    let w = match model.dictionary {
        crate::edmd::Dictionary::Identity { .. } => 1.0,
        crate::edmd::Dictionary::LegendreNormalized { omega5, .. } => omega5,
    };
    model.c.row(0) * w.sqrt()
}

/// Cost and exact gradient through the lifted linear dynamics.
///
/// Rolls `z_{k+1} = A z_k + B in_k` with the affine input map, evaluates
/// the cost on the reconstructed outputs, and backpropagates with the
/// adjoint recursion `μ_M = q_M wᵀ`, `μ_k = q_k wᵀ + Aᵀ μ_{k+1}`,
/// `∂J/∂in_k = Bᵀ μ_{k+1}`; the result is exact for this quadratic.
pub fn cost_and_gradient_lifted(
    model: &EdmdModel,
    spec: &OcpSpec,
    z0: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    spec.validate()?;
    let map = match &spec.dose_map {
        DoseMap::Lifted(map) => map,
        DoseMap::PlantTimes { .. } => {
            return Err(Error::ModeMismatch {
                model: format!("lifted ({})", model.mode),
                problem: "plant-time dose map".into(),
            })
        }
    };
    if map.mode != model.mode {
        return Err(Error::ModeMismatch {
            model: model.mode.to_string(),
            problem: map.mode.to_string(),
        });
    }
    if model.input_dim() != 1 {
        return Err(Error::InvalidDimension(format!(
            "lifted objective assumes a scalar input, model has d_u = {}",
            model.input_dim()
        )));
    }
    if z0.len() != model.lifted_dim() {
        return Err(Error::LengthMismatch(format!(
            "z0 has {} entries, model lifts to {}",
            z0.len(),
            model.lifted_dim()
        )));
    }
    if u.len() != spec.n_u() {
        return Err(Error::LengthMismatch(format!(
            "{} doses for {} dose variables",
            u.len(),
            spec.n_u()
        )));
    }

    let m = spec.horizon_steps;
    let inputs = &map.base + &map.gain * u;
    let w = output_row(model);

    // forward roll
    let mut zs = Vec::with_capacity(m + 1);
    zs.push(z0.clone());
    for k in 0..m {
        let z_next = &model.a * &zs[k] + &model.b * inputs[k];
        zs.push(z_next);
    }
    let outputs: Vec<f64> = zs.iter().map(|z| (&w * z)[0]).collect();
    let cost = eval_cost(spec, &outputs, u)?;

    // dJ/dP_k
    let q = |k: usize| -> f64 {
        let trap_w = if k == 0 || k == m { 0.5 } else { 1.0 };
        let mut qk = spec.track_weight * spec.dt * trap_w * (outputs[k] - spec.target);
        if k == m {
            qk += spec.term_weight * (outputs[m] - spec.target);
        }
        qk
    };

    // adjoint sweep
    let wt = w.transpose();
    let mut grad_in = DVector::zeros(m);
    let mut mu = &wt * q(m);
    for k in (0..m).rev() {
        grad_in[k] = (model.b.transpose() * &mu)[0];
        if k > 0 {
            mu = &wt * q(k) + model.a.transpose() * mu;
        }
    }

    let mut grad = map.gain.transpose() * grad_in;
    for (j, (gamma, uj)) in spec.dose_weights.iter().zip(u.iter()).enumerate() {
        grad[j] += gamma * uj;
    }
    Ok((cost, grad))
}

/// Componentwise clamp onto `[0, ub_j]`.
pub fn project_box(u: &DVector<f64>, upper_bounds: &[f64]) -> DVector<f64> {
    DVector::from_fn(u.len(), |j, _| u[j].clamp(0.0, upper_bounds[j]))
}

/// Solver knobs; the defaults match the documented tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOptions {
    /// Stationarity tolerance on ‖u − Proj(u − ∇J)‖.
    pub tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            tol: 1e-8,
            max_iter: 200,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
        }
    }
}

/// Solve outcome; the minimizer is feasible componentwise by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub minimizer: DVector<f64>,
    pub objective: f64,
    /// Final projected-gradient norm (the stationarity measure).
    pub proj_grad_norm: f64,
    /// Accepted iterations performed.
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at the start plus after every accepted step;
    /// non-increasing by the line-search contract.
    pub objective_history: Vec<f64>,
}

fn active_set(u: &DVector<f64>, g: &DVector<f64>, ub: &[f64]) -> Vec<bool> {
    const EPS: f64 = 1e-12;
    (0..u.len())
        .map(|j| (u[j] <= EPS && g[j] > 0.0) || (u[j] >= ub[j] - EPS && g[j] < 0.0))
        .collect()
}

/// Gradient-projection BFGS over the box `0 ≤ u_j ≤ ub_j`.
///
/// The inverse-Hessian model lives on the free variables (identity on the
/// active ones) and resets whenever the active set changes; curvature
/// pairs failing the positivity condition are skipped. Line search is
/// Armijo backtracking along the projection arc; when it stalls the solver
/// falls back to steepest descent once before reporting a line-search
/// failure.
pub fn projected_bfgs<F>(
    mut f_and_g: F,
    upper_bounds: &[f64],
    u_init: &DVector<f64>,
    opts: &BfgsOptions,
) -> Result<SolveReport>
where
    F: FnMut(&DVector<f64>) -> Result<(f64, DVector<f64>)>,
{
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "solver tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if !(opts.backtrack > 0.0 && opts.backtrack < 1.0) || !(opts.armijo_c > 0.0) {
        return Err(Error::InvalidParameter(
            "backtrack factor must lie in (0,1) and the Armijo constant must be positive".into(),
        ));
    }
    if u_init.len() != upper_bounds.len() {
        return Err(Error::LengthMismatch(format!(
            "{} initial doses for {} bounds",
            u_init.len(),
            upper_bounds.len()
        )));
    }

    let n = upper_bounds.len();
    let mut u = project_box(u_init, upper_bounds);
    let (mut fval, mut g) = f_and_g(&u)?;
    let mut history = vec![fval];

    if n == 0 {
        return Ok(SolveReport {
            minimizer: u,
            objective: fval,
            proj_grad_norm: 0.0,
            iterations: 0,
            converged: true,
            objective_history: history,
        });
    }

    let mut h = DMatrix::identity(n, n);

    for iter in 1..=opts.max_iter {
        let pg = (&u - project_box(&(&u - &g), upper_bounds)).norm();
        if pg <= opts.tol {
            return Ok(SolveReport {
                minimizer: u,
                objective: fval,
                proj_grad_norm: pg,
                iterations: iter - 1,
                converged: true,
                objective_history: history,
            });
        }

        let active = active_set(&u, &g, upper_bounds);

        // quasi-Newton step on the free variables, steepest descent on the
        // active ones (whose curvature the restricted updates never see)
        let mut g_free = g.clone();
        for (j, &a) in active.iter().enumerate() {
            if a {
                g_free[j] = 0.0;
            }
        }
        let mut d = -(&h * &g_free);
        for (j, &a) in active.iter().enumerate() {
            if a {
                d[j] = -g[j];
            }
        }

        let mut used_reset = false;
        let (u_new, f_new, g_new) = 'search: loop {
            let mut alpha = 1.0;
            let mut interpolated = false;
            for _ in 0..=opts.max_backtracks {
                let u_trial = project_box(&(&u + &d * alpha), upper_bounds);
                let step = &u_trial - &u;
                let slope = g.dot(&step);
                if step.norm() > 0.0 && slope <= 0.0 {
                    let (f_trial, g_trial) = f_and_g(&u_trial)?;
                    if f_trial <= fval + opts.armijo_c * slope {
                        break 'search (u_trial, f_trial, g_trial);
                    }
                    if !interpolated {
                        // secant-estimated curvature along the rejected
                        // segment gives the exact minimizing fraction for
                        // quadratics (our lifted objective) at no extra
                        // evaluation; fall back to halving afterwards
                        interpolated = true;
                        let curvature = step.dot(&(&g_trial - &g));
                        if curvature > 0.0 {
                            let frac = -slope / curvature;
                            if frac > 0.0 && frac < 1.0 {
                                alpha *= frac;
                                continue;
                            }
                        }
                    }
                }
                alpha *= opts.backtrack;
            }
            if used_reset {
                return Err(Error::LineSearchFailure(opts.max_backtracks));
            }
            // one steepest-descent restart before giving up
            used_reset = true;
            h = DMatrix::identity(n, n);
            d = -g.clone();
        };

        // curvature update restricted to the free variables
        let mut s = &u_new - &u;
        let mut yv = &g_new - &g;
        for (j, &a) in active.iter().enumerate() {
            if a {
                s[j] = 0.0;
                yv[j] = 0.0;
            }
        }
        let sy = s.dot(&yv);
        if sy > 1e-10 * s.norm() * yv.norm() && sy > 0.0 {
            // inverse BFGS: H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // expanded form to stay allocation-light
            let sst = &s * s.transpose();
            let hyst = &hy * s.transpose();
            h = h - (&hyst + hyst.transpose()) * rho + &sst * (rho * rho * yhy + rho);
        }

        u = u_new;
        fval = f_new;
        g = g_new;
        history.push(fval);
    }

    let pg = (&u - project_box(&(&u - &g), upper_bounds)).norm();
    Ok(SolveReport {
        minimizer: u,
        objective: fval,
        proj_grad_norm: pg,
        iterations: opts.max_iter,
        converged: false,
        objective_history: history,
    })
}

/// Scalar-output reduction of a lifted model over a fixed horizon: the
/// rows `w Aᵏ` and the impulse coefficients `h_j = w Aʲ B`. Because the
/// tracked output is scalar, every objective evaluation needs only the
/// free response `w Aᵏ z₀` (fixed within a solve) plus an `O(M²)` scalar
/// convolution — the `N_φ`-dimensional rollout happens once, not once per
/// line-search trial.
pub(crate) struct OutputPredictor {
    /// `rows[k] = w Aᵏ`, for `k = 0..=M`.
    rows: Vec<RowDVector<f64>>,
    /// `h[j] = w Aʲ B`, for `j = 0..M−1`.
    h: Vec<f64>,
}

impl OutputPredictor {
    pub(crate) fn new(model: &EdmdModel, horizon_steps: usize) -> OutputPredictor {
        let mut rows = Vec::with_capacity(horizon_steps + 1);
        rows.push(output_row(model));
        for k in 0..horizon_steps {
            let next = &rows[k] * &model.a;
            rows.push(next);
        }
        let h: Vec<f64> = (0..horizon_steps)
            .map(|j| (&rows[j] * &model.b)[0])
            .collect();
        OutputPredictor { rows, h }
    }

    /// `w Aᵏ z₀` for each step of the horizon.
    fn free_response(&self, z0: &DVector<f64>) -> Vec<f64> {
        self.rows.iter().map(|r| (r * z0)[0]).collect()
    }

    /// Cost and exact gradient; same functional as
    /// [`cost_and_gradient_lifted`], evaluated through the impulse
    /// response instead of the state rollout.
    fn cost_and_gradient(
        &self,
        spec: &OcpSpec,
        map: &InputMap,
        free: &[f64],
        u: &DVector<f64>,
    ) -> Result<(f64, DVector<f64>)> {
        let m = spec.horizon_steps;
        let inputs = &map.base + &map.gain * u;
        let mut outputs = free.to_vec();
        for k in 1..=m {
            let mut acc = 0.0;
            for j in 0..k {
                acc += self.h[k - 1 - j] * inputs[j];
            }
            outputs[k] += acc;
        }
        let cost = eval_cost(spec, &outputs, u)?;

        // dJ/dP_k, then the input gradient by the transposed convolution
        let mut grad_in = DVector::zeros(m);
        for k in 1..=m {
            let trap_w = if k == m { 0.5 } else { 1.0 };
            let mut qk = spec.track_weight * spec.dt * trap_w * (outputs[k] - spec.target);
            if k == m {
                qk += spec.term_weight * (outputs[m] - spec.target);
            }
            if qk != 0.0 {
                for j in 0..k {
                    grad_in[j] += self.h[k - 1 - j] * qk;
                }
            }
        }
        let mut grad = map.gain.transpose() * grad_in;
        for (j, (gamma, uj)) in spec.dose_weights.iter().zip(u.iter()).enumerate() {
            grad[j] += gamma * uj;
        }
        Ok((cost, grad))
    }
}

/// Solve the lifted problem with the exact adjoint gradient.
pub fn solve_ocp_lifted(
    model: &EdmdModel,
    spec: &OcpSpec,
    z0: &DVector<f64>,
    u_init: &DVector<f64>,
    opts: &BfgsOptions,
) -> Result<SolveReport> {
    let predictor = OutputPredictor::new(model, spec.horizon_steps);
    solve_ocp_lifted_cached(&predictor, model, spec, z0, u_init, opts)
}

/// [`solve_ocp_lifted`] with a caller-held predictor, so a receding-horizon
/// loop can reuse the impulse response across steps. The predictor must
/// have been built from this `model` at this horizon; rebuild it whenever
/// the model is refitted.
pub(crate) fn solve_ocp_lifted_cached(
    predictor: &OutputPredictor,
    model: &EdmdModel,
    spec: &OcpSpec,
    z0: &DVector<f64>,
    u_init: &DVector<f64>,
    opts: &BfgsOptions,
) -> Result<SolveReport> {
    spec.validate()?;
    let map = match &spec.dose_map {
        DoseMap::Lifted(map) => map,
        DoseMap::PlantTimes { .. } => {
            return Err(Error::ModeMismatch {
                model: format!("lifted ({})", model.mode),
                problem: "plant-time dose map".into(),
            })
        }
    };
    if map.mode != model.mode {
        return Err(Error::ModeMismatch {
            model: model.mode.to_string(),
            problem: map.mode.to_string(),
        });
    }
    if model.input_dim() != 1 {
        return Err(Error::InvalidDimension(format!(
            "lifted objective assumes a scalar input, model has d_u = {}",
            model.input_dim()
        )));
    }
    if z0.len() != model.lifted_dim() {
        return Err(Error::LengthMismatch(format!(
            "z0 has {} entries, model lifts to {}",
            z0.len(),
            model.lifted_dim()
        )));
    }
    if predictor.rows.len() != spec.horizon_steps + 1
        || predictor.rows[0].len() != model.lifted_dim()
    {
        return Err(Error::InvalidDimension(format!(
            "predictor covers {} steps of a {}-dimensional lift, spec needs {} steps of {}",
            predictor.rows.len().saturating_sub(1),
            predictor.rows[0].len(),
            spec.horizon_steps,
            model.lifted_dim()
        )));
    }
    let free = predictor.free_response(z0);
    projected_bfgs(
        |u| predictor.cost_and_gradient(spec, map, &free, u),
        &spec.upper_bounds,
        u_init,
        opts,
    )
}

/// Objective of the nonlinear problem: simulate the plant over the horizon
/// under the candidate doses (appended to the applied history) and
/// evaluate the cost on the recorded outputs.
fn nonlinear_objective(
    params: &PlantParams,
    spec: &OcpSpec,
    state0: &PlantState,
    u: &DVector<f64>,
) -> Result<f64> {
    let (times, history) = match &spec.dose_map {
        DoseMap::PlantTimes { times, history } => (times, history),
        DoseMap::Lifted(_) => {
            return Err(Error::ModeMismatch {
                model: "plant".into(),
                problem: "lifted dose map".into(),
            })
        }
    };
    let horizon_end = state0.t + spec.horizon_steps as f64 * spec.dt;
    let mut all_times = history.times().to_vec();
    let mut all_doses = history.doses().to_vec();
    for (j, &tj) in times.iter().enumerate() {
        if tj < state0.t || tj >= horizon_end {
            return Err(Error::Range(format!(
                "dose variable {j} (t = {tj}) outside the horizon [{}, {horizon_end})",
                state0.t
            )));
        }
        all_times.push(tj);
        all_doses.push(u[j]);
    }
    // history precedes the horizon, decision times are increasing
    debug_assert!(all_times.windows(2).all(|w| w[0] < w[1]));
    let schedule = DoseSchedule::new_unchecked(
        all_times,
        all_doses,
        spec.upper_bounds.iter().cloned().fold(0.0, f64::max),
    );
    let trace = plant::simulate(params, state0, &schedule, spec.horizon_steps)?;
    eval_cost(spec, &trace.outputs, u)
}

/// Solve the reference problem on the full plant; gradients are forward
/// finite differences, one extra simulation per dose variable.
pub fn solve_ocp_nonlinear(
    params: &PlantParams,
    spec: &OcpSpec,
    state0: &PlantState,
    u_init: &DVector<f64>,
    opts: &BfgsOptions,
) -> Result<SolveReport> {
    spec.validate()?;
    const FD_H: f64 = 1e-6;
    projected_bfgs(
        |u| {
            let f0 = nonlinear_objective(params, spec, state0, u)?;
            let mut grad = DVector::zeros(u.len());
            for j in 0..u.len() {
                let mut up = u.clone();
                up[j] += FD_H;
                grad[j] = (nonlinear_objective(params, spec, state0, &up)? - f0) / FD_H;
            }
            Ok((f0, grad))
        },
        &spec.upper_bounds,
        u_init,
        opts,
    )
}
