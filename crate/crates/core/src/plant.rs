//! The truth model: a chain of advection–reaction population balances.
//!
//! Each population `y_k(t, x)` obeys `y_t = κ(E) y − v(E) y_x` on the
//! maturity interval of the spectral grid, with an inflow boundary value at
//! `x_lo`. The chain couples through that boundary: population 1 is fed by
//! the dose-driven concentration `E(t)`, population `k ≥ 2` by the outflow
//! of population `k − 1` at `x_hi`. Time stepping is implicit Euler on the
//! Legendre modal semi-discretization; the boundary condition replaces the
//! last modal equation (tau method).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spectral::SpectralGrid;

/// Dose-to-concentration map.
///
/// `Linear` is the Bateman superposition: each injection contributes an
/// absorption–elimination double exponential, so the concentration is
/// linear in the dose vector. `MichaelisMenten` swaps first-order
/// elimination for a saturable one and is integrated numerically; it makes
/// the concentration nonlinear in the doses, which breaks the convexity of
/// the concentration-encoded reduced control problem (see the control
/// module).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PkModel {
    Linear,
    MichaelisMenten { v_max: f64, k_m_elim: f64 },
}

/// Physical and numerical parameters of the population chain.
#[derive(Debug, Clone)]
pub struct PlantParams {
    pub grid: SpectralGrid,
    /// Number of chained populations (≥ 1); the output reads the last one.
    pub n_pop: usize,
    /// Reaction coefficient κ(E) = kappa0 + kappa1 · E/(E + k_m)  (1/day).
    pub kappa0: f64,
    pub kappa1: f64,
    /// Transport speed v(E) = v0 · (1 + v1 · E/(E + k_m))  (maturity/day).
    pub v0: f64,
    pub v1: f64,
    /// Half-saturation constant of the concentration responses.
    pub k_m: f64,
    /// Boundary inflow gain of population 1: g = g0 · E/(E + k_m).
    pub g0: f64,
    /// Inter-population boundary coupling gain.
    pub alpha: f64,
    /// Absorption and elimination rates of the dose map (1/day).
    pub k_a: f64,
    pub k_e: f64,
    /// Distribution volume (dose → concentration scaling).
    pub v_d: f64,
    /// Baseline concentration with no dosing.
    pub e_base: f64,
    /// Time step Δt (days).
    pub dt: f64,
    /// Output weight ω₅ in the tracked scalar ω₅^{1/2}(y_last)₀.
    pub omega5: f64,
    pub pk: PkModel,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            grid: crate::spectral::build_grid(16, 0.0, 1.0).expect("default grid is valid"),
            n_pop: 2,
            kappa0: 0.2,
            kappa1: 1.0,
            v0: 0.15,
            v1: 0.5,
            k_m: 1.0,
            g0: 1.0,
            alpha: 1.0,
            k_a: 2.0,
            k_e: 0.4,
            v_d: 1.0,
            e_base: 0.1,
            dt: 0.5,
            omega5: 1.0,
            pk: PkModel::Linear,
        }
    }
}

impl PlantParams {
    /// Check the parameter invariants; all constructors and loaders should
    /// funnel through this.
    pub fn validate(&self) -> Result<()> {
        if self.n_pop < 1 {
            return Err(Error::InvalidParameter("n_pop must be at least 1".into()));
        }
        if !(self.v0 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "v0 must be positive (transport is left-to-right), got {}",
                self.v0
            )));
        }
        if self.v1 < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "v1 must be nonnegative, got {}",
                self.v1
            )));
        }
        if !(self.k_a > 0.0) || !(self.k_e > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "absorption/elimination rates must be positive, got k_a={}, k_e={}",
                self.k_a, self.k_e
            )));
        }
        if self.k_a == self.k_e {
            return Err(Error::InvalidParameter(
                "k_a must differ from k_e (the dose response degenerates)".into(),
            ));
        }
        if !(self.k_m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "k_m must be positive, got {}",
                self.k_m
            )));
        }
        if !(self.v_d > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "v_d must be positive, got {}",
                self.v_d
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !(self.omega5 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "omega5 must be positive, got {}",
                self.omega5
            )));
        }
        if self.e_base < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "e_base must be nonnegative, got {}",
                self.e_base
            )));
        }
        if let PkModel::MichaelisMenten { v_max, k_m_elim } = self.pk {
            if !(v_max > 0.0) || !(k_m_elim > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "Michaelis-Menten elimination needs v_max, k_m_elim > 0, got {v_max}, {k_m_elim}"
                )));
            }
        }
        Ok(())
    }
}

/// Injection times with the dose vector and its box bound.
#[derive(Debug, Clone, PartialEq)]
pub struct DoseSchedule {
    times: Vec<f64>,
    doses: Vec<f64>,
    u_max: f64,
}

impl DoseSchedule {
    /// Build a schedule, validating ordering and box membership.
    pub fn new(times: Vec<f64>, doses: Vec<f64>, u_max: f64) -> Result<Self> {
        if times.len() != doses.len() {
            return Err(Error::LengthMismatch(format!(
                "{} injection times but {} doses",
                times.len(),
                doses.len()
            )));
        }
        if u_max < 0.0 {
            return Err(Error::Range(format!("u_max must be >= 0, got {u_max}")));
        }
        for w in times.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::InvalidParameter(format!(
                    "injection times must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&t0) = times.first() {
            if t0 < 0.0 {
                return Err(Error::Range(format!(
                    "injection times must be nonnegative, got {t0}"
                )));
            }
        }
        for (i, &u) in doses.iter().enumerate() {
            if u < 0.0 || u > u_max {
                return Err(Error::Range(format!(
                    "dose {i} = {u} outside [0, {u_max}]"
                )));
            }
        }
        Ok(DoseSchedule {
            times,
            doses,
            u_max,
        })
    }

    /// Schedule with no injections at all.
    pub fn empty(u_max: f64) -> Self {
        DoseSchedule {
            times: Vec::new(),
            doses: Vec::new(),
            u_max: u_max.max(0.0),
        }
    }

    /// Bypasses the box check; used internally by finite-difference probes
    /// that nudge a dose slightly past the bound.
    pub(crate) fn new_unchecked(times: Vec<f64>, doses: Vec<f64>, u_max: f64) -> Self {
        debug_assert_eq!(times.len(), doses.len());
        DoseSchedule {
            times,
            doses,
            u_max,
        }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn doses(&self) -> &[f64] {
        &self.doses
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Replace dose `i`, keeping the box invariant.
    pub fn set_dose(&mut self, i: usize, value: f64) -> Result<()> {
        if i >= self.doses.len() {
            return Err(Error::Range(format!(
                "dose index {i} out of range ({} doses)",
                self.doses.len()
            )));
        }
        if value < 0.0 || value > self.u_max {
            return Err(Error::Range(format!(
                "dose {value} outside [0, {}]",
                self.u_max
            )));
        }
        self.doses[i] = value;
        Ok(())
    }
}

/// Modal state of every population at one time instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub t: f64,
    pub pops: Vec<DVector<f64>>,
}

impl PlantState {
    fn check_against(&self, params: &PlantParams) -> Result<()> {
        if self.pops.len() != params.n_pop {
            return Err(Error::LengthMismatch(format!(
                "state has {} populations, params expect {}",
                self.pops.len(),
                params.n_pop
            )));
        }
        for (k, y) in self.pops.iter().enumerate() {
            if y.len() != params.grid.n {
                return Err(Error::LengthMismatch(format!(
                    "population {k} has {} coefficients, grid has {} modes",
                    y.len(),
                    params.grid.n
                )));
            }
        }
        Ok(())
    }
}

/// Concentration `E(t; u)` produced by the dose schedule.
///
/// Linear mode is the closed-form Bateman superposition
/// `E_base + Σ_{t_i ≤ t} u_i k_a / (v_d (k_a − k_e)) (e^{−k_e Δ} − e^{−k_a Δ})`
/// with `Δ = t − t_i`. The Michaelis–Menten mode integrates the depot and
/// concentration ODEs with a fixed-substep RK4 scheme (deterministic); a
/// constant endogenous production term keeps `e_base` an exact equilibrium,
/// so zero dosing yields `e_base` in both modes.
pub fn epo_concentration(params: &PlantParams, schedule: &DoseSchedule, t: f64) -> f64 {
    match params.pk {
        PkModel::Linear => {
            let mut e = params.e_base;
            for (&ti, &u) in schedule.times.iter().zip(&schedule.doses) {
                if ti <= t {
                    e += u * bateman_kernel(params, t - ti);
                }
            }
            e
        }
        PkModel::MichaelisMenten { v_max, k_m_elim } => {
            epo_mm(params, schedule, t, v_max, k_m_elim)
        }
    }
}

/// Concentration response of a unit dose after `elapsed` days (zero before
/// the injection). The linear concentration map is the superposition of
/// these kernels, which makes it affine in the dose vector — the fact the
/// concentration-encoded reduced control problem relies on.
pub(crate) fn bateman_kernel(params: &PlantParams, elapsed: f64) -> f64 {
    if elapsed < 0.0 {
        return 0.0;
    }
    params.k_a / (params.v_d * (params.k_a - params.k_e))
        * ((-params.k_e * elapsed).exp() - (-params.k_a * elapsed).exp())
}

/// RK4 integration of the saturable-elimination dose model from time zero.
fn epo_mm(params: &PlantParams, schedule: &DoseSchedule, t: f64, v_max: f64, k_m_elim: f64) -> f64 {
    // Production calibrated so the baseline is an equilibrium of the
    // undosed system.
    let r0 = v_max * params.e_base / (k_m_elim + params.e_base);
    let rhs = |a: f64, e: f64| -> (f64, f64) {
        (
            -params.k_a * a,
            params.k_a * a / params.v_d - v_max * e / (k_m_elim + e) + r0,
        )
    };
    const H_TARGET: f64 = 2.5e-3;
    let mut a = 0.0_f64;
    let mut e = params.e_base;
    let mut t_cur = 0.0_f64;
    let mut idx = 0;
    while t_cur < t {
        while idx < schedule.times.len() && schedule.times[idx] <= t_cur {
            a += schedule.doses[idx];
            idx += 1;
        }
        let t_next = if idx < schedule.times.len() && schedule.times[idx] < t {
            schedule.times[idx]
        } else {
            t
        };
        let span = t_next - t_cur;
        if span > 0.0 {
            let nsub = (span / H_TARGET).ceil().max(1.0) as usize;
            let h = span / nsub as f64;
            for _ in 0..nsub {
                let (k1a, k1e) = rhs(a, e);
                let (k2a, k2e) = rhs(a + 0.5 * h * k1a, e + 0.5 * h * k1e);
                let (k3a, k3e) = rhs(a + 0.5 * h * k2a, e + 0.5 * h * k2e);
                let (k4a, k4e) = rhs(a + h * k3a, e + h * k3e);
                a += h / 6.0 * (k1a + 2.0 * k2a + 2.0 * k3a + k4a);
                e += h / 6.0 * (k1e + 2.0 * k2e + 2.0 * k3e + k4e);
            }
        }
        t_cur = t_next;
    }
    e
}

/// Saturating reaction coefficient κ(E).
pub fn reaction_coeff(params: &PlantParams, e: f64) -> f64 {
    params.kappa0 + params.kappa1 * e / (e + params.k_m)
}

/// Saturating transport speed v(E); strictly positive by the parameter
/// invariants.
pub fn transport_coeff(params: &PlantParams, e: f64) -> f64 {
    params.v0 * (1.0 + params.v1 * e / (e + params.k_m))
}

/// Boundary inflow value. `upstream_outflow` is `None` for the first
/// population (fed directly by the concentration) and `Some(q)` with the
/// upstream population's outflow at `x_hi` for the rest.
pub fn boundary_inflow(params: &PlantParams, e: f64, upstream_outflow: Option<f64>) -> f64 {
    match upstream_outflow {
        None => params.g0 * e / (e + params.k_m),
        Some(q) => params.alpha * q,
    }
}

/// Implicit-Euler system matrix `I − Δt(κ I − v D)` with the last modal row
/// replaced by the `x_lo` boundary functional (tau method).
fn step_matrix(params: &PlantParams, kappa: f64, v: f64) -> DMatrix<f64> {
    let n = params.grid.n;
    let mut m = DMatrix::identity(n, n) * (1.0 - params.dt * kappa);
    m += &params.grid.diff * (params.dt * v);
    for j in 0..n {
        m[(n - 1, j)] = params.grid.bnd_lo[j];
    }
    m
}

/// Pure-reaction implicit-Euler step with the transport term and boundary
/// row disabled: every modal coefficient multiplies by `1/(1 − Δt κ)`.
/// Exists so the reaction update can be tested against the scalar closed
/// form in isolation.
#[cfg(test)]
fn reaction_only_step(params: &PlantParams, kappa: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
    let denom = 1.0 - params.dt * kappa;
    if denom == 0.0 {
        return Err(Error::SingularSystem(
            "reaction step: 1 - dt*kappa vanished".into(),
        ));
    }
    Ok(y / denom)
}

/// Advance the whole chain by one time step.
///
/// The concentration is sampled at the step midpoint. Populations are
/// visited in chain order; the inflow of population `k ≥ 2` uses the
/// upstream outflow of the PREVIOUS step (the chain is explicit across
/// populations, implicit within each).
pub fn plant_step(
    params: &PlantParams,
    state: &PlantState,
    schedule: &DoseSchedule,
) -> Result<PlantState> {
    state.check_against(params)?;
    let n = params.grid.n;
    let e_mid = epo_concentration(params, schedule, state.t + 0.5 * params.dt);
    let kappa = reaction_coeff(params, e_mid);
    let v = transport_coeff(params, e_mid);
    let lu = step_matrix(params, kappa, v).lu();
    let mut upstream: Option<f64> = None;
    let mut pops = Vec::with_capacity(params.n_pop);
    for y_old in &state.pops {
        let g = boundary_inflow(params, e_mid, upstream);
        let mut rhs = y_old.clone();
        rhs[n - 1] = g;
        let y_new = lu.solve(&rhs).ok_or_else(|| {
            Error::SingularSystem(format!(
                "implicit step matrix is singular (kappa={kappa}, v={v}, dt={})",
                params.dt
            ))
        })?;
        upstream = Some((&params.grid.bnd_hi * y_old)[0]);
        pops.push(y_new);
    }
    Ok(PlantState {
        t: state.t + params.dt,
        pops,
    })
}

/// A recorded plant run: `states[k]` at time `t_0 + k Δt` and the output
/// trace `outputs[k] = hemoglobin(states[k])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub states: Vec<PlantState>,
    pub outputs: Vec<f64>,
}

/// Repeated [`plant_step`]; returns `steps + 1` states including the
/// initial one.
pub fn simulate(
    params: &PlantParams,
    state0: &PlantState,
    schedule: &DoseSchedule,
    steps: usize,
) -> Result<SimTrace> {
    let mut states = Vec::with_capacity(steps + 1);
    let mut outputs = Vec::with_capacity(steps + 1);
    states.push(state0.clone());
    outputs.push(hemoglobin(params, state0));
    for _ in 0..steps {
        let next = plant_step(params, states.last().unwrap(), schedule)?;
        outputs.push(hemoglobin(params, &next));
        states.push(next);
    }
    Ok(SimTrace { states, outputs })
}

/// Tracked scalar output: ω₅^{1/2} times the zeroth modal coefficient of
/// the last population.
pub fn hemoglobin(params: &PlantParams, state: &PlantState) -> f64 {
    params.omega5.sqrt() * state.pops[params.n_pop - 1][0]
}

/// Steady state of the semi-discrete chain at a frozen concentration `e`:
/// solves `(κ I − v D) y = 0` with the boundary row imposing the
/// self-consistent chain inflow. This is exactly the fixed point of
/// [`plant_step`] when the concentration stays at `e`.
pub fn steady_state(params: &PlantParams, e: f64) -> Result<PlantState> {
    let n = params.grid.n;
    let kappa = reaction_coeff(params, e);
    let v = transport_coeff(params, e);
    let mut m = DMatrix::identity(n, n) * kappa;
    m -= &params.grid.diff * v;
    for j in 0..n {
        m[(n - 1, j)] = params.grid.bnd_lo[j];
    }
    let lu = m.lu();
    let mut upstream: Option<f64> = None;
    let mut pops = Vec::with_capacity(params.n_pop);
    for _ in 0..params.n_pop {
        let g = boundary_inflow(params, e, upstream);
        let mut rhs = DVector::zeros(n);
        rhs[n - 1] = g;
        let y = lu.solve(&rhs).ok_or_else(|| {
            Error::SingularSystem(format!(
                "steady-state matrix is singular (kappa={kappa}, v={v})"
            ))
        })?;
        upstream = Some((&params.grid.bnd_hi * &y)[0]);
        pops.push(y);
    }
    Ok(PlantState { t: 0.0, pops })
}
