//! Surrogate identification: dictionary lifting and least-squares fits.
//!
//! The surrogate observes the output-carrying LAST population of the chain
//! (the tracked scalar depends on nothing else), lifts it through a
//! dictionary of observables, and fits the lifted linear model
//!
//! ```text
//! z_{k+1} = A z_k + B u_k,        ŷ_k = C z_k
//! ```
//!
//! from snapshot data via two truncated-SVD least-squares problems: one for
//! the stacked `[A, B]`, one for the reconstruction map `C`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{self, DoseSchedule, PlantParams, PlantState};
use crate::spectral::legendre_eval;

/// Threshold below which the normalizing state sum counts as degenerate.
const DEGENERATE_SUM: f64 = 1e-12;

/// Version stamp of the serialized model document.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// How the control signal enters the snapshot input matrix.
///
/// `Concentration` feeds the continuous dose-driven concentration sampled
/// at each step time; `Dose` feeds the raw injections as impulses (the dose
/// amount in the step containing its injection time, zero elsewhere).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputEncoding {
    #[serde(rename = "edmd-c")]
    Concentration,
    #[serde(rename = "edmd-d")]
    Dose,
}

impl InputEncoding {
    pub fn as_str(&self) -> &'static str {
        match self {
            InputEncoding::Concentration => "edmd-c",
            InputEncoding::Dose => "edmd-d",
        }
    }
}

impl std::fmt::Display for InputEncoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InputEncoding {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edmd-c" => Ok(InputEncoding::Concentration),
            "edmd-d" => Ok(InputEncoding::Dose),
            other => Err(Error::Format(format!(
                "unknown input encoding '{other}' (expected edmd-c or edmd-d)"
            ))),
        }
    }
}

/// Observable dictionary mapping a state vector into the lifted space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dictionary {
    /// Raw passthrough `z = y`. Useful when the underlying dynamics are
    /// already linear (the exact-recovery fixtures) and as a diagnostic.
    Identity { n: usize },
    /// The output functional followed by normalized Legendre observables:
    /// `z₁ = ω₅^{1/2}(y)₀` and `ψ_{i,j}(y) = L^j((y)_i / Σ_k (y)_k)` for
    /// `i = 0..n−1`, `j = 0..n_l−1` (component-major order), for a total
    /// of `1 + n·n_l` observables.
    LegendreNormalized { n: usize, n_l: usize, omega5: f64 },
}

impl Dictionary {
    /// Validated constructor for the Legendre dictionary.
    pub fn legendre(n: usize, n_l: usize, omega5: f64) -> Result<Self> {
        if n == 0 || n_l == 0 {
            return Err(Error::InvalidDimension(format!(
                "dictionary needs n >= 1 and n_l >= 1, got n={n}, n_l={n_l}"
            )));
        }
        if !(omega5 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "omega5 must be positive, got {omega5}"
            )));
        }
        Ok(Dictionary::LegendreNormalized { n, n_l, omega5 })
    }

    /// Dimension of the observed state.
    pub fn state_dim(&self) -> usize {
        match *self {
            Dictionary::Identity { n } => n,
            Dictionary::LegendreNormalized { n, .. } => n,
        }
    }

    /// Dimension of the lifted space (number of observables).
    pub fn dim(&self) -> usize {
        match *self {
            Dictionary::Identity { n } => n,
            Dictionary::LegendreNormalized { n, n_l, .. } => 1 + n * n_l,
        }
    }

    /// Apply the dictionary to a state vector.
    pub fn lift(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.state_dim() {
            return Err(Error::LengthMismatch(format!(
                "dictionary expects {} state components, got {}",
                self.state_dim(),
                y.len()
            )));
        }
        match *self {
            Dictionary::Identity { .. } => Ok(y.clone()),
            Dictionary::LegendreNormalized { n, n_l, omega5 } => {
                let total: f64 = y.iter().sum();
                if total.abs() < DEGENERATE_SUM {
                    return Err(Error::DegenerateState(total));
                }
                let mut z = DVector::zeros(1 + n * n_l);
                z[0] = omega5.sqrt() * y[0];
                for i in 0..n {
                    let ratio = y[i] / total;
                    for j in 0..n_l {
                        z[1 + i * n_l + j] = legendre_eval(j, ratio);
                    }
                }
                Ok(z)
            }
        }
    }
}

/// The part of the plant state the surrogate observes and predicts: the
/// last population's coefficient vector.
pub fn observed_state(state: &PlantState) -> DVector<f64> {
    state.pops.last().expect("state has at least one population").clone()
}

/// Recorded `(state, input, successor)` triples in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotSet {
    /// States, one column per snapshot (n × m).
    pub y0: DMatrix<f64>,
    /// Successor states, aligned columnwise with `y0`.
    pub y1: DMatrix<f64>,
    /// Encoded inputs (d_u × m).
    pub u: DMatrix<f64>,
    pub mode: InputEncoding,
}

impl SnapshotSet {
    /// Number of snapshot columns.
    pub fn m(&self) -> usize {
        self.y0.ncols()
    }

    pub fn validate_shapes(&self) -> Result<()> {
        if self.y0.shape() != self.y1.shape() {
            return Err(Error::InvalidDimension(format!(
                "Y0 is {:?} but Y1 is {:?}",
                self.y0.shape(),
                self.y1.shape()
            )));
        }
        if self.u.ncols() != self.y0.ncols() {
            return Err(Error::InvalidDimension(format!(
                "U has {} columns, Y0 has {}",
                self.u.ncols(),
                self.y0.ncols()
            )));
        }
        if self.y0.ncols() == 0 {
            return Err(Error::InvalidDimension("snapshot set is empty".into()));
        }
        Ok(())
    }

    /// Concatenate two windows columnwise (used by append-mode refits).
    pub fn concat(&self, other: &SnapshotSet) -> Result<SnapshotSet> {
        if self.mode != other.mode {
            return Err(Error::ModeMismatch {
                model: self.mode.to_string(),
                problem: other.mode.to_string(),
            });
        }
        if self.y0.nrows() != other.y0.nrows() || self.u.nrows() != other.u.nrows() {
            return Err(Error::InvalidDimension(
                "snapshot windows have mismatched row counts".into(),
            ));
        }
        let glue = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
            out.columns_mut(0, a.ncols()).copy_from(a);
            out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
            out
        };
        Ok(SnapshotSet {
            y0: glue(&self.y0, &other.y0),
            y1: glue(&self.y1, &other.y1),
            u: glue(&self.u, &other.u),
            mode: self.mode,
        })
    }
}

/// Encoded input for the step starting at absolute time `t_k`.
pub fn encode_input_at(
    mode: InputEncoding,
    params: &PlantParams,
    schedule: &DoseSchedule,
    t_k: f64,
) -> DVector<f64> {
    let value = match mode {
        InputEncoding::Concentration => plant::epo_concentration(params, schedule, t_k),
        InputEncoding::Dose => {
            let t_next = t_k + params.dt;
            schedule
                .times()
                .iter()
                .zip(schedule.doses())
                .filter(|(&ti, _)| ti >= t_k && ti < t_next)
                .map(|(_, &u)| u)
                .sum()
        }
    };
    DVector::from_element(1, value)
}

/// Encoded input at step `k` of a simulation that starts at time zero.
pub fn encode_input(
    mode: InputEncoding,
    params: &PlantParams,
    schedule: &DoseSchedule,
    step_index: usize,
) -> DVector<f64> {
    encode_input_at(mode, params, schedule, step_index as f64 * params.dt)
}

/// Run the plant `m` steps and record the snapshot triples.
///
/// Logs a warning when `m` is below the identifiability heuristic
/// `dim(dictionary) + d_u`; the fit still works (minimum-norm solution)
/// but the model is then only determined on the data subspace.
pub fn collect_snapshots(
    params: &PlantParams,
    state0: &PlantState,
    schedule: &DoseSchedule,
    m: usize,
    mode: InputEncoding,
    dictionary: &Dictionary,
) -> Result<SnapshotSet> {
    if m == 0 {
        return Err(Error::InvalidDimension(
            "snapshot collection needs m >= 1".into(),
        ));
    }
    if m < dictionary.dim() + 1 {
        log::warn!(
            "snapshot count m={} is below the identifiability heuristic {} (= dim + d_u); \
             the fit will be rank-deficient on this window",
            m,
            dictionary.dim() + 1
        );
    }
    let n = params.grid.n;
    let trace = plant::simulate(params, state0, schedule, m)?;
    let mut y0 = DMatrix::zeros(n, m);
    let mut y1 = DMatrix::zeros(n, m);
    let mut u = DMatrix::zeros(1, m);
    for k in 0..m {
        y0.column_mut(k)
            .copy_from(&observed_state(&trace.states[k]));
        y1.column_mut(k)
            .copy_from(&observed_state(&trace.states[k + 1]));
        let t_k = state0.t + k as f64 * params.dt;
        u[(0, k)] = encode_input_at(mode, params, schedule, t_k)[0];
    }
    Ok(SnapshotSet { y0, y1, u, mode })
}

/// Fitted lifted linear surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct EdmdModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dictionary: Dictionary,
    pub mode: InputEncoding,
    pub svd_tol: f64,
    /// Frobenius residual of the dynamics fit ‖Y1_lift − A·Y0_lift − B·U‖_F.
    pub residual_dynamics: f64,
    /// Frobenius residual of the reconstruction fit ‖Y0 − C·Y0_lift‖_F.
    pub residual_reconstruction: f64,
}

impl EdmdModel {
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }
}

/// `X = Y · pinv(G)` with relative singular-value truncation; also returns
/// the discarded left-singular directions of `G` for rank diagnostics.
fn pinv_apply(y: &DMatrix<f64>, g: &DMatrix<f64>, svd_tol: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let svd = g.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let vt = svd.v_t.expect("svd requested v_t");
    let s = &svd.singular_values;
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..s.len())
        .filter(|&i| smax > 0.0 && s[i] > svd_tol * smax)
        .collect();
    let mut x = DMatrix::zeros(y.nrows(), g.nrows());
    for &i in &keep {
        // rank-one update: (Y v_i) σ_i^{-1} u_iᵀ
        let yv = y * vt.row(i).transpose();
        let ui = u.column(i);
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                x[(r, c)] += yv[r] / s[i] * ui[c];
            }
        }
    }
    let dropped: Vec<usize> = (0..s.len()).filter(|i| !keep.contains(i)).collect();
    let mut dropped_u = DMatrix::zeros(g.nrows(), dropped.len());
    for (j, &i) in dropped.iter().enumerate() {
        dropped_u.column_mut(j).copy_from(&u.column(i));
    }
    (x, dropped_u)
}

/// Fit the lifted model from a snapshot set.
///
/// `[A, B]` minimizes `‖Y1_lift − A·Y0_lift − B·U‖_F` via the pseudoinverse
/// of the stacked matrix `[Y0_lift; U]`; `C` minimizes `‖Y0 − C·Y0_lift‖_F`
/// via the pseudoinverse of `Y0_lift`. Both pseudoinverses truncate
/// singular values below `svd_tol` relative to the largest.
pub fn fit(snapshots: &SnapshotSet, dictionary: &Dictionary, svd_tol: f64) -> Result<EdmdModel> {
    snapshots.validate_shapes()?;
    if snapshots.y0.nrows() != dictionary.state_dim() {
        return Err(Error::InvalidDimension(format!(
            "snapshots carry {} state rows, dictionary expects {}",
            snapshots.y0.nrows(),
            dictionary.state_dim()
        )));
    }
    if !(svd_tol >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "svd_tol must be nonnegative, got {svd_tol}"
        )));
    }
    let m = snapshots.m();
    let d_u = snapshots.u.nrows();
    let n_phi = dictionary.dim();

    let mut y0l = DMatrix::zeros(n_phi, m);
    let mut y1l = DMatrix::zeros(n_phi, m);
    for k in 0..m {
        let z0 = dictionary.lift(&DVector::from_column_slice(snapshots.y0.column(k).as_slice()))?;
        let z1 = dictionary.lift(&DVector::from_column_slice(snapshots.y1.column(k).as_slice()))?;
        y0l.column_mut(k).copy_from(&z0);
        y1l.column_mut(k).copy_from(&z1);
    }

    // Stacked regressor [Y0_lift; U] for the joint [A, B] problem.
    let mut g = DMatrix::zeros(n_phi + d_u, m);
    g.rows_mut(0, n_phi).copy_from(&y0l);
    g.rows_mut(n_phi, d_u).copy_from(&snapshots.u);

    let (ab, dropped) = pinv_apply(&y1l, &g, svd_tol);
    // A discarded direction with weight on the input block means the data
    // did not excite B there: the fit is still the minimum-norm optimum,
    // but B is not identified along it.
    for j in 0..dropped.ncols() {
        let input_part = dropped.view((n_phi, j), (d_u, 1)).norm();
        if input_part > 1e-8 {
            log::warn!(
                "SVD truncation discarded a direction with input weight {input_part:.2e}; \
                 B is ill-determined on this snapshot window"
            );
            break;
        }
    }
    let a = ab.columns(0, n_phi).into_owned();
    let b = ab.columns(n_phi, d_u).into_owned();

    let (c, _) = pinv_apply(&snapshots.y0, &y0l, svd_tol);

    let residual_dynamics = (&y1l - &a * &y0l - &b * &snapshots.u).norm();
    let residual_reconstruction = (&snapshots.y0 - &c * &y0l).norm();
    debug_assert!(
        residual_dynamics <= y1l.norm() * (1.0 + 1e-9) + 1e-12,
        "least-squares fit must never be worse than the zero model"
    );

    Ok(EdmdModel {
        a,
        b,
        c,
        dictionary: dictionary.clone(),
        mode: snapshots.mode,
        svd_tol,
        residual_dynamics,
        residual_reconstruction,
    })
}

/// Roll the lifted linear model forward.
///
/// Returns `steps + 1` reconstructed states; entry 0 is `C·lift(y0)`, the
/// dictionary reconstruction of the initial state.
pub fn predict(
    model: &EdmdModel,
    y0: &DVector<f64>,
    inputs: &DMatrix<f64>,
    steps: usize,
) -> Result<Vec<DVector<f64>>> {
    if inputs.nrows() != model.input_dim() {
        return Err(Error::InvalidDimension(format!(
            "inputs have {} rows, model expects {}",
            inputs.nrows(),
            model.input_dim()
        )));
    }
    if inputs.ncols() < steps {
        return Err(Error::LengthMismatch(format!(
            "need {} input columns, got {}",
            steps,
            inputs.ncols()
        )));
    }
    let mut z = model.dictionary.lift(y0)?;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(&model.c * &z);
    for k in 0..steps {
        z = &model.a * &z + &model.b * inputs.column(k);
        out.push(&model.c * &z);
    }
    Ok(out)
}

/// Collect a fresh window from the current plant state and refit, keeping
/// the dictionary, encoding, and truncation threshold. The old data is
/// discarded (local-model philosophy); see the mpc module for the
/// append-mode alternative.
pub fn refit_window(
    model: &EdmdModel,
    params: &PlantParams,
    state: &PlantState,
    schedule_segment: &DoseSchedule,
    m_edmd: usize,
) -> Result<EdmdModel> {
    if m_edmd == 0 {
        return Err(Error::InvalidDimension("refit needs m_edmd >= 1".into()));
    }
    let window = collect_snapshots(
        params,
        state,
        schedule_segment,
        m_edmd,
        model.mode,
        &model.dictionary,
    )?;
    fit(&window, &model.dictionary, model.svd_tol)
}

// ---------------------------------------------------------------------------
// Serialization (versioned JSON, matrices row-major)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixDoc {
    rows: usize,
    cols: usize,
    /// Row-major entries, length rows × cols.
    data: Vec<f64>,
}

impl MatrixDoc {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        MatrixDoc {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    fn to_matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Schema(format!(
                "matrix '{name}' declares {}x{} but carries {} entries",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    version: u32,
    mode: InputEncoding,
    dictionary: Dictionary,
    svd_tol: f64,
    a: MatrixDoc,
    b: MatrixDoc,
    c: MatrixDoc,
    residual_dynamics: f64,
    residual_reconstruction: f64,
}

impl EdmdModel {
    /// Serialize to the versioned JSON document.
    pub fn to_json(&self) -> Result<String> {
        let doc = ModelDoc {
            version: MODEL_FORMAT_VERSION,
            mode: self.mode,
            dictionary: self.dictionary.clone(),
            svd_tol: self.svd_tol,
            a: MatrixDoc::from_matrix(&self.a),
            b: MatrixDoc::from_matrix(&self.b),
            c: MatrixDoc::from_matrix(&self.c),
            residual_dynamics: self.residual_dynamics,
            residual_reconstruction: self.residual_reconstruction,
        };
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::Schema(format!("model serialization failed: {e}")))
    }

    /// Parse the versioned JSON document, checking version and shapes.
    pub fn from_json(text: &str) -> Result<EdmdModel> {
        let doc: ModelDoc = serde_json::from_str(text)
            .map_err(|e| Error::Schema(format!("model document invalid: {e}")))?;
        if doc.version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model document version {} unsupported (expected {})",
                doc.version, MODEL_FORMAT_VERSION
            )));
        }
        let a = doc.a.to_matrix("a")?;
        let b = doc.b.to_matrix("b")?;
        let c = doc.c.to_matrix("c")?;
        let n_phi = doc.dictionary.dim();
        if a.shape() != (n_phi, n_phi) {
            return Err(Error::Schema(format!(
                "A is {:?}, dictionary implies {}x{}",
                a.shape(),
                n_phi,
                n_phi
            )));
        }
        if b.nrows() != n_phi || c.ncols() != n_phi || c.nrows() != doc.dictionary.state_dim() {
            return Err(Error::Schema(
                "B/C shapes inconsistent with the dictionary".into(),
            ));
        }
        Ok(EdmdModel {
            a,
            b,
            c,
            dictionary: doc.dictionary,
            mode: doc.mode,
            svd_tol: doc.svd_tol,
            residual_dynamics: doc.residual_dynamics,
            residual_reconstruction: doc.residual_reconstruction,
        })
    }
}
