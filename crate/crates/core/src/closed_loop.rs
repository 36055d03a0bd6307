//! Closed-loop simulation under the feedback law built from `P0, P1, P2`, the
//! evolution map `Φ(t, s)` and the transition checks of the open-loop optimum.

use nalgebra::DVector;

use crate::cost_ops::{CostOperatorField, FeedbackKernels};
use crate::error::{MemlqError, Result};
use crate::lifted::DiscretizedOperators;
use crate::open_loop::solve_open_loop;
use crate::problem::{AugmentedState, ControlTrajectory, SolveResult, StateTrajectory};

/// Output of a closed-loop run started at `s_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRecord {
    pub s_index: usize,
    /// Control record on cells `0..N`: the initial history followed by the applied feedback.
    pub applied: Vec<DVector<f64>>,
    pub state: StateTrajectory,
    /// Running cost accrued on `[t_s, t_i]` for `i = s..=N`.
    pub cost: Vec<f64>,
}

impl ClosedLoopRecord {
    /// Applied feedback on the cells `s..N`.
    pub fn control(&self) -> ControlTrajectory {
        ControlTrajectory {
            s_index: self.s_index,
            samples: self.applied[self.s_index..].to_vec(),
        }
    }

    pub fn total_cost(&self) -> f64 {
        *self
            .cost
            .last()
            .expect("record holds at least the start node")
    }
}

/// Feedback gains at node `t`: `u = -G w - Σ_p dt F(p) θ(p)`.
pub fn feedback_control(
    field: &CostOperatorField,
    ops: &DiscretizedOperators,
    t: usize,
    w: &DVector<f64>,
    theta: &[DVector<f64>],
) -> DVector<f64> {
    let m = ops.m();
    let b = ops.spec().b();
    let p1 = field.p1_slab(t);
    let diag = p1.columns(m * t, m);
    let gain = b.transpose() * field.p0(t) + diag.transpose();
    let mut u = -(gain * w);
    if field.has_memory_blocks() {
        let p2 = field.p2_slab(t);
        let dt = ops.dt();
        for (p, th) in theta.iter().enumerate().take(t) {
            let f = b.transpose() * p1.columns(m * p, m) + p2.view((m * t, m * p), (m, m));
            u.gemv(-dt, &f, th, 1.0);
        }
    }
    u
}

/// One step of the discrete dynamics from node `i`, with `record` holding the
/// control on cells `0..=i`.
fn advance(
    ops: &DiscretizedOperators,
    i: usize,
    w: &DVector<f64>,
    record: &[DVector<f64>],
) -> DVector<f64> {
    let mut drive = record[i].clone();
    if !ops.is_memoryless() {
        for (l, v) in record.iter().enumerate().take(i + 1) {
            drive.axpy(ops.kappa(i - l), v, 1.0);
        }
    }
    ops.propagators().get(1) * w + ops.gamma(1) * drive
}

/// Runs the feedback law forward from `X₀`.
pub fn simulate_closed_loop(
    ops: &DiscretizedOperators,
    field: &CostOperatorField,
    x0: &AugmentedState,
) -> Result<ClosedLoopRecord> {
    let (steps, dt) = (ops.steps(), ops.dt());
    if field.steps() != steps || field.n() != ops.n() || field.m() != ops.m() {
        return Err(MemlqError::IndexOutOfRange(
            "field and operators live on different grids".into(),
        ));
    }
    let s = x0.s_index;
    if s > steps || x0.history.len() != s {
        return Err(MemlqError::IndexOutOfRange(format!(
            "start {s} with {} history cells",
            x0.history.len()
        )));
    }
    let c = ops.spec().c();
    let mut applied = x0.history.clone();
    let mut states = vec![x0.w0.clone()];
    let mut cost = vec![0.0];
    let mut w = x0.w0.clone();
    for i in s..steps {
        let u = feedback_control(field, ops, i, &w, &applied);
        if u.iter().any(|x| !x.is_finite()) {
            return Err(MemlqError::NonFinite(format!("feedback at node {i}")));
        }
        applied.push(u);
        let next = advance(ops, i, &w, &applied);
        let step_cost = 0.5 * dt * ((c * &w).norm_squared() + (c * &next).norm_squared())
            + dt * applied[i].norm_squared();
        cost.push(cost.last().copied().unwrap_or(0.0) + step_cost);
        states.push(next.clone());
        w = next;
    }
    Ok(ClosedLoopRecord {
        s_index: s,
        applied,
        state: StateTrajectory {
            s_index: s,
            samples: states,
        },
        cost,
    })
}

/// `Φ(t, s) X₀`: the state at `t` with the control record on `[0, t)`.
pub fn apply_evolution(record: &ClosedLoopRecord, t: usize) -> Result<AugmentedState> {
    let s = record.s_index;
    if t < s || t - s >= record.state.samples.len() {
        return Err(MemlqError::IndexOutOfRange(format!(
            "snapshot at {t} outside the record starting at {s}"
        )));
    }
    Ok(AugmentedState {
        s_index: t,
        w0: record.state.at(t).clone(),
        history: record.applied[..t].to_vec(),
    })
}

/// Largest absolute discrepancy and the magnitude it is measured against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discrepancy {
    pub max_abs: f64,
    pub scale: f64,
}

impl Discrepancy {
    pub fn relative(&self) -> f64 {
        if self.scale > 0.0 {
            self.max_abs / self.scale
        } else {
            self.max_abs
        }
    }
}

fn compare(a: &[DVector<f64>], b: &[DVector<f64>]) -> Discrepancy {
    let mut out = Discrepancy {
        max_abs: 0.0,
        scale: 0.0,
    };
    for (x, y) in a.iter().zip(b) {
        out.max_abs = out.max_abs.max((x - y).amax());
        out.scale = out.scale.max(x.amax());
    }
    out
}

/// Snapshot of an open-loop solution at `τ`.
pub fn open_loop_snapshot(x0: &AugmentedState, sol: &SolveResult, tau: usize) -> AugmentedState {
    let mut history = x0.history.clone();
    history.extend(sol.control.samples[..tau - x0.s_index].iter().cloned());
    AugmentedState {
        s_index: tau,
        w0: sol.state.at(tau).clone(),
        history,
    }
}

fn restart(
    ops: &DiscretizedOperators,
    s: usize,
    tau: usize,
    x0: &AugmentedState,
) -> Result<(SolveResult, SolveResult)> {
    if !(s <= tau && tau < ops.steps()) {
        return Err(MemlqError::IndexOutOfRange(format!(
            "transition needs s <= tau < N, got s={s}, tau={tau}"
        )));
    }
    let first = solve_open_loop(ops, s, x0, 1e-12)?;
    let x1 = open_loop_snapshot(x0, &first, tau);
    let second = solve_open_loop(ops, tau, &x1, 1e-12)?;
    Ok((first, second))
}

/// `û(·, τ, X₁)` against `û(·, s, X₀)` on `[τ, T]`, with `X₁` the optimal snapshot at `τ`.
pub fn check_control_transition(
    ops: &DiscretizedOperators,
    s: usize,
    tau: usize,
    x0: &AugmentedState,
) -> Result<Discrepancy> {
    let (first, second) = restart(ops, s, tau, x0)?;
    Ok(compare(
        &first.control.samples[tau - s..],
        &second.control.samples,
    ))
}

/// `ŵ(·, τ, X₁)` against `ŵ(·, s, X₀)` on `[τ, T]`.
pub fn check_state_transition(
    ops: &DiscretizedOperators,
    s: usize,
    tau: usize,
    x0: &AugmentedState,
) -> Result<Discrepancy> {
    let (first, second) = restart(ops, s, tau, x0)?;
    Ok(compare(
        &first.state.samples[tau - s..],
        &second.state.samples,
    ))
}

/// `-(L* + H*) C*C ŵ`: the control recovered from an optimal state trajectory.
pub fn first_representation(
    ops: &DiscretizedOperators,
    state: &StateTrajectory,
) -> Result<ControlTrajectory> {
    let mut weighted = state.clone();
    for x in weighted.samples.iter_mut() {
        *x = ops.ctc() * &*x;
    }
    let mut u = ops.apply_lh_adjoint(state.s_index, &weighted)?;
    for x in u.samples.iter_mut() {
        *x = -&*x;
    }
    Ok(u)
}

/// `û(t)` from the kernels of slice `t` applied to the snapshot `(w, θ)`:
/// the optimal state from `t` is `Z1 w + Σ_p dt Z2(·, p) θ(p)` and the control
/// is its first representation at `t`.
pub fn feedback_from_kernels(
    ops: &DiscretizedOperators,
    kernels: &FeedbackKernels,
    snapshot: &AugmentedState,
) -> Result<DVector<f64>> {
    let t = kernels.t_index();
    if snapshot.s_index != t || snapshot.history.len() != t {
        return Err(MemlqError::IndexOutOfRange(
            "snapshot does not match the kernel slice".into(),
        ));
    }
    let n = ops.n();
    let mut stacked = kernels.z1_stack() * &snapshot.w0;
    for (p, th) in snapshot.history.iter().enumerate() {
        let col = kernels.z2_stack().columns(ops.m() * p, ops.m()) * th * ops.dt();
        stacked += col;
    }
    let state = StateTrajectory::from_vector(t, n, &stacked);
    let u = first_representation(ops, &state)?;
    Ok(u.samples
        .into_iter()
        .next()
        .unwrap_or_else(|| DVector::zeros(ops.m())))
}
