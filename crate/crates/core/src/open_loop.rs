//! Open-loop optimum from the normal equations `Λ_s û = -N_s X₀`.

use nalgebra::{DMatrix, DVector};

use crate::error::{MemlqError, Result};
use crate::lifted::DiscretizedOperators;
use crate::problem::{AugmentedState, ControlTrajectory, SolveResult, StateTrajectory};

/// Largest number of control unknowns for which `Λ` is factored densely.
pub const DENSE_LIMIT: usize = 2000;

/// Cholesky factor of `Λ_0` with cells in reversed order. Because `Λ_s` is the
/// trailing principal block of `Λ_0`, the leading block of the reversed factor
/// is the factor of `Λ_s` for every `s`.
#[derive(Debug, Clone)]
pub struct LambdaFactor {
    m: usize,
    steps: usize,
    response: DMatrix<f64>,
    weighted: DMatrix<f64>,
    chol: DMatrix<f64>,
}

fn reverse_blocks(v: &DMatrix<f64>, block: usize) -> DMatrix<f64> {
    let count = v.nrows() / block;
    let mut out = DMatrix::zeros(v.nrows(), v.ncols());
    for k in 0..count {
        out.rows_mut((count - 1 - k) * block, block)
            .copy_from(&v.rows(k * block, block));
    }
    out
}

impl LambdaFactor {
    pub fn new(ops: &DiscretizedOperators) -> Result<Self> {
        let (n, m, steps) = (ops.n(), ops.m(), ops.steps());
        let dim = m * steps;
        let response = ops.response_matrix();
        let mut weighted = response.clone();
        for (i, w) in ops.node_weights().iter().enumerate() {
            let rows = ops.ctc() * response.rows(n * i, n) * (*w / ops.dt());
            weighted.rows_mut(n * i, n).copy_from(&rows);
        }
        let lam = response.transpose() * &weighted + DMatrix::identity(dim, dim);
        let mut rev = DMatrix::zeros(dim, dim);
        for a in 0..steps {
            for b in 0..steps {
                rev.view_mut((m * a, m * b), (m, m))
                    .copy_from(&lam.view((m * (steps - 1 - a), m * (steps - 1 - b)), (m, m)));
            }
        }
        let chol = rev
            .cholesky()
            .ok_or_else(|| MemlqError::NonFinite("Lambda is not positive definite".into()))?
            .unpack();
        Ok(LambdaFactor {
            m,
            steps,
            response,
            weighted,
            chol,
        })
    }

    /// `G_0`: node rows `0..=N`, cell columns `0..N`.
    pub fn response(&self) -> &DMatrix<f64> {
        &self.response
    }

    /// `dt⁻¹ W G_0` with `W` the trapezoid weights times `C*C`.
    pub fn weighted_response(&self) -> &DMatrix<f64> {
        &self.weighted
    }

    /// Solves `Λ_s X = R` for a block of right-hand sides over the cells `s..N`.
    pub fn solve(&self, s: usize, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.m * (self.steps - s);
        assert_eq!(rhs.nrows(), k, "right-hand side does not match Λ_s");
        if k == 0 {
            return rhs.clone();
        }
        let l = self.chol.view((0, 0), (k, k));
        let y = l
            .solve_lower_triangular(&reverse_blocks(rhs, self.m))
            .expect("Cholesky factor has a nonzero diagonal");
        let x = l
            .tr_solve_lower_triangular(&y)
            .expect("Cholesky factor has a nonzero diagonal");
        reverse_blocks(&x, self.m)
    }
}

/// Linear solver used for the normal equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearSolver {
    /// Dense below [`DENSE_LIMIT`] unknowns, conjugate gradient above.
    Auto,
    Dense,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    pub solver: LinearSolver,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            solver: LinearSolver::Auto,
        }
    }
}

fn check_start(s: usize, x0: &AugmentedState) -> Result<()> {
    if x0.s_index != s {
        return Err(MemlqError::IndexOutOfRange(format!(
            "state is at index {}, problem starts at {s}",
            x0.s_index
        )));
    }
    Ok(())
}

fn grid_norm(ops: &DiscretizedOperators, u: &DVector<f64>) -> f64 {
    (ops.dt() * u.norm_squared()).sqrt()
}

/// Plain conjugate gradient on `Λ_s`; stops at `‖r‖ ≤ tol ‖b‖`.
pub fn conjugate_gradient(
    ops: &DiscretizedOperators,
    s: usize,
    b: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    let m = ops.m();
    let apply = |v: &DVector<f64>| -> Result<DVector<f64>> {
        let u = ControlTrajectory::from_vector(s, m, v);
        Ok(ops.apply_lambda(s, &u)?.to_vector())
    };
    let target = tol * b.norm();
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let cap = 50 * b.len().max(1);
    for _ in 0..cap {
        if rr.sqrt() <= target {
            return Ok(x);
        }
        let ap = apply(&p)?;
        let alpha = rr / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let next = r.norm_squared();
        p = &r + &p * (next / rr);
        rr = next;
    }
    if rr.sqrt() <= target {
        return Ok(x);
    }
    Err(MemlqError::NoConvergence {
        iterations: cap,
        residual: rr.sqrt() / b.norm(),
    })
}

/// Optimal pair from `(s, X₀)` with the default options.
pub fn solve_open_loop(
    ops: &DiscretizedOperators,
    s: usize,
    x0: &AugmentedState,
    tol: f64,
) -> Result<SolveResult> {
    solve_open_loop_with(
        ops,
        s,
        x0,
        &SolveOptions {
            tol,
            solver: LinearSolver::Auto,
        },
    )
}

pub fn solve_open_loop_with(
    ops: &DiscretizedOperators,
    s: usize,
    x0: &AugmentedState,
    opts: &SolveOptions,
) -> Result<SolveResult> {
    check_start(s, x0)?;
    let unknowns = ops.m() * (ops.steps() - s);
    let dense = match opts.solver {
        LinearSolver::Auto => ops.m() * ops.steps() <= DENSE_LIMIT,
        LinearSolver::Dense => true,
        LinearSolver::ConjugateGradient => false,
    };
    if dense {
        let factor = LambdaFactor::new(ops)?;
        return solve_with_factor(ops, &factor, x0);
    }
    let rhs = -ops.apply_n(x0)?.to_vector();
    let u = if rhs.amax() == 0.0 || unknowns == 0 {
        DVector::zeros(unknowns)
    } else {
        conjugate_gradient(ops, s, &rhs, opts.tol)?
    };
    finish(ops, x0, ControlTrajectory::from_vector(s, ops.m(), &u))
}

/// Optimal pair using an existing factorization of `Λ`.
pub fn solve_with_factor(
    ops: &DiscretizedOperators,
    factor: &LambdaFactor,
    x0: &AugmentedState,
) -> Result<SolveResult> {
    let s = x0.s_index;
    let rhs = -ops.apply_n(x0)?.to_vector();
    let u = factor.solve(s, &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()));
    finish(
        ops,
        x0,
        ControlTrajectory::from_vector(s, ops.m(), &u.column(0).into_owned()),
    )
}

fn finish(
    ops: &DiscretizedOperators,
    x0: &AugmentedState,
    control: ControlTrajectory,
) -> Result<SolveResult> {
    let s = x0.s_index;
    let state = trajectory(ops, x0, &control)?;
    let cost = cost_of(ops, s, &state, &control);
    let residual = optimality_residual(ops, s, x0, &control)?;
    Ok(SolveResult {
        control,
        state,
        cost,
        residual,
    })
}

/// `w = E(·, s) X₀ + (L_s + H_s) u`.
pub fn trajectory(
    ops: &DiscretizedOperators,
    x0: &AugmentedState,
    u: &ControlTrajectory,
) -> Result<StateTrajectory> {
    let mut w = ops.free_evolution(x0)?;
    let forced = ops.apply_lh(x0.s_index, u)?;
    for (a, b) in w.samples.iter_mut().zip(&forced.samples) {
        *a += b;
    }
    Ok(w)
}

fn cost_of(
    ops: &DiscretizedOperators,
    s: usize,
    w: &StateTrajectory,
    u: &ControlTrajectory,
) -> f64 {
    ops.state_inner(s, w, w) + ops.control_dot(u, u)
}

/// `J_s(u) = ∫_s^T |C w|² + |u|²` along the trajectory driven by `u`.
pub fn evaluate_cost(
    ops: &DiscretizedOperators,
    s: usize,
    x0: &AugmentedState,
    u: &ControlTrajectory,
) -> Result<f64> {
    check_start(s, x0)?;
    let w = trajectory(ops, x0, u)?;
    Ok(cost_of(ops, s, &w, u))
}

/// Cost accrued on `[t_s, t_τ]` by a state on nodes `s..` and a control on cells `s..`.
pub fn partial_cost(
    ops: &DiscretizedOperators,
    s: usize,
    tau: usize,
    w: &StateTrajectory,
    u: &ControlTrajectory,
) -> f64 {
    let dt = ops.dt();
    let mut acc = 0.0;
    for i in s..=tau {
        let weight = if tau == s {
            0.0
        } else if i == s || i == tau {
            0.5 * dt
        } else {
            dt
        };
        let cw = ops.spec().c() * w.at(i);
        acc += weight * cw.norm_squared();
    }
    for j in s..tau {
        acc += dt * u.at(j).norm_squared();
    }
    acc
}

/// Grid-L² norm of `Λ_s u + N_s X₀`.
pub fn optimality_residual(
    ops: &DiscretizedOperators,
    s: usize,
    x0: &AugmentedState,
    u: &ControlTrajectory,
) -> Result<f64> {
    check_start(s, x0)?;
    let r = ops.apply_lambda(s, u)?.to_vector() + ops.apply_n(x0)?.to_vector();
    Ok(grid_norm(ops, &r))
}

/// Grid-L² norm of `N_s X₀`.
pub fn affine_norm(ops: &DiscretizedOperators, x0: &AugmentedState) -> Result<f64> {
    Ok(grid_norm(ops, &ops.apply_n(x0)?.to_vector()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_grid, KernelSpec, ProblemSpec};

    fn ops(c: f64, kernel: KernelSpec, steps: usize) -> DiscretizedOperators {
        let spec = ProblemSpec::new(
            DMatrix::from_element(1, 1, -1.0),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, c),
            kernel,
            1.0,
        )
        .unwrap();
        DiscretizedOperators::new(&spec, &build_grid(1.0, steps).unwrap()).unwrap()
    }

    #[test]
    fn unobserved_problem_has_zero_control() {
        let o = ops(0.0, KernelSpec::Exponential { a: 1.0 }, 20);
        let x0 = AugmentedState::initial(DVector::from_element(1, 1.0));
        let sol = solve_open_loop(&o, 0, &x0, 1e-10).unwrap();
        assert!(sol.control.samples.iter().all(|u| u[0] == 0.0));
        assert_eq!(sol.cost, 0.0);
        let free = o.free_evolution(&x0).unwrap();
        assert_eq!(sol.state, free);
    }

    #[test]
    fn zero_state_has_zero_control() {
        let o = ops(1.0, KernelSpec::Exponential { a: 1.0 }, 20);
        let x0 = AugmentedState::zero(1, 1, 5);
        let sol = solve_open_loop(&o, 5, &x0, 1e-10).unwrap();
        assert!(sol.control.samples.iter().all(|u| u[0] == 0.0));
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn cost_of_unit_control_without_output() {
        let o = ops(0.0, KernelSpec::Zero, 10);
        let x0 = AugmentedState::initial(DVector::zeros(1));
        let u = ControlTrajectory {
            s_index: 0,
            samples: vec![DVector::from_element(1, 1.0); 10],
        };
        assert!((evaluate_cost(&o, 0, &x0, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(
            optimality_residual(&o, 0, &x0, &ControlTrajectory::zeros(0, 10, 1)).unwrap(),
            0.0
        );
    }

    #[test]
    fn dense_and_iterative_agree() {
        let o = ops(1.0, KernelSpec::Exponential { a: 1.0 }, 40);
        let x0 = AugmentedState {
            s_index: 7,
            w0: DVector::from_element(1, 0.8),
            history: (0..7)
                .map(|p| DVector::from_element(1, 0.3 * p as f64))
                .collect(),
        };
        let dense = solve_open_loop_with(
            &o,
            7,
            &x0,
            &SolveOptions {
                tol: 1e-12,
                solver: LinearSolver::Dense,
            },
        )
        .unwrap();
        let cg = solve_open_loop_with(
            &o,
            7,
            &x0,
            &SolveOptions {
                tol: 1e-12,
                solver: LinearSolver::ConjugateGradient,
            },
        )
        .unwrap();
        let scale = dense.control.to_vector().amax();
        assert!((dense.control.to_vector() - cg.control.to_vector()).amax() <= 1e-8 * scale);
        assert!(cg.residual <= 1e-10 * affine_norm(&o, &x0).unwrap());
    }

    #[test]
    fn factor_solves_every_start() {
        let o = ops(1.0, KernelSpec::Exponential { a: 2.0 }, 12);
        let factor = LambdaFactor::new(&o).unwrap();
        for s in [0, 5, 11] {
            let lam = o.assemble_lambda(s).unwrap();
            let rhs = DMatrix::from_fn(12 - s, 2, |i, j| (i + 3 * j) as f64 - 2.0);
            let x = factor.solve(s, &rhs);
            assert!((&lam * x - rhs).amax() < 1e-12);
        }
    }

    #[test]
    fn perturbation_residual_is_lambda_delta() {
        let o = ops(1.0, KernelSpec::Exponential { a: 1.0 }, 16);
        let x0 = AugmentedState::initial(DVector::from_element(1, 1.0));
        let sol = solve_open_loop(&o, 0, &x0, 1e-10).unwrap();
        let mut u = sol.control.clone();
        u.samples[3][0] += 0.1;
        let r = optimality_residual(&o, 0, &x0, &u).unwrap();
        let mut delta = ControlTrajectory::zeros(0, 16, 1);
        delta.samples[3][0] = 0.1;
        let want = (o.dt()
            * o.apply_lambda(0, &delta)
                .unwrap()
                .to_vector()
                .norm_squared())
        .sqrt();
        assert!((r - want).abs() < 1e-12);
        assert!(r > 0.0);
    }
}
