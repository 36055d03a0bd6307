//! Feedback kernels `ψ1, ψ2, Z1, Z2` and the cost operators `P0, P1, P2`.
//!
//! History cells of a slice `t` run over `p = 0..=t`; the last one is the cell
//! that starts at `t_t`, which carries the diagonal values `P1(t, t)` and
//! `P2(t, p, t)` read by the Riccati system and the feedback law.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{MemlqError, Result};
use crate::lifted::DiscretizedOperators;
use crate::open_loop::{conjugate_gradient, LambdaFactor, DENSE_LIMIT};
use crate::problem::{AugmentedState, ControlTrajectory, StateTrajectory};

/// Grid values of `ψ1(σ, t)`, `ψ2(σ, p, t)` (cells `σ = t..N`) and `Z1(σ, t)`,
/// `Z2(σ, p, t)`, `λ(σ, p, t)` (nodes `σ = t..=N`), stacked in row blocks.
#[derive(Debug, Clone)]
pub struct FeedbackKernels {
    t_index: usize,
    n: usize,
    m: usize,
    free: DMatrix<f64>,
    lambda: DMatrix<f64>,
    psi1: DMatrix<f64>,
    psi2: DMatrix<f64>,
    z1: DMatrix<f64>,
    z2: DMatrix<f64>,
    weights: Vec<f64>,
    ctc: DMatrix<f64>,
    dt: f64,
}

/// Representations of `P0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P0Rep {
    /// `∫ Z1*C*C Z1 + ψ1*ψ1`.
    Definition,
    /// `∫ e^{A*(σ-t)} C*C Z1`.
    Resolved,
}

/// Representations of `P1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P1Rep {
    /// `∫ Z1*C*C Z2 + ψ1*ψ2`.
    Definition,
    /// `∫ e^{A*(σ-t)} C*C Z2`.
    Resolved,
    /// `∫ Z1*C*C λ`.
    Third,
}

/// Representations of `P2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P2Rep {
    /// `∫ Z2*C*C Z2 + ψ2*ψ2`.
    Definition,
    /// `∫ λ*C*C Z2`.
    Resolved,
}

fn free_stack(ops: &DiscretizedOperators, t: usize) -> DMatrix<f64> {
    let n = ops.n();
    let nodes = ops.steps() - t + 1;
    let mut out = DMatrix::zeros(n * nodes, n);
    for k in 0..nodes {
        out.rows_mut(n * k, n).copy_from(ops.propagators().get(k));
    }
    out
}

fn check_slice(ops: &DiscretizedOperators, t: usize) -> Result<()> {
    if t > ops.steps() {
        return Err(MemlqError::IndexOutOfRange(format!(
            "slice {t} beyond N = {}",
            ops.steps()
        )));
    }
    Ok(())
}

impl FeedbackKernels {
    /// Builds the kernels of slice `t` against a dense factorization of `Λ`.
    pub fn with_factor(
        ops: &DiscretizedOperators,
        factor: &LambdaFactor,
        t: usize,
    ) -> Result<Self> {
        check_slice(ops, t)?;
        let (n, m, steps) = (ops.n(), ops.m(), ops.steps());
        let k = steps - t;
        let free = free_stack(ops, t);
        let lambda = ops.lambda_slice(t)?;
        let g = factor.response().view((n * t, m * t), (n * (k + 1), m * k));
        let wg = factor
            .weighted_response()
            .view((n * t, m * t), (n * (k + 1), m * k));
        let psi1 = factor.solve(t, &-(wg.transpose() * &free));
        let psi2 = factor.solve(t, &-(wg.transpose() * &lambda));
        let z1 = &free + g * &psi1;
        let z2 = &lambda + g * &psi2;
        Ok(Self::assemble(ops, t, free, lambda, psi1, psi2, z1, z2))
    }

    /// Builds the kernels of slice `t` by conjugate gradient, one column at a time.
    pub fn iterative(ops: &DiscretizedOperators, t: usize, tol: f64) -> Result<Self> {
        check_slice(ops, t)?;
        let (n, m, steps) = (ops.n(), ops.m(), ops.steps());
        let k = steps - t;
        let free = free_stack(ops, t);
        let lambda = ops.lambda_slice(t)?;
        let lift = |cols: &DMatrix<f64>| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let mut psi = DMatrix::zeros(m * k, cols.ncols());
            let mut z = cols.clone();
            for c in 0..cols.ncols() {
                let mut weighted = StateTrajectory::from_vector(t, n, &cols.column(c).into_owned());
                for x in weighted.samples.iter_mut() {
                    *x = ops.ctc() * &*x;
                }
                let rhs = -ops.apply_lh_adjoint(t, &weighted)?.to_vector();
                if k == 0 || rhs.amax() == 0.0 {
                    continue;
                }
                let sol = conjugate_gradient(ops, t, &rhs, tol)?;
                psi.set_column(c, &sol);
                let u = ControlTrajectory::from_vector(t, m, &sol);
                let resp = ops.apply_lh(t, &u)?.to_vector();
                let mut col = z.column_mut(c);
                col += resp;
            }
            Ok((psi, z))
        };
        let (psi1, z1) = lift(&free)?;
        let (psi2, z2) = lift(&lambda)?;
        Ok(Self::assemble(ops, t, free, lambda, psi1, psi2, z1, z2))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        ops: &DiscretizedOperators,
        t: usize,
        free: DMatrix<f64>,
        lambda: DMatrix<f64>,
        psi1: DMatrix<f64>,
        psi2: DMatrix<f64>,
        z1: DMatrix<f64>,
        z2: DMatrix<f64>,
    ) -> Self {
        FeedbackKernels {
            t_index: t,
            n: ops.n(),
            m: ops.m(),
            free,
            lambda,
            psi1,
            psi2,
            z1,
            z2,
            weights: ops.state_weights(t),
            ctc: ops.ctc().clone(),
            dt: ops.dt(),
        }
    }

    pub fn t_index(&self) -> usize {
        self.t_index
    }

    fn node_block(
        &self,
        mat: &DMatrix<f64>,
        sigma: usize,
        cols: usize,
        col0: usize,
    ) -> DMatrix<f64> {
        mat.view((self.n * (sigma - self.t_index), col0), (self.n, cols))
            .into_owned()
    }

    fn cell_block(
        &self,
        mat: &DMatrix<f64>,
        sigma: usize,
        cols: usize,
        col0: usize,
    ) -> DMatrix<f64> {
        mat.view((self.m * (sigma - self.t_index), col0), (self.m, cols))
            .into_owned()
    }

    /// `ψ1(σ, t)` on cell `σ`.
    pub fn psi1(&self, sigma: usize) -> DMatrix<f64> {
        self.cell_block(&self.psi1, sigma, self.n, 0)
    }
    /// `ψ2(σ, p, t)` on cell `σ`.
    pub fn psi2(&self, sigma: usize, p: usize) -> DMatrix<f64> {
        self.cell_block(&self.psi2, sigma, self.m, self.m * p)
    }
    /// `Z1(σ, t)` at node `σ`.
    pub fn z1(&self, sigma: usize) -> DMatrix<f64> {
        self.node_block(&self.z1, sigma, self.n, 0)
    }
    /// `Z2(σ, p, t)` at node `σ`.
    pub fn z2(&self, sigma: usize, p: usize) -> DMatrix<f64> {
        self.node_block(&self.z2, sigma, self.m, self.m * p)
    }
    /// `λ(σ, p, t)` at node `σ`.
    pub fn lambda(&self, sigma: usize, p: usize) -> DMatrix<f64> {
        self.node_block(&self.lambda, sigma, self.m, self.m * p)
    }

    pub fn psi1_stack(&self) -> &DMatrix<f64> {
        &self.psi1
    }
    pub fn psi2_stack(&self) -> &DMatrix<f64> {
        &self.psi2
    }
    pub fn z1_stack(&self) -> &DMatrix<f64> {
        &self.z1
    }
    pub fn z2_stack(&self) -> &DMatrix<f64> {
        &self.z2
    }
    pub fn lambda_stack(&self) -> &DMatrix<f64> {
        &self.lambda
    }
    pub fn free_stack(&self) -> &DMatrix<f64> {
        &self.free
    }

    /// `∫_t^T X(σ)* C*C Y(σ) dσ` for node-stacked `X`, `Y`.
    fn gram(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let mut wy = DMatrix::zeros(y.nrows(), y.ncols());
        for (k, w) in self.weights.iter().enumerate() {
            if *w != 0.0 {
                let block = &self.ctc * y.rows(n * k, n) * *w;
                wy.rows_mut(n * k, n).copy_from(&block);
            }
        }
        x.transpose() * wy
    }

    pub fn p0(&self, rep: P0Rep) -> DMatrix<f64> {
        match rep {
            P0Rep::Definition => {
                self.gram(&self.z1, &self.z1) + self.psi1.transpose() * &self.psi1 * self.dt
            }
            P0Rep::Resolved => self.gram(&self.free, &self.z1),
        }
    }

    /// `[P1(t, 0) .. P1(t, t)]` as an `n × m(t+1)` slab.
    pub fn p1(&self, rep: P1Rep) -> DMatrix<f64> {
        match rep {
            P1Rep::Definition => {
                self.gram(&self.z1, &self.z2) + self.psi1.transpose() * &self.psi2 * self.dt
            }
            P1Rep::Resolved => self.gram(&self.free, &self.z2),
            P1Rep::Third => self.gram(&self.z1, &self.lambda),
        }
    }

    /// Slab whose block `(q, p)` is `P2(t, p, q)`.
    pub fn p2(&self, rep: P2Rep) -> DMatrix<f64> {
        match rep {
            P2Rep::Definition => {
                self.gram(&self.z2, &self.z2) + self.psi2.transpose() * &self.psi2 * self.dt
            }
            P2Rep::Resolved => self.gram(&self.lambda, &self.z2),
        }
    }
}

/// Kernels of slice `t`, dense when `Λ` is small enough and iterative otherwise.
pub fn build_feedback_kernels(
    ops: &DiscretizedOperators,
    t: usize,
    tol: f64,
) -> Result<FeedbackKernels> {
    if ops.m() * ops.steps() <= DENSE_LIMIT {
        FeedbackKernels::with_factor(ops, &LambdaFactor::new(ops)?, t)
    } else {
        FeedbackKernels::iterative(ops, t, tol)
    }
}

fn check_cells(t: usize, cells: &[usize]) -> Result<()> {
    if let Some(p) = cells.iter().find(|p| **p > t) {
        return Err(MemlqError::IndexOutOfRange(format!(
            "history cell {p} beyond slice {t}"
        )));
    }
    Ok(())
}

pub fn compute_p0(ops: &DiscretizedOperators, t: usize, rep: P0Rep) -> Result<DMatrix<f64>> {
    Ok(build_feedback_kernels(ops, t, 1e-12)?.p0(rep))
}

pub fn compute_p1(
    ops: &DiscretizedOperators,
    t: usize,
    p: usize,
    rep: P1Rep,
) -> Result<DMatrix<f64>> {
    check_slice(ops, t)?;
    check_cells(t, &[p])?;
    let m = ops.m();
    let slab = build_feedback_kernels(ops, t, 1e-12)?.p1(rep);
    Ok(slab.columns(m * p, m).into_owned())
}

pub fn compute_p2(
    ops: &DiscretizedOperators,
    t: usize,
    p: usize,
    q: usize,
    rep: P2Rep,
) -> Result<DMatrix<f64>> {
    check_slice(ops, t)?;
    check_cells(t, &[p, q])?;
    let m = ops.m();
    let slab = build_feedback_kernels(ops, t, 1e-12)?.p2(rep);
    Ok(slab.view((m * q, m * p), (m, m)).into_owned())
}

/// How a field was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Direct,
    Integrated,
}

/// `P0(t)`, `P1(t, p)`, `P2(t, p, q)` on every node `t` and history cells `p, q ≤ t`.
#[derive(Debug, Clone)]
pub struct CostOperatorField {
    pub(crate) n: usize,
    pub(crate) m: usize,
    pub(crate) steps: usize,
    pub(crate) dt: f64,
    pub(crate) provenance: Provenance,
    pub(crate) p0: Vec<DMatrix<f64>>,
    /// Empty when the field carries no memory blocks.
    pub(crate) p1: Vec<DMatrix<f64>>,
    pub(crate) p2: Vec<DMatrix<f64>>,
}

/// Bytes needed to store a field on `N` steps.
pub fn field_storage_bytes(n: usize, m: usize, steps: usize, with_memory: bool) -> u64 {
    let (n, m, steps) = (n as u64, m as u64, steps as u64);
    let mut entries = (steps + 1) * n * n;
    if with_memory {
        for i in 0..=steps {
            entries += (i + 1) * n * m + (i + 1) * (i + 1) * m * m;
        }
    }
    8 * entries
}

pub(crate) fn check_budget(required: u64, cap: u64) -> Result<()> {
    if required > cap {
        return Err(MemlqError::MemoryBudgetExceeded { required, cap });
    }
    Ok(())
}

impl CostOperatorField {
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
    pub fn has_memory_blocks(&self) -> bool {
        !self.p1.is_empty()
    }

    pub fn p0(&self, t: usize) -> &DMatrix<f64> {
        &self.p0[t]
    }

    /// `[P1(t, 0) .. P1(t, t)]`.
    pub fn p1_slab(&self, t: usize) -> DMatrix<f64> {
        if self.p1.is_empty() {
            DMatrix::zeros(self.n, self.m * (t + 1))
        } else {
            self.p1[t].clone()
        }
    }

    /// Block `(q, p)` is `P2(t, p, q)`.
    pub fn p2_slab(&self, t: usize) -> DMatrix<f64> {
        if self.p2.is_empty() {
            DMatrix::zeros(self.m * (t + 1), self.m * (t + 1))
        } else {
            self.p2[t].clone()
        }
    }

    pub fn p1(&self, t: usize, p: usize) -> DMatrix<f64> {
        if self.p1.is_empty() {
            return DMatrix::zeros(self.n, self.m);
        }
        self.p1[t].columns(self.m * p, self.m).into_owned()
    }

    pub fn p2(&self, t: usize, p: usize, q: usize) -> DMatrix<f64> {
        if self.p2.is_empty() {
            return DMatrix::zeros(self.m, self.m);
        }
        self.p2[t]
            .view((self.m * q, self.m * p), (self.m, self.m))
            .into_owned()
    }

    /// Largest entry over every block of every slice.
    pub fn sup_norms(&self) -> (f64, f64, f64) {
        let amax = |v: &[DMatrix<f64>]| v.iter().map(|x| x.amax()).fold(0.0, f64::max);
        (amax(&self.p0), amax(&self.p1), amax(&self.p2))
    }

    /// Largest entry of each block in slice `t`.
    pub fn slice_norms(&self, t: usize) -> (f64, f64, f64) {
        let p1 = self.p1.get(t).map_or(0.0, |x| x.amax());
        let p2 = self.p2.get(t).map_or(0.0, |x| x.amax());
        (self.p0[t].amax(), p1, p2)
    }
}

/// Direct field from the definitions of `P0, P1, P2`, one independent slice at a time.
pub fn build_field(ops: &DiscretizedOperators, memory_cap: u64) -> Result<CostOperatorField> {
    let (n, m, steps) = (ops.n(), ops.m(), ops.steps());
    let with_memory = !ops.is_memoryless();
    check_budget(field_storage_bytes(n, m, steps, with_memory), memory_cap)?;
    let factor = LambdaFactor::new(ops)?;
    let slices = (0..=steps)
        .into_par_iter()
        .map(|t| {
            let kern = FeedbackKernels::with_factor(ops, &factor, t)?;
            let p0 = kern.p0(P0Rep::Definition);
            let p0 = (&p0 + p0.transpose()) * 0.5;
            if with_memory {
                let p2 = kern.p2(P2Rep::Definition);
                let p2 = (&p2 + p2.transpose()) * 0.5;
                Ok((p0, kern.p1(P1Rep::Definition), p2))
            } else {
                Ok((p0, DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut field = CostOperatorField {
        n,
        m,
        steps,
        dt: ops.dt(),
        provenance: Provenance::Direct,
        p0: Vec::with_capacity(steps + 1),
        p1: Vec::new(),
        p2: Vec::new(),
    };
    for (p0, p1, p2) in slices {
        field.p0.push(p0);
        if with_memory {
            field.p1.push(p1);
            field.p2.push(p2);
        }
    }
    Ok(field)
}

/// `⟨P0 w, w⟩ + 2 ∫ ⟨P1(s, p) η(p), w⟩ dp + ∬ ⟨P2(s, p, q) η(p), η(q)⟩ dp dq`.
pub fn quadratic_cost_form(field: &CostOperatorField, x0: &AugmentedState) -> Result<f64> {
    let s = x0.s_index;
    if s > field.steps {
        return Err(MemlqError::IndexOutOfRange(format!(
            "start {s} beyond N = {}",
            field.steps
        )));
    }
    if x0.history.len() != s {
        return Err(MemlqError::HistoryLengthMismatch {
            expected: s,
            got: x0.history.len(),
        });
    }
    let w = &x0.w0;
    let mut value = w.dot(&(field.p0(s) * w));
    if s > 0 && field.has_memory_blocks() {
        let m = field.m;
        let eta = crate::problem::stack(&x0.history) * field.dt;
        let p1 = field.p1[s].columns(0, m * s);
        let p2 = field.p2[s].view((0, 0), (m * s, m * s));
        value += 2.0 * w.dot(&(p1 * &eta));
        value += eta.dot(&(p2 * &eta));
    }
    Ok(value)
}
