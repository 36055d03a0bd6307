//! Backward integration of the coupled Riccati system for `P0, P1, P2` and the
//! residual checks of that system, its block form and the kernel derivatives.
//!
//! With the gains `G(t) = B*P0(t) + P1(t,t)*` and `F(t,p) = B*P1(t,p) + P2(t,p,t)`:
//!
//! ```text
//! P0' = -A*P0 - P0 A - C*C + G*G
//! P1' = -A*P1(p) - k(t-p) P0 B + G*F(p)
//! P2' = -k(t-q) B*P1(p) - k(t-p) P1(q)*B + F(q)*F(p)
//! ```
//!
//! with all slices vanishing at `T`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cost_ops::{
    check_budget, field_storage_bytes, CostOperatorField, FeedbackKernels, Provenance,
};
use crate::error::{MemlqError, Result};
use crate::lifted::DiscretizedOperators;
use crate::open_loop::LambdaFactor;
use crate::problem::{ProblemSpec, TimeGrid};

/// Sup-norm above which backward stepping is declared unstable.
pub const BLOW_UP: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Heun,
}

/// One slice of a field: `P0`, the `P1` slab over cells `0..=d` and the `P2`
/// slab, where `d` is the diagonal cell.
#[derive(Debug, Clone)]
struct Slice {
    p0: DMatrix<f64>,
    p1: DMatrix<f64>,
    p2: DMatrix<f64>,
}

/// Right-hand sides at node `i`, restricted to the cells `0..cells`.
fn rhs(ops: &DiscretizedOperators, i: usize, cur: &Slice, cells: usize, memory: bool) -> Slice {
    let spec = ops.spec();
    let (a, b) = (spec.a(), spec.b());
    let m = ops.m();
    let diag = (cur.p1.ncols() / m).saturating_sub(1);
    let gain = if memory {
        b.transpose() * &cur.p0 + cur.p1.columns(m * diag, m).transpose()
    } else {
        b.transpose() * &cur.p0
    };
    let p0 = -(a.transpose() * &cur.p0) - &cur.p0 * a - ops.ctc() + gain.transpose() * &gain;
    if !memory {
        return Slice {
            p0,
            p1: DMatrix::zeros(0, 0),
            p2: DMatrix::zeros(0, 0),
        };
    }
    let p1 = cur.p1.columns(0, m * cells);
    let f = b.transpose() * p1 + cur.p2.view((m * diag, 0), (m, m * cells));
    let kbar: Vec<f64> = (0..cells)
        .map(|p| ops.kernel_cell_mean(i.saturating_sub(p)))
        .collect();
    let p0b = &cur.p0 * b;
    let mut d1 = -(a.transpose() * p1) + gain.transpose() * &f;
    for (p, k) in kbar.iter().enumerate() {
        let mut block = d1.columns_mut(m * p, m);
        block -= &p0b * *k;
    }
    let y = b.transpose() * p1;
    let mut t1 = DMatrix::zeros(m * cells, m * cells);
    for (q, k) in kbar.iter().enumerate() {
        t1.rows_mut(m * q, m).copy_from(&(&y * *k));
    }
    let d2 = f.transpose() * &f - &t1 - t1.transpose();
    Slice { p0, p1: d1, p2: d2 }
}

fn step(cur: &Slice, d: &Slice, h: f64, cells: usize, m: usize, memory: bool) -> Slice {
    let p0 = &cur.p0 - &d.p0 * h;
    if !memory {
        return Slice {
            p0,
            p1: DMatrix::zeros(0, 0),
            p2: DMatrix::zeros(0, 0),
        };
    }
    Slice {
        p0,
        p1: cur.p1.columns(0, m * cells) - &d.p1 * h,
        p2: cur.p2.view((0, 0), (m * cells, m * cells)) - &d.p2 * h,
    }
}

fn average(a: &Slice, b: &Slice) -> Slice {
    let mean = |x: &DMatrix<f64>, y: &DMatrix<f64>| (x + y) * 0.5;
    Slice {
        p0: mean(&a.p0, &b.p0),
        p1: mean(&a.p1, &b.p1),
        p2: mean(&a.p2, &b.p2),
    }
}

fn check_finite(s: &Slice, i: usize) -> Result<()> {
    let sup = s.p0.amax().max(s.p1.amax()).max(s.p2.amax());
    if !sup.is_finite() || sup > BLOW_UP {
        return Err(MemlqError::NonFinite(format!(
            "Riccati slice {i} (sup norm {sup:e})"
        )));
    }
    Ok(())
}

/// Integrated field, stepping backward from the zero slice at `T`.
pub fn integrate_dre(
    ops: &DiscretizedOperators,
    scheme: Scheme,
    memory_cap: u64,
) -> Result<CostOperatorField> {
    let (n, m, steps) = (ops.n(), ops.m(), ops.steps());
    let memory = !ops.is_memoryless();
    check_budget(field_storage_bytes(n, m, steps, memory), memory_cap)?;
    let dt = ops.dt();
    let zero_slab = |cells: usize| {
        if memory {
            (
                DMatrix::zeros(n, m * cells),
                DMatrix::zeros(m * cells, m * cells),
            )
        } else {
            (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
        }
    };
    let (p1, p2) = zero_slab(steps + 1);
    let mut slices = vec![Slice {
        p0: DMatrix::zeros(n, n),
        p1,
        p2,
    }];
    for i in (1..=steps).rev() {
        let cur = slices.last().expect("at least the final slice");
        let cells = i;
        let d = rhs(ops, i, cur, cells, memory);
        let pred = step(cur, &d, dt, cells, m, memory);
        let next = match scheme {
            Scheme::Euler => pred,
            Scheme::Heun => {
                let d2 = rhs(ops, i - 1, &pred, cells, memory);
                step(cur, &average(&d, &d2), dt, cells, m, memory)
            }
        };
        check_finite(&next, i - 1)?;
        slices.push(next);
    }
    slices.reverse();
    let mut field = CostOperatorField {
        n,
        m,
        steps,
        dt,
        provenance: Provenance::Integrated,
        p0: Vec::with_capacity(steps + 1),
        p1: Vec::new(),
        p2: Vec::new(),
    };
    for s in slices {
        field.p0.push(s.p0);
        if memory {
            field.p1.push(s.p1);
            field.p2.push(s.p2);
        }
    }
    Ok(field)
}

/// `P0` of the memoryless problem by Heun steps of the classical Riccati equation.
pub fn classical_riccati_reference(
    spec: &ProblemSpec,
    grid: &TimeGrid,
) -> Result<Vec<DMatrix<f64>>> {
    let (a, b) = (spec.a(), spec.b());
    let ctc = spec.c().transpose() * spec.c();
    let bbt = b * b.transpose();
    let f = |p: &DMatrix<f64>| -&ctc - p * a - a.transpose() * p + p * &bbt * p;
    let dt = grid.dt();
    let n = spec.n();
    let mut out = vec![DMatrix::zeros(n, n)];
    for i in 0..grid.steps() {
        let cur = &out[i];
        let d1 = f(cur);
        let pred = cur - &d1 * dt;
        let d2 = f(&pred);
        let next = cur - (d1 + d2) * (0.5 * dt);
        if !next.amax().is_finite() || next.amax() > BLOW_UP {
            return Err(MemlqError::NonFinite(format!("classical Riccati step {i}")));
        }
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Test vectors for the weak form: canonical basis plus seeded random unit vectors.
#[derive(Debug, Clone)]
pub struct ProbeSet {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl ProbeSet {
    pub fn standard(n: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut family = |dim: usize| {
            let mut out: Vec<DVector<f64>> = (0..dim)
                .map(|i| {
                    let mut e = DVector::zeros(dim);
                    e[i] = 1.0;
                    e
                })
                .collect();
            for _ in 0..5 {
                let v = DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0));
                out.push(&v / v.norm());
            }
            out
        };
        let states = family(n);
        let controls = family(m);
        ProbeSet { states, controls }
    }

    /// `max |yᵀ R x|` over probe pairs.
    fn sup(&self, r: &DMatrix<f64>, left: &[DVector<f64>], right: &[DVector<f64>]) -> f64 {
        let mut best: f64 = 0.0;
        for x in right {
            let rx = r * x;
            for y in left {
                best = best.max(y.dot(&rx).abs());
            }
        }
        best
    }
}

/// Weak-form residuals of the three equations at interior nodes `1..N`.
#[derive(Debug, Clone, PartialEq)]
pub struct DreResidual {
    pub nodes: Vec<usize>,
    pub p0: Vec<f64>,
    pub p1: Vec<f64>,
    pub p2: Vec<f64>,
}

impl DreResidual {
    pub fn sup(&self) -> f64 {
        self.p0
            .iter()
            .chain(&self.p1)
            .chain(&self.p2)
            .fold(0.0, |a, b| a.max(*b))
    }

    pub fn sup_each(&self) -> (f64, f64, f64) {
        let sup = |v: &[f64]| v.iter().fold(0.0f64, |a, b| a.max(*b));
        (sup(&self.p0), sup(&self.p1), sup(&self.p2))
    }
}

fn slice_of(field: &CostOperatorField, t: usize) -> Slice {
    Slice {
        p0: field.p0(t).clone(),
        p1: field.p1_slab(t),
        p2: field.p2_slab(t),
    }
}

fn check_field(field: &CostOperatorField, ops: &DiscretizedOperators) -> Result<()> {
    if field.steps() != ops.steps() || field.n() != ops.n() || field.m() != ops.m() {
        return Err(MemlqError::IndexOutOfRange(
            "field and operators live on different grids".into(),
        ));
    }
    Ok(())
}

/// Central differences of the field against the right-hand sides, probed weakly.
/// History cells are restricted to `p, q ≤ i - 2` so that every slice involved
/// holds them as genuine history.
pub fn dre_residual(
    field: &CostOperatorField,
    ops: &DiscretizedOperators,
    probes: &ProbeSet,
) -> Result<DreResidual> {
    check_field(field, ops)?;
    let (m, steps, dt) = (ops.m(), ops.steps(), ops.dt());
    let memory = field.has_memory_blocks();
    let mut out = DreResidual {
        nodes: Vec::new(),
        p0: Vec::new(),
        p1: Vec::new(),
        p2: Vec::new(),
    };
    for i in 1..steps {
        let cur = slice_of(field, i);
        let cells = i.saturating_sub(1);
        let d = rhs(ops, i, &cur, cells, memory);
        let fd0 = (field.p0(i + 1) - field.p0(i - 1)) / (2.0 * dt);
        out.nodes.push(i);
        out.p0
            .push(probes.sup(&(fd0 - &d.p0), &probes.states, &probes.states));
        let (mut r1, mut r2): (f64, f64) = (0.0, 0.0);
        if memory && cells > 0 {
            let (a, b) = (slice_of(field, i + 1), slice_of(field, i - 1));
            let w = m * cells;
            let fd1 = (a.p1.columns(0, w) - b.p1.columns(0, w)) / (2.0 * dt);
            let fd2 = (a.p2.view((0, 0), (w, w)) - b.p2.view((0, 0), (w, w))) / (2.0 * dt);
            let e1 = fd1 - &d.p1;
            let e2 = fd2 - &d.p2;
            for p in 0..cells {
                r1 = r1.max(probes.sup(
                    &e1.columns(m * p, m).into_owned(),
                    &probes.states,
                    &probes.controls,
                ));
                for q in 0..cells {
                    r2 = r2.max(probes.sup(
                        &e2.view((m * q, m * p), (m, m)).into_owned(),
                        &probes.controls,
                        &probes.controls,
                    ));
                }
            }
        }
        out.p1.push(r1);
        out.p2.push(r2);
    }
    Ok(out)
}

/// Coefficients of the block equation on `H × L²(0, t; U)` at one slice.
///
/// Coordinates are `(x, f_0, .., f_{t-1}, g)`: the state, the history on the
/// grid cells of `[0, t]` and the amplitude `g` of a point mass at `t`, which is
/// where the selectors deliver the feedback channel.
#[derive(Debug, Clone)]
pub struct MatrixFormCoefficients {
    pub t_index: usize,
    /// `C*C` in the state block.
    pub q: DMatrix<f64>,
    /// `A` in the state block.
    pub a: DMatrix<f64>,
    /// `[[BB*, B], [B*, I]]` on `(x, g)`.
    pub b: DMatrix<f64>,
    /// History-to-state memory block `∫ k(t - p) B f(p) dp`.
    pub k1: DMatrix<f64>,
    /// State-to-history block `k(t - q) B* y`.
    pub k2: DMatrix<f64>,
    /// Column weights of the coordinates: `1` on `x` and `g`, `dt` on cells.
    pub weights: Vec<f64>,
}

impl MatrixFormCoefficients {
    pub fn at(ops: &DiscretizedOperators, t: usize) -> Self {
        let (n, m, dt) = (ops.n(), ops.m(), ops.dt());
        let spec = ops.spec();
        let b = spec.b();
        let dim = n + m * (t + 1);
        let g0 = n + m * t;
        let mut q = DMatrix::zeros(dim, dim);
        q.view_mut((0, 0), (n, n)).copy_from(ops.ctc());
        let mut a = DMatrix::zeros(dim, dim);
        a.view_mut((0, 0), (n, n)).copy_from(spec.a());
        let mut bb = DMatrix::zeros(dim, dim);
        bb.view_mut((0, 0), (n, n)).copy_from(&(b * b.transpose()));
        bb.view_mut((0, g0), (n, m)).copy_from(b);
        bb.view_mut((g0, 0), (m, n)).copy_from(&b.transpose());
        bb.view_mut((g0, g0), (m, m)).fill_with_identity();
        let mut k1 = DMatrix::zeros(dim, dim);
        let mut k2 = DMatrix::zeros(dim, dim);
        for p in 0..t {
            let k = ops.kernel_cell_mean(t - p);
            k1.view_mut((0, n + m * p), (n, m))
                .copy_from(&(b * (k * dt)));
            k2.view_mut((n + m * p, 0), (m, n))
                .copy_from(&(b.transpose() * k));
        }
        let mut weights = vec![1.0; n];
        weights.extend(std::iter::repeat_n(dt, m * t));
        weights.extend(std::iter::repeat_n(1.0, m));
        MatrixFormCoefficients {
            t_index: t,
            q,
            a,
            b: bb,
            k1,
            k2,
            weights,
        }
    }
}

/// Kernel matrix of the block operator `P(t)` over `(x, f_0..f_{t-1}, g)`.
fn block_kernel(field: &CostOperatorField, t: usize) -> DMatrix<f64> {
    let (n, m) = (field.n(), field.m());
    let dim = n + m * (t + 1);
    let mut out = DMatrix::zeros(dim, dim);
    out.view_mut((0, 0), (n, n)).copy_from(field.p0(t));
    let p1 = field.p1_slab(t);
    out.view_mut((0, n), (n, m * (t + 1))).copy_from(&p1);
    out.view_mut((n, 0), (m * (t + 1), n))
        .copy_from(&p1.transpose());
    out.view_mut((n, n), (m * (t + 1), m * (t + 1)))
        .copy_from(&field.p2_slab(t));
    out
}

/// Residual of the block equation
/// `P' = -Q - P(𝒜 + 𝒦1) - (𝒜* + 𝒦2)P + P ℐ1 𝔅 ℐ2 P` at interior nodes, as the
/// largest kernel entry over the state and the history cells `≤ i - 2`.
pub fn matrix_form_residual(
    field: &CostOperatorField,
    ops: &DiscretizedOperators,
    memory_cap: u64,
) -> Result<Vec<f64>> {
    check_field(field, ops)?;
    let (n, m, steps, dt) = (ops.n(), ops.m(), ops.steps(), ops.dt());
    let dim = n + m * (steps + 1);
    check_budget(8 * 6 * (dim as u64) * (dim as u64), memory_cap)?;
    let mut out = Vec::with_capacity(steps.saturating_sub(1));
    for i in 1..steps {
        let coef = MatrixFormCoefficients::at(ops, i);
        let kernel = block_kernel(field, i);
        let op = {
            let mut o = kernel.clone();
            for (c, w) in coef.weights.iter().enumerate() {
                let mut col = o.column_mut(c);
                col *= *w;
            }
            o
        };
        let drift = &coef.a + &coef.k1;
        let adj = coef.a.transpose() + &coef.k2;
        let g0 = n + m * i;
        let sel: Vec<usize> = (0..n).chain(g0..g0 + m).collect();
        let left = op.select_columns(&sel);
        let right = op.select_rows(&sel);
        let bsel = coef.b.select_rows(&sel).select_columns(&sel);
        let quad = left * bsel * right;
        let rhs_op = -&coef.q - &op * drift - adj * &op + quad;
        let keep = n + m * (i - 1);
        let mut worst: f64 = 0.0;
        let after = block_kernel(field, i + 1);
        let before = block_kernel(field, i - 1);
        for c in 0..keep {
            for r in 0..keep {
                let slope = (after[(r, c)] - before[(r, c)]) / (2.0 * dt);
                let value = rhs_op[(r, c)] / coef.weights[c];
                worst = worst.max((slope - value).abs());
            }
        }
        out.push(worst);
    }
    Ok(out)
}

/// Largest discrepancies between central differences in `t` and the closed-form
/// derivatives of the feedback kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeReport {
    pub lambda: f64,
    pub psi1: f64,
    pub psi2: f64,
    pub z1: f64,
    pub z2: f64,
}

impl DerivativeReport {
    pub fn max(&self) -> f64 {
        [self.lambda, self.psi1, self.psi2, self.z1, self.z2]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Compares central differences of `λ, ψ1, ψ2, Z1, Z2` at slice `t` with their
/// closed-form `t`-derivatives, over probes `x` and `v`.
pub fn kernel_derivative_check(
    ops: &DiscretizedOperators,
    factor: &LambdaFactor,
    t: usize,
    probes: &ProbeSet,
) -> Result<DerivativeReport> {
    let steps = ops.steps();
    if t < 2 || t + 2 > steps {
        return Err(MemlqError::IndexOutOfRange(format!(
            "derivative check needs 2 <= t <= N - 2, got {t}"
        )));
    }
    let (n, m, dt) = (ops.n(), ops.m(), ops.dt());
    let spec = ops.spec();
    let (a, b) = (spec.a(), spec.b());
    let before = FeedbackKernels::with_factor(ops, factor, t - 1)?;
    let here = FeedbackKernels::with_factor(ops, factor, t)?;
    let after = FeedbackKernels::with_factor(ops, factor, t + 1)?;
    let k = steps - t;
    let g = factor.response().view((n * t, m * t), (n * (k + 1), m * k));
    let wg = factor
        .weighted_response()
        .view((n * t, m * t), (n * (k + 1), m * k));

    // unit control at t seen from σ: e^{A(σ-t)}B + λ(σ, t, t)
    let mut kick = DMatrix::zeros(n * (k + 1), m);
    for j in 0..=k {
        let block = ops.propagators().get(j) * b + here.lambda(t + j, t);
        kick.rows_mut(n * j, n).copy_from(&block);
    }
    let free_a = {
        let mut out = DMatrix::zeros(n * (k + 1), n);
        for j in 0..=k {
            out.rows_mut(n * j, n)
                .copy_from(&(ops.propagators().get(j) * a));
        }
        out
    };
    let node_rows = |mat: &DMatrix<f64>| mat.rows(n, n * k).into_owned();
    let cell_rows = |mat: &DMatrix<f64>| mat.rows(m, m * (k - 1)).into_owned();

    let mut report = DerivativeReport {
        lambda: 0.0,
        psi1: 0.0,
        psi2: 0.0,
        z1: 0.0,
        z2: 0.0,
    };

    let psi1_tt = here.psi1(t);
    for x in &probes.states {
        let x = &DMatrix::from_column_slice(n, 1, x.as_slice());
        let kicked = &kick * (&psi1_tt * x) + &free_a * x;
        let d_psi1 = factor.solve(t, &(wg.transpose() * &kicked));
        let d_z1 = -(&free_a * x) + g * &d_psi1 - &kick * (&psi1_tt * x);
        let fd_psi1 = (after.psi1_stack() * x - before.psi1_stack().rows(2 * m, m * (k - 1)) * x)
            / (2.0 * dt);
        report.psi1 = report.psi1.max(max_abs_diff(&fd_psi1, &cell_rows(&d_psi1)));
        let fd_z1 = (after.z1_stack() * x - before.z1_stack().rows(2 * n, n * k) * x) / (2.0 * dt);
        report.z1 = report.z1.max(max_abs_diff(&fd_z1, &node_rows(&d_z1)));
    }

    let e_stack = here.free_stack();
    for p in 0..=(t - 2) {
        let kp = ops.kernel_cell_mean(t - p);
        let ekb = e_stack * b * kp;
        for v in &probes.controls {
            let v = &DMatrix::from_column_slice(m, 1, v.as_slice());
            let lam_fd = (after.lambda_stack().columns(m * p, m) * v
                - before.lambda_stack().view((2 * n, m * p), (n * k, m)) * v)
                / (2.0 * dt);
            let lam_formula = -(&ekb * v);
            report.lambda = report.lambda.max(max_abs_diff(
                &lam_fd,
                &lam_formula.rows(n, n * k).into_owned(),
            ));

            let psi2_tp = here.psi2(t, p) * v;
            let kicked = &kick * &psi2_tp + &ekb * v;
            let d_psi2 = factor.solve(t, &(wg.transpose() * &kicked));
            let d_z2 = -(&ekb * v) + g * &d_psi2 - &kick * &psi2_tp;
            let fd_psi2 = (after.psi2_stack().columns(m * p, m) * v
                - before.psi2_stack().view((2 * m, m * p), (m * (k - 1), m)) * v)
                / (2.0 * dt);
            report.psi2 = report.psi2.max(max_abs_diff(&fd_psi2, &cell_rows(&d_psi2)));
            let fd_z2 = (after.z2_stack().columns(m * p, m) * v
                - before.z2_stack().view((2 * n, m * p), (n * k, m)) * v)
                / (2.0 * dt);
            report.z2 = report.z2.max(max_abs_diff(&fd_z2, &node_rows(&d_z2)));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost_ops::build_field;
    use crate::presets;
    use crate::problem::{build_grid, KernelSpec};

    fn discretize(spec: &ProblemSpec, horizon: f64, steps: usize) -> DiscretizedOperators {
        DiscretizedOperators::new(spec, &build_grid(horizon, steps).unwrap()).unwrap()
    }

    #[test]
    fn unobserved_field_is_zero() {
        let spec = presets::scalar_memory(1.0).unwrap();
        let spec = spec.with_c(DMatrix::zeros(1, 1)).unwrap();
        let ops = discretize(&spec, 1.0, 20);
        let field = integrate_dre(&ops, Scheme::Heun, u64::MAX).unwrap();
        let (a, b, c) = field.sup_norms();
        assert_eq!((a, b, c), (0.0, 0.0, 0.0));
        let probes = ProbeSet::standard(1, 1, 3);
        let res = dre_residual(&field, &ops, &probes).unwrap();
        assert!(res.sup() <= 1e-10);
        let mf = matrix_form_residual(&field, &ops, u64::MAX).unwrap();
        assert!(mf.iter().all(|r| *r <= 1e-10));
    }

    #[test]
    fn memoryless_reduces_to_classical() {
        let spec = presets::scalar_memoryless(1.0).unwrap();
        let ops = discretize(&spec, 1.0, 400);
        let classical = classical_riccati_reference(&spec, ops.grid()).unwrap();
        let heun = integrate_dre(&ops, Scheme::Heun, u64::MAX).unwrap();
        assert!(!heun.has_memory_blocks());
        assert_eq!(heun.p1(200, 10)[(0, 0)], 0.0);
        for (t, c) in classical.iter().enumerate() {
            assert!((heun.p0(t) - c).amax() <= 1e-12);
        }
        let euler = integrate_dre(&ops, Scheme::Euler, u64::MAX).unwrap();
        let c0 = classical[0][(0, 0)];
        assert!((euler.p0(0)[(0, 0)] - c0).abs() <= 1e-2 * c0);
        assert!((heun.p0(0)[(0, 0)] - c0).abs() <= 3e-3 * c0);
    }

    #[test]
    fn classical_reference_limits() {
        let spec = presets::scalar_memoryless(1e-3).unwrap();
        let p = classical_riccati_reference(&spec, &build_grid(1e-3, 50).unwrap()).unwrap();
        assert!((p[0][(0, 0)] - 1e-3).abs() <= 1e-2 * 1e-3);
        let spec = presets::scalar_memoryless(1.0).unwrap();
        let coarse = classical_riccati_reference(&spec, &build_grid(1.0, 400).unwrap()).unwrap();
        let fine = classical_riccati_reference(&spec, &build_grid(1.0, 4000).unwrap()).unwrap();
        assert!((coarse[0][(0, 0)] - fine[0][(0, 0)]).abs() <= 1e-4 * fine[0][(0, 0)]);
        let unobserved = spec.with_c(DMatrix::zeros(1, 1)).unwrap();
        let zero = classical_riccati_reference(&unobserved, &build_grid(1.0, 10).unwrap()).unwrap();
        assert!(zero.iter().all(|p| p[(0, 0)] == 0.0));
    }

    #[test]
    fn coarse_euler_blows_up() {
        let spec = presets::scalar_memoryless(100.0).unwrap();
        let ops = discretize(&spec, 100.0, 10);
        assert!(matches!(
            integrate_dre(&ops, Scheme::Euler, u64::MAX),
            Err(MemlqError::NonFinite(_))
        ));
    }

    #[test]
    fn memory_budget_is_enforced() {
        let spec = presets::scalar_memory(1.0).unwrap();
        let ops = discretize(&spec, 1.0, 10);
        assert!(matches!(
            integrate_dre(&ops, Scheme::Euler, 1),
            Err(MemlqError::MemoryBudgetExceeded { .. })
        ));
    }

    #[test]
    fn block_form_without_memory_is_the_classical_residual() {
        let spec = presets::oscillator_memory(1.0)
            .unwrap()
            .with_kernel(KernelSpec::Zero)
            .unwrap();
        let ops = discretize(&spec, 1.0, 40);
        let field = build_field(&ops, u64::MAX).unwrap();
        let coef = MatrixFormCoefficients::at(&ops, 10);
        assert!(coef.k1.iter().all(|x| *x == 0.0));
        assert!(coef.k2.iter().all(|x| *x == 0.0));
        let mf = matrix_form_residual(&field, &ops, u64::MAX).unwrap();
        let dt = ops.dt();
        for (k, i) in (1..40).enumerate() {
            let slope = (field.p0(i + 1) - field.p0(i - 1)) / (2.0 * dt);
            let (a, b) = (spec.a(), spec.b());
            let p = field.p0(i);
            let rhs = -(a.transpose() * p) - p * a - ops.ctc() + p * b * b.transpose() * p;
            assert!(((slope - rhs).amax() - mf[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn derivative_check_degenerate_cases() {
        let spec = presets::scalar_memory(1.0).unwrap();
        let probes = ProbeSet::standard(1, 1, 5);
        let zero_k = spec.with_kernel(KernelSpec::Zero).unwrap();
        let ops = discretize(&zero_k, 1.0, 40);
        let factor = LambdaFactor::new(&ops).unwrap();
        let rep = kernel_derivative_check(&ops, &factor, 20, &probes).unwrap();
        assert!(rep.lambda <= 1e-10);
        assert!(rep.psi2 <= 1e-10 && rep.z2 <= 1e-10);
        let unobserved = spec.with_c(DMatrix::zeros(1, 1)).unwrap();
        let ops = discretize(&unobserved, 1.0, 40);
        let factor = LambdaFactor::new(&ops).unwrap();
        let rep = kernel_derivative_check(&ops, &factor, 20, &probes).unwrap();
        assert_eq!(rep.psi1, 0.0);
        assert!(rep.z1 <= ops.dt() * ops.dt());
        assert!(kernel_derivative_check(&ops, &factor, 1, &probes).is_err());
    }

    #[test]
    fn probe_set_shape() {
        let p = ProbeSet::standard(3, 2, 11);
        assert_eq!(p.states.len(), 8);
        assert_eq!(p.controls.len(), 7);
        assert!(p.states.iter().all(|v| (v.norm() - 1.0).abs() < 1e-14));
        let q = ProbeSet::standard(3, 2, 11);
        assert_eq!(p.states, q.states);
    }
}
