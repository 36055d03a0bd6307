//! Grid realizations of the lifted solution operators.
//!
//! With cell controls `u_j` the state obeys the exact one-step recursion
//! `w_{i+1} = E_1 w_i + Φ B (u_i + Σ_{l≤i} κ_{i-l} v_l)`, where `v` is the
//! full control record (history followed by the window control) and `κ_d`
//! are cell-pair averages of the kernel. Unrolling it gives
//!
//! * `(L_s u)_i = Σ_j Γ_{i-j} u_j` with `Γ_d = E_{d-1} Φ B`,
//! * `(H_s u)_i = Σ_j h_{i-j} u_j` with `h_d = Σ_{e<d} Γ_{d-e} κ_e`,
//! * `λ(σ, p, s) = dt⁻¹ Σ_{j=s}^{σ-1} Γ_{σ-j} κ_{j-p}`.
//!
//! States are paired with trapezoid node weights, controls with `dt` per cell;
//! adjoints are exact transposes under these pairings.

use nalgebra::{DMatrix, DVector};

use crate::error::{MemlqError, Result};
use crate::problem::{
    AugmentedState, ControlTrajectory, KernelSpec, ProblemSpec, StateTrajectory, TimeGrid,
};
use crate::quadrature::unit_interval;
use crate::semigroup::{build_propagators, input_propagator, PropagatorCache};

/// Immutable discretization of one problem on one grid.
#[derive(Debug, Clone)]
pub struct DiscretizedOperators {
    spec: ProblemSpec,
    grid: TimeGrid,
    props: PropagatorCache,
    ctc: DMatrix<f64>,
    gamma: Vec<DMatrix<f64>>,
    hblk: Vec<DMatrix<f64>>,
    gblk: Vec<DMatrix<f64>>,
    kappa: Vec<f64>,
    kernel_lag: Vec<f64>,
    kernel_mean: Vec<f64>,
    weights: Vec<f64>,
    memoryless: bool,
}

fn check_start(s: usize, grid: &TimeGrid) -> Result<()> {
    if s > grid.steps() {
        return Err(MemlqError::IndexOutOfRange(format!(
            "start index {s} beyond N = {}",
            grid.steps()
        )));
    }
    Ok(())
}

impl DiscretizedOperators {
    pub fn new(spec: &ProblemSpec, grid: &TimeGrid) -> Result<Self> {
        let steps = grid.steps();
        if let KernelSpec::Samples(v) = spec.kernel() {
            if v.len() != steps + 1 {
                return Err(MemlqError::DimensionMismatch(format!(
                    "kernel has {} samples, grid has {} nodes",
                    v.len(),
                    steps + 1
                )));
            }
        }
        let (n, m) = (spec.n(), spec.m());
        let dt = grid.dt();
        let props = build_propagators(spec.a(), grid)?;
        let phi_b = input_propagator(spec.a(), dt)? * spec.b();
        let mut gamma = vec![DMatrix::zeros(n, m)];
        for d in 1..=steps {
            gamma.push(props.get(d - 1) * &phi_b);
        }

        let memoryless = spec.kernel().is_zero();
        let k = |tau: f64| spec.kernel_at(tau);
        let kappa: Vec<f64> = (0..steps)
            .map(|d| {
                if memoryless {
                    return 0.0;
                }
                let d = d as f64;
                if d == 0.0 {
                    dt * unit_interval(|r| (1.0 - r) * k(r * dt))
                } else {
                    dt * unit_interval(|r| (1.0 - r) * (k((d + r) * dt) + k((d - r) * dt)))
                }
            })
            .collect();
        let kernel_lag = (0..=steps).map(|d| k(d as f64 * dt)).collect();
        let kernel_mean = (0..=steps)
            .map(|d| {
                if d == 0 || memoryless {
                    k(0.0)
                } else {
                    unit_interval(|r| k((d as f64 - 1.0 + r) * dt))
                }
            })
            .collect();

        let mut hblk = vec![DMatrix::zeros(n, m); steps + 1];
        if !memoryless {
            for (d, h) in hblk.iter_mut().enumerate().skip(1) {
                for (e, kap) in kappa.iter().enumerate().take(d) {
                    *h += &gamma[d - e] * *kap;
                }
            }
        }
        let gblk = gamma.iter().zip(&hblk).map(|(g, h)| g + h).collect();
        let weights = (0..=steps)
            .map(|i| if i == 0 || i == steps { 0.5 * dt } else { dt })
            .collect();
        let c = spec.c();
        let ops = DiscretizedOperators {
            spec: spec.clone(),
            grid: *grid,
            props,
            ctc: c.transpose() * c,
            gamma,
            hblk,
            gblk,
            kappa,
            kernel_lag,
            kernel_mean,
            weights,
            memoryless,
        };
        if ops.gblk.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(MemlqError::NonFinite("input response".into()));
        }
        Ok(ops)
    }

    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn propagators(&self) -> &PropagatorCache {
        &self.props
    }
    pub fn n(&self) -> usize {
        self.spec.n()
    }
    pub fn m(&self) -> usize {
        self.spec.m()
    }
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }
    pub fn dt(&self) -> f64 {
        self.grid.dt()
    }
    /// `CᵀC`.
    pub fn ctc(&self) -> &DMatrix<f64> {
        &self.ctc
    }
    pub fn is_memoryless(&self) -> bool {
        self.memoryless
    }
    /// One-cell input response `Γ_d`, zero for `d = 0`.
    pub fn gamma(&self, d: usize) -> &DMatrix<f64> {
        &self.gamma[d]
    }
    /// Memory part `h_d` of the input response.
    pub fn memory_response(&self, d: usize) -> &DMatrix<f64> {
        &self.hblk[d]
    }
    /// Total input response `g_d = Γ_d + h_d` of a unit cell control `d` nodes later.
    pub fn response(&self, d: usize) -> &DMatrix<f64> {
        &self.gblk[d]
    }
    /// Cell-pair kernel weight `κ_d` (already multiplied by `dt`).
    pub fn kappa(&self, d: usize) -> f64 {
        self.kappa[d]
    }
    /// `k(d dt)`.
    pub fn kernel_lag(&self, d: usize) -> f64 {
        self.kernel_lag[d]
    }
    /// Mean of `k` over `[(d-1) dt, d dt]`; `k(0)` for `d = 0`.
    pub fn kernel_cell_mean(&self, d: usize) -> f64 {
        self.kernel_mean[d]
    }
    /// Trapezoid weights of the full grid.
    pub fn node_weights(&self) -> &[f64] {
        &self.weights
    }

    /// Trapezoid weights of the nodes `s..=N` for integrals over `[t_s, T]`.
    pub fn state_weights(&self, s: usize) -> Vec<f64> {
        let steps = self.steps();
        let dt = self.dt();
        (s..=steps)
            .map(|i| {
                if s == steps {
                    0.0
                } else if i == s || i == steps {
                    0.5 * dt
                } else {
                    dt
                }
            })
            .collect()
    }

    fn check_control(&self, s: usize, u: &ControlTrajectory) -> Result<()> {
        check_start(s, &self.grid)?;
        if u.s_index != s || u.samples.len() != self.steps() - s {
            return Err(MemlqError::IndexOutOfRange(format!(
                "control starts at {} with {} cells, expected start {s} with {}",
                u.s_index,
                u.samples.len(),
                self.steps() - s
            )));
        }
        if u.samples.iter().any(|x| x.len() != self.m()) {
            return Err(MemlqError::DimensionMismatch(
                "control sample length".into(),
            ));
        }
        Ok(())
    }

    fn check_state(&self, s: usize, v: &StateTrajectory) -> Result<()> {
        check_start(s, &self.grid)?;
        if v.s_index != s || v.samples.len() != self.steps() - s + 1 {
            return Err(MemlqError::IndexOutOfRange(format!(
                "state starts at {} with {} nodes, expected start {s} with {}",
                v.s_index,
                v.samples.len(),
                self.steps() - s + 1
            )));
        }
        if v.samples.iter().any(|x| x.len() != self.n()) {
            return Err(MemlqError::DimensionMismatch("state sample length".into()));
        }
        Ok(())
    }

    fn check_augmented(&self, x0: &AugmentedState) -> Result<()> {
        check_start(x0.s_index, &self.grid)?;
        if x0.w0.len() != self.n() {
            return Err(MemlqError::DimensionMismatch("w0 length".into()));
        }
        if x0.history.len() != x0.s_index {
            return Err(MemlqError::HistoryLengthMismatch {
                expected: x0.s_index,
                got: x0.history.len(),
            });
        }
        if x0.history.iter().any(|h| h.len() != self.m()) {
            return Err(MemlqError::DimensionMismatch(
                "history sample length".into(),
            ));
        }
        Ok(())
    }

    fn convolve(&self, s: usize, blocks: &[DMatrix<f64>], u: &[DVector<f64>]) -> StateTrajectory {
        let steps = self.steps();
        let samples = (s..=steps)
            .map(|i| {
                let mut acc = DVector::zeros(self.n());
                for j in s..i {
                    acc.gemv(1.0, &blocks[i - j], &u[j - s], 1.0);
                }
                acc
            })
            .collect();
        StateTrajectory {
            s_index: s,
            samples,
        }
    }

    /// `L_s u`.
    pub fn apply_l(&self, s: usize, u: &ControlTrajectory) -> Result<StateTrajectory> {
        self.check_control(s, u)?;
        Ok(self.convolve(s, &self.gamma, &u.samples))
    }

    /// `H_s u`: memory of the window control pushed through the dynamics.
    pub fn apply_h(&self, s: usize, u: &ControlTrajectory) -> Result<StateTrajectory> {
        self.check_control(s, u)?;
        let memory: Vec<DVector<f64>> = (s..self.steps())
            .map(|j| {
                let mut acc = DVector::zeros(self.m());
                for l in s..=j {
                    acc.axpy(self.kappa[j - l], &u.samples[l - s], 1.0);
                }
                acc
            })
            .collect();
        Ok(self.convolve(s, &self.gamma, &memory))
    }

    /// `H_s u` in swapped order, `Σ_l [Σ_j Γ_{i-j} κ_{j-l}] u_l`.
    pub fn apply_h_fubini(&self, s: usize, u: &ControlTrajectory) -> Result<StateTrajectory> {
        self.check_control(s, u)?;
        Ok(self.convolve(s, &self.hblk, &u.samples))
    }

    /// `(L_s + H_s) u`.
    pub fn apply_lh(&self, s: usize, u: &ControlTrajectory) -> Result<StateTrajectory> {
        self.check_control(s, u)?;
        Ok(self.convolve(s, &self.gblk, &u.samples))
    }

    /// `λ(σ, p, s)` for a history cell `p ≤ s ≤ σ`; `p = s` is the cell that
    /// starts at `t_s`.
    pub fn lambda_eval(&self, sigma: usize, p: usize, s: usize) -> Result<DMatrix<f64>> {
        if !(p <= s && s <= sigma && sigma <= self.steps()) {
            return Err(MemlqError::IndexOutOfRange(format!(
                "lambda needs p <= s <= t <= N, got p={p}, s={s}, t={sigma}"
            )));
        }
        let mut acc = DMatrix::zeros(self.n(), self.m());
        for j in s..sigma {
            acc += &self.gamma[sigma - j] * self.kappa[j - p];
        }
        Ok(acc / self.dt())
    }

    /// All `λ(σ, p, s)` for `σ = s..=N` (row blocks) and `p = 0..=s` (column blocks).
    pub fn lambda_slice(&self, s: usize) -> Result<DMatrix<f64>> {
        check_start(s, &self.grid)?;
        let (n, m, steps) = (self.n(), self.m(), self.steps());
        let mut out = DMatrix::zeros(n * (steps - s + 1), m * (s + 1));
        if self.memoryless {
            return Ok(out);
        }
        let e1 = self.props.get(1);
        let g1 = &self.gamma[1] / self.dt();
        for p in 0..=s {
            let mut cur = DMatrix::zeros(n, m);
            for sigma in s..steps {
                let next = e1 * &cur + &g1 * self.kappa[sigma - p];
                out.view_mut((n * (sigma + 1 - s), m * p), (n, m))
                    .copy_from(&next);
                cur = next;
            }
        }
        Ok(out)
    }

    /// `𝒦_s η`: the response on `[t_s, T]` to the history cells.
    pub fn apply_k(&self, s: usize, history: &[DVector<f64>]) -> Result<StateTrajectory> {
        check_start(s, &self.grid)?;
        if history.len() != s {
            return Err(MemlqError::HistoryLengthMismatch {
                expected: s,
                got: history.len(),
            });
        }
        let steps = self.steps();
        if self.memoryless || s == 0 {
            return Ok(StateTrajectory {
                s_index: s,
                samples: vec![DVector::zeros(self.n()); steps - s + 1],
            });
        }
        let memory: Vec<DVector<f64>> = (s..steps)
            .map(|j| {
                let mut acc = DVector::zeros(self.m());
                for (p, eta) in history.iter().enumerate() {
                    acc.axpy(self.kappa[j - p], eta, 1.0);
                }
                acc
            })
            .collect();
        Ok(self.convolve(s, &self.gamma, &memory))
    }

    /// Free evolution `E(·, s) X₀` on the nodes `s..=N`.
    pub fn free_evolution(&self, x0: &AugmentedState) -> Result<StateTrajectory> {
        self.check_augmented(x0)?;
        let s = x0.s_index;
        let mut out = self.apply_k(s, &x0.history)?;
        for (k, w) in out.samples.iter_mut().enumerate() {
            w.gemv(1.0, self.props.get(k), &x0.w0, 1.0);
        }
        Ok(out)
    }

    /// `E(t, s) X₀`.
    pub fn apply_e(&self, t: usize, x0: &AugmentedState) -> Result<DVector<f64>> {
        let s = x0.s_index;
        if t < s || t > self.steps() {
            return Err(MemlqError::IndexOutOfRange(format!(
                "E(t, s) needs s <= t <= N, got s={s}, t={t}"
            )));
        }
        Ok(self.free_evolution(x0)?.samples.swap_remove(t - s))
    }

    fn adjoint(&self, s: usize, blocks: &[DMatrix<f64>], v: &StateTrajectory) -> ControlTrajectory {
        let steps = self.steps();
        let dt = self.dt();
        let samples = (s..steps)
            .map(|l| {
                let mut acc = DVector::zeros(self.m());
                for i in (l + 1)..=steps {
                    acc.gemv_tr(self.weights[i] / dt, &blocks[i - l], &v.samples[i - s], 1.0);
                }
                acc
            })
            .collect();
        ControlTrajectory {
            s_index: s,
            samples,
        }
    }

    /// `L_s* v`.
    pub fn apply_l_adjoint(&self, s: usize, v: &StateTrajectory) -> Result<ControlTrajectory> {
        self.check_state(s, v)?;
        Ok(self.adjoint(s, &self.gamma, v))
    }

    /// `H_s* v`.
    pub fn apply_h_adjoint(&self, s: usize, v: &StateTrajectory) -> Result<ControlTrajectory> {
        self.check_state(s, v)?;
        Ok(self.adjoint(s, &self.hblk, v))
    }

    /// `(L_s* + H_s*) v`. The value on cell `l` does not depend on `s`.
    pub fn apply_lh_adjoint(&self, s: usize, v: &StateTrajectory) -> Result<ControlTrajectory> {
        self.check_state(s, v)?;
        Ok(self.adjoint(s, &self.gblk, v))
    }

    fn weigh_output(&self, w: &mut StateTrajectory) {
        for x in w.samples.iter_mut() {
            *x = &self.ctc * &*x;
        }
    }

    /// `Λ_s u = u + (L* + H*) C*C (L + H) u`.
    pub fn apply_lambda(&self, s: usize, u: &ControlTrajectory) -> Result<ControlTrajectory> {
        let mut w = self.apply_lh(s, u)?;
        self.weigh_output(&mut w);
        let mut out = self.adjoint(s, &self.gblk, &w);
        for (o, x) in out.samples.iter_mut().zip(&u.samples) {
            *o += x;
        }
        Ok(out)
    }

    /// `N_s X₀ = (L* + H*) C*C E(·, s) X₀`.
    pub fn apply_n(&self, x0: &AugmentedState) -> Result<ControlTrajectory> {
        let mut w = self.free_evolution(x0)?;
        self.weigh_output(&mut w);
        Ok(self.adjoint(x0.s_index, &self.gblk, &w))
    }

    /// `⟨M_s X₀, X₁⟩ = ∫ ⟨C E X₀, C E X₁⟩`.
    pub fn gram_m(&self, x0: &AugmentedState, x1: &AugmentedState) -> Result<f64> {
        if x0.s_index != x1.s_index {
            return Err(MemlqError::IndexOutOfRange(
                "states at different start times".into(),
            ));
        }
        let a = self.free_evolution(x0)?;
        let b = self.free_evolution(x1)?;
        Ok(self.state_inner(x0.s_index, &a, &b))
    }

    /// Weighted pairing of two state trajectories through `C*C`.
    pub fn state_inner(&self, s: usize, a: &StateTrajectory, b: &StateTrajectory) -> f64 {
        self.state_weights(s)
            .iter()
            .zip(a.samples.iter().zip(&b.samples))
            .map(|(w, (x, y))| w * x.dot(&(&self.ctc * y)))
            .sum()
    }

    /// Plain trapezoid pairing of two state trajectories.
    pub fn state_dot(&self, s: usize, a: &StateTrajectory, b: &StateTrajectory) -> f64 {
        self.state_weights(s)
            .iter()
            .zip(a.samples.iter().zip(&b.samples))
            .map(|(w, (x, y))| w * x.dot(y))
            .sum()
    }

    /// `∫ ⟨u, v⟩` over cells.
    pub fn control_dot(&self, u: &ControlTrajectory, v: &ControlTrajectory) -> f64 {
        self.dt()
            * u.samples
                .iter()
                .zip(&v.samples)
                .map(|(a, b)| a.dot(b))
                .sum::<f64>()
    }

    /// Input-to-state matrix of `L_s + H_s` from `t_0`: node rows `0..=N`,
    /// cell columns `0..N`. The operator for start `s` is its trailing block.
    pub fn response_matrix(&self) -> DMatrix<f64> {
        let (n, m, steps) = (self.n(), self.m(), self.steps());
        let mut g = DMatrix::zeros(n * (steps + 1), m * steps);
        for i in 1..=steps {
            for l in 0..i {
                g.view_mut((n * i, m * l), (n, m))
                    .copy_from(&self.gblk[i - l]);
            }
        }
        g
    }

    /// Dense `Λ_s`, assembled column by column from [`Self::apply_lambda`].
    pub fn assemble_lambda(&self, s: usize) -> Result<DMatrix<f64>> {
        check_start(s, &self.grid)?;
        let m = self.m();
        let dim = m * (self.steps() - s);
        let mut out = DMatrix::zeros(dim, dim);
        for col in 0..dim {
            let mut e = DVector::zeros(dim);
            e[col] = 1.0;
            let u = ControlTrajectory::from_vector(s, m, &e);
            out.set_column(col, &self.apply_lambda(s, &u)?.to_vector());
        }
        Ok(out)
    }
}
