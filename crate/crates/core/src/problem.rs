//! Problem data, time grid and the trajectory containers shared by all stages.
//!
//! Controls are piecewise constant on grid cells `[t_j, t_{j+1})`; states live
//! on grid nodes. A control history on `[0, t_s)` is therefore `s` cell values.

use nalgebra::{DMatrix, DVector};

use crate::error::{MemlqError, Result};

/// Scalar memory kernel `k` on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Zero,
    /// `k(τ) = exp(-a τ)`.
    Exponential {
        a: f64,
    },
    /// Values on `N + 1` equispaced nodes of `[0, T]`, linearly interpolated.
    Samples(Vec<f64>),
}

impl KernelSpec {
    pub fn is_zero(&self) -> bool {
        match self {
            KernelSpec::Zero => true,
            KernelSpec::Exponential { .. } => false,
            KernelSpec::Samples(v) => v.iter().all(|x| *x == 0.0),
        }
    }

    /// Evaluates `k(τ)`; arguments are clamped to `[0, T]`.
    pub fn eval(&self, tau: f64, horizon: f64) -> f64 {
        let tau = tau.clamp(0.0, horizon);
        match self {
            KernelSpec::Zero => 0.0,
            KernelSpec::Exponential { a } => (-a * tau).exp(),
            KernelSpec::Samples(v) => {
                let steps = v.len() - 1;
                let x = tau / horizon * steps as f64;
                let i = (x.floor() as usize).min(steps - 1);
                let frac = x - i as f64;
                v[i] * (1.0 - frac) + v[i + 1] * frac
            }
        }
    }
}

/// Unvalidated problem data; matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawProblem {
    pub n: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub kernel: KernelSpec,
    pub horizon: f64,
}

/// Validated problem data `(A, B, C, k, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    kernel: KernelSpec,
    horizon: f64,
}

fn check_len(name: &str, data: &[f64], rows: usize, cols: usize) -> Result<()> {
    if data.len() != rows * cols {
        return Err(MemlqError::DimensionMismatch(format!(
            "{name} has {} entries, expected {rows}x{cols}",
            data.len()
        )));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(MemlqError::NonFinite(name.to_string()));
    }
    Ok(())
}

/// Checks shapes and finiteness and builds a [`ProblemSpec`].
pub fn validate_spec(raw: &RawProblem) -> Result<ProblemSpec> {
    let (n, m) = (raw.n, raw.m);
    if n == 0 || m == 0 {
        return Err(MemlqError::DimensionMismatch(format!(
            "n and m must be positive (n={n}, m={m})"
        )));
    }
    check_len("A", &raw.a, n, n)?;
    check_len("B", &raw.b, n, m)?;
    check_len("C", &raw.c, n, n)?;
    if !raw.horizon.is_finite() {
        return Err(MemlqError::NonFinite("T".into()));
    }
    if raw.horizon <= 0.0 {
        return Err(MemlqError::BadHorizon(raw.horizon));
    }
    match &raw.kernel {
        KernelSpec::Zero => {}
        KernelSpec::Exponential { a } => {
            if !a.is_finite() {
                return Err(MemlqError::NonFinite("kernel rate".into()));
            }
        }
        KernelSpec::Samples(v) => {
            if v.len() < 3 {
                return Err(MemlqError::DimensionMismatch(format!(
                    "kernel samples need N+1 >= 3 values, got {}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(MemlqError::NonFinite("kernel samples".into()));
            }
        }
    }
    Ok(ProblemSpec {
        a: DMatrix::from_row_slice(n, n, &raw.a),
        b: DMatrix::from_row_slice(n, m, &raw.b),
        c: DMatrix::from_row_slice(n, n, &raw.c),
        kernel: raw.kernel.clone(),
        horizon: raw.horizon,
    })
}

fn row_major(mat: &DMatrix<f64>) -> Vec<f64> {
    mat.transpose().as_slice().to_vec()
}

impl ProblemSpec {
    /// Validates matrices given directly.
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        kernel: KernelSpec,
        horizon: f64,
    ) -> Result<Self> {
        let (n, m) = (b.nrows(), b.ncols());
        if a.shape() != (n, n) || c.shape() != (n, n) {
            return Err(MemlqError::DimensionMismatch(format!(
                "A is {:?}, B is {:?}, C is {:?}",
                a.shape(),
                b.shape(),
                c.shape()
            )));
        }
        validate_spec(&RawProblem {
            n,
            m,
            a: row_major(&a),
            b: row_major(&b),
            c: row_major(&c),
            kernel,
            horizon,
        })
    }

    pub fn to_raw(&self) -> RawProblem {
        RawProblem {
            n: self.n(),
            m: self.m(),
            a: row_major(&self.a),
            b: row_major(&self.b),
            c: row_major(&self.c),
            kernel: self.kernel.clone(),
            horizon: self.horizon,
        }
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.b.ncols()
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// `k(τ)`.
    pub fn kernel_at(&self, tau: f64) -> f64 {
        self.kernel.eval(tau, self.horizon)
    }

    /// Same problem with a different output weight.
    pub fn with_c(&self, c: DMatrix<f64>) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            c,
            self.kernel.clone(),
            self.horizon,
        )
    }

    /// Same problem with a different kernel.
    pub fn with_kernel(&self, kernel: KernelSpec) -> Result<Self> {
        Self::new(
            self.a.clone(),
            self.b.clone(),
            self.c.clone(),
            kernel,
            self.horizon,
        )
    }
}

/// Equispaced grid `t_i = i T / N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    horizon: f64,
    dt: f64,
}

pub fn build_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    if !horizon.is_finite() || horizon <= 0.0 {
        return Err(MemlqError::BadHorizon(horizon));
    }
    if steps < 2 {
        return Err(MemlqError::BadGrid(steps));
    }
    Ok(TimeGrid {
        steps,
        horizon,
        dt: horizon / steps as f64,
    })
}

impl TimeGrid {
    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
}

/// Augmented state `X = (w, η)`: the state at `t_s` and the control history on
/// `[0, t_s)` as `s` cell values.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub s_index: usize,
    pub w0: DVector<f64>,
    pub history: Vec<DVector<f64>>,
}

pub fn make_augmented_state(
    w0: DVector<f64>,
    history: Vec<DVector<f64>>,
    s_index: usize,
) -> Result<AugmentedState> {
    if history.len() != s_index {
        return Err(MemlqError::HistoryLengthMismatch {
            expected: s_index,
            got: history.len(),
        });
    }
    if w0.iter().any(|x| !x.is_finite()) {
        return Err(MemlqError::NonFinite("w0".into()));
    }
    if let Some(first) = history.first() {
        let m = first.len();
        if history.iter().any(|h| h.len() != m) {
            return Err(MemlqError::DimensionMismatch(
                "history samples differ in length".into(),
            ));
        }
        if history.iter().any(|h| h.iter().any(|x| !x.is_finite())) {
            return Err(MemlqError::NonFinite("history".into()));
        }
    }
    Ok(AugmentedState {
        s_index,
        w0,
        history,
    })
}

impl AugmentedState {
    /// State at time 0 with no history.
    pub fn initial(w0: DVector<f64>) -> Self {
        AugmentedState {
            s_index: 0,
            w0,
            history: Vec::new(),
        }
    }

    /// Builds the state from node samples `η(t_0..t_s)`; cell values are the
    /// means of adjacent samples. For `s = 0` the samples are ignored.
    pub fn from_node_history(
        w0: DVector<f64>,
        samples: &[DVector<f64>],
        s_index: usize,
    ) -> Result<Self> {
        if s_index == 0 {
            if samples.len() > 1 {
                return Err(MemlqError::HistoryLengthMismatch {
                    expected: 1,
                    got: samples.len(),
                });
            }
            return make_augmented_state(w0, Vec::new(), 0);
        }
        if samples.len() != s_index + 1 {
            return Err(MemlqError::HistoryLengthMismatch {
                expected: s_index + 1,
                got: samples.len(),
            });
        }
        let cells = samples.windows(2).map(|w| (&w[0] + &w[1]) * 0.5).collect();
        make_augmented_state(w0, cells, s_index)
    }

    pub fn zero(n: usize, m: usize, s_index: usize) -> Self {
        AugmentedState {
            s_index,
            w0: DVector::zeros(n),
            history: vec![DVector::zeros(m); s_index],
        }
    }
}

/// Control on the cells `s..N`; `samples[k]` is the value on cell `s + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    pub s_index: usize,
    pub samples: Vec<DVector<f64>>,
}

impl ControlTrajectory {
    pub fn zeros(s_index: usize, steps: usize, m: usize) -> Self {
        ControlTrajectory {
            s_index,
            samples: vec![DVector::zeros(m); steps - s_index],
        }
    }

    /// Packs the cells into one column vector.
    pub fn to_vector(&self) -> DVector<f64> {
        stack(&self.samples)
    }

    pub fn from_vector(s_index: usize, m: usize, v: &DVector<f64>) -> Self {
        ControlTrajectory {
            s_index,
            samples: unstack(v, m),
        }
    }

    /// Value on the cell starting at node `i`.
    pub fn at(&self, i: usize) -> &DVector<f64> {
        &self.samples[i - self.s_index]
    }
}

/// State on the nodes `s..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    pub s_index: usize,
    pub samples: Vec<DVector<f64>>,
}

impl StateTrajectory {
    pub fn to_vector(&self) -> DVector<f64> {
        stack(&self.samples)
    }

    pub fn from_vector(s_index: usize, n: usize, v: &DVector<f64>) -> Self {
        StateTrajectory {
            s_index,
            samples: unstack(v, n),
        }
    }

    pub fn at(&self, i: usize) -> &DVector<f64> {
        &self.samples[i - self.s_index]
    }
}

/// Optimal pair with its cost and the optimality residual.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub control: ControlTrajectory,
    pub state: StateTrajectory,
    pub cost: f64,
    pub residual: f64,
}

pub(crate) fn stack(parts: &[DVector<f64>]) -> DVector<f64> {
    let total = parts.iter().map(|p| p.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.len()).copy_from(p);
        at += p.len();
    }
    out
}

pub(crate) fn unstack(v: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
    (0..v.len() / block)
        .map(|k| v.rows(k * block, block).into_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(kernel: KernelSpec, horizon: f64) -> RawProblem {
        RawProblem {
            n: 1,
            m: 1,
            a: vec![0.0],
            b: vec![1.0],
            c: vec![1.0],
            kernel,
            horizon,
        }
    }

    #[test]
    fn accepts_scalar_problem() {
        let spec = validate_spec(&scalar(KernelSpec::Zero, 1.0)).unwrap();
        assert_eq!((spec.n(), spec.m()), (1, 1));
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let raw = RawProblem {
            n: 2,
            m: 1,
            a: vec![0.0; 4],
            b: vec![1.0; 3],
            c: vec![1.0; 4],
            kernel: KernelSpec::Zero,
            horizon: 1.0,
        };
        assert!(matches!(
            validate_spec(&raw),
            Err(MemlqError::DimensionMismatch(_))
        ));
        assert_eq!(
            validate_spec(&scalar(KernelSpec::Zero, -1.0)),
            Err(MemlqError::BadHorizon(-1.0))
        );
        let mut nan = scalar(KernelSpec::Zero, 1.0);
        nan.a[0] = f64::NAN;
        assert!(matches!(validate_spec(&nan), Err(MemlqError::NonFinite(_))));
        let ker = scalar(KernelSpec::Exponential { a: f64::INFINITY }, 1.0);
        assert!(matches!(validate_spec(&ker), Err(MemlqError::NonFinite(_))));
    }

    #[test]
    fn matrix_constructor_checks_shapes() {
        let err = ProblemSpec::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 3),
            KernelSpec::Zero,
            1.0,
        );
        assert!(matches!(err, Err(MemlqError::DimensionMismatch(_))));
    }

    #[test]
    fn raw_round_trip() {
        let raw = RawProblem {
            n: 2,
            m: 1,
            a: vec![0.0, 1.0, -2.0, -0.5],
            b: vec![0.0, 1.0],
            c: vec![1.0, 0.0, 0.3, 1.0],
            kernel: KernelSpec::Exponential { a: 2.0 },
            horizon: 1.5,
        };
        let spec = validate_spec(&raw).unwrap();
        assert_eq!(spec.to_raw(), raw);
        assert_eq!(spec.a()[(1, 0)], -2.0);
    }

    #[test]
    fn grid_nodes() {
        let g = build_grid(1.0, 4).unwrap();
        assert_eq!(g.nodes(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(build_grid(2.0, 2).unwrap().dt(), 1.0);
        assert_eq!(build_grid(1.0, 1), Err(MemlqError::BadGrid(1)));
        let g = build_grid(0.7, 13).unwrap();
        assert_eq!(g.node(13), 0.7);
        let eps = f64::EPSILON * 4.0;
        for w in g.nodes().windows(2) {
            assert!((w[1] - w[0] - g.dt()).abs() <= eps * (1.0 + w[1]));
        }
    }

    #[test]
    fn augmented_state_lengths() {
        let x = make_augmented_state(DVector::from_vec(vec![1.0, 0.0]), vec![], 0).unwrap();
        assert!(x.history.is_empty());
        let y = AugmentedState::from_node_history(
            DVector::from_vec(vec![1.0]),
            &[DVector::from_vec(vec![0.5]), DVector::from_vec(vec![0.2])],
            1,
        )
        .unwrap();
        assert_eq!(y.history.len(), 1);
        assert!((y.history[0][0] - 0.35).abs() < 1e-15);
        let bad = AugmentedState::from_node_history(
            DVector::from_vec(vec![1.0]),
            &[DVector::from_vec(vec![0.5])],
            2,
        );
        assert_eq!(
            bad,
            Err(MemlqError::HistoryLengthMismatch {
                expected: 3,
                got: 1
            })
        );
    }

    #[test]
    fn sampled_kernel_interpolates() {
        let k = KernelSpec::Samples(vec![0.0, 1.0, 3.0]);
        assert_eq!(k.eval(0.25, 1.0), 0.5);
        assert_eq!(k.eval(0.75, 1.0), 2.0);
        assert_eq!(k.eval(1.0, 1.0), 3.0);
        assert_eq!(k.eval(2.0, 1.0), 3.0);
    }
}
