//! Built-in example problems.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::problem::{KernelSpec, ProblemSpec};

/// `A = -1`, `B = C = 1`, no memory.
pub fn scalar_memoryless(horizon: f64) -> Result<ProblemSpec> {
    scalar(KernelSpec::Zero, horizon)
}

/// `A = -1`, `B = C = 1`, `k(τ) = e^{-τ}`.
pub fn scalar_memory(horizon: f64) -> Result<ProblemSpec> {
    scalar(KernelSpec::Exponential { a: 1.0 }, horizon)
}

fn scalar(kernel: KernelSpec, horizon: f64) -> Result<ProblemSpec> {
    ProblemSpec::new(
        DMatrix::from_element(1, 1, -1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        kernel,
        horizon,
    )
}

/// Undamped oscillator forced on the velocity, `k(τ) = e^{-2τ}`.
pub fn oscillator_memory(horizon: f64) -> Result<ProblemSpec> {
    ProblemSpec::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::identity(2, 2),
        KernelSpec::Exponential { a: 2.0 },
        horizon,
    )
}

/// Dirichlet Laplacian on `n` interior points of `(0, 1)`.
pub fn heat1d_matrix(n: usize) -> DMatrix<f64> {
    let h2 = ((n + 1) * (n + 1)) as f64;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -2.0 * h2
        } else if i.abs_diff(j) == 1 {
            h2
        } else {
            0.0
        }
    })
}

/// Heat equation with distributed control and observation.
pub fn heat1d(n: usize, kernel: KernelSpec, horizon: f64) -> Result<ProblemSpec> {
    ProblemSpec::new(
        heat1d_matrix(n),
        DMatrix::identity(n, n),
        DMatrix::identity(n, n),
        kernel,
        horizon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heat_matrix_stencil() {
        let a = heat1d_matrix(3);
        assert_eq!(a[(0, 0)], -32.0);
        assert_eq!(a[(0, 1)], 16.0);
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a, a.transpose());
    }

    #[test]
    fn presets_validate() {
        assert_eq!(oscillator_memory(1.0).unwrap().n(), 2);
        assert!(scalar_memory(1.0).unwrap().kernel().eval(1.0, 1.0) > 0.36);
        assert!(scalar_memoryless(1.0).unwrap().kernel().is_zero());
        assert_eq!(heat1d(4, KernelSpec::Zero, 0.1).unwrap().m(), 4);
    }
}
