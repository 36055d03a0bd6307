//! Matrix exponential and the cached grid propagators `E_j = exp(j dt A)`.

use nalgebra::DMatrix;

use crate::error::{MemlqError, Result};
use crate::problem::TimeGrid;

const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn norm1(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.iter().any(|x| !x.is_finite()) {
        return Err(MemlqError::NonFinite("matrix exponential argument".into()));
    }
    let norm = norm1(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let a = a * 2f64.powi(-squarings);
    let b = &PADE13;
    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];
    let mut r = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .ok_or_else(|| MemlqError::NonFinite("singular Pade denominator".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|x| !x.is_finite()) {
        return Err(MemlqError::NonFinite("matrix exponential".into()));
    }
    Ok(r)
}

/// `exp(t A)` by scaling and squaring with a degree-13 Padé approximant.
pub fn matrix_exponential(a: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !t.is_finite() || t < 0.0 {
        return Err(MemlqError::NonFinite(format!("exponential time {t}")));
    }
    expm(&(a * t))
}

/// `∫_0^h exp(r A) dr`, read off the exponential of `[[A, I], [0, 0]] h`.
pub fn input_propagator(a: &DMatrix<f64>, h: f64) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(a);
    aug.view_mut((0, n), (n, n)).fill_with_identity();
    let e = matrix_exponential(&aug, h)?;
    Ok(e.view((0, n), (n, n)).into_owned())
}

/// `E_j = exp(j dt A)` for `j = 0..=N`.
#[derive(Debug, Clone)]
pub struct PropagatorCache {
    steps: Vec<DMatrix<f64>>,
}

impl PropagatorCache {
    pub fn get(&self, j: usize) -> &DMatrix<f64> {
        &self.steps[j]
    }
    pub fn len(&self) -> usize {
        self.steps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Computes every `E_j` independently.
pub fn build_propagators(a: &DMatrix<f64>, grid: &TimeGrid) -> Result<PropagatorCache> {
    let dt = grid.dt();
    let steps = (0..=grid.steps())
        .map(|j| {
            if j == 0 {
                Ok(DMatrix::identity(a.nrows(), a.nrows()))
            } else {
                matrix_exponential(a, j as f64 * dt)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PropagatorCache { steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::build_grid;

    fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
        (a - b).amax() <= tol * (1.0 + b.amax())
    }

    #[test]
    fn closed_forms() {
        let z = DMatrix::from_element(1, 1, 0.0);
        assert_eq!(matrix_exponential(&z, 5.0).unwrap()[(0, 0)], 1.0);
        let nil = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let e = matrix_exponential(&nil, 2.0).unwrap();
        assert!(close(
            &e,
            &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            1e-15
        ));
        let m1 = DMatrix::from_element(1, 1, -1.0);
        let e = matrix_exponential(&m1, 1.0).unwrap();
        assert!((e[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rotation_at_pi() {
        let rot = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let grid = build_grid(std::f64::consts::PI, 2).unwrap();
        let cache = build_propagators(&rot, &grid).unwrap();
        let minus_id = -DMatrix::<f64>::identity(2, 2);
        assert!(close(cache.get(2), &minus_id, 1e-10));
        for t in [0.3, 1.7, 9.0] {
            let e = matrix_exponential(&rot, t).unwrap();
            let want = DMatrix::from_row_slice(2, 2, &[t.cos(), t.sin(), -t.sin(), t.cos()]);
            assert!(close(&e, &want, 1e-13));
        }
    }

    #[test]
    fn scaled_large_norm() {
        let a = DMatrix::from_row_slice(2, 2, &[-40.0, 3.0, 0.0, -1.0]);
        let e = matrix_exponential(&a, 1.0).unwrap();
        let e1 = (-40f64).exp();
        let e2 = (-1f64).exp();
        let off = 3.0 * (e2 - e1) / 39.0;
        let want = DMatrix::from_row_slice(2, 2, &[e1, off, 0.0, e2]);
        assert!(close(&e, &want, 1e-13));
    }

    #[test]
    fn input_propagator_scalar() {
        let a = DMatrix::from_element(1, 1, -2.0);
        let phi = input_propagator(&a, 0.5).unwrap();
        assert!((phi[(0, 0)] - (1.0 - (-1f64).exp()) / 2.0).abs() < 1e-15);
        let z = DMatrix::from_element(1, 1, 0.0);
        assert!((input_propagator(&z, 0.3).unwrap()[(0, 0)] - 0.3).abs() < 1e-16);
    }

    #[test]
    fn semigroup_property_on_grid() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.3]);
        let grid = build_grid(2.0, 20).unwrap();
        let cache = build_propagators(&a, &grid).unwrap();
        assert_eq!(cache.get(0), &DMatrix::identity(2, 2));
        for i in 0..=20 {
            for j in 0..=(20 - i) {
                let prod = cache.get(i) * cache.get(j);
                assert!((cache.get(i + j) - prod).amax() <= 1e-8 * (1.0 + cache.get(i + j).amax()));
            }
        }
        for j in 0..20 {
            let next = cache.get(1) * cache.get(j);
            assert!((cache.get(j + 1) - next).amax() <= 1e-10 * cache.get(j + 1).amax().max(1.0));
        }
    }
}
