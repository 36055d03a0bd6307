//! Checks against independently computed reference values.

use memlq_core::closed_loop::{apply_evolution, first_representation, simulate_closed_loop};
use memlq_core::cost_ops::{build_field, quadratic_cost_form};
use memlq_core::open_loop::{
    evaluate_cost, partial_cost, solve_open_loop, solve_open_loop_with, LinearSolver, SolveOptions,
};
use memlq_core::riccati::{classical_riccati_reference, integrate_dre, Scheme};
use memlq_core::{
    build_grid, build_propagators, make_augmented_state, presets, validate_spec, AugmentedState,
    ControlTrajectory, DiscretizedOperators, KernelSpec, MemlqError, ProblemSpec, RawProblem,
};
use nalgebra::{DMatrix, DVector};

fn scalar(a: f64, kernel: KernelSpec, horizon: f64) -> ProblemSpec {
    let one = DMatrix::from_element(1, 1, 1.0);
    ProblemSpec::new(
        DMatrix::from_element(1, 1, a),
        one.clone(),
        one,
        kernel,
        horizon,
    )
    .unwrap()
}

fn ops_for(spec: &ProblemSpec, steps: usize) -> DiscretizedOperators {
    DiscretizedOperators::new(spec, &build_grid(spec.horizon(), steps).unwrap()).unwrap()
}

fn constant_control(s: usize, steps: usize, value: f64) -> ControlTrajectory {
    ControlTrajectory {
        s_index: s,
        samples: vec![DVector::from_element(1, value); steps - s],
    }
}

/// RK4 for `p' = -1 + 2p + p²` backward from `p(1) = 0`.
fn scalar_riccati_rk4(steps: usize) -> f64 {
    let f = |p: f64| -1.0 + 2.0 * p + p * p;
    let h = -1.0 / steps as f64;
    let mut p = 0.0;
    for _ in 0..steps {
        let k1 = f(p);
        let k2 = f(p + 0.5 * h * k1);
        let k3 = f(p + 0.5 * h * k2);
        let k4 = f(p + h * k3);
        p += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    p
}

#[test]
fn validation_examples() {
    let raw = |n, m, a: Vec<f64>, b: Vec<f64>, horizon| RawProblem {
        n,
        m,
        a,
        b,
        c: vec![1.0; n * n],
        kernel: KernelSpec::Zero,
        horizon,
    };
    assert!(validate_spec(&raw(1, 1, vec![0.0], vec![1.0], 1.0)).is_ok());
    assert!(matches!(
        validate_spec(&raw(2, 1, vec![0.0; 4], vec![1.0; 3], 1.0)),
        Err(MemlqError::DimensionMismatch(_))
    ));
    assert!(matches!(
        validate_spec(&raw(1, 1, vec![0.0], vec![1.0], -1.0)),
        Err(MemlqError::BadHorizon(_))
    ));
    assert!(matches!(
        validate_spec(&raw(1, 1, vec![f64::NAN], vec![1.0], 1.0)),
        Err(MemlqError::NonFinite(_))
    ));
    assert!(matches!(build_grid(1.0, 1), Err(MemlqError::BadGrid(1))));
    let grid = build_grid(2.0, 2).unwrap();
    assert_eq!(grid.dt(), 1.0);
    let err = make_augmented_state(DVector::zeros(1), vec![DVector::zeros(1)], 2).unwrap_err();
    assert!(matches!(err, MemlqError::HistoryLengthMismatch { .. }));
}

#[test]
fn rotation_propagator_at_pi() {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
    let cache = build_propagators(&a, &build_grid(std::f64::consts::PI, 2).unwrap()).unwrap();
    let c = std::f64::consts::FRAC_PI_2.cos();
    let s = std::f64::consts::FRAC_PI_2.sin();
    let quarter = DMatrix::from_row_slice(2, 2, &[c, s, -s, c]);
    assert!((cache.get(1) - quarter).amax() < 1e-10);
    assert!((cache.get(2) + DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
}

#[test]
fn direct_input_closed_form() {
    let ops = ops_for(&scalar(-1.0, KernelSpec::Zero, 1.0), 400);
    let w = ops.apply_l(0, &constant_control(0, 400, 1.0)).unwrap();
    let exact = 1.0 - (-1.0f64).exp();
    assert!((w.at(400)[0] - exact).abs() < 1e-4);

    let flat = ops_for(&scalar(0.0, KernelSpec::Zero, 1.0), 40);
    let w = flat.apply_l(0, &constant_control(0, 40, 1.0)).unwrap();
    for (i, t) in flat.grid().nodes().iter().enumerate() {
        assert!((w.at(i)[0] - t).abs() < 1e-12);
    }
}

#[test]
fn memory_terms_with_unit_kernel() {
    let steps = 200;
    let ops = ops_for(&scalar(0.0, KernelSpec::Exponential { a: 0.0 }, 1.0), steps);
    let dt = ops.dt();
    let h = ops.apply_h(0, &constant_control(0, steps, 1.0)).unwrap();
    for (i, t) in ops.grid().nodes().iter().enumerate() {
        assert!((h.at(i)[0] - 0.5 * t * t).abs() < 2.0 * dt * dt, "node {i}");
    }

    let s = steps / 2;
    let history = vec![DVector::from_element(1, 1.0); s];
    let k = ops.apply_k(s, &history).unwrap();
    assert!((k.at(steps)[0] - 0.25).abs() < 2.0 * dt * dt);
    assert_eq!(k.at(s)[0], 0.0);

    let x0 = make_augmented_state(DVector::zeros(1), history, s).unwrap();
    let free = ops.free_evolution(&x0).unwrap();
    for i in s..=steps {
        assert!((free.at(i) - k.at(i)).amax() < 1e-14);
    }
}

#[test]
fn open_loop_matches_scalar_riccati() {
    let reference = scalar_riccati_rk4(4000);
    let closed = {
        let r = 2f64.sqrt();
        let e = (-2.0 * r).exp();
        (1.0 - e) / ((1.0 + r) + (r - 1.0) * e)
    };
    assert!((reference - closed).abs() < 1e-10);

    let ops = ops_for(&presets::scalar_memoryless(1.0).unwrap(), 400);
    let sol = solve_open_loop(
        &ops,
        0,
        &AugmentedState::initial(DVector::from_element(1, 1.0)),
        1e-12,
    )
    .unwrap();
    assert!((sol.cost - reference).abs() <= 1e-3 * reference);

    let field = build_field(&ops, u64::MAX).unwrap();
    assert!((field.p0(0)[(0, 0)] - sol.cost).abs() <= 1e-8 * sol.cost);
}

#[test]
fn dense_normal_equations_oracle() {
    let spec = presets::oscillator_memory(1.0).unwrap();
    let steps = 40;
    let ops = ops_for(&spec, steps);
    let s = 8;
    let history: Vec<_> = (0..s)
        .map(|j| DVector::from_vec(vec![(j as f64 * 0.7).sin()]))
        .collect();
    let x0 = make_augmented_state(DVector::from_vec(vec![1.0, -0.5]), history, s).unwrap();

    // The cost is |R u + r|²_W + dt |u|²; R is assembled column by column
    // from forward simulations of unit controls.
    let cells = steps - s;
    let zero = ControlTrajectory::zeros(s, steps, 1);
    let offset = memlq_core::open_loop::trajectory(&ops, &x0, &zero).unwrap();
    let weights = ops.state_weights(s);
    let c = spec.c();
    let rows = 2 * (steps - s + 1);
    let mut r = DMatrix::zeros(rows, cells);
    let mut r0 = DVector::zeros(rows);
    let silent = AugmentedState::zero(2, 1, s);
    for j in 0..cells {
        let mut u = zero.clone();
        u.samples[j][0] = 1.0;
        let w = memlq_core::open_loop::trajectory(&ops, &silent, &u).unwrap();
        for (k, x) in w.samples.iter().enumerate() {
            let y = c * x * weights[k].sqrt();
            r.view_mut((2 * k, j), (2, 1)).copy_from(&y);
        }
    }
    for (k, x) in offset.samples.iter().enumerate() {
        r0.rows_mut(2 * k, 2)
            .copy_from(&(c * x * weights[k].sqrt()));
    }
    let dt = ops.dt();
    let normal = r.transpose() * &r + DMatrix::<f64>::identity(cells, cells) * dt;
    let rhs = -(r.transpose() * &r0);
    let expected = normal.cholesky().unwrap().solve(&rhs);

    for solver in [LinearSolver::Dense, LinearSolver::ConjugateGradient] {
        let opts = SolveOptions { tol: 1e-13, solver };
        let sol = solve_open_loop_with(&ops, s, &x0, &opts).unwrap();
        let got = sol.control.to_vector();
        assert!(
            (got - &expected).amax() <= 1e-8 * expected.amax(),
            "{solver:?}"
        );
    }
}

#[test]
fn trivial_open_loop_cases() {
    let base = presets::scalar_memory(1.0).unwrap();
    let silent = base.with_c(DMatrix::zeros(1, 1)).unwrap();
    let ops = ops_for(&silent, 50);
    let x0 = AugmentedState::initial(DVector::from_element(1, 2.0));
    let sol = solve_open_loop(&ops, 0, &x0, 1e-10).unwrap();
    assert!(sol.control.to_vector().amax() == 0.0);
    assert_eq!(sol.cost, 0.0);
    let free = ops.free_evolution(&x0).unwrap();
    assert!((sol.state.to_vector() - free.to_vector()).amax() < 1e-14);

    let cost = evaluate_cost(&ops, 0, &x0, &constant_control(0, 50, 1.0)).unwrap();
    assert!((cost - 1.0).abs() < 1e-12);

    let ops = ops_for(&base, 50);
    let sol = solve_open_loop(&ops, 0, &AugmentedState::zero(1, 1, 0), 1e-10).unwrap();
    assert_eq!(sol.cost, 0.0);
}

#[test]
fn classical_reference_oracles() {
    let spec = presets::scalar_memoryless(1.0).unwrap();
    let coarse = classical_riccati_reference(&spec, &build_grid(1.0, 100).unwrap()).unwrap();
    let fine = classical_riccati_reference(&spec, &build_grid(1.0, 1000).unwrap()).unwrap();
    assert!((coarse[0][(0, 0)] - fine[0][(0, 0)]).abs() < 1e-4);
    assert!((fine[0][(0, 0)] - scalar_riccati_rk4(4000)).abs() < 1e-6);

    let short = scalar(-1.0, KernelSpec::Zero, 1e-3);
    let p = classical_riccati_reference(&short, &build_grid(1e-3, 100).unwrap()).unwrap();
    assert!((p[0][(0, 0)] - 1e-3).abs() < 1e-5);

    let silent = spec.with_c(DMatrix::zeros(1, 1)).unwrap();
    let p = classical_riccati_reference(&silent, &build_grid(1.0, 10).unwrap()).unwrap();
    assert!(p.iter().all(|x| x.amax() == 0.0));
}

#[test]
fn memoryless_integration_matches_reference() {
    let spec = presets::scalar_memoryless(1.0).unwrap();
    let grid = build_grid(1.0, 400).unwrap();
    let ops = DiscretizedOperators::new(&spec, &grid).unwrap();
    let reference = classical_riccati_reference(&spec, &grid).unwrap()[0][(0, 0)];
    let euler = integrate_dre(&ops, Scheme::Euler, u64::MAX).unwrap();
    let heun = integrate_dre(&ops, Scheme::Heun, u64::MAX).unwrap();
    assert!((euler.p0(0)[(0, 0)] - reference).abs() <= 1e-2 * reference);
    assert!((heun.p0(0)[(0, 0)] - reference).abs() <= 1e-8 * reference);
    assert!(!heun.has_memory_blocks());
}

#[test]
fn dynamic_programming_split() {
    let spec = presets::scalar_memory(1.0).unwrap();
    let steps = 60;
    let ops = ops_for(&spec, steps);
    let field = build_field(&ops, u64::MAX).unwrap();
    let x0 = AugmentedState::initial(DVector::from_element(1, 1.0));
    let sol = solve_open_loop(&ops, 0, &x0, 1e-13).unwrap();
    for tau in [1, 17, 30, 59] {
        let snap = memlq_core::closed_loop::open_loop_snapshot(&x0, &sol, tau);
        let head = partial_cost(&ops, 0, tau, &sol.state, &sol.control);
        let tail = quadratic_cost_form(&field, &snap).unwrap();
        assert!(
            (head + tail - sol.cost).abs() <= 1e-8 * sol.cost,
            "tau {tau}"
        );
    }
}

#[test]
fn first_representation_reproduces_control() {
    for spec in [
        presets::scalar_memory(1.0).unwrap(),
        presets::oscillator_memory(1.0).unwrap(),
    ] {
        let ops = ops_for(&spec, 80);
        let x0 = AugmentedState::initial(DVector::from_element(spec.n(), 1.0));
        let sol = solve_open_loop(&ops, 0, &x0, 1e-13).unwrap();
        let u = first_representation(&ops, &sol.state).unwrap();
        let scale = sol.control.to_vector().amax();
        assert!((u.to_vector() - sol.control.to_vector()).amax() <= 1e-8 * scale);
    }
}

#[test]
fn closed_loop_classical_cost() {
    let ops = ops_for(&presets::scalar_memoryless(1.0).unwrap(), 400);
    let field = build_field(&ops, u64::MAX).unwrap();
    let x0 = AugmentedState::initial(DVector::from_element(1, 1.0));
    let record = simulate_closed_loop(&ops, &field, &x0).unwrap();
    let sol = solve_open_loop(&ops, 0, &x0, 1e-12).unwrap();
    assert!((record.total_cost() - sol.cost).abs() <= 1e-2 * sol.cost);
    assert!(record.total_cost() >= sol.cost - 1e-10);
    let evaluated = evaluate_cost(&ops, 0, &x0, &record.control()).unwrap();
    assert!((evaluated - record.total_cost()).abs() <= 1e-10);
    assert!(record.cost.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn evolution_composition_by_resimulation() {
    let ops = ops_for(&presets::scalar_memory(1.0).unwrap(), 60);
    let field = build_field(&ops, u64::MAX).unwrap();
    let x0 = AugmentedState::initial(DVector::from_element(1, 1.0));
    let record = simulate_closed_loop(&ops, &field, &x0).unwrap();
    assert_eq!(apply_evolution(&record, 0).unwrap(), x0);
    let mid = apply_evolution(&record, 25).unwrap();
    let again = simulate_closed_loop(&ops, &field, &mid).unwrap();
    for t in [25, 40, 60] {
        let direct = apply_evolution(&record, t).unwrap();
        let composed = apply_evolution(&again, t).unwrap();
        assert!((direct.w0 - composed.w0).amax() <= 1e-8);
        for (a, b) in direct.history.iter().zip(&composed.history) {
            assert!((a - b).amax() <= 1e-8);
        }
    }
}
