//! Command dispatch and the verification suite.

use std::fmt::Write as _;
use std::path::PathBuf;

use memlq_core::closed_loop::{
    check_control_transition, check_state_transition, first_representation, simulate_closed_loop,
};
use memlq_core::cost_ops::{
    build_feedback_kernels, build_field, quadratic_cost_form, CostOperatorField, P0Rep, P1Rep,
    P2Rep,
};
use memlq_core::open_loop::{
    affine_norm, evaluate_cost, optimality_residual, solve_open_loop_with, SolveOptions,
    DENSE_LIMIT,
};
use memlq_core::riccati::{dre_residual, integrate_dre, matrix_form_residual, ProbeSet};
use memlq_core::{
    build_grid, AugmentedState, ControlTrajectory, DiscretizedOperators, KernelSpec, SolveResult,
    StateTrajectory,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Command, RunPlan};
use crate::error::CliError;
use crate::output::{self, Check, Checks};

/// Results of one command: the verdicts it produced and the files it wrote.
#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub checks: Checks,
    pub files: Vec<PathBuf>,
    pub digest: Option<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.values().all(|c| c.pass)
    }

    /// 0 when every check passed, 4 otherwise.
    pub fn exit_code(&self) -> u8 {
        if self.passed() {
            0
        } else {
            4
        }
    }
}

/// Executes the plan on a pool of `plan.threads` workers.
pub fn run(plan: &RunPlan) -> Result<Outcome, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.threads.max(1))
        .build()
        .map_err(|e| CliError::Threads(e.to_string()))?;
    pool.install(|| dispatch(plan))
}

fn dispatch(plan: &RunPlan) -> Result<Outcome, CliError> {
    let ops = DiscretizedOperators::new(&plan.spec, &plan.grid)?;
    let dir = plan.out_dir.as_path();
    let mut outcome = Outcome::default();
    match plan.command {
        Command::Simulate => {
            let field = build_field(&ops, plan.memory_cap)?;
            let record = simulate_closed_loop(&ops, &field, &plan.initial)?;
            let csv = output::trajectory_csv(&plan.grid, &record.state, &record.control().samples);
            outcome
                .files
                .push(output::write_file(dir, "trajectory.csv", &csv)?);
            let cost = serde_json::json!({ "cost": record.total_cost(), "s_index": plan.start() });
            outcome
                .files
                .push(output::write_file(dir, "cost.json", &pretty(&cost))?);
        }
        Command::Solve => {
            let sol = open_loop(plan, &ops)?;
            let csv = output::trajectory_csv(&plan.grid, &sol.state, &sol.control.samples);
            outcome
                .files
                .push(output::write_file(dir, "trajectory.csv", &csv)?);
            let relative = relative_residual(&ops, &plan.initial, &sol)?;
            let cost = serde_json::json!({
                "cost": sol.cost,
                "residual": sol.residual,
                "relative_residual": relative,
                "s_index": plan.start(),
            });
            outcome
                .files
                .push(output::write_file(dir, "cost.json", &pretty(&cost))?);
            outcome.checks.insert(
                "optimality_residual".into(),
                Check::at_most(relative, plan.tol),
            );
        }
        Command::Feedback => {
            let field = build_field(&ops, plan.memory_cap)?;
            let csv = output::field_csv(&plan.grid, &field);
            outcome
                .files
                .push(output::write_file(dir, "field.csv", &csv)?);
        }
        Command::Riccati => {
            let integrated = integrate_dre(&ops, plan.scheme, plan.memory_cap)?;
            let direct = build_field(&ops, plan.memory_cap)?;
            let csv = output::riccati_csv(&plan.grid, &integrated, &direct);
            outcome
                .files
                .push(output::write_file(dir, "riccati.csv", &csv)?);
        }
        Command::Verify => {
            let suite = Suite::new(plan, ops)?;
            outcome.checks = suite.run()?;
            let json = output::checks_json(&outcome.checks);
            outcome
                .files
                .push(output::write_file(dir, "verify.json", &json)?);
        }
        Command::Report => {
            let suite = Suite::new(plan, ops)?;
            outcome.checks = suite.run()?;
            let digest = suite.digest(&outcome.checks)?;
            outcome
                .files
                .push(output::write_file(dir, "report.txt", &digest)?);
            outcome.digest = Some(digest);
        }
    }
    Ok(outcome)
}

fn pretty(value: &serde_json::Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("json serializes");
    text.push('\n');
    text
}

fn open_loop(plan: &RunPlan, ops: &DiscretizedOperators) -> Result<SolveResult, CliError> {
    let opts = SolveOptions {
        tol: plan.tol,
        ..SolveOptions::default()
    };
    Ok(solve_open_loop_with(
        ops,
        plan.start(),
        &plan.initial,
        &opts,
    )?)
}

fn relative_residual(
    ops: &DiscretizedOperators,
    x0: &AugmentedState,
    sol: &SolveResult,
) -> Result<f64, CliError> {
    let scale = affine_norm(ops, x0)?;
    let residual = optimality_residual(ops, x0.s_index, x0, &sol.control)?;
    Ok(if scale > 0.0 {
        residual / scale
    } else {
        residual
    })
}

/// `|a - b|` against the larger magnitude; zero when both vanish.
fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale > 0.0 {
        (a - b).abs() / scale
    } else {
        0.0
    }
}

fn relative_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale > 0.0 {
        (a - b).amax() / scale
    } else {
        0.0
    }
}

fn relative_vector(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax());
    if scale > 0.0 {
        (a - b).amax() / scale
    } else {
        0.0
    }
}

/// Residual on the fine grid over the residual on the coarse grid; zero when
/// the residuals are at rounding level.
fn reduction(coarse: f64, fine: f64, scale: f64) -> f64 {
    if coarse <= 1e-12 * (1.0 + scale) {
        return 0.0;
    }
    fine / coarse
}

type Verdicts = Vec<(&'static str, Check)>;
type Group<'a> = fn(&Suite<'a>) -> Result<Verdicts, CliError>;

struct Suite<'a> {
    plan: &'a RunPlan,
    ops: DiscretizedOperators,
    field: CostOperatorField,
    open: SolveResult,
}

impl<'a> Suite<'a> {
    fn new(plan: &'a RunPlan, ops: DiscretizedOperators) -> Result<Self, CliError> {
        let field = build_field(&ops, plan.memory_cap)?;
        let open = open_loop(plan, &ops)?;
        Ok(Suite {
            plan,
            ops,
            field,
            open,
        })
    }

    fn s(&self) -> usize {
        self.plan.start()
    }

    fn x0(&self) -> &AugmentedState {
        &self.plan.initial
    }

    fn run(&self) -> Result<Checks, CliError> {
        let groups: [Group<'a>; 7] = [
            Suite::semigroup,
            Suite::lifted,
            Suite::optimality,
            Suite::transitions,
            Suite::cost_operators,
            Suite::riccati,
            Suite::closed_loop,
        ];
        let verdicts = groups
            .par_iter()
            .map(|g| g(self))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(verdicts
            .into_iter()
            .flatten()
            .map(|(name, check)| (name.to_string(), check))
            .collect())
    }

    fn random_control(&self, rng: &mut ChaCha8Rng, amplitude: f64) -> ControlTrajectory {
        let (m, steps, s) = (self.ops.m(), self.ops.steps(), self.s());
        ControlTrajectory {
            s_index: s,
            samples: (s..steps)
                .map(|_| DVector::from_fn(m, |_, _| amplitude * rng.random_range(-1.0..1.0)))
                .collect(),
        }
    }

    fn semigroup(&self) -> Result<Verdicts, CliError> {
        let props = self.ops.propagators();
        let step = props.get(1);
        let mut worst = 0.0f64;
        for i in 0..self.ops.steps() {
            let next = props.get(i + 1);
            worst = worst.max((next - step * props.get(i)).amax() / (1.0 + next.amax()));
        }
        Ok(vec![("semigroup_property", Check::at_most(worst, 1e-8))])
    }

    fn lifted(&self) -> Result<Verdicts, CliError> {
        let (ops, s) = (&self.ops, self.s());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (mut adjoint, mut fubini, mut low) = (0.0f64, 0.0f64, f64::INFINITY);
        for _ in 0..3 {
            let u = self.random_control(&mut rng, 1.0);
            let v = StateTrajectory {
                s_index: s,
                samples: (s..=ops.steps())
                    .map(|_| DVector::from_fn(ops.n(), |_, _| rng.random_range(-1.0..1.0)))
                    .collect(),
            };
            let lhs = ops.state_dot(s, &ops.apply_lh(s, &u)?, &v);
            let rhs = ops.control_dot(&u, &ops.apply_lh_adjoint(s, &v)?);
            adjoint = adjoint.max(relative(lhs, rhs));
            let nested = ops.apply_h(s, &u)?.to_vector();
            let swapped = ops.apply_h_fubini(s, &u)?.to_vector();
            fubini = fubini.max((&nested - swapped).amax() / nested.amax().max(1.0));
            let quad = ops.control_dot(&ops.apply_lambda(s, &u)?, &u);
            low = low.min(quad / ops.control_dot(&u, &u));
        }
        if ops.m() * (ops.steps() - s) <= DENSE_LIMIT / 4 {
            low = ops.assemble_lambda(s)?.symmetric_eigen().eigenvalues.min();
        }
        Ok(vec![
            ("lifted_adjointness", Check::at_most(adjoint, 1e-8)),
            ("fubini_consistency", Check::at_most(fubini, 1e-10)),
            ("coercivity", Check::at_most((1.0 - low).max(0.0), 1e-8)),
        ])
    }

    fn optimality(&self) -> Result<Verdicts, CliError> {
        let (ops, s, x0, open) = (&self.ops, self.s(), self.x0(), &self.open);
        let residual = relative_residual(ops, x0, open)?;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut shortfall = 0.0f64;
        for _ in 0..100 {
            let amplitude = 10f64.powf(rng.random_range(-4.0..0.5));
            let delta = self.random_control(&mut rng, amplitude);
            let mut moved = open.control.clone();
            for (u, d) in moved.samples.iter_mut().zip(&delta.samples) {
                *u += d;
            }
            let gain = evaluate_cost(ops, s, x0, &moved)? - open.cost;
            shortfall = shortfall.max(ops.control_dot(&delta, &delta) - gain);
        }
        let recovered = first_representation(ops, &open.state)?.to_vector();
        let control = open.control.to_vector();
        let first = relative_vector(&recovered, &control);
        let form = quadratic_cost_form(&self.field, x0)?;
        Ok(vec![
            (
                "optimality_residual",
                Check::at_most(residual, self.plan.tol),
            ),
            (
                "convexity",
                Check::at_most(shortfall.max(0.0), 1e-10 * open.cost.max(1.0)),
            ),
            ("first_representation", Check::at_most(first, 1e-8)),
            (
                "cost_identity",
                Check::at_most(relative(form, open.cost), 1e-8),
            ),
        ])
    }

    fn transitions(&self) -> Result<Verdicts, CliError> {
        let (s, steps) = (self.s(), self.ops.steps());
        let tau = (s + steps) / 2;
        let control = check_control_transition(&self.ops, s, tau, self.x0())?.relative();
        let state = check_state_transition(&self.ops, s, tau, self.x0())?.relative();
        Ok(vec![
            ("control_transition", Check::at_most(control, 1e-8)),
            ("state_transition", Check::at_most(state, 1e-8)),
        ])
    }

    fn cost_operators(&self) -> Result<Verdicts, CliError> {
        let (s, steps) = (self.s(), self.ops.steps());
        let mut slices = vec![s, (s + steps) / 2, steps - 1];
        slices.dedup();
        let (mut d0, mut d1, mut d2) = (0.0f64, 0.0f64, 0.0f64);
        for t in slices {
            let k = build_feedback_kernels(&self.ops, t, self.plan.tol.min(1e-12))?;
            d0 = d0.max(relative_matrix(
                &k.p0(P0Rep::Definition),
                &k.p0(P0Rep::Resolved),
            ));
            let p1 = k.p1(P1Rep::Definition);
            d1 = d1.max(relative_matrix(&p1, &k.p1(P1Rep::Resolved)));
            d1 = d1.max(relative_matrix(&p1, &k.p1(P1Rep::Third)));
            d2 = d2.max(relative_matrix(
                &k.p2(P2Rep::Definition),
                &k.p2(P2Rep::Resolved),
            ));
        }

        let field = &self.field;
        let scale = field.sup_norms().0.max(f64::MIN_POSITIVE);
        let (mut sym, mut low, mut exchange) = (0.0f64, 0.0f64, 0.0f64);
        for t in 0..=steps {
            let p0 = field.p0(t);
            sym = sym.max((p0 - p0.transpose()).amax() / scale);
            low = low.min(p0.clone().symmetric_eigen().eigenvalues.min() / scale);
            if field.has_memory_blocks() {
                for p in 0..=t {
                    for q in 0..p {
                        let gap = field.p2(t, p, q).transpose() - field.p2(t, q, p);
                        exchange = exchange.max(gap.amax() / scale.max(1.0));
                    }
                }
            }
        }
        let (z0, z1, z2) = field.slice_norms(steps);
        Ok(vec![
            ("p0_representations", Check::at_most(d0, 1e-8)),
            ("p1_representations", Check::at_most(d1, 1e-8)),
            ("p2_representations", Check::at_most(d2, 1e-8)),
            ("p0_symmetry", Check::at_most(sym, 1e-10)),
            ("p0_positive_semidefinite", Check::at_most(-low, 1e-10)),
            ("p2_exchange_symmetry", Check::at_most(exchange, 1e-10)),
            ("final_slice_zero", Check::at_most(z0 + z1 + z2, 0.0)),
        ])
    }

    fn riccati(&self) -> Result<Verdicts, CliError> {
        let (ops, field, cap) = (&self.ops, &self.field, self.plan.memory_cap);
        let integrated = integrate_dre(ops, self.plan.scheme, cap)?;
        let (s0, s1, s2) = field.sup_norms();
        let part = |g: f64, s: f64| if s > 0.0 { g / s } else { g };
        let (mut g0, mut g1, mut g2) = (0.0f64, 0.0f64, 0.0f64);
        for t in 0..=ops.steps() {
            g0 = g0.max((field.p0(t) - integrated.p0(t)).amax());
            if field.has_memory_blocks() {
                g1 = g1.max((field.p1_slab(t) - integrated.p1_slab(t)).amax());
                g2 = g2.max((field.p2_slab(t) - integrated.p2_slab(t)).amax());
            }
        }
        let gap = part(g0, s0).max(part(g1, s1)).max(part(g2, s2));
        let mut out = vec![("integrated_field_gap", Check::at_most(gap, 5e-2))];

        let probes = ProbeSet::standard(ops.n(), ops.m(), 7);
        let fine = dre_residual(field, ops, &probes)?.sup();
        let block = matrix_form_residual(field, ops, cap)?
            .into_iter()
            .fold(0.0, f64::max);
        let agreement = if fine > 0.0 && block > 0.0 {
            (block / fine).max(fine / block)
        } else if fine.max(block) <= 1e-12 * (1.0 + s0) {
            1.0
        } else {
            f64::INFINITY
        };
        out.push(("matrix_form_consistency", Check::at_most(agreement, 2.0)));

        let steps = ops.steps();
        if steps % 2 == 0 && steps >= 16 {
            let spec = match ops.spec().kernel() {
                KernelSpec::Samples(v) => {
                    let coarse = v.iter().step_by(2).copied().collect();
                    ops.spec().with_kernel(KernelSpec::Samples(coarse))?
                }
                _ => ops.spec().clone(),
            };
            let coarse_ops =
                DiscretizedOperators::new(&spec, &build_grid(spec.horizon(), steps / 2)?)?;
            let coarse_field = build_field(&coarse_ops, cap)?;
            let coarse = dre_residual(&coarse_field, &coarse_ops, &probes)?.sup();
            out.push((
                "riccati_residual_order",
                Check::at_most(reduction(coarse, fine, s0.max(s1).max(s2)), 1.0 / 1.6),
            ));
        }
        Ok(out)
    }

    fn closed_loop(&self) -> Result<Verdicts, CliError> {
        let (ops, x0, open) = (&self.ops, self.x0(), &self.open);
        let record = simulate_closed_loop(ops, &self.field, x0)?;
        let (mut gap, mut scale) = (0.0f64, 0.0f64);
        for (a, b) in open.control.samples.iter().zip(&record.control().samples) {
            gap = gap.max((a - b).amax());
            scale = scale.max(a.amax());
        }
        let gap = if scale > 0.0 { gap / scale } else { gap };
        let total = record.total_cost();
        let evaluated = evaluate_cost(ops, self.s(), x0, &record.control())?;
        Ok(vec![
            ("closed_loop_gap", Check::at_most(gap, 5e-2)),
            (
                "closed_loop_cost_margin",
                Check::at_most((open.cost - total).max(0.0), 1e-10),
            ),
            (
                "closed_loop_cost_consistency",
                Check::at_most(relative(total, evaluated), 1e-10),
            ),
        ])
    }

    fn digest(&self, checks: &Checks) -> Result<String, CliError> {
        let (plan, ops) = (self.plan, &self.ops);
        let record = simulate_closed_loop(ops, &self.field, self.x0())?;
        let (s0, s1, s2) = self.field.sup_norms();
        let mut out = String::new();
        let _ = writeln!(
            out,
            "problem: n = {}, m = {}, T = {}, N = {}, dt = {:.6e}",
            ops.n(),
            ops.m(),
            ops.grid().horizon(),
            ops.steps(),
            ops.dt()
        );
        let kernel = match plan.spec.kernel() {
            KernelSpec::Zero => "zero".to_string(),
            KernelSpec::Exponential { a } => format!("exp(-{a} tau)"),
            KernelSpec::Samples(v) => format!("{} samples", v.len()),
        };
        let _ = writeln!(out, "kernel: {kernel}");
        let _ = writeln!(out, "start index: {}", plan.start());
        let _ = writeln!(out);
        let _ = writeln!(out, "open-loop cost      {:.12e}", self.open.cost);
        let _ = writeln!(
            out,
            "quadratic form      {:.12e}",
            quadratic_cost_form(&self.field, self.x0())?
        );
        let _ = writeln!(out, "closed-loop cost    {:.12e}", record.total_cost());
        let _ = writeln!(out, "max |P0|, |P1|, |P2|  {s0:.6e}  {s1:.6e}  {s2:.6e}");
        let _ = writeln!(out);
        let passed = checks.values().filter(|c| c.pass).count();
        let _ = writeln!(out, "checks: {passed} of {} passed", checks.len());
        for (name, c) in checks {
            let mark = if c.pass { "ok  " } else { "FAIL" };
            let _ = writeln!(
                out,
                "  {mark} {name:<30} {:>12.3e}  (tolerance {:.1e})",
                c.value, c.tolerance
            );
        }
        Ok(out)
    }
}
