//! Files written by the commands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use memlq_core::cost_ops::CostOperatorField;
use memlq_core::{StateTrajectory, TimeGrid};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Verdict of one check: passes when `value <= tolerance`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(value: f64, tolerance: f64) -> Self {
        Check {
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

/// Named verdicts, ordered by name.
pub type Checks = BTreeMap<String, Check>;

/// 17 significant digits, enough to recover every `f64` exactly.
pub fn number(x: f64) -> String {
    format!("{x:.16e}")
}

fn row(out: &mut String, values: impl IntoIterator<Item = f64>) {
    let cells: Vec<String> = values.into_iter().map(number).collect();
    out.push_str(&cells.join(","));
    out.push('\n');
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, contents))
        .map_err(|source| CliError::Io {
            path: path.clone(),
            source,
        })?;
    Ok(path)
}

/// `t, w_1..w_n, u_1..u_m` at the nodes `s..=N`. The control of node `i` is
/// the value on the cell starting there; the last node repeats the final cell.
pub fn trajectory_csv(
    grid: &TimeGrid,
    state: &StateTrajectory,
    control: &[DVector<f64>],
) -> String {
    let n = state.samples[0].len();
    let m = control.first().map_or(0, |u| u.len());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",w_{i}");
    }
    for j in 1..=m {
        let _ = write!(out, ",u_{j}");
    }
    out.push('\n');
    let s = state.s_index;
    for (k, w) in state.samples.iter().enumerate() {
        let u = &control[k.min(control.len() - 1)];
        row(
            &mut out,
            std::iter::once(grid.node(s + k))
                .chain(w.iter().copied())
                .chain(u.iter().copied()),
        );
    }
    out
}

/// Largest entry of each block per slice.
pub fn field_csv(grid: &TimeGrid, field: &CostOperatorField) -> String {
    let mut out = String::from("t,p0_max,p1_max,p2_max\n");
    for t in 0..=field.steps() {
        let (a, b, c) = field.slice_norms(t);
        row(&mut out, [grid.node(t), a, b, c]);
    }
    out
}

/// Integrated field norms next to their gap from the direct field.
pub fn riccati_csv(
    grid: &TimeGrid,
    integrated: &CostOperatorField,
    direct: &CostOperatorField,
) -> String {
    let mut out = String::from("t,p0_max,p1_max,p2_max,gap_p0,gap_p1,gap_p2\n");
    for t in 0..=integrated.steps() {
        let (a, b, c) = integrated.slice_norms(t);
        let g0 = (integrated.p0(t) - direct.p0(t)).amax();
        let (g1, g2) = if integrated.has_memory_blocks() {
            (
                (integrated.p1_slab(t) - direct.p1_slab(t)).amax(),
                (integrated.p2_slab(t) - direct.p2_slab(t)).amax(),
            )
        } else {
            (0.0, 0.0)
        };
        row(&mut out, [grid.node(t), a, b, c, g0, g1, g2]);
    }
    out
}

pub fn checks_json(checks: &Checks) -> String {
    let mut text = serde_json::to_string_pretty(checks).expect("checks serialize");
    text.push('\n');
    text
}

/// Parses a CSV written by this module back into its header and rows.
pub fn read_csv(text: &str) -> Option<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines.next()?.split(',').map(str::to_owned).collect();
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|x| x.parse().ok())
                .collect::<Option<Vec<f64>>>()
        })
        .collect::<Option<_>>()?;
    Some((header, rows))
}
