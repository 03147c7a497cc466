//! Series behind the value-function and barrier figures.

use std::path::{Path, PathBuf};

use bonus_malus::{Class, Control, Grid64, Solution};
use serde_json::json;

use crate::config::RunSpec;
use crate::output::{csv, OutputSet};
use crate::{solve_optimal, CliError};

/// Wealth at which the time and clock series are taken.
pub const SERIES_WEALTH: f64 = 5.0;
/// Clock of the class-2 barrier series.
pub const CLASS_TWO_CLOCK: f64 = 1.6;

/// Solve in paper mode and render every figure file in memory.
pub fn render_figures(spec: &RunSpec) -> Result<(OutputSet, Solution), CliError> {
    let control = Control {
        paper_mode: true,
        ..spec.control()?
    };
    let sol = solve_optimal(spec, control)?;
    let set = render_from(spec, &sol)?;
    Ok((set, sol))
}

fn node(grid: &Grid64, v: f64, what: &str) -> Result<usize, CliError> {
    let k = if what == "x" { grid.x_index(v) } else { grid.t_index(v) };
    k.ok_or_else(|| CliError::Config(format!("{what} = {v} is not a grid node; choose steps that divide it")))
}

/// Figure files for an already computed paper-mode solution.
pub fn render_from(spec: &RunSpec, sol: &Solution) -> Result<OutputSet, CliError> {
    let v = &sol.value;
    let b = sol
        .barrier
        .as_ref()
        .ok_or_else(|| CliError::Config("figures need an optimize-mode solution".into()))?;
    let g = v.grid().clone();
    let j5 = node(&g, SERIES_WEALTH, "x")?;
    let k_reset = g.k_reset;
    let k_clock = node(&g, CLASS_TWO_CLOCK, "t")?;
    let mut set = OutputSet::new();

    let fig1 = (g.window.0..=g.window.1)
        .map(|j| -> Result<Vec<f64>, CliError> {
            Ok(vec![g.x(j), v.get(Class::One, 0, 0, j)?, v.get(Class::Two, 0, 0, j)?])
        })
        .collect::<Result<Vec<_>, _>>()?;
    set.add("fig1.csv", csv(&["x", "V1", "V2"], fig1)?);

    let fig2 = (0..=g.n_t)
        .map(|k| -> Result<Vec<f64>, CliError> {
            Ok(vec![g.t(k), v.get(Class::One, k, 0, j5)?, v.get(Class::Two, k, 0, j5)?])
        })
        .collect::<Result<Vec<_>, _>>()?;
    set.add("fig2.csv", csv(&["t", "V1", "V2"], fig2)?);

    let fig3 = (0..=k_reset)
        .map(|k| -> Result<Vec<f64>, CliError> {
            Ok(vec![g.t(k), v.get(Class::One, k_reset, k, j5)?, v.get(Class::Two, k_reset, k, j5)?])
        })
        .collect::<Result<Vec<_>, _>>()?;
    set.add("fig3.csv", csv(&["s", "V1", "V2"], fig3)?);

    let fig4a = (0..=g.n_t)
        .map(|k| -> Result<Vec<f64>, CliError> { Ok(vec![g.t(k), b.get(Class::One, k, 0, j5)?]) })
        .collect::<Result<Vec<_>, _>>()?;
    set.add("fig4a.csv", csv(&["t", "b1"], fig4a)?);

    let fig4b = (k_clock..=g.n_t)
        .map(|k| -> Result<Vec<f64>, CliError> { Ok(vec![g.t(k), b.get(Class::Two, k, k_clock, j5)?]) })
        .collect::<Result<Vec<_>, _>>()?;
    set.add("fig4b.csv", csv(&["t", "b2"], fig4b)?);

    let meta = json!({
        "generator": concat!("bonus-malus-cli ", env!("CARGO_PKG_VERSION")),
        "iterations": sol.iterations,
        "paper_mode": true,
        "sup_change_history": sol.sup_change_history,
        "grid": {
            "h_t": g.h,
            "h_x": g.h_x,
            "n_t": g.n_t,
            "n_x": g.n_x,
            "x_bottom": g.x_bottom,
            "window": [g.x(g.window.0), g.x(g.window.1)],
            "y_max": g.y_max(),
            "barrier_candidates": g.candidate_count(),
            "nodes": [g.node_count(Class::One), g.node_count(Class::Two)],
        },
        "scheme": {
            "transport": "explicit upwind step along t - s = const characteristics",
            "quadrature": "trapezoid in the claim distribution on the wealth ladder, exact report tail beyond max(b, m)",
            "below_axis": "flat clamping at the bottom node",
            "reset_coupling": "class-2 reset boundary copied from class 1 within the same iterate",
            "barrier_search": "ladder candidates plus never reporting; ties go to the smallest barrier",
            "series_wealth": SERIES_WEALTH,
            "class_two_clock": CLASS_TWO_CLOCK,
        },
        "config": spec,
    });
    set.add("run_meta.json", serde_json::to_string_pretty(&meta).expect("metadata serializes"));
    Ok(set)
}

/// Solve, render and write the figure files into `out`.
pub fn run_figures(spec: &RunSpec, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (set, _) = render_figures(spec)?;
    set.commit(out)
}

/// Parse a rendered CSV back into columns of numbers (`inf` allowed).
pub fn parse_columns(text: &str) -> Vec<Vec<f64>> {
    let mut lines = text.lines();
    let width = lines.next().map(|h| h.split(',').count()).unwrap_or(0);
    let mut cols = vec![Vec::new(); width];
    for line in lines {
        for (c, cell) in line.split(',').enumerate() {
            let v = if cell == "inf" { f64::INFINITY } else { cell.parse().unwrap_or(f64::NAN) };
            cols[c].push(v);
        }
    }
    cols
}
