//! The acceptance suite: ten pass/fail criteria evaluated on a configuration.

use std::sync::Arc;
use std::time::Instant;

use bonus_malus::{
    compare_policies, dpp_residual, estimate_value, iterate, sweep_characteristic, BarrierMode, Class, Control,
    Field, FixedBarrier, Grid64, Init, Params, Policy, Solution, StopRule,
};
use serde::Serialize;

use crate::config::RunSpec;
use crate::figures::{parse_columns, render_figures, CLASS_TWO_CLOCK};
use crate::CliError;

/// Barrier the paper reports for class 2 at `t = s = 1.6`, `x = 5`.
pub const PAPER_CLASS_TWO_BARRIER: f64 = 0.15;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    /// Worst observed quantity, in the units of `bound`.
    pub measured: f64,
    pub bound: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConfigFailure {
    /// `"cfl"` for a step-size violation, `"config"` otherwise.
    pub criterion: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CheckReport {
    pub passed: bool,
    pub config_error: Option<ConfigFailure>,
    pub seed: u64,
    pub n_paths: usize,
    pub criteria: Vec<Criterion>,
}

impl CheckReport {
    /// Report for a configuration that could not be validated.
    pub fn invalid(spec: Option<&RunSpec>, err: &CliError) -> Self {
        let criterion = match err {
            CliError::Model(bonus_malus::Error::Cfl(_)) => "cfl",
            _ => "config",
        };
        CheckReport {
            passed: false,
            config_error: Some(ConfigFailure {
                criterion,
                message: err.to_string(),
            }),
            seed: spec.map_or(0, |s| s.mc.seed),
            n_paths: spec.map_or(0, |s| s.mc.n_paths),
            criteria: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per criterion.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        if let Some(e) = &self.config_error {
            out.push_str(&format!("FAIL {}: {}\n", e.criterion, e.message));
        }
        for c in &self.criteria {
            out.push_str(&format!(
                "{} criterion {:>2} {:<22} measured {:.6e} bound {:.6e} ({:.1}s) {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.id,
                c.name,
                c.measured,
                c.bound,
                c.seconds,
                c.detail
            ));
        }
        let failed = self.criteria.iter().filter(|c| !c.passed).count();
        out.push_str(&format!(
            "{}: {} of {} criteria passed\n",
            if self.passed { "ACCEPTED" } else { "REJECTED" },
            self.criteria.len() - failed,
            self.criteria.len()
        ));
        out
    }
}

struct Ctx<'a> {
    spec: &'a RunSpec,
    params: Params,
    grid: Arc<Grid64>,
    control: Control,
}

impl Ctx<'_> {
    /// The configured control with the tolerance stop, whatever the
    /// figure settings.
    fn control(&self, mode: BarrierMode<f64>) -> Control {
        let stop = match self.control.stop {
            StopRule::SupChangeBelow(tol) => StopRule::SupChangeBelow(tol),
            StopRule::FixedIterations(_) => StopRule::SupChangeBelow(bonus_malus::DEFAULT_TOLERANCE),
        };
        Control {
            mode,
            stop,
            paper_mode: false,
            max_iterations: self.control.max_iterations,
        }
    }

    fn solve(&self, mode: BarrierMode<f64>) -> Result<Solution, CliError> {
        Ok(iterate(&self.params, self.grid.clone(), &self.control(mode))?)
    }

    fn window(&self) -> std::ops::RangeInclusive<usize> {
        self.grid.window.0..=self.grid.window.1
    }
}

fn criterion(id: u8, name: &'static str, measured: f64, bound: f64, detail: String, start: Instant) -> Criterion {
    Criterion {
        id,
        name,
        passed: measured <= bound,
        measured,
        bound,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn terminal_identity(ctx: &Ctx, opt: &Solution) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let g = &ctx.grid;
    let mut worst = 0.0f64;
    for class in Class::ALL {
        for k_s in 0..=g.max_k_s(class, g.n_t) {
            for (j, v) in opt.value.row(class, g.n_t, k_s)?.iter().enumerate() {
                worst = worst.max((v - ctx.params.utility(g.x(j))).abs());
            }
        }
    }
    Ok(criterion(1, "terminal_identity", worst, 1e-12, "max |V(i,T,s,x) - h(x)|".into(), start))
}

fn boundary_identity(ctx: &Ctx, opt: &Solution) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let g = &ctx.grid;
    let mut worst = 0.0f64;
    let mut mismatches = 0usize;
    for k_t in g.k_reset..=g.n_t {
        let a = opt.value.row(Class::Two, k_t, g.k_reset)?;
        let b = opt.value.row(Class::One, k_t, 0)?;
        for (u, w) in a.iter().zip(b) {
            if u != w {
                mismatches += 1;
                worst = worst.max((u - w).abs());
            }
        }
    }
    Ok(criterion(
        2,
        "boundary_identity",
        worst,
        0.0,
        format!("{mismatches} nodes with V2(t,S,x) != V1(t,0,x)"),
        start,
    ))
}

/// Wealth gained along the deterministic path from `(class, t, s)` to maturity.
fn flow(p: &Params, class: Class, t: f64, s: f64) -> Result<f64, CliError> {
    let left = p.horizon - t;
    Ok(match class {
        Class::Two if s + left >= p.reset_time => {
            let first = p.reset_time - s;
            p.drift_integral(Class::Two, s, first)? + p.drift_integral(Class::One, 0.0, left - first)?
        }
        _ => p.drift_integral(class, s, left)?,
    })
}

fn base_case(ctx: &Ctx) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let g = &ctx.grid;
    let p = &ctx.params;
    let zero = iterate(
        p,
        g.clone(),
        &Control::optimize().with_stop(StopRule::FixedIterations(0)),
    )?;
    let mut v0_err = 0.0f64;
    for (class, k_t, k_s, row) in zero.value.rows() {
        for (j, v) in row.iter().enumerate() {
            v0_err = v0_err.max((v - p.v0(class, g.t(k_t), g.t(k_s), g.x(j))?).abs());
        }
    }

    let mut quiet = p.clone();
    quiet.intensity = 0.0;
    let prev = Field::zeros(g.clone());
    let mut cur = Field::zeros(g.clone());
    sweep_characteristic(&quiet, &prev, &mut cur, &BarrierMode::Fixed(FixedBarrier::Constant(0.0)), None)?;
    let mut adv_err = 0.0f64;
    for (class, k_t, k_s, row) in cur.rows() {
        let f = flow(&quiet, class, g.t(k_t), g.t(k_s))?;
        for j in ctx.window() {
            adv_err = adv_err.max((row[j] - quiet.utility(g.x(j) + f)).abs());
        }
    }
    let lip = g.utility_lipschitz(p);
    let adv_bound = 2.0 * g.h_x * lip;
    let window_lip = p.utility.lipschitz_on(g.x(g.window.0), g.x(g.window.1));
    let mut c = criterion(
        3,
        "base_case_oracle",
        v0_err.max(adv_err / adv_bound * 1e-10),
        1e-10,
        format!(
            "v0 max error {v0_err:.3e} (bound 1e-10); advection max error {adv_err:.3e} (bound 2 h_x L_h = {adv_bound:.3e}; \
             with the in-window Lipschitz constant the bound would be {:.3e})",
            2.0 * g.h_x * window_lip
        ),
        start,
    );
    c.passed = v0_err <= 1e-10 && adv_err <= adv_bound;
    Ok(c)
}

fn fixed_policy_oracle(ctx: &Ctx) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for b in [0.0, 1.0, f64::INFINITY] {
        let sol = ctx.solve(BarrierMode::Fixed(FixedBarrier::Constant(b)))?;
        for class in Class::ALL {
            for x in [0.0, 2.5, 5.0] {
                let v = sol.value.interp(class, 0.0, 0.0, x)?;
                let mc = estimate_value(
                    &ctx.params,
                    &Policy::Constant(b),
                    Init::new(class, 0.0, 0.0, x),
                    ctx.spec.mc.n_paths,
                    ctx.spec.mc.seed,
                )?;
                let margin = (v - mc.mean).abs() - (3.0 * mc.stderr + 0.02);
                worst = worst.max(margin);
                let cell = format!("b={b} i={} x={x}: V {v:.6} MC {:.6}±{:.6}", class.number(), mc.mean, mc.stderr);
                if margin > 0.0 {
                    failures.push(cell);
                }
            }
        }
    }
    let detail = if failures.is_empty() {
        "max over cells of |V - MC| - (3 stderr + 0.02)".to_string()
    } else {
        format!("failing cells: {}", failures.join("; "))
    };
    Ok(criterion(4, "solver_vs_monte_carlo", worst, 0.0, detail, start))
}

fn optimality_sanity(ctx: &Ctx, opt: &Solution) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let field = opt.barrier.as_ref().expect("optimize mode returns barriers");
    let mut policies = vec![Policy::Grid(field)];
    policies.extend([0.0, 0.25, 0.5, 1.0, f64::INFINITY].map(Policy::Constant));
    let mut worst = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for class in Class::ALL {
        let init = Init::new(class, 0.0, 0.0, 2.5);
        let cmp = compare_policies(&ctx.params, &policies, init, ctx.spec.mc.n_paths, ctx.spec.mc.seed)?;
        for (k, policy) in policies.iter().enumerate().skip(1) {
            let d = cmp.paired_difference(0, k);
            // grid - constant must be >= -3 paired stderr
            let shortfall = -(d.mean + 3.0 * d.stderr);
            worst = worst.max(shortfall);
            if shortfall > 0.0 {
                failures.push(format!("i={} vs {}: diff {:.3e}±{:.3e}", class.number(), policy.label(), d.mean, d.stderr));
            }
        }
    }
    let detail = if failures.is_empty() {
        "max over constants of -(mean(grid - const) + 3 paired stderr)".into()
    } else {
        failures.join("; ")
    };
    Ok(criterion(5, "optimality_sanity", worst, 0.0, detail, start))
}

fn dpp(ctx: &Ctx, opt: &Solution) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let init = Init::new(Class::One, 0.0, 0.0, 2.5);
    let r = dpp_residual(&ctx.params, opt, init, ctx.spec.mc.n_paths, ctx.spec.mc.seed, 0.5)?;
    let bound = 3.0 * r.stderr + 0.02;
    Ok(criterion(
        6,
        "dpp_residual",
        r.residual,
        bound,
        format!("V(init) {:.6}, MC {:.6}, stderr {:.3e}", r.value_at_init, r.mc_mean, r.stderr),
        start,
    ))
}

/// Worst violation `a - b` over a row pair, as (absolute on the window,
/// relative to `max(1, |b|)` on every node).
fn drop(a: &[f64], b: &[f64], window: &std::ops::RangeInclusive<usize>) -> (f64, f64) {
    let mut abs = 0.0f64;
    let mut rel = 0.0f64;
    for (j, (u, w)) in a.iter().zip(b).enumerate() {
        let d = u - w;
        if window.contains(&j) {
            abs = abs.max(d);
        }
        rel = rel.max(d / w.abs().max(1.0));
    }
    (abs, rel)
}

fn monotonicity(ctx: &Ctx, opt: &Solution) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let v = &opt.value;
    let window = ctx.window();
    let worse = |acc: (f64, f64), d: (f64, f64)| (acc.0.max(d.0), acc.1.max(d.1));
    let (mut x_drop, mut s_drop, mut dominance) = ((0.0, 0.0), (0.0, 0.0), (0.0, 0.0));
    for (class, k_t, k_s, row) in v.rows() {
        let shifted = &row[1..];
        x_drop = worse(x_drop, drop(&row[..row.len() - 1], shifted, &(*window.start()..=*window.end() - 1)));
        if k_s > 0 {
            s_drop = worse(s_drop, drop(v.row(class, k_t, k_s - 1)?, row, &window));
        }
        if class == Class::Two {
            dominance = worse(dominance, drop(row, v.row(Class::One, k_t, 0)?, &window));
        }
    }
    let increase = opt.max_increase_history.iter().copied().fold(0.0f64, f64::max);
    let checks = [
        ("x", x_drop, 1e-10),
        ("class", dominance, 1e-9),
        ("clock", s_drop, 1e-10),
        ("iterates", (increase, increase), 1e-12),
    ];
    let worst = checks.iter().map(|(_, (a, r), b)| a.max(*r) / b).fold(0.0f64, f64::max);
    let detail = checks
        .iter()
        .map(|(n, (a, r), b)| match *n {
            "iterates" => format!("{n} {r:.3e} rel on all nodes (slack {b:.0e})"),
            _ => format!("{n} {a:.3e} abs on window, {r:.3e} rel on all nodes (slack {b:.0e})"),
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok(criterion(7, "monotonicity", worst, 1.0, format!("violation / slack; {detail}"), start))
}

fn lipschitz(ctx: &Ctx, opt: &Solution) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let g = &ctx.grid;
    let mut worst = 0.0f64;
    for (_, _, _, row) in opt.value.rows() {
        for j in g.window.0 + 1..=g.window.1 {
            worst = worst.max((row[j] - row[j - 1]).abs() / g.h_x);
        }
    }
    let lip = g.utility_lipschitz(&ctx.params);
    let window_lip = ctx.params.utility.lipschitz_on(g.x(g.window.0), g.x(g.window.1));
    Ok(criterion(
        8,
        "lipschitz_bound",
        worst,
        lip + 0.05,
        format!("L_h over the padded axis {lip:.3e}; utility Lipschitz constant on the window {window_lip:.3e}"),
        start,
    ))
}

fn nondecreasing(xs: &[f64], slack: f64) -> f64 {
    xs.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max) / slack
}

fn figures(ctx: &Ctx) -> Result<(Criterion, crate::output::OutputSet), CliError> {
    let start = Instant::now();
    let (rendered, _) = render_figures(ctx.spec)?;
    let g = &ctx.grid;
    let cols = |name: &str| parse_columns(rendered.get(name).expect("figure rendered"));
    let tol = 2.0 * g.h_x;
    let mut notes = Vec::new();
    let mut ok = true;

    let f4a = cols("fig4a.csv");
    let quarter = 0.75 * ctx.params.horizon;
    let tail: Vec<f64> = f4a[0]
        .iter()
        .zip(&f4a[1])
        .filter(|(t, _)| **t >= quarter - 1e-9)
        .map(|(_, b)| *b)
        .collect();
    let rise = nondecreasing(&tail.iter().map(|b| -b).collect::<Vec<_>>(), 1.0);
    let last_interior = f4a[1][f4a[1].len() - 2];
    ok &= rise <= 0.0 && last_interior.abs() <= tol;
    notes.push(format!("fig4a final-quarter rise {rise:.3e}, b(T-h) {last_interior}"));

    let f4b = cols("fig4b.csv");
    let b16 = f4b[1][0];
    let gap = (b16 - PAPER_CLASS_TWO_BARRIER).abs();
    ok &= f4b[0][0] == CLASS_TWO_CLOCK && gap <= tol;
    notes.push(format!("fig4b b(1.6) {b16} vs {PAPER_CLASS_TWO_BARRIER}"));

    let f1 = cols("fig1.csv");
    let f2 = cols("fig2.csv");
    let f3 = cols("fig3.csv");
    let x_mono = nondecreasing(&f1[1], 1e-10).max(nondecreasing(&f1[2], 1e-10));
    let s_mono = nondecreasing(&f3[1], 1e-10).max(nondecreasing(&f3[2], 1e-10));
    let dom = f1[1]
        .iter()
        .zip(&f1[2])
        .chain(f2[1].iter().zip(&f2[2]))
        .map(|(a, b)| (b - a) / 1e-9)
        .fold(0.0, f64::max);
    ok &= x_mono <= 1.0 && s_mono <= 1.0 && dom <= 1.0;
    notes.push(format!("fig1 x-monotone {x_mono:.2}, fig3 s-monotone {s_mono:.2}, class dominance {dom:.2} (violation / slack)"));

    let mut c = criterion(9, "figure_reproduction", gap, tol, notes.join("; "), start);
    c.passed = ok;
    Ok((c, rendered))
}

fn determinism(ctx: &Ctx, first: &crate::output::OutputSet, opt: &Solution) -> Result<Criterion, CliError> {
    let start = Instant::now();
    let (second, _) = render_figures(ctx.spec)?;
    let mut differing: Vec<String> = first
        .names()
        .filter(|n| n.ends_with(".csv") && first.get(n) != second.get(n))
        .map(String::from)
        .collect();

    let field = opt.barrier.as_ref().expect("optimize mode returns barriers");
    let init = Init::new(Class::One, 0.0, 0.0, 2.5);
    let threads = std::thread::available_parallelism().map_or(4, |n| n.get()).max(4);
    let run = |n: usize| -> Result<bonus_malus::McResult, CliError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        Ok(pool.install(|| estimate_value(&ctx.params, &Policy::Grid(field), init, ctx.spec.mc.n_paths, ctx.spec.mc.seed))?)
    };
    let (one, many) = (run(1)?, run(threads)?);
    if one != many {
        differing.push(format!("simulate 1 vs {threads} threads"));
    }
    let detail = if differing.is_empty() {
        format!("figure CSVs byte-identical across two runs; MC identical at 1 and {threads} threads")
    } else {
        format!("differences: {}", differing.join(", "))
    };
    Ok(criterion(10, "determinism", differing.len() as f64, 0.0, detail, start))
}

/// Run every criterion. Numerical failures of the underlying solves
/// propagate as errors.
pub fn run_check(spec: &RunSpec, mut progress: impl FnMut(&Criterion)) -> Result<CheckReport, CliError> {
    let params = spec.params();
    let grid = spec.build_grid()?;
    let ctx = Ctx {
        spec,
        params,
        grid,
        control: spec.control()?,
    };
    let opt = ctx.solve(BarrierMode::Optimize)?;
    let mut criteria = Vec::new();
    let mut push = |c: Criterion| {
        progress(&c);
        criteria.push(c);
    };
    push(terminal_identity(&ctx, &opt)?);
    push(boundary_identity(&ctx, &opt)?);
    push(base_case(&ctx)?);
    push(fixed_policy_oracle(&ctx)?);
    push(optimality_sanity(&ctx, &opt)?);
    push(dpp(&ctx, &opt)?);
    push(monotonicity(&ctx, &opt)?);
    push(lipschitz(&ctx, &opt)?);
    let (fig, rendered) = figures(&ctx)?;
    push(fig);
    push(determinism(&ctx, &rendered, &opt)?);
    Ok(CheckReport {
        passed: criteria.iter().all(|c| c.passed),
        config_error: None,
        seed: spec.mc.seed,
        n_paths: spec.mc.n_paths,
        criteria,
    })
}
