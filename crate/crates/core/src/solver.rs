//! Jump-count iteration with pointwise policy improvement.
//!
//! Iterate `n + 1` is obtained from iterate `n` by transporting backward in
//! time along the characteristics `t - s = const` with an explicit upwind
//! step, feeding iterate `n` into the claim integrals:
//!
//! ```text
//! v(t, s, x) = v(t+h, s+h, x)
//!            + h * [ a * (v(t+h, s+h, x+h_x) - v(t+h, s+h, x)) / h_x
//!                    + J_b[prev](t+h, s+h, x) - λ v(t+h, s+h, x) ]
//! ```
//!
//! where `a` is the mean drift over the step and
//!
//! ```text
//! J_b[u](i, t, s, x) = λ ∫_0^b u_i(t, s, x - y) dF(y) + λ ∫_b^∞ u_2(t, 0, x - min(y, m_i)) dF(y).
//! ```
//!
//! In optimize mode `b` is chosen per node as the candidate maximizing `J_b`,
//! which is the only `b`-dependent part of the generator. The class-2 reset
//! boundary `V2(t, S, x) = V1(t, 0, x)` is enforced inside every sweep.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{interp_row, BarrierField, Grid, ValueField};
use crate::model::{Class, ModelParams};
use crate::scalar::Scalar;

/// Barrier used for a fixed-policy evaluation.
#[derive(Debug, Clone)]
pub enum FixedBarrier<T> {
    Constant(T),
    Field(BarrierField<T>),
}

#[derive(Debug, Clone)]
pub enum BarrierMode<T> {
    Fixed(FixedBarrier<T>),
    Optimize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StopRule<T> {
    FixedIterations(usize),
    /// Stop once the sup-norm change over the wealth window drops below the tolerance.
    SupChangeBelow(T),
}

#[derive(Debug, Clone)]
pub struct SolveControl<T> {
    pub mode: BarrierMode<T>,
    pub stop: StopRule<T>,
    /// Forces exactly [`PAPER_ITERATIONS`] iterations.
    pub paper_mode: bool,
    /// Hard cap for [`StopRule::SupChangeBelow`].
    pub max_iterations: usize,
}

/// Iteration count used for the published figures.
pub const PAPER_ITERATIONS: usize = 5;
pub const DEFAULT_MAX_ITERATIONS: usize = 200;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

impl<T: Scalar> SolveControl<T> {
    pub fn optimize() -> Self {
        SolveControl {
            mode: BarrierMode::Optimize,
            stop: StopRule::SupChangeBelow(T::of(DEFAULT_TOLERANCE)),
            paper_mode: false,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }

    pub fn fixed(b: T) -> Self {
        SolveControl {
            mode: BarrierMode::Fixed(FixedBarrier::Constant(b)),
            ..Self::optimize()
        }
    }

    pub fn paper() -> Self {
        SolveControl {
            paper_mode: true,
            ..Self::optimize()
        }
    }

    pub fn with_stop(mut self, stop: StopRule<T>) -> Self {
        self.stop = stop;
        self
    }

    pub fn effective_stop(&self) -> StopRule<T> {
        if self.paper_mode {
            StopRule::FixedIterations(PAPER_ITERATIONS)
        } else {
            self.stop
        }
    }

    fn validate(&self) -> Result<()> {
        if let StopRule::SupChangeBelow(tol) = self.stop {
            if !(tol > T::zero()) {
                return Err(Error::InvalidParams(format!("tolerance must be positive, got {tol}")));
            }
        }
        if let BarrierMode::Fixed(FixedBarrier::Constant(b)) = self.mode {
            if !(b >= T::zero()) {
                return Err(Error::InvalidParams(format!("barrier must be >= 0, got {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult<T> {
    pub value: ValueField<T>,
    /// Present in optimize mode once at least one sweep ran.
    pub barrier: Option<BarrierField<T>>,
    pub iterations: usize,
    /// Sup-norm change over the wealth window, one entry per iteration.
    pub sup_change_history: Vec<f64>,
    /// Largest increase `v^{n+1} - v^n`, relative to `max(1, |v^n|)`, over all nodes.
    pub max_increase_history: Vec<f64>,
}

/// Claim-size ladder `y_k = k h_x` with exact probability weights.
#[derive(Debug, Clone)]
pub struct Ladder<T> {
    h_x: T,
    n_y: usize,
    /// `1 - F(y_k)`
    surv: Vec<T>,
    /// `(F(y_{k+1}) - F(y_k)) / 2`
    half_mass: Vec<T>,
    /// Common ratio of `half_mass` when it is geometric.
    ratio: Option<T>,
}

impl<T: Scalar> Ladder<T> {
    pub fn new(params: &ModelParams<T>, grid: &Grid<T>) -> Self {
        let law = &params.claim_law;
        let y = |k: usize| T::of_usize(k) * grid.h_x;
        let surv: Vec<T> = (0..=grid.n_y).map(|k| law.survival(y(k))).collect();
        let half_mass: Vec<T> = (0..grid.n_y)
            .map(|k| T::of(0.5) * (surv[k] - surv[k + 1]))
            .collect();
        let ratio = geometric_ratio(&half_mass);
        Ladder {
            h_x: grid.h_x,
            n_y: grid.n_y,
            surv,
            half_mass,
            ratio,
        }
    }

    /// `(k, on)` with `y_k <= y < y_{k+1}` and `on` telling whether `y = y_k`,
    /// for `y` below the last ladder point.
    fn split(&self, y: T) -> Option<(usize, bool)> {
        if let Some(k) = self.index_of(y) {
            return Some((k, true));
        }
        let k = (y / self.h_x).floor().to_usize()?;
        (k < self.n_y).then_some((k, false))
    }

    /// Ladder index of `y` if it lies on the ladder.
    fn index_of(&self, y: T) -> Option<usize> {
        if !y.is_finite() {
            return None;
        }
        let p = y / self.h_x;
        let k = p.round();
        if (p - k).abs() <= T::tol(1e-9) && k >= T::zero() {
            k.to_usize().filter(|&k| k <= self.n_y)
        } else {
            None
        }
    }
}

fn geometric_ratio<T: Scalar>(w: &[T]) -> Option<T> {
    if w.len() < 2 || !(w[0] > T::zero()) {
        return None;
    }
    let q = w[1] / w[0];
    let tol = T::tol(1e-9);
    let ok = w.windows(2).all(|p| p[0] > T::zero() && (p[1] / p[0] - q).abs() <= tol * q);
    ok.then_some(q)
}

#[inline]
fn at<T: Copy>(row: &[T], j: isize) -> T {
    row[j.max(0) as usize]
}

#[inline]
fn improves<T: Scalar>(candidate: T, best: T) -> bool {
    candidate - best > T::of(64.0) * T::epsilon() * candidate.abs().max(best.abs())
}

/// `∫_a^c row(x - y) dF(y)` by the trapezoid rule in `F` on the knots `a`,
/// the ladder points strictly between, and `c`. Requires `0 <= a <= c <= y_max`.
fn segment<T: Scalar>(params: &ModelParams<T>, grid: &Grid<T>, row: &[T], x: T, a: T, c: T) -> T {
    if !(c > a) {
        return T::zero();
    }
    let f = |y: T| interp_row(row, grid.x_bottom, grid.h_x, x - y);
    let law = &params.claim_law;
    let first = (a / grid.h_x).floor().to_usize().unwrap_or(0) + 1;
    let mut acc = T::zero();
    let mut y0 = a;
    let mut f0 = f(a);
    let mut k = first;
    loop {
        let y1 = T::of_usize(k) * grid.h_x;
        let y1 = if y1 >= c - T::tol(1e-12) * grid.h_x { c } else { y1 };
        if y1 > y0 {
            let f1 = f(y1);
            acc = acc + T::of(0.5) * (f0 + f1) * (law.survival(y0) - law.survival(y1));
            y0 = y1;
            f0 = f1;
        }
        if y1 >= c {
            break;
        }
        k += 1;
    }
    acc
}

fn keep_integral<T: Scalar>(params: &ModelParams<T>, grid: &Grid<T>, g: &[T], x: T, b: T) -> T {
    let y_max = grid.y_max();
    let body = segment(params, grid, g, x, T::zero(), b.min(y_max));
    if b > y_max {
        let edge = interp_row(g, grid.x_bottom, grid.h_x, x - y_max);
        body + edge * (params.claim_law.survival(y_max) - params.claim_law.survival(b))
    } else {
        body
    }
}

fn report_integral<T: Scalar>(params: &ModelParams<T>, grid: &Grid<T>, r: &[T], x: T, b: T, m: T) -> T {
    let law = &params.claim_law;
    let at_m = interp_row(r, grid.x_bottom, grid.h_x, x - m);
    if b >= m {
        return at_m * law.survival(b);
    }
    let y_max = grid.y_max();
    let mut acc = segment(params, grid, r, x, b.min(y_max), m.min(y_max));
    if m > y_max {
        let edge = interp_row(r, grid.x_bottom, grid.h_x, x - y_max);
        acc = acc + edge * (law.survival(b.max(y_max)) - law.survival(m));
    }
    acc + at_m * law.survival(m)
}

/// `J_b[prev](i, t, s, x)` at an arbitrary wealth and barrier.
///
/// The keep branch is integrated up to `min(b, y_max)` with a flat
/// continuation beyond `y_max`; the report branch is integrated up to the
/// deductible and closed with the exact tail `u_2(t, 0, x - m) (1 - F(max(b, m)))`.
pub fn jump_operator<T: Scalar>(
    params: &ModelParams<T>,
    prev: &ValueField<T>,
    class: Class,
    k_t: usize,
    k_s: usize,
    x: T,
    b: T,
) -> Result<T> {
    if !(b >= T::zero()) {
        return Err(Error::domain("jump_operator", format!("barrier must be >= 0, got {b}")));
    }
    let grid = prev.grid();
    let g = prev.row(class, k_t, k_s)?;
    let r = prev.row(Class::Two, k_t, 0)?;
    let m = params.deductible(class);
    let keep = keep_integral(params, grid, g, x, b);
    let report = report_integral(params, grid, r, x, b, m);
    Ok(params.intensity * (keep + report))
}

/// Maximum of [`jump_operator`] over `candidates` and the smallest maximizer.
pub fn optimal_jump_operator<T: Scalar>(
    params: &ModelParams<T>,
    prev: &ValueField<T>,
    class: Class,
    k_t: usize,
    k_s: usize,
    x: T,
    candidates: &[T],
) -> Result<(T, T)> {
    let mut best: Option<(T, T)> = None;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("barrier candidates are not NaN"));
    for &b in &sorted {
        let v = jump_operator(params, prev, class, k_t, k_s, x, b)?;
        match best {
            Some((bv, _)) if !improves(v, bv) => {}
            _ => best = Some((v, b)),
        }
    }
    best.ok_or(Error::EmptyCandidates)
}

/// Per-sweep context shared by all lines.
struct SweepContext<'a, T> {
    params: &'a ModelParams<T>,
    grid: &'a Grid<T>,
    ladder: Ladder<T>,
    prev: &'a ValueField<T>,
    mode: &'a BarrierMode<T>,
}

impl<'a, T: Scalar> SweepContext<'a, T> {
    /// Jump term on every wealth node of `(class, k_t, k_s)`; in optimize
    /// mode also the chosen candidate indices.
    fn jump_row(&self, class: Class, k_t: usize, k_s: usize, out: &mut [T], choice: &mut [u32]) -> Result<()> {
        let g = self.prev.row(class, k_t, k_s)?;
        let r = self.prev.row(Class::Two, k_t, 0)?;
        let m = self.params.deductible(class);
        let lambda = self.params.intensity;
        match self.mode {
            BarrierMode::Optimize => {
                if let Some(split) = self.ladder.split(m) {
                    let mut scratch = Vec::new();
                    for j in 0..out.len() {
                        let (v, c) = self.best_on_ladder(g, r, j, m, split, &mut scratch);
                        out[j] = lambda * v;
                        choice[j] = c as u32;
                    }
                } else {
                    let cands = self.grid.barrier_candidates();
                    for j in 0..out.len() {
                        let (v, b) = optimal_jump_operator(self.params, self.prev, class, k_t, k_s, self.grid.x(j), &cands)?;
                        out[j] = v;
                        choice[j] = self.grid.nearest_candidate(b) as u32;
                    }
                }
            }
            BarrierMode::Fixed(FixedBarrier::Constant(b)) => {
                let kb = match self.ladder.index_of(*b) {
                    Some(kb) => Some(kb),
                    None if *b > self.grid.y_max() => Some(self.ladder.n_y),
                    None => None,
                };
                match (kb, self.ladder.index_of(m)) {
                    (Some(kb), Some(_)) if self.ladder.ratio.is_some() && kb > 0 => {
                        self.keep_window(g, kb, out);
                        for j in 0..out.len() {
                            out[j] = lambda * self.fixed_at(g, r, j, *b, m, Some(out[j]));
                        }
                    }
                    _ => {
                        for j in 0..out.len() {
                            out[j] = lambda * self.fixed_at(g, r, j, *b, m, None);
                        }
                    }
                }
            }
            BarrierMode::Fixed(FixedBarrier::Field(field)) => {
                let idx = field.index_row(class, k_t, k_s)?;
                for j in 0..out.len() {
                    let b = self.grid.candidate_value(idx[j] as usize);
                    out[j] = lambda * self.fixed_at(g, r, j, b, m, None);
                }
            }
        }
        Ok(())
    }

    /// Keep-branch sum over the first `k` ladder intervals at node `j`.
    #[inline]
    fn keep_prefix(&self, g: &[T], j: usize, k: usize) -> T {
        let j = j as isize;
        let mut acc = T::zero();
        for (i, &w) in self.ladder.half_mass[..k].iter().enumerate() {
            let i = i as isize;
            acc = acc + (at(g, j - i) + at(g, j - i - 1)) * w;
        }
        acc
    }

    /// `keep_prefix(g, j, k)` for every node `j` of the row, by a sliding
    /// window over geometric weights.
    fn keep_window(&self, g: &[T], k: usize, out: &mut [T]) {
        let q = self.ladder.ratio.expect("geometric ladder");
        let w0 = self.ladder.half_mass[0];
        let tail = self.ladder.half_mass[k - 1] * q;
        let pair = |i: isize| at(g, i) + at(g, i - 1);
        let mut acc = self.keep_prefix(g, 0, k);
        out[0] = acc;
        for j in 1..out.len() {
            let ji = j as isize;
            acc = w0 * pair(ji) + q * acc - tail * pair(ji - k as isize);
            out[j] = acc;
        }
    }

    /// Integral part of `J_b` (without λ) at wealth node `j` for a fixed barrier.
    /// `window`, when given, is the precomputed ladder part of the keep sum.
    fn fixed_at(&self, g: &[T], r: &[T], j: usize, b: T, m: T, window: Option<T>) -> T {
        let ladder = &self.ladder;
        let (kb, km) = match (ladder.index_of(b), ladder.index_of(m)) {
            (Some(kb), Some(km)) => (Some(kb), km),
            (None, Some(km)) if b > self.grid.y_max() => (None, km),
            _ => {
                let x = self.grid.x(j);
                return keep_integral(self.params, self.grid, g, x, b)
                    + report_integral(self.params, self.grid, r, x, b, m);
            }
        };
        let law = &self.params.claim_law;
        let ji = j as isize;
        let prefix = |k| window.unwrap_or_else(|| self.keep_prefix(g, j, k));
        let keep = match kb {
            Some(kb) => prefix(kb),
            None => prefix(ladder.n_y) + at(g, ji - ladder.n_y as isize) * (ladder.surv[ladder.n_y] - law.survival(b)),
        };
        let at_m = at(r, ji - km as isize);
        let report = match kb {
            Some(kb) if kb < km => {
                let mut acc = at_m * ladder.surv[km];
                for k in kb..km {
                    let k = k as isize;
                    acc = acc + (at(r, ji - k) + at(r, ji - k - 1)) * ladder.half_mass[k as usize];
                }
                acc
            }
            Some(kb) => at_m * ladder.surv[kb],
            None => at_m * law.survival(b),
        };
        keep + report
    }

    /// Maximize over the candidate ladder at node `j` for deductible `m`
    /// split on the ladder as `(k_lo, on)` by [`Ladder::split`]. Returns the
    /// integral (without λ) and the candidate index.
    ///
    /// Beyond the deductible the increment between consecutive ladder points
    /// is `ΔF_k ((g_k + g_{k+1}) / 2 - u_2(x - m))`, and `g` is nonincreasing
    /// in `k` because the iterate is nondecreasing in wealth, so the scan
    /// stops at the first candidate whose next increment is not positive.
    fn best_on_ladder(&self, g: &[T], r: &[T], j: usize, m: T, split: (usize, bool), scratch: &mut Vec<T>) -> (T, usize) {
        let ladder = &self.ladder;
        let n_y = ladder.n_y;
        let stride = self.grid.candidate_stride;
        let ji = j as isize;
        let (k_lo, on) = split;
        let (at_m, tail_m) = if on {
            (at(r, ji - k_lo as isize), ladder.surv[k_lo])
        } else {
            let x = self.grid.x(j) - m;
            (interp_row(r, self.grid.x_bottom, self.grid.h_x, x), self.params.claim_law.survival(m))
        };
        // first ladder index at or beyond the deductible
        let k_m = if on { k_lo } else { k_lo + 1 };

        scratch.clear();
        if k_m > 0 {
            scratch.resize(k_lo + 1, T::zero());
            scratch[k_lo] = if on {
                at_m * tail_m
            } else {
                at_m * tail_m + T::of(0.5) * (at(r, ji - k_lo as isize) + at_m) * (ladder.surv[k_lo] - tail_m)
            };
            for i in (0..k_lo).rev() {
                let ii = i as isize;
                scratch[i] = scratch[i + 1] + (at(r, ji - ii) + at(r, ji - ii - 1)) * ladder.half_mass[i];
            }
        }
        let suffix: &[T] = scratch;
        let report = |k: usize| -> T {
            if k < k_m {
                suffix[k]
            } else {
                at_m * ladder.surv[k]
            }
        };

        let mut keep = T::zero();
        let mut best = report(0);
        let mut best_k = 0usize;
        let mut k = 0usize;
        loop {
            if k.is_multiple_of(stride) {
                let value = keep + report(k);
                if k > 0 && improves(value, best) {
                    best = value;
                    best_k = k / stride;
                }
                if k >= k_m && k < n_y {
                    let next = T::of(0.5) * (at(g, ji - k as isize) + at(g, ji - k as isize - 1));
                    if next <= at_m {
                        return (best, best_k);
                    }
                }
            }
            if k == n_y {
                break;
            }
            keep = keep + (at(g, ji - k as isize) + at(g, ji - k as isize - 1)) * ladder.half_mass[k];
            k += 1;
        }
        let never = keep + at(g, ji - n_y as isize) * ladder.surv[n_y];
        if improves(never, best) {
            best = never;
            best_k = self.grid.candidate_count() - 1;
        }
        (best, best_k)
    }

    /// Sweep one characteristic line backward in time.
    fn sweep_line(
        &self,
        class: Class,
        d: usize,
        line: &mut [T],
        mut barrier: Option<&mut [u32]>,
        class_one: Option<&[T]>,
    ) -> Result<()> {
        let grid = self.grid;
        let params = self.params;
        let nx = grid.n_x;
        let len = grid.line_len(class, d);
        let top = len - 1;
        let kt_top = d + top;
        {
            let row = &mut line[top * nx..(top + 1) * nx];
            if kt_top == grid.n_t {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = params.utility(grid.x(j));
                }
            } else {
                // class 2 starting on the reset boundary
                let src = class_one.expect("class-1 layer available for the boundary");
                let node = grid.node_index(Class::One, kt_top, 0)?;
                row.copy_from_slice(&src[node * nx..(node + 1) * nx]);
            }
        }

        let lambda = params.intensity;
        let h = grid.h;
        let ratio = h / grid.h_x;
        let mut jump = vec![T::zero(); nx];
        let mut choice = vec![0u32; nx];
        for k_s in (0..=top).rev() {
            let k_t = d + k_s;
            let record = barrier.is_some();
            if lambda != T::zero() && (k_s > 0 || record) {
                self.jump_row(class, k_t, k_s, &mut jump, &mut choice)?;
                if let Some(b) = barrier.as_deref_mut() {
                    b[k_s * nx..(k_s + 1) * nx].copy_from_slice(&choice);
                }
            }
            if k_s == 0 {
                break;
            }
            let s_next = grid.t(k_s - 1);
            let drift = params.drift_integral_unchecked(class, s_next, h) / h;
            let (lower, upper) = line.split_at_mut(k_s * nx);
            let cur = &upper[..nx];
            let next = &mut lower[(k_s - 1) * nx..];
            for j in 0..nx {
                let up = if j + 1 < nx { cur[j + 1] - cur[j] } else { T::zero() };
                next[j] = cur[j] + drift * ratio * up + h * (jump[j] - lambda * cur[j]);
            }
            if let Some(j) = next.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    class: class.number(),
                    t: grid.t(k_t - 1).as_f64(),
                    s: s_next.as_f64(),
                    x: grid.x(j).as_f64(),
                    iteration: 0,
                });
            }
        }
        Ok(())
    }
}

fn split_lines<'a, U>(mut data: &'a mut [U], grid: &Grid<impl Scalar>, class: Class) -> Vec<&'a mut [U]> {
    let mut out = Vec::with_capacity(grid.n_t + 1);
    for d in 0..=grid.n_t {
        let (head, tail) = data.split_at_mut(grid.line_len(class, d) * grid.n_x);
        out.push(head);
        data = tail;
    }
    out
}

fn bar_lines<'a, T: Scalar>(b: Option<&'a mut [u32]>, grid: &Grid<T>, class: Class) -> Vec<Option<&'a mut [u32]>> {
    match b {
        Some(b) => split_lines(b, grid, class).into_iter().map(Some).collect(),
        None => (0..=grid.n_t).map(|_| None).collect(),
    }
}

/// One backward sweep producing the next iterate in `current` from `prev`.
///
/// The terminal layer is set to the utility and the reset boundary is
/// coupled to the class-1 values of the same iterate. In optimize mode the
/// chosen barriers are written into `barrier`.
pub fn sweep_characteristic<T: Scalar>(
    params: &ModelParams<T>,
    prev: &ValueField<T>,
    current: &mut ValueField<T>,
    mode: &BarrierMode<T>,
    barrier: Option<&mut BarrierField<T>>,
) -> Result<()> {
    let grid = prev.grid().clone();
    if **current.grid() != *grid {
        return Err(Error::IncompatibleGrid);
    }
    if let Some(b) = barrier.as_ref() {
        if **b.grid() != *grid {
            return Err(Error::IncompatibleGrid);
        }
    }
    if let BarrierMode::Fixed(FixedBarrier::Field(f)) = mode {
        if **f.grid() != *grid {
            return Err(Error::IncompatibleGrid);
        }
    }
    let ctx = SweepContext {
        params,
        grid: &grid,
        ladder: Ladder::new(params, &grid),
        prev,
        mode,
    };
    let (one, two) = current.split_mut();
    let (b_one, b_two) = match barrier {
        Some(b) => {
            let (x, y) = b.split_mut();
            (Some(x), Some(y))
        }
        None => (None, None),
    };
    let b1 = bar_lines(b_one, &grid, Class::One);
    split_lines(one, &grid, Class::One)
        .into_par_iter()
        .zip(b1)
        .enumerate()
        .try_for_each(|(d, (line, bar))| ctx.sweep_line(Class::One, d, line, bar, None))?;

    let one: &[T] = one;
    let b2 = bar_lines(b_two, &grid, Class::Two);
    split_lines(two, &grid, Class::Two)
        .into_par_iter()
        .zip(b2)
        .enumerate()
        .try_for_each(|(d, (line, bar))| ctx.sweep_line(Class::Two, d, line, bar, Some(one)))?;

    current.apply_boundary();
    Ok(())
}

/// `(sup change over the window, largest relative increase over all nodes)`.
fn compare<T: Scalar>(prev: &ValueField<T>, cur: &ValueField<T>) -> (f64, f64) {
    let g = prev.grid();
    let (lo, hi) = g.window;
    let mut change = 0.0f64;
    let mut increase = f64::NEG_INFINITY;
    for class in Class::ALL {
        let a = prev.class_data(class);
        let b = cur.class_data(class);
        for (ra, rb) in a.chunks_exact(g.n_x).zip(b.chunks_exact(g.n_x)) {
            for j in 0..g.n_x {
                let (u, v) = (ra[j].as_f64(), rb[j].as_f64());
                if j >= lo && j <= hi {
                    change = change.max((v - u).abs());
                }
                increase = increase.max((v - u) / u.abs().max(1.0));
            }
        }
    }
    (change, increase)
}

/// Run the jump-count iteration from the closed-form zero-jump values.
pub fn iterate<T: Scalar>(
    params: &ModelParams<T>,
    grid: Arc<Grid<T>>,
    control: &SolveControl<T>,
) -> Result<SolveResult<T>> {
    control.validate()?;
    if grid.horizon != params.horizon || grid.reset_time != params.reset_time {
        return Err(Error::IncompatibleGrid);
    }
    let mut prev = ValueField::from_fn(grid.clone(), |c, t, s, x| params.v0(c, t, s, x))?;
    let stop = control.effective_stop();
    let mut result = SolveResult {
        value: prev.clone(),
        barrier: None,
        iterations: 0,
        sup_change_history: Vec::new(),
        max_increase_history: Vec::new(),
    };
    let limit = match stop {
        StopRule::FixedIterations(n) => n,
        StopRule::SupChangeBelow(_) => control.max_iterations,
    };
    if limit == 0 {
        return Ok(result);
    }
    let optimize = matches!(control.mode, BarrierMode::Optimize);
    let mut barrier = optimize.then(|| BarrierField::constant(grid.clone(), T::zero()));
    let mut cur = ValueField::zeros(grid.clone());
    let mut converged = false;
    for n in 1..=limit {
        sweep_characteristic(params, &prev, &mut cur, &control.mode, barrier.as_mut()).map_err(|e| match e {
            Error::NonFinite { class, t, s, x, .. } => Error::NonFinite {
                class,
                t,
                s,
                x,
                iteration: n,
            },
            other => other,
        })?;
        let (change, increase) = compare(&prev, &cur);
        result.sup_change_history.push(change);
        result.max_increase_history.push(increase);
        std::mem::swap(&mut prev, &mut cur);
        result.iterations = n;
        if let StopRule::SupChangeBelow(tol) = stop {
            if change < tol.as_f64() {
                converged = true;
                break;
            }
        }
    }
    if let StopRule::SupChangeBelow(tol) = stop {
        if !converged {
            return Err(Error::NonConvergence {
                iterations: result.iterations,
                last_change: result.sup_change_history.last().copied().unwrap_or(f64::NAN),
                tol: tol.as_f64(),
            });
        }
    }
    result.value = prev;
    result.barrier = barrier;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::model::PremiumSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid_for(p: &ModelParams<f64>, h: f64, hx: f64) -> Arc<Grid<f64>> {
        let spec = GridSpec {
            h_t: h,
            h_x: hx,
            ..GridSpec::default()
        };
        Arc::new(Grid::build(p, &spec).unwrap())
    }

    /// Table 1 law and utility on a short horizon, for fine grids at low cost.
    fn short() -> ModelParams<f64> {
        let mut p = ModelParams::table1();
        p.horizon = 0.2;
        p.reset_time = 0.1;
        p
    }

    fn utility_field(p: &ModelParams<f64>, g: &Arc<Grid<f64>>) -> ValueField<f64> {
        ValueField::from_fn(g.clone(), |_, _, _, x| Ok(p.utility(x))).unwrap()
    }

    fn solve(p: &ModelParams<f64>, g: &Arc<Grid<f64>>, control: SolveControl<f64>) -> SolveResult<f64> {
        iterate(p, g.clone(), &control).unwrap()
    }

    #[test]
    fn constant_field_integrates_to_lambda_k() {
        let mut p = ModelParams::table1();
        p.intensity = 1.3;
        for m in [0.0, 0.4, 0.37] {
            p.deductibles = [m, m];
            let g = grid_for(&p, 0.05, 0.1);
            let prev = ValueField::from_fn(g.clone(), |_, _, _, _| Ok(-0.7)).unwrap();
            for b in [0.0, 0.123, 0.3, 1.0, 25.0, f64::INFINITY] {
                for (class, k_t, k_s) in [(Class::One, 10, 3), (Class::Two, 30, 20), (Class::One, 50, 50)] {
                    for x in [0.0, 2.45, 5.0] {
                        let v = jump_operator(&p, &prev, class, k_t, k_s, x, b).unwrap();
                        assert!((v + 0.7 * 1.3).abs() < 1e-8, "m {m} b {b} x {x}: {v}");
                    }
                }
            }
        }
    }

    #[test]
    fn full_reporting_without_deductible_is_the_reset_value() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let prev = ValueField::from_fn(g.clone(), |c, t, s, x| {
            Ok(-(-0.5 * x).exp() * (1.0 + 0.1 * t - 0.05 * s) - c.index() as f64)
        })
        .unwrap();
        for (class, k_t, k_s) in [(Class::One, 10, 3), (Class::Two, 30, 20)] {
            for x in [0.0, 1.234, 5.0] {
                let v = jump_operator(&p, &prev, class, k_t, k_s, x, 0.0).unwrap();
                let want = prev.interp_x(Class::Two, k_t, 0, x).unwrap();
                assert_eq!(v, want);
            }
        }
    }

    #[test]
    fn matches_fine_reference_quadrature() {
        let p = short();
        let g = grid_for(&p, 0.01, 0.01);
        let prev = utility_field(&p, &g);
        let v = jump_operator(&p, &prev, Class::One, 3, 1, 5.0, 1.0).unwrap();
        let n = 1_000_000;
        let dy = 1.0 / n as f64;
        let f = |y: f64| p.utility(5.0 - y) * (-y).exp();
        let mut keep = 0.5 * (f(0.0) + f(1.0));
        for k in 1..n {
            keep += f(k as f64 * dy);
        }
        keep *= dy;
        let report = p.utility(5.0) * (-1.0f64).exp();
        assert!((v - (keep + report)).abs() < 1e-6, "{v} vs {}", keep + report);
    }

    #[test]
    fn terminal_layer_prefers_full_reporting() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let prev = utility_field(&p, &g);
        let cands = g.barrier_candidates();
        for class in Class::ALL {
            for x in [0.0, 1.0, 3.3, 5.0] {
                let (v, b) = optimal_jump_operator(&p, &prev, class, 20, 0, x, &cands).unwrap();
                assert_eq!(b, 0.0);
                for &c in &cands {
                    assert!(v >= jump_operator(&p, &prev, class, 20, 0, x, c).unwrap());
                }
            }
        }
        assert_eq!(
            optimal_jump_operator(&p, &prev, Class::One, 20, 0, 1.0, &[]),
            Err(Error::EmptyCandidates)
        );
    }

    #[test]
    fn ties_go_to_the_smallest_barrier() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let prev = ValueField::from_fn(g.clone(), |_, _, _, _| Ok(-1.0)).unwrap();
        let (_, b) = optimal_jump_operator(&p, &prev, Class::One, 5, 2, 2.0, &[1.0, f64::INFINITY, 0.5]).unwrap();
        assert_eq!(b, 0.5);
    }

    #[test]
    fn fast_rows_match_exhaustive_search() {
        for m in [0.0, 0.3] {
            let mut p = ModelParams::table1();
            p.deductibles = [m, 0.5 * m];
            let g = grid_for(&p, 0.1, 0.1);
            let prev = solve(&p, &g, SolveControl::optimize().with_stop(StopRule::FixedIterations(3))).value;
            let mode = BarrierMode::Optimize;
            let ctx = SweepContext {
                params: &p,
                grid: &g,
                ladder: Ladder::new(&p, &g),
                prev: &prev,
                mode: &mode,
            };
            let cands = g.barrier_candidates();
            let mut out = vec![0.0; g.n_x];
            let mut choice = vec![0u32; g.n_x];
            for (class, k_t, k_s) in [(Class::One, 5, 0), (Class::One, 20, 12), (Class::Two, 16, 4), (Class::Two, 40, 20)] {
                ctx.jump_row(class, k_t, k_s, &mut out, &mut choice).unwrap();
                for j in (g.window.0..=g.window.1).step_by(7) {
                    let (v, b) = optimal_jump_operator(&p, &prev, class, k_t, k_s, g.x(j), &cands).unwrap();
                    assert_relative_eq!(out[j], v, max_relative = 1e-12);
                    assert_eq!(g.candidate_value(choice[j] as usize), b, "{class} {k_t} {k_s} {j}");
                }
            }
        }
    }

    #[test]
    fn sliding_window_matches_direct_sum() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let prev = solve(&p, &g, SolveControl::fixed(f64::INFINITY).with_stop(StopRule::FixedIterations(2))).value;
        let ladder = Ladder::new(&p, &g);
        assert!(ladder.ratio.is_some());
        let mode = BarrierMode::Optimize;
        let ctx = SweepContext {
            params: &p,
            grid: &g,
            ladder,
            prev: &prev,
            mode: &mode,
        };
        let row = prev.row(Class::One, 30, 10).unwrap();
        let mut out = vec![0.0; g.n_x];
        for k in [1, 7, g.n_y] {
            ctx.keep_window(row, k, &mut out);
            for j in 0..g.n_x {
                let direct = ctx.keep_prefix(row, j, k);
                assert!((out[j] - direct).abs() <= 1e-9 * direct.abs().max(1.0), "{k} {j}");
            }
        }
    }

    #[test]
    fn zero_drift_without_claims_copies_the_terminal_layer() {
        let mut p = ModelParams::table1();
        p.intensity = 0.0;
        p.premiums = [PremiumSpec::Constant { rate: 1.2 }, PremiumSpec::Constant { rate: 1.2 }];
        let g = grid_for(&p, 0.1, 0.1);
        let prev = ValueField::zeros(g.clone());
        let mut cur = ValueField::zeros(g.clone());
        sweep_characteristic(&p, &prev, &mut cur, &BarrierMode::Optimize, None).unwrap();
        for (c, kt, ks, row) in cur.rows() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, p.utility(g.x(j)), "{c} {kt} {ks} {j} {}", g.x(j));
            }
        }
    }

    fn advection_error(hx: f64) -> f64 {
        let mut p = ModelParams::table1();
        p.intensity = 0.0;
        let g = grid_for(&p, hx, hx);
        let prev = ValueField::zeros(g.clone());
        let mut cur = ValueField::zeros(g.clone());
        sweep_characteristic(&p, &prev, &mut cur, &BarrierMode::Fixed(FixedBarrier::Constant(0.0)), None).unwrap();
        let mut err = 0.0f64;
        for (class, k_t, k_s, row) in cur.rows() {
            let (t, s) = (g.t(k_t), g.t(k_s));
            let left = p.horizon - t;
            let flow = match class {
                Class::One => p.drift_integral(class, s, left).unwrap(),
                Class::Two if s + left < p.reset_time => p.drift_integral(class, s, left).unwrap(),
                Class::Two => {
                    let first = p.reset_time - s;
                    p.drift_integral(class, s, first).unwrap()
                        + p.drift_integral(Class::One, 0.0, left - first).unwrap()
                }
            };
            for j in g.window.0..=g.window.1 {
                err = err.max((row[j] - p.utility(g.x(j) + flow)).abs());
            }
        }
        err
    }

    #[test]
    fn transport_matches_characteristics_to_first_order() {
        let coarse = advection_error(0.1);
        let fine = advection_error(0.05);
        // in-window Lipschitz constant of the utility is gamma at x = 0
        assert!(coarse <= 2.0 * 0.1 * 0.5, "{coarse}");
        assert!(fine <= 2.0 * 0.05 * 0.5, "{fine}");
        assert!(fine < 0.7 * coarse, "{fine} vs {coarse}");
    }

    #[test]
    fn first_sweep_from_zero_reproduces_no_claim_values() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.05, 0.05);
        let prev = ValueField::zeros(g.clone());
        let mut cur = ValueField::zeros(g.clone());
        sweep_characteristic(&p, &prev, &mut cur, &BarrierMode::Optimize, None).unwrap();
        let mut err = 0.0f64;
        for (class, k_t, k_s, row) in cur.rows() {
            let (t, s) = (g.t(k_t), g.t(k_s));
            if class == Class::Two && s + (p.horizon - t) >= p.reset_time - 1e-9 {
                continue;
            }
            for j in g.window.0..=g.window.1 {
                err = err.max((row[j] - p.v0(class, t, s, g.x(j)).unwrap()).abs());
            }
        }
        assert!(err <= g.h, "{err}");
    }

    #[test]
    fn zero_iterations_return_closed_forms() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let r = solve(&p, &g, SolveControl::optimize().with_stop(StopRule::FixedIterations(0)));
        assert_eq!(r.iterations, 0);
        assert!(r.barrier.is_none());
        for (class, k_t, k_s, row) in r.value.rows() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, p.v0(class, g.t(k_t), g.t(k_s), g.x(j)).unwrap());
            }
        }
    }

    #[test]
    fn bad_controls_and_non_convergence() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let c = SolveControl::fixed(-1.0);
        assert!(iterate(&p, g.clone(), &c).unwrap_err().is_validation());
        let c = SolveControl::optimize().with_stop(StopRule::SupChangeBelow(0.0));
        assert!(iterate(&p, g.clone(), &c).unwrap_err().is_validation());
        let mut c = SolveControl::optimize().with_stop(StopRule::SupChangeBelow(1e-12));
        c.max_iterations = 2;
        assert!(matches!(
            iterate(&p, g.clone(), &c),
            Err(Error::NonConvergence { iterations: 2, .. })
        ));
        let mut other = p.clone();
        other.horizon = 4.0;
        assert_eq!(iterate(&other, g, &SolveControl::optimize()).unwrap_err(), Error::IncompatibleGrid);
    }

    #[test]
    fn paper_mode_runs_five_iterations() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let r = solve(&p, &g, SolveControl::paper());
        assert_eq!(r.iterations, PAPER_ITERATIONS);
        assert_eq!(r.sup_change_history.len(), PAPER_ITERATIONS);
        assert!(r.barrier.is_some());
    }

    #[test]
    fn table1_solution_properties() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let r = solve(&p, &g, SolveControl::optimize());
        let v = &r.value;
        for class in Class::ALL {
            for k_s in 0..=g.max_k_s(class, g.n_t) {
                for (j, &u) in v.row(class, g.n_t, k_s).unwrap().iter().enumerate() {
                    assert_eq!(u, p.utility(g.x(j)));
                }
            }
        }
        for k_t in g.k_reset..=g.n_t {
            assert_eq!(v.row(Class::Two, k_t, g.k_reset).unwrap(), v.row(Class::One, k_t, 0).unwrap());
        }
        assert!(r.max_increase_history.iter().all(|&d| d <= 1e-12), "{:?}", r.max_increase_history);
        let window_lip = p.utility.lipschitz_on(g.x(g.window.0), g.x(g.window.1));
        for (class, k_t, k_s, row) in v.rows() {
            for j in 1..g.n_x {
                assert!(row[j] >= row[j - 1] - 1e-10, "x-monotone {class} {k_t} {k_s} {j}");
            }
            for j in g.window.0 + 1..=g.window.1 {
                assert!((row[j] - row[j - 1]) / g.h_x <= window_lip + 0.05);
            }
            if k_s > 0 {
                let below = v.row(class, k_t, k_s - 1).unwrap();
                for j in 0..g.n_x {
                    assert!(row[j] >= below[j] - 1e-9 * row[j].abs().max(1.0), "clock {class} {k_t} {k_s} {j}");
                }
            }
            if class == Class::Two {
                let best = v.row(Class::One, k_t, 0).unwrap();
                for j in 0..g.n_x {
                    assert!(best[j] >= row[j] - 1e-9 * row[j].abs().max(1.0), "dominance {k_t} {k_s} {j}");
                }
            }
        }
    }

    #[test]
    fn optimizing_dominates_every_fixed_barrier() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let stop = StopRule::FixedIterations(8);
        let best = solve(&p, &g, SolveControl::optimize().with_stop(stop)).value;
        for b in [0.0, 0.5, 1.0, f64::INFINITY] {
            let fixed = solve(&p, &g, SolveControl::fixed(b).with_stop(stop)).value;
            for ((_, _, _, a), (_, _, _, f)) in best.rows().zip(fixed.rows()) {
                for j in 0..g.n_x {
                    assert!(a[j] >= f[j] - 1e-9 * f[j].abs().max(1.0), "b {b} j {j}: {} < {}", a[j], f[j]);
                }
            }
        }
    }

    #[test]
    fn replaying_the_extracted_barriers_reproduces_the_value() {
        let p = ModelParams::table1();
        let g = grid_for(&p, 0.1, 0.1);
        let opt = solve(&p, &g, SolveControl::optimize());
        let ctl = SolveControl {
            mode: BarrierMode::Fixed(FixedBarrier::Field(opt.barrier.clone().unwrap())),
            ..SolveControl::optimize()
        };
        let fixed = solve(&p, &g, ctl);
        for ((_, _, _, a), (_, _, _, f)) in opt.value.rows().zip(fixed.value.rows()) {
            for j in g.window.0..=g.window.1 {
                assert!((a[j] - f[j]).abs() < 1e-4, "{} vs {}", a[j], f[j]);
            }
        }
    }

    #[test]
    fn works_in_single_precision() {
        let p = ModelParams::<f32>::table1();
        let spec = GridSpec {
            h_t: 0.1f32,
            h_x: 0.1,
            ..GridSpec::default()
        };
        let g = Arc::new(Grid::build(&p, &spec).unwrap());
        let r = iterate(&p, g.clone(), &SolveControl::paper()).unwrap();
        let p64 = ModelParams::table1();
        let g64 = grid_for(&p64, 0.1, 0.1);
        let r64 = solve(&p64, &g64, SolveControl::paper());
        let a = r.value.get(Class::One, 0, 0, g.x_index(2.5).unwrap()).unwrap() as f64;
        let b = r64.value.get(Class::One, 0, 0, g64.x_index(2.5).unwrap()).unwrap();
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn constant_fields_for_any_barrier(b in 0.0f64..30.0, x in -3.0f64..6.0, k in -5.0f64..0.0, k_t in 0usize..50) {
            let p = ModelParams::table1();
            let g = grid_for(&p, 0.1, 0.1);
            let prev = ValueField::from_fn(g.clone(), |_, _, _, _| Ok(k)).unwrap();
            let v = jump_operator(&p, &prev, Class::One, k_t, k_t / 2, x, b).unwrap();
            prop_assert!((v - k).abs() < 1e-8);
        }

        #[test]
        fn maximum_dominates_each_candidate(x in 0.0f64..5.0, k_t in 0usize..50, cls in 1u8..=2) {
            let p = ModelParams::table1();
            let g = grid_for(&p, 0.1, 0.1);
            let class = Class::from_number(cls).unwrap();
            let prev = ValueField::from_fn(g.clone(), |c, t, s, x| p.v0(c, t, s, x)).unwrap();
            let k_s = g.max_k_s(class, k_t) / 2;
            let cands = g.barrier_candidates();
            let (v, _) = optimal_jump_operator(&p, &prev, class, k_t, k_s, x, &cands).unwrap();
            for &b in cands.iter().step_by(5) {
                prop_assert!(v >= jump_operator(&p, &prev, class, k_t, k_s, x, b).unwrap());
            }
        }
    }
}
