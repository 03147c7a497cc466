//! Discretization of the class domains `D1 = {0 <= s <= t <= T}` and
//! `D2 = {0 <= s <= min(t, S)}`.
//!
//! Time and clock share one step, so the transport direction `(1, 1)` maps
//! nodes onto nodes. Storage is organised by characteristic line
//! `d = k_t - k_s`: every line is one contiguous block of x-rows, which lets
//! the solver hand out disjoint mutable lines to worker threads.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Class, ModelParams};
use crate::scalar::Scalar;

/// Resolution and truncation choices.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec<T> {
    /// Time step, also the clock step.
    pub h_t: T,
    /// Wealth step; also the quadrature step in claim size.
    pub h_x: T,
    /// Wealth window of interest.
    pub x_lo: T,
    pub x_hi: T,
    /// Claim-size truncation point; defaults to the `1 - tail_eps` quantile
    /// rounded up to the wealth ladder.
    pub y_max: Option<T>,
    pub tail_eps: T,
    /// Spacing of barrier candidates; an integer multiple of `h_x`.
    pub h_y: Option<T>,
    /// Wealth padding below `x_lo`; never smaller than `y_max`. Defaults to
    /// reaching the wealth below which the value is pinned at the utility
    /// floor, so that flat clamping is exact there, capped at `4 y_max`.
    pub pad_below: Option<T>,
    /// Wealth padding above `x_hi`; defaults to the largest drift over the
    /// horizon plus a diffusion margin.
    pub pad_above: Option<T>,
}

impl<T: Scalar> Default for GridSpec<T> {
    fn default() -> Self {
        GridSpec {
            h_t: T::of(0.05),
            h_x: T::of(0.05),
            x_lo: T::zero(),
            x_hi: T::of(5.0),
            y_max: None,
            tail_eps: T::of(1e-8),
            h_y: None,
            pad_below: None,
            pad_above: None,
        }
    }
}

/// Number of steps of size `h` in `len`, if `h` divides `len` to `1e-12`.
fn steps_in<T: Scalar>(len: T, h: T) -> Option<usize> {
    if !(h > T::zero()) || !(len >= T::zero()) {
        return None;
    }
    let n = (len / h).round();
    let tol = T::tol(1e-12) * len.abs().max(T::one());
    if (n * h - len).abs() <= tol {
        n.to_usize()
    } else {
        None
    }
}

fn steps_ceil<T: Scalar>(len: T, h: T) -> usize {
    let n = (len / h - T::tol(1e-9)).ceil();
    n.max(T::zero()).to_usize().unwrap_or(0)
}

/// A built grid. Immutable; shared between fields through `Arc`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    /// Common time/clock step.
    pub h: T,
    /// Number of time steps, `T / h`.
    pub n_t: usize,
    /// Clock index of the class-2 reset, `S / h`.
    pub k_reset: usize,
    pub h_x: T,
    /// Wealth of node 0 (bottom of the padded axis).
    pub x_bottom: T,
    pub n_x: usize,
    /// Node indices of `x_lo` and `x_hi`.
    pub window: (usize, usize),
    /// Quadrature ladder length: `y_max = n_y * h_x`.
    pub n_y: usize,
    /// Candidate spacing in ladder steps.
    pub candidate_stride: usize,
    pub tail_eps: T,
    pub horizon: T,
    pub reset_time: T,
    line_offsets: [Vec<usize>; 2],
}

impl<T: Scalar> Grid<T> {
    pub fn build(params: &ModelParams<T>, spec: &GridSpec<T>) -> Result<Self> {
        let h = spec.h_t;
        let hx = spec.h_x;
        if !(h > T::zero()) || !(hx > T::zero()) {
            return Err(Error::InvalidGrid(format!(
                "steps must be positive, got h_t = {h}, h_x = {hx}"
            )));
        }
        let n_t = steps_in(params.horizon, h).ok_or_else(|| {
            Error::InvalidGrid(format!("h_t = {h} does not divide T = {}", params.horizon))
        })?;
        let k_reset = steps_in(params.reset_time, h).ok_or_else(|| {
            Error::InvalidGrid(format!("h_t = {h} does not divide S = {}", params.reset_time))
        })?;
        if n_t == 0 || k_reset == 0 || k_reset > n_t {
            return Err(Error::InvalidGrid(format!(
                "need 0 < S <= T on the grid, got {k_reset} and {n_t} steps"
            )));
        }
        if !(spec.x_hi > spec.x_lo) {
            return Err(Error::InvalidGrid(format!(
                "empty wealth window [{}, {}]",
                spec.x_lo, spec.x_hi
            )));
        }
        let n_window = steps_in(spec.x_hi - spec.x_lo, hx).ok_or_else(|| {
            Error::InvalidGrid(format!(
                "h_x = {hx} does not divide the window [{}, {}]",
                spec.x_lo, spec.x_hi
            ))
        })?;

        let drift = params.max_drift_rate();
        if h * drift > hx {
            return Err(Error::Cfl(format!(
                "h_t * max drift = {} exceeds h_x = {hx}",
                h * drift
            )));
        }
        let courant = h * (drift / hx + params.intensity);
        if courant > T::one() {
            return Err(Error::Cfl(format!(
                "h_t * (max drift / h_x + lambda) = {courant} exceeds 1; the explicit step is not monotone"
            )));
        }

        if !(spec.tail_eps > T::zero() && spec.tail_eps < T::one()) {
            return Err(Error::InvalidGrid(format!(
                "tail_eps must lie in (0, 1), got {}",
                spec.tail_eps
            )));
        }
        let y_target = spec
            .y_max
            .unwrap_or_else(|| params.claim_law.tail_point(spec.tail_eps));
        let n_y = steps_ceil(y_target, hx).max(1);
        let y_max = T::of_usize(n_y) * hx;
        let tail = params.claim_law.survival(y_max);
        if tail > spec.tail_eps * (T::one() + T::tol(1e-9)) {
            return Err(Error::InvalidGrid(format!(
                "claim tail mass beyond y_max = {y_max} is {tail:e}, above tail_eps = {:e}",
                spec.tail_eps
            )));
        }
        let candidate_stride = match spec.h_y {
            None => 1,
            Some(hy) => {
                let k = steps_in(hy, hx).filter(|&k| k >= 1).ok_or_else(|| {
                    Error::InvalidGrid(format!("h_y = {hy} must be a positive multiple of h_x = {hx}"))
                })?;
                if !n_y.is_multiple_of(k) {
                    return Err(Error::InvalidGrid(format!(
                        "h_y = {hy} must divide y_max = {y_max}"
                    )));
                }
                k
            }
        };

        let below = spec
            .pad_below
            .unwrap_or_else(|| {
                let pinned = params.utility.saturation_point() - drift * params.horizon;
                let need = spec.x_lo - pinned + T::of(2.0) * hx;
                if need.is_finite() {
                    need.min(T::of(4.0) * y_max)
                } else {
                    y_max
                }
            })
            .max(y_max);
        let n_below = steps_ceil(below, hx);
        let above = spec.pad_above.unwrap_or_else(|| {
            let reach = drift * params.horizon;
            reach + T::of(6.0) * (hx * reach).sqrt() + T::of(2.0) * hx
        });
        if !(above >= T::zero()) {
            return Err(Error::InvalidGrid(format!("pad_above must be >= 0, got {above}")));
        }
        let n_above = steps_ceil(above, hx);
        let n_x = n_below + n_window + n_above + 1;
        let x_bottom = spec.x_lo - T::of_usize(n_below) * hx;

        let mut line_offsets = [Vec::with_capacity(n_t + 2), Vec::with_capacity(n_t + 2)];
        for class in Class::ALL {
            let offs = &mut line_offsets[class.index()];
            let mut acc = 0usize;
            for d in 0..=n_t {
                offs.push(acc);
                acc += line_len_raw(class, n_t, k_reset, d);
            }
            offs.push(acc);
        }

        Ok(Grid {
            h,
            n_t,
            k_reset,
            h_x: hx,
            x_bottom,
            n_x,
            window: (n_below, n_below + n_window),
            n_y,
            candidate_stride,
            tail_eps: spec.tail_eps,
            horizon: params.horizon,
            reset_time: params.reset_time,
            line_offsets,
        })
    }

    #[inline]
    pub fn t(&self, k_t: usize) -> T {
        T::of_usize(k_t) * self.h
    }

    #[inline]
    pub fn x(&self, k_x: usize) -> T {
        self.x_bottom + T::of_usize(k_x) * self.h_x
    }

    pub fn x_axis(&self) -> Vec<T> {
        (0..self.n_x).map(|j| self.x(j)).collect()
    }

    #[inline]
    pub fn y_max(&self) -> T {
        T::of_usize(self.n_y) * self.h_x
    }

    /// Largest clock index of `class` at time index `k_t`.
    #[inline]
    pub fn max_k_s(&self, class: Class, k_t: usize) -> usize {
        match class {
            Class::One => k_t,
            Class::Two => k_t.min(self.k_reset),
        }
    }

    #[inline]
    pub fn contains(&self, class: Class, k_t: usize, k_s: usize) -> bool {
        k_t <= self.n_t && k_s <= self.max_k_s(class, k_t)
    }

    /// Number of nodes on characteristic line `d` of `class`.
    #[inline]
    pub fn line_len(&self, class: Class, d: usize) -> usize {
        line_len_raw(class, self.n_t, self.k_reset, d)
    }

    /// Node range of line `d` in storage order (ascending clock).
    #[inline]
    pub fn line_nodes(&self, class: Class, d: usize) -> std::ops::Range<usize> {
        let offs = &self.line_offsets[class.index()];
        offs[d]..offs[d + 1]
    }

    pub fn node_count(&self, class: Class) -> usize {
        *self.line_offsets[class.index()].last().unwrap()
    }

    /// Storage index of node `(k_t, k_s)`.
    pub fn node_index(&self, class: Class, k_t: usize, k_s: usize) -> Result<usize> {
        if !self.contains(class, k_t, k_s) {
            return Err(Error::InvalidNode {
                class: class.number(),
                k_t,
                k_s,
            });
        }
        Ok(self.line_offsets[class.index()][k_t - k_s] + k_s)
    }

    /// Inverse of [`Grid::node_index`].
    pub fn node_coords(&self, class: Class, index: usize) -> Result<(usize, usize)> {
        let offs = &self.line_offsets[class.index()];
        if index >= *offs.last().unwrap() {
            return Err(Error::InvalidNode {
                class: class.number(),
                k_t: usize::MAX,
                k_s: usize::MAX,
            });
        }
        let d = offs.partition_point(|&o| o <= index) - 1;
        let k_s = index - offs[d];
        Ok((d + k_s, k_s))
    }

    /// Finite barrier candidates followed by `+inf`.
    pub fn barrier_candidates(&self) -> Vec<T> {
        (0..self.candidate_count()).map(|k| self.candidate_value(k)).collect()
    }

    /// Number of candidates including `+inf`.
    #[inline]
    pub fn candidate_count(&self) -> usize {
        self.n_y / self.candidate_stride + 2
    }

    #[inline]
    pub fn candidate_value(&self, index: usize) -> T {
        if index + 1 >= self.candidate_count() {
            T::infinity()
        } else {
            T::of_usize(index * self.candidate_stride) * self.h_x
        }
    }

    /// Candidate index nearest to `b` (`+inf` maps to the last index).
    pub fn nearest_candidate(&self, b: T) -> usize {
        let last = self.candidate_count() - 1;
        if !b.is_finite() {
            return last;
        }
        let step = T::of_usize(self.candidate_stride) * self.h_x;
        let k = (b / step).round().max(T::zero()).to_usize().unwrap_or(usize::MAX);
        k.min(last - 1)
    }

    /// Discrete Lipschitz constant of the terminal utility over the padded axis.
    pub fn utility_lipschitz(&self, params: &ModelParams<T>) -> T {
        let mut best = T::zero();
        let mut prev = params.utility(self.x(0));
        for j in 1..self.n_x {
            let cur = params.utility(self.x(j));
            best = best.max((cur - prev).abs() / self.h_x);
            prev = cur;
        }
        best
    }

    /// Index of the wealth node nearest to `x`, if within half a step.
    pub fn x_index(&self, x: T) -> Option<usize> {
        let p = (x - self.x_bottom) / self.h_x;
        let j = p.round();
        if (p - j).abs() > T::tol(1e-6) || j < T::zero() {
            return None;
        }
        j.to_usize().filter(|&j| j < self.n_x)
    }

    /// Index of the time node nearest to `t`, if within half a step.
    pub fn t_index(&self, t: T) -> Option<usize> {
        let p = t / self.h;
        let k = p.round();
        if (p - k).abs() > T::tol(1e-6) || k < T::zero() {
            return None;
        }
        k.to_usize().filter(|&k| k <= self.n_t)
    }
}

fn line_len_raw(class: Class, n_t: usize, k_reset: usize, d: usize) -> usize {
    let longest = n_t - d;
    match class {
        Class::One => longest + 1,
        Class::Two => longest.min(k_reset) + 1,
    }
}

/// Linear interpolation in wealth with flat extension outside the axis.
#[inline]
pub(crate) fn interp_row<T: Scalar>(row: &[T], x_bottom: T, h_x: T, x: T) -> T {
    let p = (x - x_bottom) / h_x;
    let last = row.len() - 1;
    if !(p > T::zero()) {
        return row[0];
    }
    let j = p.floor();
    let ju = j.to_usize().unwrap_or(usize::MAX);
    if ju >= last {
        return row[last];
    }
    let w = p - j;
    let snap = T::tol(1e-9);
    if w < snap {
        row[ju]
    } else if w > T::one() - snap {
        row[ju + 1]
    } else {
        row[ju] + w * (row[ju + 1] - row[ju])
    }
}

/// Paired value surfaces of both classes.
#[derive(Debug, Clone)]
pub struct ValueField<T> {
    grid: Arc<Grid<T>>,
    data: [Vec<T>; 2],
}

impl<T: Scalar> ValueField<T> {
    pub fn zeros(grid: Arc<Grid<T>>) -> Self {
        let data = [
            vec![T::zero(); grid.node_count(Class::One) * grid.n_x],
            vec![T::zero(); grid.node_count(Class::Two) * grid.n_x],
        ];
        ValueField { grid, data }
    }

    /// Field filled node by node from `f(class, t, s, x)`.
    pub fn from_fn(grid: Arc<Grid<T>>, mut f: impl FnMut(Class, T, T, T) -> Result<T>) -> Result<Self> {
        let mut field = Self::zeros(grid);
        let g = field.grid.clone();
        for class in Class::ALL {
            for d in 0..=g.n_t {
                for (pos, node) in g.line_nodes(class, d).enumerate() {
                    let (t, s) = (g.t(d + pos), g.t(pos));
                    let row = &mut field.data[class.index()][node * g.n_x..(node + 1) * g.n_x];
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = f(class, t, s, g.x(j))?;
                    }
                }
            }
        }
        Ok(field)
    }

    #[inline]
    pub fn grid(&self) -> &Arc<Grid<T>> {
        &self.grid
    }

    pub fn row(&self, class: Class, k_t: usize, k_s: usize) -> Result<&[T]> {
        let n = self.grid.node_index(class, k_t, k_s)?;
        let nx = self.grid.n_x;
        Ok(&self.data[class.index()][n * nx..(n + 1) * nx])
    }

    pub fn row_mut(&mut self, class: Class, k_t: usize, k_s: usize) -> Result<&mut [T]> {
        let n = self.grid.node_index(class, k_t, k_s)?;
        let nx = self.grid.n_x;
        Ok(&mut self.data[class.index()][n * nx..(n + 1) * nx])
    }

    pub fn get(&self, class: Class, k_t: usize, k_s: usize, k_x: usize) -> Result<T> {
        let row = self.row(class, k_t, k_s)?;
        row.get(k_x).copied().ok_or(Error::InvalidNode {
            class: class.number(),
            k_t,
            k_s,
        })
    }

    /// Value at node `(k_t, k_s)` and arbitrary wealth, linear in `x`,
    /// flat beyond either end of the axis.
    pub fn interp_x(&self, class: Class, k_t: usize, k_s: usize, x: T) -> Result<T> {
        let row = self.row(class, k_t, k_s)?;
        Ok(interp_row(row, self.grid.x_bottom, self.grid.h_x, x))
    }

    /// Value at an arbitrary point of the class domain: piecewise linear on
    /// the triangulation of the `(t, s)` lattice whose diagonals follow the
    /// characteristics, linear in `x`.
    pub fn interp(&self, class: Class, t: T, s: T, x: T) -> Result<T> {
        let g = &*self.grid;
        let n_t = T::of_usize(g.n_t);
        let ft = (t / g.h).max(T::zero()).min(n_t);
        let s_cap = match class {
            Class::One => ft,
            Class::Two => ft.min(T::of_usize(g.k_reset)),
        };
        let fs = (s / g.h).max(T::zero()).min(s_cap);
        let kt0 = ft.floor().to_usize().unwrap_or(0).min(g.n_t - 1);
        let ks_cap = match class {
            Class::One => g.n_t - 1,
            Class::Two => g.k_reset - 1,
        };
        let ks0 = fs.floor().to_usize().unwrap_or(0).min(ks_cap).min(kt0);
        let dt = ft - T::of_usize(kt0);
        let ds = fs - T::of_usize(ks0);
        let mut acc = T::zero();
        let mut add = |w: T, kt: usize, ks: usize| -> Result<()> {
            if w != T::zero() {
                acc = acc + w * self.interp_x(class, kt, ks, x)?;
            }
            Ok(())
        };
        if dt >= ds {
            add(T::one() - dt, kt0, ks0)?;
            add(dt - ds, kt0 + 1, ks0)?;
            add(ds, kt0 + 1, ks0 + 1)?;
        } else {
            add(T::one() - ds, kt0, ks0)?;
            add(ds - dt, kt0, ks0 + 1)?;
            add(dt, kt0 + 1, ks0 + 1)?;
        }
        Ok(acc)
    }

    /// Enforce `V2(t, S, x) = V1(t, 0, x)` at every shared node.
    pub fn apply_boundary(&mut self) {
        let g = self.grid.clone();
        let nx = g.n_x;
        let [one, two] = &mut self.data;
        for k_t in g.k_reset..=g.n_t {
            let src = g.node_index(Class::One, k_t, 0).expect("class-1 node");
            let dst = g.node_index(Class::Two, k_t, g.k_reset).expect("class-2 node");
            two[dst * nx..(dst + 1) * nx].copy_from_slice(&one[src * nx..(src + 1) * nx]);
        }
    }

    pub(crate) fn class_data(&self, class: Class) -> &[T] {
        &self.data[class.index()]
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [T], &mut [T]) {
        let [one, two] = &mut self.data;
        (one.as_mut_slice(), two.as_mut_slice())
    }

    /// Iterate `(class, k_t, k_s, row)` over every node.
    pub fn rows(&self) -> impl Iterator<Item = (Class, usize, usize, &[T])> + '_ {
        let g = &*self.grid;
        Class::ALL.into_iter().flat_map(move |class| {
            (0..=g.n_t).flat_map(move |d| {
                g.line_nodes(class, d).enumerate().map(move |(pos, node)| {
                    let row = &self.data[class.index()][node * g.n_x..(node + 1) * g.n_x];
                    (class, d + pos, pos, row)
                })
            })
        })
    }
}

/// Markovian barrier `b(i, t, s, x)`, stored as candidate indices.
#[derive(Debug, Clone)]
pub struct BarrierField<T> {
    grid: Arc<Grid<T>>,
    data: [Vec<u32>; 2],
}

impl<T: Scalar> BarrierField<T> {
    /// Field with every entry set to the candidate nearest `b`.
    pub fn constant(grid: Arc<Grid<T>>, b: T) -> Self {
        let k = grid.nearest_candidate(b) as u32;
        let data = [
            vec![k; grid.node_count(Class::One) * grid.n_x],
            vec![k; grid.node_count(Class::Two) * grid.n_x],
        ];
        BarrierField { grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Arc<Grid<T>> {
        &self.grid
    }

    pub fn index_row(&self, class: Class, k_t: usize, k_s: usize) -> Result<&[u32]> {
        let n = self.grid.node_index(class, k_t, k_s)?;
        let nx = self.grid.n_x;
        Ok(&self.data[class.index()][n * nx..(n + 1) * nx])
    }

    /// Barrier value at a node (`+inf` for never report).
    pub fn get(&self, class: Class, k_t: usize, k_s: usize, k_x: usize) -> Result<T> {
        let row = self.index_row(class, k_t, k_s)?;
        let k = *row.get(k_x).ok_or(Error::InvalidNode {
            class: class.number(),
            k_t,
            k_s,
        })?;
        Ok(self.grid.candidate_value(k as usize))
    }

    pub fn set(&mut self, class: Class, k_t: usize, k_s: usize, k_x: usize, candidate: usize) -> Result<()> {
        let n = self.grid.node_index(class, k_t, k_s)?;
        if k_x >= self.grid.n_x || candidate >= self.grid.candidate_count() {
            return Err(Error::InvalidNode {
                class: class.number(),
                k_t,
                k_s,
            });
        }
        self.data[class.index()][n * self.grid.n_x + k_x] = candidate as u32;
        Ok(())
    }

    pub(crate) fn split_mut(&mut self) -> (&mut [u32], &mut [u32]) {
        let [one, two] = &mut self.data;
        (one.as_mut_slice(), two.as_mut_slice())
    }

    /// Barrier for a state off the lattice: nearest `(t, s)` node of the
    /// class, linear in `x` between the bracketing nodes, rounded to the
    /// nearest candidate. Where a bracketing entry is `+inf` the nearer
    /// node wins.
    pub fn lookup(&self, class: Class, t: T, s: T, x: T) -> T {
        let g = &*self.grid;
        let kt = (t / g.h).round().max(T::zero()).to_usize().unwrap_or(0).min(g.n_t);
        let ks = (s / g.h)
            .round()
            .max(T::zero())
            .to_usize()
            .unwrap_or(0)
            .min(g.max_k_s(class, kt));
        let row = self.index_row(class, kt, ks).expect("clamped node is valid");
        let p = (x - g.x_bottom) / g.h_x;
        let last = g.n_x - 1;
        let k = if !(p > T::zero()) {
            row[0] as usize
        } else {
            let j = p.floor().to_usize().unwrap_or(usize::MAX);
            if j >= last {
                row[last] as usize
            } else {
                let w = p - T::of_usize(j);
                let (lo, hi) = (g.candidate_value(row[j] as usize), g.candidate_value(row[j + 1] as usize));
                if lo.is_finite() && hi.is_finite() {
                    g.nearest_candidate(lo + w * (hi - lo))
                } else if w < T::of(0.5) {
                    row[j] as usize
                } else {
                    row[j + 1] as usize
                }
            }
        };
        g.candidate_value(k)
    }
}
