//! Event-driven Monte Carlo simulation of the controlled process
//! `(I, t, S, X)`.
//!
//! Between events the clock advances linearly and wealth follows the
//! closed-form drift integral, so the only randomness is in claim times and
//! sizes. Path `k` of a run with seed `seed` draws from ChaCha stream `k`
//! seeded with `seed`; the claim sequence of a path does not depend on the
//! policy, which gives common random numbers across policies for free.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::BarrierField;
use crate::model::{Class, ModelParams};
use crate::scalar::{pairwise_sum, Scalar};
use crate::solver::SolveResult;

/// Reporting rule.
#[derive(Debug, Clone, Copy)]
pub enum PolicySpec<'a, T> {
    /// Report iff the claim exceeds `b` (`+inf`: never report).
    Constant(T),
    /// Markovian barrier read from a solved barrier field.
    Grid(&'a BarrierField<T>),
}

impl<T: Scalar> PolicySpec<'_, T> {
    #[inline]
    pub fn barrier(&self, class: Class, t: T, s: T, x: T) -> T {
        match self {
            PolicySpec::Constant(b) => *b,
            PolicySpec::Grid(field) => field.lookup(class, t, s, x),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PolicySpec::Constant(b) if b.is_infinite() => "const:inf".to_string(),
            PolicySpec::Constant(b) => format!("const:{b}"),
            PolicySpec::Grid(_) => "grid".to_string(),
        }
    }

    fn validate(&self, params: &ModelParams<T>) -> Result<()> {
        match self {
            PolicySpec::Constant(b) if !(*b >= T::zero()) => Err(Error::domain(
                "policy",
                format!("constant barrier must be >= 0, got {b}"),
            )),
            PolicySpec::Grid(field) => {
                let g = field.grid();
                if g.horizon != params.horizon || g.reset_time != params.reset_time {
                    Err(Error::IncompatibleGrid)
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Position of the process.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State<T> {
    pub class: Class,
    pub t: T,
    pub s: T,
    pub x: T,
}

impl<T: Scalar> State<T> {
    pub fn new(class: Class, t: T, s: T, x: T) -> Self {
        State { class, t, s, x }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event<T> {
    Claim { time: T, size: T, reported: bool },
    /// Class 2 to class 1 after the clock reached the reset time.
    ClassUpgrade { time: T },
}

impl<T: Copy> Event<T> {
    pub fn time(&self) -> T {
        match *self {
            Event::Claim { time, .. } | Event::ClassUpgrade { time } => time,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord<T> {
    pub init: State<T>,
    pub events: Vec<Event<T>>,
    pub terminal_wealth: T,
    pub terminal_utility: T,
}

/// Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McResult {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n_paths)`.
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl McResult {
    fn from_samples(samples: &[f64], seed: u64) -> Self {
        let n = samples.len();
        let mean = pairwise_sum(samples) / n as f64;
        let dev: Vec<f64> = samples.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = pairwise_sum(&dev) / (n as f64 - 1.0);
        McResult {
            mean,
            stderr: (var / n as f64).sqrt(),
            n_paths: n,
            seed,
        }
    }
}

/// Independent generator for path `path` of a run seeded with `seed`.
pub fn substream(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// Claim arrivals and sizes of one path, independent of the policy.
struct ClaimStream<'p, T> {
    params: &'p ModelParams<T>,
    rng: ChaCha8Rng,
    next_time: T,
}

impl<'p, T: Scalar> ClaimStream<'p, T> {
    fn new(params: &'p ModelParams<T>, rng: ChaCha8Rng, start: T) -> Self {
        let mut stream = ClaimStream {
            params,
            rng,
            next_time: start,
        };
        stream.next_time = start + stream.waiting_time();
        stream
    }

    fn waiting_time(&mut self) -> T {
        if self.params.intensity <= T::zero() {
            return T::infinity();
        }
        let u: f64 = self.rng.random();
        T::of(-(-u).ln_1p()) / self.params.intensity
    }

    /// Size of the claim at `next_time`; schedules the following arrival.
    fn take(&mut self) -> T {
        let u: f64 = self.rng.random();
        let size = self.params.claim_law.quantile(T::of(u));
        self.next_time = self.next_time + self.waiting_time();
        size
    }
}

/// Run a path from `state` until `end` (clamped to the horizon), or until
/// the first event when `first_event_only` is set.
fn advance<T: Scalar>(
    params: &ModelParams<T>,
    policy: &PolicySpec<'_, T>,
    mut state: State<T>,
    claims: &mut ClaimStream<'_, T>,
    end: T,
    first_event_only: bool,
    mut log: Option<&mut Vec<Event<T>>>,
) -> State<T> {
    let end = end.min(params.horizon);
    loop {
        let upgrade = match state.class {
            Class::Two => state.t + (params.reset_time - state.s),
            Class::One => T::infinity(),
        };
        if upgrade <= claims.next_time && upgrade <= end {
            state.x = state.x + params.drift_integral_unchecked(Class::Two, state.s, params.reset_time - state.s);
            state.t = upgrade;
            state.class = Class::One;
            state.s = T::zero();
            if let Some(log) = log.as_deref_mut() {
                log.push(Event::ClassUpgrade { time: upgrade });
            }
        } else if claims.next_time <= end {
            let tau = claims.next_time;
            let dt = tau - state.t;
            state.x = state.x + params.drift_integral_unchecked(state.class, state.s, dt);
            state.s = state.s + dt;
            state.t = tau;
            let size = claims.take();
            let reported = size > policy.barrier(state.class, state.t, state.s, state.x);
            if reported {
                state.x = state.x - size.min(params.deductible(state.class));
                state.class = Class::Two;
                state.s = T::zero();
            } else {
                state.x = state.x - size;
            }
            if let Some(log) = log.as_deref_mut() {
                log.push(Event::Claim {
                    time: tau,
                    size,
                    reported,
                });
            }
        } else {
            let dt = (end - state.t).max(T::zero());
            state.x = state.x + params.drift_integral_unchecked(state.class, state.s, dt);
            state.s = state.s + dt;
            state.t = end;
            return state;
        }
        if first_event_only {
            return state;
        }
    }
}

fn check_init<T: Scalar>(params: &ModelParams<T>, init: &State<T>) -> Result<()> {
    if !params.in_domain(init.class, init.t, init.s) || !init.x.is_finite() {
        return Err(Error::domain(
            "simulator",
            format!(
                "initial state (class {}, t = {}, s = {}, x = {}) outside the class domain",
                init.class, init.t, init.s, init.x
            ),
        ));
    }
    Ok(())
}

fn terminal_wealth<T: Scalar>(params: &ModelParams<T>, policy: &PolicySpec<'_, T>, init: State<T>, rng: ChaCha8Rng) -> T {
    let mut claims = ClaimStream::new(params, rng, init.t);
    advance(params, policy, init, &mut claims, params.horizon, false, None).x
}

/// Simulate one full path to maturity, recording every event.
pub fn sample_path<T: Scalar>(
    params: &ModelParams<T>,
    policy: &PolicySpec<'_, T>,
    init: State<T>,
    seed: u64,
) -> Result<PathRecord<T>> {
    check_init(params, &init)?;
    policy.validate(params)?;
    let mut events = Vec::new();
    let mut claims = ClaimStream::new(params, substream(seed, 0), init.t);
    let end = advance(params, policy, init, &mut claims, params.horizon, false, Some(&mut events));
    Ok(PathRecord {
        init,
        events,
        terminal_wealth: end.x,
        terminal_utility: params.utility(end.x),
    })
}

/// Estimate `E[h(X_T)]` under `policy` from `n_paths` independent paths.
pub fn estimate_value<T: Scalar>(
    params: &ModelParams<T>,
    policy: &PolicySpec<'_, T>,
    init: State<T>,
    n_paths: usize,
    seed: u64,
) -> Result<McResult> {
    if n_paths < 2 {
        return Err(Error::domain("estimate_value", "need at least 2 paths"));
    }
    check_init(params, &init)?;
    policy.validate(params)?;
    let samples: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| params.utility(terminal_wealth(params, policy, init, substream(seed, k))).as_f64())
        .collect();
    Ok(McResult::from_samples(&samples, seed))
}

/// Outcome of a dynamic-programming consistency check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DppResidual {
    /// `|V(init) - E[V(state at tau)]|`
    pub residual: f64,
    pub stderr: f64,
    pub value_at_init: f64,
    pub mc_mean: f64,
    pub n_paths: usize,
}

/// Compare the solved value at `init` with the Monte Carlo mean of the solved
/// value at `tau = min(first event, t + horizon, T)` under the solved policy
/// (terminal utility when `tau = T`).
pub fn dpp_residual<T: Scalar>(
    params: &ModelParams<T>,
    solve: &SolveResult<T>,
    init: State<T>,
    n_paths: usize,
    seed: u64,
    horizon: T,
) -> Result<DppResidual> {
    if n_paths < 2 {
        return Err(Error::domain("dpp_residual", "need at least 2 paths"));
    }
    if !(horizon >= T::zero()) {
        return Err(Error::domain("dpp_residual", format!("horizon must be >= 0, got {horizon}")));
    }
    check_init(params, &init)?;
    let field = &solve.value;
    let barrier = solve.barrier.as_ref().ok_or(Error::IncompatibleGrid)?;
    let g = field.grid();
    if g.horizon != params.horizon || g.reset_time != params.reset_time || **barrier.grid() != **g {
        return Err(Error::IncompatibleGrid);
    }
    let policy = PolicySpec::Grid(barrier);
    let v_init = field.interp(init.class, init.t, init.s, init.x)?;
    let stop = init.t + horizon;
    let diffs: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| -> Result<f64> {
            let mut claims = ClaimStream::new(params, substream(seed, k), init.t);
            let st = advance(params, &policy, init, &mut claims, stop, true, None);
            let v = if st.t >= params.horizon {
                params.utility(st.x)
            } else {
                field.interp(st.class, st.t, st.s, st.x)?
            };
            Ok((v - v_init).as_f64())
        })
        .collect::<Result<_>>()?;
    let est = McResult::from_samples(&diffs, seed);
    Ok(DppResidual {
        residual: est.mean.abs(),
        stderr: est.stderr,
        value_at_init: v_init.as_f64(),
        mc_mean: v_init.as_f64() + est.mean,
        n_paths,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRow {
    /// Position in the input list.
    pub index: usize,
    pub label: String,
    pub estimate: McResult,
}

/// Policies evaluated on common random numbers.
#[derive(Debug, Clone)]
pub struct PolicyComparison {
    /// Sorted by mean, best first; ties keep input order.
    pub ranked: Vec<PolicyRow>,
    samples: Vec<Vec<f64>>,
    seed: u64,
}

impl PolicyComparison {
    /// Row of the policy at input position `index`.
    pub fn row(&self, index: usize) -> Option<&PolicyRow> {
        self.ranked.iter().find(|r| r.index == index)
    }

    /// Mean and standard error of the pathwise difference `a - b`.
    pub fn paired_difference(&self, a: usize, b: usize) -> McResult {
        let d: Vec<f64> = self.samples[a]
            .iter()
            .zip(&self.samples[b])
            .map(|(x, y)| x - y)
            .collect();
        McResult::from_samples(&d, self.seed)
    }
}

/// Evaluate every policy on the same claim streams and rank by mean.
pub fn compare_policies<T: Scalar>(
    params: &ModelParams<T>,
    policies: &[PolicySpec<'_, T>],
    init: State<T>,
    n_paths: usize,
    seed: u64,
) -> Result<PolicyComparison> {
    if policies.is_empty() {
        return Err(Error::domain("compare_policies", "empty policy list"));
    }
    if n_paths < 2 {
        return Err(Error::domain("compare_policies", "need at least 2 paths"));
    }
    check_init(params, &init)?;
    for p in policies {
        p.validate(params)?;
    }
    let per_path: Vec<Vec<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| {
            policies
                .iter()
                .map(|p| params.utility(terminal_wealth(params, p, init, substream(seed, k))).as_f64())
                .collect()
        })
        .collect();
    let samples: Vec<Vec<f64>> = (0..policies.len())
        .map(|i| per_path.iter().map(|v| v[i]).collect())
        .collect();
    let mut ranked: Vec<PolicyRow> = policies
        .iter()
        .enumerate()
        .map(|(index, p)| PolicyRow {
            index,
            label: p.label(),
            estimate: McResult::from_samples(&samples[index], seed),
        })
        .collect();
    ranked.sort_by(|a, b| b.estimate.mean.total_cmp(&a.estimate.mean));
    Ok(PolicyComparison { ranked, samples, seed })
}
