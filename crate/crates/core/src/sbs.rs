//! Dual-decomposition solver for the single-cache (SBS) scenario.
//!
//! The finite program picks per-slot backhaul rates and per-request cached
//! amounts minimizing the convex transmission cost, subject to the
//! cumulative demand and cache-capacity envelopes. Both envelope families
//! are relaxed with nonnegative multipliers; the remaining inner problem
//! splits into one closed-form rate minimization per slot (through the cost
//! model's inverse marginal) and one per-request caching decision driven by
//! a scalar switching value. A projected subgradient climbs the dual, and a
//! feasible primal is recovered from ergodic averages, with the duality gap
//! reported as an optimality certificate.

use crate::cost::CostModel;
use crate::demand::DemandView;
use crate::envelope::{self, horizon_cost};

/// Switching values inside this band are treated as degenerate ties.
pub const SWITCH_TIE_TOL: f64 = 1e-12;

/// Step-size schedule for the projected subgradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    /// Diminishing, non-summable steps `step0 / sqrt(k)`.
    InvSqrt,
    /// Polyak-style steps using the best recovered primal objective as the
    /// target level (falls back to `InvSqrt` until one exists).
    Polyak,
}

/// Solver options. `tol` is the relative duality-gap target.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Base step size; when `None`, `1 / max slot demand` is used.
    pub step0: Option<f64>,
    pub schedule: StepSchedule,
    /// Recover a feasible primal and test the gap every this many iterations.
    pub recover_every: usize,
    /// Iteration at which an `InvSqrt` run switches to Polyak polishing;
    /// `None` means half the iteration budget.
    pub polish_after: Option<usize>,
    /// Extra caching matrices to seed the primal recovery with (each is
    /// repaired and scheduled; the best candidate wins). Lets callers make
    /// dominance over known-good heuristics structural.
    pub cache_candidates: Vec<Vec<Vec<f64>>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            max_iters: 200_000,
            tol: 1e-4,
            step0: None,
            schedule: StepSchedule::InvSqrt,
            recover_every: 250,
            polish_after: None,
            cache_candidates: Vec::new(),
        }
    }
}

impl SolveOptions {
    pub(crate) fn polish_at(&self, default_at: usize) -> usize {
        if self.schedule != StepSchedule::InvSqrt {
            return 0;
        }
        self.polish_after.unwrap_or(default_at)
    }
}

/// Optimality certificate attached to every solution.
#[derive(Debug, Clone)]
pub struct Certificate {
    /// Best dual value seen: a lower bound on the optimal objective.
    pub dual_bound: f64,
    /// `objective - dual_bound`, never negative.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// A feasible schedule for the SBS scenario.
#[derive(Debug, Clone)]
pub struct SbsSchedule {
    /// Backhaul rate per slot (Mnats/s).
    pub rates: Vec<f64>,
    /// Cached amount per request (Mnats).
    pub cached: Vec<Vec<f64>>,
    pub objective: f64,
    pub feasible: bool,
    pub certificate: Certificate,
}

/// Multiplier state of the projected subgradient.
#[derive(Debug, Clone)]
pub struct DualState {
    /// Multipliers of the cache-capacity (upper envelope) constraints.
    pub cache_multipliers: Vec<f64>,
    /// Multipliers of the demand (lower envelope) constraints.
    pub demand_multipliers: Vec<f64>,
    pub iteration: usize,
    pub step0: f64,
    pub schedule: StepSchedule,
    pub best_dual: f64,
    /// Running sums of the cached-amount iterates for ergodic averaging.
    pub cached_sum: Vec<Vec<f64>>,
    pub averaged_iterations: usize,
    /// Best recovered primal objective, used by Polyak steps.
    pub best_primal: Option<f64>,
}

impl DualState {
    pub fn new(view: &DemandView, opts: &SolveOptions) -> DualState {
        let n = view.num_slots();
        let step0 = opts.step0.unwrap_or_else(|| {
            let peak = (0..n).map(|m| view.slot_data(m)).fold(0.0f64, f64::max);
            if peak > 0.0 {
                1.0 / peak
            } else {
                1.0
            }
        });
        DualState {
            cache_multipliers: vec![0.0; n],
            demand_multipliers: vec![0.0; n],
            iteration: 0,
            step0,
            schedule: opts.schedule,
            best_dual: f64::NEG_INFINITY,
            cached_sum: vec![vec![0.0; view.num_users()]; n],
            averaged_iterations: 0,
            best_primal: None,
        }
    }

    /// Net price per unit of data transmitted in slot `n` or later:
    /// the tail sum of demand minus cache multipliers.
    pub fn tail_rate_price(&self, slot: usize) -> f64 {
        self.demand_multipliers[slot..]
            .iter()
            .zip(&self.cache_multipliers[slot..])
            .map(|(m, l)| m - l)
            .sum()
    }
}

/// One primal inner iterate: the minimizers of the relaxed problem at fixed
/// multipliers, plus the exact dual value there.
#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub rates: Vec<f64>,
    pub cached: Vec<Vec<f64>>,
    pub dual_value: f64,
}

/// Closed-form rate minimizer for one slot: the inverse marginal of the cost
/// at the tail price, clamped to `[0, rate_cap]`.
pub fn inner_rate(state: &DualState, slot: usize, cost: &CostModel, rate_cap: f64) -> f64 {
    clamp_rate(cost.inverse_marginal(state.tail_rate_price(slot)), rate_cap)
}

fn clamp_rate(rate: f64, rate_cap: f64) -> f64 {
    if rate.is_nan() {
        0.0
    } else {
        rate.clamp(0.0, rate_cap)
    }
}

/// The switching value of request `(slot, user)`: tail cache-multiplier mass
/// from this slot minus tail demand-multiplier mass from the next request of
/// the same file. Positive means caching is a pure loss at these prices.
pub fn cache_switch_value(state: &DualState, view: &DemandView, slot: usize, user: usize) -> f64 {
    let hold: f64 = state.cache_multipliers[slot..].iter().sum();
    let reward: f64 = match view.next[slot][user] {
        Some(next_slot) => state.demand_multipliers[next_slot..].iter().sum(),
        None => 0.0,
    };
    hold - reward
}

/// Caching decision for one request given its switching value: nothing when
/// positive, the whole request when negative, half the box on a tie (the tie
/// is repaired during primal recovery). Returns `(amount, degenerate)`.
pub fn inner_cache(state: &DualState, view: &DemandView, slot: usize, user: usize) -> (f64, bool) {
    let w = cache_switch_value(state, view, slot, user);
    let cap = view.cache_box(slot, user);
    if w > SWITCH_TIE_TOL {
        (0.0, false)
    } else if w < -SWITCH_TIE_TOL {
        (cap, false)
    } else {
        (0.5 * cap, true)
    }
}

/// Evaluate the full inner problem at the current multipliers.
pub fn inner_solution(
    state: &DualState,
    view: &DemandView,
    capacity: f64,
    cost: &CostModel,
) -> InnerSolution {
    let n = view.num_slots();
    let users = view.num_users();
    let rate_cap = total_demand(view) / view.slot_seconds;

    // Tail sums built right-to-left so each slot costs O(1).
    let mut rates = vec![0.0; n];
    let mut hold_tail = vec![0.0; n + 1];
    let mut reward_tail = vec![0.0; n + 1];
    for m in (0..n).rev() {
        hold_tail[m] = hold_tail[m + 1] + state.cache_multipliers[m];
        reward_tail[m] = reward_tail[m + 1] + state.demand_multipliers[m];
        rates[m] = clamp_rate(cost.inverse_marginal(reward_tail[m] - hold_tail[m]), rate_cap);
    }

    let mut cached = vec![vec![0.0; users]; n];
    let mut dual = 0.0;
    for m in 0..n {
        let price = reward_tail[m] - hold_tail[m];
        dual += view.slot_seconds
            * (cost.eval(rates[m]).expect("rate is nonnegative") - rates[m] * price);
        for u in 0..users {
            let reward = match view.next[m][u] {
                Some(ns) => reward_tail[ns],
                None => 0.0,
            };
            let w = hold_tail[m] - reward;
            let cap = view.cache_box(m, u);
            cached[m][u] = if w > SWITCH_TIE_TOL {
                0.0
            } else if w < -SWITCH_TIE_TOL {
                cap
            } else {
                0.5 * cap
            };
            dual += w.min(0.0) * cap;
        }
    }
    // Constant part of the reordered Lagrangian.
    let mut served = 0.0;
    for m in 0..n {
        served += view.slot_data(m);
        dual += state.demand_multipliers[m] * served
            - state.cache_multipliers[m] * (capacity + served);
    }
    InnerSolution { rates, cached, dual_value: dual }
}

/// Cumulative lower/upper envelope values at slot boundaries `1..=N` for a
/// caching matrix (raw arithmetic; unlike the `envelope` constructors this
/// tolerates mid-repair iterates).
fn envelope_points(view: &DemandView, cached: &[Vec<f64>], capacity: f64) -> (Vec<f64>, Vec<f64>) {
    let n = view.num_slots();
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    let mut lo = 0.0;
    let mut hi = capacity;
    for m in 0..n {
        for u in 0..view.num_users() {
            let data = view.sbs_rates[m][u] * view.slot_seconds;
            let reused = match view.prev[m][u] {
                Some((pn, pu)) => cached[pn][pu],
                None => 0.0,
            };
            lo += data - reused;
            hi += data - cached[m][u];
        }
        lower.push(lo);
        upper.push(hi);
    }
    (lower, upper)
}

/// Projected subgradient ascent step at a given inner iterate: push each
/// multiplier along its constraint residual and clip at zero. Also folds the
/// iterate into the ergodic averages and updates the best dual bound.
pub fn subgradient_step(
    state: &mut DualState,
    view: &DemandView,
    capacity: f64,
    inner: &InnerSolution,
) {
    state.iteration += 1;
    let step = match state.schedule {
        StepSchedule::InvSqrt => state.step0 / (state.iteration as f64).sqrt(),
        StepSchedule::Polyak => match state.best_primal {
            Some(best) => {
                let over = (best - inner.dual_value).max(1e-12);
                let norm = residual_norm_sq(view, capacity, inner).max(1e-12);
                over / norm
            }
            None => state.step0 / (state.iteration as f64).sqrt(),
        },
    };

    let (lower, upper) = envelope_points(view, &inner.cached, capacity);
    let mut cum = 0.0;
    for m in 0..view.num_slots() {
        cum += view.slot_seconds * inner.rates[m];
        let over = cum - upper[m];
        let under = lower[m] - cum;
        state.cache_multipliers[m] = (state.cache_multipliers[m] + step * over).max(0.0);
        state.demand_multipliers[m] = (state.demand_multipliers[m] + step * under).max(0.0);
    }

    if inner.dual_value > state.best_dual {
        state.best_dual = inner.dual_value;
    }
    for m in 0..view.num_slots() {
        for u in 0..view.num_users() {
            state.cached_sum[m][u] += inner.cached[m][u];
        }
    }
    state.averaged_iterations += 1;
}

fn residual_norm_sq(view: &DemandView, capacity: f64, inner: &InnerSolution) -> f64 {
    let (lower, upper) = envelope_points(view, &inner.cached, capacity);
    let mut cum = 0.0;
    let mut norm = 0.0;
    for m in 0..view.num_slots() {
        cum += view.slot_seconds * inner.rates[m];
        norm += (cum - upper[m]).powi(2) + (lower[m] - cum).powi(2);
    }
    norm
}

fn total_demand(view: &DemandView) -> f64 {
    (0..view.num_slots()).map(|m| view.slot_data(m)).sum()
}

/// Scale a caching matrix into feasibility: the largest factor in `[0, 1]`
/// that keeps the cache occupancy under the capacity at every boundary.
fn repair_cached(view: &DemandView, cached: &[Vec<f64>], capacity: f64) -> Vec<Vec<f64>> {
    let mut occ = 0.0;
    let mut peak = 0.0f64;
    for m in 0..view.num_slots() {
        for u in 0..view.num_users() {
            occ += cached[m][u];
            if let Some((pn, pu)) = view.prev[m][u] {
                occ -= cached[pn][pu];
            }
        }
        peak = peak.max(occ);
    }
    let factor = if peak > capacity { capacity / peak } else { 1.0 };
    cached
        .iter()
        .enumerate()
        .map(|(m, row)| {
            row.iter()
                .enumerate()
                .map(|(u, &q)| (q * factor).clamp(0.0, view.cache_box(m, u)))
                .collect()
        })
        .collect()
}

fn empty_certificate() -> Certificate {
    Certificate {
        dual_bound: f64::NEG_INFINITY,
        gap: f64::INFINITY,
        iterations: 0,
        converged: false,
    }
}

/// Build the feasible schedule induced by a caching matrix: repair it into
/// the capacity, then run the taut string through its tunnel.
fn schedule_from_cached(
    view: &DemandView,
    cached: &[Vec<f64>],
    capacity: f64,
    cost: &CostModel,
) -> SbsSchedule {
    let cached = repair_cached(view, cached, capacity);
    let lower = envelope::min_departure(view, &cached).expect("repaired cache is in its box");
    let upper =
        envelope::max_departure(view, &cached, capacity).expect("repaired cache is in its box");
    let ts = envelope::taut_string(&lower, &upper).expect("repaired tunnel has nonnegative width");
    let objective = horizon_cost(cost, &ts.rates, view.slot_seconds).expect("rates nonnegative");
    SbsSchedule {
        rates: ts.rates,
        cached,
        objective,
        feasible: true,
        certificate: empty_certificate(),
    }
}

/// Recover a feasible primal schedule from the ergodic average of the inner
/// iterates seen so far.
pub fn recover_primal(
    state: &DualState,
    view: &DemandView,
    capacity: f64,
    cost: &CostModel,
) -> SbsSchedule {
    let count = state.averaged_iterations.max(1) as f64;
    let mean: Vec<Vec<f64>> = state
        .cached_sum
        .iter()
        .enumerate()
        .map(|(m, row)| {
            row.iter()
                .enumerate()
                .map(|(u, &s)| (s / count).clamp(0.0, view.cache_box(m, u)))
                .collect()
        })
        .collect();
    let mut schedule = schedule_from_cached(view, &mean, capacity, cost);
    finish_certificate(&mut schedule, state.best_dual, state.iteration, f64::INFINITY);
    schedule
}

fn finish_certificate(schedule: &mut SbsSchedule, best_dual: f64, iterations: usize, tol: f64) {
    let bound =
        if best_dual.is_finite() { best_dual.min(schedule.objective) } else { schedule.objective };
    schedule.certificate.dual_bound = bound;
    schedule.certificate.gap = (schedule.objective - bound).max(0.0);
    schedule.certificate.iterations = iterations;
    schedule.certificate.converged =
        schedule.certificate.gap <= tol * schedule.objective.abs().max(1.0);
}

/// Solve the joint caching and transmission program.
///
/// Deterministic given inputs and options. When the iteration budget runs
/// out the best recovered schedule is returned with `converged == false`
/// rather than an error.
pub fn solve(view: &DemandView, capacity: f64, cost: &CostModel, opts: &SolveOptions) -> SbsSchedule {
    assert!(capacity >= 0.0, "capacity must be nonnegative");
    let n = view.num_slots();
    let zero_q = vec![vec![0.0; view.num_users()]; n];

    // Candidate schedules recovered along the way; the best feasible one
    // wins. Seeding with the no-caching tunnel and the local-caching-only
    // solution also makes baseline dominance hold by construction.
    let mut best = schedule_from_cached(view, &zero_q, capacity, cost);

    if total_demand(view) <= 0.0 {
        best.certificate =
            Certificate { dual_bound: best.objective, gap: 0.0, iterations: 0, converged: true };
        return best;
    }

    let pinned = solve_pinned(view, capacity, cost, opts);
    for cached in
        std::iter::once(&pinned.cached).chain(opts.cache_candidates.iter())
    {
        let candidate = schedule_from_cached(view, cached, capacity, cost);
        if candidate.objective < best.objective {
            best = candidate;
        }
    }

    let mut state = DualState::new(view, opts);
    state.best_primal = Some(best.objective);
    let mut best_dual = f64::NEG_INFINITY;
    let mut best_multipliers: Option<(Vec<f64>, Vec<f64>)> = None;

    // Diminishing steps first: the ergodic primal average needs a long
    // stretch of them. Polyak polishing of the dual bound starts once the
    // primal is locked in. The tail of the budget is reserved for restarted
    // averaging around the best multipliers, which settles degenerate
    // primals.
    let main_budget = (opts.max_iters * 3) / 5;
    let polish_at = opts.polish_at(main_budget / 2);

    while state.iteration < main_budget {
        if state.iteration == polish_at && polish_at > 0 {
            state.schedule = StepSchedule::Polyak;
        }
        let inner = inner_solution(&state, view, capacity, cost);
        subgradient_step(&mut state, view, capacity, &inner);
        if state.best_dual > best_dual {
            best_dual = state.best_dual;
            best_multipliers =
                Some((state.cache_multipliers.clone(), state.demand_multipliers.clone()));
        }

        if state.iteration % opts.recover_every == 0 || state.iteration == main_budget {
            let through_average = recover_primal(&state, view, capacity, cost);
            if through_average.objective < best.objective {
                best = through_average;
            }
            // The raw switching-rule iterate, repaired, is often sharper
            // than the average early on.
            let through_rule = schedule_from_cached(view, &inner.cached, capacity, cost);
            if through_rule.objective < best.objective {
                best = through_rule;
            }
            state.best_primal = Some(best.objective);
            let gap = (best.objective - best_dual).max(0.0);
            if gap <= opts.tol * best.objective.abs().max(1.0) {
                break;
            }
        }
    }

    // Fresh averaging window around the best multipliers: near-stationary
    // prices mix the switching-rule corners into sharper interior primals.
    if (best.objective - best_dual).max(0.0) > opts.tol * best.objective.abs().max(1.0) {
        if let Some((cache_m, demand_m)) = best_multipliers {
            let mut restart = DualState::new(view, opts);
            restart.cache_multipliers = cache_m;
            restart.demand_multipliers = demand_m;
            restart.best_primal = Some(best.objective);
            restart.best_dual = best_dual;
            let extra = (opts.max_iters - state.iteration).max(opts.recover_every);
            for k in 1..=extra {
                let inner = inner_solution(&restart, view, capacity, cost);
                // Small diminishing steps continuing the main schedule.
                let step = restart.step0 / ((main_budget + k) as f64).sqrt();
                let saved = (restart.schedule, restart.step0);
                restart.schedule = StepSchedule::InvSqrt;
                restart.step0 = step * ((restart.iteration + 1) as f64).sqrt();
                subgradient_step(&mut restart, view, capacity, &inner);
                restart.schedule = saved.0;
                restart.step0 = saved.1;
                if restart.best_dual > best_dual {
                    best_dual = restart.best_dual;
                }
                if k % opts.recover_every == 0 || k == extra {
                    let cand = recover_primal(&restart, view, capacity, cost);
                    if cand.objective < best.objective {
                        best = cand;
                    }
                    if (best.objective - best_dual).max(0.0)
                        <= opts.tol * best.objective.abs().max(1.0)
                    {
                        break;
                    }
                }
            }
            state.iteration += restart.iteration;
        }
    }

    finish_certificate(&mut best, best_dual, state.iteration, opts.tol);
    best
}

/// Local-caching-only variant: the departure is pinned to the lower
/// envelope (the station transmits at the net demand rate, never ahead of
/// it) and only the caching amounts are optimized, subject to the cache
/// occupancy staying under the capacity.
///
/// Relaxing the occupancy constraints leaves one exact subproblem per slot:
/// absorb as much of the slot's demand from the cache as the holding prices
/// justify, cheapest first, until the cost marginal is met.
pub fn solve_pinned(
    view: &DemandView,
    capacity: f64,
    cost: &CostModel,
    opts: &SolveOptions,
) -> SbsSchedule {
    let n = view.num_slots();
    let users = view.num_users();
    let slot_data: Vec<f64> = (0..n).map(|m| view.slot_data(m)).collect();

    // Requests feeding each slot: (source slot, source user, box size).
    let mut feeders: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); n];
    for m in 0..n {
        for u in 0..users {
            let cap = view.cache_box(m, u);
            if cap <= 0.0 {
                continue;
            }
            if let Some(ns) = view.next[m][u] {
                feeders[ns].push((m, u, cap));
            }
        }
    }
    let trivial = capacity <= 0.0 || feeders.iter().all(Vec::is_empty);

    let peak = slot_data.iter().cloned().fold(0.0f64, f64::max);
    let step0 = opts.step0.unwrap_or(if peak > 0.0 { 1.0 / peak } else { 1.0 });

    let evaluate = |cached: &[Vec<f64>]| -> SbsSchedule {
        let cached = repair_cached(view, cached, capacity);
        let (lower, _) = envelope_points(view, &cached, capacity);
        let mut rates = Vec::with_capacity(n);
        let mut prev = 0.0;
        for &v in &lower {
            rates.push(((v - prev) / view.slot_seconds).max(0.0));
            prev = v;
        }
        let objective = horizon_cost(cost, &rates, view.slot_seconds).expect("rates nonnegative");
        SbsSchedule { rates, cached, objective, feasible: true, certificate: empty_certificate() }
    };

    let zero_q = vec![vec![0.0; users]; n];
    let mut best = evaluate(&zero_q);
    let mut best_dual = f64::NEG_INFINITY;
    let mut iterations = 0usize;

    if !trivial {
        let mut hold = vec![0.0f64; n];
        let mut cached_sum = vec![vec![0.0f64; users]; n];
        while iterations < opts.max_iters {
            // Inner minimization at the current occupancy multipliers.
            let mut tail = vec![0.0f64; n + 1];
            for m in (0..n).rev() {
                tail[m] = tail[m + 1] + hold[m];
            }
            let mut cached = vec![vec![0.0f64; users]; n];
            let mut dual = 0.0;
            for m in 0..n {
                // Price of holding a unit from its request until slot m.
                let mut items: Vec<(f64, usize, usize, f64)> = feeders[m]
                    .iter()
                    .map(|&(sn, su, cap)| (tail[sn] - tail[m], sn, su, cap))
                    .collect();
                items.sort_by(|a, b| {
                    a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
                });
                let mut absorbed = 0.0;
                for &(price, sn, su, cap) in &items {
                    let rate = (slot_data[m] - absorbed) / view.slot_seconds;
                    let floor = cost.inverse_marginal(price);
                    if rate <= floor {
                        break;
                    }
                    let room = if floor.is_finite() { (rate - floor) * view.slot_seconds } else { cap };
                    let dx = cap.min(room);
                    if dx <= 0.0 {
                        continue;
                    }
                    cached[sn][su] = dx;
                    absorbed += dx;
                    dual += price * dx;
                }
                let rate = ((slot_data[m] - absorbed) / view.slot_seconds).max(0.0);
                dual += view.slot_seconds * cost.eval(rate).expect("rate in range");
            }
            dual -= capacity * hold.iter().sum::<f64>();
            if dual > best_dual {
                best_dual = dual;
            }

            // Subgradient on the occupancy residuals.
            iterations += 1;
            let step = step0 / (iterations as f64).sqrt();
            let mut occ = 0.0;
            for m in 0..n {
                for u in 0..users {
                    occ += cached[m][u];
                    if let Some((pn, pu)) = view.prev[m][u] {
                        occ -= cached[pn][pu];
                    }
                }
                hold[m] = (hold[m] + step * (occ - capacity)).max(0.0);
            }
            for m in 0..n {
                for u in 0..users {
                    cached_sum[m][u] += cached[m][u];
                }
            }

            if iterations % opts.recover_every == 0 || iterations == opts.max_iters {
                let mean: Vec<Vec<f64>> = cached_sum
                    .iter()
                    .map(|row| row.iter().map(|s| s / iterations as f64).collect())
                    .collect();
                for cand in [evaluate(&mean), evaluate(&cached)] {
                    if cand.objective < best.objective {
                        best = cand;
                    }
                }
                if (best.objective - best_dual).max(0.0)
                    <= opts.tol * best.objective.abs().max(1.0)
                {
                    break;
                }
            }
        }
    } else {
        best_dual = best.objective;
    }

    finish_certificate(&mut best, best_dual, iterations, opts.tol);
    best
}

/// Largest violation (Mnats) of a schedule against the envelope and box
/// constraints; diagnostics for tests and the certificate.
pub fn feasibility_residual(view: &DemandView, schedule: &SbsSchedule, capacity: f64) -> f64 {
    let (lower, upper) = envelope_points(view, &schedule.cached, capacity);
    let mut cum = 0.0;
    let mut worst = 0.0f64;
    for m in 0..view.num_slots() {
        cum += schedule.rates[m] * view.slot_seconds;
        worst = worst.max(lower[m] - cum).max(cum - upper[m]);
        worst = worst.max(-schedule.rates[m] * view.slot_seconds);
    }
    for m in 0..view.num_slots() {
        for u in 0..view.num_users() {
            worst = worst.max(-schedule.cached[m][u]);
            worst = worst.max(schedule.cached[m][u] - view.cache_box(m, u));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{build_view, sample_trace, DemandTrace, FileCatalog};

    fn two_user_view() -> DemandView {
        let catalog = FileCatalog::new(vec![1.0, 2.0, 1.5, 2.5], None).unwrap();
        let trace = DemandTrace::new(
            1.0,
            2,
            vec![vec![1, 0], vec![2, 4], vec![0, 2], vec![3, 3]],
            catalog,
        )
        .unwrap();
        build_view(&trace)
    }

    fn energy() -> CostModel {
        CostModel::energy(1.0)
    }

    #[test]
    fn inner_rate_is_zero_at_zero_multipliers() {
        let view = two_user_view();
        let state = DualState::new(&view, &SolveOptions::default());
        assert_eq!(inner_rate(&state, 0, &energy(), 100.0), 0.0);
    }

    #[test]
    fn inner_rate_matches_the_log_formula() {
        let view = two_user_view();
        let mut state = DualState::new(&view, &SolveOptions::default());
        let n = view.num_slots();
        state.demand_multipliers[n - 1] = 1f64.exp();
        assert!((inner_rate(&state, n - 1, &energy(), 100.0) - 1.0).abs() < 1e-12);
        state.demand_multipliers[n - 1] = 0.9;
        assert_eq!(inner_rate(&state, n - 1, &energy(), 100.0), 0.0);
    }

    #[test]
    fn cache_rule_follows_the_switch_sign() {
        let view = two_user_view();
        let mut state = DualState::new(&view, &SolveOptions::default());
        // Request (1,0) is file 2, next requested in slot 2. Put mass on the
        // cache multipliers to discourage caching.
        state.cache_multipliers[1] = 0.3;
        let w = cache_switch_value(&state, &view, 1, 0);
        assert!((w - 0.3).abs() < 1e-15);
        assert_eq!(inner_cache(&state, &view, 1, 0), (0.0, false));
        // Reward future demand instead.
        state.cache_multipliers[1] = 0.0;
        state.demand_multipliers[2] = 0.3;
        let w = cache_switch_value(&state, &view, 1, 0);
        assert!((w + 0.3).abs() < 1e-15);
        assert_eq!(inner_cache(&state, &view, 1, 0), (view.cache_box(1, 0), false));
        // A half-box tie on exact zero.
        state.demand_multipliers[2] = 0.0;
        let (q, degenerate) = inner_cache(&state, &view, 1, 0);
        assert!(degenerate);
        assert!((q - view.cache_box(1, 0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn files_never_requested_again_are_not_cached() {
        let view = two_user_view();
        let mut state = DualState::new(&view, &SolveOptions::default());
        for m in 0..view.num_slots() {
            state.cache_multipliers[m] = 0.1;
        }
        // Request (3,0) is the last of file 3.
        assert!(view.next[3][0].is_none());
        assert!(cache_switch_value(&state, &view, 3, 0) > 0.0);
        assert_eq!(inner_cache(&state, &view, 3, 0).0, 0.0);
    }

    #[test]
    fn priority_orders_by_next_request_time() {
        // For any multipliers, a file re-requested sooner has the smaller
        // switching value.
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let catalog = FileCatalog::new(vec![1.0, 1.0], None).unwrap();
        let trace = DemandTrace::new(
            1.0,
            2,
            vec![vec![1, 2], vec![1, 0], vec![0, 0], vec![2, 0]],
            catalog,
        )
        .unwrap();
        let view = build_view(&trace);
        for _ in 0..200 {
            let mut state = DualState::new(&view, &SolveOptions::default());
            for m in 0..view.num_slots() {
                state.cache_multipliers[m] = rng.gen::<f64>();
                state.demand_multipliers[m] = rng.gen::<f64>();
            }
            let sooner = cache_switch_value(&state, &view, 0, 0);
            let later = cache_switch_value(&state, &view, 0, 1);
            assert!(sooner <= later + 1e-12);
        }
    }

    #[test]
    fn zero_residuals_leave_multipliers_unchanged() {
        // One slot, one user, zero capacity: transmitting exactly the demand
        // and caching nothing zeroes both residuals.
        let catalog = FileCatalog::new(vec![2.0], None).unwrap();
        let trace = DemandTrace::new(1.0, 1, vec![vec![1]], catalog).unwrap();
        let view = build_view(&trace);
        let mut state = DualState::new(&view, &SolveOptions::default());
        state.cache_multipliers[0] = 0.4;
        state.demand_multipliers[0] = 0.7;
        let inner = InnerSolution { rates: vec![2.0], cached: vec![vec![0.0]], dual_value: 0.0 };
        subgradient_step(&mut state, &view, 0.0, &inner);
        assert!((state.cache_multipliers[0] - 0.4).abs() < 1e-15);
        assert!((state.demand_multipliers[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn projection_clips_negative_multipliers() {
        let catalog = FileCatalog::new(vec![2.0], None).unwrap();
        let trace = DemandTrace::new(1.0, 1, vec![vec![1]], catalog).unwrap();
        let view = build_view(&trace);
        let mut state = DualState::new(&view, &SolveOptions::default());
        // Transmit nothing: the capacity constraint is slack by C + data,
        // pushing the cache multiplier negative before projection.
        let inner = InnerSolution { rates: vec![0.0], cached: vec![vec![0.0]], dual_value: 0.0 };
        subgradient_step(&mut state, &view, 5.0, &inner);
        assert_eq!(state.cache_multipliers[0], 0.0);
        assert!(state.demand_multipliers[0] > 0.0);
    }

    #[test]
    fn single_slot_solve_cannot_cache() {
        let catalog = FileCatalog::new(vec![3.0], None).unwrap();
        let trace = DemandTrace::new(1.0, 1, vec![vec![1]], catalog).unwrap();
        let view = build_view(&trace);
        let s = solve(&view, 10.0, &energy(), &SolveOptions::default());
        assert!((s.rates[0] - 3.0).abs() < 1e-9);
        assert!(s.cached[0][0].abs() < 1e-9);
    }

    #[test]
    fn zero_capacity_collapses_to_the_demand_path() {
        let view = two_user_view();
        let s = solve(&view, 0.0, &energy(), &SolveOptions::default());
        let expect: Vec<f64> = (0..view.num_slots()).map(|m| view.slot_data(m)).collect();
        for (got, want) in s.rates.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-9, "rates {:?}", s.rates);
        }
        for row in &s.cached {
            for &q in row {
                assert!(q.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_demand_is_trivially_optimal() {
        let catalog = FileCatalog::new(vec![2.0], None).unwrap();
        let trace = DemandTrace::new(1.0, 1, vec![vec![0], vec![0]], catalog).unwrap();
        let view = build_view(&trace);
        let s = solve(&view, 1.0, &energy(), &SolveOptions::default());
        assert_eq!(s.objective, 0.0);
        assert!(s.certificate.converged);
    }

    #[test]
    fn joint_optimum_beats_both_fixed_policies() {
        // Capacity equals the length of the file re-requested across slots;
        // the joint optimum must weakly dominate both pure pre-downloading
        // and pure local caching.
        let view = two_user_view();
        let capacity = 2.0; // length of file 2
        let cost = energy();
        let opts = SolveOptions::default();
        let s = solve(&view, capacity, &cost, &opts);
        assert!(s.certificate.gap <= 1e-3 * s.objective.max(1.0));

        let zero_q = vec![vec![0.0; view.num_users()]; view.num_slots()];
        let a = envelope::min_departure(&view, &zero_q).unwrap();
        let b = envelope::max_departure(&view, &zero_q, capacity).unwrap();
        let pre = envelope::taut_string(&a, &b).unwrap().cost(&cost).unwrap();
        let pinned = solve_pinned(&view, capacity, &cost, &opts);

        assert!(s.objective <= pre + 1e-9);
        assert!(s.objective <= pinned.objective + 1e-9);
    }

    #[test]
    fn weak_duality_holds_along_the_run() {
        let view = two_user_view();
        let cost = energy();
        let capacity = 1.5;
        let opts = SolveOptions::default();
        let mut state = DualState::new(&view, &opts);
        let zero_q = vec![vec![0.0; view.num_users()]; view.num_slots()];
        let feasible = schedule_from_cached(&view, &zero_q, capacity, &cost);
        for _ in 0..2_000 {
            let inner = inner_solution(&state, &view, capacity, &cost);
            assert!(
                inner.dual_value <= feasible.objective + 1e-7,
                "dual {} exceeded a feasible objective {}",
                inner.dual_value,
                feasible.objective
            );
            subgradient_step(&mut state, &view, capacity, &inner);
        }
    }

    #[test]
    fn recovered_schedules_are_feasible() {
        for seed in 0..30u64 {
            let catalog = FileCatalog::with_zipf(vec![1.0, 2.0, 0.5], 1.0).unwrap();
            let trace = sample_trace(&catalog, 5, 2, 1.0, seed, 0.15).unwrap();
            let view = build_view(&trace);
            let s = solve(&view, 1.2, &energy(), &SolveOptions::default());
            assert!(feasibility_residual(&view, &s, 1.2) <= 1e-6, "seed {seed}");
            assert!(s.objective >= s.certificate.dual_bound - 1e-9);
        }
    }

    #[test]
    fn capacity_helps_monotonically() {
        for seed in 0..20u64 {
            let catalog = FileCatalog::with_zipf(vec![1.5, 1.0, 0.7], 1.0).unwrap();
            let trace = sample_trace(&catalog, 5, 2, 1.0, seed, 0.1).unwrap();
            let view = build_view(&trace);
            let opts = SolveOptions::default();
            let small = solve(&view, 0.5, &energy(), &opts);
            let large = solve(&view, 1.5, &energy(), &opts);
            assert!(
                large.objective <= small.objective + 1e-6,
                "seed {seed}: {} vs {}",
                large.objective,
                small.objective
            );
        }
    }

    #[test]
    fn complementary_structure_at_convergence() {
        let view = two_user_view();
        let cost = energy();
        let capacity = 2.0;
        let opts = SolveOptions { tol: 1e-6, ..SolveOptions::default() };
        let mut state = DualState::new(&view, &opts);
        for _ in 0..50_000 {
            let inner = inner_solution(&state, &view, capacity, &cost);
            subgradient_step(&mut state, &view, capacity, &inner);
        }
        let s = solve(&view, capacity, &cost, &opts);
        let tol = 1e-2;
        for m in 0..view.num_slots() {
            for u in 0..view.num_users() {
                let w = cache_switch_value(&state, &view, m, u);
                let cap = view.cache_box(m, u);
                if s.cached[m][u] > tol * cap.max(1.0) {
                    assert!(w <= tol, "cached request ({m},{u}) has positive switch {w}");
                }
                if cap - s.cached[m][u] > tol * cap.max(1.0) {
                    assert!(w >= -tol, "partial request ({m},{u}) has negative switch {w}");
                }
            }
        }
    }

    #[test]
    fn pinned_solver_respects_occupancy() {
        for seed in 0..20u64 {
            let catalog = FileCatalog::with_zipf(vec![1.0, 0.8, 1.2], 1.2).unwrap();
            let trace = sample_trace(&catalog, 6, 2, 1.0, seed, 0.1).unwrap();
            let view = build_view(&trace);
            let s = solve_pinned(&view, 1.0, &energy(), &SolveOptions::default());
            let mut occ = 0.0;
            for m in 0..view.num_slots() {
                for u in 0..view.num_users() {
                    occ += s.cached[m][u];
                    if let Some((pn, pu)) = view.prev[m][u] {
                        occ -= s.cached[pn][pu];
                    }
                }
                assert!(occ <= 1.0 + 1e-9, "seed {seed}: occupancy {occ}");
            }
        }
    }
}
