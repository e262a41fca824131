//! Shared oracle machinery for the integration tests: brute-force
//! optimizers that are independent of the solver code paths they check.
//!
//! Each test target compiles this module separately and uses its own
//! subset of the oracles.
#![allow(dead_code)]

use edgecache::cost::CostModel;
use edgecache::demand::{build_view, sample_trace, DemandTrace, DemandView, FileCatalog};
use edgecache::envelope::{self, horizon_cost};

/// Cache entries that can matter: requests with a later reuse and a nonzero
/// box. Everything else is optimally zero (caching data never requested
/// again only tightens the tunnel).
pub fn active_cache_entries(view: &DemandView) -> Vec<(usize, usize, f64)> {
    let mut active = Vec::new();
    for n in 0..view.num_slots() {
        for u in 0..view.num_users() {
            let cap = view.cache_box(n, u);
            if cap > 0.0 && view.next[n][u].is_some() {
                active.push((n, u, cap));
            }
        }
    }
    active
}

/// Brute-force reference for the single-cache program: grid over the active
/// caching amounts (at `levels` points per entry), taut string for the
/// rates, exhaustive minimum, then two zoom passes around the best point so
/// the reference resolves finer than the base grid. Exponential in the
/// number of active entries.
pub fn sbs_grid_oracle(
    view: &DemandView,
    capacity: f64,
    cost: &CostModel,
    levels: usize,
) -> f64 {
    let active = active_cache_entries(view);
    let mut centers: Vec<f64> = active.iter().map(|&(_, _, cap)| cap / 2.0).collect();
    let mut spans: Vec<f64> = active.iter().map(|&(_, _, cap)| cap / 2.0).collect();
    let mut best = f64::INFINITY;
    for _zoom in 0..3 {
        let mut best_q = centers.clone();
        let round_best = sbs_grid_pass(
            view,
            capacity,
            cost,
            levels,
            &active,
            &centers,
            &spans,
            &mut best_q,
        );
        if round_best < best {
            best = round_best;
        }
        for k in 0..active.len() {
            centers[k] = best_q[k];
            spans[k] = (2.0 * spans[k] / (levels - 1) as f64).max(1e-9);
        }
        if active.is_empty() {
            break;
        }
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn sbs_grid_pass(
    view: &DemandView,
    capacity: f64,
    cost: &CostModel,
    levels: usize,
    active: &[(usize, usize, f64)],
    centers: &[f64],
    spans: &[f64],
    best_q: &mut [f64],
) -> f64 {
    let mut cached = vec![vec![0.0; view.num_users()]; view.num_slots()];
    let mut best = f64::INFINITY;
    let mut idx = vec![0usize; active.len()];
    loop {
        let mut q_here = Vec::with_capacity(active.len());
        for (k, &(n, u, cap)) in active.iter().enumerate() {
            let lo = (centers[k] - spans[k]).max(0.0);
            let hi = (centers[k] + spans[k]).min(cap);
            let v = lo + (hi - lo) * idx[k] as f64 / (levels - 1) as f64;
            cached[n][u] = v;
            q_here.push(v);
        }
        // Project onto the capacity slice: infeasible points scale down to
        // the largest feasible multiple, so the binding region is sampled
        // densely instead of skipped.
        let mut occ = 0.0;
        let mut peak = 0.0f64;
        for n in 0..view.num_slots() {
            for u in 0..view.num_users() {
                occ += cached[n][u];
                if let Some((pn, pu)) = view.prev[n][u] {
                    occ -= cached[pn][pu];
                }
            }
            peak = peak.max(occ);
        }
        if peak > capacity && peak > 0.0 {
            let factor = capacity / peak;
            for (k, &(n, u, _)) in active.iter().enumerate() {
                cached[n][u] *= factor;
                q_here[k] *= factor;
            }
        }
        if let (Ok(lower), Ok(upper)) = (
            envelope::min_departure(view, &cached),
            envelope::max_departure(view, &cached, capacity),
        ) {
            let feasible = lower
                .values()
                .iter()
                .zip(upper.values())
                .all(|(l, h)| l <= &(h + 1e-9));
            if feasible {
                if let Ok(ts) = envelope::taut_string(&lower, &upper) {
                    let cost_here =
                        horizon_cost(cost, &ts.rates, view.slot_seconds).expect("rates ok");
                    if cost_here < best {
                        best = cost_here;
                        best_q.copy_from_slice(&q_here);
                    }
                }
            }
        }
        // advance the mixed-radix counter
        let mut k = 0;
        loop {
            if k == active.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] < levels {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
        if active.is_empty() {
            return best;
        }
    }
}

/// Sample small traces until one has at most `max_active` active cache
/// entries, so the grid oracle stays tractable. Returns the trace and the
/// seed that produced it.
pub fn small_instance(
    seed0: u64,
    num_slots: usize,
    num_users: usize,
    num_files: usize,
    max_active: usize,
) -> (DemandTrace, u64) {
    let mut seed = seed0;
    loop {
        let lengths: Vec<f64> =
            (0..num_files).map(|j| 0.5 + 0.9 * ((seed + j as u64) % 5) as f64).collect();
        let catalog = FileCatalog::with_zipf(lengths, 0.8).unwrap();
        let trace = sample_trace(&catalog, num_slots, num_users, 1.0, seed, 0.15).unwrap();
        let view = build_view(&trace);
        let active = active_cache_entries(&view);
        if !active.is_empty() && active.len() <= max_active {
            return (trace, seed);
        }
        seed += 10_007;
    }
}

use edgecache::d2d::D2dProblem;
use minilp::{ComparisonOp, OptimizationDirection, Problem as Lp, Variable};


/// Merge duplicate variable entries (the sparse backend rejects them).
fn merged(row: &[(Variable, f64)]) -> Vec<(Variable, f64)> {
    let mut out: Vec<(Variable, f64)> = Vec::with_capacity(row.len());
    for &(v, c) in row {
        match out.iter_mut().find(|(w, _)| *w == v) {
            Some((_, acc)) => *acc += c,
            None => out.push((v, c)),
        }
    }
    out.retain(|(_, c)| *c != 0.0);
    out
}

/// Exact reference for the distributed program with linear D2D costs:
/// cutting planes on the (convex) MBS rate costs over an otherwise linear
/// program, iterated until the tangent lower bound meets the feasible-point
/// upper bound. Returns (optimum, certified bound width).
pub fn d2d_lp_oracle(problem: &D2dProblem, tol: f64) -> (f64, f64) {
    let (value, width, _, _) = d2d_lp_oracle_with_point(problem, tol);
    (value, width)
}

/// As [`d2d_lp_oracle`], also returning the best feasible point found as
/// `(cached, transfers)` tensors indexed `[slot][server][receiver]`.
#[allow(clippy::type_complexity)]
pub fn d2d_lp_oracle_with_point(
    problem: &D2dProblem,
    tol: f64,
) -> (f64, f64, Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) {
    let n = problem.num_slots();
    let users = problem.num_users();
    let ts = problem.slot_seconds;

    // Linear D2D prices (the oracle covers the equal/linear cost case).
    let price = |u: usize, v: usize| -> f64 {
        use edgecache::cost::CostModel;
        match &problem.d2d_costs[u][v] {
            CostModel::LinearIncentive { price_per_mnat } => *price_per_mnat,
            CostModel::Traffic => 1.0,
            other => panic!("oracle needs linear D2D costs, got {other:?}"),
        }
    };

    // Tangent sets per (slot, user), grown by the cutting loop.
    let rate_caps: Vec<f64> = (0..users)
        .map(|u| problem.demand.iter().map(|row| row[u]).sum::<f64>())
        .collect();
    let mut tangents: Vec<Vec<f64>> = Vec::new();
    for u in 0..users {
        let pts: Vec<f64> =
            (0..=4).map(|k| rate_caps[u] * k as f64 / 4.0).collect();
        tangents.push(pts);
    }

    let mut upper_best = f64::INFINITY;
    let mut lower_best = f64::NEG_INFINITY;
    let mut best_point: Option<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> = None;
    for _round in 0..60 {
        let mut lp = Lp::new(OptimizationDirection::Minimize);
        // Rates and their epigraph variables.
        let mut r_var = vec![vec![None; users]; n];
        let mut t_var = vec![vec![None; users]; n];
        for m in 0..n {
            for u in 0..users {
                r_var[m][u] = Some(lp.add_var(0.0, (0.0, rate_caps[u].max(1e-9))));
                t_var[m][u] = Some(lp.add_var(ts, (0.0, f64::INFINITY)));
            }
        }
        // Cache and transfer variables per chain.
        // held[chain][pos][u], serve[chain][pos][child][u]
        let mut held: Vec<Vec<Vec<Option<Variable>>>> = Vec::new();
        let mut serve: Vec<Vec<Vec<Vec<Option<Variable>>>>> = Vec::new();
        for chain in &problem.chains {
            let k = chain.spine.len();
            let mut hc = vec![vec![None; users]; k];
            let mut sc: Vec<Vec<Vec<Option<Variable>>>> = Vec::with_capacity(k);
            for pos in 0..k {
                for (u, slot) in hc[pos].iter_mut().enumerate() {
                    // At the first position only the requester can hold.
                    if pos == 0 && u != chain.spine[0].1 {
                        continue;
                    }
                    *slot = Some(lp.add_var(0.0, (0.0, chain.length)));
                }
                let mut children = Vec::new();
                for &(cs, cu) in &chain.children[pos] {
                    let mut per_server = vec![None; users];
                    for (u, vslot) in per_server.iter_mut().enumerate() {
                        if hc[pos][u].is_none() {
                            continue;
                        }
                        let cost = if u == cu { 0.0 } else { ts * price(u, cu) / ts };
                        *vslot = Some(lp.add_var(cost, (0.0, chain.length)));
                    }
                    let _ = (cs, cu);
                    children.push(per_server);
                }
                sc.push(children);
            }
            held.push(hc);
            serve.push(sc);
        }

        // Epigraph cuts.
        for m in 0..n {
            for u in 0..users {
                let cost = &problem.mbs_costs[u];
                for &point in &tangents[u] {
                    let slope = cost.marginal(point).expect("tangent point in range");
                    let value = cost.eval(point).expect("tangent point in range");
                    // t >= value + slope (r - point)
                    lp.add_constraint(
                        &[(t_var[m][u].unwrap(), 1.0), (r_var[m][u].unwrap(), -slope)][..],
                        ComparisonOp::Ge,
                        value - slope * point,
                    );
                }
            }
        }

        // Chain structure constraints.
        for (ci, chain) in problem.chains.iter().enumerate() {
            for pos in 0..chain.spine.len() {
                // Non-overlap at the spine request.
                let row: Vec<(Variable, f64)> = (0..users)
                    .filter_map(|u| held[ci][pos][u].map(|v| (v, 1.0)))
                    .collect();
                if !row.is_empty() {
                    lp.add_constraint(&row[..], ComparisonOp::Le, chain.length);
                }
                // Monotone holding for non-requesters.
                if pos > 0 {
                    for u in 0..users {
                        if u == chain.spine[pos].1 {
                            continue;
                        }
                        if let Some(cur) = held[ci][pos][u] {
                            match held[ci][pos - 1][u] {
                                Some(prev) => {
                                    lp.add_constraint(
                                        &[(cur, 1.0), (prev, -1.0)][..],
                                        ComparisonOp::Le,
                                        0.0,
                                    );
                                }
                                None => {
                                    lp.add_constraint(&[(cur, 1.0)][..], ComparisonOp::Le, 0.0);
                                }
                            }
                        }
                    }
                }
                // Transfers bounded by the held amount.
                for (child_i, per_server) in serve[ci][pos].iter().enumerate() {
                    let _ = child_i;
                    for u in 0..users {
                        if let Some(b) = per_server[u] {
                            let h = held[ci][pos][u].expect("server can hold here");
                            lp.add_constraint(
                                &[(b, 1.0), (h, -1.0)][..],
                                ComparisonOp::Le,
                                0.0,
                            );
                        }
                    }
                }
            }
        }

        // Cumulative envelope constraints per user.
        for u in 0..users {
            for m in 0..n {
                // inflow/outflow/keep coefficients for slots <= m
                let mut demand_row: Vec<(Variable, f64)> = Vec::new();
                let mut capacity_row: Vec<(Variable, f64)> = Vec::new();
                let mut cum_demand = 0.0;
                for l in 0..=m {
                    cum_demand += ts * problem.demand[l][u];
                    demand_row.push((r_var[l][u].unwrap(), ts));
                    capacity_row.push((r_var[l][u].unwrap(), ts));
                }
                for (ci, chain) in problem.chains.iter().enumerate() {
                    for pos in 0..chain.spine.len() {
                        let (slot, requester) = chain.spine[pos];
                        if slot <= m {
                            if let Some(h) = held[ci][pos][u] {
                                let _ = requester;
                                capacity_row.push((h, 1.0));
                            }
                        }
                        for (child_i, &(cs, cu)) in chain.children[pos].iter().enumerate() {
                            if cs > m {
                                continue;
                            }
                            for srv in 0..users {
                                if let Some(b) = serve[ci][pos][child_i][srv] {
                                    if cu == u {
                                        // received by u
                                        demand_row.push((b, 1.0));
                                        capacity_row.push((b, 1.0));
                                    }
                                    if srv == u {
                                        capacity_row.push((b, -1.0));
                                    }
                                }
                            }
                        }
                    }
                }
                // demand: cum rates + received >= cum demand
                lp.add_constraint(&merged(&demand_row)[..], ComparisonOp::Ge, cum_demand);
                // capacity: cum rates - out + in + held <= C + cum demand
                lp.add_constraint(
                    &merged(&capacity_row)[..],
                    ComparisonOp::Le,
                    problem.capacities[u] + cum_demand,
                );
            }
        }

        let solution = lp.solve().expect("oracle LP is feasible");
        let lower = solution.objective();
        // Extract the point into request-indexed tensors.
        let mut cached_pt = vec![vec![vec![0.0; users]; users]; n];
        let mut transfers_pt = vec![vec![vec![0.0; users]; users]; n];
        for (ci, chain) in problem.chains.iter().enumerate() {
            for pos in 0..chain.spine.len() {
                let (slot, requester) = chain.spine[pos];
                for u in 0..users {
                    if let Some(h) = held[ci][pos][u] {
                        cached_pt[slot][u][requester] = solution[h];
                    }
                }
                for (child_i, &(cs, cu)) in chain.children[pos].iter().enumerate() {
                    for srv in 0..users {
                        if let Some(b) = serve[ci][pos][child_i][srv] {
                            transfers_pt[cs][srv][cu] = solution[b];
                        }
                    }
                }
            }
        }
        if lower > lower_best {
            lower_best = lower;
        }
        // True objective at the LP point.
        let mut upper = 0.0;
        for m in 0..n {
            for u in 0..users {
                let r = solution[r_var[m][u].unwrap()].max(0.0);
                upper += ts * problem.mbs_costs[u].eval(r).expect("rate in range");
            }
        }
        for (ci, chain) in problem.chains.iter().enumerate() {
            for pos in 0..chain.spine.len() {
                for (child_i, &(_, cu)) in chain.children[pos].iter().enumerate() {
                    for srv in 0..users {
                        if srv == cu {
                            continue;
                        }
                        if let Some(b) = serve[ci][pos][child_i][srv] {
                            upper += solution[b] * price(srv, cu);
                        }
                    }
                }
            }
        }
        if upper < upper_best {
            upper_best = upper;
            best_point = Some((cached_pt, transfers_pt));
        }
        if upper_best - lower_best <= tol * upper_best.abs().max(1.0) {
            break;
        }
        // Refine the tangents at the current rates.
        for u in 0..users {
            for m in 0..n {
                let r = solution[r_var[m][u].unwrap()].max(0.0);
                if tangents[u].iter().all(|p| (p - r).abs() > 1e-9) {
                    tangents[u].push(r);
                }
            }
        }
    }
    let (cached, transfers) = best_point.expect("at least one round ran");
    (upper_best, upper_best - lower_best, cached, transfers)
}

/// Independent brute-force reference for tiny distributed instances: grid
/// over every chain holding amount (with zoom), a coarse grid over transfer
/// fractions, per-user taut strings for the rates. Exponential; keep the
/// instances tiny.
pub fn d2d_grid_oracle(problem: &D2dProblem, levels: usize, zooms: usize) -> f64 {
    use edgecache::d2d::solve_from_candidate;
    let users = problem.num_users();
    let n = problem.num_slots();

    // Holding coordinates: (chain, spine position, user) that may hold.
    let mut q_dims: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (ci, chain) in problem.chains.iter().enumerate() {
        for pos in 0..chain.spine.len() {
            if chain.children[pos].is_empty() {
                continue;
            }
            for u in 0..users {
                if pos == 0 && u != chain.spine[0].1 {
                    continue;
                }
                q_dims.push((ci, pos, u, chain.length));
            }
        }
    }
    // Transfer coordinates: (chain, position, child index, server).
    let mut b_dims: Vec<(usize, usize, usize, usize)> = Vec::new();
    for (ci, chain) in problem.chains.iter().enumerate() {
        for pos in 0..chain.spine.len() {
            for (child_i, _) in chain.children[pos].iter().enumerate() {
                for u in 0..users {
                    if pos == 0 && u != chain.spine[0].1 {
                        continue;
                    }
                    b_dims.push((ci, pos, child_i, u));
                }
            }
        }
    }

    let b_levels = 3usize;
    let mut centers: Vec<f64> = q_dims.iter().map(|&(_, _, _, cap)| cap / 2.0).collect();
    let mut spans: Vec<f64> = q_dims.iter().map(|&(_, _, _, cap)| cap / 2.0).collect();
    let mut best = f64::INFINITY;

    for _zoom in 0..zooms.max(1) {
        let mut q_idx = vec![0usize; q_dims.len()];
        let mut best_q = centers.clone();
        loop {
            let mut cached = vec![vec![vec![0.0; users]; users]; n];
            let mut q_here = Vec::with_capacity(q_dims.len());
            for (k, &(ci, pos, u, cap)) in q_dims.iter().enumerate() {
                let lo = (centers[k] - spans[k]).max(0.0);
                let hi = (centers[k] + spans[k]).min(cap);
                let v = if levels == 1 {
                    centers[k].clamp(0.0, cap)
                } else {
                    lo + (hi - lo) * q_idx[k] as f64 / (levels - 1) as f64
                };
                q_here.push(v);
                let (slot, req) = problem.chains[ci].spine[pos];
                cached[slot][u][req] = v;
            }
            // Enumerate transfer fractions coarsely.
            let mut b_idx = vec![0usize; b_dims.len()];
            loop {
                let mut transfers = vec![vec![vec![0.0; users]; users]; n];
                for (k, &(ci, pos, child_i, u)) in b_dims.iter().enumerate() {
                    let chain = &problem.chains[ci];
                    let (slot, req) = chain.spine[pos];
                    let bound = cached[slot][u][req];
                    let frac = b_idx[k] as f64 / (b_levels - 1) as f64;
                    let (cs, cu) = chain.children[pos][child_i];
                    transfers[cs][u][cu] = frac * bound;
                }
                let cand = solve_from_candidate(problem, &cached, &transfers);
                if cand.objective < best {
                    best = cand.objective;
                    best_q = q_here.clone();
                }
                // advance b counter
                let mut k = 0;
                loop {
                    if k == b_dims.len() {
                        break;
                    }
                    b_idx[k] += 1;
                    if b_idx[k] < b_levels {
                        break;
                    }
                    b_idx[k] = 0;
                    k += 1;
                }
                if k == b_dims.len() || b_dims.is_empty() {
                    break;
                }
            }
            // advance q counter
            let mut k = 0;
            loop {
                if k == q_dims.len() {
                    break;
                }
                q_idx[k] += 1;
                if q_idx[k] < levels {
                    break;
                }
                q_idx[k] = 0;
                k += 1;
            }
            if k == q_dims.len() || q_dims.is_empty() {
                break;
            }
        }
        for k in 0..q_dims.len() {
            centers[k] = best_q[k];
            spans[k] /= (levels - 1).max(1) as f64;
        }
        if q_dims.is_empty() {
            break;
        }
    }
    best
}
