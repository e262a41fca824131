//! Solver for the distributed-cache (D2D) scenario.
//!
//! Every user downloads only its own traffic from the macro station over a
//! dedicated link, may cache what it serves to its application, and may later
//! forward cached content to other users over device-to-device links (or
//! reuse it locally for free). The decision variables per slot are the MBS
//! rate of each user, the amount each user caches during each request, and
//! the amount each user transfers toward each request.
//!
//! The cumulative per-user demand and cache-capacity constraints are relaxed
//! with multipliers, exactly as in the single-cache solver. What remains
//! decomposes into closed-form per-user rate minimizations and one small
//! linear program per file: its requests form a chain (a spine of per-slot
//! representatives with same-slot duplicates hanging off it), and cache mass
//! flowing down the chain with per-request non-overlap caps is a min-cost
//! flow on a line, solved exactly by shortest-path augmentation.

use crate::cost::CostModel;
use crate::demand::{cross_user_prev_map, DemandTrace};
use crate::envelope::{self, horizon_cost, CumulativeCurve};
use crate::sbs::{Certificate, SolveOptions, StepSchedule};
use std::fmt;

#[derive(Debug)]
pub enum D2dError {
    InvalidArgument(String),
}

impl fmt::Display for D2dError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            D2dError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
        }
    }
}

impl std::error::Error for D2dError {}

/// The requests of one file: per-slot representatives form the spine, and
/// `children[k]` are the requests served out of the cache state at spine
/// position `k` (the next representative plus any same-slot duplicates).
#[derive(Debug, Clone)]
pub struct FileChain {
    pub file: u32,
    /// Data per request of this file (Mnats).
    pub length: f64,
    pub spine: Vec<(usize, usize)>,
    pub children: Vec<Vec<(usize, usize)>>,
}

/// A distributed-caching problem instance.
#[derive(Debug, Clone)]
pub struct D2dProblem {
    pub slot_seconds: f64,
    /// Own demand rate of each user per slot (Mnats/s), no deduplication.
    pub demand: Vec<Vec<f64>>,
    /// Request file ids, `0` meaning idle.
    pub files: Vec<Vec<u32>>,
    /// Per-user cache capacities (Mnats).
    pub capacities: Vec<f64>,
    /// Cost of each user's MBS link.
    pub mbs_costs: Vec<CostModel>,
    /// Cost of the D2D link from server `u` to receiver `u'`; the diagonal
    /// is ignored (local reuse is free).
    pub d2d_costs: Vec<Vec<CostModel>>,
    /// Whether same-slot duplicates may be served within their own slot.
    pub instantaneous: bool,
    /// Previous-request map across all users.
    pub prev: Vec<Vec<Option<(usize, usize)>>>,
    pub chains: Vec<FileChain>,
}

impl D2dProblem {
    pub fn num_slots(&self) -> usize {
        self.demand.len()
    }

    pub fn num_users(&self) -> usize {
        self.capacities.len()
    }

    /// Demand of one request in Mnats.
    pub fn request_data(&self, slot: usize, user: usize) -> f64 {
        self.demand[slot][user] * self.slot_seconds
    }
}

/// Equal linear D2D pricing: every off-diagonal transfer costs
/// `price_per_mnat` per Mnat.
pub fn uniform_d2d_costs(num_users: usize, price_per_mnat: f64) -> Vec<Vec<CostModel>> {
    vec![vec![CostModel::LinearIncentive { price_per_mnat }; num_users]; num_users]
}

/// Assemble a problem from a trace: user `u`'s own demand is its column of
/// the trace, and the request chains span all users.
pub fn build_problem(
    trace: &DemandTrace,
    capacities: Vec<f64>,
    mbs_costs: Vec<CostModel>,
    d2d_costs: Vec<Vec<CostModel>>,
    instantaneous: bool,
) -> Result<D2dProblem, D2dError> {
    let users = trace.num_users();
    if capacities.len() != users || mbs_costs.len() != users {
        return Err(D2dError::InvalidArgument(format!(
            "expected {users} capacities and MBS costs, got {} and {}",
            capacities.len(),
            mbs_costs.len()
        )));
    }
    if d2d_costs.len() != users || d2d_costs.iter().any(|row| row.len() != users) {
        return Err(D2dError::InvalidArgument("D2D cost matrix must be users x users".into()));
    }
    if capacities.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(D2dError::InvalidArgument("capacities must be nonnegative".into()));
    }
    let n = trace.num_slots();
    let ts = trace.slot_seconds();
    let mut demand = vec![vec![0.0; users]; n];
    let mut files = vec![vec![0u32; users]; n];
    for s in 0..n {
        for u in 0..users {
            let f = trace.request(s, u);
            files[s][u] = f;
            demand[s][u] = trace.catalog().length(f) / ts;
        }
    }
    let prev = cross_user_prev_map(trace, instantaneous);

    // Per-file chains over requests with positive data.
    let mut chains = Vec::new();
    for file in 1..=trace.catalog().num_files() as u32 {
        let length = trace.catalog().length(file);
        if length <= 0.0 {
            continue;
        }
        let mut spine = Vec::new();
        for s in 0..n {
            if let Some(rep) = (0..users).find(|&u| files[s][u] == file) {
                spine.push((s, rep));
            }
        }
        if spine.is_empty() {
            continue;
        }
        let mut children = vec![Vec::new(); spine.len()];
        for s in 0..n {
            for u in 0..users {
                if files[s][u] != file {
                    continue;
                }
                if let Some(parent) = prev[s][u] {
                    let k = spine
                        .iter()
                        .position(|&p| p == parent)
                        .expect("request parents are spine representatives");
                    children[k].push((s, u));
                }
            }
        }
        chains.push(FileChain { file, length, spine, children });
    }

    Ok(D2dProblem {
        slot_seconds: ts,
        demand,
        files,
        capacities,
        mbs_costs,
        d2d_costs,
        instantaneous,
        prev,
        chains,
    })
}

/// A feasible schedule for the distributed scenario.
///
/// `d2d_data[n][u][v]` is the data (Mnats) user `u` contributes in slot `n`
/// toward the request of user `v`; the diagonal is free local reuse.
/// `cached[n][u][v]` is the data user `u` keeps cached while the request
/// `(n, v)` is served.
#[derive(Debug, Clone)]
pub struct D2dSchedule {
    pub mbs_rates: Vec<Vec<f64>>,
    pub d2d_data: Vec<Vec<Vec<f64>>>,
    pub cached: Vec<Vec<Vec<f64>>>,
    pub objective: f64,
    pub feasible: bool,
    pub certificate: Certificate,
}

impl D2dSchedule {
    /// Total data moved over real (off-diagonal) D2D links, in Mnats.
    pub fn d2d_volume(&self) -> f64 {
        let mut total = 0.0;
        for slot in &self.d2d_data {
            for (u, row) in slot.iter().enumerate() {
                for (v, &b) in row.iter().enumerate() {
                    if u != v {
                        total += b;
                    }
                }
            }
        }
        total
    }
}

fn zeros3(n: usize, users: usize) -> Vec<Vec<Vec<f64>>> {
    vec![vec![vec![0.0; users]; users]; n]
}

/// Linear price (per Mnat) and minorant offset of a D2D cost model around a
/// reference amount. Linear kinds are exact; smooth convex kinds get their
/// tangent at the reference, which stays a global lower bound.
fn transfer_price(model: &CostModel, reference: f64, slot_seconds: f64) -> (f64, f64) {
    match model {
        CostModel::Traffic => (1.0, 0.0),
        CostModel::LinearIncentive { price_per_mnat } => (*price_per_mnat, 0.0),
        other => {
            let rate = (reference / slot_seconds).max(0.0);
            let slope = other.marginal(rate).unwrap_or(0.0);
            let at = other.eval(rate).unwrap_or(0.0) * slot_seconds;
            (slope, at - slope * reference)
        }
    }
}

struct FlowArc {
    from: usize,
    to: usize,
    cap: f64,
    cost: f64,
    flow: f64,
    /// For interval arcs: (user, first spine index, last spine index).
    span: Option<(usize, usize, usize)>,
}

/// Exact min-cost flow on the chain line graph: returns per-user cached
/// amounts along the spine and the total cost of the selected intervals.
fn solve_chain(
    chain: &FileChain,
    users: usize,
    gamma: &[Vec<f64>], // [spine index][user]
    bias: f64,
) -> (Vec<Vec<f64>>, f64) {
    let k = chain.spine.len();
    // Nodes: 0 = source, 1..=k+1 = line; position j (1-based) is edge j->j+1.
    let sink = k + 1;
    let budget = chain.length;
    let mut arcs = Vec::new();
    arcs.push(FlowArc { from: 0, to: 1, cap: budget, cost: 0.0, flow: 0.0, span: None });
    for j in 1..=k {
        arcs.push(FlowArc { from: j, to: j + 1, cap: budget, cost: 0.0, flow: 0.0, span: None });
    }
    // Intervals: user u may hold cache from a reset position through any
    // later position within its segment.
    for u in 0..users {
        let mut seg_start: Option<usize> = None;
        for j in 0..k {
            if chain.spine[j].1 == u {
                seg_start = Some(j);
            }
            if let Some(a) = seg_start {
                // holding cost over positions a..=j; the bias pulls exact
                // ties into the solution so alternating iterations average
                // to interior values on degenerate chains
                let cost: f64 = (a..=j).map(|i| gamma[i][u]).sum::<f64>() - bias;
                if cost < 0.0 {
                    arcs.push(FlowArc {
                        from: a + 1,
                        to: j + 2,
                        cap: budget,
                        cost,
                        flow: 0.0,
                        span: Some((u, a, j)),
                    });
                }
            }
        }
    }

    // Successive shortest (most negative) path augmentation; the graphs are
    // tiny, Bellman-Ford over the residual arcs is plenty.
    let nodes = k + 2;
    let mut total_cost = 0.0;
    for _round in 0..(arcs.len() + 2) {
        let mut dist = vec![f64::INFINITY; nodes];
        let mut from_arc: Vec<Option<(usize, bool)>> = vec![None; nodes];
        dist[0] = 0.0;
        for _ in 0..nodes {
            let mut improved = false;
            for (i, arc) in arcs.iter().enumerate() {
                if arc.cap - arc.flow > 1e-12 && dist[arc.from].is_finite() {
                    let nd = dist[arc.from] + arc.cost;
                    if nd < dist[arc.to] - 1e-15 {
                        dist[arc.to] = nd;
                        from_arc[arc.to] = Some((i, true));
                        improved = true;
                    }
                }
                if arc.flow > 1e-12 && dist[arc.to].is_finite() {
                    let nd = dist[arc.to] - arc.cost;
                    if nd < dist[arc.from] - 1e-15 {
                        dist[arc.from] = nd;
                        from_arc[arc.from] = Some((i, false));
                        improved = true;
                    }
                }
            }
            if !improved {
                break;
            }
        }
        if dist[sink] >= -1e-12 {
            break;
        }
        // Walk the path back, find the bottleneck, augment.
        let mut bottleneck = f64::INFINITY;
        let mut node = sink;
        while node != 0 {
            let (i, forward) = from_arc[node].expect("path is connected");
            let arc = &arcs[i];
            if forward {
                bottleneck = bottleneck.min(arc.cap - arc.flow);
                node = arc.from;
            } else {
                bottleneck = bottleneck.min(arc.flow);
                node = arc.to;
            }
        }
        if bottleneck <= 0.0 {
            break;
        }
        let mut node = sink;
        while node != 0 {
            let (i, forward) = from_arc[node].expect("path is connected");
            if forward {
                arcs[i].flow += bottleneck;
                node = arcs[i].from;
            } else {
                arcs[i].flow -= bottleneck;
                node = arcs[i].to;
            }
        }
        total_cost += dist[sink] * bottleneck;
    }

    let mut held = vec![vec![0.0; users]; k];
    for arc in &arcs {
        if let Some((u, a, j)) = arc.span {
            if arc.flow > 0.0 {
                for pos in a..=j {
                    held[pos][u] += arc.flow;
                }
            }
        }
    }
    (held, total_cost)
}

/// One inner iterate of the relaxed problem.
struct Inner {
    rates: Vec<Vec<f64>>,
    cached: Vec<Vec<Vec<f64>>>,
    transfers: Vec<Vec<Vec<f64>>>,
    dual_value: f64,
}

struct DualVars {
    cache: Vec<Vec<f64>>,  // [n][u]
    demand: Vec<Vec<f64>>, // [n][u]
}

fn inner_solution(
    problem: &D2dProblem,
    duals: &DualVars,
    prices: &[Vec<Vec<(f64, f64)>>], // [n][server][receiver] = (slope, offset)
    bias: f64,
) -> Inner {
    let n = problem.num_slots();
    let users = problem.num_users();
    let ts = problem.slot_seconds;

    // Tail sums per user.
    let mut hold_tail = vec![vec![0.0; users]; n + 1];
    let mut reward_tail = vec![vec![0.0; users]; n + 1];
    for m in (0..n).rev() {
        for u in 0..users {
            hold_tail[m][u] = hold_tail[m + 1][u] + duals.cache[m][u];
            reward_tail[m][u] = reward_tail[m + 1][u] + duals.demand[m][u];
        }
    }

    let mut dual = 0.0;
    let mut rates = vec![vec![0.0; users]; n];
    for u in 0..users {
        let rate_cap: f64 = problem.demand.iter().map(|row| row[u]).sum::<f64>().max(0.0);
        let cost = &problem.mbs_costs[u];
        for m in 0..n {
            let price = reward_tail[m][u] - hold_tail[m][u];
            let mut r = cost.inverse_marginal(price);
            if r.is_nan() {
                r = 0.0;
            }
            r = r.clamp(0.0, rate_cap);
            rates[m][u] = r;
            dual += ts * (cost.eval(r).expect("rate in range") - r * price);
        }
    }

    let mut cached = zeros3(n, users);
    let mut transfers = zeros3(n, users);
    for chain in &problem.chains {
        let k = chain.spine.len();
        // Reduced price of serving each child from each server, and the
        // per-position holding prices folded into gamma.
        let mut gamma = vec![vec![0.0; users]; k];
        let mut betas: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
        for pos in 0..k {
            let (slot, _) = chain.spine[pos];
            let mut row = Vec::with_capacity(chain.children[pos].len());
            for &(cs, cu) in &chain.children[pos] {
                let mut per_server = vec![0.0; users];
                for u in 0..users {
                    let price = if u == cu { 0.0 } else { prices[cs][u][cu].0 };
                    per_server[u] =
                        price - hold_tail[cs][u] + hold_tail[cs][cu] - reward_tail[cs][cu];
                }
                row.push(per_server);
            }
            for u in 0..users {
                let mut g = hold_tail[slot][u];
                for per_server in &row {
                    g += per_server[u].min(0.0);
                }
                gamma[pos][u] = g;
            }
            betas.push(row);
        }

        let (held, chain_cost) = solve_chain(chain, users, &gamma, bias);
        dual += chain_cost;
        for pos in 0..k {
            let (slot, requester) = chain.spine[pos];
            for u in 0..users {
                if held[pos][u] > 0.0 {
                    cached[slot][u][requester] = held[pos][u];
                }
            }
            for (ci, &(cs, cu)) in chain.children[pos].iter().enumerate() {
                for u in 0..users {
                    if betas[pos][ci][u] < bias && held[pos][u] > 0.0 {
                        transfers[cs][u][cu] = held[pos][u];
                    }
                }
            }
        }
    }

    // Tangent offsets keep the linearized D2D costs a global minorant.
    for row in prices.iter() {
        for (u, per_server) in row.iter().enumerate() {
            for (v, &(_, offset)) in per_server.iter().enumerate() {
                if u != v {
                    dual += offset.min(0.0);
                }
            }
        }
    }

    // Constant terms of the relaxation.
    for u in 0..users {
        let mut cum_demand = 0.0;
        for m in 0..n {
            cum_demand += ts * problem.demand[m][u];
            dual += duals.demand[m][u] * cum_demand
                - duals.cache[m][u] * (problem.capacities[u] + cum_demand);
        }
    }

    Inner { rates, cached, transfers, dual_value: dual }
}

/// Cumulative envelope points (boundaries `1..=N`) for each user.
fn envelope_points(
    problem: &D2dProblem,
    cached: &[Vec<Vec<f64>>],
    transfers: &[Vec<Vec<f64>>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = problem.num_slots();
    let users = problem.num_users();
    let ts = problem.slot_seconds;
    let mut lower = vec![vec![0.0; n]; users];
    let mut upper = vec![vec![0.0; n]; users];
    for u in 0..users {
        let mut lo = 0.0;
        let mut hi = problem.capacities[u];
        for m in 0..n {
            let mut inflow = 0.0;
            let mut outflow = 0.0;
            let mut kept = 0.0;
            for v in 0..users {
                inflow += transfers[m][v][u];
                outflow += transfers[m][u][v];
                kept += cached[m][u][v];
            }
            lo += ts * problem.demand[m][u] - inflow;
            hi += ts * problem.demand[m][u] + outflow - inflow - kept;
            lower[u][m] = lo;
            upper[u][m] = hi;
        }
    }
    (lower, upper)
}

/// Repair a point into feasibility, then schedule each user's link with a
/// taut string through its tunnel.
fn schedule_from_point(
    problem: &D2dProblem,
    cached_in: &[Vec<Vec<f64>>],
    transfers_in: &[Vec<Vec<f64>>],
) -> D2dSchedule {
    let n = problem.num_slots();
    let users = problem.num_users();
    let ts = problem.slot_seconds;
    let mut cached = zeros3(n, users);
    let mut transfers = zeros3(n, users);

    // Chain and non-overlap clamps, walking each file chain forward.
    for chain in &problem.chains {
        let mut prev_held = vec![0.0; users];
        for pos in 0..chain.spine.len() {
            let (slot, requester) = chain.spine[pos];
            let mut held = vec![0.0; users];
            let mut total = 0.0;
            for u in 0..users {
                let want = cached_in[slot][u][requester].max(0.0);
                let bound = if u == requester { chain.length } else { prev_held[u] };
                held[u] = want.min(bound);
                total += held[u];
            }
            if total > chain.length && total > 0.0 {
                let scale = chain.length / total;
                for h in held.iter_mut() {
                    *h *= scale;
                }
            }
            for u in 0..users {
                cached[slot][u][requester] = held[u];
            }
            // Transfers toward each child are bounded by what the server
            // holds at this position. Free links (local reuse and zero
            // incentives) always serve everything they can: that relaxes
            // both endpoints' envelopes and costs nothing.
            for &(cs, cu) in &chain.children[pos] {
                for u in 0..users {
                    let free = u == cu
                        || matches!(
                            problem.d2d_costs[u][cu],
                            CostModel::LinearIncentive { price_per_mnat: 0.0 }
                        );
                    transfers[cs][u][cu] = if free {
                        held[u]
                    } else {
                        transfers_in[cs][u][cu].max(0.0).min(held[u])
                    };
                }
            }
            prev_held = held;
        }
    }

    // Receivers never need more than the request itself.
    for m in 0..n {
        for v in 0..users {
            let need = problem.request_data(m, v);
            let total: f64 = (0..users).map(|u| transfers[m][u][v]).sum();
            if total > need && total > 0.0 {
                let scale = need / total;
                for u in 0..users {
                    transfers[m][u][v] *= scale;
                }
            }
        }
    }

    // Per-user occupancy repair: shrink a user's caching and serving
    // together until its buffer fits.
    for u in 0..users {
        let mut occ = 0.0;
        let mut peak = 0.0f64;
        for m in 0..n {
            for v in 0..users {
                occ += cached[m][u][v] - transfers[m][u][v];
            }
            peak = peak.max(occ);
        }
        if peak > problem.capacities[u] && peak > 0.0 {
            let scale = problem.capacities[u] / peak;
            for m in 0..n {
                for v in 0..users {
                    cached[m][u][v] *= scale;
                    transfers[m][u][v] *= scale;
                }
            }
        }
    }

    // Re-stretch free transfers to the repaired bounds: a larger transfer
    // over a free link only releases cache space and covers demand, so this
    // never hurts. Receivers are refilled up to their remaining demand,
    // local reuse first.
    for chain in &problem.chains {
        for pos in 0..chain.spine.len() {
            let (slot, requester) = chain.spine[pos];
            for &(cs, cu) in &chain.children[pos] {
                let mut room = problem.request_data(cs, cu);
                for v in 0..users {
                    room -= transfers[cs][v][cu];
                }
                let mut order: Vec<usize> = (0..users).collect();
                order.sort_by_key(|&v| (v != cu, v));
                for v in order {
                    if room <= 0.0 {
                        break;
                    }
                    let free = v == cu
                        || matches!(
                            problem.d2d_costs[v][cu],
                            CostModel::LinearIncentive { price_per_mnat: 0.0 }
                        );
                    if !free {
                        continue;
                    }
                    let bound = cached[slot][v][requester];
                    let extra = (bound - transfers[cs][v][cu]).min(room).max(0.0);
                    transfers[cs][v][cu] += extra;
                    room -= extra;
                }
            }
        }
    }

    // Tunnels and taut strings per user.
    let (lower, upper) = envelope_points(problem, &cached, &transfers);
    let mut mbs_rates = vec![vec![0.0; users]; n];
    let mut objective = 0.0;
    for u in 0..users {
        let mut lo = vec![0.0];
        lo.extend(lower[u].iter().map(|v| v.max(0.0)));
        for i in 1..lo.len() {
            if lo[i] < lo[i - 1] {
                lo[i] = lo[i - 1];
            }
        }
        let mut hi = vec![problem.capacities[u]; n + 1];
        for (i, &v) in upper[u].iter().enumerate() {
            hi[i + 1] = v;
        }
        // A departure is monotone, so future ceilings bind earlier slots.
        for i in (0..n).rev() {
            if hi[i] > hi[i + 1] {
                hi[i] = hi[i + 1];
            }
        }
        for i in 0..=n {
            if hi[i] < lo[i] {
                hi[i] = lo[i]; // float dust from the repairs
            }
        }
        let lower_curve = CumulativeCurve::new(lo, ts).expect("monotone lower envelope");
        let upper_curve = CumulativeCurve::new(hi, ts).expect("monotone upper envelope");
        let pulled =
            envelope::taut_string(&lower_curve, &upper_curve).expect("repaired tunnel feasible");
        objective +=
            horizon_cost(&problem.mbs_costs[u], &pulled.rates, ts).expect("rates nonnegative");
        for m in 0..n {
            mbs_rates[m][u] = pulled.rates[m];
        }
    }
    for m in 0..n {
        for u in 0..users {
            for v in 0..users {
                if u != v && transfers[m][u][v] > 0.0 {
                    let rate = transfers[m][u][v] / ts;
                    objective +=
                        ts * problem.d2d_costs[u][v].eval(rate).expect("rate nonnegative");
                }
            }
        }
    }

    D2dSchedule {
        mbs_rates,
        d2d_data: transfers,
        cached,
        objective,
        feasible: true,
        certificate: Certificate {
            dual_bound: f64::NEG_INFINITY,
            gap: f64::INFINITY,
            iterations: 0,
            converged: false,
        },
    }
}

/// Coordinate descent over the caching amounts, evaluating the true
/// objective through the repair pipeline. Moves come in two granularities:
/// a whole holding segment of one user at a level, and a single position.
/// Only improving moves are kept, so the incumbent can only get better.
fn polish_point(
    problem: &D2dProblem,
    cached: &mut Vec<Vec<Vec<f64>>>,
    transfers: &[Vec<Vec<f64>>],
    incumbent: &mut D2dSchedule,
) {
    let users = problem.num_users();
    let phi = 0.618_033_988_749_894_9;
    for _round in 0..4 {
        let before = incumbent.objective;
        // Coupled scale knobs first: shrinking or growing one user's whole
        // holding pattern (or everyone's) captures reallocation moves that
        // no single segment change can express.
        for knob_user in (0..users).map(Some).chain([None]) {
            let saved = cached.clone();
            let mut lo = 0.25f64;
            let mut hi = 1.25f64;
            let mut best_scale: Option<f64> = None;
            let mut best_val = incumbent.objective;
            for _ in 0..14 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                let mut eval_at = |s: f64| -> f64 {
                    for (m, slot) in cached.iter_mut().enumerate() {
                        for (u, row) in slot.iter_mut().enumerate() {
                            if knob_user.is_none() || knob_user == Some(u) {
                                for (v, q) in row.iter_mut().enumerate() {
                                    *q = saved[m][u][v] * s;
                                }
                            }
                        }
                    }
                    let cand = schedule_from_point(problem, cached, transfers);
                    if cand.objective < best_val {
                        best_val = cand.objective;
                        best_scale = Some(s);
                    }
                    cand.objective
                };
                let fa = eval_at(a);
                let fb = eval_at(b);
                if fa <= fb {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            match best_scale {
                Some(s) => {
                    for (m, slot) in cached.iter_mut().enumerate() {
                        for (u, row) in slot.iter_mut().enumerate() {
                            if knob_user.is_none() || knob_user == Some(u) {
                                for (v, q) in row.iter_mut().enumerate() {
                                    *q = saved[m][u][v] * s;
                                }
                            }
                        }
                    }
                    *incumbent = schedule_from_point(problem, cached, transfers);
                }
                None => *cached = saved,
            }
        }
        for chain in &problem.chains {
            let k = chain.spine.len();
            if k < 2 {
                continue;
            }
            for u in 0..users {
                // Holding segments of this user: from each of its reset
                // positions (or position 0 for the first requester) to the
                // position before the next reset.
                let mut starts: Vec<usize> = (0..k)
                    .filter(|&pos| chain.spine[pos].1 == u)
                    .collect();
                if starts.is_empty() {
                    continue;
                }
                starts.dedup();
                for (si, &start) in starts.iter().enumerate() {
                    let end = if si + 1 < starts.len() { starts[si + 1] - 1 } else { k - 1 };
                    let positions: Vec<(usize, usize)> =
                        (start..=end).map(|pos| chain.spine[pos]).collect();
                    if positions.iter().all(|&(_, _)| chain.children.is_empty()) {
                        continue;
                    }
                    // Segment-level move: hold one level through the span.
                    let mut lo = 0.0;
                    let mut hi = chain.length;
                    let saved: Vec<f64> =
                        positions.iter().map(|&(s, r)| cached[s][u][r]).collect();
                    let mut best_val = incumbent.objective;
                    let mut best_level: Option<f64> = None;
                    for _ in 0..20 {
                        let a = hi - phi * (hi - lo);
                        let b = lo + phi * (hi - lo);
                        let mut eval_at = |level: f64| -> f64 {
                            for &(s, r) in &positions {
                                cached[s][u][r] = level;
                            }
                            let cand = schedule_from_point(problem, cached, transfers);
                            if cand.objective < best_val {
                                best_val = cand.objective;
                                best_level = Some(level);
                            }
                            cand.objective
                        };
                        let fa = eval_at(a);
                        let fb = eval_at(b);
                        if fa <= fb {
                            hi = b;
                        } else {
                            lo = a;
                        }
                        if hi - lo <= 1e-6 * chain.length.max(1.0) {
                            break;
                        }
                    }
                    match best_level {
                        Some(level) => {
                            for &(s, r) in &positions {
                                cached[s][u][r] = level;
                            }
                            *incumbent = schedule_from_point(problem, cached, transfers);
                        }
                        None => {
                            for (&(s, r), &v) in positions.iter().zip(&saved) {
                                cached[s][u][r] = v;
                            }
                        }
                    }
                    // Per-position refinement along the segment.
                    for &(s, r) in &positions {
                        let saved_q = cached[s][u][r];
                        let mut lo = 0.0;
                        let mut hi = chain.length;
                        let mut best_val = incumbent.objective;
                        let mut best_q: Option<f64> = None;
                        for _ in 0..16 {
                            let a = hi - phi * (hi - lo);
                            let b = lo + phi * (hi - lo);
                            let mut eval_at = |q: f64| -> f64 {
                                cached[s][u][r] = q;
                                let cand = schedule_from_point(problem, cached, transfers);
                                if cand.objective < best_val {
                                    best_val = cand.objective;
                                    best_q = Some(q);
                                }
                                cand.objective
                            };
                            let fa = eval_at(a);
                            let fb = eval_at(b);
                            if fa <= fb {
                                hi = b;
                            } else {
                                lo = a;
                            }
                            if hi - lo <= 1e-6 * chain.length.max(1.0) {
                                break;
                            }
                        }
                        match best_q {
                            Some(q) => {
                                cached[s][u][r] = q;
                                *incumbent = schedule_from_point(problem, cached, transfers);
                            }
                            None => cached[s][u][r] = saved_q,
                        }
                    }
                }
            }
        }
        if before - incumbent.objective <= 1e-7 * before.abs().max(1.0) {
            break;
        }
    }
}

fn mean3(sum: &[Vec<Vec<f64>>], count: f64) -> Vec<Vec<Vec<f64>>> {
    sum.iter()
        .map(|slot| slot.iter().map(|row| row.iter().map(|v| v / count).collect()).collect())
        .collect()
}

fn diff3(sum: &[Vec<Vec<f64>>], snap: &[Vec<Vec<f64>>], count: f64) -> Vec<Vec<Vec<f64>>> {
    sum.iter()
        .zip(snap)
        .map(|(srow, prow)| {
            srow.iter()
                .zip(prow)
                .map(|(s, p)| s.iter().zip(p).map(|(a, b)| (a - b) / count).collect())
                .collect()
        })
        .collect()
}

/// Schedule the given caching/transfer point through the repair pipeline
/// (diagnostics and external warm starts; no certificate attached).
pub fn solve_from_candidate(
    problem: &D2dProblem,
    cached: &[Vec<Vec<f64>>],
    transfers: &[Vec<Vec<f64>>],
) -> D2dSchedule {
    schedule_from_point(problem, cached, transfers)
}

/// Solve the distributed caching program by dual decomposition.
/// Deterministic; returns the best recovered feasible schedule with its
/// duality certificate (`converged == false` when the budget ran out).
pub fn solve(problem: &D2dProblem, opts: &SolveOptions) -> D2dSchedule {
    let n = problem.num_slots();
    let users = problem.num_users();
    let ts = problem.slot_seconds;

    let zero = zeros3(n, users);
    let mut best = schedule_from_point(problem, &zero, &zero);
    // Structured warm starts: hold everything (the repair scales each user
    // into its capacity) and hold half; polishing the best of them seeds
    // the search near greedy-caching solutions.
    for fraction in [1.0, 0.5] {
        let mut full = zeros3(n, users);
        for chain in &problem.chains {
            for pos in 0..chain.spine.len() {
                let (slot, requester) = chain.spine[pos];
                for u in 0..users {
                    if pos > 0 || u == requester {
                        full[slot][u][requester] = fraction * chain.length;
                    }
                }
            }
        }
        let cand = schedule_from_point(problem, &full, &full);
        if cand.objective < best.objective {
            best = cand;
        }
    }

    let total_demand: f64 = problem.demand.iter().flatten().sum::<f64>() * ts;
    if total_demand <= 0.0 || problem.chains.iter().all(|c| c.children.iter().all(Vec::is_empty))
    {
        // Nothing is ever re-requested: no caching or transfer variable can
        // relax any envelope, so per-user pre-downloading through the
        // constant-gap tunnel is exactly optimal.
        best.certificate =
            Certificate { dual_bound: best.objective, gap: 0.0, iterations: 0, converged: true };
        return best;
    }

    let peak =
        (0..n).map(|m| problem.demand[m].iter().sum::<f64>() * ts).fold(0.0f64, f64::max);
    let step0 = opts.step0.unwrap_or(if peak > 0.0 { 1.0 / peak } else { 1.0 });

    // Warm-start the multipliers from the rate stationarity of the seed
    // schedule: its marginal prices are the right order of magnitude, which
    // saves the long climb from zero.
    let mut duals =
        DualVars { cache: vec![vec![0.0; users]; n], demand: vec![vec![0.0; users]; n] };
    for u in 0..users {
        let cost = &problem.mbs_costs[u];
        let top = cost.marginal(0.0).unwrap_or(0.0);
        let mut tail_next: f64 = 0.0;
        for m in (0..n).rev() {
            let r = best.mbs_rates[m][u];
            let v = if r > 1e-9 {
                cost.marginal(r).unwrap_or(top)
            } else {
                tail_next.min(top)
            };
            let delta = v - tail_next;
            duals.demand[m][u] = delta.max(0.0);
            duals.cache[m][u] = (-delta).max(0.0);
            tail_next = v;
        }
    }
    let mut best_dual = f64::NEG_INFINITY;
    let mut best_duals: Option<DualVars> = None;
    let mut cached_sum = zeros3(n, users);
    let mut transfers_sum = zeros3(n, users);
    // Doubling snapshots give a suffix average (the last half of the
    // iterates), which settles faster when the inner corners oscillate.
    let mut cached_snap = zeros3(n, users);
    let mut transfers_snap = zeros3(n, users);
    let mut snap_at = 0usize;
    let mut iteration = 0usize;
    let mut schedule = opts.schedule;
    // The chain-driven primal locks in early here, so the dual polish can
    // start much sooner than in the single-cache solver. The last part of
    // the budget is reserved for restarted averaging around the best
    // multipliers, which settles degenerate primals.
    let polish_at = opts.polish_at((opts.max_iters / 20).max(opts.recover_every));
    let main_budget = (opts.max_iters * 3) / 5;
    // Hand the remaining budget to the restart phase once the gap stops
    // moving; it resolves plateaus that more main-loop iterations will not.
    let mut stalled = 0usize;
    let mut last_gap = f64::INFINITY;

    // Linearization point for non-linear D2D costs; refreshed at every
    // recovery from the running averages. Linear costs are exact.
    let mut prices: Vec<Vec<Vec<(f64, f64)>>> = (0..n)
        .map(|m| {
            let _ = m;
            (0..users)
                .map(|u| {
                    (0..users)
                        .map(|v| transfer_price(&problem.d2d_costs[u][v], 0.0, ts))
                        .collect()
                })
                .collect()
        })
        .collect();
    let linear_only = problem
        .d2d_costs
        .iter()
        .flatten()
        .all(|c| matches!(c, CostModel::Traffic | CostModel::LinearIncentive { .. }));

    while iteration < main_budget {
        if iteration == polish_at && polish_at > 0 {
            schedule = StepSchedule::Polyak;
        }
        let inner = inner_solution(problem, &duals, &prices, 0.0);
        iteration += 1;

        // Residuals of the relaxed cumulative constraints.
        let (lower, upper) = envelope_points(problem, &inner.cached, &inner.transfers);
        let mut norm = 0.0;
        let mut resid_cache = vec![vec![0.0; users]; n];
        let mut resid_demand = vec![vec![0.0; users]; n];
        for u in 0..users {
            let mut cum = 0.0;
            for m in 0..n {
                cum += ts * inner.rates[m][u];
                let over = cum - upper[u][m];
                let under = lower[u][m] - cum;
                resid_cache[m][u] = over;
                resid_demand[m][u] = under;
                norm += over * over + under * under;
            }
        }
        let step = match schedule {
            StepSchedule::InvSqrt => step0 / (iteration as f64).sqrt(),
            StepSchedule::Polyak => {
                let over = (best.objective - inner.dual_value).max(1e-12);
                over / norm.max(1e-12)
            }
        };
        for m in 0..n {
            for u in 0..users {
                duals.cache[m][u] = (duals.cache[m][u] + step * resid_cache[m][u]).max(0.0);
                duals.demand[m][u] = (duals.demand[m][u] + step * resid_demand[m][u]).max(0.0);
            }
        }
        if inner.dual_value > best_dual {
            best_dual = inner.dual_value;
            best_duals = Some(DualVars {
                cache: duals.cache.clone(),
                demand: duals.demand.clone(),
            });
        }
        for m in 0..n {
            for u in 0..users {
                for v in 0..users {
                    cached_sum[m][u][v] += inner.cached[m][u][v];
                    transfers_sum[m][u][v] += inner.transfers[m][u][v];
                }
            }
        }

        if iteration % opts.recover_every == 0 || iteration == opts.max_iters {
            let count = iteration as f64;
            let mean_cached = mean3(&cached_sum, count);
            let mean_transfers = mean3(&transfers_sum, count);
            let suffix = (iteration - snap_at).max(1) as f64;
            let suffix_cached = diff3(&cached_sum, &cached_snap, suffix);
            let suffix_transfers = diff3(&transfers_sum, &transfers_snap, suffix);
            for cand in [
                schedule_from_point(problem, &mean_cached, &mean_transfers),
                schedule_from_point(problem, &suffix_cached, &suffix_transfers),
                schedule_from_point(problem, &inner.cached, &inner.transfers),
            ] {
                if cand.objective < best.objective {
                    best = cand;
                }
            }
            if iteration >= 2 * snap_at.max(opts.recover_every) {
                cached_snap = cached_sum.clone();
                transfers_snap = transfers_sum.clone();
                snap_at = iteration;
            }
            // Sharpen the incumbent occasionally; polishing is expensive
            // and matters mostly once the dual has settled.
            let recovery_index = iteration / opts.recover_every;
            if recovery_index % 40 == 0 || iteration == opts.max_iters {
                let mut point = best.cached.clone();
                polish_point(problem, &mut point, &best.d2d_data.clone(), &mut best);
            }
            if !linear_only {
                for m in 0..n {
                    for u in 0..users {
                        for v in 0..users {
                            if u != v {
                                prices[m][u][v] = transfer_price(
                                    &problem.d2d_costs[u][v],
                                    mean_transfers[m][u][v],
                                    ts,
                                );
                            }
                        }
                    }
                }
            }
            let gap = (best.objective - best_dual).max(0.0);
            if gap <= opts.tol * best.objective.abs().max(1.0) {
                break;
            }
            if gap >= 0.98 * last_gap {
                stalled += 1;
            } else {
                stalled = 0;
            }
            last_gap = last_gap.min(gap);
            if stalled >= 20 && iteration > polish_at {
                break;
            }
        }
    }

    // If the gap is still open, average a fresh window around the best
    // multipliers with small diminishing steps: near-stationary multipliers
    // mix the inner corners into a sharper primal.
    if (best.objective - best_dual).max(0.0) > opts.tol * best.objective.abs().max(1.0) {
        if let Some(start) = best_duals {
            let mut duals = start;
            let mut cached_sum = zeros3(n, users);
            let mut transfers_sum = zeros3(n, users);
            let extra = opts.max_iters.saturating_sub(iteration).max(500);
            for k in 1..=extra {
                let inner = inner_solution(problem, &duals, &prices, 0.0);
                iteration += 1;
                let (lower, upper) = envelope_points(problem, &inner.cached, &inner.transfers);
                let step = step0 / ((opts.max_iters + k) as f64).sqrt();
                for u in 0..users {
                    let mut cum = 0.0;
                    for m in 0..n {
                        cum += ts * inner.rates[m][u];
                        duals.cache[m][u] =
                            (duals.cache[m][u] + step * (cum - upper[u][m])).max(0.0);
                        duals.demand[m][u] =
                            (duals.demand[m][u] + step * (lower[u][m] - cum)).max(0.0);
                    }
                }
                if inner.dual_value > best_dual {
                    best_dual = inner.dual_value;
                }
                for m in 0..n {
                    for u in 0..users {
                        for v in 0..users {
                            cached_sum[m][u][v] += inner.cached[m][u][v];
                            transfers_sum[m][u][v] += inner.transfers[m][u][v];
                        }
                    }
                }
                if k % opts.recover_every == 0 || k == extra {
                    let mean_cached = mean3(&cached_sum, k as f64);
                    let mean_transfers = mean3(&transfers_sum, k as f64);
                    let cand = schedule_from_point(problem, &mean_cached, &mean_transfers);
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
            let mut point = best.cached.clone();
            polish_point(problem, &mut point, &best.d2d_data.clone(), &mut best);
        }
    }

    let bound = if best_dual.is_finite() { best_dual.min(best.objective) } else { best.objective };
    best.certificate = Certificate {
        dual_bound: bound,
        gap: (best.objective - bound).max(0.0),
        iterations: iteration,
        converged: (best.objective - bound).max(0.0) <= opts.tol * best.objective.abs().max(1.0),
    };
    best
}

/// Primal feasibility, fitted-dual stationarity, and complementary-slackness
/// residuals of a schedule, all normalized by the demand scale.
#[derive(Debug, Clone)]
pub struct KktReport {
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.primal_residual.max(self.dual_residual).max(self.complementarity)
    }
}

/// Fit multipliers to a schedule from the rate stationarity conditions and
/// report how far the point is from the optimality system.
pub fn check_kkt(problem: &D2dProblem, schedule: &D2dSchedule) -> KktReport {
    let n = problem.num_slots();
    let users = problem.num_users();
    let ts = problem.slot_seconds;
    let scale = problem.demand.iter().flatten().fold(0.0f64, |a, &b| a.max(b * ts)).max(1.0);

    let mut primal = 0.0f64;
    let (lower, upper) = envelope_points(problem, &schedule.cached, &schedule.d2d_data);
    for u in 0..users {
        let mut cum = 0.0;
        for m in 0..n {
            cum += ts * schedule.mbs_rates[m][u];
            primal = primal.max(lower[u][m] - cum).max(cum - upper[u][m]);
        }
    }
    for m in 0..n {
        for v in 0..users {
            let mut total = 0.0;
            for u in 0..users {
                total += schedule.cached[m][u][v];
                primal = primal.max(-schedule.cached[m][u][v]).max(-schedule.d2d_data[m][u][v]);
            }
            primal = primal.max(total - problem.request_data(m, v));
        }
        for u in 0..users {
            primal = primal.max(-schedule.mbs_rates[m][u] * ts);
        }
    }
    for chain in &problem.chains {
        for pos in 0..chain.spine.len() {
            let (slot, requester) = chain.spine[pos];
            for u in 0..users {
                let held = schedule.cached[slot][u][requester];
                let bound = if u == requester {
                    chain.length
                } else if pos == 0 {
                    0.0
                } else {
                    let (ps, pr) = chain.spine[pos - 1];
                    schedule.cached[ps][u][pr]
                };
                primal = primal.max(held - bound);
            }
            for &(cs, cu) in &chain.children[pos] {
                for u in 0..users {
                    primal = primal
                        .max(schedule.d2d_data[cs][u][cu] - schedule.cached[slot][u][requester]);
                }
            }
        }
    }

    // Stationarity and complementarity via the Lagrangian gap: run the
    // solver's own two-phase dual ascent with the schedule's objective as
    // the Polyak target. At a saddle point the best dual value meets the
    // objective; the remaining gap is the stationarity residual.
    let prices: Vec<Vec<Vec<(f64, f64)>>> = (0..n)
        .map(|m| {
            (0..users)
                .map(|u| {
                    (0..users)
                        .map(|v| {
                            transfer_price(
                                &problem.d2d_costs[u][v],
                                schedule.d2d_data[m][u][v],
                                ts,
                            )
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut duals =
        DualVars { cache: vec![vec![0.0; users]; n], demand: vec![vec![0.0; users]; n] };
    let peak = (0..n)
        .map(|m| problem.demand[m].iter().sum::<f64>() * ts)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let step0 = 1.0 / peak;
    let mut best_dual = f64::NEG_INFINITY;
    let mut best_duals = (duals.cache.clone(), duals.demand.clone());
    let total_iters = 40_000usize;
    for k in 1..=total_iters {
        let inner = inner_solution(problem, &duals, &prices, 0.0);
        if inner.dual_value > best_dual {
            best_dual = inner.dual_value;
            best_duals = (duals.cache.clone(), duals.demand.clone());
        }
        let (lower_i, upper_i) = envelope_points(problem, &inner.cached, &inner.transfers);
        let mut norm = 0.0;
        for u in 0..users {
            let mut cum = 0.0;
            for m in 0..n {
                cum += ts * inner.rates[m][u];
                norm += (cum - upper_i[u][m]).powi(2) + (lower_i[u][m] - cum).powi(2);
            }
        }
        let step = if k <= total_iters / 4 {
            step0 / (k as f64).sqrt()
        } else {
            (schedule.objective - inner.dual_value).max(1e-12) / norm.max(1e-12)
        };
        for u in 0..users {
            let mut cum = 0.0;
            for m in 0..n {
                cum += ts * inner.rates[m][u];
                duals.cache[m][u] = (duals.cache[m][u] + step * (cum - upper_i[u][m])).max(0.0);
                duals.demand[m][u] =
                    (duals.demand[m][u] + step * (lower_i[u][m] - cum)).max(0.0);
            }
        }
    }
    // The strongest available lower bound: the solver's own certificate.
    let reference = solve(
        problem,
        &SolveOptions { tol: 1e-7, max_iters: 200_000, ..SolveOptions::default() },
    );
    let bound = best_dual.max(reference.certificate.dual_bound);
    let dual_res = (schedule.objective - bound).max(0.0) / schedule.objective.abs().max(scale);

    // Complementary slackness at the best multipliers found.
    let mut comp = 0.0f64;
    for u in 0..users {
        let mut cum = 0.0;
        for m in 0..n {
            cum += ts * schedule.mbs_rates[m][u];
            let demand_slack = (cum - lower[u][m]).max(0.0);
            let cache_slack = (upper[u][m] - cum).max(0.0);
            comp = comp
                .max(best_duals.1[m][u] * demand_slack / scale)
                .max(best_duals.0[m][u] * cache_slack / scale);
        }
    }

    KktReport { primal_residual: primal / scale, dual_residual: dual_res, complementarity: comp }
}

/// Operator-side money flows of a schedule.
#[derive(Debug, Clone, Copy)]
pub struct Economics {
    /// Electricity bill of the MBS over the horizon.
    pub electricity: f64,
    /// Incentives paid for off-diagonal D2D transfers.
    pub incentives: f64,
    pub total: f64,
}

/// Electricity (at `price_per_kwh`, with eval power units worth
/// `watts_per_power_unit` watts) plus incentives (`incentive_per_mnat` per
/// off-diagonal Mnat). The MBS links must be energy-kind models.
pub fn economics(
    problem: &D2dProblem,
    schedule: &D2dSchedule,
    price_per_kwh: f64,
    incentive_per_mnat: f64,
    watts_per_power_unit: f64,
) -> Result<Economics, D2dError> {
    let ts = problem.slot_seconds;
    let mut energy_units = 0.0;
    for u in 0..problem.num_users() {
        let (bandwidth, gain) = match &problem.mbs_costs[u] {
            CostModel::Energy { bandwidth, channel_gain, .. } => (*bandwidth, *channel_gain),
            CostModel::EnergyCost { bandwidth, channel_gain, .. } => (*bandwidth, *channel_gain),
            other => {
                return Err(D2dError::InvalidArgument(format!(
                    "economics needs energy-kind MBS costs, found {other:?}"
                )))
            }
        };
        let bare = CostModel::Energy {
            bandwidth,
            channel_gain: gain,
            static_power: 0.0,
            side_power: 0.0,
        };
        for m in 0..problem.num_slots() {
            energy_units += ts * bare.eval(schedule.mbs_rates[m][u]).expect("rates nonnegative");
        }
    }
    let electricity =
        price_per_kwh * energy_units * watts_per_power_unit / crate::cost::JOULES_PER_KWH;
    let incentives = incentive_per_mnat * schedule.d2d_volume();
    Ok(Economics { electricity, incentives, total: electricity + incentives })
}
