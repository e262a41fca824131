//! The four comparison policies: no caching, online LRU, pre-downloading
//! only, and local caching only.

use crate::cost::CostModel;
use crate::demand::DemandView;
use crate::envelope::{self, horizon_cost};
use crate::sbs::{self, SolveOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    /// Serve every deduplicated request straight from the backhaul.
    NoCaching,
    /// Online whole-file cache keeping the most recently requested files.
    Lru,
    /// Pre-download only: the cache smooths rates but never retains served
    /// content (the tunnel keeps a constant gap).
    Pdca,
    /// Local caching only: transmit at the net demand rate, never ahead.
    Lca,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::NoCaching => "no_caching",
            Policy::Lru => "lru",
            Policy::Pdca => "pdca",
            Policy::Lca => "lca",
        }
    }
}

/// Outcome of a baseline policy on one instance.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub policy: Policy,
    /// Backhaul rate per slot (Mnats/s).
    pub rates: Vec<f64>,
    pub objective: f64,
    /// Cache occupancy (Mnats) at each slot boundary, for audit.
    pub cache_occupancy: Vec<f64>,
    /// The per-request caching amounts the policy effectively realized
    /// (populated by the policies that have them); feeding these to the
    /// joint solver as candidates makes its dominance structural.
    pub induced_cached: Option<Vec<Vec<f64>>>,
}

/// Run one policy.
pub fn run(
    policy: Policy,
    view: &DemandView,
    cost: &CostModel,
    capacity: f64,
    opts: &SolveOptions,
) -> BaselineResult {
    match policy {
        Policy::NoCaching => no_caching(view, cost),
        Policy::Lru => lru(view, cost, capacity),
        Policy::Pdca => pdca(view, cost, capacity),
        Policy::Lca => lca(view, cost, capacity, opts),
    }
}

/// Transmit each slot's deduplicated demand as it happens.
pub fn no_caching(view: &DemandView, cost: &CostModel) -> BaselineResult {
    let rates: Vec<f64> =
        (0..view.num_slots()).map(|m| view.slot_data(m) / view.slot_seconds).collect();
    let objective = horizon_cost(cost, &rates, view.slot_seconds).expect("rates nonnegative");
    BaselineResult {
        policy: Policy::NoCaching,
        rates,
        objective,
        cache_occupancy: vec![0.0; view.num_slots()],
        induced_cached: None,
    }
}

/// Online least-recently-used caching of whole files.
///
/// Per slot, each deduplicated request is served from the cache if the whole
/// file is present (free, refreshes recency); otherwise the file is
/// downloaded within the slot and then admitted, evicting least-recently
/// used files that were not touched this slot until it fits. Files larger
/// than the whole cache are never admitted. Recency ties evict the smaller
/// file id first.
pub fn lru(view: &DemandView, cost: &CostModel, capacity: f64) -> BaselineResult {
    struct Entry {
        size: f64,
        last_used: usize,
    }
    let mut cache: std::collections::BTreeMap<u32, Entry> = Default::default();
    let mut occupancy = 0.0;
    let mut rates = Vec::with_capacity(view.num_slots());
    let mut occupancy_trace = Vec::with_capacity(view.num_slots());
    let mut induced = vec![vec![0.0; view.num_users()]; view.num_slots()];

    // Recover file identities from the demand view: requests sharing a
    // chain are the same file, so label chains.
    let labels = chain_labels(view);

    for m in 0..view.num_slots() {
        let mut miss_data = 0.0;
        let mut touched: Vec<u32> = Vec::new();
        for u in 0..view.num_users() {
            if !view.primary[m][u] {
                continue;
            }
            let size = view.sbs_rates[m][u] * view.slot_seconds;
            if size <= 0.0 {
                continue;
            }
            let label = labels[m][u];
            if let Some(entry) = cache.get_mut(&label) {
                // A hit: the previous request of this chain held the file
                // through to now, which is exactly a full cached amount.
                entry.last_used = m;
                touched.push(label);
                if let Some((pn, pu)) = view.prev[m][u] {
                    induced[pn][pu] = size;
                }
                continue;
            }
            miss_data += size;
            if size > capacity {
                continue; // never admitted
            }
            // Evict stale files until the new one fits.
            while occupancy + size > capacity + 1e-12 {
                let victim = cache
                    .iter()
                    .filter(|(id, e)| e.last_used < m && !touched.contains(id))
                    .min_by(|a, b| {
                        (a.1.last_used, a.0).cmp(&(b.1.last_used, b.0))
                    })
                    .map(|(id, _)| *id);
                match victim {
                    Some(id) => {
                        let gone = cache.remove(&id).expect("victim exists");
                        occupancy -= gone.size;
                    }
                    None => break,
                }
            }
            if occupancy + size <= capacity + 1e-12 {
                cache.insert(label, Entry { size, last_used: m });
                occupancy += size;
                touched.push(label);
            }
        }
        rates.push(miss_data / view.slot_seconds);
        occupancy_trace.push(occupancy);
    }
    let objective = horizon_cost(cost, &rates, view.slot_seconds).expect("rates nonnegative");
    BaselineResult {
        policy: Policy::Lru,
        rates,
        objective,
        cache_occupancy: occupancy_trace,
        induced_cached: Some(induced),
    }
}

/// Label each primary request with a file identity by walking the prev
/// chains (requests on one chain share a label).
fn chain_labels(view: &DemandView) -> Vec<Vec<u32>> {
    let mut labels = vec![vec![0u32; view.num_users()]; view.num_slots()];
    let mut next_label = 1u32;
    for m in 0..view.num_slots() {
        for u in 0..view.num_users() {
            if !view.primary[m][u] {
                continue;
            }
            match view.prev[m][u] {
                Some((pn, pu)) => labels[m][u] = labels[pn][pu],
                None => {
                    labels[m][u] = next_label;
                    next_label += 1;
                }
            }
        }
    }
    labels
}

/// Pre-downloading only: taut string through the constant-gap tunnel.
pub fn pdca(view: &DemandView, cost: &CostModel, capacity: f64) -> BaselineResult {
    let zero = vec![vec![0.0; view.num_users()]; view.num_slots()];
    let lower = envelope::min_departure(view, &zero).expect("zero caching is in the box");
    let upper =
        envelope::max_departure(view, &zero, capacity).expect("zero caching is in the box");
    let pulled = envelope::taut_string(&lower, &upper).expect("constant-gap tunnel is feasible");
    let objective =
        horizon_cost(cost, &pulled.rates, view.slot_seconds).expect("rates nonnegative");
    let occupancy = (1..=view.num_slots())
        .map(|m| (pulled.departure.value(m) - lower.value(m)).max(0.0))
        .collect();
    BaselineResult {
        policy: Policy::Pdca,
        rates: pulled.rates,
        objective,
        cache_occupancy: occupancy,
        induced_cached: None,
    }
}

/// Local caching only: the constrained optimum with the departure pinned to
/// the net demand (solved by the pinned-rate dual).
pub fn lca(
    view: &DemandView,
    cost: &CostModel,
    capacity: f64,
    opts: &SolveOptions,
) -> BaselineResult {
    let s = sbs::solve_pinned(view, capacity, cost, opts);
    let mut occupancy = Vec::with_capacity(view.num_slots());
    let mut occ = 0.0;
    for m in 0..view.num_slots() {
        for u in 0..view.num_users() {
            occ += s.cached[m][u];
            if let Some((pn, pu)) = view.prev[m][u] {
                occ -= s.cached[pn][pu];
            }
        }
        occupancy.push(occ);
    }
    BaselineResult {
        policy: Policy::Lca,
        rates: s.rates,
        objective: s.objective,
        cache_occupancy: occupancy,
        induced_cached: Some(s.cached),
    }
}
