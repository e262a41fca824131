//! Cumulative-curve calculus: feasibility tunnels and the taut string.
//!
//! A schedule is summarized by its departure curve, the cumulative data sent
//! by each slot boundary. Demand satisfaction puts a minimum curve under it
//! and finite cache space puts a maximum curve over it; both depend on the
//! caching amounts. The cost-optimal departure through the resulting tunnel
//! is the taut string tied at the origin and at the minimum curve's end: it
//! simultaneously minimizes every convex cost of the slot rates.

use crate::cost::{CostError, CostModel};
use crate::demand::DemandView;
use std::fmt;

/// Absolute slack (Mnats) allowed in tunnel and box comparisons.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug)]
pub enum EnvelopeError {
    InvalidArgument(String),
    /// The tunnel crosses: the lower envelope exceeds the upper one at the
    /// reported slot boundary.
    Infeasible { slot: usize },
}

impl fmt::Display for EnvelopeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvelopeError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            EnvelopeError::Infeasible { slot } => {
                write!(f, "tunnel crosses at slot boundary {slot}")
            }
        }
    }
}

impl std::error::Error for EnvelopeError {}

/// Nondecreasing cumulative data (Mnats) at slot boundaries `0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeCurve {
    values: Vec<f64>,
    slot_seconds: f64,
}

impl CumulativeCurve {
    pub fn new(values: Vec<f64>, slot_seconds: f64) -> Result<Self, EnvelopeError> {
        if values.len() < 2 {
            return Err(EnvelopeError::InvalidArgument(
                "a curve needs at least one slot".into(),
            ));
        }
        if !(slot_seconds.is_finite() && slot_seconds > 0.0) {
            return Err(EnvelopeError::InvalidArgument(format!(
                "slot duration {slot_seconds} must be positive"
            )));
        }
        for w in values.windows(2) {
            if !w[1].is_finite() || w[1] < w[0] - FEASIBILITY_TOL {
                return Err(EnvelopeError::InvalidArgument(format!(
                    "curve decreases from {} to {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(CumulativeCurve { values, slot_seconds })
    }

    pub fn num_slots(&self) -> usize {
        self.values.len() - 1
    }

    pub fn slot_seconds(&self) -> f64 {
        self.slot_seconds
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, boundary: usize) -> f64 {
        self.values[boundary]
    }

    pub fn end(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Per-slot rates implied by the curve increments (Mnats/s).
    pub fn rates(&self) -> Vec<f64> {
        self.values
            .windows(2)
            .map(|w| ((w[1] - w[0]) / self.slot_seconds).max(0.0))
            .collect()
    }
}

fn check_cache_box(view: &DemandView, cached: &[Vec<f64>]) -> Result<(), EnvelopeError> {
    if cached.len() != view.num_slots() {
        return Err(EnvelopeError::InvalidArgument(format!(
            "cached amounts have {} slots, view has {}",
            cached.len(),
            view.num_slots()
        )));
    }
    for (n, row) in cached.iter().enumerate() {
        if row.len() != view.num_users() {
            return Err(EnvelopeError::InvalidArgument(format!(
                "cached row {n} has {} users, view has {}",
                row.len(),
                view.num_users()
            )));
        }
        for (u, &q) in row.iter().enumerate() {
            let cap = view.cache_box(n, u);
            if !q.is_finite() || q < -FEASIBILITY_TOL || q > cap + FEASIBILITY_TOL {
                return Err(EnvelopeError::InvalidArgument(format!(
                    "cached amount {q} at slot {n}, user {u} outside [0, {cap}]"
                )));
            }
        }
    }
    Ok(())
}

/// Minimum data the station must have sent by each boundary to satisfy the
/// deduplicated demand, given the caching amounts `cached[n][u]` (Mnats):
/// each slot's requirement is the served data minus what was cached at the
/// previous request of the same file.
pub fn min_departure(
    view: &DemandView,
    cached: &[Vec<f64>],
) -> Result<CumulativeCurve, EnvelopeError> {
    check_cache_box(view, cached)?;
    let mut values = Vec::with_capacity(view.num_slots() + 1);
    values.push(0.0);
    let mut acc = 0.0;
    for n in 0..view.num_slots() {
        for u in 0..view.num_users() {
            let reused = match view.prev[n][u] {
                Some((pn, pu)) => cached[pn][pu],
                None => 0.0,
            };
            acc += (view.sbs_rates[n][u] * view.slot_seconds - reused).max(0.0);
        }
        values.push(acc);
    }
    CumulativeCurve::new(values, view.slot_seconds)
}

/// Maximum data the station may have sent by each boundary without
/// overflowing a cache of the given capacity (Mnats): the capacity plus all
/// data already drained to users, net of what stays cached.
pub fn max_departure(
    view: &DemandView,
    cached: &[Vec<f64>],
    capacity: f64,
) -> Result<CumulativeCurve, EnvelopeError> {
    if !(capacity.is_finite() && capacity >= 0.0) {
        return Err(EnvelopeError::InvalidArgument(format!(
            "capacity {capacity} must be nonnegative"
        )));
    }
    check_cache_box(view, cached)?;
    let mut values = Vec::with_capacity(view.num_slots() + 1);
    values.push(capacity);
    let mut acc = capacity;
    for n in 0..view.num_slots() {
        for u in 0..view.num_users() {
            acc += (view.sbs_rates[n][u] * view.slot_seconds - cached[n][u]).max(0.0);
        }
        values.push(acc);
    }
    CumulativeCurve::new(values, view.slot_seconds)
}

/// A departure curve with its per-slot rates.
#[derive(Debug, Clone)]
pub struct TautString {
    pub departure: CumulativeCurve,
    pub rates: Vec<f64>,
}

impl TautString {
    /// Total cost of the rate schedule over the horizon.
    pub fn cost(&self, model: &CostModel) -> Result<f64, CostError> {
        horizon_cost(model, &self.rates, self.departure.slot_seconds())
    }
}

/// Sum of `slot_seconds * model(rate)` over the horizon.
pub fn horizon_cost(
    model: &CostModel,
    rates: &[f64],
    slot_seconds: f64,
) -> Result<f64, CostError> {
    let mut total = 0.0;
    for &r in rates {
        total += slot_seconds * model.eval(r.max(0.0))?;
    }
    Ok(total)
}

/// The taut string through the tunnel `[lower, upper]`, tied at `(0, 0)` and
/// at the lower curve's endpoint.
///
/// The result departs between the envelopes, and among all such curves it
/// minimizes `sum slot_seconds * g(rate)` for every convex `g`
/// simultaneously. Rate changes happen only where the string touches an
/// envelope: increases at upper contacts, decreases at lower contacts.
pub fn taut_string(
    lower: &CumulativeCurve,
    upper: &CumulativeCurve,
) -> Result<TautString, EnvelopeError> {
    if lower.values.len() != upper.values.len() {
        return Err(EnvelopeError::InvalidArgument(format!(
            "envelope lengths differ: {} vs {}",
            lower.values.len(),
            upper.values.len()
        )));
    }
    if lower.value(0).abs() > FEASIBILITY_TOL {
        return Err(EnvelopeError::InvalidArgument(format!(
            "lower envelope starts at {}, expected 0",
            lower.value(0)
        )));
    }
    if upper.value(0) < -FEASIBILITY_TOL {
        return Err(EnvelopeError::InvalidArgument(format!(
            "upper envelope starts at {}, expected >= 0",
            upper.value(0)
        )));
    }
    for (i, (&lo, &hi)) in lower.values.iter().zip(&upper.values).enumerate() {
        if lo > hi + FEASIBILITY_TOL {
            return Err(EnvelopeError::Infeasible { slot: i });
        }
    }

    let n = lower.num_slots();
    let mut lo = lower.values.clone();
    let mut hi: Vec<f64> = upper.values.iter().zip(&lo).map(|(&h, &l)| h.max(l)).collect();
    // Tie both string ends: start at the origin, end on the lower envelope.
    lo[0] = 0.0;
    hi[0] = 0.0;
    hi[n] = lo[n];

    let vertices = pull_string(&lo, &hi);

    // Expand the polyline to per-boundary values.
    let mut values = vec![0.0; n + 1];
    for pair in vertices.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        let slope = (y1 - y0) / ((x1 - x0) as f64);
        for x in x0..=x1 {
            values[x] = y0 + slope * ((x - x0) as f64);
        }
    }
    let departure = CumulativeCurve::new(values, lower.slot_seconds)?;
    let rates = departure.rates();
    Ok(TautString { departure, rates })
}

/// Funnel walk for the shortest path through a tunnel of vertical gates at
/// integer abscissas. `lo[0] == hi[0]` and `lo[n] == hi[n]` pin the ends.
/// Restarts the scan from each emitted bend; worst case O(N * bends).
fn pull_string(lo: &[f64], hi: &[f64]) -> Vec<(usize, f64)> {
    let n = lo.len() - 1;
    let mut vertices = vec![(0usize, lo[0])];
    let (mut ax, mut ay) = (0usize, lo[0]);
    while ax < n {
        // Tightest tangents from the anchor: the least upper slope and the
        // greatest lower slope seen so far, with the points realizing them.
        let mut up_slope = f64::INFINITY;
        let mut up_at = ax;
        let mut low_slope = f64::NEG_INFINITY;
        let mut low_at = ax;
        let mut bent = false;
        for i in (ax + 1)..=n {
            let dx = (i - ax) as f64;
            let to_upper = (hi[i] - ay) / dx;
            let to_lower = (lo[i] - ay) / dx;
            if to_lower > up_slope {
                // The floor rises above the ceiling tangent: bend down at
                // the ceiling contact and continue from there.
                (ax, ay) = (up_at, hi[up_at]);
                vertices.push((ax, ay));
                bent = true;
                break;
            }
            if to_upper < low_slope {
                // The ceiling dips below the floor tangent: bend up at the
                // floor contact.
                (ax, ay) = (low_at, lo[low_at]);
                vertices.push((ax, ay));
                bent = true;
                break;
            }
            if to_upper < up_slope {
                up_slope = to_upper;
                up_at = i;
            }
            if to_lower > low_slope {
                low_slope = to_lower;
                low_at = i;
            }
        }
        if !bent {
            // The straight run to the tied endpoint fits.
            vertices.push((n, lo[n]));
            (ax, ay) = (n, lo[n]);
        }
        let _ = ay;
    }
    vertices
}
