//! Joint content-caching and transmission scheduling for wireless edge
//! networks.
//!
//! Two architectures are supported. In the first, a cache-equipped small
//! base station (SBS) serves a group of users and downloads content from a
//! macro base station (MBS) over a wireless backhaul. In the second, the
//! user devices themselves cache content and exchange it over
//! device-to-device (D2D) links. In both cases the demand profile over a
//! finite horizon of time slots is known in advance, and the goal is to
//! pick transmission rates and caching amounts that minimize a convex cost
//! (energy, money, bandwidth, or raw traffic) on the backhaul.
//!
//! A cache creates two distinct gains: smoothing the backhaul rate by
//! *pre-downloading* content ahead of its request, and absorbing repeated
//! requests of the same file by *locally retaining* it. The solvers here
//! optimize both jointly:
//!
//! - [`demand`] builds request traces and the per-slot demand quantities
//!   derived from them,
//! - [`cost`] is the family of convex cost-rate functions with exact
//!   marginals and inverse marginals,
//! - [`envelope`] is the cumulative-curve calculus: feasibility tunnels and
//!   the taut string through them,
//! - [`sbs`] solves the single-cache program by dual decomposition with a
//!   projected subgradient and closed-form inner minimizers,
//! - [`d2d`] solves the distributed-cache program with per-user backhaul
//!   links and D2D transfers,
//! - [`baselines`] implements the four comparison policies (no caching,
//!   LRU, pre-download only, local caching only),
//! - [`experiment`] runs seeded Monte-Carlo sweeps and writes CSV results.

pub mod baselines;
pub mod cost;
pub mod d2d;
pub mod demand;
pub mod envelope;
pub mod experiment;
pub mod sbs;

/// Nats per Mnat. Data amounts are megaNats (Mnats) and rates Mnats/s
/// throughout; the conversion to nats happens exactly once, where a
/// physical-unit quantity (Hz, J, $) enters or leaves.
pub const NATS_PER_MNAT: f64 = 1e6;
