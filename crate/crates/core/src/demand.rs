//! Demand traces and the per-slot quantities derived from them.
//!
//! A trace records, for every time slot and user, which file (if any) the
//! user requests. From a trace we derive the per-request demand rates, the
//! deduplicated rates the serving station actually has to provide, and the
//! previous/next-request maps that chain caching decisions across time.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

/// Version tag of the trace JSON format.
pub const TRACE_FORMAT_VERSION: i64 = 1;

/// Errors from trace construction, sampling, and (de)serialization.
#[derive(Debug)]
pub enum DemandError {
    /// A constructor or sampler argument violated its precondition.
    InvalidArgument(String),
    /// A trace file did not match the schema; `key` names the offending field.
    Parse { key: String, message: String },
    /// The trace file carries an unsupported format version.
    VersionMismatch { found: i64 },
    Io(std::io::Error),
}

impl fmt::Display for DemandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DemandError::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            DemandError::Parse { key, message } => write!(f, "parse error at \"{key}\": {message}"),
            DemandError::VersionMismatch { found } => write!(
                f,
                "unsupported trace format version {found} (expected {TRACE_FORMAT_VERSION})"
            ),
            DemandError::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for DemandError {}

impl From<std::io::Error> for DemandError {
    fn from(e: std::io::Error) -> Self {
        DemandError::Io(e)
    }
}

/// The file catalog: lengths (Mnats) and optional request popularity.
///
/// Files are identified by ids `1..=F`; id `0` is the idle pseudo-file of
/// length zero and is represented implicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct FileCatalog {
    lengths: Vec<f64>,
    popularity: Option<Vec<f64>>,
}

impl FileCatalog {
    /// Build a catalog from per-file lengths and an optional popularity
    /// distribution over the files.
    pub fn new(lengths: Vec<f64>, popularity: Option<Vec<f64>>) -> Result<Self, DemandError> {
        if lengths.is_empty() {
            return Err(DemandError::InvalidArgument("catalog has no files".into()));
        }
        for (i, &l) in lengths.iter().enumerate() {
            if !l.is_finite() || l < 0.0 {
                return Err(DemandError::InvalidArgument(format!(
                    "file {} has invalid length {l}",
                    i + 1
                )));
            }
        }
        if let Some(p) = &popularity {
            validate_popularity(p, lengths.len())?;
        }
        Ok(FileCatalog { lengths, popularity })
    }

    /// Build a catalog with Zipf-distributed popularity of the given skew.
    pub fn with_zipf(lengths: Vec<f64>, skew: f64) -> Result<Self, DemandError> {
        let pop = zipf_popularity(lengths.len(), skew)?;
        FileCatalog::new(lengths, Some(pop))
    }

    pub fn num_files(&self) -> usize {
        self.lengths.len()
    }

    /// Length in Mnats of a file id; id 0 (no request) has length 0.
    pub fn length(&self, file: u32) -> f64 {
        if file == 0 {
            0.0
        } else {
            self.lengths[file as usize - 1]
        }
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn popularity(&self) -> Option<&[f64]> {
        self.popularity.as_deref()
    }

    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<f64>() / self.lengths.len() as f64
    }
}

fn validate_popularity(p: &[f64], num_files: usize) -> Result<(), DemandError> {
    if p.len() != num_files {
        return Err(DemandError::InvalidArgument(format!(
            "popularity has {} entries for {num_files} files",
            p.len()
        )));
    }
    let mut sum = 0.0;
    for &x in p {
        if !x.is_finite() || x < 0.0 {
            return Err(DemandError::InvalidArgument(format!(
                "popularity entry {x} is not a probability"
            )));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > 1e-12 {
        return Err(DemandError::InvalidArgument(format!(
            "popularity sums to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Zipf popularity over ranks `1..=num_files`: probability of rank `j` is
/// `j^-skew / sum_q q^-skew`. `skew = 0` is uniform.
pub fn zipf_popularity(num_files: usize, skew: f64) -> Result<Vec<f64>, DemandError> {
    if num_files == 0 {
        return Err(DemandError::InvalidArgument("zero files".into()));
    }
    if !skew.is_finite() {
        return Err(DemandError::InvalidArgument(format!("non-finite skew {skew}")));
    }
    let weights: Vec<f64> = (1..=num_files).map(|j| (j as f64).powf(-skew)).collect();
    let norm: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| w / norm).collect())
}

/// A demand trace: one request (possibly the idle file 0) per slot per user.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandTrace {
    slot_seconds: f64,
    num_users: usize,
    requests: Vec<Vec<u32>>,
    catalog: FileCatalog,
}

impl DemandTrace {
    pub fn new(
        slot_seconds: f64,
        num_users: usize,
        requests: Vec<Vec<u32>>,
        catalog: FileCatalog,
    ) -> Result<Self, DemandError> {
        if !(slot_seconds.is_finite() && slot_seconds > 0.0) {
            return Err(DemandError::InvalidArgument(format!(
                "slot duration {slot_seconds} must be positive"
            )));
        }
        if requests.is_empty() || num_users == 0 {
            return Err(DemandError::InvalidArgument(
                "trace needs at least one slot and one user".into(),
            ));
        }
        for (n, row) in requests.iter().enumerate() {
            if row.len() != num_users {
                return Err(DemandError::InvalidArgument(format!(
                    "slot {n} has {} requests for {num_users} users",
                    row.len()
                )));
            }
            for &id in row {
                if id as usize > catalog.num_files() {
                    return Err(DemandError::InvalidArgument(format!(
                        "request id {id} exceeds catalog size {}",
                        catalog.num_files()
                    )));
                }
            }
        }
        Ok(DemandTrace { slot_seconds, num_users, requests, catalog })
    }

    pub fn num_slots(&self) -> usize {
        self.requests.len()
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn slot_seconds(&self) -> f64 {
        self.slot_seconds
    }

    pub fn request(&self, slot: usize, user: usize) -> u32 {
        self.requests[slot][user]
    }

    pub fn requests(&self) -> &[Vec<u32>] {
        &self.requests
    }

    pub fn catalog(&self) -> &FileCatalog {
        &self.catalog
    }

    /// Restrict the trace to one user's own requests.
    pub fn single_user(&self, user: usize) -> DemandTrace {
        DemandTrace {
            slot_seconds: self.slot_seconds,
            num_users: 1,
            requests: self.requests.iter().map(|row| vec![row[user]]).collect(),
            catalog: self.catalog.clone(),
        }
    }

    /// Split every slot into `factor` equal sub-slots. Each file becomes
    /// `factor` distinct chunks of length `l / factor`, and a request in an
    /// original slot turns into the chunk sequence across its sub-slots, so
    /// demand rates and the reuse structure are unchanged while the slot
    /// grid gets finer.
    pub fn refine(&self, factor: usize) -> DemandTrace {
        assert!(factor >= 1, "refinement factor must be at least 1");
        let mut requests = Vec::with_capacity(self.requests.len() * factor);
        for row in &self.requests {
            for part in 0..factor as u32 {
                requests.push(
                    row.iter()
                        .map(|&f| if f == 0 { 0 } else { (f - 1) * factor as u32 + part + 1 })
                        .collect(),
                );
            }
        }
        let mut lengths = Vec::with_capacity(self.catalog.lengths.len() * factor);
        for l in &self.catalog.lengths {
            for _ in 0..factor {
                lengths.push(l / factor as f64);
            }
        }
        let catalog = FileCatalog { lengths, popularity: None };
        DemandTrace {
            slot_seconds: self.slot_seconds / factor as f64,
            num_users: self.num_users,
            requests,
            catalog,
        }
    }
}

/// Sample a trace: each (slot, user) cell is the idle file with probability
/// `idle_probability`, otherwise an independent draw from the catalog
/// popularity. Deterministic given the seed and dimensions.
pub fn sample_trace(
    catalog: &FileCatalog,
    num_slots: usize,
    num_users: usize,
    slot_seconds: f64,
    seed: u64,
    idle_probability: f64,
) -> Result<DemandTrace, DemandError> {
    if !(0.0..=1.0).contains(&idle_probability) {
        return Err(DemandError::InvalidArgument(format!(
            "idle probability {idle_probability} outside [0, 1]"
        )));
    }
    let pop = catalog.popularity().ok_or_else(|| {
        DemandError::InvalidArgument("catalog has no popularity distribution".into())
    })?;
    let mut cdf = Vec::with_capacity(pop.len());
    let mut acc = 0.0;
    for &p in pop {
        acc += p;
        cdf.push(acc);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests = Vec::with_capacity(num_slots);
    for _ in 0..num_slots {
        let mut row = Vec::with_capacity(num_users);
        for _ in 0..num_users {
            let idle: f64 = rng.gen();
            if idle < idle_probability {
                row.push(0);
            } else {
                let x: f64 = rng.gen();
                let file = cdf.partition_point(|&c| c < x) + 1;
                row.push(file.min(cdf.len()) as u32);
            }
        }
        requests.push(row);
    }
    DemandTrace::new(slot_seconds, num_users, requests, catalog.clone())
}

/// Per-slot demand quantities derived from a trace.
///
/// `demand_rates[n][u]` is the rate (Mnats/s) at which user `u` consumes its
/// slot-`n` request. `primary[n][u]` marks the single per-slot representative
/// of duplicated requests (smallest user index), and `sbs_rates` is the
/// demand the serving station must actually provide: equal to `demand_rates`
/// on primary cells and zero elsewhere. `prev[n][u]` points at the primary
/// cell of the most recent earlier request of the same file (`None` for
/// first requests and non-primary cells), and `next[n][u]` gives the slot of
/// the subsequent request, `None` if there is none.
#[derive(Debug, Clone)]
pub struct DemandView {
    pub slot_seconds: f64,
    pub demand_rates: Vec<Vec<f64>>,
    pub primary: Vec<Vec<bool>>,
    pub sbs_rates: Vec<Vec<f64>>,
    pub prev: Vec<Vec<Option<(usize, usize)>>>,
    pub next: Vec<Vec<Option<usize>>>,
}

impl DemandView {
    pub fn num_slots(&self) -> usize {
        self.demand_rates.len()
    }

    pub fn num_users(&self) -> usize {
        self.demand_rates.first().map_or(0, Vec::len)
    }

    /// Total data the station must serve in slot `n` (Mnats).
    pub fn slot_data(&self, slot: usize) -> f64 {
        self.sbs_rates[slot].iter().sum::<f64>() * self.slot_seconds
    }

    /// Upper box bound on the cached amount for request (n, u), in Mnats.
    pub fn cache_box(&self, slot: usize, user: usize) -> f64 {
        self.sbs_rates[slot][user] * self.slot_seconds
    }
}

/// Previous/next-request maps over the primary (deduplicated) requests.
///
/// For each primary cell, `prev` is the primary cell of the file's most
/// recent request in a strictly earlier slot, and `next` is the slot of the
/// file's subsequent primary request. Non-primary cells get `None` in both.
pub fn prev_next_maps(
    trace: &DemandTrace,
) -> (Vec<Vec<Option<(usize, usize)>>>, Vec<Vec<Option<usize>>>) {
    let n_slots = trace.num_slots();
    let n_users = trace.num_users();
    let primary = primary_marks(trace);
    let mut prev = vec![vec![None; n_users]; n_slots];
    let mut next = vec![vec![None; n_users]; n_slots];
    // last primary occurrence per file id (including the idle file 0)
    let mut last: Vec<Option<(usize, usize)>> = vec![None; trace.catalog().num_files() + 1];
    for n in 0..n_slots {
        for u in 0..n_users {
            if !primary[n][u] {
                continue;
            }
            let f = trace.request(n, u) as usize;
            if let Some((pn, pu)) = last[f] {
                prev[n][u] = Some((pn, pu));
                next[pn][pu] = Some(n);
            }
            last[f] = Some((n, u));
        }
    }
    (prev, next)
}

/// Previous-request map across all users' requests (no deduplication),
/// as needed when every user downloads its own traffic.
///
/// Each requesting cell points at the most recent earlier request of the
/// same file, represented by its smallest-index requester. With
/// `instantaneous` set, same-slot duplicates point at the slot's
/// representative instead of skipping to the previous slot.
pub fn cross_user_prev_map(
    trace: &DemandTrace,
    instantaneous: bool,
) -> Vec<Vec<Option<(usize, usize)>>> {
    let n_slots = trace.num_slots();
    let n_users = trace.num_users();
    let mut prev = vec![vec![None; n_users]; n_slots];
    let mut last: Vec<Option<(usize, usize)>> = vec![None; trace.catalog().num_files() + 1];
    for n in 0..n_slots {
        // representative (smallest user index) per file in this slot
        let mut seen: Vec<Option<usize>> = vec![None; trace.catalog().num_files() + 1];
        for u in 0..n_users {
            let f = trace.request(n, u) as usize;
            if f == 0 {
                continue;
            }
            match seen[f] {
                None => {
                    prev[n][u] = last[f];
                    seen[f] = Some(u);
                }
                Some(rep) => {
                    prev[n][u] = if instantaneous { Some((n, rep)) } else { last[f] };
                }
            }
        }
        for (f, rep) in seen.iter().enumerate() {
            if let Some(u) = rep {
                last[f] = Some((n, *u));
            }
        }
    }
    prev
}

fn primary_marks(trace: &DemandTrace) -> Vec<Vec<bool>> {
    let n_slots = trace.num_slots();
    let n_users = trace.num_users();
    let mut primary = vec![vec![false; n_users]; n_slots];
    for n in 0..n_slots {
        let mut seen = vec![false; trace.catalog().num_files() + 1];
        for u in 0..n_users {
            let f = trace.request(n, u) as usize;
            if !seen[f] {
                seen[f] = true;
                primary[n][u] = true;
            }
        }
    }
    primary
}

/// Derive the demand view (rates, dedup marks, prev/next maps) of a trace.
pub fn build_view(trace: &DemandTrace) -> DemandView {
    let n_slots = trace.num_slots();
    let n_users = trace.num_users();
    let ts = trace.slot_seconds();
    let primary = primary_marks(trace);
    let mut demand_rates = vec![vec![0.0; n_users]; n_slots];
    let mut sbs_rates = vec![vec![0.0; n_users]; n_slots];
    for n in 0..n_slots {
        for u in 0..n_users {
            let rate = trace.catalog().length(trace.request(n, u)) / ts;
            demand_rates[n][u] = rate;
            if primary[n][u] {
                sbs_rates[n][u] = rate;
            }
        }
    }
    let (prev, next) = prev_next_maps(trace);
    DemandView { slot_seconds: ts, demand_rates, primary, sbs_rates, prev, next }
}

/// Write a trace as JSON (see the trace schema in the crate README).
pub fn save_trace(trace: &DemandTrace, path: &Path) -> Result<(), DemandError> {
    let catalog = if let Some(pop) = trace.catalog().popularity() {
        serde_json::json!({ "lengths_mnats": trace.catalog().lengths(), "popularity": pop })
    } else {
        serde_json::json!({ "lengths_mnats": trace.catalog().lengths() })
    };
    let doc = serde_json::json!({
        "version": TRACE_FORMAT_VERSION,
        "slot_seconds": trace.slot_seconds(),
        "num_slots": trace.num_slots(),
        "num_users": trace.num_users(),
        "catalog": catalog,
        "requests": trace.requests(),
    });
    fs::write(path, serde_json::to_string_pretty(&doc).expect("trace serializes"))?;
    Ok(())
}

/// Read a trace back; the exact inverse of [`save_trace`].
pub fn load_trace(path: &Path) -> Result<DemandTrace, DemandError> {
    let text = fs::read_to_string(path)?;
    let doc: Value = text.parse().map_err(|e| DemandError::Parse {
        key: "<document>".into(),
        message: format!("{e}"),
    })?;
    let obj = doc.as_object().ok_or_else(|| parse_err("<document>", "expected a JSON object"))?;

    const KNOWN: [&str; 6] =
        ["version", "slot_seconds", "num_slots", "num_users", "catalog", "requests"];
    for key in obj.keys() {
        if !KNOWN.contains(&key.as_str()) {
            return Err(parse_err(key, "unknown field"));
        }
    }

    let version = field(obj, "version")?
        .as_i64()
        .ok_or_else(|| parse_err("version", "expected an integer"))?;
    if version != TRACE_FORMAT_VERSION {
        return Err(DemandError::VersionMismatch { found: version });
    }
    let slot_seconds = field(obj, "slot_seconds")?
        .as_f64()
        .ok_or_else(|| parse_err("slot_seconds", "expected a number"))?;
    let num_slots = field(obj, "num_slots")?
        .as_u64()
        .ok_or_else(|| parse_err("num_slots", "expected a nonnegative integer"))?
        as usize;
    let num_users = field(obj, "num_users")?
        .as_u64()
        .ok_or_else(|| parse_err("num_users", "expected a nonnegative integer"))?
        as usize;

    let cat = field(obj, "catalog")?
        .as_object()
        .ok_or_else(|| parse_err("catalog", "expected an object"))?;
    for key in cat.keys() {
        if key != "lengths_mnats" && key != "popularity" {
            return Err(parse_err(&format!("catalog.{key}"), "unknown field"));
        }
    }
    let lengths = real_vector(
        cat.get("lengths_mnats")
            .ok_or_else(|| parse_err("catalog.lengths_mnats", "missing field"))?,
        "catalog.lengths_mnats",
    )?;
    let popularity = match cat.get("popularity") {
        Some(v) => Some(real_vector(v, "catalog.popularity")?),
        None => None,
    };
    let catalog = FileCatalog::new(lengths, popularity)
        .map_err(|e| parse_err("catalog", &e.to_string()))?;

    let rows = field(obj, "requests")?
        .as_array()
        .ok_or_else(|| parse_err("requests", "expected an array of per-slot rows"))?;
    if rows.len() != num_slots {
        return Err(parse_err(
            "requests",
            &format!("{} rows for num_slots = {num_slots}", rows.len()),
        ));
    }
    let mut requests = Vec::with_capacity(rows.len());
    for row in rows {
        let row = row.as_array().ok_or_else(|| parse_err("requests", "expected rows of ids"))?;
        let mut ids = Vec::with_capacity(row.len());
        for v in row {
            let id = v
                .as_u64()
                .ok_or_else(|| parse_err("requests", "request ids must be nonnegative integers"))?;
            ids.push(id as u32);
        }
        if ids.len() != num_users {
            return Err(parse_err(
                "requests",
                &format!("row of {} ids for num_users = {num_users}", ids.len()),
            ));
        }
        requests.push(ids);
    }
    DemandTrace::new(slot_seconds, num_users, requests, catalog)
        .map_err(|e| parse_err("requests", &e.to_string()))
}

fn parse_err(key: &str, message: &str) -> DemandError {
    DemandError::Parse { key: key.into(), message: message.into() }
}

fn field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    key: &str,
) -> Result<&'a Value, DemandError> {
    obj.get(key).ok_or_else(|| parse_err(key, "missing field"))
}

fn real_vector(v: &Value, key: &str) -> Result<Vec<f64>, DemandError> {
    let arr = v.as_array().ok_or_else(|| parse_err(key, "expected an array of numbers"))?;
    arr.iter()
        .map(|x| x.as_f64().ok_or_else(|| parse_err(key, "expected a number")))
        .collect()
}

/// Derive an independent per-trace seed from a master seed, so Monte-Carlo
/// workers can run in any order. SplitMix64 over the pair.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
