//! The convex cost-rate family used as the scheduling objective.
//!
//! Every model maps a transmission rate to an instantaneous cost rate and is
//! convex, nondecreasing, and zero at rate zero (up to declared additive
//! constants). The dual solvers need exact marginals and inverse marginals,
//! both provided here.
//!
//! Units are the caller's: a rate is expressed in the same units as the
//! model's `bandwidth` field, and powers come out in matching units. The
//! experiment layer feeds Mnats/s against bandwidths pre-scaled by 1e-6
//! (1 Hz supports 1 nat/s), so its energy figures are in MW-equivalents
//! until converted to joules exactly once at the reporting boundary.

use std::fmt;

/// Errors from cost evaluation.
#[derive(Debug)]
pub enum CostError {
    /// A negative or non-finite rate was supplied.
    InvalidArgument(String),
    /// A root solve failed (bandwidth kind only): the requested rate is not
    /// achievable at the configured power, or iteration did not converge.
    Numeric(String),
}

impl fmt::Display for CostError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostError::InvalidArgument(m) => write!(f, "invalid argument: {m}"),
            CostError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CostError {}

/// Joules per kilowatt-hour.
pub const JOULES_PER_KWH: f64 = 3.6e6;

/// A convex, increasing cost-rate function of the transmission rate.
#[derive(Debug, Clone, PartialEq)]
pub enum CostModel {
    /// Transmit power of a Gaussian channel at the given rate:
    /// `W (exp(r/W) - 1) / h + static_power + side_power`.
    Energy {
        bandwidth: f64,
        channel_gain: f64,
        static_power: f64,
        side_power: f64,
    },
    /// Electricity bill rate: the `Energy` power times a price per kWh.
    /// `watts_per_power_unit` says how many watts one power unit of the
    /// underlying model represents (1e6 when rates are Mnats/s).
    EnergyCost {
        bandwidth: f64,
        channel_gain: f64,
        static_power: f64,
        side_power: f64,
        price_per_kwh: f64,
        watts_per_power_unit: f64,
    },
    /// Bandwidth needed to sustain the rate at fixed transmit power: the
    /// `w` solving `r = w ln(1 + fixed_power * channel_gain / w)`.
    Bandwidth { fixed_power: f64, channel_gain: f64 },
    /// Raw traffic: cost equals the rate.
    Traffic,
    /// Linear per-data price, e.g. an incentive paid per Mnat delivered.
    LinearIncentive { price_per_mnat: f64 },
}

impl CostModel {
    /// Shannon energy model with unit gain and no constant draw.
    pub fn energy(bandwidth: f64) -> CostModel {
        CostModel::Energy { bandwidth, channel_gain: 1.0, static_power: 0.0, side_power: 0.0 }
    }

    /// The additive constant (static plus side power) included in `eval`.
    pub fn constant_term(&self) -> f64 {
        match self {
            CostModel::Energy { static_power, side_power, .. } => static_power + side_power,
            CostModel::EnergyCost {
                static_power,
                side_power,
                price_per_kwh,
                watts_per_power_unit,
                ..
            } => (static_power + side_power) * price_per_kwh * watts_per_power_unit / JOULES_PER_KWH,
            _ => 0.0,
        }
    }

    /// Cost rate at the given transmission rate.
    pub fn eval(&self, rate: f64) -> Result<f64, CostError> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(CostError::InvalidArgument(format!("rate {rate} must be >= 0")));
        }
        match *self {
            CostModel::Energy { bandwidth, channel_gain, static_power, side_power } => {
                Ok(shannon_power(rate, bandwidth, channel_gain) + static_power + side_power)
            }
            CostModel::EnergyCost {
                bandwidth,
                channel_gain,
                static_power,
                side_power,
                price_per_kwh,
                watts_per_power_unit,
            } => {
                let power = shannon_power(rate, bandwidth, channel_gain) + static_power + side_power;
                Ok(price_per_kwh * watts_per_power_unit / JOULES_PER_KWH * power)
            }
            CostModel::Bandwidth { fixed_power, channel_gain } => {
                bandwidth_for_rate(rate, fixed_power * channel_gain)
            }
            CostModel::Traffic => Ok(rate),
            CostModel::LinearIncentive { price_per_mnat } => Ok(price_per_mnat * rate),
        }
    }

    /// Exact derivative of `eval` (the additive constants drop out).
    pub fn marginal(&self, rate: f64) -> Result<f64, CostError> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(CostError::InvalidArgument(format!("rate {rate} must be >= 0")));
        }
        match *self {
            CostModel::Energy { bandwidth, channel_gain, .. } => {
                Ok((rate / bandwidth).exp() / channel_gain)
            }
            CostModel::EnergyCost {
                bandwidth,
                channel_gain,
                price_per_kwh,
                watts_per_power_unit,
                ..
            } => Ok(price_per_kwh * watts_per_power_unit / JOULES_PER_KWH
                * (rate / bandwidth).exp()
                / channel_gain),
            CostModel::Bandwidth { fixed_power, channel_gain } => {
                let snr_times_w = fixed_power * channel_gain;
                if rate == 0.0 {
                    return Ok(0.0);
                }
                let w = bandwidth_for_rate(rate, snr_times_w)?;
                let x = snr_times_w / w;
                Ok(1.0 / ((1.0 + x).ln() - x / (1.0 + x)))
            }
            CostModel::Traffic => Ok(1.0),
            CostModel::LinearIncentive { price_per_mnat } => Ok(price_per_mnat),
        }
    }

    /// The rate minimizing `eval(r) - target * r` over `r >= 0`: the positive
    /// root of `marginal(r) = target` when `target > marginal(0)`, else 0.
    /// For linear kinds a target above the slope has no finite minimizer and
    /// the result is `f64::INFINITY`; callers clamp to their rate cap.
    pub fn inverse_marginal(&self, target: f64) -> f64 {
        match *self {
            CostModel::Energy { bandwidth, channel_gain, .. } => {
                let x = channel_gain * target;
                if x > 1.0 {
                    bandwidth * x.ln()
                } else {
                    0.0
                }
            }
            CostModel::EnergyCost {
                bandwidth,
                channel_gain,
                price_per_kwh,
                watts_per_power_unit,
                ..
            } => {
                let scale = price_per_kwh * watts_per_power_unit / JOULES_PER_KWH;
                if scale <= 0.0 {
                    return if target > 0.0 { f64::INFINITY } else { 0.0 };
                }
                let x = channel_gain * target / scale;
                if x > 1.0 {
                    bandwidth * x.ln()
                } else {
                    0.0
                }
            }
            CostModel::Bandwidth { fixed_power, channel_gain } => {
                let snr_times_w = fixed_power * channel_gain;
                if target <= 0.0 {
                    return 0.0;
                }
                // marginal(r) = 1 / (ln(1+x) - x/(1+x)) with x = P*h/w, and is
                // increasing in w. Solve for w by bisection, then map to r.
                let denom_target = 1.0 / target;
                let denom = |w: f64| {
                    let x = snr_times_w / w;
                    x.ln_1p() - x / (1.0 + x)
                };
                let mut lo = snr_times_w * 1e-12;
                let mut hi = snr_times_w.max(1e-12);
                // denom decreases in w; expand hi until denom(hi) < 1/target.
                for _ in 0..200 {
                    if denom(hi) < denom_target {
                        break;
                    }
                    hi *= 2.0;
                }
                if denom(lo) < denom_target {
                    return 0.0; // target below marginal everywhere reachable
                }
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if denom(mid) >= denom_target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if (hi - lo) <= 1e-12 * hi {
                        break;
                    }
                }
                let w = 0.5 * (lo + hi);
                let x = snr_times_w / w;
                w * (1.0 + x).ln()
            }
            CostModel::Traffic => {
                if target > 1.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
            CostModel::LinearIncentive { price_per_mnat } => {
                if target > price_per_mnat {
                    f64::INFINITY
                } else {
                    0.0
                }
            }
        }
    }
}

fn shannon_power(rate: f64, bandwidth: f64, channel_gain: f64) -> f64 {
    bandwidth * ((rate / bandwidth).exp() - 1.0) / channel_gain
}

/// Solve `w ln(1 + snr_times_w / w) = rate` for `w > 0`. The left side is
/// increasing in `w` and saturates at `snr_times_w`, so rates at or above
/// that limit are unreachable.
fn bandwidth_for_rate(rate: f64, snr_times_w: f64) -> Result<f64, CostError> {
    if rate == 0.0 {
        return Ok(0.0);
    }
    if rate >= snr_times_w * (1.0 - 1e-12) {
        return Err(CostError::Numeric(format!(
            "rate {rate} is unreachable: the power-limited throughput is {snr_times_w}"
        )));
    }
    let f = |w: f64| w * (1.0 + snr_times_w / w).ln();
    let mut lo = rate / (1.0 + snr_times_w / rate).ln();
    if f(lo) > rate {
        lo = rate * 1e-12;
    }
    let mut hi = lo.max(rate);
    let mut expansions = 0;
    while f(hi) < rate {
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(CostError::Numeric("bandwidth bracket expansion failed".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}
