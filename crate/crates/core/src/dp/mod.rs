//! The differentially private release mechanisms.
//!
//! This module is the only gate through which aggregate values leave the
//! system. Every mechanism draws calibrated Laplace noise (or selects via
//! the exponential mechanism) from an explicit [`NoiseSource`] and reports
//! the privacy parameters it actually used alongside the value.
//!
//! Sensitivities assume the add/remove-one-user neighboring relation and
//! rely on the upstream guarantee that input values are per-user
//! aggregates, one value per user.
//!
//! Known, accepted leakage: for mean, std and percentile the number of
//! contributing users n is treated as public context (it calibrates the
//! noise scale). Queries about how many or what share of users did
//! something must go through [`dp_count`] or [`dp_histogram`], which
//! protect n itself.

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DpError {
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
    #[error("bounds must be finite with lower < upper, got [{lower}, {upper}]")]
    InvalidBounds { lower: f64, upper: f64 },
    #[error("no input values")]
    EmptyInput,
    #[error("need at least {needed} values, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid bins: {0}")]
    InvalidBins(String),
    #[error("quantile must lie in [0, 1], got {0}")]
    InvalidQuantile(f64),
}

/// Privacy budget for one mechanism invocation. Always positive, finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Epsilon(f64);

impl Epsilon {
    pub fn new(value: f64) -> Result<Epsilon, DpError> {
        if value.is_finite() && value > 0.0 {
            Ok(Epsilon(value))
        } else {
            Err(DpError::InvalidEpsilon(value))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Splits the budget into `k` near-equal positive shares whose
    /// floating-point sum reproduces the original value exactly; the last
    /// share absorbs the rounding slack.
    pub fn equal_shares(self, k: usize) -> Vec<Epsilon> {
        assert!(k >= 1);
        let share = self.0 / k as f64;
        let mut out = vec![Epsilon(share); k - 1];
        out.push(Epsilon(self.0 - share * (k - 1) as f64));
        out
    }
}

impl TryFrom<f64> for Epsilon {
    type Error = DpError;
    fn try_from(value: f64) -> Result<Epsilon, DpError> {
        Epsilon::new(value)
    }
}

impl From<Epsilon> for f64 {
    fn from(eps: Epsilon) -> f64 {
        eps.0
    }
}

/// Public clipping bounds for mean, std and percentile. These must come
/// from the operator's domain knowledge, never from the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds")]
pub struct Bounds {
    lower: f64,
    upper: f64,
}

#[derive(Deserialize)]
struct RawBounds {
    lower: f64,
    upper: f64,
}

impl TryFrom<RawBounds> for Bounds {
    type Error = DpError;
    fn try_from(raw: RawBounds) -> Result<Bounds, DpError> {
        Bounds::new(raw.lower, raw.upper)
    }
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Bounds, DpError> {
        if lower.is_finite() && upper.is_finite() && lower < upper {
            Ok(Bounds { lower, upper })
        } else {
            Err(DpError::InvalidBounds { lower, upper })
        }
    }

    pub fn lower(self) -> f64 {
        self.lower
    }

    pub fn upper(self) -> f64 {
        self.upper
    }

    pub fn width(self) -> f64 {
        self.upper - self.lower
    }

    pub fn clip(self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }
}

/// Bin layout for histogram queries. Edges are public values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum BinSpec {
    Uniform {
        lower: f64,
        upper: f64,
        count: usize,
    },
    Explicit {
        edges: Vec<f64>,
    },
    Logarithmic {
        lower: f64,
        upper: f64,
        count: usize,
    },
}

impl BinSpec {
    /// Materializes the edge list (`count + 1` edges, strictly
    /// increasing, endpoints exact).
    pub fn edges(&self) -> Result<Vec<f64>, DpError> {
        let edges = match self {
            BinSpec::Uniform {
                lower,
                upper,
                count,
            } => {
                if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                    return Err(DpError::InvalidBins(format!(
                        "uniform bins need finite lower < upper, got [{lower}, {upper}]"
                    )));
                }
                if *count < 1 {
                    return Err(DpError::InvalidBins("count must be >= 1".into()));
                }
                let step = (upper - lower) / *count as f64;
                let mut edges: Vec<f64> = (0..*count).map(|i| lower + step * i as f64).collect();
                edges.push(*upper);
                edges
            }
            BinSpec::Explicit { edges } => {
                if edges.len() < 2 {
                    return Err(DpError::InvalidBins("need at least 2 edges".into()));
                }
                if edges.iter().any(|e| !e.is_finite()) {
                    return Err(DpError::InvalidBins("edges must be finite".into()));
                }
                if edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(DpError::InvalidBins(
                        "edges must be strictly increasing".into(),
                    ));
                }
                edges.clone()
            }
            BinSpec::Logarithmic {
                lower,
                upper,
                count,
            } => {
                if !(lower.is_finite() && upper.is_finite() && *lower > 0.0 && lower < upper) {
                    return Err(DpError::InvalidBins(format!(
                        "logarithmic bins need 0 < lower < upper, got [{lower}, {upper}]"
                    )));
                }
                if *count < 1 {
                    return Err(DpError::InvalidBins("count must be >= 1".into()));
                }
                let (ll, lu) = (lower.ln(), upper.ln());
                let mut edges: Vec<f64> = (0..*count)
                    .map(|i| (ll + (lu - ll) * i as f64 / *count as f64).exp())
                    .collect();
                edges.push(*upper);
                edges[0] = *lower;
                if edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(DpError::InvalidBins(
                        "bin count too large for the given range".into(),
                    ));
                }
                edges
            }
        };
        Ok(edges)
    }
}

/// A released histogram. `counts[i]` covers `(edges[i], edges[i+1]]`,
/// with the first bin also closed on the left; counts are post-noise,
/// clamped at zero and never renormalized. `remainder` is the optional
/// virtual bin for population members contributing no value at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<f64>,
    pub remainder: Option<f64>,
    pub epsilon_spent: Epsilon,
}

/// What a mechanism actually did, reported with every release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismInfo {
    pub mechanism: String,
    pub epsilon: f64,
    pub sensitivity: f64,
}

/// A released value together with its mechanism metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Noisy<T> {
    pub value: T,
    pub info: MechanismInfo,
}

fn info(mechanism: &str, epsilon: Epsilon, sensitivity: f64) -> MechanismInfo {
    MechanismInfo {
        mechanism: mechanism.to_string(),
        epsilon: epsilon.get(),
        sensitivity,
    }
}

/// Source of randomness for the mechanisms. One instance serves exactly
/// one query execution.
///
/// The `Bypass` variant disables noise entirely so tests can compare
/// against exact oracles. It only exists under the `bypass` cargo
/// feature, which production builds must not enable; there is no runtime
/// switch.
pub enum NoiseSource {
    Entropy(rand::rngs::StdRng),
    Seeded(rand_chacha::ChaCha12Rng),
    #[cfg(feature = "bypass")]
    Bypass,
}

impl std::fmt::Debug for NoiseSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            NoiseSource::Entropy(_) => "Entropy",
            NoiseSource::Seeded(_) => "Seeded",
            #[cfg(feature = "bypass")]
            NoiseSource::Bypass => "Bypass",
        };
        write!(f, "NoiseSource::{name}")
    }
}

impl NoiseSource {
    /// Production source, keyed from the operating system.
    pub fn entropy() -> NoiseSource {
        NoiseSource::Entropy(rand::rngs::StdRng::from_os_rng())
    }

    /// Reproducible source for tests and replication runs.
    pub fn seeded(seed: u64) -> NoiseSource {
        NoiseSource::Seeded(rand_chacha::ChaCha12Rng::seed_from_u64(seed))
    }

    #[cfg(feature = "bypass")]
    pub fn bypass() -> NoiseSource {
        NoiseSource::Bypass
    }

    pub fn is_bypass(&self) -> bool {
        #[cfg(feature = "bypass")]
        {
            matches!(self, NoiseSource::Bypass)
        }
        #[cfg(not(feature = "bypass"))]
        {
            false
        }
    }

    /// Uniform draw in [0, 1).
    fn uniform(&mut self) -> f64 {
        match self {
            NoiseSource::Entropy(rng) => rng.random(),
            NoiseSource::Seeded(rng) => rng.random(),
            #[cfg(feature = "bypass")]
            NoiseSource::Bypass => 0.5,
        }
    }

    /// One draw from Laplace(0, scale) via the inverse CDF; exactly zero
    /// in bypass mode.
    pub fn laplace(&mut self, scale: f64) -> f64 {
        if self.is_bypass() {
            return 0.0;
        }
        debug_assert!(scale > 0.0 && scale.is_finite());
        loop {
            let u = self.uniform() - 0.5;
            // u = -0.5 would push the inverse CDF to -infinity.
            if u > -0.5 {
                return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
            }
        }
    }
}

/// One draw from Laplace(0, scale).
pub fn laplace_sample(scale: f64, rng: &mut NoiseSource) -> f64 {
    rng.laplace(scale)
}

/// Noisy count of `n` items; sensitivity 1 under add/remove-one-user.
/// The raw output may be negative; any clamping is the caller's
/// post-processing decision.
pub fn dp_count(n: u64, eps: Epsilon, rng: &mut NoiseSource) -> Noisy<f64> {
    let value = n as f64 + rng.laplace(1.0 / eps.get());
    Noisy {
        value,
        info: info("dp_count", eps, 1.0),
    }
}

/// Noisy mean of clipped values. n is public; sensitivity (upper −
/// lower) / n.
pub fn dp_mean(
    values: &[f64],
    eps: Epsilon,
    bounds: Bounds,
    rng: &mut NoiseSource,
) -> Result<Noisy<f64>, DpError> {
    if values.is_empty() {
        return Err(DpError::EmptyInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| bounds.clip(v)).sum::<f64>() / n;
    let sensitivity = bounds.width() / n;
    let value = mean + rng.laplace(sensitivity / eps.get());
    Ok(Noisy {
        value,
        info: info("dp_mean", eps, sensitivity),
    })
}

/// Noisy standard deviation: half the budget buys a noisy mean, the
/// other half a noisy mean of squared deviations from it. The reported
/// sensitivity is the second stage's, (upper − lower)² / n.
pub fn dp_std(
    values: &[f64],
    eps: Epsilon,
    bounds: Bounds,
    rng: &mut NoiseSource,
) -> Result<Noisy<f64>, DpError> {
    if values.is_empty() {
        return Err(DpError::EmptyInput);
    }
    if values.len() < 2 {
        return Err(DpError::InsufficientSamples {
            needed: 2,
            got: values.len(),
        });
    }
    let half = Epsilon::new(eps.get() / 2.0).expect("half of a valid epsilon");
    let clipped: Vec<f64> = values.iter().map(|&v| bounds.clip(v)).collect();
    let noisy_mean = dp_mean(&clipped, half, bounds, rng)?.value;
    let n = clipped.len() as f64;
    let var = clipped
        .iter()
        .map(|&v| (v - noisy_mean).powi(2))
        .sum::<f64>()
        / n;
    let sensitivity = bounds.width().powi(2) / n;
    let noisy_var = var + rng.laplace(sensitivity / half.get());
    Ok(Noisy {
        value: noisy_var.max(0.0).sqrt(),
        info: info("dp_std", eps, sensitivity),
    })
}

/// Exponential-mechanism quantile over clipped, sorted values.
///
/// Intervals between consecutive order statistics (with the bounds
/// prepended/appended) are weighted by width times exp(−(ε/2)·|i −
/// q·n|); the release is a uniform draw inside the selected interval. In
/// bypass mode this resolves to the nearest-rank empirical quantile.
pub fn dp_percentile(
    values: &[f64],
    q: f64,
    eps: Epsilon,
    bounds: Bounds,
    rng: &mut NoiseSource,
) -> Result<Noisy<f64>, DpError> {
    if values.is_empty() {
        return Err(DpError::EmptyInput);
    }
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(DpError::InvalidQuantile(q));
    }
    let n = values.len();
    let mut sorted: Vec<f64> = values.iter().map(|&v| bounds.clip(v)).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("clipped values are ordered"));

    let meta = info("dp_percentile", eps, 1.0);
    if rng.is_bypass() {
        let rank = ((q * n as f64).round() as usize).clamp(1, n);
        return Ok(Noisy {
            value: sorted[rank - 1],
            info: meta,
        });
    }

    let mut edges = Vec::with_capacity(n + 2);
    edges.push(bounds.lower());
    edges.extend_from_slice(&sorted);
    edges.push(bounds.upper());

    let target = q * n as f64;
    // Work with log-weights, shifted by the maximum, so extreme epsilon
    // or n cannot underflow every weight at once.
    let log_weights: Vec<f64> = edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let width = w[1] - w[0];
            if width > 0.0 {
                width.ln() - (eps.get() / 2.0) * (i as f64 - target).abs()
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let max_lw = log_weights
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|&lw| (lw - max_lw).exp()).collect();
    let total: f64 = weights.iter().sum();

    let mut pick = rng.uniform() * total;
    let mut chosen = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        if pick < *w {
            chosen = i;
            break;
        }
        pick -= w;
    }
    let (lo, hi) = (edges[chosen], edges[chosen + 1]);
    let value = lo + rng.uniform() * (hi - lo);
    Ok(Noisy { value, info: meta })
}

/// Several percentiles in one invocation. The invocation budget is split
/// into equal shares whose metadata sums back to `eps` exactly.
pub fn dp_percentiles(
    values: &[f64],
    qs: &[f64],
    eps: Epsilon,
    bounds: Bounds,
    rng: &mut NoiseSource,
) -> Result<Vec<Noisy<f64>>, DpError> {
    if qs.is_empty() {
        return Err(DpError::EmptyInput);
    }
    eps.equal_shares(qs.len())
        .into_iter()
        .zip(qs)
        .map(|(share, &q)| dp_percentile(values, q, share, bounds, rng))
        .collect()
}

/// Noisy histogram of per-user values.
///
/// Values outside the edge range are clamped into the end bins rather
/// than dropped, so the bin total still counts every user. When
/// `population_remainder` is given it becomes one more noisy bin (the
/// users contributing no value at all). One ε covers the whole
/// histogram: each user occupies exactly one bin, so per-bin sensitivity
/// is 1. Noise is added per bin, then counts are clamped at zero, a pure
/// post-processing step.
pub fn dp_histogram(
    values: &[f64],
    bins: &BinSpec,
    eps: Epsilon,
    rng: &mut NoiseSource,
    population_remainder: Option<u64>,
) -> Result<Noisy<NoisyHistogram>, DpError> {
    let edges = bins.edges()?;
    let nbins = edges.len() - 1;
    let mut raw = vec![0u64; nbins];
    for &v in values {
        // Right-closed bins: v lands in bin i when edges[i] < v <= edges[i+1].
        let p = edges.partition_point(|&e| e < v);
        let bin = if p == 0 { 0 } else { (p - 1).min(nbins - 1) };
        raw[bin] += 1;
    }
    let scale = 1.0 / eps.get();
    let counts: Vec<f64> = raw
        .iter()
        .map(|&c| (c as f64 + rng.laplace(scale)).max(0.0))
        .collect();
    let remainder = population_remainder.map(|r| (r as f64 + rng.laplace(scale)).max(0.0));
    Ok(Noisy {
        value: NoisyHistogram {
            edges,
            counts,
            remainder,
            epsilon_spent: eps,
        },
        info: info("dp_histogram", eps, 1.0),
    })
}
