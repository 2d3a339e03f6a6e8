//! Query orchestration: parse, filter and aggregate partitions in
//! parallel, merge, then apply exactly one release mechanism.
//!
//! Ordering is the whole contract here. Validation happens before the
//! budget charge; the charge happens before any data row is read; noise
//! is drawn once, on the coordinating thread, after the merge. Failures
//! after the charge do not refund it.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::budget::{BudgetLedger, ChargeToken, LedgerError};
use crate::dp::{
    dp_histogram, dp_mean, dp_percentiles, dp_std, BinSpec, Bounds, DpError, Epsilon,
    MechanismInfo, NoiseSource, NoisyHistogram,
};
use crate::flow::{open_dataset, DatasetDescriptor, FlowError, Partition};
use crate::rib::RoutingInformationBase;
use crate::select::{
    merge_partials, Aggregator, FilterSpec, PerUserSpec, PerUserTable, PopulationMerge, SelectError,
};

#[derive(Debug, Error)]
pub enum EngineError {
    /// Rejected before anything was charged or read.
    #[error("invalid query: {reason}")]
    Validation { reason: String },
    /// Budget accounting failure; charges are all-or-nothing.
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    /// Dataset failure during pre-charge validation; nothing was spent.
    #[error("dataset error: {source}")]
    Data {
        #[source]
        source: FlowError,
    },
    /// Dataset failure while streaming records. The charge had already
    /// been made and stays spent.
    #[error("dataset error after the budget was charged (budget is spent): {source}")]
    DataAfterCharge {
        #[source]
        source: FlowError,
    },
    /// The release mechanism refused its input (for example an empty
    /// selection); the charge stays spent.
    #[error("release failed after the budget was charged (budget is spent): {source}")]
    ReleaseAfterCharge {
        #[source]
        source: DpError,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl EngineError {
    fn invalid(reason: impl Into<String>) -> EngineError {
        EngineError::Validation {
            reason: reason.into(),
        }
    }
}

fn validation_from_select(e: SelectError) -> EngineError {
    EngineError::invalid(e.to_string())
}

/// The single DP release applied to the merged per-user table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ReleaseSpec {
    Mean {
        bounds: Bounds,
    },
    Std {
        bounds: Bounds,
    },
    Percentiles {
        qs: Vec<f64>,
        bounds: Bounds,
    },
    Histogram {
        bins: BinSpec,
        /// Adds the virtual bin counting population members with no
        /// matching activity; only meaningful (and only allowed) for
        /// presence queries.
        include_remainder: bool,
    },
}

/// A complete query as submitted by an operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub dataset: DatasetDescriptor,
    pub filter: FilterSpec,
    pub per_user: PerUserSpec,
    pub release: ReleaseSpec,
    pub epsilon: Epsilon,
    pub operator_id: String,
    /// Give users with no matching flows an explicit zero (counts and
    /// volumes only).
    #[serde(default)]
    pub include_inactive: bool,
}

impl QueryRequest {
    /// Structural checks that need no dataset access.
    pub fn validate(&self) -> Result<(), EngineError> {
        self.filter.validate().map_err(validation_from_select)?;
        if self.include_inactive && !self.per_user.supports_inactive_users() {
            return Err(EngineError::invalid(format!(
                "include_inactive is undefined for {:?}",
                self.per_user
            )));
        }
        match &self.release {
            ReleaseSpec::Mean { .. } | ReleaseSpec::Std { .. } => {}
            ReleaseSpec::Percentiles { qs, .. } => {
                if qs.is_empty() {
                    return Err(EngineError::invalid("no percentiles requested"));
                }
                if qs.iter().any(|q| !(0.0..=1.0).contains(q) || q.is_nan()) {
                    return Err(EngineError::invalid("percentiles must lie in [0, 1]"));
                }
                let mut sorted = qs.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));
                if sorted.windows(2).any(|w| w[0] == w[1]) {
                    return Err(EngineError::invalid("percentiles must be distinct"));
                }
            }
            ReleaseSpec::Histogram {
                bins,
                include_remainder,
            } => {
                bins.edges()
                    .map_err(|e| EngineError::invalid(e.to_string()))?;
                if *include_remainder && self.per_user != PerUserSpec::Presence {
                    return Err(EngineError::invalid(
                        "the remainder bin counts users with no activity and \
                         requires a presence query",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Canonical fingerprint: SHA-256 over the canonical JSON form.
    /// Collection fields are ordered sets/maps, so equal requests always
    /// serialize to identical bytes.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("request serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex(&hasher.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything a released result reports about how it was produced.
/// Never contains client identifiers or raw per-user values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetadata {
    pub epsilon_spent: f64,
    pub mechanism: String,
    pub sensitivity: f64,
    /// Mean/std/percentile releases treat the contributing-user count as
    /// public context; count and histogram releases protect it.
    pub n_is_public: bool,
    pub filter: String,
    pub partitions: usize,
    pub wall_ms: u64,
    pub operator: String,
    pub query_hash: String,
    /// Recorded only for explicitly seeded (test or simulation) runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Set when this result came from a simulation run and must not be
    /// treated as a releasable measurement.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub simulated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Payload {
    Scalar(f64),
    Scalars(Vec<f64>),
    Histogram(NoisyHistogram),
}

impl Payload {
    /// Collapses the payload to one number for repetition summaries. A
    /// histogram with a remainder bin reduces to the share of users in
    /// the counted bins, computed as the ratio of the clamped noisy
    /// bins.
    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            Payload::Scalar(v) => Some(*v),
            Payload::Scalars(vs) if vs.len() == 1 => Some(vs[0]),
            Payload::Scalars(_) => None,
            Payload::Histogram(h) => h.remainder.map(|r| {
                let counted: f64 = h.counts.iter().sum();
                let total = counted + r;
                if total > 0.0 {
                    counted / total
                } else {
                    0.0
                }
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub payload: Payload,
    pub metadata: QueryMetadata,
}

/// Per-partition scan product: the partial table plus the distinct
/// pre-filter client set (when requested) for the population figure.
pub struct PartitionScan {
    pub table: PerUserTable,
    pub users: Option<BTreeSet<String>>,
}

/// Seam between the orchestration logic and how partitions actually get
/// scanned, so a distributed backend can slot in without touching the
/// mechanisms or the ledger.
pub trait ExecutionBackend: Sync {
    fn scan(
        &self,
        partitions: &[Partition],
        filter: &FilterSpec,
        per_user: &PerUserSpec,
        rib: Option<&RoutingInformationBase>,
        collect_users: bool,
    ) -> Result<Vec<PartitionScan>, EngineError>;
}

/// In-process backend: a bounded thread pool, one task per file.
pub struct LocalBackend {
    workers: usize,
}

impl LocalBackend {
    /// `workers = 0` means one per available core.
    pub fn new(workers: usize) -> LocalBackend {
        LocalBackend { workers }
    }
}

fn scan_partition(
    partition: &Partition,
    filter: &FilterSpec,
    per_user: &PerUserSpec,
    rib: Option<&RoutingInformationBase>,
    collect_users: bool,
) -> Result<PartitionScan, EngineError> {
    let mut reader = partition
        .open()
        .map_err(|source| EngineError::DataAfterCharge { source })?;
    let mut agg = Aggregator::new(per_user.clone());
    let mut users = collect_users.then(BTreeSet::new);
    for item in &mut reader {
        let record = item.map_err(|source| EngineError::DataAfterCharge { source })?;
        if let Some(set) = users.as_mut() {
            if !set.contains(&record.client_id) {
                set.insert(record.client_id.clone());
            }
        }
        if filter.matches(&record, rib) {
            agg.push(&record);
        }
    }
    // The partial's population is overwritten at merge time by the
    // global figure; any locally valid value serves.
    let local_population = users
        .as_ref()
        .map(|set| set.len() as u64)
        .unwrap_or_else(|| agg.users());
    let table = agg
        .finish(local_population)
        .map_err(|e| EngineError::Internal(e.to_string()))?;
    Ok(PartitionScan { table, users })
}

impl ExecutionBackend for LocalBackend {
    fn scan(
        &self,
        partitions: &[Partition],
        filter: &FilterSpec,
        per_user: &PerUserSpec,
        rib: Option<&RoutingInformationBase>,
        collect_users: bool,
    ) -> Result<Vec<PartitionScan>, EngineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| EngineError::Internal(format!("thread pool: {e}")))?;
        pool.install(|| {
            partitions
                .par_iter()
                .map(|p| scan_partition(p, filter, per_user, rib, collect_users))
                .collect()
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EngineConfig {
    /// Scan parallelism; 0 delegates to the number of available cores.
    pub workers: usize,
    /// Optional content-addressed cache for the distinct-user
    /// population figure, keyed by dataset fingerprint.
    pub population_cache: Option<PathBuf>,
}

/// Whether repeated runs spend budget per repetition or run as an
/// explicitly acknowledged simulation whose outputs are not releasable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LedgerMode {
    ChargeEach,
    Simulation,
}

/// Outcome of [`Engine::run_repeated`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepeatedSummary {
    pub outputs: Vec<f64>,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
    pub repetitions: usize,
    pub simulated: bool,
    pub total_epsilon_charged: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

pub struct Engine<'a> {
    config: EngineConfig,
    ledger: &'a BudgetLedger,
    rib: Option<&'a RoutingInformationBase>,
}

/// Pre-charge validation product, reused by execute and run_repeated.
struct ValidatedQuery {
    partitions: Vec<Partition>,
    fingerprint: String,
}

/// Merged query state, ready for any number of releases.
struct PreparedTable {
    table: PerUserTable,
    partitions: usize,
}

impl<'a> Engine<'a> {
    pub fn new(
        config: EngineConfig,
        ledger: &'a BudgetLedger,
        rib: Option<&'a RoutingInformationBase>,
    ) -> Engine<'a> {
        Engine {
            config,
            ledger,
            rib,
        }
    }

    /// Everything that must hold before a single record is read or any
    /// budget is spent.
    fn validate(&self, request: &QueryRequest) -> Result<ValidatedQuery, EngineError> {
        request.validate()?;
        if request.filter.needs_rib() && self.rib.is_none() {
            return Err(EngineError::invalid(
                "asn filter requires a routing table, none configured",
            ));
        }
        let partitions =
            open_dataset(&request.dataset).map_err(|source| EngineError::Data { source })?;
        let schema = match partitions.first() {
            Some(p) => p
                .open()
                .map_err(|source| EngineError::Data { source })?
                .schema(),
            None => return Err(EngineError::invalid("dataset has no partitions")),
        };
        request
            .filter
            .validate_against_schema(&schema)
            .map_err(validation_from_select)?;
        request
            .per_user
            .validate_against_schema(&schema)
            .map_err(validation_from_select)?;
        Ok(ValidatedQuery {
            partitions,
            fingerprint: request.fingerprint(),
        })
    }

    /// Scans, merges and zero-fills; this is the only place data rows
    /// are read. Requires the charge to have happened already.
    fn prepare(
        &self,
        request: &QueryRequest,
        partitions: &[Partition],
    ) -> Result<PreparedTable, EngineError> {
        let cached_population = self.cached_population(partitions)?;
        let collect_users = request.include_inactive || cached_population.is_none();

        let backend = LocalBackend::new(self.config.workers);
        let scans = backend.scan(
            partitions,
            &request.filter,
            &request.per_user,
            self.rib,
            collect_users,
        )?;

        let mut all_users: BTreeSet<String> = BTreeSet::new();
        let mut partials = Vec::with_capacity(scans.len());
        for scan in scans {
            if let Some(users) = scan.users {
                all_users.extend(users);
            }
            partials.push(scan.table);
        }
        let population = match cached_population {
            Some(n) => n,
            None => {
                let n = all_users.len() as u64;
                self.store_population(partitions, n);
                n
            }
        };

        let mut table = merge_partials(
            partials,
            &request.per_user,
            PopulationMerge::Global(population),
        )
        .map_err(|e| EngineError::Internal(e.to_string()))?;
        if request.include_inactive {
            table
                .include_inactive(all_users)
                .map_err(|e| EngineError::Internal(e.to_string()))?;
        }
        Ok(PreparedTable {
            table,
            partitions: partitions.len(),
        })
    }

    /// One noisy release over the merged table.
    fn release(
        &self,
        request: &QueryRequest,
        prepared: &PreparedTable,
        rng: &mut NoiseSource,
    ) -> Result<(Payload, MechanismInfo), EngineError> {
        let eps = request.epsilon;
        let values = prepared.table.values();
        let wrap = |e: DpError| EngineError::ReleaseAfterCharge { source: e };
        match &request.release {
            ReleaseSpec::Mean { bounds } => {
                let out = dp_mean(&values, eps, *bounds, rng).map_err(wrap)?;
                Ok((Payload::Scalar(out.value), out.info))
            }
            ReleaseSpec::Std { bounds } => {
                let out = dp_std(&values, eps, *bounds, rng).map_err(wrap)?;
                Ok((Payload::Scalar(out.value), out.info))
            }
            ReleaseSpec::Percentiles { qs, bounds } => {
                let outs = dp_percentiles(&values, qs, eps, *bounds, rng).map_err(wrap)?;
                let info = MechanismInfo {
                    mechanism: "dp_percentile".to_string(),
                    epsilon: outs.iter().map(|o| o.info.epsilon).sum(),
                    sensitivity: 1.0,
                };
                Ok((
                    Payload::Scalars(outs.into_iter().map(|o| o.value).collect()),
                    info,
                ))
            }
            ReleaseSpec::Histogram {
                bins,
                include_remainder,
            } => {
                let remainder = include_remainder
                    .then(|| prepared.table.total_population() - prepared.table.users());
                let out = dp_histogram(&values, bins, eps, rng, remainder).map_err(wrap)?;
                Ok((Payload::Histogram(out.value), out.info))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn metadata(
        &self,
        request: &QueryRequest,
        fingerprint: &str,
        info: MechanismInfo,
        partitions: usize,
        started: Instant,
        seed: Option<u64>,
        simulated: bool,
    ) -> QueryMetadata {
        QueryMetadata {
            epsilon_spent: request.epsilon.get(),
            mechanism: info.mechanism,
            sensitivity: info.sensitivity,
            n_is_public: matches!(
                request.release,
                ReleaseSpec::Mean { .. }
                    | ReleaseSpec::Std { .. }
                    | ReleaseSpec::Percentiles { .. }
            ),
            filter: request.filter.summary(),
            partitions,
            wall_ms: started.elapsed().as_millis() as u64,
            operator: request.operator_id.clone(),
            query_hash: fingerprint.to_string(),
            seed,
            simulated,
        }
    }

    /// Runs one query end to end: validate, charge, scan, merge, release.
    ///
    /// `seed` is metadata only (stamped into the result for reproducible
    /// runs); the actual noise comes from `rng`.
    pub fn execute(
        &self,
        request: &QueryRequest,
        rng: &mut NoiseSource,
        seed: Option<u64>,
    ) -> Result<QueryResult, EngineError> {
        let started = Instant::now();
        let validated = self.validate(request)?;

        let token = self.ledger.charge(
            &request.operator_id,
            request.epsilon,
            &validated.fingerprint,
        )?;

        let result = self.run_charged(request, &validated, &token, rng, seed, started);
        if result.is_ok() {
            self.ledger.mark_released(&token)?;
        }
        result
    }

    fn run_charged(
        &self,
        request: &QueryRequest,
        validated: &ValidatedQuery,
        token: &ChargeToken,
        rng: &mut NoiseSource,
        seed: Option<u64>,
        started: Instant,
    ) -> Result<QueryResult, EngineError> {
        debug_assert_eq!(token.eps(), request.epsilon.get());
        let prepared = self.prepare(request, &validated.partitions)?;
        let (payload, info) = self.release(request, &prepared, rng)?;
        Ok(QueryResult {
            payload,
            metadata: self.metadata(
                request,
                &validated.fingerprint,
                info,
                prepared.partitions,
                started,
                seed,
                false,
            ),
        })
    }

    /// Repeats the release of one query, scanning the data only once.
    ///
    /// In `ChargeEach` mode all `repetitions` charges are made durable
    /// up front, before any data is read; refusal of any of them aborts
    /// the run with the earlier charges conservatively spent. Simulation
    /// mode touches no budget and marks every output non-releasable.
    pub fn run_repeated(
        &self,
        request: &QueryRequest,
        repetitions: usize,
        mode: LedgerMode,
        rng: &mut NoiseSource,
        seed: Option<u64>,
    ) -> Result<RepeatedSummary, EngineError> {
        if repetitions < 1 {
            return Err(EngineError::invalid("repetitions must be at least 1"));
        }
        let summarizable = match &request.release {
            ReleaseSpec::Mean { .. } | ReleaseSpec::Std { .. } => true,
            ReleaseSpec::Percentiles { qs, .. } => qs.len() == 1,
            ReleaseSpec::Histogram {
                include_remainder, ..
            } => *include_remainder,
        };
        if !summarizable {
            return Err(EngineError::invalid(
                "repeated runs need a release that reduces to one number \
                 (mean, std, a single percentile, or a share histogram)",
            ));
        }
        let validated = self.validate(request)?;

        let mut tokens = Vec::new();
        if mode == LedgerMode::ChargeEach {
            for _ in 0..repetitions {
                tokens.push(self.ledger.charge(
                    &request.operator_id,
                    request.epsilon,
                    &validated.fingerprint,
                )?);
            }
        }

        let prepared = self.prepare(request, &validated.partitions)?;
        let mut outputs = Vec::with_capacity(repetitions);
        for i in 0..repetitions {
            let (payload, _) = self.release(request, &prepared, rng)?;
            let scalar = payload
                .as_scalar()
                .ok_or_else(|| EngineError::Internal("summarizability was pre-checked".into()))?;
            outputs.push(scalar);
            if let Some(token) = tokens.get(i) {
                self.ledger.mark_released(token)?;
            }
        }

        let mut sorted = outputs.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite outputs"));
        let rank = |q: f64| {
            let n = sorted.len();
            sorted[((q * n as f64).round() as usize).clamp(1, n) - 1]
        };
        Ok(RepeatedSummary {
            median: rank(0.5),
            p5: rank(0.05),
            p95: rank(0.95),
            outputs,
            repetitions,
            simulated: mode == LedgerMode::Simulation,
            total_epsilon_charged: tokens.iter().map(|t| t.eps()).sum(),
            seed,
        })
    }

    /// Content-addressed dataset fingerprint: descriptor plus the bytes
    /// of every partition file, so any data change misses the cache.
    fn dataset_fingerprint(&self, partitions: &[Partition]) -> Result<String, EngineError> {
        let mut hasher = Sha256::new();
        for p in partitions {
            hasher.update(p.path.to_string_lossy().as_bytes());
            hasher.update([0]);
            let bytes = crate::flow::read_file_bytes(&p.path)
                .map_err(|source| EngineError::DataAfterCharge { source })?;
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        Ok(hex(&hasher.finalize()))
    }

    fn cached_population(&self, partitions: &[Partition]) -> Result<Option<u64>, EngineError> {
        let Some(path) = &self.config.population_cache else {
            return Ok(None);
        };
        let Ok(text) = std::fs::read_to_string(path) else {
            return Ok(None);
        };
        // A damaged cache is recomputed, never an error.
        let map: BTreeMap<String, u64> = match serde_json::from_str(&text) {
            Ok(m) => m,
            Err(e) => {
                log::warn!(
                    "ignoring unreadable population cache {}: {e}",
                    path.display()
                );
                return Ok(None);
            }
        };
        Ok(map.get(&self.dataset_fingerprint(partitions)?).copied())
    }

    /// Best effort: a failed cache write only costs a rescan later.
    fn store_population(&self, partitions: &[Partition], population: u64) {
        let Some(path) = &self.config.population_cache else {
            return;
        };
        let fingerprint = match self.dataset_fingerprint(partitions) {
            Ok(f) => f,
            Err(_) => return,
        };
        let mut map: BTreeMap<String, u64> = std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
            .unwrap_or_default();
        map.insert(fingerprint, population);
        if let Ok(json) = serde_json::to_string_pretty(&map) {
            if let Err(e) = std::fs::write(path, json) {
                log::warn!("population cache write failed: {e}");
            }
        }
    }
}

#[cfg(test)]
mod tests;
