//! Flow filtering and per-user aggregation.
//!
//! These are the two middle stages of the query pipeline: narrow the
//! record stream to the operator's criterion, then collapse it to one
//! value per client. Client identifiers never leave this module except
//! inside a [`PerUserTable`], which only the release mechanisms consume.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{DatasetSchema, FlowRecord};
use crate::rib::{Asn, RoutingInformationBase};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("asn filter requires a routing table")]
    MissingRib,
    #[error("domain filter requires a dataset with a domain column")]
    MissingDomainField,
    #[error("feature {0:?} does not exist in the dataset schema")]
    UnknownFeature(String),
    #[error("tables disagree: {0}")]
    SpecMismatch(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("population {population} is smaller than the {users} users aggregated")]
    InvalidPopulation { population: u64, users: u64 },
}

/// Record selection criterion. Only server-side attributes are
/// filterable; there is deliberately no way to express a client match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum FilterSpec {
    All,
    ServerIp {
        addrs: BTreeSet<IpAddr>,
    },
    /// `exact` entries match the whole name; `suffixes` hold the tail of
    /// `*.tail` patterns and match proper subdomains only (the apex must
    /// be listed in `exact` if wanted). Both sides are compared after
    /// lowercasing and stripping one trailing dot.
    Domain {
        exact: BTreeSet<String>,
        suffixes: BTreeSet<String>,
    },
    Asn {
        asns: BTreeSet<Asn>,
        /// Also match addresses no prefix covers.
        include_unknown: bool,
    },
}

fn normalize_domain(name: &str) -> String {
    name.trim().trim_end_matches('.').to_ascii_lowercase()
}

impl FilterSpec {
    pub fn server_ips(addrs: impl IntoIterator<Item = IpAddr>) -> FilterSpec {
        FilterSpec::ServerIp {
            addrs: addrs.into_iter().collect(),
        }
    }

    /// Builds a domain filter from patterns; `*.x` entries become suffix
    /// matches, everything else an exact match.
    pub fn domains<S: AsRef<str>>(patterns: impl IntoIterator<Item = S>) -> FilterSpec {
        let mut exact = BTreeSet::new();
        let mut suffixes = BTreeSet::new();
        for p in patterns {
            match p.as_ref().trim().strip_prefix("*.") {
                Some(tail) => suffixes.insert(normalize_domain(tail)),
                None => exact.insert(normalize_domain(p.as_ref())),
            };
        }
        FilterSpec::Domain { exact, suffixes }
    }

    pub fn asns(asns: impl IntoIterator<Item = Asn>, include_unknown: bool) -> FilterSpec {
        FilterSpec::Asn {
            asns: asns.into_iter().collect(),
            include_unknown,
        }
    }

    /// Structural checks that do not need the dataset.
    pub fn validate(&self) -> Result<(), SelectError> {
        let empty = match self {
            FilterSpec::All => false,
            FilterSpec::ServerIp { addrs } => addrs.is_empty(),
            FilterSpec::Domain { exact, suffixes } => {
                if exact.iter().chain(suffixes).any(|d| d.is_empty()) {
                    return Err(SelectError::InvalidFilter("empty domain pattern".into()));
                }
                exact.is_empty() && suffixes.is_empty()
            }
            FilterSpec::Asn {
                asns,
                include_unknown,
            } => asns.is_empty() && !include_unknown,
        };
        if empty {
            return Err(SelectError::InvalidFilter(
                "criterion set must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Rejects combinations the dataset cannot satisfy, like a domain
    /// filter over a format that carries no domain column.
    pub fn validate_against_schema(&self, schema: &DatasetSchema) -> Result<(), SelectError> {
        if matches!(self, FilterSpec::Domain { .. }) && !schema.has_domain {
            return Err(SelectError::MissingDomainField);
        }
        Ok(())
    }

    pub fn needs_rib(&self) -> bool {
        matches!(self, FilterSpec::Asn { .. })
    }

    /// Human-readable one-liner for result metadata. Filter parameters
    /// are operator-chosen public values, never data.
    pub fn summary(&self) -> String {
        fn join<T: std::fmt::Display>(items: impl IntoIterator<Item = T>) -> String {
            items
                .into_iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        }
        match self {
            FilterSpec::All => "all".to_string(),
            FilterSpec::ServerIp { addrs } => format!("server-ip({})", join(addrs)),
            FilterSpec::Domain { exact, suffixes } => {
                let pats = exact
                    .iter()
                    .cloned()
                    .chain(suffixes.iter().map(|s| format!("*.{s}")));
                format!("domain({})", join(pats))
            }
            FilterSpec::Asn {
                asns,
                include_unknown,
            } => {
                let mut inner = join(asns);
                if *include_unknown {
                    if !inner.is_empty() {
                        inner.push_str(", ");
                    }
                    inner.push_str("unknown");
                }
                format!("asn({inner})")
            }
        }
    }

    /// Whether `record` satisfies the criterion. For ASN filters the
    /// caller must have checked `needs_rib` against an available table.
    pub fn matches(&self, record: &FlowRecord, rib: Option<&RoutingInformationBase>) -> bool {
        match self {
            FilterSpec::All => true,
            FilterSpec::ServerIp { addrs } => addrs.contains(&record.server_ip),
            FilterSpec::Domain { exact, suffixes } => match &record.domain {
                Some(d) => {
                    let d = normalize_domain(d);
                    exact.contains(&d)
                        || suffixes.iter().any(|s| {
                            d.len() > s.len() + 1
                                && d.ends_with(s)
                                && d.as_bytes()[d.len() - s.len() - 1] == b'.'
                        })
                }
                None => false,
            },
            FilterSpec::Asn {
                asns,
                include_unknown,
            } => match rib.and_then(|r| r.lookup(record.server_ip)) {
                Some(asn) => asns.contains(&asn),
                None => *include_unknown,
            },
        }
    }
}

/// Streaming filter over an in-memory record sequence.
pub fn apply_filter<'a>(
    records: impl Iterator<Item = FlowRecord> + 'a,
    spec: &'a FilterSpec,
    rib: Option<&'a RoutingInformationBase>,
) -> Result<impl Iterator<Item = FlowRecord> + 'a, SelectError> {
    spec.validate()?;
    if spec.needs_rib() && rib.is_none() {
        return Err(SelectError::MissingRib);
    }
    Ok(records.filter(move |r| spec.matches(r, rib)))
}

/// How multiple observations of one feature collapse per user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureReducer {
    Avg,
    Min,
    Max,
}

/// The per-user statistic a query computes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PerUserSpec {
    FlowCount,
    VolumeDown,
    VolumeUp,
    VolumeTotal,
    Feature {
        name: String,
        reducer: FeatureReducer,
    },
    Presence,
}

impl PerUserSpec {
    pub fn validate_against_schema(&self, schema: &DatasetSchema) -> Result<(), SelectError> {
        if let PerUserSpec::Feature { name, .. } = self {
            if !schema.feature_names.iter().any(|f| f == name) {
                return Err(SelectError::UnknownFeature(name.clone()));
            }
        }
        Ok(())
    }

    /// Zero is meaningful only for additive statistics.
    pub fn supports_inactive_users(&self) -> bool {
        matches!(
            self,
            PerUserSpec::FlowCount
                | PerUserSpec::VolumeDown
                | PerUserSpec::VolumeUp
                | PerUserSpec::VolumeTotal
        )
    }
}

/// Per-user accumulator state. Volumes and counts stay integral so that
/// merging partials is exact in any order; averages carry (sum, count)
/// for the same reason.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Accum {
    Count(u64),
    Sum(u64),
    Extreme(f64),
    Avg { sum: f64, count: u64 },
    Present,
}

impl Accum {
    fn value(&self) -> f64 {
        match *self {
            Accum::Count(n) => n as f64,
            Accum::Sum(s) => s as f64,
            Accum::Extreme(v) => v,
            Accum::Avg { sum, count } => sum / count as f64,
            Accum::Present => 1.0,
        }
    }

    fn merge(&mut self, other: &Accum, spec: &PerUserSpec) {
        match (self, other) {
            (Accum::Count(a), Accum::Count(b)) => *a += b,
            (Accum::Sum(a), Accum::Sum(b)) => *a = a.saturating_add(*b),
            (Accum::Extreme(a), Accum::Extreme(b)) => {
                let min = matches!(
                    spec,
                    PerUserSpec::Feature {
                        reducer: FeatureReducer::Min,
                        ..
                    }
                );
                *a = if min { a.min(*b) } else { a.max(*b) };
            }
            (Accum::Avg { sum, count }, Accum::Avg { sum: s2, count: c2 }) => {
                *sum += s2;
                *count += c2;
            }
            (Accum::Present, Accum::Present) => {}
            _ => unreachable!("accumulators of one table share a variant"),
        }
    }
}

/// One aggregate value per observed client, plus the count of distinct
/// clients in the dataset before filtering. Client identifiers are not
/// exposed; downstream consumers see only the multiset of values.
#[derive(Debug, Clone, PartialEq)]
pub struct PerUserTable {
    spec: PerUserSpec,
    entries: BTreeMap<String, Accum>,
    total_population: u64,
}

impl PerUserTable {
    pub fn spec(&self) -> &PerUserSpec {
        &self.spec
    }

    /// Users with at least one contributing record.
    pub fn users(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_population(&self) -> u64 {
        self.total_population
    }

    /// The aggregate values in a deterministic (client-sorted) order,
    /// without the identifiers.
    pub fn values(&self) -> Vec<f64> {
        self.entries.values().map(Accum::value).collect()
    }

    /// Inserts an explicit zero for every listed user that produced no
    /// matching flows. Only meaningful for counts and volumes.
    pub fn include_inactive<S: AsRef<str>>(
        &mut self,
        users: impl IntoIterator<Item = S>,
    ) -> Result<(), SelectError> {
        if !self.spec.supports_inactive_users() {
            return Err(SelectError::SpecMismatch(format!(
                "inactive users have no zero value under {:?}",
                self.spec
            )));
        }
        let zero = match self.spec {
            PerUserSpec::FlowCount => Accum::Count(0),
            _ => Accum::Sum(0),
        };
        for user in users {
            self.entries
                .entry(user.as_ref().to_string())
                .or_insert(zero);
        }
        if (self.entries.len() as u64) > self.total_population {
            return Err(SelectError::InvalidPopulation {
                population: self.total_population,
                users: self.entries.len() as u64,
            });
        }
        Ok(())
    }

    #[cfg(test)]
    fn snapshot(&self) -> Vec<(String, f64)> {
        self.entries
            .iter()
            .map(|(k, v)| (k.clone(), v.value()))
            .collect()
    }
}

/// Incremental builder for a [`PerUserTable`]; the engine pushes records
/// one partition at a time.
#[derive(Debug)]
pub struct Aggregator {
    spec: PerUserSpec,
    entries: BTreeMap<String, Accum>,
}

impl Aggregator {
    pub fn new(spec: PerUserSpec) -> Aggregator {
        Aggregator {
            spec,
            entries: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, record: &FlowRecord) {
        let fresh = match &self.spec {
            PerUserSpec::FlowCount => Accum::Count(1),
            PerUserSpec::VolumeDown => Accum::Sum(record.bytes_down),
            PerUserSpec::VolumeUp => Accum::Sum(record.bytes_up),
            PerUserSpec::VolumeTotal => {
                Accum::Sum(record.bytes_up.saturating_add(record.bytes_down))
            }
            PerUserSpec::Feature { name, reducer } => match record.features.get(name) {
                Some(&v) => match reducer {
                    FeatureReducer::Avg => Accum::Avg { sum: v, count: 1 },
                    FeatureReducer::Min | FeatureReducer::Max => Accum::Extreme(v),
                },
                // Records without the feature contribute nothing.
                None => return,
            },
            PerUserSpec::Presence => Accum::Present,
        };
        match self.entries.get_mut(&record.client_id) {
            Some(acc) => acc.merge(&fresh, &self.spec),
            None => {
                self.entries.insert(record.client_id.clone(), fresh);
            }
        }
    }

    /// Distinct users accumulated so far.
    pub fn users(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn finish(self, total_population: u64) -> Result<PerUserTable, SelectError> {
        let users = self.entries.len() as u64;
        if users > total_population {
            return Err(SelectError::InvalidPopulation {
                population: total_population,
                users,
            });
        }
        Ok(PerUserTable {
            spec: self.spec,
            entries: self.entries,
            total_population,
        })
    }
}

/// One-shot aggregation of an in-memory record sequence.
pub fn aggregate_per_user(
    records: impl IntoIterator<Item = FlowRecord>,
    spec: &PerUserSpec,
    total_population: u64,
) -> Result<PerUserTable, SelectError> {
    let mut agg = Aggregator::new(spec.clone());
    for record in records {
        agg.push(&record);
    }
    agg.finish(total_population)
}

/// Where the merged table's population figure comes from.
///
/// Partitions are usually split by time, not by user, so summing
/// per-partition distinct counts would overcount; the engine passes the
/// globally computed figure instead. Summing is correct only when the
/// caller knows the partitions are user-disjoint.
#[derive(Debug, Clone, Copy)]
pub enum PopulationMerge {
    Global(u64),
    SumDisjoint,
}

/// Combines per-partition tables into one, as if the whole stream had
/// been aggregated in partition order.
pub fn merge_partials(
    tables: Vec<PerUserTable>,
    spec: &PerUserSpec,
    population: PopulationMerge,
) -> Result<PerUserTable, SelectError> {
    let mut entries: BTreeMap<String, Accum> = BTreeMap::new();
    let mut disjoint_sum: u64 = 0;
    for table in &tables {
        if table.spec != *spec {
            return Err(SelectError::SpecMismatch(format!(
                "partial built under {:?}, merge requested under {:?}",
                table.spec, spec
            )));
        }
        disjoint_sum += table.total_population;
        for (user, acc) in &table.entries {
            match entries.get_mut(user) {
                Some(existing) => existing.merge(acc, spec),
                None => {
                    entries.insert(user.clone(), *acc);
                }
            }
        }
    }
    let total_population = match population {
        PopulationMerge::Global(n) => n,
        PopulationMerge::SumDisjoint => disjoint_sum,
    };
    let users = entries.len() as u64;
    if users > total_population {
        return Err(SelectError::InvalidPopulation {
            population: total_population,
            users,
        });
    }
    Ok(PerUserTable {
        spec: spec.clone(),
        entries,
        total_population,
    })
}
