//! Canonical flow-record data model and the on-disk formats that feed it.
//!
//! Two exporter formats are supported: NFDump-style CSV and Tstat-style
//! whitespace-separated logs. Both parse into [`FlowRecord`], the single
//! in-memory representation the rest of the pipeline consumes. Files with
//! a `.gz` extension are decompressed transparently.

mod canonical;
mod netflow;
mod reader;
mod tstat;

pub use canonical::{read_canonical_csv, write_canonical_csv};
pub use netflow::parse_netflow_csv;
pub use reader::{ParseStats, RecordReader};
pub use tstat::parse_tstat_log;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("header of {path} lacks mapped column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path} does not look like {expected}: {reason}")]
    FormatMismatch {
        path: PathBuf,
        expected: &'static str,
        reason: String,
    },
    #[error("invalid dataset descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("invalid flow record: {0}")]
    InvalidRecord(String),
}

/// Layer-4 protocol of a flow. Only TCP and UDP constitute flow records;
/// rows carrying anything else are skipped at parse time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum L4Protocol {
    Tcp,
    Udp,
}

impl L4Protocol {
    /// Accepts exporter spellings: protocol names (any case) or IANA numbers.
    pub fn parse(token: &str) -> Option<L4Protocol> {
        match token.trim() {
            t if t.eq_ignore_ascii_case("tcp") || t == "6" => Some(L4Protocol::Tcp),
            t if t.eq_ignore_ascii_case("udp") || t == "17" => Some(L4Protocol::Udp),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            L4Protocol::Tcp => "TCP",
            L4Protocol::Udp => "UDP",
        }
    }
}

/// One TCP/UDP flow. `client_id` is an already-anonymized opaque
/// identifier; the crate never attempts to reverse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub client_id: String,
    pub server_ip: IpAddr,
    pub client_port: u16,
    pub server_port: u16,
    pub l4_protocol: L4Protocol,
    /// Bytes client -> server.
    pub bytes_up: u64,
    /// Bytes server -> client.
    pub bytes_down: u64,
    pub packets_up: u64,
    pub packets_down: u64,
    /// Flow start, milliseconds since the Unix epoch. 0 when the dataset
    /// carries no usable timestamp column.
    pub timestamp: i64,
    /// Server domain name from SNI or the HTTP Host header, when the
    /// exporter recorded one.
    pub domain: Option<String>,
    /// Format-specific numeric extras keyed by column name.
    pub features: BTreeMap<String, f64>,
}

impl FlowRecord {
    /// Checks the model invariants: non-empty client id, non-empty domain
    /// when present, finite feature values. Parsers reject rows that
    /// would violate these instead of emitting them.
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.client_id.is_empty() {
            return Err(FlowError::InvalidRecord("empty client_id".into()));
        }
        if matches!(&self.domain, Some(d) if d.is_empty()) {
            return Err(FlowError::InvalidRecord("domain present but empty".into()));
        }
        for (name, value) in &self.features {
            if !value.is_finite() {
                return Err(FlowError::InvalidRecord(format!(
                    "feature {name:?} is not finite"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    NetflowCsv,
    TstatLog,
}

impl DatasetFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetFormat::NetflowCsv => "netflow-csv",
            DatasetFormat::TstatLog => "tstat-log",
        }
    }
}

/// Maps canonical record fields to dataset column names. A column may be
/// referenced by header name or, as a fallback, by 0-based index.
///
/// Per-format defaults target the standard NFDump and Tstat header names;
/// deployments with diverging headers override individual entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub client_id: String,
    pub server_ip: String,
    pub l4_protocol: String,
    pub bytes_up: String,
    pub bytes_down: String,
    pub client_port: Option<String>,
    pub server_port: Option<String>,
    pub packets_up: Option<String>,
    pub packets_down: Option<String>,
    pub timestamp: Option<String>,
    /// SNI / Host column; only meaningful for formats that carry one.
    pub domain: Option<String>,
    /// Token denoting an absent value ("-" for Tstat, "" for CSV).
    pub missing_marker: String,
    /// A file whose malformed-row ratio exceeds this aborts with
    /// FormatMismatch instead of silently dropping most of its rows.
    pub max_malformed_ratio: f64,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            client_id: String::new(),
            server_ip: String::new(),
            l4_protocol: String::new(),
            bytes_up: String::new(),
            bytes_down: String::new(),
            client_port: None,
            server_port: None,
            packets_up: None,
            packets_down: None,
            timestamp: None,
            domain: None,
            missing_marker: String::new(),
            max_malformed_ratio: 0.5,
        }
    }
}

/// Partial mapping override: only the named fields replace the format
/// default. Supplied through the CLI config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMappingOverride {
    pub client_id: Option<String>,
    pub server_ip: Option<String>,
    pub l4_protocol: Option<String>,
    pub bytes_up: Option<String>,
    pub bytes_down: Option<String>,
    pub client_port: Option<String>,
    pub server_port: Option<String>,
    pub packets_up: Option<String>,
    pub packets_down: Option<String>,
    pub timestamp: Option<String>,
    pub domain: Option<String>,
    pub missing_marker: Option<String>,
    pub max_malformed_ratio: Option<f64>,
}

impl ColumnMapping {
    /// Default mapping for NFDump's standard CSV export header.
    pub fn netflow_default() -> Self {
        ColumnMapping {
            client_id: "sa".into(),
            server_ip: "da".into(),
            l4_protocol: "pr".into(),
            bytes_up: "ibyt".into(),
            bytes_down: "obyt".into(),
            client_port: Some("sp".into()),
            server_port: Some("dp".into()),
            packets_up: Some("ipkt".into()),
            packets_down: Some("opkt".into()),
            timestamp: Some("ts".into()),
            domain: None,
            missing_marker: String::new(),
            max_malformed_ratio: 0.5,
        }
    }

    /// Default mapping for Tstat-style logs.
    pub fn tstat_default() -> Self {
        ColumnMapping {
            client_id: "c_ip".into(),
            server_ip: "s_ip".into(),
            l4_protocol: "proto".into(),
            bytes_up: "c_bytes_all".into(),
            bytes_down: "s_bytes_all".into(),
            client_port: Some("c_port".into()),
            server_port: Some("s_port".into()),
            packets_up: Some("c_pkts_all".into()),
            packets_down: Some("s_pkts_all".into()),
            timestamp: Some("first".into()),
            domain: Some("c_tls_SNI".into()),
            missing_marker: "-".into(),
            max_malformed_ratio: 0.5,
        }
    }

    pub fn for_format(format: DatasetFormat) -> Self {
        match format {
            DatasetFormat::NetflowCsv => Self::netflow_default(),
            DatasetFormat::TstatLog => Self::tstat_default(),
        }
    }

    pub fn apply_override(mut self, ov: &ColumnMappingOverride) -> Self {
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &ov.$field {
                    self.$field = v.clone();
                }
            };
        }
        macro_rules! set_opt {
            ($field:ident) => {
                if let Some(v) = &ov.$field {
                    self.$field = Some(v.clone());
                }
            };
        }
        set!(client_id);
        set!(server_ip);
        set!(l4_protocol);
        set!(bytes_up);
        set!(bytes_down);
        set_opt!(client_port);
        set_opt!(server_port);
        set_opt!(packets_up);
        set_opt!(packets_down);
        set_opt!(timestamp);
        set_opt!(domain);
        set!(missing_marker);
        if let Some(r) = ov.max_malformed_ratio {
            self.max_malformed_ratio = r;
        }
        self
    }
}

/// Where a dataset lives on disk and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub format: DatasetFormat,
    /// Files or directories; directories expand to the regular files they
    /// contain. Partition order is lexicographic over the expanded paths.
    pub paths: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_mapping: Option<ColumnMappingOverride>,
}

impl DatasetDescriptor {
    pub fn new(format: DatasetFormat, paths: Vec<PathBuf>) -> Result<Self, FlowError> {
        let desc = DatasetDescriptor {
            format,
            paths,
            column_mapping: None,
        };
        desc.validate()?;
        Ok(desc)
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.paths.is_empty() {
            return Err(FlowError::InvalidDescriptor(
                "paths must be non-empty".into(),
            ));
        }
        Ok(())
    }

    /// Effective mapping: format default plus any override.
    pub fn mapping(&self) -> ColumnMapping {
        let base = ColumnMapping::for_format(self.format);
        match &self.column_mapping {
            Some(ov) => base.apply_override(ov),
            None => base,
        }
    }
}

/// One input file of a dataset. Opening is deferred so partitions can be
/// parsed concurrently by independent workers.
#[derive(Debug, Clone)]
pub struct Partition {
    pub id: String,
    pub path: PathBuf,
    pub format: DatasetFormat,
    mapping: ColumnMapping,
}

impl Partition {
    /// Opens the file (decompressing `.gz` transparently) and returns a
    /// record stream over it.
    pub fn open(&self) -> Result<RecordReader, FlowError> {
        let reader = open_input(&self.path)?;
        RecordReader::new(self.format, &self.path, reader, self.mapping.clone())
    }
}

fn open_input(path: &Path) -> Result<Box<dyn BufRead + Send>, FlowError> {
    let file = File::open(path).map_err(|source| FlowError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_gz = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false);
    if is_gz {
        Ok(Box::new(BufReader::new(flate2::read::GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Expands a descriptor into its partitions, one per file, in
/// lexicographic path order. Every referenced path is checked for
/// existence up front; an unreadable path fails the whole call before any
/// parsing starts. An empty directory yields zero partitions.
pub fn open_dataset(desc: &DatasetDescriptor) -> Result<Vec<Partition>, FlowError> {
    desc.validate()?;
    let mapping = desc.mapping();

    let mut files: Vec<PathBuf> = Vec::new();
    for path in &desc.paths {
        let meta = std::fs::metadata(path).map_err(|source| FlowError::Io {
            path: path.clone(),
            source,
        })?;
        if meta.is_dir() {
            let entries = std::fs::read_dir(path).map_err(|source| FlowError::Io {
                path: path.clone(),
                source,
            })?;
            for entry in entries {
                let entry = entry.map_err(|source| FlowError::Io {
                    path: path.clone(),
                    source,
                })?;
                if entry
                    .file_type()
                    .map_err(|source| FlowError::Io {
                        path: entry.path(),
                        source,
                    })?
                    .is_file()
                {
                    files.push(entry.path());
                }
            }
        } else {
            files.push(path.clone());
        }
    }
    files.sort();
    files.dedup();

    // Fail fast on unreadable files before any record is parsed.
    for f in &files {
        File::open(f).map_err(|source| FlowError::Io {
            path: f.clone(),
            source,
        })?;
    }

    Ok(files
        .into_iter()
        .map(|path| Partition {
            id: path.to_string_lossy().into_owned(),
            path,
            format: desc.format,
            mapping: mapping.clone(),
        })
        .collect())
}

/// Header-derived shape of a dataset: which canonical fields resolve and
/// which feature columns exist. Computed from the first partition without
/// touching any data row, so it is safe to use during request validation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSchema {
    pub has_domain: bool,
    pub feature_names: Vec<String>,
}

/// Probes the first partition's header. A dataset with zero partitions
/// has no domain column and no features.
pub fn probe_schema(desc: &DatasetDescriptor) -> Result<DatasetSchema, FlowError> {
    let partitions = open_dataset(desc)?;
    match partitions.first() {
        Some(p) => {
            let reader = p.open()?;
            Ok(reader.schema())
        }
        None => Ok(DatasetSchema {
            has_domain: false,
            feature_names: Vec::new(),
        }),
    }
}

/// Reads an entire input into memory; used for dataset fingerprinting.
pub(crate) fn read_file_bytes(path: &Path) -> Result<Vec<u8>, FlowError> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| FlowError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(buf)
}
