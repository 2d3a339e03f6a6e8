//! Row-level parsing shared by the NetFlow CSV and Tstat readers.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use super::{ColumnMapping, DatasetFormat, DatasetSchema, FlowError, FlowRecord, L4Protocol};

/// Tallies kept while streaming one file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseStats {
    /// Non-empty data rows seen.
    pub rows: u64,
    /// Rows emitted as records.
    pub parsed: u64,
    /// Rows skipped because the protocol is neither TCP nor UDP.
    pub skipped_protocol: u64,
    /// Rows dropped because a field failed to parse.
    pub malformed: u64,
}

enum RowOutcome {
    Record(Box<FlowRecord>),
    OtherProtocol,
    Malformed(String),
}

/// Positions of the mapped columns within a split row.
struct ResolvedColumns {
    client_id: usize,
    server_ip: usize,
    l4_protocol: usize,
    bytes_up: usize,
    bytes_down: usize,
    client_port: Option<usize>,
    server_port: Option<usize>,
    packets_up: Option<usize>,
    packets_down: Option<usize>,
    timestamp: Option<usize>,
    domain: Option<usize>,
    /// Header columns not consumed by the mapping; candidate features.
    extras: Vec<(usize, String)>,
}

/// Streaming record reader over one input file.
///
/// Iteration yields parsed records; malformed rows are tallied and
/// skipped rather than surfaced. When the file ends with a malformed
/// ratio above the configured threshold the stream terminates with a
/// single `FormatMismatch` error.
pub struct RecordReader {
    format: DatasetFormat,
    path: PathBuf,
    input: Box<dyn BufRead + Send>,
    mapping: ColumnMapping,
    header: Vec<String>,
    cols: ResolvedColumns,
    stats: ParseStats,
    line_buf: String,
    done: bool,
}

impl std::fmt::Debug for RecordReader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordReader")
            .field("format", &self.format)
            .field("path", &self.path)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

impl RecordReader {
    pub(super) fn new(
        format: DatasetFormat,
        path: &Path,
        mut input: Box<dyn BufRead + Send>,
        mapping: ColumnMapping,
    ) -> Result<RecordReader, FlowError> {
        let mut first_line = String::new();
        let n = input
            .read_line(&mut first_line)
            .map_err(|source| FlowError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        if n == 0 {
            return Err(FlowError::FormatMismatch {
                path: path.to_path_buf(),
                expected: format.as_str(),
                reason: "empty file, no header".into(),
            });
        }
        let header = parse_header(format, path, first_line.trim_end_matches(['\r', '\n']))?;
        let cols = resolve_columns(format, path, &header, &mapping)?;
        Ok(RecordReader {
            format,
            path: path.to_path_buf(),
            input,
            mapping,
            header,
            cols,
            stats: ParseStats::default(),
            line_buf: String::new(),
            done: false,
        })
    }

    pub fn stats(&self) -> ParseStats {
        self.stats
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    /// Header-derived schema, available before any row is read.
    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            has_domain: self.cols.domain.is_some(),
            feature_names: self
                .cols
                .extras
                .iter()
                .map(|(_, name)| name.clone())
                .collect(),
        }
    }

    fn parse_row(&self, line: &str) -> RowOutcome {
        let fields: Vec<&str> = match self.format {
            DatasetFormat::NetflowCsv => line.split(',').map(str::trim).collect(),
            DatasetFormat::TstatLog => line.split_whitespace().collect(),
        };
        let get = |idx: usize| -> Option<&str> {
            let v = *fields.get(idx)?;
            if v == self.mapping.missing_marker {
                None
            } else {
                Some(v)
            }
        };

        macro_rules! bail {
            ($($arg:tt)*) => {
                return RowOutcome::Malformed(format!($($arg)*))
            };
        }

        let client_id = match get(self.cols.client_id) {
            Some(v) => v.to_string(),
            None => bail!("missing client_id"),
        };
        let server_ip: IpAddr = match get(self.cols.server_ip).map(str::parse) {
            Some(Ok(ip)) => ip,
            _ => bail!("bad server_ip"),
        };
        let proto_token = match get(self.cols.l4_protocol) {
            Some(v) => v,
            None => bail!("missing l4_protocol"),
        };
        let l4_protocol = match L4Protocol::parse(proto_token) {
            Some(p) => p,
            // A recognizable-but-unsupported protocol token is not an
            // error; those rows simply are not flow records.
            None => return RowOutcome::OtherProtocol,
        };
        let bytes_up = match get(self.cols.bytes_up).map(parse_counter) {
            Some(Some(v)) => v,
            _ => bail!("bad bytes_up"),
        };
        let bytes_down = match get(self.cols.bytes_down).map(parse_counter) {
            Some(Some(v)) => v,
            _ => bail!("bad bytes_down"),
        };

        // Optional fields: absent column or missing marker defaults; a
        // present-but-garbled value is malformed.
        macro_rules! opt_counter {
            ($col:expr, $name:literal) => {
                match $col.and_then(|i| get(i)) {
                    Some(tok) => match parse_counter(tok) {
                        Some(v) => v,
                        None => bail!(concat!("bad ", $name)),
                    },
                    None => 0,
                }
            };
        }
        let packets_up = opt_counter!(self.cols.packets_up, "packets_up");
        let packets_down = opt_counter!(self.cols.packets_down, "packets_down");

        let port = |col: Option<usize>| -> Result<u16, String> {
            match col.and_then(get) {
                Some(tok) => tok.parse::<u16>().map_err(|_| format!("bad port {tok:?}")),
                None => Ok(0),
            }
        };
        let client_port = match port(self.cols.client_port) {
            Ok(p) => p,
            Err(e) => bail!("{e}"),
        };
        let server_port = match port(self.cols.server_port) {
            Ok(p) => p,
            Err(e) => bail!("{e}"),
        };

        let timestamp = match self.cols.timestamp.and_then(get) {
            Some(tok) => match parse_timestamp(tok) {
                Some(ts) => ts,
                None => bail!("bad timestamp {tok:?}"),
            },
            None => 0,
        };

        let domain = self
            .cols
            .domain
            .and_then(get)
            .filter(|v| !v.is_empty())
            .map(str::to_string);

        let mut features = BTreeMap::new();
        if self.format == DatasetFormat::TstatLog {
            for (idx, name) in &self.cols.extras {
                if let Some(tok) = get(*idx) {
                    if let Ok(v) = tok.parse::<f64>() {
                        if v.is_finite() {
                            features.insert(name.clone(), v);
                        }
                    }
                }
            }
        }

        let record = FlowRecord {
            client_id,
            server_ip,
            client_port,
            server_port,
            l4_protocol,
            bytes_up,
            bytes_down,
            packets_up,
            packets_down,
            timestamp,
            domain,
            features,
        };
        match record.validate() {
            Ok(()) => RowOutcome::Record(Box::new(record)),
            Err(e) => RowOutcome::Malformed(e.to_string()),
        }
    }
}

impl Iterator for RecordReader {
    type Item = Result<FlowRecord, FlowError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            self.line_buf.clear();
            match self.input.read_line(&mut self.line_buf) {
                Err(source) => {
                    self.done = true;
                    return Some(Err(FlowError::Io {
                        path: self.path.clone(),
                        source,
                    }));
                }
                Ok(0) => {
                    self.done = true;
                    if self.stats.rows > 0 {
                        let ratio = self.stats.malformed as f64 / self.stats.rows as f64;
                        if ratio > self.mapping.max_malformed_ratio {
                            return Some(Err(FlowError::FormatMismatch {
                                path: self.path.clone(),
                                expected: self.format.as_str(),
                                reason: format!(
                                    "{} of {} rows malformed",
                                    self.stats.malformed, self.stats.rows
                                ),
                            }));
                        }
                    }
                    return None;
                }
                Ok(_) => {}
            }
            let line = self.line_buf.trim_end_matches(['\r', '\n']);
            if line.is_empty() || (self.format == DatasetFormat::TstatLog && line.starts_with('#'))
            {
                continue;
            }
            self.stats.rows += 1;
            match self.parse_row(line) {
                RowOutcome::Record(rec) => {
                    self.stats.parsed += 1;
                    return Some(Ok(*rec));
                }
                RowOutcome::OtherProtocol => {
                    self.stats.skipped_protocol += 1;
                }
                RowOutcome::Malformed(reason) => {
                    self.stats.malformed += 1;
                    log::debug!(
                        "{}: row {} skipped: {}",
                        self.path.display(),
                        self.stats.rows,
                        reason
                    );
                }
            }
        }
    }
}

fn parse_header(format: DatasetFormat, path: &Path, line: &str) -> Result<Vec<String>, FlowError> {
    match format {
        DatasetFormat::NetflowCsv => {
            if line.starts_with('#') || !line.contains(',') {
                return Err(FlowError::FormatMismatch {
                    path: path.to_path_buf(),
                    expected: format.as_str(),
                    reason: "header is not a comma-separated column list".into(),
                });
            }
            Ok(line.split(',').map(|c| c.trim().to_string()).collect())
        }
        DatasetFormat::TstatLog => {
            let Some(stripped) = line.strip_prefix('#') else {
                return Err(FlowError::FormatMismatch {
                    path: path.to_path_buf(),
                    expected: format.as_str(),
                    reason: "header line does not start with '#'".into(),
                });
            };
            // Tstat names columns `name:index`; the index part is redundant.
            Ok(stripped
                .split_whitespace()
                .map(|tok| tok.split(':').next().unwrap_or(tok).to_string())
                .collect())
        }
    }
}

fn resolve_columns(
    format: DatasetFormat,
    path: &Path,
    header: &[String],
    mapping: &ColumnMapping,
) -> Result<ResolvedColumns, FlowError> {
    let find = |name: &str| -> Option<usize> {
        header
            .iter()
            .position(|h| h == name)
            .or_else(|| match name.parse::<usize>() {
                Ok(idx) if idx < header.len() => Some(idx),
                _ => None,
            })
    };
    let required = |name: &str| -> Result<usize, FlowError> {
        find(name).ok_or_else(|| FlowError::MissingColumn {
            path: path.to_path_buf(),
            column: name.to_string(),
        })
    };
    let optional = |name: &Option<String>| name.as_deref().and_then(find);

    let cols = ResolvedColumns {
        client_id: required(&mapping.client_id)?,
        server_ip: required(&mapping.server_ip)?,
        l4_protocol: required(&mapping.l4_protocol)?,
        bytes_up: required(&mapping.bytes_up)?,
        bytes_down: required(&mapping.bytes_down)?,
        client_port: optional(&mapping.client_port),
        server_port: optional(&mapping.server_port),
        packets_up: optional(&mapping.packets_up),
        packets_down: optional(&mapping.packets_down),
        timestamp: optional(&mapping.timestamp),
        domain: optional(&mapping.domain),
        extras: Vec::new(),
    };

    let mut used: Vec<usize> = vec![
        cols.client_id,
        cols.server_ip,
        cols.l4_protocol,
        cols.bytes_up,
        cols.bytes_down,
    ];
    used.extend(
        [
            cols.client_port,
            cols.server_port,
            cols.packets_up,
            cols.packets_down,
            cols.timestamp,
            cols.domain,
        ]
        .into_iter()
        .flatten(),
    );

    let extras = if format == DatasetFormat::TstatLog {
        header
            .iter()
            .enumerate()
            .filter(|(i, _)| !used.contains(i))
            .map(|(i, name)| (i, name.clone()))
            .collect()
    } else {
        Vec::new()
    };

    Ok(ResolvedColumns { extras, ..cols })
}

fn parse_counter(token: &str) -> Option<u64> {
    if let Ok(v) = token.parse::<u64>() {
        return Some(v);
    }
    // Some exporters print counters with a decimal point.
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v <= u64::MAX as f64 => {
            Some(v as u64)
        }
        _ => None,
    }
}

/// Accepts `YYYY-MM-DD HH:MM:SS[.fff]` (interpreted as UTC) or a numeric
/// milliseconds-since-epoch value.
fn parse_timestamp(token: &str) -> Option<i64> {
    if token.contains('-') && token.contains(':') {
        let parsed = chrono::NaiveDateTime::parse_from_str(token, "%Y-%m-%d %H:%M:%S%.f")
            .or_else(|_| chrono::NaiveDateTime::parse_from_str(token, "%Y-%m-%d %H:%M:%S"))
            .ok()?;
        return Some(parsed.and_utc().timestamp_millis());
    }
    if let Ok(ms) = token.parse::<i64>() {
        return Some(ms);
    }
    match token.parse::<f64>() {
        Ok(v) if v.is_finite() => Some(v.round() as i64),
        _ => None,
    }
}
