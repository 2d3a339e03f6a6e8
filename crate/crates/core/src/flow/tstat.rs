//! Tstat-style log parsing.
//!
//! Tstat logs are whitespace-separated with a `#name:index` header line.
//! Every header column not consumed by the field mapping is captured as a
//! numeric feature keyed by its column name, which is how the "hundreds
//! of features" of rich exporters stay queryable without a fixed schema.
//! The `-` marker denotes an absent value.

use std::io::BufRead;
use std::path::Path;

use super::{ColumnMapping, DatasetFormat, FlowError, RecordReader};

/// Opens a record stream over Tstat log bytes. `domain` is populated from
/// the mapped SNI/Host column when present and not the missing marker.
pub fn parse_tstat_log(
    input: impl BufRead + Send + 'static,
    mapping: ColumnMapping,
) -> Result<RecordReader, FlowError> {
    RecordReader::new(
        DatasetFormat::TstatLog,
        Path::new("<tstat-log>"),
        Box::new(input),
        mapping,
    )
}
