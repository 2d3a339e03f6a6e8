//! NFDump-style CSV parsing.
//!
//! Expects a comma-separated header naming each column, then one row per
//! flow. NetFlow carries no domain information, so `domain` is always
//! absent on records from this format, and no extra columns are captured
//! as features.

use std::io::BufRead;
use std::path::Path;

use super::{ColumnMapping, DatasetFormat, FlowError, RecordReader};

/// Opens a record stream over NFDump CSV bytes. The mapping must resolve
/// every required canonical field against the header, otherwise the call
/// fails with `MissingColumn` before any row is read.
pub fn parse_netflow_csv(
    input: impl BufRead + Send + 'static,
    mapping: ColumnMapping,
) -> Result<RecordReader, FlowError> {
    RecordReader::new(
        DatasetFormat::NetflowCsv,
        Path::new("<netflow-csv>"),
        Box::new(input),
        mapping,
    )
}
