//! Persistent privacy-budget accounting.
//!
//! Every query charges its epsilon against the operator's allocation
//! BEFORE any data is touched (charge-then-compute): a durable ledger
//! record is the precondition for running a mechanism, so a crash can
//! only ever waste budget, never leak an uncharged result. The ledger is
//! an append-only line-delimited JSON file; an exclusive file lock makes
//! charges atomic across processes.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::Epsilon;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("io error on ledger {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger {path} is corrupt at line {line}: {reason}")]
    CorruptLedger {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error(
        "operator {operator}: charging {requested} would exceed the allocation \
         ({spent} of {allocated} already spent)"
    )]
    InsufficientBudget {
        operator: String,
        requested: f64,
        spent: f64,
        allocated: f64,
    },
    #[error("operator {0:?} has no budget allocation")]
    UnknownOperator(String),
    #[error("operator {operator}: allocation must be positive and finite, got {value}")]
    InvalidAllocation { operator: String, value: f64 },
}

/// One ledger line. A positive `eps` with `released: false` is a charge;
/// an `eps` of zero with `released: true` marks the later successful
/// release of the query named by the same fingerprint. Records are never
/// rewritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChargeRecord {
    /// Unix milliseconds; non-decreasing within the file.
    pub ts: i64,
    pub operator: String,
    pub eps: f64,
    pub query_hash: String,
    pub released: bool,
}

/// Budget position of one operator as derived from the ledger.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OperatorAccount {
    pub operator_id: String,
    pub allocated: f64,
    pub spent: f64,
}

impl OperatorAccount {
    pub fn remaining(&self) -> f64 {
        self.allocated - self.spent
    }
}

/// Parsed ledger contents: a pure fold over the record lines.
#[derive(Debug, Default, Clone)]
pub struct LedgerState {
    pub records: Vec<ChargeRecord>,
    /// A partial final line (crash artifact) was found and ignored.
    pub truncated_tail: bool,
}

impl LedgerState {
    pub fn spent(&self, operator: &str) -> f64 {
        self.records
            .iter()
            .filter(|r| r.operator == operator)
            .map(|r| r.eps)
            .sum()
    }

    fn last_ts(&self) -> i64 {
        self.records.last().map(|r| r.ts).unwrap_or(i64::MIN)
    }
}

/// Proof of a durable charge; the engine must hold one of these before
/// it runs any mechanism, and presents it back to record the release.
#[derive(Debug, Clone)]
pub struct ChargeToken {
    operator: String,
    eps: f64,
    query_hash: String,
    ts: i64,
}

impl ChargeToken {
    pub fn operator(&self) -> &str {
        &self.operator
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn query_hash(&self) -> &str {
        &self.query_hash
    }

    pub fn ts(&self) -> i64 {
        self.ts
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses ledger text. Returns the records, the byte length of the valid
/// prefix, and whether a partial tail was dropped. A malformed line that
/// is not the unterminated final one is corruption.
fn parse_ledger(path: &Path, text: &str) -> Result<(Vec<ChargeRecord>, u64, bool), LedgerError> {
    let mut records = Vec::new();
    let mut valid_len = 0u64;
    let mut truncated = false;
    let mut offset = 0usize;
    let mut lineno = 0usize;

    while offset < text.len() {
        lineno += 1;
        let rest = &text[offset..];
        let (line, consumed, terminated) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1, true),
            None => (rest, rest.len(), false),
        };
        match serde_json::from_str::<ChargeRecord>(line) {
            Ok(rec) => {
                records.push(rec);
                valid_len = (offset + consumed) as u64;
            }
            Err(e) if !terminated => {
                // A crash mid-append leaves exactly one unterminated,
                // unparseable tail; ignore it and let the next writer
                // trim it off.
                log::warn!(
                    "ledger {}: dropping truncated final line {lineno} ({e})",
                    path.display()
                );
                truncated = true;
            }
            Err(e) => {
                return Err(LedgerError::CorruptLedger {
                    path: path.to_path_buf(),
                    line: lineno,
                    reason: e.to_string(),
                });
            }
        }
        offset += consumed;
    }
    Ok((records, valid_len, truncated))
}

/// Reads the ledger without locking; a missing file is an empty ledger.
pub fn load_ledger(path: &Path) -> Result<LedgerState, LedgerError> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(io_err(path)(e)),
    };
    let (records, _, truncated_tail) = parse_ledger(path, &text)?;
    Ok(LedgerState {
        records,
        truncated_tail,
    })
}

#[cfg(unix)]
fn lock_exclusive(file: &File) -> std::io::Result<()> {
    use std::os::unix::io::AsRawFd;
    let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
    if rc == 0 {
        Ok(())
    } else {
        Err(std::io::Error::last_os_error())
    }
}

/// Runs `build` against the current state and appends its record, all
/// under an exclusive lock with the write fsynced before returning. A
/// truncated tail from an earlier crash is trimmed here, while locked.
fn locked_append(
    path: &Path,
    build: impl FnOnce(&LedgerState) -> Result<ChargeRecord, LedgerError>,
) -> Result<ChargeRecord, LedgerError> {
    let mut file = OpenOptions::new()
        .read(true)
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .map_err(io_err(path))?;
    lock_exclusive(&file).map_err(io_err(path))?;

    let mut text = String::new();
    file.read_to_string(&mut text).map_err(io_err(path))?;
    let (records, valid_len, truncated) = parse_ledger(path, &text)?;
    if truncated || valid_len < text.len() as u64 {
        file.set_len(valid_len).map_err(io_err(path))?;
    }
    let state = LedgerState {
        records,
        truncated_tail: truncated,
    };

    let mut record = build(&state)?;
    // Wall clocks can step backwards; keep file order monotone anyway.
    record.ts = record.ts.max(state.last_ts());

    let mut line = serde_json::to_string(&record).expect("record serializes");
    line.push('\n');
    file.seek(SeekFrom::Start(valid_len))
        .map_err(io_err(path))?;
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))?;
    Ok(record)
    // Lock releases when `file` drops.
}

/// Appends a pre-built record without budget checks. Prefer
/// [`BudgetLedger::charge`]; this exists for replay tooling and tests.
pub fn append_record(path: &Path, record: ChargeRecord) -> Result<(), LedgerError> {
    locked_append(path, |_| Ok(record))?;
    Ok(())
}

/// Handle over the ledger file plus the static allocation table.
#[derive(Debug, Clone)]
pub struct BudgetLedger {
    path: PathBuf,
    allocations: BTreeMap<String, f64>,
}

impl BudgetLedger {
    /// Validates allocations (each must be positive and finite).
    pub fn open(
        path: impl Into<PathBuf>,
        allocations: BTreeMap<String, f64>,
    ) -> Result<BudgetLedger, LedgerError> {
        for (operator, &value) in &allocations {
            if !(value.is_finite() && value > 0.0) {
                return Err(LedgerError::InvalidAllocation {
                    operator: operator.clone(),
                    value,
                });
            }
        }
        Ok(BudgetLedger {
            path: path.into(),
            allocations,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn operators(&self) -> impl Iterator<Item = &str> {
        self.allocations.keys().map(String::as_str)
    }

    pub fn state(&self) -> Result<LedgerState, LedgerError> {
        load_ledger(&self.path)
    }

    pub fn account(&self, operator: &str) -> Result<OperatorAccount, LedgerError> {
        let allocated = *self
            .allocations
            .get(operator)
            .ok_or_else(|| LedgerError::UnknownOperator(operator.to_string()))?;
        let spent = self.state()?.spent(operator);
        Ok(OperatorAccount {
            operator_id: operator.to_string(),
            allocated,
            spent,
        })
    }

    /// Durably charges `eps` against `operator`, or refuses without
    /// writing anything if the allocation cannot cover it.
    pub fn charge(
        &self,
        operator: &str,
        eps: Epsilon,
        query_hash: &str,
    ) -> Result<ChargeToken, LedgerError> {
        let allocated = *self
            .allocations
            .get(operator)
            .ok_or_else(|| LedgerError::UnknownOperator(operator.to_string()))?;
        let record = locked_append(&self.path, |state| {
            let spent = state.spent(operator);
            if spent + eps.get() > allocated {
                return Err(LedgerError::InsufficientBudget {
                    operator: operator.to_string(),
                    requested: eps.get(),
                    spent,
                    allocated,
                });
            }
            Ok(ChargeRecord {
                ts: chrono::Utc::now().timestamp_millis(),
                operator: operator.to_string(),
                eps: eps.get(),
                query_hash: query_hash.to_string(),
                released: false,
            })
        })?;
        Ok(ChargeToken {
            operator: record.operator,
            eps: record.eps,
            query_hash: record.query_hash,
            ts: record.ts,
        })
    }

    /// Records that the charged query's result actually went out. Spends
    /// nothing; purely an audit marker.
    pub fn mark_released(&self, token: &ChargeToken) -> Result<(), LedgerError> {
        locked_append(&self.path, |_| {
            Ok(ChargeRecord {
                ts: chrono::Utc::now().timestamp_millis(),
                operator: token.operator.clone(),
                eps: 0.0,
                query_hash: token.query_hash.clone(),
                released: true,
            })
        })?;
        Ok(())
    }
}
