//! Differentially private analytics over passive network flow records.
//!
//! The crate implements a four-stage query pipeline: a dataset of flow
//! records is read partition by partition, filtered by a server-side
//! criterion, collapsed to one aggregate value per user, and finally
//! released through a differentially private mechanism. A persisted
//! budget ledger meters every release, so the cumulative information an
//! operator extracts is bounded by their epsilon allocation.
//!
//! Nothing leaves the system except through [`dp`] mechanisms; per-user
//! tables never expose client identifiers.

pub mod budget;
pub mod dp;
pub mod engine;
pub mod flow;
pub mod rib;
pub mod select;
