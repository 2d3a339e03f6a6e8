//! Operator front end: configuration, command wiring, synthetic trace
//! generation and the two replication studies.
//!
//! Everything here is plumbing around `flowdp_core`; no privacy logic
//! lives in this crate.

pub mod config;
pub mod replicate;
pub mod synth;
