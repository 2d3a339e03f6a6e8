//! Desk-scale replications of the two published experiments, emitted as
//! plot-ready CSV.
//!
//! The sensitivity study sweeps epsilon over a share-of-users query for
//! one popular and one rare site and reports the spread of 100 noisy
//! answers per point. It runs in simulation mode: no budget is spent and
//! none of its outputs are releasable measurements.
//!
//! The volume study runs the real pipeline: four charged histogram
//! queries (down/up x tcp/udp) at epsilon 0.25 each, so a fresh
//! allocation of 1.0 lands at exactly zero. Each histogram is reduced to
//! an ECDF after discarding the bins below 10 kB, mirroring how the
//! original figures treat negligible per-user totals.

use std::io::Write;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use flowdp_core::budget::BudgetLedger;
use flowdp_core::dp::{BinSpec, Epsilon, NoiseSource};
use flowdp_core::engine::{
    Engine, EngineConfig, EngineError, LedgerMode, Payload, QueryRequest, ReleaseSpec,
};
use flowdp_core::flow::{DatasetDescriptor, DatasetFormat};
use flowdp_core::select::{FilterSpec, PerUserSpec};

use crate::synth::GroundTruth;

pub const EPS_GRID: [f64; 5] = [0.1, 0.5, 1.0, 5.0, 10.0];
pub const DEFAULT_REPETITIONS: usize = 100;

/// Smallest per-user total the volume ECDF keeps, in bytes.
pub const VOLUME_FLOOR_BYTES: f64 = 1e4;

fn volume_bins() -> BinSpec {
    BinSpec::Logarithmic {
        lower: 1e2,
        upper: 1e11,
        count: 100,
    }
}

#[derive(Debug, Error)]
pub enum ReplicateError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("writing study output: {0}")]
    Io(#[from] std::io::Error),
    #[error("replication setup: {0}")]
    Setup(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsPoint {
    pub site: String,
    pub eps: f64,
    pub true_share: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

/// Epsilon-sensitivity study over every site recorded in the ground
/// truth. Writes `site,eps,true_share,median,p5,p95` rows.
#[allow(clippy::too_many_arguments)]
pub fn eps_study(
    dataset: &DatasetDescriptor,
    truth: &GroundTruth,
    ledger: &BudgetLedger,
    workers: usize,
    operator: &str,
    repetitions: usize,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<Vec<EpsPoint>, ReplicateError> {
    if truth.sites.is_empty() {
        return Err(ReplicateError::Setup(
            "ground truth lists no sites to study".into(),
        ));
    }
    let engine = Engine::new(
        EngineConfig {
            workers,
            population_cache: None,
        },
        ledger,
        None,
    );
    let mut rng = match seed {
        Some(s) => NoiseSource::seeded(s),
        None => NoiseSource::entropy(),
    };

    writeln!(out, "site,eps,true_share,median,p5,p95")?;
    let mut points = Vec::new();
    for site in &truth.sites {
        for &eps in EPS_GRID.iter() {
            let request = QueryRequest {
                dataset: dataset.clone(),
                filter: FilterSpec::domains([site.domain.as_str()]),
                per_user: PerUserSpec::Presence,
                release: ReleaseSpec::Histogram {
                    bins: BinSpec::Uniform {
                        lower: 0.0,
                        upper: 1.0,
                        count: 1,
                    },
                    include_remainder: true,
                },
                epsilon: Epsilon::new(eps).expect("grid epsilons are valid"),
                operator_id: operator.to_string(),
                include_inactive: false,
            };
            let summary = engine.run_repeated(
                &request,
                repetitions,
                LedgerMode::Simulation,
                &mut rng,
                seed,
            )?;
            let point = EpsPoint {
                site: site.domain.clone(),
                eps,
                true_share: site.true_share,
                median: summary.median,
                p5: summary.p5,
                p95: summary.p95,
            };
            writeln!(
                out,
                "{},{},{},{},{},{}",
                point.site, point.eps, point.true_share, point.median, point.p5, point.p95
            )?;
            points.push(point);
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, Serialize)]
pub struct EcdfPoint {
    pub direction: String,
    pub protocol: String,
    pub bin_upper_bytes: f64,
    pub ecdf: f64,
}

#[derive(Debug, Serialize)]
pub struct VolumeStudy {
    pub points: Vec<EcdfPoint>,
    pub epsilon_charged: f64,
}

/// Noisy histogram counts to ECDF points, dropping the bins at or below
/// the floor. Pure post-processing of one DP release.
fn histogram_to_ecdf(
    direction: &str,
    protocol: &str,
    edges: &[f64],
    counts: &[f64],
) -> Vec<EcdfPoint> {
    let kept: Vec<(f64, f64)> = edges[1..]
        .iter()
        .zip(counts)
        .filter(|(upper, _)| **upper > VOLUME_FLOOR_BYTES)
        .map(|(upper, count)| (*upper, *count))
        .collect();
    let total: f64 = kept.iter().map(|(_, c)| c).sum();
    let mut acc = 0.0;
    kept.into_iter()
        .map(|(upper, count)| {
            acc += count;
            EcdfPoint {
                direction: direction.to_string(),
                protocol: protocol.to_string(),
                bin_upper_bytes: upper,
                ecdf: if total > 0.0 { acc / total } else { 0.0 },
            }
        })
        .collect()
}

/// Four charged histogram queries: direction x protocol at eps 0.25.
/// `tcp_dir` and `udp_dir` hold the per-protocol partitions of one
/// trace. Writes `direction,protocol,bin_upper_bytes,ecdf` rows.
pub fn volume_study(
    format: DatasetFormat,
    tcp_dir: &Path,
    udp_dir: &Path,
    ledger: &BudgetLedger,
    workers: usize,
    operator: &str,
    out: &mut dyn Write,
) -> Result<VolumeStudy, ReplicateError> {
    let engine = Engine::new(
        EngineConfig {
            workers,
            population_cache: None,
        },
        ledger,
        None,
    );
    let mut rng = NoiseSource::entropy();
    let quarter = Epsilon::new(0.25).expect("0.25 is valid");

    writeln!(out, "direction,protocol,bin_upper_bytes,ecdf")?;
    let mut points = Vec::new();
    let mut charged = 0.0;
    for (per_user, direction) in [
        (PerUserSpec::VolumeDown, "down"),
        (PerUserSpec::VolumeUp, "up"),
    ] {
        for (dir, protocol) in [(tcp_dir, "tcp"), (udp_dir, "udp")] {
            let request = QueryRequest {
                dataset: DatasetDescriptor {
                    format,
                    paths: vec![dir.to_path_buf()],
                    column_mapping: None,
                },
                filter: FilterSpec::All,
                per_user: per_user.clone(),
                release: ReleaseSpec::Histogram {
                    bins: volume_bins(),
                    include_remainder: false,
                },
                epsilon: quarter,
                operator_id: operator.to_string(),
                include_inactive: false,
            };
            let result = engine.execute(&request, &mut rng, None)?;
            charged += result.metadata.epsilon_spent;
            let Payload::Histogram(h) = result.payload else {
                return Err(ReplicateError::Setup(
                    "histogram release returned a non-histogram payload".into(),
                ));
            };
            for point in histogram_to_ecdf(direction, protocol, &h.edges, &h.counts) {
                writeln!(
                    out,
                    "{},{},{},{}",
                    point.direction, point.protocol, point.bin_upper_bytes, point.ecdf
                )?;
                points.push(point);
            }
        }
    }
    Ok(VolumeStudy {
        points,
        epsilon_charged: charged,
    })
}
