//! Seeded synthetic flow traces with an exact ground-truth sidecar.
//!
//! The generator is a pure function of [`SynthSpec`]: the same spec
//! produces byte-identical files. Traces are split into `tcp/` and
//! `udp/` partition directories so direction-by-protocol studies can
//! target one protocol per dataset, and every user emits background
//! traffic in both protocols so the distinct-user population of each
//! directory equals `n_users`.
//!
//! Site membership is sampled without replacement with exactly
//! `round(n_users * popularity)` members, so the sidecar shares are
//! exact rather than realized Bernoulli rates.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use flowdp_core::flow::DatasetFormat;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth spec: {0}")]
    Invalid(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub domain: String,
    /// Fraction of users that access the site, in (0, 1].
    pub popularity: f64,
}

/// Log-normal parameters in ln-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub location: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionParams {
    pub down: LogNormalParams,
    pub up: LogNormalParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub sites: Vec<SiteSpec>,
    pub tcp: DirectionParams,
    pub udp: DirectionParams,
    /// Geometric success probability; flows per user per destination is
    /// 1 + Geometric(p), mean 1/p.
    pub flows_geometric_p: f64,
    /// Files per protocol directory; flows are dealt round-robin so
    /// most users span several partitions.
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    pub seed: u64,
}

fn default_partitions() -> usize {
    4
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_users < 1 {
            return Err(SynthError::Invalid("n_users must be at least 1".into()));
        }
        for site in &self.sites {
            if !(site.popularity > 0.0 && site.popularity <= 1.0) {
                return Err(SynthError::Invalid(format!(
                    "site {}: popularity {} outside (0, 1]",
                    site.domain, site.popularity
                )));
            }
            if site.domain.is_empty() {
                return Err(SynthError::Invalid("site domain is empty".into()));
            }
        }
        let mut names: Vec<&str> = self.sites.iter().map(|s| s.domain.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.sites.len() {
            return Err(SynthError::Invalid("duplicate site domains".into()));
        }
        if !(self.flows_geometric_p > 0.0 && self.flows_geometric_p <= 1.0) {
            return Err(SynthError::Invalid(format!(
                "flows_geometric_p {} outside (0, 1]",
                self.flows_geometric_p
            )));
        }
        for params in [self.tcp.down, self.tcp.up, self.udp.down, self.udp.up] {
            if !(params.location.is_finite() && params.scale.is_finite() && params.scale > 0.0) {
                return Err(SynthError::Invalid(
                    "log-normal parameters must be finite with scale > 0".into(),
                ));
            }
        }
        if self.partitions < 1 || self.partitions > 256 {
            return Err(SynthError::Invalid(
                "partitions must be between 1 and 256".into(),
            ));
        }
        Ok(())
    }

    /// The trace the replication studies run on: a campus-scale user
    /// count with one popular and one rare site.
    pub fn replication_default(seed: u64) -> SynthSpec {
        SynthSpec {
            n_users: 21_000,
            sites: vec![
                SiteSpec {
                    domain: "popular.example".into(),
                    popularity: 0.08,
                },
                SiteSpec {
                    domain: "rare.example".into(),
                    popularity: 0.002,
                },
            ],
            tcp: DirectionParams {
                down: LogNormalParams {
                    location: 16.0,
                    scale: 2.0,
                },
                up: LogNormalParams {
                    location: 13.5,
                    scale: 1.8,
                },
            },
            udp: DirectionParams {
                down: LogNormalParams {
                    location: 12.0,
                    scale: 1.5,
                },
                up: LogNormalParams {
                    location: 10.5,
                    scale: 1.2,
                },
            },
            flows_geometric_p: 0.5,
            partitions: 4,
            seed,
        }
    }
}

/// Exact per-user byte totals, accumulated from the rounded values
/// actually written to disk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTotals {
    pub tcp_down: u64,
    pub tcp_up: u64,
    pub udp_down: u64,
    pub udp_up: u64,
    pub flows: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub domain: String,
    pub popularity: f64,
    pub accessing_users: u64,
    /// accessing_users / n_users; equals popularity up to rounding of
    /// the member count.
    pub true_share: f64,
}

/// Sidecar written next to the trace. It exists so tests can compare
/// noisy releases against exact answers; shipping it alongside a real
/// dataset would defeat the privacy protections entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub warning: String,
    pub seed: u64,
    pub n_users: u64,
    pub sites: Vec<SiteTruth>,
    pub per_user: BTreeMap<String, UserTotals>,
}

const SIDECAR_WARNING: &str = "TEST ONLY: exact per-user values. Using or distributing this \
     file with a production dataset voids every privacy guarantee.";

pub struct GeneratedTrace {
    pub tcp_dir: PathBuf,
    pub udp_dir: PathBuf,
    pub truth_path: PathBuf,
    pub truth: GroundTruth,
}

const NETFLOW_HEADER: &str = "ts,te,td,sa,da,sp,dp,pr,flg,fwd,stos,ipkt,ibyt,opkt,obyt";
const TSTAT_HEADER: &str = "#c_ip:1 c_port:2 s_ip:3 s_port:4 c_pkts_all:5 s_pkts_all:6 \
     c_bytes_all:7 s_bytes_all:8 first:9 proto:10 c_tls_SNI:11 rtt_avg:12";

/// Base timestamp of the first flow; arbitrary but fixed.
const T0_MS: i64 = 1_682_935_200_000;

/// Round-robin writer over the partition files of one protocol
/// directory.
struct PartitionSet {
    dir: PathBuf,
    writers: Vec<BufWriter<File>>,
    next: usize,
}

impl PartitionSet {
    fn create(
        dir: PathBuf,
        count: usize,
        extension: &str,
        header: &str,
    ) -> Result<Self, SynthError> {
        std::fs::create_dir_all(&dir).map_err(|source| SynthError::Io {
            path: dir.clone(),
            source,
        })?;
        let mut writers = Vec::with_capacity(count);
        for i in 0..count {
            let path = dir.join(format!("part-{i:03}.{extension}"));
            let file = File::create(&path).map_err(|source| SynthError::Io {
                path: path.clone(),
                source,
            })?;
            let mut w = BufWriter::new(file);
            writeln!(w, "{header}").map_err(|source| SynthError::Io { path, source })?;
            writers.push(w);
        }
        Ok(PartitionSet {
            dir,
            writers,
            next: 0,
        })
    }

    fn write_line(&mut self, line: &str) -> Result<(), SynthError> {
        let idx = self.next;
        self.next = (self.next + 1) % self.writers.len();
        writeln!(self.writers[idx], "{line}").map_err(|source| SynthError::Io {
            path: self.dir.clone(),
            source,
        })
    }

    fn finish(self) -> Result<(), SynthError> {
        for mut w in self.writers {
            w.flush().map_err(|source| SynthError::Io {
                path: self.dir.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

struct FlowEvent<'a> {
    client: &'a str,
    server: &'a str,
    tcp: bool,
    bytes_up: u64,
    bytes_down: u64,
    domain: Option<&'a str>,
    rtt_ms: f64,
    timestamp_ms: i64,
    client_port: u16,
}

fn format_flow(format: DatasetFormat, flow: &FlowEvent, line: &mut String) {
    line.clear();
    let pkts_up = (flow.bytes_up / 1400).max(1);
    let pkts_down = (flow.bytes_down / 1400).max(1);
    let server_port = if flow.tcp { 443 } else { 53 };
    match format {
        DatasetFormat::NetflowCsv => {
            let start = Utc.timestamp_millis_opt(flow.timestamp_ms).unwrap();
            let end = Utc.timestamp_millis_opt(flow.timestamp_ms + 1000).unwrap();
            write!(
                line,
                "{},{},1.000,{},{},{},{},{},.A..S.,0,0,{},{},{},{}",
                start.format("%Y-%m-%d %H:%M:%S%.3f"),
                end.format("%Y-%m-%d %H:%M:%S%.3f"),
                flow.client,
                flow.server,
                flow.client_port,
                server_port,
                if flow.tcp { "TCP" } else { "UDP" },
                pkts_up,
                flow.bytes_up,
                pkts_down,
                flow.bytes_down,
            )
            .expect("writing to a string");
        }
        DatasetFormat::TstatLog => {
            write!(
                line,
                "{} {} {} {} {} {} {} {} {} {} {} {:.1}",
                flow.client,
                flow.client_port,
                flow.server,
                server_port,
                pkts_up,
                pkts_down,
                flow.bytes_up,
                flow.bytes_down,
                flow.timestamp_ms,
                if flow.tcp { 6 } else { 17 },
                flow.domain.unwrap_or("-"),
                flow.rtt_ms,
            )
            .expect("writing to a string");
        }
    }
}

/// 1 + Geometric(p) via the inverse CDF.
fn flow_count(rng: &mut ChaCha12Rng, p: f64) -> u64 {
    if p >= 1.0 {
        return 1;
    }
    let u: f64 = rng.random();
    1 + ((1.0 - u).ln() / (1.0 - p).ln()).floor() as u64
}

/// Pre-built volume distributions per protocol and direction.
struct VolumeDists {
    tcp_down: LogNormal<f64>,
    tcp_up: LogNormal<f64>,
    udp_down: LogNormal<f64>,
    udp_up: LogNormal<f64>,
}

impl VolumeDists {
    fn new(spec: &SynthSpec) -> VolumeDists {
        let mk = |p: LogNormalParams| LogNormal::new(p.location, p.scale).expect("validated");
        VolumeDists {
            tcp_down: mk(spec.tcp.down),
            tcp_up: mk(spec.tcp.up),
            udp_down: mk(spec.udp.down),
            udp_up: mk(spec.udp.up),
        }
    }

    /// (bytes_down, bytes_up), capped at 1 TB per flow so per-user sums
    /// stay far away from u64 range.
    fn draw(&self, tcp: bool, rng: &mut ChaCha12Rng) -> (u64, u64) {
        let (down, up) = if tcp {
            (&self.tcp_down, &self.tcp_up)
        } else {
            (&self.udp_down, &self.udp_up)
        };
        let cap = 1_000_000_000_000u64;
        let d = (down.sample(rng).round().max(1.0) as u64).min(cap);
        let u = (up.sample(rng).round().max(1.0) as u64).min(cap);
        (d, u)
    }
}

struct TraceWriter {
    format: DatasetFormat,
    tcp: PartitionSet,
    udp: PartitionSet,
    dists: VolumeDists,
    flows_geometric_p: f64,
    clock_ms: i64,
    line: String,
}

impl TraceWriter {
    /// Emits one geometric burst of flows from `client` to `server` and
    /// accumulates exact totals.
    fn emit_burst(
        &mut self,
        rng: &mut ChaCha12Rng,
        client: &str,
        server: &str,
        tcp: bool,
        domain: Option<&str>,
        totals: &mut UserTotals,
    ) -> Result<(), SynthError> {
        let n_flows = flow_count(rng, self.flows_geometric_p);
        for _ in 0..n_flows {
            let (bytes_down, bytes_up) = self.dists.draw(tcp, rng);
            let rtt_ms = (5.0 + rng.random::<f64>() * 45.0).round();
            self.clock_ms += 137;
            let event = FlowEvent {
                client,
                server,
                tcp,
                bytes_up,
                bytes_down,
                domain,
                rtt_ms,
                timestamp_ms: self.clock_ms,
                client_port: 40000 + (totals.flows % 20000) as u16,
            };
            let mut line = std::mem::take(&mut self.line);
            format_flow(self.format, &event, &mut line);
            let sink = if tcp { &mut self.tcp } else { &mut self.udp };
            let written = sink.write_line(&line);
            self.line = line;
            written?;
            if tcp {
                totals.tcp_down += bytes_down;
                totals.tcp_up += bytes_up;
            } else {
                totals.udp_down += bytes_down;
                totals.udp_up += bytes_up;
            }
            totals.flows += 1;
        }
        Ok(())
    }
}

/// Writes the trace under `out` and returns the exact ground truth,
/// which is also persisted as `out/ground_truth.json`.
pub fn generate(
    spec: &SynthSpec,
    out: &Path,
    format: DatasetFormat,
) -> Result<GeneratedTrace, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    // Exact-count membership per site, sampled without replacement.
    let mut site_members: Vec<Vec<bool>> = Vec::with_capacity(spec.sites.len());
    let mut site_truths: Vec<SiteTruth> = Vec::with_capacity(spec.sites.len());
    for site in &spec.sites {
        let k = ((spec.n_users as f64) * site.popularity).round() as usize;
        let k = k.clamp(1, spec.n_users);
        let chosen = rand::seq::index::sample(&mut rng, spec.n_users, k);
        let mut mask = vec![false; spec.n_users];
        for idx in chosen.iter() {
            mask[idx] = true;
        }
        site_members.push(mask);
        site_truths.push(SiteTruth {
            domain: site.domain.clone(),
            popularity: site.popularity,
            accessing_users: k as u64,
            true_share: k as f64 / spec.n_users as f64,
        });
    }

    let (extension, header) = match format {
        DatasetFormat::NetflowCsv => ("csv", NETFLOW_HEADER),
        DatasetFormat::TstatLog => ("log", TSTAT_HEADER),
    };
    let tcp_dir = out.join("tcp");
    let udp_dir = out.join("udp");
    let mut writer = TraceWriter {
        format,
        tcp: PartitionSet::create(tcp_dir.clone(), spec.partitions, extension, header)?,
        udp: PartitionSet::create(udp_dir.clone(), spec.partitions, extension, header)?,
        dists: VolumeDists::new(spec),
        flows_geometric_p: spec.flows_geometric_p,
        clock_ms: T0_MS,
        line: String::new(),
    };

    let site_servers: Vec<String> = (0..spec.sites.len())
        .map(|i| format!("203.0.113.{}", 10 + i))
        .collect();

    let mut per_user: BTreeMap<String, UserTotals> = BTreeMap::new();
    for user_idx in 0..spec.n_users {
        let client = format!("u{user_idx:06}");
        let mut totals = UserTotals::default();
        // Background traffic keeps every user visible in both protocol
        // directories regardless of site membership.
        let background_tcp = format!("198.51.100.{}", 1 + user_idx % 250);
        let background_udp = format!("198.18.0.{}", 1 + user_idx % 250);
        writer.emit_burst(&mut rng, &client, &background_tcp, true, None, &mut totals)?;
        writer.emit_burst(&mut rng, &client, &background_udp, false, None, &mut totals)?;
        for ((site, members), server) in spec.sites.iter().zip(&site_members).zip(&site_servers) {
            if members[user_idx] {
                writer.emit_burst(
                    &mut rng,
                    &client,
                    server,
                    true,
                    Some(&site.domain),
                    &mut totals,
                )?;
            }
        }
        per_user.insert(client, totals);
    }

    writer.tcp.finish()?;
    writer.udp.finish()?;

    let truth = GroundTruth {
        warning: SIDECAR_WARNING.to_string(),
        seed: spec.seed,
        n_users: spec.n_users as u64,
        sites: site_truths,
        per_user,
    };
    let truth_path = out.join("ground_truth.json");
    let json = serde_json::to_string_pretty(&truth).expect("ground truth serializes");
    std::fs::write(&truth_path, json).map_err(|source| SynthError::Io {
        path: truth_path.clone(),
        source,
    })?;

    Ok(GeneratedTrace {
        tcp_dir,
        udp_dir,
        truth_path,
        truth,
    })
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth, SynthError> {
    let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| SynthError::Invalid(format!("ground truth: {e}")))
}
