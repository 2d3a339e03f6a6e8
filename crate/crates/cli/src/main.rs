//! Command-line front end. Results go to stdout as JSON (or CSV files
//! for the replication studies); failures print one machine-readable
//! error JSON object and exit with 2 (validation), 3 (budget refused),
//! 4 (io) or 1 (post-charge failure).

use std::collections::BTreeSet;
use std::io::BufReader;
use std::net::IpAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use flowdp_core::budget::{BudgetLedger, LedgerError};
use flowdp_core::dp::{BinSpec, Bounds, Epsilon, NoiseSource};
use flowdp_core::engine::{
    Engine, EngineConfig, EngineError, LedgerMode, QueryRequest, ReleaseSpec,
};
use flowdp_core::flow::{probe_schema, DatasetDescriptor, DatasetFormat, FlowError};
use flowdp_core::rib::{load_rib, RoutingInformationBase};
use flowdp_core::select::{FeatureReducer, FilterSpec, PerUserSpec};

use flowdp::config::{Config, ConfigError};
use flowdp::replicate::{self, ReplicateError};
use flowdp::synth::{self, SynthError, SynthSpec};

#[derive(Parser)]
#[command(
    name = "flowdp",
    version,
    about = "Differentially private queries over network flow records"
)]
struct Cli {
    /// Config file (TOML); the FLOWDP_CONFIG env var overrides the
    /// default of ./flowdp.toml.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one differentially private query.
    Query(QueryArgs),
    /// Show allocated, spent and remaining budget.
    Budget(BudgetArgs),
    /// Generate a seeded synthetic trace with a ground-truth sidecar.
    GenerateSynth(GenerateArgs),
    /// Re-run one of the published studies on a synthetic trace.
    Replicate(ReplicateArgs),
    /// Print the schema the configured dataset exposes.
    InspectSchema,
}

#[derive(Args)]
struct QueryArgs {
    /// Operator account to charge.
    #[arg(long)]
    operator: String,
    /// all | domain=a.org,*.b.org | server-ip=1.2.3.4,... |
    /// asn=64496,64497[,unknown]
    #[arg(long, default_value = "all")]
    filter: String,
    /// flow-count | volume-down | volume-up | volume-total | presence |
    /// feature:NAME:avg|min|max
    #[arg(long = "per-user")]
    per_user: Option<String>,
    /// mean | std | percentiles | histogram
    #[arg(long)]
    release: Option<String>,
    /// Public clipping bounds, LO:HI.
    #[arg(long)]
    bounds: Option<String>,
    /// Percentile ranks in [0,1], comma separated.
    #[arg(long)]
    q: Option<String>,
    /// uniform:LO:HI:N | log:LO:HI:N | edges:E1,E2,...
    #[arg(long)]
    bins: Option<String>,
    /// Add the virtual bin counting population members with no
    /// matching activity (presence histograms only).
    #[arg(long)]
    remainder: bool,
    /// Give users with no matching flows an explicit zero.
    #[arg(long)]
    include_inactive: bool,
    /// Privacy budget to spend on this query.
    #[arg(long)]
    eps: Option<f64>,
    /// Pull default bounds/bins from a named config template.
    #[arg(long)]
    template: Option<String>,
    /// Release the query this many times (each repetition is charged).
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    /// Dry run: spend nothing, mark all outputs non-releasable.
    #[arg(long)]
    simulate: bool,
    /// Noise seed; only valid together with --simulate.
    #[arg(long)]
    seed: Option<u64>,
    /// Read filter/per-user/release/epsilon from a JSON file instead of
    /// flags.
    #[arg(long)]
    request: Option<PathBuf>,
}

#[derive(Args)]
struct BudgetArgs {
    /// Restrict to one operator.
    #[arg(long)]
    operator: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    NetflowCsv,
    TstatLog,
}

impl From<FormatArg> for DatasetFormat {
    fn from(f: FormatArg) -> DatasetFormat {
        match f {
            FormatArg::NetflowCsv => DatasetFormat::NetflowCsv,
            FormatArg::TstatLog => DatasetFormat::TstatLog,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// JSON file holding a generator spec.
    #[arg(long, conflicts_with = "replication_seed")]
    spec: Option<PathBuf>,
    /// Use the built-in campus-scale replication spec with this seed.
    #[arg(long)]
    replication_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "tstat-log")]
    format: FormatArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    /// Epsilon sensitivity of the share-of-users query (simulation).
    Eps,
    /// Per-user volume ECDFs, four charged queries at eps 0.25.
    Volume,
}

#[derive(Args)]
struct ReplicateArgs {
    #[arg(value_enum)]
    study: StudyArg,
    /// Trace directory as produced by generate-synth (tcp/, udp/,
    /// ground_truth.json).
    #[arg(long)]
    trace: PathBuf,
    /// Ground-truth sidecar; defaults to <trace>/ground_truth.json.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tstat-log")]
    format: FormatArg,
    /// CSV output path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    operator: String,
    /// Noisy answers per grid point (eps study).
    #[arg(long, default_value_t = replicate::DEFAULT_REPETITIONS)]
    repetitions: usize,
    /// Noise seed; only valid for the simulated eps study.
    #[arg(long)]
    seed: Option<u64>,
}

/// CLI failure carrying its exit code and machine-readable kind.
#[derive(Debug)]
enum CliError {
    Validation(String),
    Budget(String),
    Io(String),
    Failed(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Budget(_) => "budget",
            CliError::Io(_) => "io",
            CliError::Failed(_) => "failed",
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Budget(_) => 3,
            CliError::Io(_) => 4,
            CliError::Failed(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Validation(m)
            | CliError::Budget(m)
            | CliError::Io(m)
            | CliError::Failed(m) => m,
        }
    }

    fn invalid(msg: impl Into<String>) -> CliError {
        CliError::Validation(msg.into())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> CliError {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            ConfigError::Syntax(_) | ConfigError::Invalid(_) => CliError::Validation(e.to_string()),
        }
    }
}

impl From<LedgerError> for CliError {
    fn from(e: LedgerError) -> CliError {
        match e {
            LedgerError::InsufficientBudget { .. } => CliError::Budget(e.to_string()),
            LedgerError::UnknownOperator(_) | LedgerError::InvalidAllocation { .. } => {
                CliError::Validation(e.to_string())
            }
            LedgerError::Io { .. } | LedgerError::CorruptLedger { .. } => {
                CliError::Io(e.to_string())
            }
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> CliError {
        match e {
            EngineError::Validation { .. } => CliError::Validation(e.to_string()),
            EngineError::Ledger(inner) => inner.into(),
            EngineError::Data { .. } | EngineError::DataAfterCharge { .. } => {
                CliError::Io(e.to_string())
            }
            EngineError::ReleaseAfterCharge { .. } | EngineError::Internal(_) => {
                CliError::Failed(e.to_string())
            }
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> CliError {
        match e {
            FlowError::InvalidDescriptor(_) => CliError::Validation(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> CliError {
        match e {
            SynthError::Invalid(_) => CliError::Validation(e.to_string()),
            SynthError::Io { .. } => CliError::Io(e.to_string()),
        }
    }
}

impl From<ReplicateError> for CliError {
    fn from(e: ReplicateError) -> CliError {
        match e {
            ReplicateError::Engine(inner) => inner.into(),
            ReplicateError::Io(inner) => CliError::Io(inner.to_string()),
            ReplicateError::Setup(m) => CliError::Validation(m),
        }
    }
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let body = serde_json::json!({
            "error": { "code": e.kind(), "message": e.message() }
        });
        println!("{body}");
        std::process::exit(e.exit_code());
    }
}

fn config_path(cli_flag: Option<PathBuf>) -> PathBuf {
    cli_flag
        .or_else(|| std::env::var_os("FLOWDP_CONFIG").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("flowdp.toml"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config_path = config_path(cli.config);
    match cli.command {
        Command::Query(args) => cmd_query(&config_path, args),
        Command::Budget(args) => cmd_budget(&config_path, args),
        Command::GenerateSynth(args) => cmd_generate_synth(args),
        Command::Replicate(args) => cmd_replicate(&config_path, args),
        Command::InspectSchema => cmd_inspect_schema(&config_path),
    }
}

fn open_ledger(config: &Config) -> Result<BudgetLedger, CliError> {
    Ok(BudgetLedger::open(
        config.ledger.clone(),
        config.operators.clone(),
    )?)
}

fn load_routing_table(config: &Config) -> Result<Option<RoutingInformationBase>, CliError> {
    let Some(path) = &config.rib else {
        return Ok(None);
    };
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Io(format!("cannot open rib {}: {e}", path.display())))?;
    let (rib, report) = load_rib(BufReader::new(file))
        .map_err(|e| CliError::Io(format!("rib {}: {e}", path.display())))?;
    if !report.malformed.is_empty() {
        log::warn!(
            "rib {}: skipped {} malformed lines",
            path.display(),
            report.malformed.len()
        );
    }
    Ok(Some(rib))
}

/// Request fields as stored in a `--request` JSON file.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestFile {
    filter: FilterSpec,
    per_user: PerUserSpec,
    release: ReleaseSpec,
    epsilon: f64,
    #[serde(default)]
    include_inactive: bool,
}

fn cmd_query(config_path: &Path, args: QueryArgs) -> Result<(), CliError> {
    let config = Config::load(config_path)?;
    if args.seed.is_some() && !args.simulate {
        return Err(CliError::invalid(
            "--seed would make real releases replayable; it needs --simulate",
        ));
    }
    if args.repeat < 1 {
        return Err(CliError::invalid("--repeat must be at least 1"));
    }

    let request = build_request(&config, &args)?;
    let ledger = open_ledger(&config)?;
    let rib = load_routing_table(&config)?;
    let engine = Engine::new(
        EngineConfig {
            workers: config.engine.workers,
            population_cache: config.engine.population_cache.clone(),
        },
        &ledger,
        rib.as_ref(),
    );
    let mut rng = match args.seed {
        Some(s) => NoiseSource::seeded(s),
        None => NoiseSource::entropy(),
    };

    if args.simulate {
        let summary = engine.run_repeated(
            &request,
            args.repeat,
            LedgerMode::Simulation,
            &mut rng,
            args.seed,
        )?;
        println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("serializes")
        );
    } else if args.repeat > 1 {
        let summary = engine.run_repeated(
            &request,
            args.repeat,
            LedgerMode::ChargeEach,
            &mut rng,
            None,
        )?;
        println!(
            "{}",
            serde_json::to_string_pretty(&summary).expect("serializes")
        );
    } else {
        let result = engine.execute(&request, &mut rng, None)?;
        println!(
            "{}",
            serde_json::to_string_pretty(&result).expect("serializes")
        );
    }
    Ok(())
}

fn build_request(config: &Config, args: &QueryArgs) -> Result<QueryRequest, CliError> {
    let template =
        match &args.template {
            Some(name) => Some(config.templates.get(name).ok_or_else(|| {
                CliError::invalid(format!("config defines no template {name:?}"))
            })?),
            None => None,
        };

    let (filter, per_user, release, epsilon, include_inactive) = match &args.request {
        Some(path) => {
            if args.per_user.is_some()
                || args.release.is_some()
                || args.eps.is_some()
                || args.filter != "all"
            {
                return Err(CliError::invalid(
                    "--request replaces --filter/--per-user/--release/--eps",
                ));
            }
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
            let file: RequestFile = serde_json::from_str(&text)
                .map_err(|e| CliError::invalid(format!("request file: {e}")))?;
            let epsilon =
                Epsilon::new(file.epsilon).map_err(|e| CliError::invalid(e.to_string()))?;
            (
                file.filter,
                file.per_user,
                file.release,
                epsilon,
                file.include_inactive,
            )
        }
        None => {
            let per_user = args
                .per_user
                .as_deref()
                .ok_or_else(|| CliError::invalid("--per-user is required"))?;
            let release = args
                .release
                .as_deref()
                .ok_or_else(|| CliError::invalid("--release is required"))?;
            let eps = args
                .eps
                .ok_or_else(|| CliError::invalid("--eps is required"))?;
            let epsilon = Epsilon::new(eps).map_err(|e| CliError::invalid(e.to_string()))?;
            (
                parse_filter(&args.filter)?,
                parse_per_user(per_user)?,
                parse_release(release, args, template)?,
                epsilon,
                args.include_inactive,
            )
        }
    };

    Ok(QueryRequest {
        dataset: config.dataset.clone(),
        filter,
        per_user,
        release,
        epsilon,
        operator_id: args.operator.clone(),
        include_inactive,
    })
}

fn parse_filter(text: &str) -> Result<FilterSpec, CliError> {
    if text == "all" {
        return Ok(FilterSpec::All);
    }
    let (kind, value) = text
        .split_once('=')
        .ok_or_else(|| CliError::invalid(format!("filter {text:?}: expected kind=values")))?;
    let items: Vec<&str> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(CliError::invalid(format!("filter {text:?}: no values")));
    }
    match kind {
        "domain" => Ok(FilterSpec::domains(items)),
        "server-ip" => {
            let addrs = items
                .iter()
                .map(|s| {
                    s.parse::<IpAddr>()
                        .map_err(|e| CliError::invalid(format!("server ip {s:?}: {e}")))
                })
                .collect::<Result<BTreeSet<_>, _>>()?;
            Ok(FilterSpec::server_ips(addrs))
        }
        "asn" => {
            let include_unknown = items.contains(&"unknown");
            let asns = items
                .iter()
                .filter(|s| **s != "unknown")
                .map(|s| {
                    s.parse::<u32>()
                        .map_err(|e| CliError::invalid(format!("asn {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if asns.is_empty() && !include_unknown {
                return Err(CliError::invalid("asn filter needs at least one asn"));
            }
            Ok(FilterSpec::asns(asns, include_unknown))
        }
        other => Err(CliError::invalid(format!(
            "unknown filter kind {other:?} (expected domain, server-ip or asn)"
        ))),
    }
}

fn parse_per_user(text: &str) -> Result<PerUserSpec, CliError> {
    match text {
        "flow-count" => return Ok(PerUserSpec::FlowCount),
        "volume-down" => return Ok(PerUserSpec::VolumeDown),
        "volume-up" => return Ok(PerUserSpec::VolumeUp),
        "volume-total" => return Ok(PerUserSpec::VolumeTotal),
        "presence" => return Ok(PerUserSpec::Presence),
        _ => {}
    }
    let mut parts = text.split(':');
    if parts.next() == Some("feature") {
        let name = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| CliError::invalid("feature spec needs a column name"))?;
        let reducer = match parts.next() {
            Some("avg") | None => FeatureReducer::Avg,
            Some("min") => FeatureReducer::Min,
            Some("max") => FeatureReducer::Max,
            Some(other) => {
                return Err(CliError::invalid(format!(
                    "unknown feature reducer {other:?} (expected avg, min or max)"
                )))
            }
        };
        return Ok(PerUserSpec::Feature {
            name: name.to_string(),
            reducer,
        });
    }
    Err(CliError::invalid(format!(
        "unknown per-user statistic {text:?}"
    )))
}

fn parse_bounds(text: &str) -> Result<Bounds, CliError> {
    let (lo, hi) = text
        .split_once(':')
        .ok_or_else(|| CliError::invalid(format!("bounds {text:?}: expected LO:HI")))?;
    let lo: f64 = lo
        .trim()
        .parse()
        .map_err(|e| CliError::invalid(format!("bounds lower {lo:?}: {e}")))?;
    let hi: f64 = hi
        .trim()
        .parse()
        .map_err(|e| CliError::invalid(format!("bounds upper {hi:?}: {e}")))?;
    Bounds::new(lo, hi).map_err(|e| CliError::invalid(e.to_string()))
}

fn parse_bins(text: &str) -> Result<BinSpec, CliError> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = |msg: &str| CliError::invalid(format!("bins {text:?}: {msg}"));
    let spec = match parts.as_slice() {
        ["uniform", lo, hi, n] => BinSpec::Uniform {
            lower: lo.parse().map_err(|_| bad("bad lower bound"))?,
            upper: hi.parse().map_err(|_| bad("bad upper bound"))?,
            count: n.parse().map_err(|_| bad("bad count"))?,
        },
        ["log", lo, hi, n] => BinSpec::Logarithmic {
            lower: lo.parse().map_err(|_| bad("bad lower bound"))?,
            upper: hi.parse().map_err(|_| bad("bad upper bound"))?,
            count: n.parse().map_err(|_| bad("bad count"))?,
        },
        ["edges", list] => BinSpec::Explicit {
            edges: list
                .split(',')
                .map(|e| e.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad("bad edge value"))?,
        },
        _ => {
            return Err(bad(
                "expected uniform:LO:HI:N, log:LO:HI:N or edges:E1,E2,...",
            ))
        }
    };
    spec.edges().map_err(|e| CliError::invalid(e.to_string()))?;
    Ok(spec)
}

fn parse_release(
    kind: &str,
    args: &QueryArgs,
    template: Option<&flowdp::config::QueryTemplate>,
) -> Result<ReleaseSpec, CliError> {
    let bounds = || -> Result<Bounds, CliError> {
        if let Some(text) = &args.bounds {
            return parse_bounds(text);
        }
        if let Some([lo, hi]) = template.and_then(|t| t.bounds) {
            return Bounds::new(lo, hi).map_err(|e| CliError::invalid(e.to_string()));
        }
        Err(CliError::invalid(
            "this release needs --bounds LO:HI (or a template providing them)",
        ))
    };
    let bins = || -> Result<BinSpec, CliError> {
        if let Some(text) = &args.bins {
            return parse_bins(text);
        }
        if let Some(spec) = template.and_then(|t| t.bins.clone()) {
            return Ok(spec);
        }
        Err(CliError::invalid(
            "histogram releases need --bins (or a template providing them)",
        ))
    };
    match kind {
        "mean" => Ok(ReleaseSpec::Mean { bounds: bounds()? }),
        "std" => Ok(ReleaseSpec::Std { bounds: bounds()? }),
        "percentiles" => {
            let text = args
                .q
                .as_deref()
                .ok_or_else(|| CliError::invalid("percentiles need --q RANK[,RANK...]"))?;
            let qs = text
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::invalid(format!("percentile ranks: {e}")))?;
            Ok(ReleaseSpec::Percentiles {
                qs,
                bounds: bounds()?,
            })
        }
        "histogram" => Ok(ReleaseSpec::Histogram {
            bins: bins()?,
            include_remainder: args.remainder,
        }),
        other => Err(CliError::invalid(format!(
            "unknown release kind {other:?} (expected mean, std, percentiles or histogram)"
        ))),
    }
}

fn cmd_budget(config_path: &Path, args: BudgetArgs) -> Result<(), CliError> {
    let config = Config::load(config_path)?;
    let ledger = open_ledger(&config)?;
    let body = match &args.operator {
        Some(operator) => serde_json::to_value(ledger.account(operator)?).expect("serializes"),
        None => {
            let accounts = ledger
                .operators()
                .map(|op| ledger.account(op))
                .collect::<Result<Vec<_>, _>>()?;
            serde_json::json!({ "operators": accounts })
        }
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&body).expect("serializes")
    );
    Ok(())
}

fn cmd_generate_synth(args: GenerateArgs) -> Result<(), CliError> {
    let spec: SynthSpec = match (&args.spec, args.replication_seed) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::invalid(format!("synth spec: {e}")))?
        }
        (None, Some(seed)) => SynthSpec::replication_default(seed),
        (None, None) => {
            return Err(CliError::invalid(
                "provide --spec FILE or --replication-seed N",
            ))
        }
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };
    let trace = synth::generate(&spec, &args.out, args.format.into())?;
    let body = serde_json::json!({
        "tcp_dir": trace.tcp_dir,
        "udp_dir": trace.udp_dir,
        "ground_truth": trace.truth_path,
        "n_users": trace.truth.n_users,
        "sites": trace.truth.sites,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&body).expect("serializes")
    );
    Ok(())
}

fn cmd_replicate(config_path: &Path, args: ReplicateArgs) -> Result<(), CliError> {
    let config = Config::load(config_path)?;
    let ledger = open_ledger(&config)?;
    let tcp_dir = args.trace.join("tcp");
    let udp_dir = args.trace.join("udp");
    for dir in [&tcp_dir, &udp_dir] {
        if !dir.is_dir() {
            return Err(CliError::invalid(format!(
                "{} is not a directory; --trace expects generate-synth layout",
                dir.display()
            )));
        }
    }
    let mut out_file = std::fs::File::create(&args.out)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", args.out.display())))?;

    match args.study {
        StudyArg::Eps => {
            let truth_path = args
                .truth
                .clone()
                .unwrap_or_else(|| args.trace.join("ground_truth.json"));
            let truth = synth::load_ground_truth(&truth_path)?;
            let dataset = DatasetDescriptor {
                format: args.format.into(),
                paths: vec![tcp_dir, udp_dir],
                column_mapping: None,
            };
            let points = replicate::eps_study(
                &dataset,
                &truth,
                &ledger,
                config.engine.workers,
                &args.operator,
                args.repetitions,
                args.seed,
                &mut out_file,
            )?;
            let body = serde_json::json!({
                "study": "eps",
                "rows": points.len(),
                "out": args.out,
                "simulated": true,
                "epsilon_charged": 0.0,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&body).expect("serializes")
            );
        }
        StudyArg::Volume => {
            if args.seed.is_some() {
                return Err(CliError::invalid(
                    "the volume study spends real budget; seeded noise is not allowed",
                ));
            }
            let study = replicate::volume_study(
                args.format.into(),
                &tcp_dir,
                &udp_dir,
                &ledger,
                config.engine.workers,
                &args.operator,
                &mut out_file,
            )?;
            let body = serde_json::json!({
                "study": "volume",
                "rows": study.points.len(),
                "out": args.out,
                "simulated": false,
                "epsilon_charged": study.epsilon_charged,
            });
            println!(
                "{}",
                serde_json::to_string_pretty(&body).expect("serializes")
            );
        }
    }
    Ok(())
}

fn cmd_inspect_schema(config_path: &Path) -> Result<(), CliError> {
    let config = Config::load(config_path)?;
    let schema = probe_schema(&config.dataset)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&schema).expect("serializes")
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn filter_grammar() {
        assert_eq!(parse_filter("all").unwrap(), FilterSpec::All);
        assert_eq!(
            parse_filter("domain=a.org, *.b.org").unwrap(),
            FilterSpec::domains(["a.org", "*.b.org"])
        );
        assert_eq!(
            parse_filter("server-ip=192.0.2.1,2001:db8::1").unwrap(),
            FilterSpec::server_ips(["192.0.2.1".parse().unwrap(), "2001:db8::1".parse().unwrap()])
        );
        assert_eq!(
            parse_filter("asn=64496,unknown").unwrap(),
            FilterSpec::Asn {
                asns: BTreeSet::from([64496]),
                include_unknown: true,
            }
        );
        // Unknown-only is a valid selection; empty commas are ignored.
        assert!(parse_filter("asn=unknown,,").is_ok());
        for bad in [
            "domain=",
            "server-ip=not-an-ip",
            "asn=abc",
            "port=443",
            "noequals",
        ] {
            assert!(parse_filter(bad).is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn per_user_grammar() {
        assert_eq!(
            parse_per_user("flow-count").unwrap(),
            PerUserSpec::FlowCount
        );
        assert_eq!(
            parse_per_user("feature:rtt_avg").unwrap(),
            PerUserSpec::Feature {
                name: "rtt_avg".into(),
                reducer: FeatureReducer::Avg,
            }
        );
        assert_eq!(
            parse_per_user("feature:rtt_avg:max").unwrap(),
            PerUserSpec::Feature {
                name: "rtt_avg".into(),
                reducer: FeatureReducer::Max,
            }
        );
        assert!(parse_per_user("feature::max").is_err());
        assert!(parse_per_user("feature:rtt:median").is_err());
        assert!(parse_per_user("bytes").is_err());
    }

    #[test]
    fn bounds_grammar() {
        let bounds = parse_bounds("0:1e6").unwrap();
        assert_eq!(bounds.clip(2e6), 1e6);
        assert!(parse_bounds("5:1").is_err());
        assert!(parse_bounds("1").is_err());
        assert!(parse_bounds("a:b").is_err());
    }

    #[test]
    fn bins_grammar() {
        assert_eq!(
            parse_bins("uniform:0:10:5").unwrap(),
            BinSpec::Uniform {
                lower: 0.0,
                upper: 10.0,
                count: 5,
            }
        );
        assert_eq!(
            parse_bins("log:1e2:1e11:100").unwrap(),
            BinSpec::Logarithmic {
                lower: 1e2,
                upper: 1e11,
                count: 100,
            }
        );
        assert_eq!(
            parse_bins("edges:0, 1.5, 9").unwrap(),
            BinSpec::Explicit {
                edges: vec![0.0, 1.5, 9.0],
            }
        );
        // Structurally valid but rejected by the edge check.
        assert!(parse_bins("uniform:10:0:5").is_err());
        assert!(parse_bins("log:0:10:5").is_err());
        assert!(parse_bins("edges:3,1,2").is_err());
        assert!(parse_bins("hist:0:1:2").is_err());
    }
}
