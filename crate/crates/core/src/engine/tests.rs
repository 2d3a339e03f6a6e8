use std::collections::BTreeMap;
use std::io::Write as _;
use std::net::IpAddr;
use std::path::Path;

use tempfile::TempDir;

use super::*;
use crate::dp::Bounds;
use crate::flow::DatasetFormat;

const HEADER: &str = "ts,te,td,sa,da,sp,dp,pr,flg,fwd,stos,ipkt,ibyt,opkt,obyt";

/// One flow per tuple: (client, server ip, bytes up, bytes down).
fn write_netflow(dir: &Path, name: &str, rows: &[(&str, &str, u64, u64)]) {
    let mut f = std::fs::File::create(dir.join(name)).unwrap();
    writeln!(f, "{HEADER}").unwrap();
    for (client, server, up, down) in rows {
        writeln!(
            f,
            "2023-05-01 10:00:00,2023-05-01 10:00:01,1.0,{client},{server},40000,443,TCP,.A..S.,0,0,10,{up},12,{down}"
        )
        .unwrap();
    }
}

fn descriptor(dir: &Path) -> DatasetDescriptor {
    DatasetDescriptor {
        format: DatasetFormat::NetflowCsv,
        paths: vec![dir.to_path_buf()],
        column_mapping: None,
    }
}

fn ledger(dir: &Path, allocation: f64) -> BudgetLedger {
    BudgetLedger::open(
        dir.join("ledger.jsonl"),
        BTreeMap::from([("op-a".to_string(), allocation)]),
    )
    .unwrap()
}

fn eps(v: f64) -> Epsilon {
    Epsilon::new(v).unwrap()
}

fn mean_request(dir: &Path, bounds: (f64, f64)) -> QueryRequest {
    QueryRequest {
        dataset: descriptor(dir),
        filter: FilterSpec::All,
        per_user: PerUserSpec::VolumeTotal,
        release: ReleaseSpec::Mean {
            bounds: Bounds::new(bounds.0, bounds.1).unwrap(),
        },
        epsilon: eps(0.25),
        operator_id: "op-a".to_string(),
        include_inactive: false,
    }
}

/// Creates `<tmp>/data` so ledger and cache files beside it never get
/// scanned as partitions.
fn data_dir(tmp: &TempDir) -> std::path::PathBuf {
    let dir = tmp.path().join("data");
    std::fs::create_dir(&dir).unwrap();
    dir
}

/// Three users with total volumes 3000, 700 and 10000 (clipped to 5000).
fn seed_basic_dataset(dir: &Path) {
    write_netflow(
        dir,
        "a.csv",
        &[
            ("h_1", "93.184.216.34", 1000, 2000),
            ("h_2", "93.184.216.34", 200, 500),
        ],
    );
    write_netflow(dir, "b.csv", &[("h_3", "10.9.9.9", 4000, 6000)]);
}

#[test]
fn mean_in_bypass_mode_equals_hand_computed_oracle() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);

    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();
    let result = engine.execute(&request, &mut rng, None).unwrap();

    // (3000 + 700 + 5000) / 3, the last user clipped to the upper bound.
    let expected = 8700.0 / 3.0;
    assert_eq!(result.payload, Payload::Scalar(expected));
    assert_eq!(result.metadata.mechanism, "dp_mean");
    assert_eq!(result.metadata.epsilon_spent, 0.25);
    assert!(result.metadata.n_is_public);
    assert_eq!(result.metadata.partitions, 2);
    assert!(!result.metadata.simulated);
}

#[test]
fn noisy_release_differs_from_oracle_but_stays_calibrated() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 100.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);

    let request = mean_request(&data, (0.0, 5000.0));
    let exact = 8700.0 / 3.0;
    let mut rng = NoiseSource::seeded(11);
    let result = engine.execute(&request, &mut rng, Some(11)).unwrap();
    let Payload::Scalar(noisy) = result.payload else {
        panic!("mean releases a scalar");
    };
    assert_ne!(noisy, exact);
    // Laplace(b = 5000 / (3 * 0.25)); 20 scales is beyond any plausible
    // draw. The mean is left unclamped on purpose so it stays unbiased.
    assert!((noisy - exact).abs() <= 20.0 * 5000.0 / (3.0 * 0.25));
    assert_eq!(result.metadata.seed, Some(11));
}

#[test]
fn each_execute_charges_the_ledger_once() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);

    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();
    engine.execute(&request, &mut rng, None).unwrap();
    engine.execute(&request, &mut rng, None).unwrap();

    let account = ledger.account("op-a").unwrap();
    assert_eq!(account.spent, 0.5);
    assert_eq!(account.remaining(), 0.5);
}

#[test]
fn validation_failures_charge_nothing() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let mut rng = NoiseSource::bypass();

    // NetFlow exports carry no domain column.
    let mut domain_filter = mean_request(&data, (0.0, 5000.0));
    domain_filter.filter = FilterSpec::domains(["example.org"]);
    // An ASN filter needs a routing table and this engine has none.
    let mut no_rib = mean_request(&data, (0.0, 5000.0));
    no_rib.filter = FilterSpec::asns([64496], false);
    // Zero-filling inactive users is undefined for a feature average.
    let mut bad_inactive = mean_request(&data, (0.0, 5000.0));
    bad_inactive.per_user = PerUserSpec::Feature {
        name: "rtt_avg".to_string(),
        reducer: crate::select::FeatureReducer::Avg,
    };
    bad_inactive.include_inactive = true;
    // The remainder bin only makes sense for presence queries.
    let mut bad_remainder = mean_request(&data, (0.0, 5000.0));
    bad_remainder.release = ReleaseSpec::Histogram {
        bins: BinSpec::Uniform {
            lower: 0.0,
            upper: 1.0,
            count: 4,
        },
        include_remainder: true,
    };
    // Percentile ranks outside [0, 1].
    let mut bad_q = mean_request(&data, (0.0, 5000.0));
    bad_q.release = ReleaseSpec::Percentiles {
        qs: vec![1.5],
        bounds: Bounds::new(0.0, 5000.0).unwrap(),
    };

    for request in [domain_filter, no_rib, bad_inactive, bad_remainder, bad_q] {
        match engine.execute(&request, &mut rng, None) {
            Err(EngineError::Validation { .. }) => {}
            other => panic!("expected a validation error, got {other:?}"),
        }
    }
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.0);
    assert!(
        !ledger.path().exists(),
        "no record should have been written"
    );
}

#[test]
fn refused_charge_stops_the_query_before_any_scan() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    // The second partition would abort any scan that reaches it.
    write_netflow(&data, "a.csv", &[("h_1", "93.184.216.34", 10, 10)]);
    std::fs::write(
        data.join("b.csv"),
        format!("{HEADER}\ngarbage\nmore garbage\n"),
    )
    .unwrap();

    let ledger = ledger(tmp.path(), 0.1);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();

    match engine.execute(&request, &mut rng, None) {
        Err(EngineError::Ledger(LedgerError::InsufficientBudget { .. })) => {}
        other => panic!("expected a budget refusal, got {other:?}"),
    }
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.0);
}

#[test]
fn empty_selection_spends_the_budget_without_releasing() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);

    let mut request = mean_request(&data, (0.0, 5000.0));
    request.filter = FilterSpec::server_ips(["203.0.113.77".parse::<IpAddr>().unwrap()]);
    let mut rng = NoiseSource::bypass();

    match engine.execute(&request, &mut rng, None) {
        Err(EngineError::ReleaseAfterCharge { .. }) => {}
        other => panic!("expected a post-charge release failure, got {other:?}"),
    }
    let account = ledger.account("op-a").unwrap();
    assert_eq!(account.spent, 0.25, "the failed query still costs epsilon");

    // The ledger holds the charge but no release marker.
    let state = ledger.state().unwrap();
    let records: Vec<_> = state.records.iter().collect();
    assert_eq!(records.len(), 1);
    assert!(!records[0].released);
}

#[test]
fn data_corruption_after_charge_keeps_the_charge() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    write_netflow(&data, "a.csv", &[("h_1", "93.184.216.34", 10, 10)]);
    std::fs::write(
        data.join("b.csv"),
        format!("{HEADER}\ngarbage\nmore garbage\n"),
    )
    .unwrap();

    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();

    match engine.execute(&request, &mut rng, None) {
        Err(EngineError::DataAfterCharge { .. }) => {}
        other => panic!("expected a post-charge data error, got {other:?}"),
    }
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.25);
}

#[test]
fn worker_count_does_not_change_the_released_bits() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    // Eight partitions, users overlapping across files.
    for i in 0..8 {
        let c1 = format!("h_{}", i % 5);
        let c2 = format!("h_{}", (i + 3) % 7);
        write_netflow(
            &data,
            &format!("part{i}.csv"),
            &[
                (c1.as_str(), "93.184.216.34", 100 + i as u64, 200),
                (c2.as_str(), "198.51.100.9", 300, 40 * i as u64),
            ],
        );
    }

    let run = |workers: usize| {
        let ltmp = TempDir::new().unwrap();
        let ledger = ledger(ltmp.path(), 10.0);
        let engine = Engine::new(
            EngineConfig {
                workers,
                population_cache: None,
            },
            &ledger,
            None,
        );
        let request = mean_request(&data, (0.0, 5000.0));
        let mut rng = NoiseSource::seeded(42);
        let mut result = engine.execute(&request, &mut rng, Some(42)).unwrap();
        result.metadata.wall_ms = 0;
        result
    };

    let single = run(1);
    let eight = run(8);
    assert_eq!(single, eight);
    let single_json = serde_json::to_string(&single).unwrap();
    let eight_json = serde_json::to_string(&eight).unwrap();
    assert_eq!(single_json, eight_json);
}

#[test]
fn include_inactive_zero_fills_the_quiet_users() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    // Five distinct clients, two of them touching the filtered server.
    write_netflow(
        &data,
        "a.csv",
        &[
            ("h_1", "93.184.216.34", 0, 1000),
            ("h_1", "93.184.216.34", 0, 500),
            ("h_2", "93.184.216.34", 0, 300),
            ("h_3", "198.51.100.9", 0, 9999),
            ("h_4", "198.51.100.9", 0, 1),
            ("h_5", "198.51.100.9", 0, 2),
        ],
    );
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);

    let mut request = mean_request(&data, (0.0, 2000.0));
    request.filter = FilterSpec::server_ips(["93.184.216.34".parse::<IpAddr>().unwrap()]);
    request.per_user = PerUserSpec::VolumeDown;
    request.include_inactive = true;
    let mut rng = NoiseSource::bypass();
    let result = engine.execute(&request, &mut rng, None).unwrap();

    // h_1 = 1500, h_2 = 300, h_3..h_5 = 0.
    assert_eq!(result.payload, Payload::Scalar(1800.0 / 5.0));
}

#[test]
fn presence_share_against_the_whole_population() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    write_netflow(
        &data,
        "a.csv",
        &[
            ("h_1", "93.184.216.34", 1, 1),
            ("h_2", "93.184.216.34", 1, 1),
            ("h_3", "198.51.100.9", 1, 1),
            ("h_4", "198.51.100.9", 1, 1),
            ("h_5", "198.51.100.9", 1, 1),
            ("h_6", "198.51.100.9", 1, 1),
            ("h_7", "198.51.100.9", 1, 1),
            ("h_8", "198.51.100.9", 1, 1),
        ],
    );
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);

    let mut request = mean_request(&data, (0.0, 1.0));
    request.filter = FilterSpec::server_ips(["93.184.216.34".parse::<IpAddr>().unwrap()]);
    request.per_user = PerUserSpec::Presence;
    request.release = ReleaseSpec::Histogram {
        bins: BinSpec::Uniform {
            lower: 0.0,
            upper: 1.0,
            count: 1,
        },
        include_remainder: true,
    };
    let mut rng = NoiseSource::bypass();
    let result = engine.execute(&request, &mut rng, None).unwrap();

    let Payload::Histogram(ref h) = result.payload else {
        panic!("histogram release");
    };
    assert_eq!(h.counts, vec![2.0]);
    assert_eq!(h.remainder, Some(6.0));
    assert_eq!(result.payload.as_scalar(), Some(0.25));
    assert!(!result.metadata.n_is_public);
}

#[test]
fn population_cache_is_used_and_invalidated_by_data_changes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    write_netflow(
        &data,
        "a.csv",
        &[
            ("h_1", "93.184.216.34", 1, 1),
            ("h_2", "198.51.100.9", 1, 1),
            ("h_3", "198.51.100.9", 1, 1),
            ("h_4", "198.51.100.9", 1, 1),
        ],
    );
    let cache = tmp.path().join("population.json");
    let ledger = ledger(tmp.path(), 10.0);
    let engine = Engine::new(
        EngineConfig {
            workers: 1,
            population_cache: Some(cache.clone()),
        },
        &ledger,
        None,
    );

    let mut request = mean_request(&data, (0.0, 1.0));
    request.filter = FilterSpec::server_ips(["93.184.216.34".parse::<IpAddr>().unwrap()]);
    request.per_user = PerUserSpec::Presence;
    request.release = ReleaseSpec::Histogram {
        bins: BinSpec::Uniform {
            lower: 0.0,
            upper: 1.0,
            count: 1,
        },
        include_remainder: true,
    };
    let mut rng = NoiseSource::bypass();

    let first = engine.execute(&request, &mut rng, None).unwrap();
    assert_eq!(first.payload.as_scalar(), Some(0.25));
    let stored: BTreeMap<String, u64> =
        serde_json::from_str(&std::fs::read_to_string(&cache).unwrap()).unwrap();
    assert_eq!(stored.len(), 1);
    assert_eq!(*stored.values().next().unwrap(), 4);

    // Tampering with the cached figure shows up in the share, which
    // proves the second run read the cache instead of recounting.
    let key = stored.keys().next().unwrap().clone();
    std::fs::write(&cache, format!("{{\"{key}\": 8}}")).unwrap();
    let second = engine.execute(&request, &mut rng, None).unwrap();
    assert_eq!(second.payload.as_scalar(), Some(1.0 / 8.0));

    // New data means a new fingerprint: back to a real count.
    write_netflow(&data, "b.csv", &[("h_5", "198.51.100.9", 1, 1)]);
    let third = engine.execute(&request, &mut rng, None).unwrap();
    assert_eq!(third.payload.as_scalar(), Some(0.2));
}

#[test]
fn unreadable_population_cache_falls_back_to_counting() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let cache = tmp.path().join("population.json");
    std::fs::write(&cache, "not json at all").unwrap();
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(
        EngineConfig {
            workers: 1,
            population_cache: Some(cache),
        },
        &ledger,
        None,
    );
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();
    let result = engine.execute(&request, &mut rng, None).unwrap();
    assert_eq!(result.payload, Payload::Scalar(8700.0 / 3.0));
}

#[test]
fn percentile_batch_splits_epsilon_exactly() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);

    let mut request = mean_request(&data, (0.0, 5000.0));
    request.release = ReleaseSpec::Percentiles {
        qs: vec![0.25, 0.5, 0.75],
        bounds: Bounds::new(0.0, 5000.0).unwrap(),
    };
    let mut rng = NoiseSource::bypass();
    let result = engine.execute(&request, &mut rng, None).unwrap();

    let Payload::Scalars(vs) = &result.payload else {
        panic!("percentile batch releases scalars");
    };
    assert_eq!(vs.len(), 3);
    assert_eq!(result.metadata.epsilon_spent, 0.25);
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.25);
    // Exact values per the noise-free nearest-rank convention over
    // sorted clipped volumes [700, 3000, 5000]: ranks round(q * 3)
    // clamped to [1, 3] give 1, 2 and 2.
    assert_eq!(vs.as_slice(), &[700.0, 3000.0, 3000.0]);
}

#[test]
fn result_json_never_contains_client_identifiers() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();
    let result = engine.execute(&request, &mut rng, None).unwrap();
    let json = serde_json::to_string(&result).unwrap();
    assert!(!json.contains("h_1") && !json.contains("h_2") && !json.contains("h_3"));
}

#[test]
fn fingerprints_are_stable_and_parameter_sensitive() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    let a = mean_request(&data, (0.0, 5000.0));
    let b = mean_request(&data, (0.0, 5000.0));
    assert_eq!(a.fingerprint(), b.fingerprint());

    let mut c = mean_request(&data, (0.0, 5000.0));
    c.epsilon = eps(0.5);
    assert_ne!(a.fingerprint(), c.fingerprint());

    let mut d = mean_request(&data, (0.0, 5000.0));
    d.filter = FilterSpec::domains(["example.org"]);
    assert_ne!(a.fingerprint(), d.fingerprint());
}

#[test]
fn repeated_runs_scan_once_and_charge_per_repetition() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 2.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();

    let summary = engine
        .run_repeated(&request, 5, LedgerMode::ChargeEach, &mut rng, None)
        .unwrap();
    assert_eq!(summary.repetitions, 5);
    assert_eq!(summary.outputs.len(), 5);
    // Bypass noise is deterministic, so the spread collapses.
    let exact = 8700.0 / 3.0;
    assert_eq!(summary.median, exact);
    assert_eq!(summary.p5, exact);
    assert_eq!(summary.p95, exact);
    assert!(!summary.simulated);
    assert_eq!(summary.total_epsilon_charged, 1.25);
    assert_eq!(ledger.account("op-a").unwrap().spent, 1.25);
}

#[test]
fn repeated_charges_are_refused_as_a_block() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    // Allocation covers three repetitions, not five.
    let ledger = ledger(tmp.path(), 0.8);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();

    match engine.run_repeated(&request, 5, LedgerMode::ChargeEach, &mut rng, None) {
        Err(EngineError::Ledger(LedgerError::InsufficientBudget { .. })) => {}
        other => panic!("expected a budget refusal, got {other:?}"),
    }
    // The charges made before the refusal stay spent; nothing was
    // released against them.
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.75);
    let state = ledger.state().unwrap();
    assert!(state.records.iter().all(|r| !r.released));
}

#[test]
fn simulation_mode_never_touches_the_ledger() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 0.25);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::seeded(3);

    // Far more repetitions than the allocation could ever cover.
    let summary = engine
        .run_repeated(&request, 50, LedgerMode::Simulation, &mut rng, Some(3))
        .unwrap();
    assert!(summary.simulated);
    assert_eq!(summary.total_epsilon_charged, 0.0);
    assert_eq!(summary.outputs.len(), 50);
    assert_eq!(summary.seed, Some(3));
    assert!(summary.p5 <= summary.median && summary.median <= summary.p95);
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.0);
    assert!(!ledger.path().exists());
}

#[test]
fn repeated_simulation_with_real_noise_brackets_the_truth() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 0.25);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let mut request = mean_request(&data, (0.0, 5000.0));
    request.epsilon = eps(2.0);
    let mut rng = NoiseSource::seeded(99);

    let summary = engine
        .run_repeated(&request, 400, LedgerMode::Simulation, &mut rng, None)
        .unwrap();
    let exact = 8700.0 / 3.0;
    // Median Laplace error at b = 5000/(3*2) is ~578; the middle of 400
    // draws sits well within a few scales of the truth.
    assert!((summary.median - exact).abs() < 2500.0);
    assert!(summary.p5 < exact && exact < summary.p95);
}

#[test]
fn repeated_histograms_without_remainder_are_rejected_up_front() {
    let tmp = TempDir::new().unwrap();
    let data = data_dir(&tmp);
    seed_basic_dataset(&data);
    let ledger = ledger(tmp.path(), 10.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let mut request = mean_request(&data, (0.0, 5000.0));
    request.release = ReleaseSpec::Histogram {
        bins: BinSpec::Uniform {
            lower: 0.0,
            upper: 5000.0,
            count: 4,
        },
        include_remainder: false,
    };
    let mut rng = NoiseSource::bypass();
    match engine.run_repeated(&request, 3, LedgerMode::ChargeEach, &mut rng, None) {
        Err(EngineError::Validation { .. }) => {}
        other => panic!("expected a validation error, got {other:?}"),
    }
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.0);
}

#[test]
fn empty_dataset_directory_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&data, (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();
    match engine.execute(&request, &mut rng, None) {
        Err(EngineError::Validation { reason }) => {
            assert!(reason.contains("no partitions"));
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.0);
}

#[test]
fn missing_dataset_path_surfaces_as_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let ledger = ledger(tmp.path(), 1.0);
    let engine = Engine::new(EngineConfig::default(), &ledger, None);
    let request = mean_request(&tmp.path().join("nope"), (0.0, 5000.0));
    let mut rng = NoiseSource::bypass();
    match engine.execute(&request, &mut rng, None) {
        Err(EngineError::Data { .. }) => {}
        other => panic!("expected a data error, got {other:?}"),
    }
    assert_eq!(ledger.account("op-a").unwrap().spent, 0.0);
}
