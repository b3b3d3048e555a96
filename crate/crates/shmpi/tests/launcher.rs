use std::path::Path;
use std::process::Command;
use std::sync::Mutex;
use std::time::Duration;

use shmpi::aggregate::{aggregate_metrics, summarize};
use shmpi::clean::clean_segments;
use shmpi::{launch, read_csv, run_comparison, write_csv, AggregateError, LaunchConfig, LaunchError, Program};
use shmpi_bench::heat2d::{HeatInit, HeatParams};
use shmpi_bench::intsort::SortParams;
use shmpi_bench::{HarnessOptions, WorkloadSpec, CSV_HEADER};
use shmpi_core::segment::{create_segment, list_job_segments};
use shmpi_core::{Backend, RunMetrics, SegmentConfig};

const EXE: &str = env!("CARGO_BIN_EXE_shmpi");

/// Supervision tests inspect global state (segments, processes).
static SERIAL: Mutex<()> = Mutex::new(());

fn probe(args: &[&str]) -> Program {
    Program::new(EXE).args(["rank", "probe"]).args(args.iter().copied())
}

fn own_segments() -> Vec<String> {
    let prefix = format!("shmpi.{}-", std::process::id());
    list_job_segments().into_iter().filter(|n| n.starts_with(&prefix)).collect()
}

fn probe_processes(needle: &str) -> usize {
    std::fs::read_dir("/proc")
        .unwrap()
        .filter_map(|e| e.ok())
        .filter_map(|e| std::fs::read(e.path().join("cmdline")).ok())
        .filter(|c| {
            let c = String::from_utf8_lossy(c).replace('\0', " ");
            c.contains(EXE) && c.contains(needle)
        })
        .count()
}

#[test]
fn hello_world_on_four_ranks() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let out = Command::new(EXE)
        .args(["run", "--ranks", "4", "--", EXE, "rank", "probe", "hello"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut lines: Vec<String> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    lines.sort();
    let expect: Vec<String> = (0..4).map(|r| format!("hello from rank {r} of 4")).collect();
    assert_eq!(lines, expect);
}

#[test]
fn crashed_rank_is_reported_and_cleaned_up() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = LaunchConfig::new(4, Backend::PointerShared, probe(&["fail", "--rank", "2", "--code", "9"]));
    match launch(&cfg) {
        Err(LaunchError::RankCrashed { rank: 2, code: Some(9), .. }) => {}
        other => panic!("{other:?}"),
    }
    assert!(own_segments().is_empty());
    assert_eq!(probe_processes("fail"), 0);
}

#[test]
fn hung_rank_times_out_without_leaks() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = LaunchConfig::new(3, Backend::CopyBaseline, probe(&["hang", "--rank", "1"]));
    cfg.timeout = Duration::from_secs(1);
    let t = std::time::Instant::now();
    match launch(&cfg) {
        Err(LaunchError::JobTimeout(d)) => assert_eq!(d, Duration::from_secs(1)),
        other => panic!("{other:?}"),
    }
    assert!(t.elapsed() < Duration::from_secs(5));
    assert!(own_segments().is_empty());
    assert_eq!(probe_processes("hang"), 0);
}

#[test]
fn missing_program_fails_to_spawn() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = LaunchConfig::new(2, Backend::PointerShared, Program::new("/nonexistent/shmpi-rank"));
    assert!(matches!(launch(&cfg), Err(LaunchError::SpawnFailed { rank: 0, .. })));
    assert!(own_segments().is_empty());
}

#[test]
fn infeasible_layout_rejected_before_spawn() {
    let mut cfg = LaunchConfig::new(2, Backend::PointerShared, probe(&["hello"]));
    cfg.seg_size = 4096;
    assert!(matches!(launch(&cfg), Err(LaunchError::InvalidConfig(_))));
    cfg.n_ranks = 0;
    assert!(matches!(cfg.validate(), Err(LaunchError::InvalidConfig(_))));
}

#[test]
fn knobs_reach_every_rank() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let mut cfg = LaunchConfig::new(3, Backend::CopyBaseline, probe(&["hello"]));
    cfg.queue_capacity = 32;
    cfg.eager_threshold = 128;
    cfg.seg_size = 32 << 20;
    cfg.isend_barrier = true;
    cfg.baseline_latency_ns = 5;
    cfg.prefault = true;
    let report = launch(&cfg).unwrap();
    assert_eq!(report.per_rank.len(), 3);
    for (rank, m) in report.per_rank.iter().enumerate() {
        assert_eq!(m.rank, rank as u32);
        let k = &m.knobs;
        assert_eq!(k["n_ranks"], "3");
        assert_eq!(k["backend"], "copy");
        assert_eq!(k["queue_cap"], "32");
        assert_eq!(k["eager"], "128");
        assert_eq!(k["seg_size"], (32u64 << 20).to_string());
        assert_eq!(k["isend_barrier"], "true");
        assert_eq!(k["baseline_latency_ns"], "5");
        assert_eq!(k["prefault"], "true");
    }
    assert_eq!(report.summary.ranks, 3);
}

fn write_rank(dir: &Path, rank: u32, copied: u64, wall: u64) {
    let m = RunMetrics {
        schema_version: shmpi_core::mpi::METRICS_SCHEMA_VERSION,
        rank,
        backend: "pointer".into(),
        payload_bytes_copied: copied,
        eager_bytes_copied: copied,
        wall_time_ns: wall,
        comm_time_ns: wall / 2,
        messages_sent: 1,
        ..RunMetrics::default()
    };
    std::fs::write(dir.join(RunMetrics::file_name(rank)), serde_json::to_string(&m).unwrap()).unwrap();
}

#[test]
fn aggregation_sums_counters_and_takes_slowest_rank() {
    let dir = tempfile::tempdir().unwrap();
    for r in 0..4 {
        write_rank(dir.path(), r, 100, 1000 + r as u64 * 10);
    }
    let s = aggregate_metrics(dir.path(), 4).unwrap();
    assert_eq!(s.payload_bytes_copied, 400);
    assert_eq!(s.messages_sent, 4);
    assert_eq!(s.wall_time_ns, 1030);
    assert_eq!(s.comm_time_ns, 515);
    assert_eq!(summarize(&[]).ranks, 0);
}

#[test]
fn aggregation_errors() {
    let dir = tempfile::tempdir().unwrap();
    for r in [0, 1, 3] {
        write_rank(dir.path(), r, 1, 1);
    }
    assert!(matches!(
        aggregate_metrics(dir.path(), 4),
        Err(AggregateError::MissingRankMetrics(2))
    ));
    let path = dir.path().join(RunMetrics::file_name(2));
    std::fs::write(&path, r#"{"schema_version": 2, "rank": 2}"#).unwrap();
    assert!(matches!(
        aggregate_metrics(dir.path(), 4),
        Err(AggregateError::SchemaMismatch { rank: 2, found: 2, .. })
    ));
    std::fs::write(&path, "not json").unwrap();
    assert!(matches!(
        aggregate_metrics(dir.path(), 4),
        Err(AggregateError::Malformed { rank: 2, .. })
    ));
}

#[test]
fn intsort_rank_sweep_csv() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let spec = WorkloadSpec::IntSort(SortParams::random(1 << 16, 1 << 20, 3));
    let base = LaunchConfig::new(1, Backend::PointerShared, Program::new(EXE));
    let opts = HarnessOptions { reps: 2, warmup: false };
    let results = run_comparison(&base, Path::new(EXE), &[spec], &[Backend::CopyBaseline], &[1, 2, 4, 8], opts, |_| {})
        .unwrap();
    let rows: Vec<_> = results.iter().flat_map(|r| r.csv_rows()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.csv");
    write_csv(std::fs::File::create(&path).unwrap(), &rows).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let back = read_csv(&path).unwrap();
    assert_eq!(back, rows);
    let ranks: Vec<u32> = back.iter().map(|r| r.ranks).collect();
    assert_eq!(ranks, vec![1, 1, 2, 2, 4, 4, 8, 8]);
    assert!(back.iter().all(|r| r.validation == "pass" && r.workload == "intsort"));
}

#[test]
fn heat_copy_ratio_across_processes() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let spec = WorkloadSpec::Heat2d(HeatParams::new(512, 64, 20, HeatInit::Random, 2));
    let base = LaunchConfig::new(1, Backend::PointerShared, Program::new(EXE));
    let opts = HarnessOptions { reps: 1, warmup: false };
    let r = run_comparison(&base, Path::new(EXE), &[spec], &Backend::ALL, &[4], opts, |_| {}).unwrap();
    let (ptr, copy) = (&r[0], &r[1]);
    assert_eq!((ptr.backend.as_str(), copy.backend.as_str()), ("pointer", "copy"));
    assert!(ptr.comparable() && copy.comparable());
    let ratio = copy.reps[0].bytes_copied as f64 / ptr.reps[0].bytes_copied as f64;
    assert!(ratio >= 2.0, "ratio {ratio}");
    assert_eq!(ptr.validation.checksum, copy.validation.checksum);
}

#[test]
fn clean_removes_orphaned_segments_only() {
    let _g = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    // pid 4000000000 cannot exist; our own pid is alive
    let dead = "shmpi.4000000000-0-test".to_string();
    let live = format!("shmpi.{}-clean-test", std::process::id());
    for name in [&dead, &live] {
        let mut s = create_segment(SegmentConfig::new(name.clone(), 1).with_total_size(16 << 20)).unwrap();
        s.keep_on_drop();
    }
    let removed = clean_segments(false);
    assert!(removed.contains(&dead));
    assert!(!removed.contains(&live));
    assert!(shmpi_core::segment::unlink_segment(&live).unwrap());
}
