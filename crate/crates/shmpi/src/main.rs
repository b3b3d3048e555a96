use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use shmpi::compare::bench_rank_main;
use shmpi::{launch, probe, run_comparison, write_csv, LaunchConfig, Program};
use shmpi_bench::bfs::GraphSource;
use shmpi_bench::intsort::KeySource;
use shmpi_bench::{BenchResult, CsvRow, HarnessOptions, WorkloadSpec, WORKLOADS};
use shmpi_core::{Backend, Communicator, MpiError};

#[derive(Parser)]
#[command(name = "shmpi", version, about = "Run message-passing jobs over a shared memory segment")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Launch a program on N ranks.
    Run(RunArgs),
    /// Run workloads under one or more backends and rank counts.
    Bench(BenchArgs),
    /// Remove segments left by launchers that are no longer running.
    Clean {
        /// Also remove segments of live launchers.
        #[arg(long)]
        force: bool,
    },
    #[command(hide = true, subcommand)]
    Rank(RankCmd),
}

#[derive(Args, Clone)]
struct JobArgs {
    #[arg(long, default_value = "256M", value_parser = parse_size)]
    seg_size: u64,
    #[arg(long, default_value_t = 64)]
    queue_cap: u32,
    /// Largest payload sent inline in a queue entry.
    #[arg(long, default_value_t = 256)]
    eager: u32,
    /// Whole-job time limit in seconds.
    #[arg(long, default_value_t = 600)]
    timeout_s: u64,
    /// Populate the segment's page tables up front.
    #[arg(long)]
    prefault: bool,
    /// Make completion of nonblocking sends also wait for a job barrier.
    #[arg(long)]
    isend_barrier: bool,
    /// Busy-wait added to every baseline-backend message.
    #[arg(long, default_value_t = 0)]
    baseline_latency_ns: u64,
    /// Write result rows to this CSV file
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the full results as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

impl JobArgs {
    fn config(&self, ranks: u32, backend: Backend, program: Program) -> LaunchConfig {
        let mut cfg = LaunchConfig::new(ranks, backend, program);
        cfg.seg_size = self.seg_size;
        cfg.queue_capacity = self.queue_cap;
        cfg.eager_threshold = self.eager;
        cfg.timeout = Duration::from_secs(self.timeout_s);
        cfg.op_timeout = cfg.timeout;
        cfg.prefault = self.prefault;
        cfg.isend_barrier = self.isend_barrier;
        cfg.baseline_latency_ns = self.baseline_latency_ns;
        cfg
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = 4)]
    ranks: u32,
    #[arg(long, default_value = "pointer", value_parser = parse_backend)]
    backend: Backend,
    #[command(flatten)]
    job: JobArgs,
    /// Program to run on every rank, then its arguments.
    #[arg(required = true, trailing_var_arg = true, allow_hyphen_values = true)]
    program: Vec<String>,
}

#[derive(Args)]
struct BenchArgs {
    /// Workloads to run: bfs, intsort, heat2d, lbm or all.
    #[arg(required = true)]
    names: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "4")]
    ranks: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_value = "pointer,copy", value_parser = parse_backend)]
    backend: Vec<Backend>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    reps: u32,
    /// Skip the discarded warm-up run.
    #[arg(long)]
    no_warmup: bool,
    /// bfs: log2 of the vertex count.
    #[arg(long)]
    scale: Option<u32>,
    /// bfs: edges per vertex.
    #[arg(long)]
    edgefactor: Option<u32>,
    /// intsort: number of keys.
    #[arg(long)]
    keys: Option<u64>,
    /// intsort: keys are drawn from 0..key_range.
    #[arg(long)]
    key_range: Option<u64>,
    /// heat2d and lbm: grid width and height.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// heat2d and lbm: time steps.
    #[arg(long)]
    steps: Option<u32>,
    #[command(flatten)]
    job: JobArgs,
}

#[derive(Subcommand)]
enum RankCmd {
    Bench,
    #[command(subcommand)]
    Probe(ProbeCmd),
}

#[derive(Subcommand)]
enum ProbeCmd {
    Hello,
    Fail {
        #[arg(long)]
        rank: u32,
        #[arg(long, default_value_t = 3)]
        code: i32,
    },
    Hang {
        #[arg(long)]
        rank: u32,
    },
    LockCount {
        #[arg(long)]
        iters: u64,
    },
    Barrier {
        #[arg(long)]
        gens: u64,
    },
    AllocStress {
        #[arg(long)]
        ops: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    QueueStress {
        #[arg(long)]
        per: u64,
    },
    MutualSends {
        #[arg(long)]
        count: u64,
        #[arg(long)]
        len: usize,
    },
    CopyTrace {
        #[arg(long)]
        count: u64,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        shared: bool,
    },
    Traces {
        #[arg(long)]
        traces: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn parse_backend(s: &str) -> Result<Backend, String> {
    s.parse().map_err(|e: MpiError| e.to_string())
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = match s.chars().last().map(|c| c.to_ascii_uppercase()) {
        Some('K') => (&s[..s.len() - 1], 10),
        Some('M') => (&s[..s.len() - 1], 20),
        Some('G') => (&s[..s.len() - 1], 30),
        _ => (s, 0),
    };
    let v: u64 = digits.parse().map_err(|_| format!("bad size '{s}'"))?;
    v.checked_shl(shift)
        .filter(|r| r >> shift == v)
        .ok_or_else(|| format!("size '{s}' overflows"))
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("grid '{s}' is not WxH"))?;
    let parse = |t: &str| t.parse::<usize>().map_err(|_| format!("bad grid size '{t}'"));
    Ok((parse(w)?, parse(h)?))
}

fn specs(args: &BenchArgs) -> Result<Vec<WorkloadSpec>, String> {
    let mut names: Vec<&str> = Vec::new();
    for n in &args.names {
        if n == "all" {
            names.extend(WORKLOADS);
        } else if WORKLOADS.contains(&n.as_str()) {
            names.push(n);
        } else {
            return Err(format!("unknown workload '{n}'"));
        }
    }
    Ok(names
        .into_iter()
        .map(|n| {
            let mut spec = WorkloadSpec::desk_default(n, args.seed).expect("known workload");
            match &mut spec {
                WorkloadSpec::Bfs(p) => {
                    if let GraphSource::Random { scale, edgefactor } = &mut p.graph {
                        *scale = args.scale.unwrap_or(*scale);
                        *edgefactor = args.edgefactor.unwrap_or(*edgefactor);
                    }
                }
                WorkloadSpec::IntSort(p) => {
                    if let KeySource::Random { count, range } = &mut p.keys {
                        *count = args.keys.unwrap_or(*count);
                        *range = args.key_range.unwrap_or(*range);
                    }
                }
                WorkloadSpec::Heat2d(p) => {
                    (p.nx, p.ny) = args.grid.unwrap_or((p.nx, p.ny));
                    p.steps = args.steps.unwrap_or(p.steps);
                }
                WorkloadSpec::Lbm(p) => {
                    (p.nx, p.ny) = args.grid.unwrap_or((p.nx, p.ny));
                    p.steps = args.steps.unwrap_or(p.steps);
                }
            }
            spec
        })
        .collect())
}

fn write_outputs<T: serde::Serialize>(job: &JobArgs, rows: &[CsvRow], json: &T) -> Result<(), String> {
    if let Some(path) = &job.csv {
        let f = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        write_csv(f, rows).map_err(|e| e.to_string())?;
    }
    if let Some(path) = &job.json {
        let text = serde_json::to_string_pretty(json).expect("serializable");
        std::fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), String> {
    let program = Program::new(&args.program[0]).args(&args.program[1..]);
    let cfg = args.job.config(args.ranks, args.backend, program);
    let report = launch(&cfg).map_err(|e| e.to_string())?;
    let s = &report.summary;
    eprintln!(
        "{} ranks ({}) finished in {:.3} s: {} bytes copied, {} messages, max comm {:.3} ms",
        s.ranks,
        s.backend,
        report.elapsed.as_secs_f64(),
        s.payload_bytes_copied,
        s.messages_sent,
        s.comm_time_ns as f64 / 1e6
    );
    let name = std::path::Path::new(&args.program[0])
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let row = CsvRow {
        workload: name,
        backend: s.backend.clone(),
        ranks: s.ranks,
        rep: 0,
        total_ns: s.wall_time_ns,
        comm_ns: s.comm_time_ns,
        bytes_copied: s.payload_bytes_copied,
        msgs: s.messages_sent,
        validation: "n/a".into(),
    };
    write_outputs(&args.job, &[row], s)
}

fn print_result(r: &BenchResult) {
    eprintln!(
        "{:<8} {:<8} ranks={:<2} total={:>10.3} ms comm={:>10.3} ms copied={:>12} B  {} ({})",
        r.workload,
        r.backend,
        r.ranks,
        r.total_time_ns() as f64 / 1e6,
        r.comm_time_ns() as f64 / 1e6,
        r.reps.first().map_or(0, |x| x.bytes_copied),
        if r.validation.passed { "pass" } else { "FAIL" },
        r.validation.detail
    );
}

fn cmd_bench(args: BenchArgs) -> Result<(), String> {
    let specs = specs(&args)?;
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let base = args.job.config(1, Backend::PointerShared, Program::new(&exe));
    let opts = HarnessOptions {
        reps: args.reps,
        warmup: !args.no_warmup,
    };
    eprintln!("desk-scale workload sizes; medians over {} repetitions", args.reps);
    let results = run_comparison(&base, &exe, &specs, &args.backend, &args.ranks, opts, print_result)
        .map_err(|e| e.to_string())?;
    let rows: Vec<CsvRow> = results.iter().flat_map(BenchResult::csv_rows).collect();
    write_outputs(&args.job, &rows, &results)?;
    match results.iter().filter(|r| !r.comparable()).count() {
        0 => Ok(()),
        bad => Err(format!("{bad} result(s) failed validation")),
    }
}

fn rank_main(cmd: RankCmd) -> Result<(), String> {
    if let RankCmd::Bench = cmd {
        return bench_rank_main().map_err(|e| e.to_string());
    }
    let RankCmd::Probe(p) = cmd else { unreachable!() };
    let mut comm = Communicator::init_from_env().map_err(|e| e.to_string())?;
    let c = &mut comm;
    let run = match p {
        ProbeCmd::Hello => probe::hello(c),
        ProbeCmd::Fail { rank, code } => probe::fail(c, rank, code),
        ProbeCmd::Hang { rank } => probe::hang(c, rank),
        ProbeCmd::LockCount { iters } => probe::lock_count(c, iters),
        ProbeCmd::Barrier { gens } => probe::barrier_lockstep(c, gens),
        ProbeCmd::AllocStress { ops, seed } => probe::alloc_stress(c, ops, seed),
        ProbeCmd::QueueStress { per } => probe::queue_stress(c, per),
        ProbeCmd::MutualSends { count, len } => probe::mutual_sends(c, count, len),
        ProbeCmd::CopyTrace { count, len, shared } => probe::copy_trace(c, count, len, shared),
        ProbeCmd::Traces { traces, seed } => probe::traffic_traces(c, traces, seed),
    };
    run.map_err(|e| format!("rank {}: {e}", comm.rank()))?;
    comm.finalize().map(|_| ()).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Bench(a) => cmd_bench(a),
        Cmd::Clean { force } => {
            for name in shmpi::clean::clean_segments(force) {
                println!("removed {name}");
            }
            Ok(())
        }
        Cmd::Rank(r) => rank_main(r),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shmpi: {e}");
            ExitCode::FAILURE
        }
    }
}
