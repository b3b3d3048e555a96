use shmpi_bench::bfs::{BfsParams, NO_PARENT};
use shmpi_bench::heat2d::{HeatInit, HeatParams};
use shmpi_bench::intsort::SortParams;
use shmpi_bench::lbm::LbmParams;
use shmpi_bench::{run_benchmark, HarnessOptions, Output, WorkloadSpec};
use shmpi_core::mpi::local::LocalJob;
use shmpi_core::Backend;

/// Runs `spec` once on `n` ranks and returns each rank's output with the
/// validation verdict seen on that rank.
fn run_spec(n: u32, backend: Backend, spec: &WorkloadSpec) -> Vec<(Output, shmpi_bench::Validation)> {
    LocalJob::new(n, backend)
        .seg_size(128 << 20)
        .run(|comm| {
            let out = spec.run(comm).map_err(to_mpi)?;
            let v = spec.validate(comm, &out).map_err(to_mpi)?;
            Ok((out, v))
        })
        .unwrap()
        .into_iter()
        .map(|(r, _)| r)
        .collect()
}

fn to_mpi(e: shmpi_bench::BenchError) -> shmpi_core::MpiError {
    match e {
        shmpi_bench::BenchError::Mpi(m) => m,
        other => panic!("{other}"),
    }
}

fn u64s(o: &Output) -> &[u64] {
    match o {
        Output::Parents(v) | Output::Keys(v) => v,
        Output::Field(_) => panic!("not an integer output"),
    }
}

fn f64s(o: &Output) -> &[f64] {
    match o {
        Output::Field(v) => v,
        _ => panic!("not a field"),
    }
}

fn concat_u64(outs: &[(Output, shmpi_bench::Validation)]) -> Vec<u64> {
    outs.iter().flat_map(|(o, _)| u64s(o).to_vec()).collect()
}

fn concat_f64(outs: &[(Output, shmpi_bench::Validation)]) -> Vec<f64> {
    outs.iter().flat_map(|(o, _)| f64s(o).to_vec()).collect()
}

fn all_pass(outs: &[(Output, shmpi_bench::Validation)]) {
    for (_, v) in outs {
        assert!(v.passed, "{}", v.detail);
    }
}

#[test]
fn bfs_path_graph_parents() {
    let spec = WorkloadSpec::Bfs(BfsParams::explicit(4, vec![(0, 1), (1, 2), (2, 3)], 0));
    for backend in Backend::ALL {
        let outs = run_spec(2, backend, &spec);
        all_pass(&outs);
        assert_eq!(concat_u64(&outs), vec![0, 0, 1, 2]);
    }
}

#[test]
fn bfs_isolated_vertex_keeps_sentinel() {
    let spec = WorkloadSpec::Bfs(BfsParams::explicit(5, vec![(0, 1), (1, 2), (3, 2)], 1));
    let outs = run_spec(3, Backend::PointerShared, &spec);
    all_pass(&outs);
    assert_eq!(concat_u64(&outs), vec![1, 1, 1, 2, NO_PARENT]);
}

/// Size of the root's connected component by union-find.
fn component_size(n: u64, edges: &[(u64, u64)], root: u64) -> u64 {
    let mut up: Vec<usize> = (0..n as usize).collect();
    fn find(up: &mut [usize], mut x: usize) -> usize {
        while up[x] != x {
            up[x] = up[up[x]];
            x = up[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut up, a as usize), find(&mut up, b as usize));
        up[ra] = rb;
    }
    let r = find(&mut up, root as usize);
    (0..n as usize).filter(|&v| find(&mut up, v) == r).count() as u64
}

#[test]
fn bfs_visits_the_root_component() {
    let p = BfsParams::random(10, 8, 42);
    let expect = component_size(p.vertices(), &p.edge_list(), p.root);
    let spec = WorkloadSpec::Bfs(p);
    let mut seen = Vec::new();
    for backend in Backend::ALL {
        let outs = run_spec(4, backend, &spec);
        all_pass(&outs);
        let parents = concat_u64(&outs);
        let visited = parents.iter().filter(|&&p| p != NO_PARENT).count() as u64;
        assert_eq!(visited, expect);
        seen.push(parents);
    }
    assert_eq!(seen[0], seen[1], "backends disagree");
}

#[test]
fn intsort_small_example() {
    let spec = WorkloadSpec::IntSort(SortParams::explicit(vec![7, 1, 5, 3, 0, 2, 6, 4]));
    for backend in Backend::ALL {
        let outs = run_spec(2, backend, &spec);
        all_pass(&outs);
        assert_eq!(u64s(&outs[0].0), &[0, 1, 2, 3]);
        assert_eq!(u64s(&outs[1].0), &[4, 5, 6, 7]);
    }
}

#[test]
fn intsort_matches_serial_sort() {
    let p = SortParams::random(1 << 20, 1 << 24, 9);
    let mut expect = p.keys(0, 1 << 20);
    let input_sum: u128 = expect.iter().map(|&k| k as u128).sum();
    expect.sort();
    let outs = run_spec(4, Backend::PointerShared, &WorkloadSpec::IntSort(p));
    all_pass(&outs);
    let got = concat_u64(&outs);
    assert_eq!(got.iter().map(|&k| k as u128).sum::<u128>(), input_sum);
    assert!(got.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(got, expect);
}

#[test]
fn intsort_all_equal_keys() {
    let spec = WorkloadSpec::IntSort(SortParams::explicit(vec![5; 12]));
    let outs = run_spec(4, Backend::CopyBaseline, &spec);
    all_pass(&outs);
    assert_eq!(concat_u64(&outs), vec![5; 12]);
}

#[test]
fn heat_uniform_grid_unchanged() {
    let spec = WorkloadSpec::Heat2d(HeatParams::new(16, 12, 40, HeatInit::Uniform(2.5), 0));
    let outs = run_spec(3, Backend::PointerShared, &spec);
    all_pass(&outs);
    assert!(concat_f64(&outs).iter().all(|&v| v == 2.5));
}

/// Plain 2D-array stencil with mirrored edges.
fn heat_oracle(nx: usize, ny: usize, steps: u32, alpha: f64, hot: f64) -> Vec<f64> {
    let mut u = vec![vec![0.0f64; nx]; ny];
    u[ny / 2][nx / 2] = hot;
    for _ in 0..steps {
        let at = |u: &Vec<Vec<f64>>, y: isize, x: isize| {
            u[y.clamp(0, ny as isize - 1) as usize][x.clamp(0, nx as isize - 1) as usize]
        };
        let mut v = u.clone();
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                let c = at(&u, y, x);
                let lap = at(&u, y - 1, x) + at(&u, y + 1, x) + at(&u, y, x - 1) + at(&u, y, x + 1)
                    - 4.0 * c;
                v[y as usize][x as usize] = c + alpha * lap;
            }
        }
        u = v;
    }
    u.concat()
}

#[test]
fn heat_hot_center_matches_oracle() {
    let p = HeatParams::new(64, 64, 100, HeatInit::HotCenter(1000.0), 0);
    let expect = heat_oracle(64, 64, 100, p.alpha, 1000.0);
    for backend in Backend::ALL {
        let outs = run_spec(4, backend, &WorkloadSpec::Heat2d(p.clone()));
        all_pass(&outs);
        let got = concat_f64(&outs);
        let diff = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{backend}: {diff:e}");
    }
}

#[test]
fn lbm_rest_state_is_stationary() {
    let mut p = LbmParams::new(10, 8, 30, 0);
    p.amplitude = 0.0;
    let outs = run_spec(2, Backend::PointerShared, &WorkloadSpec::Lbm(p.clone()));
    all_pass(&outs);
    let w = shmpi_bench::lbm::W;
    for (i, v) in concat_f64(&outs).iter().enumerate() {
        assert!((v - w[i % 9]).abs() <= 1e-15, "value {i}: {v}");
    }
}

/// Separate D2Q9 implementation: per-direction planes, push streaming.
fn lbm_oracle(p: &LbmParams) -> Vec<f64> {
    let (nx, ny) = (p.nx, p.ny);
    let e: [(i64, i64); 9] = [(0, 0), (1, 0), (0, 1), (-1, 0), (0, -1), (1, 1), (-1, 1), (-1, -1), (1, -1)];
    let w = [4.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0, 1.0 / 36.0];
    let init: Vec<f64> = (0..ny).flat_map(|y| p.initial_row(y)).collect();
    let mut f: Vec<Vec<f64>> = (0..9).map(|q| (0..nx * ny).map(|c| init[c * 9 + q]).collect()).collect();
    for _ in 0..p.steps {
        let mut g = vec![vec![0.0; nx * ny]; 9];
        for (q, &(ex, ey)) in e.iter().enumerate() {
            for y in 0..ny {
                for x in 0..nx {
                    let tx = (x as i64 + ex).rem_euclid(nx as i64) as usize;
                    let ty = (y as i64 + ey).rem_euclid(ny as i64) as usize;
                    g[q][ty * nx + tx] = f[q][y * nx + x];
                }
            }
        }
        for c in 0..nx * ny {
            let rho: f64 = (0..9).map(|q| g[q][c]).sum();
            let ux = (0..9).map(|q| g[q][c] * e[q].0 as f64).sum::<f64>() / rho;
            let uy = (0..9).map(|q| g[q][c] * e[q].1 as f64).sum::<f64>() / rho;
            for q in 0..9 {
                let eu = e[q].0 as f64 * ux + e[q].1 as f64 * uy;
                let feq = w[q] * rho * (1.0 + 3.0 * eu + 4.5 * eu * eu - 1.5 * (ux * ux + uy * uy));
                g[q][c] += (feq - g[q][c]) / p.tau;
            }
        }
        f = g;
    }
    (0..nx * ny).flat_map(|c| (0..9).map(move |q| (c, q))).map(|(c, q)| f[q][c]).collect()
}

#[test]
fn lbm_perturbed_matches_oracle() {
    let p = LbmParams::new(32, 32, 50, 17);
    let expect = lbm_oracle(&p);
    for backend in Backend::ALL {
        let outs = run_spec(4, backend, &WorkloadSpec::Lbm(p.clone()));
        all_pass(&outs);
        let got = concat_f64(&outs);
        let diff = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-10, "{backend}: {diff:e}");
    }
}

#[test]
fn lbm_mass_drift_over_long_run() {
    let p = LbmParams::new(16, 16, 1000, 3);
    let initial: f64 = (0..16).flat_map(|y| p.initial_row(y)).sum();
    let outs = run_spec(2, Backend::PointerShared, &WorkloadSpec::Lbm(p));
    all_pass(&outs);
    let after: f64 = concat_f64(&outs).iter().sum();
    assert!((after - initial).abs() / initial <= 1e-10);
}

fn bench(n: u32, backend: Backend, spec: &WorkloadSpec, reps: u32) -> shmpi_bench::BenchResult {
    let opts = HarnessOptions { reps, warmup: true };
    let mut out = LocalJob::new(n, backend)
        .seg_size(128 << 20)
        .run(|comm| run_benchmark(comm, spec, opts).map_err(to_mpi))
        .unwrap();
    assert!(out.iter().skip(1).all(|(r, _)| r.is_none()));
    out.swap_remove(0).0.unwrap()
}

#[test]
fn heat_halo_copy_ratio() {
    let spec = WorkloadSpec::Heat2d(HeatParams::new(256, 64, 10, HeatInit::Random, 1));
    let ptr = bench(4, Backend::PointerShared, &spec, 1);
    let copy = bench(4, Backend::CopyBaseline, &spec, 1);
    assert!(ptr.comparable() && copy.comparable());
    // rows are 2 KiB, well above the eager threshold
    let (p, c) = (ptr.reps[0].bytes_copied, copy.reps[0].bytes_copied);
    assert_eq!(p, 6 * 10 * 256 * 8);
    assert!(c as f64 / p as f64 >= 2.0, "{c} / {p}");
    assert_eq!(ptr.validation.checksum, copy.validation.checksum);
}

#[test]
fn repetitions_are_deterministic_and_summarized() {
    let spec = WorkloadSpec::IntSort(SortParams::random(1 << 14, 1 << 20, 5));
    for ranks in [1, 2, 4, 8] {
        let r = bench(ranks, Backend::CopyBaseline, &spec, 3);
        assert!(r.comparable(), "{}", r.validation.detail);
        assert_eq!(r.ranks, ranks);
        assert_eq!(r.per_rank.len(), ranks as usize);
        assert_eq!(r.rank_metrics.len(), ranks as usize);
        let rows = r.csv_rows();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|row| row.validation == "pass" && row.ranks == ranks));
        for (k, s) in r.reps.iter().enumerate() {
            let slowest = r.per_rank.iter().map(|p| p[k].total_ns).max().unwrap();
            let bytes: u64 = r.per_rank.iter().map(|p| p[k].bytes_copied).sum();
            assert_eq!((s.total_ns, s.bytes_copied), (slowest, bytes));
        }
    }
}

#[test]
fn outputs_identical_across_backends_and_runs() {
    let spec = WorkloadSpec::Lbm(LbmParams::new(12, 9, 7, 4));
    let a = run_spec(3, Backend::PointerShared, &spec);
    let b = run_spec(3, Backend::PointerShared, &spec);
    let c = run_spec(3, Backend::CopyBaseline, &spec);
    let bits = |o: &[(Output, shmpi_bench::Validation)]| -> Vec<u64> {
        concat_f64(o).iter().map(|v| v.to_bits()).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(bits(&a), bits(&c));
}

#[test]
fn invalid_specs_are_rejected() {
    let spec = WorkloadSpec::IntSort(SortParams::random(10, 100, 0));
    assert!(spec.check(4).is_err());
    let spec = WorkloadSpec::Heat2d(HeatParams::new(8, 2, 1, HeatInit::Random, 0));
    assert!(spec.check(4).is_err());
}
