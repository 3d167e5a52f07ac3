use minos_qsim::{simulate, sweep, sweep_csv, Discipline, ServiceDist, SimConfig, SWEEP_CSV_HEADER};

fn base(d: Discipline, k: f64, rho: f64, horizon: u64) -> SimConfig {
    SimConfig { discipline: d, k, rho, horizon, ..Default::default() }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b
}

#[test]
fn mm1_mean_response() {
    for rho in [0.3, 0.6, 0.9] {
        let cfg = SimConfig {
            n_cores: 1,
            rho,
            service: ServiceDist::Exponential { mean: 1.0 },
            horizon: 4_000_000,
            seed: 11,
            ..Default::default()
        };
        let r = simulate(&cfg).unwrap();
        let oracle = 1.0 / (1.0 - rho);
        assert!(rel(r.mean, oracle) < 0.02, "rho {rho}: {} vs {oracle}", r.mean);
    }
}

/// Pollaczek-Khinchine mean response for one queue.
fn pk_mean(lambda: f64, es: f64, es2: f64) -> f64 {
    es + lambda * es2 / (2.0 * (1.0 - lambda * es))
}

#[test]
fn per_core_queues_match_pollaczek_khinchine() {
    // Rare large requests dominate the variance, so K = 100 needs a longer run.
    for (k, rho, horizon) in [(1.0, 0.5, 2_000_000), (1.0, 0.8, 2_000_000), (10.0, 0.6, 3_000_000), (100.0, 0.5, 10_000_000)] {
        let cfg = base(Discipline::NxMG1, k, rho, horizon);
        let f = cfg.frac_large;
        let es = 1.0 - f + f * k;
        let es2 = 1.0 - f + f * k * k;
        let lambda_q = cfg.arrival_rate() / cfg.n_cores as f64;
        let oracle = pk_mean(lambda_q, es, es2);
        let r = simulate(&cfg).unwrap();
        assert!(rel(r.mean, oracle) < 0.03, "K {k} rho {rho}: {} vs {oracle}", r.mean);
    }
}

fn erlang_c(n: usize, a: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..n {
        term *= a / i as f64;
        sum += term;
    }
    let last = term * a / n as f64 * n as f64 / (n as f64 - a);
    last / (sum + last)
}

#[test]
fn shared_queue_matches_erlang_c() {
    for rho in [0.5, 0.8] {
        let cfg = SimConfig {
            discipline: Discipline::Mgn,
            rho,
            service: ServiceDist::Exponential { mean: 1.0 },
            horizon: 3_000_000,
            ..Default::default()
        };
        let n = cfg.n_cores;
        let lambda = cfg.arrival_rate();
        let oracle = 1.0 + erlang_c(n, lambda) / (n as f64 - lambda);
        let r = simulate(&cfg).unwrap();
        assert!(rel(r.mean, oracle) < 0.02, "rho {rho}: {} vs {oracle}", r.mean);
    }
}

#[test]
fn littles_law_every_discipline() {
    for d in Discipline::ALL {
        for (k, rho) in [(1.0, 0.5), (100.0, 0.7), (1000.0, 0.5)] {
            let r = simulate(&base(d, k, rho, 1_000_000)).unwrap();
            let lw = r.lambda * r.mean;
            assert!(rel(r.mean_in_system, lw) < 0.03, "{d} K {k} rho {rho}: L {} vs lambda W {lw}", r.mean_in_system);
        }
    }
}

#[test]
fn utilization_matches_offered_load() {
    for d in Discipline::ALL {
        let r = simulate(&base(d, 10.0, 0.6, 1_000_000)).unwrap();
        let mean_u: f64 = r.utilization.iter().sum::<f64>() / r.utilization.len() as f64;
        assert!((mean_u - 0.6).abs() < 0.02, "{d}: {mean_u}");
    }
}

#[test]
fn k1_is_the_small_only_workload() {
    for d in Discipline::ALL {
        let with = simulate(&base(d, 1.0, 0.5, 1_000_000)).unwrap();
        let without = simulate(&SimConfig { frac_large: 0.0, ..base(d, 1.0, 0.5, 1_000_000) }).unwrap();
        assert!(rel(with.p99, without.p99) < 0.05, "{d}: {} vs {}", with.p99, without.p99);
    }
}

#[test]
fn per_core_queues_degrade_at_low_load() {
    let k1 = simulate(&base(Discipline::NxMG1, 1.0, 0.1, 2_000_000)).unwrap();
    let k100 = simulate(&base(Discipline::NxMG1, 100.0, 0.1, 2_000_000)).unwrap();
    assert!(k100.p99 >= 10.0 * k1.p99, "{} vs {}", k100.p99, k1.p99);
}

#[test]
fn late_binding_resists_variability_at_low_load() {
    let per_core = simulate(&base(Discipline::NxMG1, 100.0, 0.1, 2_000_000)).unwrap();
    let shared = simulate(&base(Discipline::Mgn, 100.0, 0.1, 2_000_000)).unwrap();
    assert!(shared.p99 < per_core.p99);
}

#[test]
fn all_size_unaware_degrade_at_high_load_with_k1000() {
    for d in [Discipline::NxMG1, Discipline::Mgn, Discipline::NxMG1Ws] {
        let k1 = simulate(&base(d, 1.0, 0.9, 2_000_000)).unwrap();
        let k1000 = simulate(&base(d, 1000.0, 0.9, 2_000_000)).unwrap();
        assert!(k1000.p99 >= 10.0 * k1.p99, "{d}: {} vs {}", k1000.p99, k1.p99);
    }
}

#[test]
fn size_aware_small_requests_stay_near_baseline() {
    for k in [10.0, 100.0, 1000.0] {
        for rho in [0.2, 0.5, 0.8] {
            let baseline = simulate(&base(Discipline::NxMG1, 1.0, rho, 1_000_000)).unwrap();
            let sa = simulate(&base(Discipline::SizeAware, k, rho, 1_000_000)).unwrap();
            assert!(sa.small_p99 <= 3.0 * baseline.p99, "K {k} rho {rho}: {} vs {}", sa.small_p99, baseline.p99);
        }
    }
}

#[test]
fn sweep_is_grid_ordered_and_deterministic() {
    let cfg = SimConfig { horizon: 100_000, ..Default::default() };
    let ds = [Discipline::Mgn, Discipline::NxMG1];
    let a = sweep(&cfg, &ds, &[0.2, 0.6], &[1.0, 10.0]).unwrap();
    let b = sweep(&cfg, &ds, &[0.2, 0.6], &[1.0, 10.0]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 8);
    assert_eq!((a[0].discipline, a[0].k, a[0].rho), (Discipline::Mgn, 1.0, 0.2));
    assert_eq!((a[7].discipline, a[7].k, a[7].rho), (Discipline::NxMG1, 10.0, 0.6));
    let csv = sweep_csv(&a);
    assert!(csv.starts_with(SWEEP_CSV_HEADER));
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn sweep_propagates_unstable_point() {
    let cfg = SimConfig { horizon: 1000, ..Default::default() };
    assert!(sweep(&cfg, &[Discipline::Mgn], &[0.5, 1.0], &[1.0]).is_err());
}
