use std::sync::Arc;

use minos_core::loadgen::{build_keyspace, Arrivals, RequestGen, SpecError, WorkloadSpec};
use minos_core::runtime::Policy;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SAMPLES: usize = 1_000_000;

fn generator(spec: &WorkloadSpec) -> RequestGen {
    RequestGen::new(spec, Arc::new(build_keyspace(spec, spec.seed)), Policy::SizeAware, 8)
}

/// Chi-square p-value of rank counts against p(r) ∝ (r + 1)^-s, with
/// neighbouring ranks merged until each bin expects at least 20 hits.
fn zipf_chi_square_p(counts: &[u64], s: f64) -> f64 {
    let weights: Vec<f64> = (1..=counts.len()).map(|k| (k as f64).powf(-s)).collect();
    let norm: f64 = weights.iter().sum();
    let n: u64 = counts.iter().sum();
    let (mut stat, mut bins) = (0.0, 0usize);
    let (mut exp, mut obs) = (0.0, 0u64);
    for (w, &c) in weights.iter().zip(counts) {
        exp += n as f64 * w / norm;
        obs += c;
        if exp >= 20.0 {
            stat += (obs as f64 - exp).powi(2) / exp;
            bins += 1;
            (exp, obs) = (0.0, 0);
        }
    }
    if exp > 0.0 {
        stat += (obs as f64 - exp).powi(2) / exp;
        bins += 1;
    }
    ChiSquared::new((bins - 1) as f64).unwrap().sf(stat)
}

#[test]
fn zipf_ranks_pass_chi_square() {
    let spec = WorkloadSpec::scaled(100_000);
    let gen = generator(&spec);
    let n = spec.total_keys - spec.large_keys;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0u64; n];
    for _ in 0..SAMPLES {
        counts[gen.sample_rank(&mut rng)] += 1;
    }
    let p = zipf_chi_square_p(&counts, spec.zipf_s);
    assert!(p > 0.01, "p = {p}");
    // the oracle rejects a visibly different exponent
    assert!(zipf_chi_square_p(&counts, 0.9) < 1e-6);
}

/// Asymptotic Kolmogorov distribution with Stephens' small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_exponential(gaps: &mut [f64], rate: f64) -> f64 {
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in gaps.iter().enumerate() {
        let f = 1.0 - (-rate * x).exp();
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    ks_p_value(d, gaps.len())
}

#[test]
fn interarrivals_pass_ks_against_exponential() {
    let spec = WorkloadSpec::scaled(10_000);
    let gen = generator(&spec);
    for threads in [1, 4] {
        let rate = 100_000.0;
        let duration = SAMPLES as f64 / rate;
        let times: Vec<u64> = Arrivals::new(&gen, rate, duration, threads, 5, 0).map(|r| r.sent_ns).collect();
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
        let mut gaps: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]) as f64 + 0.5).collect();
        assert!(gaps.len() > 990_000);
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean * rate / 1e9 - 1.0).abs() < 0.01, "mean gap {mean}");
        let p = ks_exponential(&mut gaps, rate / 1e9);
        assert!(p > 0.01, "threads={threads}: p = {p}");
        // and the test has power: a 2% rate error is rejected
        assert!(ks_exponential(&mut gaps, 1.02 * rate / 1e9) < 0.01);
    }
}

fn within_3_sigma(hits: u64, n: u64, p: f64) -> bool {
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    (hits as f64 - n as f64 * p).abs() <= 3.0 * sigma
}

#[test]
fn large_fraction_is_binomial() {
    for p_l in [0.0625, 0.125, 0.25, 0.75] {
        let spec = WorkloadSpec { p_l, ..WorkloadSpec::scaled(100_000) };
        let gen = generator(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut large = 0u64;
        for _ in 0..SAMPLES {
            let r = gen.next_request(&mut rng, 0.0);
            assert_eq!(r.large, r.size >= spec.large_range.0);
            large += r.large as u64;
        }
        assert!(within_3_sigma(large, SAMPLES as u64, p_l / 100.0), "p_l={p_l}: {large}");
    }
}

#[test]
fn schedule_changes_large_fraction_at_step() {
    let spec = WorkloadSpec { schedule: vec![(1.0, 0.75)], ..WorkloadSpec::scaled(100_000) };
    let gen = generator(&spec);
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let count = |t: f64, rng: &mut ChaCha8Rng| (0..SAMPLES / 2).filter(|_| gen.next_request(rng, t).large).count();
    let before = count(0.999, &mut rng) as u64;
    let after = count(1.0, &mut rng) as u64;
    assert!(within_3_sigma(before, SAMPLES as u64 / 2, 0.00125));
    assert!(within_3_sigma(after, SAMPLES as u64 / 2, 0.0075));
}

#[test]
fn spec_file_errors_carry_line_numbers() {
    let dir = std::env::temp_dir().join(format!("minos-spec-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let good = dir.join("good.spec");
    let spec = WorkloadSpec { schedule: vec![(2.0, 0.5), (4.0, 0.0625)], ..WorkloadSpec::scaled(50_000) };
    std::fs::write(&good, format!("# generated\n{}", spec.to_text())).unwrap();
    assert_eq!(WorkloadSpec::from_file(&good).unwrap(), spec);

    let cases = [
        ("rate = 10\n\nbogus = 1\n", 3),
        ("# c\nthreads = 1.5\n", 2),
        ("seed = 1\nzipf_s 0.9\n", 2),
        ("schedule = 1:0.5,oops\n", 1),
    ];
    for (text, line) in cases {
        match WorkloadSpec::parse(text) {
            Err(SpecError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    assert!(matches!(WorkloadSpec::parse("p_l = 1.5\n"), Err(SpecError::Invalid(_))));
    assert!(matches!(WorkloadSpec::parse("warmup_s = 30\ncooldown_s = 30\n"), Err(SpecError::Invalid(_))));
    assert!(matches!(WorkloadSpec::from_file(&dir.join("missing.spec")), Err(SpecError::Io(_))));
    std::fs::remove_dir_all(&dir).unwrap();
}
