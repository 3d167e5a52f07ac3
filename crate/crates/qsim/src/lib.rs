//! Queueing simulator for bimodal service times on `n` cores.
//!
//! Small requests take one time unit and large ones `K` units. Arrivals are
//! Poisson at the rate that gives utilization `rho` over all cores. Four
//! disciplines are modelled with zero dispatch cost:
//!
//! * `NxMG1`: every arrival joins one of `n` FIFO queues uniformly at random.
//! * `Mgn`: one shared FIFO queue served by whichever core frees up first.
//! * `NxMG1Ws`: per-core queues, and a core with an empty queue steals the
//!   head of a random non-empty queue.
//! * `SizeAware`: large requests go to `n_l` dedicated cores, small ones to
//!   the rest, with `n_l` set by the cost-proportional core split.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt;
use std::str::FromStr;

use hdrhistogram::Histogram;
use minos_core::shardctl::small_core_count;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

/// Response times are recorded in thousandths of a time unit.
const SCALE: f64 = 1000.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("utilization {0} is not in (0, 1)")]
    UnstableConfig(f64),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Discipline {
    NxMG1,
    Mgn,
    NxMG1Ws,
    SizeAware,
}

impl Discipline {
    pub const ALL: [Discipline; 4] = [Discipline::NxMG1, Discipline::Mgn, Discipline::NxMG1Ws, Discipline::SizeAware];
}

impl fmt::Display for Discipline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Discipline::NxMG1 => "NXMGD1",
            Discipline::Mgn => "MGN",
            Discipline::NxMG1Ws => "NXMGD1_WS",
            Discipline::SizeAware => "SIZE_AWARE",
        })
    }
}

impl FromStr for Discipline {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s.to_ascii_lowercase().replace(['-', '/'], "_").as_str() {
            "nxmgd1" | "nxmg1" | "nxm_g_1" => Ok(Discipline::NxMG1),
            "mgn" | "m_g_n" => Ok(Discipline::Mgn),
            "nxmgd1_ws" | "nxmg1_ws" | "ws" | "stealing" => Ok(Discipline::NxMG1Ws),
            "size_aware" | "sizeaware" | "minos" => Ok(Discipline::SizeAware),
            _ => Err(SimError::Invalid(format!("unknown discipline {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ServiceDist {
    /// 1 unit, or `k` units with probability `frac_large`.
    Bimodal,
    /// Exponential with the given mean, for the M/M/1 check.
    Exponential { mean: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_cores: usize,
    pub discipline: Discipline,
    pub frac_large: f64,
    pub k: f64,
    pub rho: f64,
    pub horizon: u64,
    pub seed: u64,
    pub service: ServiceDist,
    /// Leading share of requests left out of the statistics.
    pub warmup: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_cores: 8,
            discipline: Discipline::NxMG1,
            frac_large: 0.00125,
            k: 100.0,
            rho: 0.5,
            horizon: 10_000_000,
            seed: 1,
            service: ServiceDist::Bimodal,
            warmup: 0.1,
        }
    }
}

impl SimConfig {
    pub fn mean_service(&self) -> f64 {
        match self.service {
            ServiceDist::Bimodal => 1.0 - self.frac_large + self.frac_large * self.k,
            ServiceDist::Exponential { mean } => mean,
        }
    }

    /// Total arrival rate giving utilization `rho`.
    pub fn arrival_rate(&self) -> f64 {
        self.rho * self.n_cores as f64 / self.mean_service()
    }

    /// Large cores for `SizeAware`: the cost split, but never fewer than one.
    pub fn large_cores(&self) -> usize {
        let large_work = self.frac_large * self.k;
        let small_share = (1.0 - self.frac_large) / (1.0 - self.frac_large + large_work);
        let alloc = small_core_count(small_share, self.n_cores);
        alloc.n_l.max(1)
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(SimError::UnstableConfig(self.rho));
        }
        if self.n_cores == 0 || (self.discipline == Discipline::SizeAware && self.n_cores < 2) {
            return Err(SimError::Invalid("need at least one core, two for size-aware".into()));
        }
        if !(0.0..=1.0).contains(&self.frac_large) || self.k <= 0.0 || !(0.0..1.0).contains(&self.warmup) {
            return Err(SimError::Invalid("frac_large, k or warmup out of range".into()));
        }
        if let ServiceDist::Exponential { mean } = self.service {
            if mean <= 0.0 {
                return Err(SimError::Invalid("exponential mean must be positive".into()));
            }
        }
        if self.horizon == 0 {
            return Err(SimError::Invalid("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// One request as seen by the stealing event loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimRequest {
    pub large: bool,
    pub arrival: f64,
    pub service: f64,
    pub core: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Audit {
    pub arrivals: u64,
    pub departures: u64,
    pub steals: u64,
    /// Steals by a core whose own queue was not empty.
    pub steal_violations: u64,
}

#[derive(Debug, Clone)]
pub struct SimResult {
    pub config: SimConfig,
    pub p50: f64,
    pub p99: f64,
    pub mean: f64,
    pub small_p99: f64,
    pub small_mean: f64,
    pub large_p99: f64,
    pub utilization: Vec<f64>,
    /// Measured arrival rate over the measurement window.
    pub lambda: f64,
    /// Mean number in system seen by arrivals, which by PASTA is the time average.
    pub mean_in_system: f64,
    pub measured: u64,
    pub audit: Audit,
}

/// Accumulates measured responses and in-system counts.
struct Stats {
    all: Histogram<u64>,
    small: Histogram<u64>,
    large: Histogram<u64>,
    sum: f64,
    small_sum: f64,
    small_n: u64,
    in_system_sum: f64,
    /// Departure times of requests still in the system, as seen by arrivals.
    in_system: BinaryHeap<Reverse<OrdF64>>,
    first_arrival: f64,
    last_arrival: f64,
    warmup: u64,
    seen: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn histogram() -> Histogram<u64> {
    Histogram::new_with_bounds(1, 1u64 << 50, 3).expect("valid histogram bounds")
}

impl Stats {
    fn new(warmup: u64) -> Self {
        Stats {
            all: histogram(),
            small: histogram(),
            large: histogram(),
            sum: 0.0,
            small_sum: 0.0,
            small_n: 0,
            in_system_sum: 0.0,
            in_system: BinaryHeap::new(),
            first_arrival: 0.0,
            last_arrival: 0.0,
            warmup,
            seen: 0,
        }
    }

    /// Arrivals must be reported in arrival order.
    fn record(&mut self, arrival: f64, departure: f64, large: bool) {
        while self.in_system.peek().is_some_and(|Reverse(d)| d.0 <= arrival) {
            self.in_system.pop();
        }
        let index = self.seen;
        self.seen += 1;
        if index >= self.warmup {
            if index == self.warmup {
                self.first_arrival = arrival;
            }
            self.last_arrival = arrival;
            self.in_system_sum += self.in_system.len() as f64;
            let r = departure - arrival;
            let v = ((r * SCALE).round() as u64).max(1);
            self.all.saturating_record(v);
            self.sum += r;
            if large {
                self.large.saturating_record(v);
            } else {
                self.small.saturating_record(v);
                self.small_sum += r;
                self.small_n += 1;
            }
        }
        self.in_system.push(Reverse(OrdF64(departure)));
    }

    fn finish(self, config: SimConfig, utilization: Vec<f64>, audit: Audit) -> SimResult {
        let measured = self.all.len();
        let q = |h: &Histogram<u64>, p: f64| if h.is_empty() { 0.0 } else { h.value_at_quantile(p) as f64 / SCALE };
        let span = self.last_arrival - self.first_arrival;
        SimResult {
            p50: q(&self.all, 0.50),
            p99: q(&self.all, 0.99),
            mean: self.sum / measured.max(1) as f64,
            small_p99: q(&self.small, 0.99),
            small_mean: self.small_sum / self.small_n.max(1) as f64,
            large_p99: q(&self.large, 0.99),
            utilization,
            lambda: if span > 0.0 { (measured - 1) as f64 / span } else { 0.0 },
            mean_in_system: self.in_system_sum / measured.max(1) as f64,
            measured,
            audit,
            config,
        }
    }
}

struct Source {
    rng: ChaCha8Rng,
    gap: Exp<f64>,
    exp_service: Option<Exp<f64>>,
    frac_large: f64,
    k: f64,
    now: f64,
}

impl Source {
    fn new(cfg: &SimConfig) -> Self {
        let exp_service = match cfg.service {
            ServiceDist::Exponential { mean } => Some(Exp::new(1.0 / mean).expect("positive mean")),
            ServiceDist::Bimodal => None,
        };
        Source {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            gap: Exp::new(cfg.arrival_rate()).expect("positive rate"),
            exp_service,
            frac_large: cfg.frac_large,
            k: cfg.k,
            now: 0.0,
        }
    }

    /// Next `(arrival, service, large)`.
    fn next(&mut self) -> (f64, f64, bool) {
        self.now += self.gap.sample(&mut self.rng);
        match &self.exp_service {
            Some(e) => (self.now, e.sample(&mut self.rng), false),
            None => {
                let large = self.frac_large > 0.0 && self.rng.random_bool(self.frac_large);
                (self.now, if large { self.k } else { 1.0 }, large)
            }
        }
    }
}

pub fn simulate(config: &SimConfig) -> Result<SimResult, SimError> {
    config.validate()?;
    let warmup = (config.horizon as f64 * config.warmup) as u64;
    let mut stats = Stats::new(warmup);
    let mut src = Source::new(config);
    let n = config.n_cores;
    let mut busy = vec![0.0f64; n];
    let mut audit = Audit::default();
    let end = match config.discipline {
        Discipline::NxMG1 | Discipline::SizeAware => {
            let n_l = if config.discipline == Discipline::SizeAware { config.large_cores() } else { 0 };
            let n_s = n - n_l;
            let mut free = vec![0.0f64; n];
            for _ in 0..config.horizon {
                let (t, s, large) = src.next();
                let c = if n_l == 0 {
                    src.rng.random_range(0..n)
                } else if large {
                    n_s + src.rng.random_range(0..n_l)
                } else {
                    src.rng.random_range(0..n_s)
                };
                free[c] = free[c].max(t) + s;
                busy[c] += s;
                stats.record(t, free[c], large);
            }
            audit.arrivals = config.horizon;
            audit.departures = config.horizon;
            free.into_iter().fold(0.0, f64::max)
        }
        Discipline::Mgn => {
            // FCFS with a shared queue: each request starts on the core that frees up first.
            let mut free: BinaryHeap<Reverse<(OrdF64, usize)>> = (0..n).map(|c| Reverse((OrdF64(0.0), c))).collect();
            let mut end = 0.0f64;
            for _ in 0..config.horizon {
                let (t, s, large) = src.next();
                let Reverse((f, c)) = free.pop().expect("n > 0");
                let done = f.0.max(t) + s;
                busy[c] += s;
                end = end.max(done);
                free.push(Reverse((OrdF64(done), c)));
                stats.record(t, done, large);
            }
            audit.arrivals = config.horizon;
            audit.departures = config.horizon;
            end
        }
        Discipline::NxMG1Ws => simulate_stealing(config, &mut src, &mut stats, &mut busy, &mut audit),
    };
    let utilization = busy.iter().map(|b| if end > 0.0 { b / end } else { 0.0 }).collect();
    Ok(stats.finish(config.clone(), utilization, audit))
}

fn simulate_stealing(cfg: &SimConfig, src: &mut Source, stats: &mut Stats, busy: &mut [f64], audit: &mut Audit) -> f64 {
    let n = cfg.n_cores;
    let mut queues: Vec<VecDeque<(usize, SimRequest)>> = vec![VecDeque::new(); n];
    let mut serving = vec![false; n];
    let mut departures: BinaryHeap<Reverse<(OrdF64, usize)>> = BinaryHeap::new();
    // Departures are known at service start but are recorded in arrival order.
    let mut pending: VecDeque<(f64, Option<f64>, bool)> = VecDeque::new();
    let mut pending_base = 0usize;
    let mut generated = 0u64;
    let mut next = (cfg.horizon > 0).then(|| src.next());
    let mut clock = 0.0f64;

    let mut begin = |c: usize, id: usize, req: SimRequest, now: f64, departures: &mut BinaryHeap<_>, pending: &mut VecDeque<_>, base: usize| {
        let d = now + req.service;
        busy[c] += req.service;
        departures.push(Reverse((OrdF64(d), c)));
        let slot: &mut (f64, Option<f64>, bool) = &mut pending[id - base];
        slot.1 = Some(d);
    };

    loop {
        let next_dep = departures.peek().map(|Reverse((t, _))| t.0);
        let arrival_first = match (next, next_dep) {
            (Some((t, _, _)), Some(d)) => t < d,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if arrival_first {
            let (t, s, large) = next.take().expect("checked above");
            clock = t;
            let id = generated as usize;
            generated += 1;
            audit.arrivals += 1;
            pending.push_back((t, None, large));
            next = (generated < cfg.horizon).then(|| src.next());
            let home = src.rng.random_range(0..n);
            let req = SimRequest { large, arrival: t, service: s, core: home };
            if !serving[home] {
                serving[home] = true;
                begin(home, id, req, t, &mut departures, &mut pending, pending_base);
            } else {
                // Idle cores have empty queues, so one of them steals the arrival at once.
                let idle: Vec<usize> = (0..n).filter(|&c| !serving[c]).collect();
                if idle.is_empty() {
                    queues[home].push_back((id, req));
                } else {
                    let thief = idle[src.rng.random_range(0..idle.len())];
                    if !queues[thief].is_empty() {
                        audit.steal_violations += 1;
                    }
                    audit.steals += 1;
                    serving[thief] = true;
                    begin(thief, id, SimRequest { core: thief, ..req }, t, &mut departures, &mut pending, pending_base);
                }
            }
        } else {
            let Some(Reverse((t, c))) = departures.pop() else { break };
            clock = t.0;
            audit.departures += 1;
            serving[c] = false;
            let pick = match queues[c].pop_front() {
                Some(item) => Some(item),
                None => {
                    let victims: Vec<usize> = (0..n).filter(|&v| !queues[v].is_empty()).collect();
                    if victims.is_empty() {
                        None
                    } else {
                        let v = victims[src.rng.random_range(0..victims.len())];
                        if !queues[c].is_empty() {
                            audit.steal_violations += 1;
                        }
                        audit.steals += 1;
                        queues[v].pop_front()
                    }
                }
            };
            if let Some((id, req)) = pick {
                serving[c] = true;
                begin(c, id, SimRequest { core: c, ..req }, t.0, &mut departures, &mut pending, pending_base);
            }
        }
        while let Some(&(a, Some(d), l)) = pending.front() {
            stats.record(a, d, l);
            pending.pop_front();
            pending_base += 1;
        }
    }
    clock
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub discipline: Discipline,
    pub k: f64,
    pub rho: f64,
    pub p99: f64,
    pub small_p99: f64,
    pub mean: f64,
}

pub const SWEEP_CSV_HEADER: &str = "discipline,k,rho,p99,small_p99,mean";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.3},{:.3},{:.4}", self.discipline, self.k, self.rho, self.p99, self.small_p99, self.mean)
    }
}

/// Runs `base` over every (discipline, K, rho) point, spreading points over
/// the available cores. Rows come back in grid order.
pub fn sweep(
    base: &SimConfig,
    disciplines: &[Discipline],
    rhos: &[f64],
    ks: &[f64],
) -> Result<Vec<SweepRow>, SimError> {
    let mut grid = Vec::new();
    for &d in disciplines {
        for &k in ks {
            for &rho in rhos {
                grid.push(SimConfig { discipline: d, k, rho, ..base.clone() });
            }
        }
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(grid.len().max(1));
    let chunk = grid.len().div_ceil(workers).max(1);
    let results: Vec<Result<Vec<SimResult>, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = grid
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(simulate).collect::<Result<Vec<_>, _>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut rows = Vec::with_capacity(grid.len());
    for part in results {
        for r in part? {
            rows.push(SweepRow {
                discipline: r.config.discipline,
                k: r.config.k,
                rho: r.config.rho,
                p99: r.p99,
                small_p99: r.small_p99,
                mean: r.mean,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::new();
    if rows.is_empty() {
        return out;
    }
    out.push_str(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(d: Discipline, k: f64, rho: f64) -> SimConfig {
        SimConfig { discipline: d, k, rho, horizon: 200_000, ..Default::default() }
    }

    #[test]
    fn rejects_unstable() {
        assert_eq!(simulate(&cfg(Discipline::Mgn, 1.0, 1.0)).unwrap_err(), SimError::UnstableConfig(1.0));
        assert!(simulate(&cfg(Discipline::Mgn, 1.0, 1.3)).is_err());
    }

    #[test]
    fn every_arrival_departs() {
        for d in Discipline::ALL {
            let r = simulate(&cfg(d, 100.0, 0.7)).unwrap();
            assert_eq!(r.audit.arrivals, 200_000, "{d}");
            assert_eq!(r.audit.departures, 200_000, "{d}");
            assert_eq!(r.measured, 180_000, "{d}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for d in Discipline::ALL {
            let a = simulate(&cfg(d, 10.0, 0.5)).unwrap();
            let b = simulate(&cfg(d, 10.0, 0.5)).unwrap();
            assert_eq!((a.p99, a.mean), (b.p99, b.mean));
        }
    }

    #[test]
    fn stealing_only_from_empty_queue() {
        let r = simulate(&cfg(Discipline::NxMG1Ws, 100.0, 0.8)).unwrap();
        assert!(r.audit.steals > 0);
        assert_eq!(r.audit.steal_violations, 0);
    }

    #[test]
    fn large_cores_follow_cost_split() {
        let c = |k| SimConfig { k, ..Default::default() }.large_cores();
        assert_eq!(c(1.0), 1);
        assert_eq!(c(10.0), 1);
        assert_eq!(c(100.0), 1);
        assert_eq!(c(1000.0), 4);
    }

    #[test]
    fn empty_grid() {
        let rows = sweep(&SimConfig::default(), &Discipline::ALL, &[], &[1.0]).unwrap();
        assert!(rows.is_empty());
        assert_eq!(sweep_csv(&rows), "");
    }

    #[test]
    fn discipline_names() {
        for d in Discipline::ALL {
            assert_eq!(d.to_string().parse::<Discipline>().unwrap(), d);
        }
    }
}
