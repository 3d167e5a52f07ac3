//! Open-loop workload generation and latency measurement.
//!
//! A workload is a fixed keyspace of 8-byte keys, each with a size drawn
//! once from its class (tiny, small or large), and a request stream: with
//! probability `p_L` percent a uniformly chosen large key, otherwise a
//! zipf-ranked tiny or small key. Arrivals are Poisson per client thread.
//! Latencies go into an HDR histogram that ignores requests sent during the
//! warmup and cooldown windows.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hasher;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use hdrhistogram::Histogram;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use siphasher::sip::SipHasher13;
use thiserror::Error;

use crate::kvstore::KeyHash;
use crate::protocol::{self, Opcode, MAX_DATAGRAM};
use crate::runtime::harness::Harness;
use crate::runtime::udp::{self, Assembler};
use crate::runtime::{CoreStatsSnapshot, Policy, Reply, Request, Server, ServerConfig, ServiceModel};

pub const KEY_LEN: usize = 8;
/// Share of large keys in the full-size dataset (10K of 16M).
pub const LARGE_KEY_RATIO: f64 = 10_000.0 / 16_000_000.0;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub total_keys: usize,
    pub large_keys: usize,
    /// Of the non-large keys.
    pub tiny_fraction: f64,
    pub small_fraction: f64,
    pub tiny_range: (usize, usize),
    pub small_range: (usize, usize),
    /// Upper end is `s_L`.
    pub large_range: (usize, usize),
    /// Percent of requests that target large keys.
    pub p_l: f64,
    pub get_ratio: f64,
    pub zipf_s: f64,
    /// Requests per second over all client threads.
    pub rate: f64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub cooldown_s: f64,
    pub threads: usize,
    pub seed: u64,
    /// `(time_s, p_l)` steps; `p_l` holds until the first step.
    pub schedule: Vec<(f64, f64)>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            total_keys: 16_000_000,
            large_keys: 10_000,
            tiny_fraction: 0.40,
            small_fraction: 0.60,
            tiny_range: (1, 13),
            small_range: (14, 1400),
            large_range: (1500, 512_000),
            p_l: 0.125,
            get_ratio: 0.95,
            zipf_s: 0.99,
            rate: 1_000_000.0,
            duration_s: 60.0,
            warmup_s: 10.0,
            cooldown_s: 10.0,
            threads: 4,
            seed: 1,
            schedule: Vec::new(),
        }
    }
}

impl WorkloadSpec {
    /// The default workload shrunk to `total_keys`, keeping the large-key share.
    pub fn scaled(total_keys: usize) -> Self {
        let large = ((total_keys as f64 * LARGE_KEY_RATIO).round() as usize).max(1);
        WorkloadSpec { total_keys, large_keys: large, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        if self.total_keys == 0 || self.large_keys > self.total_keys {
            return bad(format!("large_keys {} must not exceed total_keys {}", self.large_keys, self.total_keys));
        }
        if (self.tiny_fraction + self.small_fraction - 1.0).abs() > 1e-9
            || self.tiny_fraction < 0.0
            || self.small_fraction < 0.0
        {
            return bad("tiny_fraction and small_fraction must be non-negative and sum to 1".into());
        }
        for (name, (lo, hi)) in [("tiny", self.tiny_range), ("small", self.small_range), ("large", self.large_range)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} size range {lo}..{hi} is empty or starts at 0"));
            }
        }
        for &(t, p) in std::iter::once(&(0.0, self.p_l)).chain(&self.schedule) {
            if !(0.0..1.0).contains(&p) || t < 0.0 {
                return bad(format!("p_l {p} must be a percentage in [0, 1)"));
            }
            if p > 0.0 && self.large_keys == 0 {
                return bad("p_l > 0 needs at least one large key".into());
            }
        }
        if !(0.0..=1.0).contains(&self.get_ratio) {
            return bad(format!("get_ratio {} outside [0, 1]", self.get_ratio));
        }
        if self.zipf_s < 0.0 || self.threads == 0 || self.rate <= 0.0 || self.duration_s <= 0.0 {
            return bad("zipf_s must be >= 0 and rate, duration and threads positive".into());
        }
        if self.warmup_s + self.cooldown_s >= self.duration_s {
            return bad(format!(
                "warmup {} + cooldown {} leave no measurement window in {} s",
                self.warmup_s, self.cooldown_s, self.duration_s
            ));
        }
        Ok(())
    }

    /// Percentage of large requests in force at `t_s` seconds into the run.
    pub fn p_l_at(&self, t_s: f64) -> f64 {
        self.schedule
            .iter()
            .take_while(|(t, _)| *t <= t_s)
            .last()
            .map_or(self.p_l, |&(_, p)| p)
    }

    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut spec = WorkloadSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| SpecError::Parse { line, msg };
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {content:?}")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("{k}: {v:?} is not a number")));
            let int = |v: &str| {
                num(v).and_then(|x| {
                    if x >= 0.0 && x.fract() == 0.0 {
                        Ok(x as usize)
                    } else {
                        Err(err(format!("{k}: {v:?} is not a non-negative integer")))
                    }
                })
            };
            match k {
                "total_keys" => spec.total_keys = int(v)?,
                "large_keys" => spec.large_keys = int(v)?,
                "tiny_fraction" => spec.tiny_fraction = num(v)?,
                "small_fraction" => spec.small_fraction = num(v)?,
                "tiny_min" => spec.tiny_range.0 = int(v)?,
                "tiny_max" => spec.tiny_range.1 = int(v)?,
                "small_min" => spec.small_range.0 = int(v)?,
                "small_max" => spec.small_range.1 = int(v)?,
                "large_min" => spec.large_range.0 = int(v)?,
                "large_max" | "s_l" => spec.large_range.1 = int(v)?,
                "p_l" => spec.p_l = num(v)?,
                "get_ratio" => spec.get_ratio = num(v)?,
                "zipf_s" => spec.zipf_s = num(v)?,
                "rate" => spec.rate = num(v)?,
                "duration_s" => spec.duration_s = num(v)?,
                "warmup_s" => spec.warmup_s = num(v)?,
                "cooldown_s" => spec.cooldown_s = num(v)?,
                "threads" => spec.threads = int(v)?,
                "seed" => spec.seed = int(v)? as u64,
                "schedule" => {
                    spec.schedule = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|step| {
                            let (t, p) = step
                                .split_once(':')
                                .ok_or_else(|| err(format!("schedule step {step:?} is not time:p_l")))?;
                            Ok((num(t.trim())?, num(p.trim())?))
                        })
                        .collect::<Result<_, SpecError>>()?;
                    spec.schedule.sort_by(|a, b| a.0.total_cmp(&b.0));
                }
                _ => return Err(err(format!("unknown key {k:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, SpecError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let sched: Vec<String> = self.schedule.iter().map(|(t, p)| format!("{t}:{p}")).collect();
        format!(
            "total_keys = {}\nlarge_keys = {}\ntiny_fraction = {}\nsmall_fraction = {}\n\
             tiny_min = {}\ntiny_max = {}\nsmall_min = {}\nsmall_max = {}\nlarge_min = {}\nlarge_max = {}\n\
             p_l = {}\nget_ratio = {}\nzipf_s = {}\nrate = {}\nduration_s = {}\nwarmup_s = {}\ncooldown_s = {}\n\
             threads = {}\nseed = {}\nschedule = {}\n",
            self.total_keys,
            self.large_keys,
            self.tiny_fraction,
            self.small_fraction,
            self.tiny_range.0,
            self.tiny_range.1,
            self.small_range.0,
            self.small_range.1,
            self.large_range.0,
            self.large_range.1,
            self.p_l,
            self.get_ratio,
            self.zipf_s,
            self.rate,
            self.duration_s,
            self.warmup_s,
            self.cooldown_s,
            self.threads,
            self.seed,
            sched.join(",")
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Tiny,
    Small,
    Large,
}

/// Keys `0..large_keys` are large, the next `tiny` keys tiny, the rest small.
pub struct Keyspace {
    sizes: Vec<u32>,
    large_keys: usize,
    tiny_keys: usize,
    /// Zipf rank (0-based) to key index over the non-large keys.
    rank_to_key: Vec<u32>,
}

pub fn key_bytes(index: usize) -> [u8; KEY_LEN] {
    (index as u64).to_le_bytes()
}

/// Deterministic value contents for a key.
pub fn value_bytes(index: usize, size: usize) -> Vec<u8> {
    let seed = (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    (0..size).map(|i| (seed >> ((i % 8) * 8)) as u8 ^ i as u8).collect()
}

pub fn build_keyspace(spec: &WorkloadSpec, seed: u64) -> Keyspace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let non_large = spec.total_keys - spec.large_keys;
    let tiny_keys = (non_large as f64 * spec.tiny_fraction).round() as usize;
    let mut sizes = Vec::with_capacity(spec.total_keys);
    for i in 0..spec.total_keys {
        let (lo, hi) = if i < spec.large_keys {
            spec.large_range
        } else if i < spec.large_keys + tiny_keys {
            spec.tiny_range
        } else {
            spec.small_range
        };
        sizes.push(rng.random_range(lo..=hi) as u32);
    }
    let mut rank_to_key: Vec<u32> = (spec.large_keys..spec.total_keys).map(|k| k as u32).collect();
    rank_to_key.shuffle(&mut rng);
    Keyspace { sizes, large_keys: spec.large_keys, tiny_keys, rank_to_key }
}

impl Keyspace {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn size(&self, key: usize) -> usize {
        self.sizes[key] as usize
    }

    pub fn class(&self, key: usize) -> SizeClass {
        if key < self.large_keys {
            SizeClass::Large
        } else if key < self.large_keys + self.tiny_keys {
            SizeClass::Tiny
        } else {
            SizeClass::Small
        }
    }

    pub fn large_keys(&self) -> usize {
        self.large_keys
    }

    pub fn key_of_rank(&self, rank: usize) -> usize {
        self.rank_to_key[rank] as usize
    }

    /// Stable fingerprint of sizes and rank order.
    pub fn table_hash(&self) -> u64 {
        let mut h = SipHasher13::new_with_keys(1, 2);
        for s in &self.sizes {
            h.write_u32(*s);
        }
        for r in &self.rank_to_key {
            h.write_u32(*r);
        }
        h.finish()
    }

    /// Arena bytes needed to hold every key and value.
    pub fn footprint_bytes(&self) -> usize {
        self.sizes.iter().map(|&s| crate::kvstore::entry_bytes(KEY_LEN, s as usize)).sum()
    }

    /// Stores every key with its deterministic value.
    pub fn populate(&self, server: &Server) -> Result<(), crate::kvstore::StoreError> {
        for k in 0..self.len() {
            server.preload(&key_bytes(k), &value_bytes(k, self.size(k)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratedRequest {
    pub op: Opcode,
    pub key: usize,
    pub rx_queue: usize,
    /// Value size for PUTs (the key's fixed size).
    pub size: usize,
    pub large: bool,
}

/// Request stream over a keyspace.
pub struct RequestGen {
    spec: WorkloadSpec,
    keys: Arc<Keyspace>,
    zipf: Option<Zipf<f64>>,
    policy: Policy,
    cores: usize,
}

impl RequestGen {
    pub fn new(spec: &WorkloadSpec, keys: Arc<Keyspace>, policy: Policy, cores: usize) -> Self {
        let n = keys.rank_to_key.len();
        let zipf = (n > 0).then(|| Zipf::new(n as f64, spec.zipf_s).expect("valid zipf parameters"));
        RequestGen { spec: spec.clone(), keys, zipf, policy, cores }
    }

    pub fn keyspace(&self) -> &Arc<Keyspace> {
        &self.keys
    }

    /// Zipf rank in `0..n` of the non-large keys.
    pub fn sample_rank<R: Rng>(&self, rng: &mut R) -> usize {
        let z = self.zipf.as_ref().expect("no tiny/small keys");
        (z.sample(rng) as usize).saturating_sub(1)
    }

    pub fn next_request<R: Rng>(&self, rng: &mut R, now_s: f64) -> GeneratedRequest {
        let p_l = self.spec.p_l_at(now_s);
        let large = self.zipf.is_none() || (p_l > 0.0 && rng.random_bool(p_l / 100.0));
        let key = if large {
            rng.random_range(0..self.keys.large_keys)
        } else {
            self.keys.key_of_rank(self.sample_rank(rng))
        };
        let op = if rng.random_bool(self.spec.get_ratio) { Opcode::Get } else { Opcode::Put };
        let hash = KeyHash::of(&key_bytes(key));
        let rx_queue = self.policy.rx_queue(op, hash, self.cores, rng.next_u64());
        GeneratedRequest { op, key, rx_queue, size: self.keys.size(key), large }
    }

    /// Expected service time of one request, estimated from `samples` draws.
    pub fn mean_service_ns(&self, model: &ServiceModel, mtu: usize, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: u64 = (0..samples)
            .map(|_| {
                let r = self.next_request(&mut rng, 0.0);
                model.serve_ns(protocol::packet_cost(r.op, r.size, mtu))
            })
            .sum();
        total as f64 / samples.max(1) as f64
    }

    fn to_request(&self, g: &GeneratedRequest, id: u64, client: u32, sent_ns: u64) -> Request {
        let key = key_bytes(g.key).to_vec();
        let mut r = match g.op {
            Opcode::Get => Request::get(id, key, sent_ns, g.rx_queue),
            _ => Request::put(id, key, value_bytes(g.key, g.size), sent_ns, g.rx_queue),
        };
        r.client = client;
        r
    }
}

/// Client thread `t` of a run: its own RNG and Poisson clock.
struct Client {
    rng: ChaCha8Rng,
    exp: Exp<f64>,
    next_ns: f64,
    sent: u64,
}

fn thread_seed(seed: u64, thread: usize) -> u64 {
    seed ^ (thread as u64 + 1).wrapping_mul(0xA24B_AED4_963E_E407)
}

/// Poisson arrival stream merged over all client threads.
pub struct Arrivals<'a> {
    gen: &'a RequestGen,
    clients: Vec<Client>,
    end_ns: f64,
    start_ns: u64,
}

impl<'a> Arrivals<'a> {
    pub fn new(gen: &'a RequestGen, rate: f64, duration_s: f64, threads: usize, seed: u64, start_ns: u64) -> Self {
        let per = rate / threads as f64 / 1e9;
        let clients = (0..threads)
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(thread_seed(seed, t));
                let exp = Exp::new(per).expect("positive rate");
                let first = exp.sample(&mut rng);
                Client { rng, exp, next_ns: first, sent: 0 }
            })
            .collect();
        Arrivals { gen, clients, end_ns: duration_s * 1e9, start_ns }
    }
}

impl Iterator for Arrivals<'_> {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        let (t, c) = self
            .clients
            .iter_mut()
            .enumerate()
            .min_by(|a, b| a.1.next_ns.total_cmp(&b.1.next_ns))?;
        if c.next_ns >= self.end_ns {
            return None;
        }
        let at = c.next_ns;
        let g = self.gen.next_request(&mut c.rng, at / 1e9);
        let id = ((t as u64) << 48) | c.sent;
        c.sent += 1;
        c.next_ns += c.exp.sample(&mut c.rng);
        Some(self.gen.to_request(&g, id, t as u32, self.start_ns + at as u64))
    }
}

/// End-to-end latencies of requests sent inside the measurement window.
#[derive(Clone)]
pub struct LatencyRecorder {
    hist: Histogram<u64>,
    window: (u64, u64),
    outside: u64,
}

impl fmt::Debug for LatencyRecorder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LatencyRecorder")
            .field("count", &self.count())
            .field("p99", &self.percentile(99.0))
            .finish()
    }
}

impl LatencyRecorder {
    /// Records requests whose send time falls in `[from_ns, to_ns)`.
    pub fn new(from_ns: u64, to_ns: u64) -> Self {
        LatencyRecorder {
            hist: Histogram::new_with_bounds(1, 3_600_000_000_000, 3).expect("valid histogram bounds"),
            window: (from_ns, to_ns),
            outside: 0,
        }
    }

    pub fn unbounded() -> Self {
        Self::new(0, u64::MAX)
    }

    pub fn window(&self) -> (u64, u64) {
        self.window
    }

    pub fn record(&mut self, sent_ns: u64, latency_ns: u64) {
        if sent_ns >= self.window.0 && sent_ns < self.window.1 {
            self.hist.saturating_record(latency_ns.max(1));
        } else {
            self.outside += 1;
        }
    }

    pub fn merge(&mut self, other: &LatencyRecorder) {
        self.hist.add(&other.hist).expect("same histogram bounds");
        self.outside += other.outside;
    }

    pub fn count(&self) -> u64 {
        self.hist.len()
    }

    /// Samples trimmed by the window.
    pub fn trimmed(&self) -> u64 {
        self.outside
    }

    pub fn percentile(&self, p: f64) -> u64 {
        self.hist.value_at_quantile(p / 100.0)
    }

    pub fn mean(&self) -> f64 {
        self.hist.mean()
    }

    pub fn max(&self) -> u64 {
        self.hist.max()
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub offered_rate: f64,
    pub sent: u64,
    pub completed: u64,
    pub lost: u64,
    /// Requests sent in the window per second of window.
    pub window_arrival_rate: f64,
    /// Replies completed in the window per second of window.
    pub window_completion_rate: f64,
    pub latency: LatencyRecorder,
    pub latency_large: LatencyRecorder,
    pub latency_small: LatencyRecorder,
    /// Per-core counter increase over the measurement window.
    pub core_stats: Vec<CoreStatsSnapshot>,
}

impl RunResult {
    /// No loss and completions keep up with arrivals in the window.
    pub fn is_valid(&self) -> bool {
        self.lost == 0 && self.window_completion_rate >= 0.98 * self.window_arrival_rate
    }

    pub fn p99(&self) -> u64 {
        self.latency.percentile(99.0)
    }
}

pub const RUN_CSV_HEADER: &str = "policy,rate,sent,completed,lost,p50_ns,p99_ns,p999_ns,mean_ns,valid";

impl RunResult {
    pub fn csv_row(&self, policy: &str) -> String {
        format!(
            "{},{:.0},{},{},{},{},{},{},{:.1},{}",
            policy,
            self.offered_rate,
            self.sent,
            self.completed,
            self.lost,
            self.latency.percentile(50.0),
            self.latency.percentile(99.0),
            self.latency.percentile(99.9),
            self.latency.mean(),
            self.is_valid() as u8
        )
    }
}

fn window_ns(spec: &WorkloadSpec, start_ns: u64) -> (u64, u64) {
    (
        start_ns + (spec.warmup_s * 1e9) as u64,
        start_ns + ((spec.duration_s - spec.cooldown_s) * 1e9) as u64,
    )
}

/// Everything needed to replay one in-process run.
#[derive(Clone)]
pub struct InprocSetup {
    pub spec: WorkloadSpec,
    pub server: ServerConfig,
    pub keys: Arc<Keyspace>,
}

impl InprocSetup {
    pub fn new(spec: WorkloadSpec, server: ServerConfig) -> Self {
        let keys = Arc::new(build_keyspace(&spec, spec.seed));
        InprocSetup { spec, server, keys }
    }

    pub fn generator(&self) -> RequestGen {
        RequestGen::new(&self.spec, self.keys.clone(), self.server.policy, self.server.cores)
    }

    /// Fresh, populated server.
    pub fn build_server(&self) -> Arc<Server> {
        let server = Server::new(self.server.clone()).expect("valid server config");
        self.keys.populate(&server).expect("keyspace fits the store");
        Arc::new(server)
    }
}

/// Open-loop run against a fresh server on the virtual clock.
pub fn run_inproc(setup: &InprocSetup, rate: f64) -> (RunResult, Harness) {
    let server = setup.build_server();
    let mut harness = Harness::new(server.clone());
    let result = run_inproc_on(setup, &mut harness, rate, 0);
    (result, harness)
}

/// Open-loop run on an existing harness, starting at virtual time `start_ns`.
pub fn run_inproc_on(setup: &InprocSetup, harness: &mut Harness, rate: f64, start_ns: u64) -> RunResult {
    let spec = &setup.spec;
    let gen = setup.generator();
    let (w0, w1) = window_ns(spec, start_ns);
    let mut all = LatencyRecorder::new(w0, w1);
    let mut large = LatencyRecorder::new(w0, w1);
    let mut small = LatencyRecorder::new(w0, w1);
    let threshold_large = spec.large_range.0;
    let mut sent = 0u64;
    let mut in_window = 0u64;
    let mut completed = 0u64;
    let mut done_in_window = 0u64;
    let arrivals = Arrivals::new(&gen, rate, spec.duration_s, spec.threads, spec.seed, start_ns).inspect(|r| {
        sent += 1;
        if r.sent_ns >= w0 && r.sent_ns < w1 {
            in_window += 1;
        }
    });
    let server = harness.server().clone();
    let mut before: Option<Vec<CoreStatsSnapshot>> = None;
    let mut after: Option<Vec<CoreStatsSnapshot>> = None;
    let mut on_reply = |r: &Reply| {
        completed += 1;
        if r.done_ns >= w0 && r.done_ns < w1 {
            done_in_window += 1;
        }
        if before.is_none() && r.done_ns >= w0 {
            before = Some(server.stats());
        }
        if after.is_none() && r.done_ns >= w1 {
            after = Some(server.stats());
        }
        let lat = r.done_ns - r.sent_ns;
        all.record(r.sent_ns, lat);
        if r.size >= threshold_large {
            large.record(r.sent_ns, lat);
        } else {
            small.record(r.sent_ns, lat);
        }
    };
    harness.run(arrivals, &mut on_reply);
    let before = before.unwrap_or_else(|| vec![CoreStatsSnapshot::default(); server.cores()]);
    let after = after.unwrap_or_else(|| server.stats());
    let secs = (w1 - w0) as f64 / 1e9;
    RunResult {
        offered_rate: rate,
        sent,
        completed,
        lost: sent - completed,
        window_arrival_rate: in_window as f64 / secs,
        window_completion_rate: done_in_window as f64 / secs,
        latency: all,
        latency_large: large,
        latency_small: small,
        core_stats: after.iter().zip(&before).map(|(a, b)| a.since(b)).collect(),
    }
}

/// Open-loop run over UDP against a server whose RX queue `i` listens on
/// `addrs[i]`. Each client thread owns one socket and at most `inflight_cap`
/// outstanding requests; sends skipped at the cap count as lost.
pub fn run_udp(
    spec: &WorkloadSpec,
    keys: Arc<Keyspace>,
    policy: Policy,
    addrs: &[SocketAddr],
    inflight_cap: usize,
    drain: Duration,
) -> std::io::Result<RunResult> {
    let cores = addrs.len();
    let start = udp::clock_ns();
    let (w0, w1) = window_ns(spec, start);
    let handles: Vec<_> = (0..spec.threads)
        .map(|t| {
            let spec = spec.clone();
            let keys = keys.clone();
            let addrs = addrs.to_vec();
            std::thread::spawn(move || -> std::io::Result<(LatencyRecorder, u64, u64, u64, u64)> {
                let gen = RequestGen::new(&spec, keys, policy, cores);
                let sock = udp::bind_socket(SocketAddr::from(([0, 0, 0, 0], 0)))?;
                sock.set_nonblocking(true)?;
                let mut rng = ChaCha8Rng::seed_from_u64(thread_seed(spec.seed, t));
                let exp = Exp::new(spec.rate / spec.threads as f64 / 1e9).expect("positive rate");
                let mut rec = LatencyRecorder::new(w0, w1);
                let mut asm = Assembler::new();
                let mut outstanding: HashMap<u64, u64> = HashMap::new();
                let (mut sent, mut skipped, mut in_window, mut done_in_window) = (0u64, 0u64, 0u64, 0u64);
                let end = start + (spec.duration_s * 1e9) as u64;
                let mut next = start + exp.sample(&mut rng) as u64;
                let mut buf = vec![0u8; 65536];
                let mut receive = |outstanding: &mut HashMap<u64, u64>, rec: &mut LatencyRecorder, dw: &mut u64| {
                    while let Ok((len, from)) = sock.recv_from(&mut buf) {
                        let Ok(frame) = protocol::decode(&buf[..len]) else { continue };
                        if let Some(m) = asm.push(from, frame) {
                            if let Some(sent_ns) = outstanding.remove(&m.header.request_id) {
                                let now = udp::clock_ns();
                                if now >= w0 && now < w1 {
                                    *dw += 1;
                                }
                                rec.record(sent_ns, now - sent_ns);
                            }
                        }
                    }
                };
                while next < end {
                    let now = udp::clock_ns();
                    if now < next {
                        receive(&mut outstanding, &mut rec, &mut done_in_window);
                        if next - now > 200_000 {
                            std::thread::sleep(Duration::from_nanos((next - now) / 2));
                        }
                        continue;
                    }
                    let g = gen.next_request(&mut rng, (next - start) as f64 / 1e9);
                    let id = ((t as u64) << 48) | (sent + skipped);
                    if next >= w0 && next < w1 {
                        in_window += 1;
                    }
                    if outstanding.len() >= inflight_cap {
                        skipped += 1;
                    } else {
                        let ts = udp::clock_ns();
                        let req = gen.to_request(&g, id, t as u32, ts);
                        for d in udp::encode_request(&req, MAX_DATAGRAM).expect("request fits") {
                            let _ = sock.send_to(&d, addrs[g.rx_queue]);
                        }
                        outstanding.insert(id, ts);
                        sent += 1;
                    }
                    next += exp.sample(&mut rng) as u64;
                }
                let deadline = udp::clock_ns() + drain.as_nanos() as u64;
                while !outstanding.is_empty() && udp::clock_ns() < deadline {
                    receive(&mut outstanding, &mut rec, &mut done_in_window);
                    std::thread::sleep(Duration::from_micros(200));
                }
                let lost = outstanding.len() as u64 + skipped;
                Ok((rec, sent + skipped, lost, in_window, done_in_window))
            })
        })
        .collect();
    let mut latency = LatencyRecorder::new(w0, w1);
    let (mut sent, mut lost, mut in_window, mut done) = (0, 0, 0, 0);
    for h in handles {
        let (rec, s, l, iw, dw) = h.join().expect("client thread panicked")?;
        latency.merge(&rec);
        sent += s;
        lost += l;
        in_window += iw;
        done += dw;
    }
    let secs = (w1 - w0) as f64 / 1e9;
    Ok(RunResult {
        offered_rate: spec.rate,
        sent,
        completed: sent - lost,
        lost,
        window_arrival_rate: in_window as f64 / secs,
        window_completion_rate: done as f64 / secs,
        latency_large: LatencyRecorder::new(w0, w1),
        latency_small: LatencyRecorder::new(w0, w1),
        latency,
        core_stats: Vec::new(),
    })
}

/// One evaluated load point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub rate: f64,
    pub p99_ns: u64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SloResult {
    pub slo_ns: f64,
    /// Highest sustainable rate meeting the SLO, 0 when none does.
    pub max_rate: f64,
}

/// Binary search, per SLO, for the highest arrival rate in `[lo, hi]` whose
/// run is valid and has `p99 <= slo`. SLOs are searched loosest first and
/// each search is capped by the previous answer, so a stricter SLO never
/// reports a higher rate. Every evaluated point is returned for plotting.
pub fn sweep_slo<F>(mut run: F, slos_ns: &[f64], lo: f64, hi: f64, iters: usize) -> (Vec<SloResult>, Vec<CurvePoint>)
where
    F: FnMut(f64) -> RunResult,
{
    let mut cache: Vec<CurvePoint> = Vec::new();
    let mut eval = |rate: f64, cache: &mut Vec<CurvePoint>| -> CurvePoint {
        if let Some(p) = cache.iter().find(|p| p.rate == rate) {
            return *p;
        }
        let r = run(rate);
        let p = CurvePoint { rate, p99_ns: r.p99(), valid: r.is_valid() };
        cache.push(p);
        p
    };
    let mut order: Vec<usize> = (0..slos_ns.len()).collect();
    order.sort_by(|&a, &b| slos_ns[b].total_cmp(&slos_ns[a]));
    let mut results = vec![SloResult { slo_ns: 0.0, max_rate: 0.0 }; slos_ns.len()];
    let mut cap = hi;
    for i in order {
        let slo = slos_ns[i];
        let ok = |p: CurvePoint| p.valid && p.p99_ns as f64 <= slo;
        let best = if ok(eval(cap, &mut cache)) {
            cap
        } else if !ok(eval(lo, &mut cache)) {
            0.0
        } else {
            let (mut good, mut bad) = (lo, cap);
            for _ in 0..iters {
                let mid = (good + bad) / 2.0;
                if ok(eval(mid, &mut cache)) {
                    good = mid;
                } else {
                    bad = mid;
                }
            }
            good
        };
        results[i] = SloResult { slo_ns: slo, max_rate: best };
        if best > 0.0 {
            cap = best;
        }
    }
    cache.sort_by(|a, b| a.rate.total_cmp(&b.rate));
    (results, cache)
}

pub const CURVE_CSV_HEADER: &str = "policy,rate,p99_ns,valid";

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorkloadSpec {
        WorkloadSpec {
            total_keys: 2000,
            large_keys: 10,
            duration_s: 0.01,
            warmup_s: 0.001,
            cooldown_s: 0.001,
            rate: 1e6,
            ..Default::default()
        }
    }

    #[test]
    fn default_class_counts() {
        let spec = WorkloadSpec { total_keys: 160_000, large_keys: 100, ..Default::default() };
        let ks = build_keyspace(&spec, 3);
        let count = |c| (0..ks.len()).filter(|&k| ks.class(k) == c).count();
        assert_eq!(count(SizeClass::Large), 100);
        assert_eq!(count(SizeClass::Tiny), (0.4 * 159_900.0f64).round() as usize);
        assert_eq!(count(SizeClass::Small), 159_900 - 63_960);
        for k in 0..ks.len() {
            let s = ks.size(k);
            match ks.class(k) {
                SizeClass::Tiny => assert!((1..=13).contains(&s)),
                SizeClass::Small => assert!((14..=1400).contains(&s)),
                SizeClass::Large => assert!((1500..=512_000).contains(&s)),
            }
        }
    }

    #[test]
    fn no_large_keys_means_nothing_above_1400() {
        let spec = WorkloadSpec { total_keys: 5000, large_keys: 0, p_l: 0.0, ..Default::default() };
        let ks = build_keyspace(&spec, 1);
        assert!((0..ks.len()).all(|k| ks.size(k) <= 1400));
    }

    #[test]
    fn keyspace_is_seed_deterministic() {
        let spec = small_spec();
        assert_eq!(build_keyspace(&spec, 9).table_hash(), build_keyspace(&spec, 9).table_hash());
        assert_ne!(build_keyspace(&spec, 9).table_hash(), build_keyspace(&spec, 10).table_hash());
    }

    #[test]
    fn zero_p_l_never_picks_large() {
        let spec = WorkloadSpec { p_l: 0.0, ..small_spec() };
        let gen = RequestGen::new(&spec, Arc::new(build_keyspace(&spec, 1)), Policy::SizeAware, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..50_000).all(|_| !gen.next_request(&mut rng, 0.0).large));
    }

    #[test]
    fn put_queue_follows_keyhash() {
        let spec = WorkloadSpec { get_ratio: 0.0, ..small_spec() };
        let gen = RequestGen::new(&spec, Arc::new(build_keyspace(&spec, 1)), Policy::SizeAware, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let r = gen.next_request(&mut rng, 0.0);
            let h = KeyHash::of(&key_bytes(r.key));
            assert_eq!(r.rx_queue, crate::kvstore::master_core(h.partition(8), 8));
        }
    }

    #[test]
    fn schedule_steps() {
        let spec = WorkloadSpec { schedule: vec![(5.0, 0.75), (10.0, 0.125)], ..Default::default() };
        assert_eq!(spec.p_l_at(0.0), 0.125);
        assert_eq!(spec.p_l_at(5.0), 0.75);
        assert_eq!(spec.p_l_at(9.9), 0.75);
        assert_eq!(spec.p_l_at(12.0), 0.125);
    }

    #[test]
    fn spec_text_round_trip_and_errors() {
        let mut spec = small_spec();
        spec.schedule = vec![(1.0, 0.5)];
        assert_eq!(WorkloadSpec::parse(&spec.to_text()).unwrap(), spec);
        match WorkloadSpec::parse("p_l = 0.1\nbogus = 3\n") {
            Err(SpecError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(WorkloadSpec::parse("p_l = 5"), Err(SpecError::Invalid(_))));
        assert!(matches!(WorkloadSpec::parse("threads = 1.5"), Err(SpecError::Parse { line: 1, .. })));
    }

    #[test]
    fn recorder_trims_window() {
        let mut r = LatencyRecorder::new(100, 200);
        r.record(50, 1_000_000);
        r.record(150, 10);
        r.record(200, 1_000_000);
        assert_eq!(r.count(), 1);
        assert_eq!(r.trimmed(), 2);
        assert_eq!(r.max(), 10);
    }

    #[test]
    fn request_ids_unique() {
        let spec = WorkloadSpec { threads: 3, ..small_spec() };
        let gen = RequestGen::new(&spec, Arc::new(build_keyspace(&spec, 1)), Policy::Hkh, 4);
        let ids: std::collections::HashSet<u64> = Arrivals::new(&gen, 1e6, 0.01, 3, 1, 0).map(|r| r.id).collect();
        let n = Arrivals::new(&gen, 1e6, 0.01, 3, 1, 0).count();
        assert_eq!(ids.len(), n);
    }

    #[test]
    fn inproc_smoke_answers_everything() {
        let setup = InprocSetup::new(small_spec(), ServerConfig::new(4, Policy::SizeAware));
        let (r, _) = run_inproc(&setup, 1e6);
        assert!(r.sent > 5000);
        assert_eq!(r.lost, 0);
        assert!(r.p99() > 0 && r.latency.count() > 0);
    }

    #[test]
    fn slo_sweep_infinite_and_monotone() {
        // synthetic system: p99 grows with rate, saturates at 100
        let run = |rate: f64| RunResult {
            offered_rate: rate,
            sent: 1,
            completed: 1,
            lost: 0,
            window_arrival_rate: rate,
            window_completion_rate: rate.min(100.0),
            latency: {
                let mut l = LatencyRecorder::unbounded();
                l.record(0, (1000.0 / (101.0 - rate.min(100.0))) as u64);
                l
            },
            latency_large: LatencyRecorder::unbounded(),
            latency_small: LatencyRecorder::unbounded(),
            core_stats: Vec::new(),
        };
        let (res, curve) = sweep_slo(run, &[f64::INFINITY, 50.0, 20.0], 1.0, 200.0, 20);
        // 2% completion slack lets the search go slightly past saturation
        assert!((100.0..=100.0 / 0.98).contains(&res[0].max_rate), "{res:?}");
        assert!(res[1].max_rate <= res[0].max_rate);
        assert!(res[2].max_rate <= res[1].max_rate);
        assert!(!curve.is_empty());
    }
}
