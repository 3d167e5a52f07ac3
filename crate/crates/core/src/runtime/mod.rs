//! Server cores and dispatch policies.
//!
//! Every core runs the same batch function over shared state: `n` RX queues
//! fed by the transport, one software queue per core and the store. What a
//! batch does depends on the policy and, for size-aware sharding, on the
//! role the current [`ShardPlan`] gives the core. A batch returns the time
//! at which the core is free again, computed from a [`ServiceModel`]. The
//! virtual-time [`harness`] uses that to advance a deterministic clock;
//! the threaded backends run with a zero model on the wall clock.

pub mod harness;
pub mod udp;

use std::collections::VecDeque;
use std::fmt;
use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_queue::ArrayQueue;

use crate::kvstore::{KeyHash, Store, StoreConfig, StoreError, WriteMode};
use crate::protocol::{self, Opcode};
use crate::shardctl::{AtomicSizeHistogram, ControlConfig, CoreRole, PlanCell, ShardPlan};

pub const DEFAULT_BATCH: usize = 32;
pub const RX_CAPACITY: usize = 4096;
pub const SW_CAPACITY: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    SizeAware,
    /// Hardware dispatch by keyhash, every core serves its own RX queue.
    Hkh,
    /// `handoff` cores move requests into software queues, the rest serve.
    Sho { handoff: usize },
    /// Hardware dispatch plus stealing from other cores' queues.
    HkhWs,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::SizeAware => "size-aware",
            Policy::Hkh => "hkh",
            Policy::Sho { .. } => "sho",
            Policy::HkhWs => "hkh-ws",
        }
    }

    /// RX queue a client addresses. GETs of size-aware sharding and stealing
    /// go to a random queue; otherwise the partition master (or its handoff
    /// core) is chosen from the keyhash.
    pub fn rx_queue(&self, op: Opcode, hash: KeyHash, cores: usize, random: u64) -> usize {
        let master = crate::kvstore::master_core(hash.partition(cores), cores);
        match (self, op) {
            (Policy::SizeAware, Opcode::Get) => (random % cores as u64) as usize,
            (Policy::SizeAware, _) => master,
            (Policy::Hkh, _) | (Policy::HkhWs, _) => master,
            (Policy::Sho { handoff }, Opcode::Get) => (random % *handoff as u64) as usize,
            (Policy::Sho { handoff }, _) => master % handoff,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Sho { handoff } => write!(f, "sho{handoff}"),
            p => f.write_str(p.name()),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    /// Accepts `size-aware`, `hkh`, `hkh-ws`, `sho` (one handoff core) and `shoK`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "size-aware" | "minos" => Ok(Policy::SizeAware),
            "hkh" => Ok(Policy::Hkh),
            "hkh-ws" => Ok(Policy::HkhWs),
            "sho" => Ok(Policy::Sho { handoff: 1 }),
            _ => s
                .strip_prefix("sho")
                .and_then(|k| k.parse().ok())
                .filter(|&k: &usize| k >= 1)
                .map(|handoff| Policy::Sho { handoff })
                .ok_or_else(|| format!("unknown policy {s:?} (expected size-aware, hkh, sho, shoK or hkh-ws)")),
        }
    }
}

/// Service time charged per operation, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceModel {
    pub request_ns: u64,
    pub packet_ns: u64,
    /// Classifying a request and moving it into a software queue.
    pub dispatch_ns: u64,
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel { request_ns: 200, packet_ns: 400, dispatch_ns: 50 }
    }
}

impl ServiceModel {
    pub fn zero() -> Self {
        ServiceModel { request_ns: 0, packet_ns: 0, dispatch_ns: 0 }
    }

    pub fn serve_ns(&self, packets: u64) -> u64 {
        self.request_ns + self.packet_ns * packets
    }
}

/// A decoded client request.
#[derive(Debug, Clone)]
pub struct Request {
    pub id: u64,
    pub client: u32,
    pub op: Opcode,
    pub key: Vec<u8>,
    pub hash: KeyHash,
    /// PUT payload.
    pub value: Vec<u8>,
    /// Client send time.
    pub sent_ns: u64,
    pub rx_queue: usize,
    /// When the request became visible in a software queue.
    pub ready_ns: u64,
    /// Passed through a software queue.
    pub queued: bool,
    pub stolen: bool,
    pub reply_to: Option<SocketAddr>,
}

impl Request {
    pub fn get(id: u64, key: Vec<u8>, sent_ns: u64, rx_queue: usize) -> Self {
        let hash = KeyHash::of(&key);
        Request {
            id,
            client: 0,
            op: Opcode::Get,
            key,
            hash,
            value: Vec::new(),
            sent_ns,
            rx_queue,
            ready_ns: 0,
            queued: false,
            stolen: false,
            reply_to: None,
        }
    }

    pub fn put(id: u64, key: Vec<u8>, value: Vec<u8>, sent_ns: u64, rx_queue: usize) -> Self {
        Request { op: Opcode::Put, value, ..Request::get(id, key, sent_ns, rx_queue) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplyStatus {
    Ok,
    NotFound,
    Failed,
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub id: u64,
    pub client: u32,
    pub op: Opcode,
    pub status: ReplyStatus,
    pub key: Vec<u8>,
    /// GET payload, kept only when the server is configured to.
    pub value: Option<Vec<u8>>,
    pub size: usize,
    pub packets: u64,
    pub sent_ns: u64,
    pub done_ns: u64,
    pub core: usize,
    pub reply_to: Option<SocketAddr>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceRole {
    Small,
    Large,
    Standby,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceKind {
    Served,
    Dispatched { to: usize },
}

/// Audit record kept when tracing is enabled.
#[derive(Debug, Clone, Copy)]
pub struct TraceRecord {
    pub request: u64,
    pub core: usize,
    pub kind: TraceKind,
    pub role: TraceRole,
    pub op: Opcode,
    pub size: usize,
    pub packets: u64,
    pub threshold: u64,
    pub plan_version: u64,
    pub from_sw: bool,
    /// Served from a software queue by a core that no longer holds a large role.
    pub transition: bool,
    pub stolen: bool,
    pub start_ns: u64,
    pub end_ns: u64,
}

/// Counters for one core, updated only by that core.
pub struct CoreStats {
    pub served: AtomicU64,
    pub packets: AtomicU64,
    pub busy_ns: AtomicU64,
    pub dispatched: AtomicU64,
    pub steals_sw: AtomicU64,
    pub steals_rx: AtomicU64,
    pub transition_served: AtomicU64,
    pub failed: AtomicU64,
    /// Requests taken from each RX queue.
    pub rx_taken: Box<[AtomicU64]>,
}

impl CoreStats {
    fn new(cores: usize) -> Self {
        CoreStats {
            served: AtomicU64::new(0),
            packets: AtomicU64::new(0),
            busy_ns: AtomicU64::new(0),
            dispatched: AtomicU64::new(0),
            steals_sw: AtomicU64::new(0),
            steals_rx: AtomicU64::new(0),
            transition_served: AtomicU64::new(0),
            failed: AtomicU64::new(0),
            rx_taken: (0..cores).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    pub fn snapshot(&self) -> CoreStatsSnapshot {
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CoreStatsSnapshot {
            served: l(&self.served),
            packets: l(&self.packets),
            busy_ns: l(&self.busy_ns),
            dispatched: l(&self.dispatched),
            steals_sw: l(&self.steals_sw),
            steals_rx: l(&self.steals_rx),
            transition_served: l(&self.transition_served),
            failed: l(&self.failed),
            rx_taken: self.rx_taken.iter().map(l).collect(),
        }
    }
}

fn bump(a: &AtomicU64, n: u64) {
    a.fetch_add(n, Ordering::Relaxed);
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoreStatsSnapshot {
    pub served: u64,
    pub packets: u64,
    pub busy_ns: u64,
    pub dispatched: u64,
    pub steals_sw: u64,
    pub steals_rx: u64,
    pub transition_served: u64,
    pub failed: u64,
    pub rx_taken: Vec<u64>,
}

impl CoreStatsSnapshot {
    /// Counter increase since `earlier`.
    pub fn since(&self, earlier: &CoreStatsSnapshot) -> CoreStatsSnapshot {
        CoreStatsSnapshot {
            served: self.served - earlier.served,
            packets: self.packets - earlier.packets,
            busy_ns: self.busy_ns - earlier.busy_ns,
            dispatched: self.dispatched - earlier.dispatched,
            steals_sw: self.steals_sw - earlier.steals_sw,
            steals_rx: self.steals_rx - earlier.steals_rx,
            transition_served: self.transition_served - earlier.transition_served,
            failed: self.failed - earlier.failed,
            rx_taken: self
                .rx_taken
                .iter()
                .zip(earlier.rx_taken.iter().chain(std::iter::repeat(&0)))
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub cores: usize,
    pub policy: Policy,
    pub batch: usize,
    pub rx_capacity: usize,
    pub sw_capacity: usize,
    pub mtu_payload: usize,
    pub control: ControlConfig,
    pub store: StoreConfig,
    pub service: ServiceModel,
    pub trace: bool,
    /// Keep GET payloads in replies (needed by the UDP backend).
    pub keep_values: bool,
}

impl ServerConfig {
    pub fn new(cores: usize, policy: Policy) -> Self {
        ServerConfig {
            cores,
            policy,
            batch: DEFAULT_BATCH,
            rx_capacity: RX_CAPACITY,
            sw_capacity: SW_CAPACITY,
            mtu_payload: protocol::DEFAULT_MTU_PAYLOAD,
            control: ControlConfig::new(cores),
            store: StoreConfig::new(cores),
            service: ServiceModel::default(),
            trace: false,
            keep_values: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.cores < 2 {
            return Err("at least two cores are required".into());
        }
        if self.batch == 0 {
            return Err("batch size must be positive".into());
        }
        if let Policy::Sho { handoff } = self.policy {
            if handoff == 0 || handoff >= self.cores {
                return Err(format!(
                    "sho needs between 1 and {} handoff cores, got {handoff}",
                    self.cores - 1
                ));
            }
        }
        if self.store.cores != self.cores || self.control.cores != self.cores {
            return Err("store and control configs must use the server core count".into());
        }
        Ok(())
    }
}

/// Per-core private state, owned by whoever drives that core.
pub struct CoreState {
    pub id: usize,
    plan: Arc<ShardPlan>,
    rr: usize,
    /// Requests that found their target software queue full.
    pending: VecDeque<(Request, usize)>,
}

impl CoreState {
    /// Holds requests waiting for room in a software queue.
    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }
}

/// Result of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchOutcome {
    pub end_ns: u64,
    pub worked: bool,
}

pub struct Server {
    config: ServerConfig,
    store: Store,
    rx: Vec<ArrayQueue<Request>>,
    sw: Vec<ArrayQueue<Request>>,
    plan: PlanCell,
    hist: Vec<AtomicSizeHistogram>,
    stats: Vec<CoreStats>,
    traces: Vec<Mutex<Vec<TraceRecord>>>,
}

impl Server {
    pub fn new(config: ServerConfig) -> Result<Self, String> {
        config.validate()?;
        let n = config.cores;
        let threshold = config.control.static_threshold.unwrap_or(config.control.max_size);
        Ok(Server {
            store: Store::new(config.store.clone()),
            rx: (0..n).map(|_| ArrayQueue::new(config.rx_capacity)).collect(),
            sw: (0..n).map(|_| ArrayQueue::new(config.sw_capacity)).collect(),
            plan: PlanCell::new(ShardPlan::initial(n, threshold)),
            hist: (0..n).map(|_| AtomicSizeHistogram::default()).collect(),
            stats: (0..n).map(|_| CoreStats::new(n)).collect(),
            traces: (0..n).map(|_| Mutex::new(Vec::new())).collect(),
            config,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn cores(&self) -> usize {
        self.config.cores
    }

    pub fn plan(&self) -> Arc<ShardPlan> {
        self.plan.load()
    }

    pub fn publish_plan(&self, plan: Arc<ShardPlan>) {
        self.plan.publish(plan);
    }

    pub fn histograms(&self) -> &[AtomicSizeHistogram] {
        &self.hist
    }

    pub fn core_state(&self, id: usize) -> CoreState {
        CoreState { id, plan: self.plan(), rr: id, pending: VecDeque::new() }
    }

    /// Enqueues a request on an RX queue; gives it back when the queue is full.
    pub fn push_rx(&self, queue: usize, req: Request) -> Result<(), Request> {
        self.rx[queue].push(req)
    }

    pub fn rx_len(&self, queue: usize) -> usize {
        self.rx[queue].len()
    }

    pub fn sw_len(&self, queue: usize) -> usize {
        self.sw[queue].len()
    }

    pub fn stats(&self) -> Vec<CoreStatsSnapshot> {
        self.stats.iter().map(CoreStats::snapshot).collect()
    }

    /// Drains the audit trace of every core.
    pub fn take_trace(&self) -> Vec<TraceRecord> {
        let mut all = Vec::new();
        for t in &self.traces {
            all.append(&mut t.lock().unwrap());
        }
        all.sort_by_key(|r| (r.start_ns, r.request));
        all
    }

    /// Writes every item straight into the store, bypassing the cores.
    pub fn preload(&self, key: &[u8], value: &[u8]) -> Result<(), StoreError> {
        let hash = KeyHash::of(key);
        self.store.put(key, hash, value, WriteMode::Guarded { core: 0 })
    }

    /// True when no request is queued anywhere inside the server.
    pub fn is_drained(&self) -> bool {
        self.rx.iter().all(|q| q.is_empty()) && self.sw.iter().all(|q| q.is_empty())
    }

    /// Runs one batch of `st.id`'s loop starting at `now`; replies go to `out`.
    pub fn run_batch(&self, st: &mut CoreState, now: u64, out: &mut Vec<Reply>) -> BatchOutcome {
        let mut t = now;
        if !self.flush_pending(st) {
            // still blocked on a full software queue
            return BatchOutcome { end_ns: t, worked: false };
        }
        let worked = match self.config.policy {
            Policy::SizeAware => self.size_aware_batch(st, &mut t, out),
            Policy::Hkh => self.hkh_batch(st, &mut t, out),
            Policy::Sho { handoff } => self.sho_batch(st, handoff, &mut t, out),
            Policy::HkhWs => self.hkh_ws_batch(st, &mut t, out),
        };
        bump(&self.stats[st.id].busy_ns, t - now);
        BatchOutcome { end_ns: t, worked }
    }

    fn flush_pending(&self, st: &mut CoreState) -> bool {
        while let Some((req, target)) = st.pending.pop_front() {
            if let Err(req) = self.sw[target].push(req) {
                st.pending.push_front((req, target));
                return false;
            }
        }
        true
    }

    fn enqueue_sw(&self, st: &mut CoreState, target: usize, mut req: Request, t: u64) {
        req.ready_ns = t;
        req.queued = true;
        if st.pending.is_empty() {
            if let Err(r) = self.sw[target].push(req) {
                st.pending.push_back((r, target));
            }
        } else {
            st.pending.push_back((req, target));
        }
    }

    fn pop_rx(&self, core: usize, queue: usize, max: usize, into: &mut Vec<Request>) -> usize {
        let mut taken = 0;
        while taken < max {
            match self.rx[queue].pop() {
                Some(r) => {
                    into.push(r);
                    taken += 1;
                }
                None => break,
            }
        }
        if taken > 0 {
            bump(&self.stats[core].rx_taken[queue], taken as u64);
        }
        taken
    }

    fn trace(&self, rec: TraceRecord) {
        if self.config.trace {
            self.traces[rec.core].lock().unwrap().push(rec);
        }
    }

    fn write_mode(&self, core: usize, hash: KeyHash, plan: Option<&ShardPlan>) -> WriteMode {
        let master = self.store.master_of(self.store.partition_of(hash));
        let master_small = match (self.config.policy, plan) {
            (Policy::SizeAware, Some(p)) => !matches!(p.role(master), CoreRole::Large(_)),
            (Policy::Sho { .. }, _) => false,
            _ => true,
        };
        if master == core && master_small {
            WriteMode::Crew { core }
        } else {
            WriteMode::Guarded { core }
        }
    }

    /// Serves a request to completion; returns the finishing time.
    fn serve(
        &self,
        core: usize,
        req: Request,
        start: u64,
        role: TraceRole,
        plan: Option<&ShardPlan>,
        transition: bool,
        out: &mut Vec<Reply>,
    ) -> u64 {
        let from_sw = req.queued;
        let start = start.max(req.ready_ns);
        let mtu = self.config.mtu_payload;
        let (status, op, value, size, packets) = match req.op {
            Opcode::Get => match self.store.get(&req.key, req.hash) {
                Ok(v) => {
                    let size = v.len();
                    let packets = protocol::packet_cost(Opcode::Get, size, mtu);
                    let keep = self.config.keep_values.then_some(v);
                    (ReplyStatus::Ok, Opcode::GetReply, keep, size, packets)
                }
                Err(_) => (ReplyStatus::NotFound, Opcode::Error, None, 0, 1),
            },
            _ => {
                let size = req.value.len();
                let packets = protocol::packet_cost(Opcode::Put, size, mtu);
                let mode = self.write_mode(core, req.hash, plan);
                match self.store.put(&req.key, req.hash, &req.value, mode) {
                    Ok(()) => (ReplyStatus::Ok, Opcode::PutReply, None, size, packets),
                    Err(_) => {
                        bump(&self.stats[core].failed, 1);
                        (ReplyStatus::Failed, Opcode::Error, None, size, packets)
                    }
                }
            }
        };
        let end = start + self.config.service.serve_ns(packets);
        let s = &self.stats[core];
        bump(&s.served, 1);
        bump(&s.packets, packets);
        if transition {
            bump(&s.transition_served, 1);
        }
        self.trace(TraceRecord {
            request: req.id,
            core,
            kind: TraceKind::Served,
            role,
            op: req.op,
            size,
            packets,
            threshold: plan.map_or(0, |p| p.threshold),
            plan_version: plan.map_or(0, |p| p.version),
            from_sw,
            transition,
            stolen: req.stolen,
            start_ns: start,
            end_ns: end,
        });
        out.push(Reply {
            id: req.id,
            client: req.client,
            op,
            status,
            key: req.key,
            value,
            size,
            packets,
            sent_ns: req.sent_ns,
            done_ns: end,
            core,
            reply_to: req.reply_to,
        });
        end
    }

    fn size_aware_batch(&self, st: &mut CoreState, t: &mut u64, out: &mut Vec<Reply>) -> bool {
        let plan = self.plan();
        if plan.version != st.plan.version {
            st.plan = plan.clone();
        }
        let core = st.id;
        let b = self.config.batch;
        match plan.role(core) {
            CoreRole::Large(_) => {
                let mut worked = false;
                for _ in 0..b {
                    let Some(req) = self.sw[core].pop() else { break };
                    *t = self.serve(core, req, *t, TraceRole::Large, Some(&plan), false, out);
                    worked = true;
                }
                worked
            }
            role => {
                let standby = role == CoreRole::StandbyLarge;
                let mut worked = false;
                if standby {
                    if let Some(req) = self.sw[core].pop() {
                        *t = self.serve(core, req, *t, TraceRole::Standby, Some(&plan), false, out);
                        worked = true;
                    }
                } else {
                    // leftovers from a large role: drain before taking small traffic
                    while let Some(req) = self.sw[core].pop() {
                        *t = self.serve(core, req, *t, TraceRole::Small, Some(&plan), true, out);
                        worked = true;
                    }
                }
                let mut batch = Vec::with_capacity(2 * b);
                let readers = if plan.standby { plan.n } else { plan.n_s };
                let share = b.div_ceil(readers.max(1));
                // the standby RX queue has n readers, its owner included
                self.pop_rx(core, core, if standby { share } else { b }, &mut batch);
                let large: Vec<usize> = plan.large_cores().filter(|&l| l != core).collect();
                for i in 0..large.len() {
                    let l = large[(st.rr + i) % large.len()];
                    self.pop_rx(core, l, share, &mut batch);
                }
                st.rr = st.rr.wrapping_add(1);
                let role_tag = if standby { TraceRole::Standby } else { TraceRole::Small };
                for req in batch {
                    worked = true;
                    self.classify(st, &plan, role_tag, req, t, out);
                }
                worked
            }
        }
    }

    /// Small-core handling of one received request: serve it or hand it to
    /// the large core owning its size.
    fn classify(
        &self,
        st: &mut CoreState,
        plan: &Arc<ShardPlan>,
        role: TraceRole,
        req: Request,
        t: &mut u64,
        out: &mut Vec<Reply>,
    ) {
        let core = st.id;
        let size = match req.op {
            Opcode::Get => match self.store.lookup_size(&req.key, req.hash) {
                Ok(s) => s,
                Err(_) => {
                    *t = self.serve(core, req, *t, role, Some(plan), false, out);
                    return;
                }
            },
            _ => req.value.len(),
        };
        self.hist[core].record(size as u64);
        match plan.route(size as u64) {
            None => *t = self.serve(core, req, *t, role, Some(plan), false, out),
            Some(target) => {
                let start = *t;
                *t += self.config.service.dispatch_ns;
                bump(&self.stats[core].dispatched, 1);
                self.trace(TraceRecord {
                    request: req.id,
                    core,
                    kind: TraceKind::Dispatched { to: target },
                    role,
                    op: req.op,
                    size,
                    packets: 0,
                    threshold: plan.threshold,
                    plan_version: plan.version,
                    from_sw: false,
                    transition: false,
                    stolen: false,
                    start_ns: start,
                    end_ns: *t,
                });
                self.enqueue_sw(st, target, req, *t);
            }
        }
    }

    fn hkh_batch(&self, st: &mut CoreState, t: &mut u64, out: &mut Vec<Reply>) -> bool {
        let mut batch = Vec::with_capacity(self.config.batch);
        self.pop_rx(st.id, st.id, self.config.batch, &mut batch);
        let worked = !batch.is_empty();
        for req in batch {
            *t = self.serve(st.id, req, *t, TraceRole::Baseline, None, false, out);
        }
        worked
    }

    fn sho_batch(&self, st: &mut CoreState, handoff: usize, t: &mut u64, out: &mut Vec<Reply>) -> bool {
        let core = st.id;
        if core < handoff {
            let mut batch = Vec::with_capacity(self.config.batch);
            self.pop_rx(core, core, self.config.batch, &mut batch);
            let worked = !batch.is_empty();
            for req in batch {
                *t += self.config.service.dispatch_ns;
                bump(&self.stats[core].dispatched, 1);
                self.enqueue_sw(st, core, req, *t);
            }
            return worked;
        }
        // workers pull one request at a time, round robin over handoff queues
        for i in 0..handoff {
            let q = (st.rr + i) % handoff;
            if let Some(req) = self.sw[q].pop() {
                st.rr = q + 1;
                *t = self.serve(core, req, *t, TraceRole::Baseline, None, false, out);
                return true;
            }
        }
        false
    }

    fn hkh_ws_batch(&self, st: &mut CoreState, t: &mut u64, out: &mut Vec<Reply>) -> bool {
        let core = st.id;
        let n = self.config.cores;
        let b = self.config.batch;
        let mut staged = Vec::new();
        let room = self.config.sw_capacity.saturating_sub(self.sw[core].len()).min(b);
        self.pop_rx(core, core, room, &mut staged);
        let mut worked = !staged.is_empty();
        for req in staged {
            *t += self.config.service.dispatch_ns;
            self.enqueue_sw(st, core, req, *t);
        }
        if let Some(req) = self.sw[core].pop() {
            *t = self.serve(core, req, *t, TraceRole::Baseline, None, false, out);
            return true;
        }
        if worked {
            return true;
        }
        // idle: steal one request from another software queue
        for i in 1..n {
            let victim = (core + st.rr + i) % n;
            if victim == core {
                continue;
            }
            if let Some(mut req) = self.sw[victim].pop() {
                req.stolen = true;
                bump(&self.stats[core].steals_sw, 1);
                st.rr = st.rr.wrapping_add(1);
                *t = self.serve(core, req, *t, TraceRole::Baseline, None, false, out);
                return true;
            }
        }
        // then a batch from another RX queue, staged so it can be stolen again
        for i in 1..n {
            let victim = (core + st.rr + i) % n;
            if victim == core {
                continue;
            }
            let mut stolen = Vec::new();
            if self.pop_rx(core, victim, room, &mut stolen) > 0 {
                bump(&self.stats[core].steals_rx, 1);
                st.rr = st.rr.wrapping_add(1);
                for mut req in stolen {
                    req.stolen = true;
                    *t += self.config.service.dispatch_ns;
                    self.enqueue_sw(st, core, req, *t);
                }
                worked = true;
                break;
            }
        }
        worked
    }

    /// Per-core CSV rows for one stats window of `dt_ns`, under the current plan.
    pub fn epoch_rows(&self, time_ns: u64, dt_ns: u64, delta: &[CoreStatsSnapshot]) -> Vec<String> {
        epoch_csv_rows(self.config.policy, &self.plan(), time_ns, dt_ns, delta)
    }
}

pub const EPOCH_CSV_HEADER: &str = "time_ns,core,ops_per_s,packets_per_s,role,threshold,n_l";

/// Per-core CSV rows for one stats window of `dt_ns` under `plan`.
pub fn epoch_csv_rows(
    policy: Policy,
    plan: &ShardPlan,
    time_ns: u64,
    dt_ns: u64,
    delta: &[CoreStatsSnapshot],
) -> Vec<String> {
    let secs = dt_ns.max(1) as f64 / 1e9;
    delta
        .iter()
        .enumerate()
        .map(|(core, d)| {
            let role = match (policy, plan.role(core)) {
                (Policy::SizeAware, CoreRole::Small) => "small",
                (Policy::SizeAware, CoreRole::Large(_)) => "large",
                (Policy::SizeAware, CoreRole::StandbyLarge) => "standby",
                _ => "baseline",
            };
            format!(
                "{},{},{:.1},{:.1},{},{},{}",
                time_ns,
                core,
                d.served as f64 / secs,
                d.packets as f64 / secs,
                role,
                plan.threshold,
                plan.n_l
            )
        })
        .collect()
}
