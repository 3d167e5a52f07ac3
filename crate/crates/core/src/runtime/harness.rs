//! Deterministic in-process driver.
//!
//! Cores are simulated on a virtual nanosecond clock. An event heap ordered
//! by `(time, sequence)` decides which core runs its next batch; a batch
//! executes against the real queues and store and reports, through the
//! service model, when the core is free again. Idle cores sleep until an
//! arrival or another core's work may have given them something to do.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use super::{CoreState, CoreStatsSnapshot, Policy, Reply, Request, Server};
use crate::shardctl::{Controller, ShardPlan};

const EPOCH: usize = usize::MAX;

pub struct Harness {
    server: Arc<Server>,
    states: Vec<CoreState>,
    heap: BinaryHeap<Reverse<(u64, u64, usize)>>,
    seq: u64,
    scheduled: Vec<bool>,
    /// Last batch of the core did some work.
    busy: Vec<bool>,
    free_at: Vec<u64>,
    wake_rr: usize,
    /// Arrivals waiting for room in a full RX queue.
    backlog: Vec<VecDeque<Request>>,
    controller: Option<Controller>,
    epoch_ns: u64,
    now: u64,
    plans: Vec<(u64, Arc<ShardPlan>)>,
    epoch_stats: Vec<(u64, Vec<CoreStatsSnapshot>)>,
    out: Vec<Reply>,
}

impl Harness {
    /// Counters are sampled every `control.epoch_ns`; size-aware servers also
    /// get a controller publishing a plan at each of those epochs.
    pub fn new(server: Arc<Server>) -> Self {
        let n = server.cores();
        let cfg = server.config().clone();
        let controller = (cfg.policy == Policy::SizeAware).then(|| Controller::new(cfg.control.clone()));
        Harness {
            states: (0..n).map(|c| server.core_state(c)).collect(),
            heap: BinaryHeap::new(),
            seq: 0,
            scheduled: vec![false; n],
            busy: vec![false; n],
            free_at: vec![0; n],
            wake_rr: 0,
            backlog: (0..n).map(|_| VecDeque::new()).collect(),
            controller,
            epoch_ns: cfg.control.epoch_ns,
            now: 0,
            plans: Vec::new(),
            epoch_stats: Vec::new(),
            out: Vec::new(),
            server,
        }
    }

    pub fn server(&self) -> &Arc<Server> {
        &self.server
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Plans published so far, with their publication time.
    pub fn plans(&self) -> &[(u64, Arc<ShardPlan>)] {
        &self.plans
    }

    /// Per-core counters sampled at every control epoch.
    pub fn epoch_stats(&self) -> &[(u64, Vec<CoreStatsSnapshot>)] {
        &self.epoch_stats
    }

    pub fn controller(&self) -> Option<&Controller> {
        self.controller.as_ref()
    }

    fn schedule(&mut self, at: u64, who: usize) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, who)));
    }

    /// Wakes every idle core. Simultaneous wakeups run in a rotating order so
    /// that no core is always first to drain shared queues.
    fn wake_idle(&mut self, at: u64) {
        let n = self.states.len();
        self.wake_rr = (self.wake_rr + 1) % n;
        for i in 0..n {
            let c = (self.wake_rr + i) % n;
            if !self.scheduled[c] {
                self.scheduled[c] = true;
                let t = at.max(self.free_at[c]);
                self.schedule(t, c);
            }
        }
    }

    fn refill(&mut self) {
        for q in 0..self.backlog.len() {
            while let Some(req) = self.backlog[q].pop_front() {
                if let Err(req) = self.server.push_rx(q, req) {
                    self.backlog[q].push_front(req);
                    break;
                }
            }
        }
    }

    fn has_work(&self) -> bool {
        self.busy.iter().any(|&b| b)
            || self.states.iter().any(|s| s.has_pending())
            || self.backlog.iter().any(|b| !b.is_empty())
            || !self.server.is_drained()
    }

    /// Feeds `arrivals` (ordered by `sent_ns`) into their RX queues and runs
    /// the cores until every request has been answered.
    pub fn run<I, F>(&mut self, arrivals: I, mut on_reply: F)
    where
        I: IntoIterator<Item = Request>,
        F: FnMut(&Reply),
    {
        let mut arrivals = arrivals.into_iter().peekable();
        if !self.heap.iter().any(|Reverse((_, _, w))| *w == EPOCH) {
            let first = arrivals.peek().map_or(self.now, |r| r.sent_ns.max(self.now));
            self.schedule(first + self.epoch_ns, EPOCH);
        }
        loop {
            let next_event = self.heap.peek().map(|Reverse((t, _, _))| *t);
            let arrival_first = match (arrivals.peek(), next_event) {
                (Some(a), Some(t)) => a.sent_ns <= t,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if arrival_first {
                let req = arrivals.next().unwrap();
                self.now = self.now.max(req.sent_ns);
                let q = req.rx_queue;
                if self.backlog[q].is_empty() {
                    if let Err(req) = self.server.push_rx(q, req) {
                        self.backlog[q].push_back(req);
                    }
                } else {
                    self.backlog[q].push_back(req);
                }
                self.wake_idle(self.now);
                continue;
            }
            let Some(Reverse((t, _, who))) = self.heap.pop() else { break };
            self.now = self.now.max(t);
            if who == EPOCH {
                self.run_epoch(t);
                if arrivals.peek().is_some() || self.has_work() {
                    self.schedule(t + self.epoch_ns, EPOCH);
                }
                continue;
            }
            self.scheduled[who] = false;
            let outcome = self.server.run_batch(&mut self.states[who], t, &mut self.out);
            self.refill();
            for r in self.out.drain(..) {
                on_reply(&r);
            }
            self.busy[who] = outcome.worked;
            if outcome.worked {
                self.free_at[who] = outcome.end_ns;
                self.scheduled[who] = true;
                self.schedule(outcome.end_ns, who);
                self.wake_idle(t);
            }
        }
    }

    fn run_epoch(&mut self, t: u64) {
        self.epoch_stats.push((t, self.server.stats()));
        if let Some(ctl) = self.controller.as_mut() {
            let plan = ctl.control_epoch(self.server.histograms());
            self.server.publish_plan(plan.clone());
            self.plans.push((t, plan));
            self.wake_idle(t);
        }
    }
}
