//! Size-aware control loop.
//!
//! Cores count the item size of every request they classify in a log-scaled
//! histogram. Once per control epoch the coordinator drains those
//! histograms, folds the result into an exponential moving average, takes
//! the 99th percentile of the smoothed size distribution as the small/large
//! threshold, sizes the small and large core sets by packet cost and splits
//! the sizes above the threshold into contiguous ranges of equal cost, one
//! per large core. The resulting [`ShardPlan`] is published with a single
//! reference swap.

use std::fmt;
use std::io::{self, Write};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use arc_swap::ArcSwap;
use thiserror::Error;

use crate::protocol::{self, Opcode};

pub const OCTAVES: usize = 21;
pub const SUBDIVISIONS: usize = 4;
pub const NUM_CLASSES: usize = OCTAVES * SUBDIVISIONS;

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_PERCENTILE: f64 = 99.0;
pub const DEFAULT_EPOCH_NS: u64 = 1_000_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum ShardError {
    #[error("histogram has no mass")]
    EmptyHistogram,
}

/// Histogram bucket of a size: `floor(log2(size))` clamped to `[0, 20]`,
/// refined into four sub-ranges per octave.
pub fn size_class(size: u64) -> usize {
    let size = size.max(1);
    let octave = (63 - size.leading_zeros() as usize).min(OCTAVES - 1);
    let base = 1u64 << octave;
    let sub = (((size - base) as u128 * SUBDIVISIONS as u128) / base as u128) as usize;
    octave * SUBDIVISIONS + sub.min(SUBDIVISIONS - 1)
}

/// Inclusive `(lowest, highest)` size that maps to `class`. Classes too
/// narrow to hold any integer have `lowest > highest`.
pub fn class_bounds(class: usize) -> (u64, u64) {
    let octave = class / SUBDIVISIONS;
    let sub = (class % SUBDIVISIONS) as u64;
    let base = 1u64 << octave;
    let q = SUBDIVISIONS as u64;
    // ceil(base + sub*base/q) .. ceil(base + (sub+1)*base/q) - 1
    let lo = base + (sub * base).div_ceil(q);
    let hi = if class == NUM_CLASSES - 1 {
        u64::MAX
    } else {
        base + ((sub + 1) * base).div_ceil(q) - 1
    };
    (lo, hi)
}

/// Upper size bound of a class.
pub fn class_upper(class: usize) -> u64 {
    class_bounds(class).1
}

/// Size used to price a whole class.
fn class_representative(class: usize, max_size: u64) -> u64 {
    let (lo, hi) = class_bounds(class);
    let hi = hi.min(max_size.max(lo));
    lo + (hi.saturating_sub(lo)) / 2
}

#[derive(Clone, PartialEq, Eq)]
pub struct SizeHistogram {
    counts: Vec<u64>,
}

impl Default for SizeHistogram {
    fn default() -> Self {
        SizeHistogram { counts: vec![0; NUM_CLASSES] }
    }
}

impl fmt::Debug for SizeHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nz: Vec<_> = self
            .counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .collect();
        f.debug_struct("SizeHistogram").field("nonzero", &nz).finish()
    }
}

impl SizeHistogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, size: u64) {
        self.counts[size_class(size)] += 1;
    }

    pub fn record_n(&mut self, size: u64, n: u64) {
        self.counts[size_class(size)] += n;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &SizeHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn clear(&mut self) {
        self.counts.iter_mut().for_each(|c| *c = 0);
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Element-wise sum of the per-core histograms; the inputs are reset.
pub fn aggregate(per_core: &mut [SizeHistogram]) -> SizeHistogram {
    let mut h = SizeHistogram::new();
    for p in per_core.iter_mut() {
        h.merge(p);
        p.clear();
    }
    h
}

/// Per-core histogram written by its owning core and drained by the
/// coordinator. A record racing with a drain lands in either epoch.
pub struct AtomicSizeHistogram {
    counts: Box<[AtomicU64]>,
}

impl Default for AtomicSizeHistogram {
    fn default() -> Self {
        AtomicSizeHistogram {
            counts: (0..NUM_CLASSES).map(|_| AtomicU64::new(0)).collect(),
        }
    }
}

impl AtomicSizeHistogram {
    pub fn record(&self, size: u64) {
        self.counts[size_class(size)].fetch_add(1, Ordering::Relaxed);
    }

    /// Adds the current counts into `into` and resets them to zero.
    pub fn drain_into(&self, into: &mut SizeHistogram) {
        for (c, dst) in self.counts.iter().zip(into.counts.iter_mut()) {
            *dst += c.swap(0, Ordering::Relaxed);
        }
    }

    pub fn snapshot(&self) -> SizeHistogram {
        SizeHistogram {
            counts: self.counts.iter().map(|c| c.load(Ordering::Relaxed)).collect(),
        }
    }
}

/// Drains every per-core histogram into one.
pub fn aggregate_atomic(per_core: &[AtomicSizeHistogram]) -> SizeHistogram {
    let mut h = SizeHistogram::new();
    for p in per_core {
        p.drain_into(&mut h);
    }
    h
}

/// Smoothed histogram and its parameters.
#[derive(Debug, Clone)]
pub struct ThresholdState {
    pub h_curr: Vec<f64>,
    pub alpha: f64,
    pub percentile: f64,
}

impl ThresholdState {
    pub fn new(alpha: f64, percentile: f64) -> Self {
        assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0, 1]");
        assert!(percentile > 0.0 && percentile <= 100.0);
        ThresholdState {
            h_curr: vec![0.0; NUM_CLASSES],
            alpha,
            percentile,
        }
    }

    /// `h_curr[i] = (1 - alpha) * h_curr[i] + alpha * h[i]`
    pub fn smooth(&mut self, h: &SizeHistogram) {
        let a = self.alpha;
        for (cur, &new) in self.h_curr.iter_mut().zip(h.counts()) {
            *cur = (1.0 - a) * *cur + a * new as f64;
        }
    }
}

impl Default for ThresholdState {
    fn default() -> Self {
        Self::new(DEFAULT_ALPHA, DEFAULT_PERCENTILE)
    }
}

/// Upper bound of the smallest class at which the cumulative mass reaches
/// `percentile` percent of the total.
pub fn threshold_percentile(h: &[f64], percentile: f64) -> Result<u64, ShardError> {
    let total: f64 = h.iter().sum();
    if total <= 0.0 {
        return Err(ShardError::EmptyHistogram);
    }
    let target = total * percentile / 100.0;
    let mut cum = 0.0;
    let mut last_nonempty = 0;
    for (class, &m) in h.iter().enumerate() {
        if m > 0.0 {
            last_nonempty = class;
        }
        cum += m;
        if m > 0.0 && cum >= target * (1.0 - 1e-12) {
            return Ok(class_upper(class));
        }
    }
    Ok(class_upper(last_nonempty))
}

/// Cost of serving one request for an item of a given size.
pub trait CostFn {
    fn cost(&self, size: u64) -> f64;
}

impl<F: Fn(u64) -> f64> CostFn for F {
    fn cost(&self, size: u64) -> f64 {
        self(size)
    }
}

/// Packets in a GET reply or PUT request.
#[derive(Debug, Clone, Copy)]
pub struct PacketCost {
    pub mtu_payload: usize,
}

impl Default for PacketCost {
    fn default() -> Self {
        PacketCost { mtu_payload: protocol::DEFAULT_MTU_PAYLOAD }
    }
}

impl CostFn for PacketCost {
    fn cost(&self, size: u64) -> f64 {
        protocol::packet_cost(Opcode::Get, size as usize, self.mtu_payload) as f64
    }
}

fn class_costs(h: &[f64], cost: &dyn CostFn, max_size: u64) -> Vec<f64> {
    h.iter()
        .enumerate()
        .map(|(c, &m)| if m > 0.0 { m * cost.cost(class_representative(c, max_size)) } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoreAllocation {
    pub n_s: usize,
    pub n_l: usize,
    pub standby: bool,
}

/// `n_s = ceil(f * n)` small cores, where `f` is the fraction of cost spent on
/// sizes at or below the threshold. With no room left for a large core one
/// small core is marked standby.
pub fn small_core_count(small_cost_fraction: f64, n: usize) -> CoreAllocation {
    let f = small_cost_fraction.clamp(0.0, 1.0);
    let n_s = ((f * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n);
    let n_l = n - n_s;
    CoreAllocation { n_s, n_l, standby: n_l == 0 }
}

pub fn allocate_cores(
    h: &[f64],
    threshold: u64,
    n: usize,
    cost: &dyn CostFn,
    max_size: u64,
) -> CoreAllocation {
    let costs = class_costs(h, cost, max_size);
    let total: f64 = costs.iter().sum();
    let small: f64 = costs
        .iter()
        .enumerate()
        .filter(|(c, _)| class_upper(*c) <= threshold)
        .map(|(_, &v)| v)
        .sum();
    let f = if total > 0.0 { small / total } else { 1.0 };
    small_core_count(f, n)
}

/// Sizes in `(lo, hi]`; empty when `lo >= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeRange {
    pub lo: u64,
    pub hi: u64,
}

impl SizeRange {
    pub fn contains(&self, size: u64) -> bool {
        size > self.lo && size <= self.hi
    }

    pub fn is_empty(&self) -> bool {
        self.lo >= self.hi
    }
}

/// Splits `(threshold, u64::MAX]` into `n_l` contiguous ranges of equal
/// cost. The cumulative cost is swept from the smallest large class and a
/// cut is placed wherever it crosses a multiple of `total / n_l`. Inside a
/// class the cost is taken as spread evenly over the class's sizes, so cuts
/// can fall between class bounds; a class boundary is used exactly when the
/// target lands on it.
pub fn partition_large_ranges(
    h: &[f64],
    threshold: u64,
    n_l: usize,
    cost: &dyn CostFn,
    max_size: u64,
) -> Vec<SizeRange> {
    assert!(n_l >= 1);
    let costs = class_costs(h, cost, max_size);
    // (exclusive lower size, inclusive upper size, cost)
    let classes: Vec<(u64, u64, f64)> = costs
        .iter()
        .enumerate()
        .filter(|(c, &v)| v > 0.0 && class_bounds(*c).0 > threshold)
        .map(|(c, &v)| {
            let (lo, hi) = class_bounds(c);
            (lo - 1, hi.min(max_size.max(lo)), v)
        })
        .collect();
    let total: f64 = classes.iter().map(|c| c.2).sum();
    let mut bounds = vec![threshold];
    if classes.is_empty() {
        bounds.resize(n_l, u64::MAX);
    } else {
        let mut i = 0;
        let mut before = 0.0;
        for j in 1..n_l {
            let target = total * j as f64 / n_l as f64;
            while i + 1 < classes.len() && before + classes[i].2 < target * (1.0 - 1e-12) {
                before += classes[i].2;
                i += 1;
            }
            let (lo, hi, v) = classes[i];
            let frac = ((target - before) / v).clamp(0.0, 1.0);
            let cut = if frac >= 1.0 - 1e-9 {
                hi
            } else {
                lo + ((hi - lo) as f64 * frac).round() as u64
            };
            let prev = *bounds.last().unwrap();
            bounds.push(cut.max(prev));
        }
    }
    bounds.push(u64::MAX);
    bounds
        .windows(2)
        .map(|w| SizeRange { lo: w[0].min(w[1]), hi: w[1] })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoreRole {
    Small,
    /// Index into `ShardPlan::large_ranges`.
    Large(usize),
    StandbyLarge,
}

/// Output of one control epoch. Large cores are the last `n_l` cores; in
/// standby mode the last core is the standby large core.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardPlan {
    pub version: u64,
    pub threshold: u64,
    pub n: usize,
    pub n_s: usize,
    pub n_l: usize,
    pub large_ranges: Vec<SizeRange>,
    pub standby: bool,
}

impl ShardPlan {
    /// Plan in force before the first epoch: every size is small.
    pub fn initial(n: usize, threshold: u64) -> Self {
        ShardPlan {
            version: 0,
            threshold,
            n,
            n_s: n,
            n_l: 0,
            large_ranges: vec![SizeRange { lo: threshold, hi: u64::MAX }],
            standby: true,
        }
    }

    pub fn role(&self, core: usize) -> CoreRole {
        if self.standby {
            if core == self.n - 1 {
                CoreRole::StandbyLarge
            } else {
                CoreRole::Small
            }
        } else if core < self.n_s {
            CoreRole::Small
        } else {
            CoreRole::Large(core - self.n_s)
        }
    }

    /// Cores whose RX queues the small cores drain on their behalf.
    pub fn large_cores(&self) -> std::ops::Range<usize> {
        if self.standby {
            self.n - 1..self.n
        } else {
            self.n_s..self.n
        }
    }

    pub fn is_small(&self, size: u64) -> bool {
        size <= self.threshold
    }

    /// Core that serves a request of this size, or `None` for small sizes.
    pub fn route(&self, size: u64) -> Option<usize> {
        if self.is_small(size) {
            return None;
        }
        if self.standby {
            return Some(self.n - 1);
        }
        let idx = self
            .large_ranges
            .iter()
            .position(|r| r.contains(size))
            .unwrap_or(self.large_ranges.len() - 1);
        Some(self.n_s + idx)
    }

    pub const CSV_HEADER: &'static str = "time_ns,version,threshold,n_s,n_l,standby,ranges";

    pub fn csv_row(&self, time_ns: u64) -> String {
        let ranges: Vec<String> = self
            .large_ranges
            .iter()
            .map(|r| {
                if r.hi == u64::MAX {
                    format!("{}-max", r.lo)
                } else {
                    format!("{}-{}", r.lo, r.hi)
                }
            })
            .collect();
        format!(
            "{},{},{},{},{},{},{}",
            time_ns,
            self.version,
            self.threshold,
            self.n_s,
            self.n_l,
            self.standby as u8,
            ranges.join(";")
        )
    }
}

/// Current plan, swapped atomically by the coordinator.
pub struct PlanCell(ArcSwap<ShardPlan>);

impl PlanCell {
    pub fn new(plan: ShardPlan) -> Self {
        PlanCell(ArcSwap::from_pointee(plan))
    }

    pub fn load(&self) -> Arc<ShardPlan> {
        self.0.load_full()
    }

    pub fn publish(&self, plan: Arc<ShardPlan>) {
        self.0.store(plan);
    }
}

#[derive(Debug, Clone)]
pub struct ControlConfig {
    pub cores: usize,
    pub alpha: f64,
    pub percentile: f64,
    pub epoch_ns: u64,
    pub mtu_payload: usize,
    pub max_size: u64,
    pub static_threshold: Option<u64>,
}

impl ControlConfig {
    pub fn new(cores: usize) -> Self {
        ControlConfig {
            cores,
            alpha: DEFAULT_ALPHA,
            percentile: DEFAULT_PERCENTILE,
            epoch_ns: DEFAULT_EPOCH_NS,
            mtu_payload: protocol::DEFAULT_MTU_PAYLOAD,
            max_size: crate::kvstore::DEFAULT_MAX_VALUE_SIZE as u64,
            static_threshold: None,
        }
    }
}

/// Coordinator state across control epochs.
pub struct Controller {
    config: ControlConfig,
    state: ThresholdState,
    current: Arc<ShardPlan>,
}

impl Controller {
    pub fn new(config: ControlConfig) -> Self {
        assert!(config.cores >= 2, "size-aware sharding needs at least two cores");
        let initial = ShardPlan::initial(config.cores, config.static_threshold.unwrap_or(config.max_size));
        Controller {
            state: ThresholdState::new(config.alpha, config.percentile),
            current: Arc::new(initial),
            config,
        }
    }

    pub fn config(&self) -> &ControlConfig {
        &self.config
    }

    pub fn current(&self) -> Arc<ShardPlan> {
        self.current.clone()
    }

    pub fn smoothed(&self) -> &[f64] {
        &self.state.h_curr
    }

    /// Drains the per-core histograms and computes the next plan.
    pub fn control_epoch(&mut self, per_core: &[AtomicSizeHistogram]) -> Arc<ShardPlan> {
        let h = aggregate_atomic(per_core);
        self.epoch_with(&h)
    }

    /// Same as [`Controller::control_epoch`] on an already aggregated histogram.
    pub fn epoch_with(&mut self, h: &SizeHistogram) -> Arc<ShardPlan> {
        self.state.smooth(h);
        let version = self.current.version + 1;
        let cost = PacketCost { mtu_payload: self.config.mtu_payload };
        let hc = &self.state.h_curr;
        let threshold = match self.config.static_threshold {
            Some(t) if hc.iter().sum::<f64>() > 0.0 => Ok(t),
            Some(_) => Err(ShardError::EmptyHistogram),
            None => threshold_percentile(hc, self.state.percentile),
        };
        let plan = match threshold {
            Err(ShardError::EmptyHistogram) => ShardPlan { version, ..(*self.current).clone() },
            Ok(threshold) => {
                let n = self.config.cores;
                let alloc = allocate_cores(hc, threshold, n, &cost, self.config.max_size);
                let ranges = if alloc.standby {
                    vec![SizeRange { lo: threshold, hi: u64::MAX }]
                } else {
                    partition_large_ranges(hc, threshold, alloc.n_l, &cost, self.config.max_size)
                };
                ShardPlan {
                    version,
                    threshold,
                    n,
                    n_s: alloc.n_s,
                    n_l: alloc.n_l,
                    large_ranges: ranges,
                    standby: alloc.standby,
                }
            }
        };
        self.current = Arc::new(plan);
        self.current.clone()
    }
}

/// Writes the smoothed histogram of one epoch as CSV rows.
pub fn write_histogram_csv<W: Write>(out: &mut W, time_ns: u64, h: &[f64]) -> io::Result<()> {
    for (c, &m) in h.iter().enumerate() {
        if m > 0.0 {
            let (lo, hi) = class_bounds(c);
            writeln!(out, "{time_ns},{c},{lo},{hi},{m:.3}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pc() -> PacketCost {
        PacketCost::default()
    }

    #[test]
    fn size_class_basics() {
        assert_eq!(size_class(1), 0);
        assert_eq!(size_class(2), 4);
        assert_eq!(size_class(3), 6);
        assert_eq!(size_class(1024), 40);
        assert_eq!(size_class(1 << 20), 80);
        assert_eq!(size_class(u64::MAX), NUM_CLASSES - 1);
    }

    #[test]
    fn class_bounds_tile_the_sizes() {
        for s in 1..5000u64 {
            let (lo, hi) = class_bounds(size_class(s));
            assert!(lo <= s && s <= hi, "size {s} class {}", size_class(s));
        }
        for s in [1u64 << 19, (1 << 20) - 1, 1 << 20, 1_000_000] {
            let (lo, hi) = class_bounds(size_class(s));
            assert!(lo <= s && s <= hi);
        }
    }

    #[test]
    fn record_increments_one_bucket() {
        let mut h = SizeHistogram::new();
        h.record(1);
        assert_eq!(h.counts()[0], 1);
        h.record(700);
        h.record(700);
        assert_eq!(h.counts()[size_class(700)], 2);
        assert_eq!(h.total(), 3);
    }

    #[test]
    fn aggregate_resets_inputs() {
        assert_eq!(aggregate(&mut []), SizeHistogram::new());
        let mut a = SizeHistogram::new();
        a.record(10);
        let snapshot = a.clone();
        let mut v = vec![a];
        assert_eq!(aggregate(&mut v), snapshot);
        assert_eq!(v[0].total(), 0);

        let atomic = AtomicSizeHistogram::default();
        atomic.record(5);
        atomic.record(5000);
        let h = aggregate_atomic(std::slice::from_ref(&atomic));
        assert_eq!(h.total(), 2);
        assert_eq!(atomic.snapshot().total(), 0);
    }

    #[test]
    fn smoothing_arithmetic() {
        let mut st = ThresholdState::new(0.9, 99.0);
        let mut h = SizeHistogram::new();
        h.record_n(100, 10);
        st.smooth(&h);
        assert!((st.h_curr[size_class(100)] - 9.0).abs() < 1e-12);

        let mut full = ThresholdState::new(1.0, 99.0);
        full.h_curr[3] = 77.0;
        full.smooth(&h);
        assert_eq!(full.h_curr, h.as_f64());
    }

    #[test]
    fn threshold_single_bucket_and_empty() {
        let mut h = vec![0.0; NUM_CLASSES];
        assert_eq!(threshold_percentile(&h, 99.0), Err(ShardError::EmptyHistogram));
        h[size_class(300)] = 5.0;
        assert_eq!(threshold_percentile(&h, 99.0), Ok(class_upper(size_class(300))));
    }

    #[test]
    fn allocation_ceiling_arithmetic() {
        assert_eq!(small_core_count(0.6, 8), CoreAllocation { n_s: 5, n_l: 3, standby: false });
        assert_eq!(small_core_count(1.0, 8), CoreAllocation { n_s: 8, n_l: 0, standby: true });
        assert_eq!(small_core_count(0.0, 8).n_s, 1);
        assert_eq!(small_core_count(0.5, 8), CoreAllocation { n_s: 4, n_l: 4, standby: false });
    }

    #[test]
    fn allocation_from_histogram() {
        // 60% of packet cost below the threshold: 600 one-packet requests,
        // 10 requests of 40 packets each
        let mut h = vec![0.0; NUM_CLASSES];
        h[size_class(100)] = 600.0;
        let big = size_class(40 * 1472 - 600);
        let rep = class_representative(big, 1 << 20);
        let pk = rep.div_ceil(1472) as f64;
        h[big] = 400.0 / pk;
        let a = allocate_cores(&h, class_upper(size_class(100)), 8, &pc(), 1 << 20);
        assert_eq!(a, CoreAllocation { n_s: 5, n_l: 3, standby: false });
        let none = allocate_cores(&h, u64::MAX, 8, &pc(), 1 << 20);
        assert!(none.standby);
    }

    #[test]
    fn single_large_core_takes_everything() {
        let mut h = vec![0.0; NUM_CLASSES];
        h[size_class(5000)] = 3.0;
        h[size_class(100_000)] = 1.0;
        let r = partition_large_ranges(&h, 1400, 1, &pc(), 1 << 20);
        assert_eq!(r, vec![SizeRange { lo: 1400, hi: u64::MAX }]);
    }

    #[test]
    fn uniform_cost_splits_evenly() {
        let mut h = vec![0.0; NUM_CLASSES];
        let classes = [60usize, 61, 62, 63];
        for &c in &classes {
            let rep = class_representative(c, 1 << 20);
            h[c] = 1000.0 / rep.div_ceil(1472) as f64;
        }
        let r = partition_large_ranges(&h, class_upper(59), 2, &pc(), 1 << 20);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].hi, class_upper(61));
        assert_eq!(r[1].lo, class_upper(61));
        assert_eq!(r[1].hi, u64::MAX);
    }

    #[test]
    fn cuts_fall_inside_a_class() {
        let mut h = vec![0.0; NUM_CLASSES];
        h[size_class(10_000)] = 1.0;
        let (lo, hi) = class_bounds(size_class(10_000));
        let r = partition_large_ranges(&h, 1400, 3, &pc(), 1 << 20);
        assert_eq!(r.len(), 3);
        // the single class is cut into thirds of its width
        assert_eq!(r[0].lo, 1400);
        assert_eq!(r[0].hi, lo - 1 + ((hi - lo + 1) as f64 / 3.0).round() as u64);
        assert!(r.iter().all(|x| !x.is_empty()));
        assert_eq!(r[2].hi, u64::MAX);
        let none = partition_large_ranges(&vec![0.0; NUM_CLASSES], 1400, 2, &pc(), 1 << 20);
        assert_eq!(none, vec![SizeRange { lo: 1400, hi: u64::MAX }, SizeRange { lo: u64::MAX, hi: u64::MAX }]);
    }

    #[test]
    fn plan_roles_and_routing() {
        let plan = ShardPlan {
            version: 3,
            threshold: 1000,
            n: 8,
            n_s: 6,
            n_l: 2,
            large_ranges: vec![SizeRange { lo: 1000, hi: 50_000 }, SizeRange { lo: 50_000, hi: u64::MAX }],
            standby: false,
        };
        assert_eq!(plan.role(0), CoreRole::Small);
        assert_eq!(plan.role(6), CoreRole::Large(0));
        assert_eq!(plan.role(7), CoreRole::Large(1));
        assert_eq!(plan.route(1000), None);
        assert_eq!(plan.route(1001), Some(6));
        assert_eq!(plan.route(50_000), Some(6));
        assert_eq!(plan.route(50_001), Some(7));
        assert_eq!(plan.large_cores(), 6..8);

        let init = ShardPlan::initial(4, 1 << 20);
        assert_eq!(init.role(3), CoreRole::StandbyLarge);
        assert_eq!(init.route(1 << 20), None);
        assert_eq!(init.route((1 << 20) + 1), Some(3));
    }

    #[test]
    fn epochs_increment_version_and_keep_plan_on_empty() {
        let mut c = Controller::new(ControlConfig::new(8));
        let per_core: Vec<AtomicSizeHistogram> = (0..8).map(|_| AtomicSizeHistogram::default()).collect();
        let p1 = c.control_epoch(&per_core);
        assert_eq!(p1.version, 1);
        assert!(p1.standby);
        per_core[0].record(100);
        let p2 = c.control_epoch(&per_core);
        assert_eq!(p2.version, 2);
        assert_eq!(p2.threshold, class_upper(size_class(100)));
    }

    #[test]
    fn csv_row_format() {
        let p = ShardPlan::initial(4, 1400);
        assert_eq!(p.csv_row(5), "5,0,1400,4,0,1,1400-max");
    }
}
