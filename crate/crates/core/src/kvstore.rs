//! Partitioned hash store with tagged, cache-line-sized buckets and
//! bucket-epoch optimistic reads.
//!
//! A keyhash is split into three portions: the high 16 bits pick the
//! partition, bits 8..48 pick the bucket within the partition and the low
//! 8 bits form the tag stored next to each entry reference.
//!
//! Every bucket chain is guarded by the epoch of its head bucket. A writer
//! moves the epoch from even to odd with a CAS before touching the chain and
//! back to even afterwards, so writers on one chain are serialized even
//! while a plan change lets two cores believe they may write the same
//! partition. Readers spin while the epoch is odd, record it, perform the
//! lookup and retry when the epoch moved.
//!
//! Entry bytes live in a per-partition bump arena of atomic words. Memory is
//! never reclaimed during a run; values are overwritten in place whenever the
//! new value fits in the entry's capacity.

use std::hash::Hasher;
use std::sync::atomic::{fence, AtomicU64, Ordering};
use std::sync::OnceLock;

use siphasher::sip::SipHasher24;
use thiserror::Error;

pub const SLOTS_PER_BUCKET: usize = 6;
pub const DEFAULT_MAX_VALUE_SIZE: usize = 1 << 20;

/// Fixed SipHash key shared by clients and servers.
const SIP_K0: u64 = 0x6d69_6e6f_735f_6b76;
const SIP_K1: u64 = 0x7369_7a65_5f61_7761;

/// Spins on an odd epoch this many times before yielding the thread.
const READ_SPIN_LIMIT: u32 = 1024;

const ARENA_CHUNK_WORDS: usize = 1 << 18;
const OVERFLOW_CHUNK: usize = 1 << 12;

const OFFSET_MASK: u64 = (1 << 56) - 1;
const TOMBSTONE: u64 = 1 << 48;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("key not found")]
    NotFound,
    #[error("store capacity exceeded")]
    CapacityExceeded,
    #[error("value size {size} outside 1..={max}")]
    BadValueSize { size: usize, max: usize },
    #[error("core {core} is not the master of partition {partition}")]
    NotMaster { partition: usize, core: usize },
}

/// 64-bit hash of the key bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KeyHash(pub u64);

impl KeyHash {
    pub fn of(key: &[u8]) -> Self {
        let mut h = SipHasher24::new_with_keys(SIP_K0, SIP_K1);
        h.write(key);
        KeyHash(h.finish())
    }

    pub fn partition(self, partitions: usize) -> usize {
        ((self.0 >> 48) as usize) % partitions
    }

    fn bucket(self, buckets: usize) -> usize {
        ((self.0 >> 8) as usize) & (buckets - 1)
    }

    pub fn tag(self) -> u8 {
        self.0 as u8
    }
}

/// Core that owns (masters) a partition.
pub fn master_core(partition: usize, cores: usize) -> usize {
    partition % cores
}

/// How a write is admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteMode {
    /// Exclusive-write path: the executing core must master the partition.
    Crew { core: usize },
    /// Takes the partition guard first; any core may write.
    Guarded { core: usize },
}

impl WriteMode {
    pub fn core(self) -> usize {
        match self {
            WriteMode::Crew { core } | WriteMode::Guarded { core } => core,
        }
    }
}

/// Arena bytes taken by one entry.
pub fn entry_bytes(key_len: usize, value_len: usize) -> usize {
    8 * (2 + key_len.div_ceil(8) + value_len.div_ceil(8))
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    pub cores: usize,
    pub partitions: usize,
    /// Power of two.
    pub buckets_per_partition: usize,
    pub max_value_size: usize,
    /// Arena budget in bytes, split evenly across partitions.
    pub memory_limit: usize,
    /// Record read/write audit counters.
    pub audit: bool,
}

impl StoreConfig {
    pub fn new(cores: usize) -> Self {
        StoreConfig {
            cores,
            partitions: cores,
            buckets_per_partition: 1 << 12,
            max_value_size: DEFAULT_MAX_VALUE_SIZE,
            memory_limit: 4 << 30,
            audit: false,
        }
    }

    /// Sizes the bucket array for roughly `keys` entries at half occupancy.
    pub fn for_keys(cores: usize, keys: usize) -> Self {
        let mut c = StoreConfig::new(cores);
        let per_part = (keys * 2 / SLOTS_PER_BUCKET / cores.max(1)).max(16);
        c.buckets_per_partition = per_part.next_power_of_two();
        c
    }
}

#[repr(C, align(64))]
pub struct Bucket {
    epoch: AtomicU64,
    slots: [AtomicU64; SLOTS_PER_BUCKET],
    overflow: AtomicU64,
}

impl Bucket {
    fn new() -> Self {
        Bucket {
            epoch: AtomicU64::new(0),
            slots: Default::default(),
            overflow: AtomicU64::new(0),
        }
    }
}

fn zeroed_words(n: usize) -> Box<[AtomicU64]> {
    (0..n).map(|_| AtomicU64::new(0)).collect()
}

struct WordArena {
    chunks: Box<[OnceLock<Box<[AtomicU64]>>]>,
    next: AtomicU64,
}

impl WordArena {
    fn new(limit_words: usize) -> Self {
        let n = limit_words.div_ceil(ARENA_CHUNK_WORDS).max(1);
        WordArena {
            chunks: (0..n).map(|_| OnceLock::new()).collect(),
            // word 0 is reserved so that a zero slot means "empty"
            next: AtomicU64::new(1),
        }
    }

    fn alloc(&self, words: usize) -> Option<u64> {
        assert!(words <= ARENA_CHUNK_WORDS);
        let cw = ARENA_CHUNK_WORDS as u64;
        let mut cur = self.next.load(Ordering::Relaxed);
        loop {
            let mut start = cur;
            if start % cw + words as u64 > cw {
                start = start.div_ceil(cw) * cw;
            }
            let end = start + words as u64;
            if (start / cw) as usize >= self.chunks.len() {
                return None;
            }
            match self
                .next
                .compare_exchange_weak(cur, end, Ordering::Relaxed, Ordering::Relaxed)
            {
                Ok(_) => {
                    self.chunks[(start / cw) as usize].get_or_init(|| zeroed_words(ARENA_CHUNK_WORDS));
                    return Some(start);
                }
                Err(actual) => cur = actual,
            }
        }
    }

    /// Words `[off, off + len)`, or `None` if the range was never handed out.
    fn slice(&self, off: u64, len: usize) -> Option<&[AtomicU64]> {
        let cw = ARENA_CHUNK_WORDS as u64;
        let chunk = self.chunks.get((off / cw) as usize)?.get()?;
        let start = (off % cw) as usize;
        chunk.get(start..start + len)
    }

    fn used_words(&self) -> u64 {
        self.next.load(Ordering::Relaxed)
    }
}

struct OverflowPool {
    chunks: Box<[OnceLock<Box<[Bucket]>>]>,
    next: AtomicU64,
}

impl OverflowPool {
    fn new(max: usize) -> Self {
        let n = max.div_ceil(OVERFLOW_CHUNK).max(1);
        OverflowPool {
            chunks: (0..n).map(|_| OnceLock::new()).collect(),
            next: AtomicU64::new(0),
        }
    }

    /// Returns a 1-based reference.
    fn alloc(&self) -> Option<u64> {
        let idx = self.next.fetch_add(1, Ordering::Relaxed) as usize;
        let chunk = self.chunks.get(idx / OVERFLOW_CHUNK)?;
        chunk.get_or_init(|| (0..OVERFLOW_CHUNK).map(|_| Bucket::new()).collect());
        Some(idx as u64 + 1)
    }

    fn get(&self, r: u64) -> Option<&Bucket> {
        let idx = (r - 1) as usize;
        self.chunks.get(idx / OVERFLOW_CHUNK)?.get()?.get(idx % OVERFLOW_CHUNK)
    }

    fn len(&self) -> u64 {
        self.next.load(Ordering::Relaxed)
    }
}

#[derive(Default)]
struct PartitionAudit {
    /// Bit `c` set once core `c` ran an unguarded mutation.
    crew_writers: AtomicU64,
    guarded_writes: AtomicU64,
}

struct Partition {
    buckets: Box<[Bucket]>,
    overflow: OverflowPool,
    arena: WordArena,
    guard: spin::Mutex<()>,
    audit: PartitionAudit,
}

#[derive(Default)]
struct ReadAudit {
    completed: AtomicU64,
    retries: AtomicU64,
    unstable: AtomicU64,
}

/// Snapshot of the audit counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadStats {
    pub completed: u64,
    pub retries: u64,
    /// Completed reads whose closing epoch was odd or differed from the opening one.
    pub unstable: u64,
}

// Entry block layout in arena words:
//   w0: value_len (bits 0..32) | key_len (bits 32..48) | tombstone (bit 48)
//   w1: value capacity in words
//   key words, then value words
#[derive(Clone, Copy)]
struct EntryRef<'a> {
    words: &'a [AtomicU64],
    key_words: usize,
    key_len: usize,
}

impl<'a> EntryRef<'a> {
    fn meta(&self) -> u64 {
        self.words[0].load(Ordering::Relaxed)
    }

    fn capacity_bytes(&self) -> usize {
        (self.words.len() - 2 - self.key_words) * 8
    }

    fn value_len(&self) -> usize {
        ((self.meta() & 0xffff_ffff) as usize).min(self.capacity_bytes())
    }

    fn is_tombstone(&self) -> bool {
        self.meta() & TOMBSTONE != 0
    }

    fn key_matches(&self, key: &[u8]) -> bool {
        if self.key_len != key.len() {
            return false;
        }
        let stored = &self.words[2..2 + self.key_words];
        key.chunks(8).zip(stored).all(|(chunk, w)| {
            let bytes = w.load(Ordering::Relaxed).to_le_bytes();
            bytes[..chunk.len()] == *chunk
        })
    }

    fn copy_value(&self) -> Vec<u8> {
        let len = self.value_len();
        let start = 2 + self.key_words;
        let mut out = Vec::with_capacity(len.next_multiple_of(8));
        for w in &self.words[start..start + len.div_ceil(8)] {
            out.extend_from_slice(&w.load(Ordering::Relaxed).to_le_bytes());
        }
        out.truncate(len);
        out
    }

    fn write_value(&self, value: &[u8]) {
        let start = 2 + self.key_words;
        for (chunk, w) in value.chunks(8).zip(&self.words[start..]) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            w.store(u64::from_le_bytes(b), Ordering::Relaxed);
        }
        self.words[0].store(
            value.len() as u64 | ((self.key_len as u64) << 32),
            Ordering::Relaxed,
        );
    }

    fn set_tombstone(&self) {
        let m = self.meta();
        self.words[0].store(m | TOMBSTONE, Ordering::Relaxed);
    }
}

enum Lookup<'a> {
    Found(EntryRef<'a>),
    Missing,
    /// A reference read under a concurrent write did not resolve; retry.
    Torn,
}

pub struct Store {
    config: StoreConfig,
    partitions: Box<[Partition]>,
    reads: ReadAudit,
}

impl Store {
    pub fn new(config: StoreConfig) -> Self {
        assert!(config.cores >= 1 && config.partitions >= 1);
        assert!(config.buckets_per_partition.is_power_of_two());
        let limit_words = config.memory_limit / 8 / config.partitions;
        let overflow_max = config.buckets_per_partition.max(OVERFLOW_CHUNK);
        let partitions = (0..config.partitions)
            .map(|_| Partition {
                buckets: (0..config.buckets_per_partition).map(|_| Bucket::new()).collect(),
                overflow: OverflowPool::new(overflow_max),
                arena: WordArena::new(limit_words),
                guard: spin::Mutex::new(()),
                audit: PartitionAudit::default(),
            })
            .collect();
        Store {
            config,
            partitions,
            reads: ReadAudit::default(),
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn partition_of(&self, hash: KeyHash) -> usize {
        hash.partition(self.config.partitions)
    }

    pub fn master_of(&self, partition: usize) -> usize {
        master_core(partition, self.config.cores)
    }

    fn head(&self, hash: KeyHash) -> (&Partition, &Bucket) {
        let p = &self.partitions[self.partition_of(hash)];
        let b = &p.buckets[hash.bucket(self.config.buckets_per_partition)];
        (p, b)
    }

    fn entry<'a>(&self, part: &'a Partition, slot: u64) -> Option<EntryRef<'a>> {
        let off = slot & OFFSET_MASK;
        let head = part.arena.slice(off, 2)?;
        let meta = head[0].load(Ordering::Relaxed);
        let cap = head[1].load(Ordering::Relaxed) as usize;
        let key_len = ((meta >> 32) & 0xffff) as usize;
        let key_words = key_len.div_ceil(8);
        let words = part.arena.slice(off, 2 + key_words + cap)?;
        Some(EntryRef { words, key_words, key_len })
    }

    fn next_bucket<'a>(&self, part: &'a Partition, b: &'a Bucket) -> Option<&'a Bucket> {
        match b.overflow.load(Ordering::Acquire) {
            0 => None,
            r => part.overflow.get(r),
        }
    }

    fn find<'a>(&self, part: &'a Partition, head: &'a Bucket, key: &[u8], tag: u8) -> Lookup<'a> {
        let mut cur = Some(head);
        while let Some(b) = cur {
            for s in &b.slots {
                let v = s.load(Ordering::Acquire);
                if v == 0 || (v >> 56) as u8 != tag {
                    continue;
                }
                match self.entry(part, v) {
                    Some(e) if e.key_matches(key) => return Lookup::Found(e),
                    Some(_) => {}
                    None => return Lookup::Torn,
                }
            }
            cur = self.next_bucket(part, b);
        }
        Lookup::Missing
    }

    /// Optimistic read: returns whatever `read` extracts from the entry,
    /// guaranteed to come from an interval with no concurrent write.
    fn read_with<T>(
        &self,
        key: &[u8],
        hash: KeyHash,
        read: impl Fn(EntryRef<'_>) -> T,
    ) -> Result<T, StoreError> {
        let (part, head) = self.head(hash);
        loop {
            let before = wait_even(&head.epoch);
            let result = match self.find(part, head, key, hash.tag()) {
                Lookup::Found(e) if e.is_tombstone() => Some(Err(StoreError::NotFound)),
                Lookup::Found(e) => Some(Ok(read(e))),
                Lookup::Missing => Some(Err(StoreError::NotFound)),
                Lookup::Torn => None,
            };
            fence(Ordering::Acquire);
            let after = head.epoch.load(Ordering::Relaxed);
            if after == before {
                if let Some(r) = result {
                    if self.config.audit {
                        self.reads.completed.fetch_add(1, Ordering::Relaxed);
                        if after & 1 == 1 {
                            self.reads.unstable.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    return r;
                }
            }
            if self.config.audit {
                self.reads.retries.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn get(&self, key: &[u8], hash: KeyHash) -> Result<Vec<u8>, StoreError> {
        self.read_with(key, hash, |e| e.copy_value())
    }

    pub fn lookup_size(&self, key: &[u8], hash: KeyHash) -> Result<usize, StoreError> {
        self.read_with(key, hash, |e| e.value_len())
    }

    pub fn put(&self, key: &[u8], hash: KeyHash, value: &[u8], mode: WriteMode) -> Result<(), StoreError> {
        let max = self.config.max_value_size;
        if value.is_empty() || value.len() > max {
            return Err(StoreError::BadValueSize { size: value.len(), max });
        }
        self.mutate(key, hash, mode, Mutation::Put(value))
    }

    /// Tombstone write; a later put revives the key.
    pub fn delete(&self, key: &[u8], hash: KeyHash, mode: WriteMode) -> Result<(), StoreError> {
        self.mutate(key, hash, mode, Mutation::Delete)
    }

    fn mutate(&self, key: &[u8], hash: KeyHash, mode: WriteMode, m: Mutation<'_>) -> Result<(), StoreError> {
        let partition = self.partition_of(hash);
        let (part, head) = self.head(hash);
        let _guard = match mode {
            WriteMode::Crew { core } => {
                if core != self.master_of(partition) {
                    return Err(StoreError::NotMaster { partition, core });
                }
                if self.config.audit {
                    part.audit.crew_writers.fetch_or(1 << (core % 64), Ordering::Relaxed);
                }
                None
            }
            WriteMode::Guarded { .. } => {
                let g = part.guard.lock();
                if self.config.audit {
                    part.audit.guarded_writes.fetch_add(1, Ordering::Relaxed);
                }
                Some(g)
            }
        };
        let epoch = begin_write(&head.epoch);
        let result = self.mutate_chain(part, head, key, hash.tag(), m);
        head.epoch.store(epoch + 2, Ordering::Release);
        result
    }

    fn mutate_chain(
        &self,
        part: &Partition,
        head: &Bucket,
        key: &[u8],
        tag: u8,
        m: Mutation<'_>,
    ) -> Result<(), StoreError> {
        let existing = match self.find(part, head, key, tag) {
            Lookup::Found(e) => Some(e),
            Lookup::Missing => None,
            Lookup::Torn => unreachable!("chain is stable while the writer holds the epoch"),
        };
        let value = match (m, existing) {
            (Mutation::Delete, Some(e)) if e.is_tombstone() => return Err(StoreError::NotFound),
            (Mutation::Delete, Some(e)) => {
                e.set_tombstone();
                return Ok(());
            }
            (Mutation::Delete, None) => return Err(StoreError::NotFound),
            (Mutation::Put(v), Some(e)) if v.len() <= e.capacity_bytes() => {
                e.write_value(v);
                return Ok(());
            }
            (Mutation::Put(v), _) => v,
        };
        let off = self.alloc_entry(part, key, value)?;
        let slot_value = ((tag as u64) << 56) | off;
        if existing.is_some() {
            // replace the reference in place
            let mut cur = Some(head);
            while let Some(b) = cur {
                for s in &b.slots {
                    let v = s.load(Ordering::Relaxed);
                    if v != 0 && (v >> 56) as u8 == tag {
                        if let Some(e) = self.entry(part, v) {
                            if e.key_matches(key) {
                                s.store(slot_value, Ordering::Release);
                                return Ok(());
                            }
                        }
                    }
                }
                cur = self.next_bucket(part, b);
            }
            unreachable!("existing entry vanished under the write epoch");
        }
        let mut last = head;
        let mut cur = Some(head);
        while let Some(b) = cur {
            for s in &b.slots {
                if s.load(Ordering::Relaxed) == 0 {
                    s.store(slot_value, Ordering::Release);
                    return Ok(());
                }
            }
            last = b;
            cur = self.next_bucket(part, b);
        }
        let r = part.overflow.alloc().ok_or(StoreError::CapacityExceeded)?;
        let ob = part.overflow.get(r).ok_or(StoreError::CapacityExceeded)?;
        ob.slots[0].store(slot_value, Ordering::Relaxed);
        last.overflow.store(r, Ordering::Release);
        Ok(())
    }

    fn alloc_entry(&self, part: &Partition, key: &[u8], value: &[u8]) -> Result<u64, StoreError> {
        let key_words = key.len().div_ceil(8);
        let cap = value.len().div_ceil(8);
        let total = entry_bytes(key.len(), value.len()) / 8;
        let off = part.arena.alloc(total).ok_or(StoreError::CapacityExceeded)?;
        let words = part.arena.slice(off, total).expect("fresh allocation");
        words[1].store(cap as u64, Ordering::Relaxed);
        for (chunk, w) in key.chunks(8).zip(&words[2..]) {
            let mut b = [0u8; 8];
            b[..chunk.len()].copy_from_slice(chunk);
            w.store(u64::from_le_bytes(b), Ordering::Relaxed);
        }
        let e = EntryRef { words, key_words, key_len: key.len() };
        e.write_value(value);
        Ok(off)
    }

    /// True when no write is in progress on any bucket.
    pub fn all_epochs_even(&self) -> bool {
        self.partitions
            .iter()
            .all(|p| p.buckets.iter().all(|b| b.epoch.load(Ordering::Acquire) & 1 == 0))
    }

    /// Every live key reachable by walking all chains of all partitions.
    pub fn scan_keys(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        for part in self.partitions.iter() {
            for head in part.buckets.iter() {
                let mut cur = Some(head);
                while let Some(b) = cur {
                    for s in &b.slots {
                        let v = s.load(Ordering::Acquire);
                        if v == 0 {
                            continue;
                        }
                        if let Some(e) = self.entry(part, v) {
                            if !e.is_tombstone() {
                                let mut key = Vec::with_capacity(e.key_len);
                                for w in &e.words[2..2 + e.key_words] {
                                    key.extend_from_slice(&w.load(Ordering::Relaxed).to_le_bytes());
                                }
                                key.truncate(e.key_len);
                                out.push(key);
                            }
                        }
                    }
                    cur = self.next_bucket(part, b);
                }
            }
        }
        out
    }

    pub fn read_stats(&self) -> ReadStats {
        ReadStats {
            completed: self.reads.completed.load(Ordering::Relaxed),
            retries: self.reads.retries.load(Ordering::Relaxed),
            unstable: self.reads.unstable.load(Ordering::Relaxed),
        }
    }

    /// Bitmask of cores that ran the unguarded mutation section on `partition`.
    pub fn crew_writers(&self, partition: usize) -> u64 {
        self.partitions[partition].audit.crew_writers.load(Ordering::Relaxed)
    }

    pub fn guarded_writes(&self, partition: usize) -> u64 {
        self.partitions[partition].audit.guarded_writes.load(Ordering::Relaxed)
    }

    pub fn overflow_buckets(&self) -> u64 {
        self.partitions.iter().map(|p| p.overflow.len()).sum()
    }

    pub fn arena_bytes(&self) -> u64 {
        self.partitions.iter().map(|p| p.arena.used_words() * 8).sum()
    }
}

#[derive(Clone, Copy)]
enum Mutation<'a> {
    Put(&'a [u8]),
    Delete,
}

fn wait_even(epoch: &AtomicU64) -> u64 {
    let mut spins = 0u32;
    loop {
        let e = epoch.load(Ordering::Acquire);
        if e & 1 == 0 {
            return e;
        }
        spins += 1;
        if spins >= READ_SPIN_LIMIT {
            spins = 0;
            std::thread::yield_now();
        } else {
            std::hint::spin_loop();
        }
    }
}

/// Moves the epoch from even to odd; returns the even value it started from.
fn begin_write(epoch: &AtomicU64) -> u64 {
    let mut spins = 0u32;
    loop {
        let e = epoch.load(Ordering::Relaxed);
        if e & 1 == 0
            && epoch
                .compare_exchange_weak(e, e + 1, Ordering::Acquire, Ordering::Relaxed)
                .is_ok()
        {
            fence(Ordering::Release);
            return e;
        }
        spins += 1;
        if spins >= READ_SPIN_LIMIT {
            spins = 0;
            std::thread::yield_now();
        } else {
            std::hint::spin_loop();
        }
    }
}
