use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use minos_core::kvstore::{master_core, KeyHash, Store, StoreConfig, StoreError, WriteMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn key(i: u64) -> Vec<u8> {
    format!("key-{i}").into_bytes()
}

fn mode_for(store: &Store, core: usize, hash: KeyHash) -> WriteMode {
    if store.master_of(store.partition_of(hash)) == core {
        WriteMode::Crew { core }
    } else {
        WriteMode::Guarded { core }
    }
}

/// Value whose last 8 bytes are a checksum of the rest.
fn checked_value(seed: u64, len: usize) -> Vec<u8> {
    let mut v: Vec<u8> = (0..len - 8).map(|i| (seed.wrapping_mul(31).wrapping_add(i as u64 * 7)) as u8).collect();
    let sum = checksum(&v);
    v.extend_from_slice(&sum.to_le_bytes());
    v
}

fn checksum(b: &[u8]) -> u64 {
    b.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &x| (h ^ x as u64).wrapping_mul(0x100_0000_01b3))
}

fn verify(v: &[u8]) -> bool {
    v.len() >= 8 && checksum(&v[..v.len() - 8]).to_le_bytes() == v[v.len() - 8..]
}

#[test]
fn scan_matches_model_after_random_operations() {
    let cores = 4;
    let store = Store::new(StoreConfig { buckets_per_partition: 256, ..StoreConfig::new(cores) });
    let mut model: HashMap<Vec<u8>, Vec<u8>> = HashMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for step in 0..100_000u64 {
        let k = key(rng.random_range(0..30_000));
        let h = KeyHash::of(&k);
        let mode = mode_for(&store, (step % cores as u64) as usize, h);
        if rng.random_bool(0.1) {
            let r = store.delete(&k, h, WriteMode::Guarded { core: mode.core() });
            assert_eq!(r.is_ok(), model.remove(&k).is_some());
        } else {
            let len = rng.random_range(1..300);
            let v: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            store.put(&k, h, &v, WriteMode::Guarded { core: mode.core() }).unwrap();
            model.insert(k, v);
        }
    }
    assert!(store.overflow_buckets() > 0, "test should exercise overflow chains");
    let scanned: HashSet<Vec<u8>> = store.scan_keys().into_iter().collect();
    let expected: HashSet<Vec<u8>> = model.keys().cloned().collect();
    assert_eq!(scanned, expected);
    for (k, v) in &model {
        assert_eq!(&store.get(k, KeyHash::of(k)).unwrap(), v);
        assert_eq!(store.lookup_size(k, KeyHash::of(k)).unwrap(), v.len());
    }
    assert_eq!(store.get(b"absent", KeyHash::of(b"absent")), Err(StoreError::NotFound));
    assert!(store.all_epochs_even());
}

#[test]
fn crew_requires_the_partition_master() {
    let store = Store::new(StoreConfig::new(4));
    let k = key(1);
    let h = KeyHash::of(&k);
    let master = store.master_of(store.partition_of(h));
    assert_eq!(master, master_core(h.partition(4), 4));
    let other = (master + 1) % 4;
    assert!(matches!(store.put(&k, h, b"v", WriteMode::Crew { core: other }), Err(StoreError::NotMaster { .. })));
    store.put(&k, h, b"v", WriteMode::Crew { core: master }).unwrap();
    store.put(&k, h, b"w", WriteMode::Guarded { core: other }).unwrap();
    assert_eq!(store.get(&k, h).unwrap(), b"w");
}

#[test]
fn value_size_limits() {
    let store = Store::new(StoreConfig { max_value_size: 1000, ..StoreConfig::new(2) });
    let k = key(9);
    let h = KeyHash::of(&k);
    let g = WriteMode::Guarded { core: 0 };
    assert!(matches!(store.put(&k, h, &[], g), Err(StoreError::BadValueSize { .. })));
    assert!(matches!(store.put(&k, h, &[0; 1001], g), Err(StoreError::BadValueSize { .. })));
    store.put(&k, h, &[1; 1000], g).unwrap();
    // shrink in place, then grow past the original capacity
    store.put(&k, h, &[2; 10], g).unwrap();
    assert_eq!(store.get(&k, h).unwrap(), vec![2; 10]);
    store.put(&k, h, &[3; 1000], g).unwrap();
    assert_eq!(store.get(&k, h).unwrap(), vec![3; 1000]);
}

#[test]
fn single_crew_writer_per_partition_under_concurrency() {
    let cores = 4;
    let store = Arc::new(Store::new(StoreConfig { audit: true, ..StoreConfig::new(cores) }));
    let handles: Vec<_> = (0..cores)
        .map(|core| {
            let store = store.clone();
            thread::spawn(move || {
                for i in 0..20_000u64 {
                    let k = key(i % 2000);
                    let h = KeyHash::of(&k);
                    if store.master_of(store.partition_of(h)) == core {
                        store.put(&k, h, &i.to_le_bytes(), WriteMode::Crew { core }).unwrap();
                    } else {
                        let _ = store.get(&k, h);
                    }
                }
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    for p in 0..cores {
        let mask = store.crew_writers(p);
        assert_eq!(mask, 1 << master_core(p, cores), "partition {p}");
    }
    assert!(store.all_epochs_even());
}

#[test]
fn concurrent_mixed_writers_never_tear_values() {
    let cores = 6;
    let store = Arc::new(Store::new(StoreConfig { audit: true, ..StoreConfig::new(cores) }));
    let keys = 64u64;
    for i in 0..keys {
        let k = key(i);
        store.put(&k, KeyHash::of(&k), &checked_value(i, 64), WriteMode::Guarded { core: 0 }).unwrap();
    }
    let stop = Arc::new(AtomicBool::new(false));
    let bad = Arc::new(AtomicU64::new(0));
    let reads = Arc::new(AtomicU64::new(0));
    let handles: Vec<_> = (0..cores)
        .map(|core| {
            let (store, stop, bad, reads) = (store.clone(), stop.clone(), bad.clone(), reads.clone());
            thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(core as u64);
                while !stop.load(Ordering::Relaxed) {
                    let i = rng.random_range(0..keys);
                    let k = key(i);
                    let h = KeyHash::of(&k);
                    if rng.random_bool(0.5) {
                        let v = store.get(&k, h).unwrap();
                        reads.fetch_add(1, Ordering::Relaxed);
                        if !verify(&v) {
                            bad.fetch_add(1, Ordering::Relaxed);
                        }
                    } else {
                        // odd cores always take the guarded path to mix both modes
                        let mode = if core % 2 == 0 { mode_for(&store, core, h) } else { WriteMode::Guarded { core } };
                        let len = rng.random_range(16..2000);
                        store.put(&k, h, &checked_value(rng.random(), len), mode).unwrap();
                    }
                }
            })
        })
        .collect();
    let start = Instant::now();
    while start.elapsed() < Duration::from_millis(1500) {
        thread::sleep(Duration::from_millis(50));
    }
    stop.store(true, Ordering::Relaxed);
    for h in handles {
        h.join().unwrap();
    }
    assert!(reads.load(Ordering::Relaxed) > 1000);
    assert_eq!(bad.load(Ordering::Relaxed), 0);
    assert_eq!(store.read_stats().unstable, 0);
    assert!(store.all_epochs_even());
}
