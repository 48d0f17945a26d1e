use std::collections::BTreeMap;

use homegate_core::store::{Aggregate, Query, ReadingStore, StoreError, StoredReading};
use homegate_core::DeviceId;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn row(dev: u64, seq: u64, ts: u64, value: f64) -> StoredReading {
    StoredReading {
        device_id: DeviceId::from_u64(dev),
        seq,
        metric: "temp_c".into(),
        value,
        device_ts: ts,
        arrival_ts: ts,
    }
}

/// Straightforward recomputation: filter, group by bucket start, fold.
fn naive(rows: &[StoredReading], dev: u64, q: &Query) -> Vec<(u64, f64, u64)> {
    let width = q.bucket_s * 1000;
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if r.device_id == DeviceId::from_u64(dev) && r.device_ts >= q.from && r.device_ts <= q.to {
            groups.entry(r.device_ts / width * width).or_default().push(r.value);
        }
    }
    groups
        .into_iter()
        .map(|(ts, vals)| {
            let n = vals.len() as u64;
            let v = match q.agg {
                Aggregate::Mean => vals.iter().sum::<f64>() / n as f64,
                Aggregate::Min => vals.iter().cloned().fold(f64::INFINITY, f64::min),
                Aggregate::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                Aggregate::Count => n as f64,
                Aggregate::Raw => unreachable!(),
            };
            (ts, v, n)
        })
        .collect()
}

#[test]
fn thousand_random_readings_match_naive_aggregation() {
    let mut rng = ChaCha20Rng::seed_from_u64(77);
    let mut store = ReadingStore::new(1_000_000);
    let mut rows = Vec::new();
    let mut seqs = [0u64; 3];
    for _ in 0..1000 {
        let dev = rng.gen_range(0..3u64);
        seqs[dev as usize] += 1;
        let r = row(dev, seqs[dev as usize], rng.gen_range(0..3_600_000), rng.gen_range(-20.0..40.0));
        assert!(store.insert(r.clone()).unwrap());
        rows.push(r);
    }
    for _ in 0..200 {
        let dev = rng.gen_range(0..3);
        let a = rng.gen_range(0..3_600_000);
        let b = rng.gen_range(0..3_600_000);
        let agg = [Aggregate::Mean, Aggregate::Min, Aggregate::Max, Aggregate::Count][rng.gen_range(0..4)];
        let q = Query {
            from: a.min(b),
            to: a.max(b),
            bucket_s: [1, 10, 60, 300, 3600][rng.gen_range(0..5)],
            agg,
        };
        let got = store.query(&DeviceId::from_u64(dev), &q).unwrap();
        let want = naive(&rows, dev, &q);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((g.ts, g.count), (w.0, w.2));
            assert!((g.value - w.1).abs() <= 1e-9 * w.1.abs().max(1.0), "{q:?}: {} vs {}", g.value, w.1);
        }
    }
}

#[test]
fn raw_query_is_inclusive_and_ordered() {
    let mut store = ReadingStore::new(100);
    for (seq, ts) in [(1, 1000), (2, 2000), (3, 3000)] {
        store.insert(row(1, seq, ts, seq as f64)).unwrap();
    }
    let q = |from, to, agg| Query { from, to, bucket_s: 60, agg };
    let raw = store.query(&DeviceId::from_u64(1), &q(1000, 3000, Aggregate::Raw)).unwrap();
    assert_eq!(raw.iter().map(|p| p.ts).collect::<Vec<_>>(), [1000, 2000, 3000]);
    let mean = store.query(&DeviceId::from_u64(1), &q(0, 59_999, Aggregate::Mean)).unwrap();
    assert_eq!((mean[0].value, mean[0].count), (2.0, 3));
    assert!(store.query(&DeviceId::from_u64(1), &q(5000, 6000, Aggregate::Mean)).unwrap().is_empty());
    assert!(matches!(
        store.query(&DeviceId::from_u64(1), &q(2, 1, Aggregate::Raw)),
        Err(StoreError::BadRange)
    ));
}

#[test]
fn pruning_is_fifo_and_survives_reopen() {
    let tmp = tempfile::tempdir().unwrap();
    let mut store = ReadingStore::open_dir(tmp.path(), 10).unwrap();
    for seq in 1..=25 {
        store.insert(row(1, seq, seq * 1000, seq as f64)).unwrap();
    }
    assert_eq!(store.len(), 10);
    assert_eq!(store.take_pruned(), 15);
    assert!(!store.contains(&DeviceId::from_u64(1), 15));
    assert!(store.contains(&DeviceId::from_u64(1), 16));
    store.sync().unwrap();
    drop(store);
    let store = ReadingStore::open_dir(tmp.path(), 10).unwrap();
    assert_eq!(store.len(), 10);
    assert!(store.contains(&DeviceId::from_u64(1), 25));
}

proptest! {
    #[test]
    fn duplicate_inserts_are_noops(seqs in proptest::collection::vec(1..50u64, 1..200)) {
        let mut store = ReadingStore::new(1_000);
        let mut distinct = std::collections::BTreeSet::new();
        for s in &seqs {
            let fresh = store.insert(row(1, *s, *s * 10, 1.0)).unwrap();
            prop_assert_eq!(fresh, distinct.insert(*s));
        }
        prop_assert_eq!(store.len(), distinct.len());
    }
}
