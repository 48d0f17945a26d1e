//! Telemetry table: exactly-once insert keyed by `(device_id, seq)`, FIFO
//! retention, and bucketed aggregation.
//!
//! Persistence is an append-only `readings.hgr` of `u32 length || reading`
//! frames. Pruned rows stay in the file until it grows past twice the
//! retention limit, at which point it is rewritten. Replaying the file with
//! the same limit reproduces the in-memory table.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::codec::{CodecError, Reader, Writer};
use crate::fsutil::write_atomic;
use crate::relay::MAX_METRIC_LEN;
use crate::DeviceId;

pub const READINGS_FILE: &str = "readings.hgr";
pub const DEFAULT_MAX_READINGS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredReading {
    pub device_id: DeviceId,
    pub seq: u64,
    pub metric: String,
    pub value: f64,
    /// Device-reported timestamp (ms).
    pub device_ts: u64,
    /// Gateway arrival time (ms).
    pub arrival_ts: u64,
}

impl StoredReading {
    pub fn encode_into(&self, w: &mut Writer) {
        w.raw(&self.device_id.0)
            .u64(self.seq)
            .str(&self.metric)
            .f64(self.value)
            .u64(self.device_ts)
            .u64(self.arrival_ts);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(8 + 8 + 2 + self.metric.len() + 24);
        self.encode_into(&mut w);
        w.finish()
    }

    pub fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Self {
            device_id: DeviceId(r.array()?),
            seq: r.u64()?,
            metric: r.bounded_str("metric", MAX_METRIC_LEN)?,
            value: r.f64()?,
            device_ts: r.u64()?,
            arrival_ts: r.u64()?,
        })
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(buf);
        let out = Self::read(&mut r)?;
        r.finish()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    #[default]
    Raw,
    Mean,
    Min,
    Max,
    Count,
}

impl std::str::FromStr for Aggregate {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(Self::Raw),
            "mean" => Ok(Self::Mean),
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            "count" => Ok(Self::Count),
            _ => Err(StoreError::BadAggregate(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    /// Inclusive bounds on the device timestamp, in ms.
    pub from: u64,
    pub to: u64,
    /// Bucket width in seconds; ignored for `Raw`, must be at least 1 otherwise.
    pub bucket_s: u64,
    pub agg: Aggregate,
}

/// One series point. For raw queries `ts` is the device timestamp and
/// `count` is 1; for aggregates `ts` is the bucket start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub ts: u64,
    pub value: f64,
    pub count: u64,
}

#[derive(Debug, Default)]
pub struct ReadingStore {
    by_device: HashMap<DeviceId, BTreeMap<u64, StoredReading>>,
    order: VecDeque<(DeviceId, u64)>,
    max_readings: u64,
    file: Option<(PathBuf, File)>,
    file_frames: u64,
    pruned_pending: u64,
}

fn frame(r: &StoredReading) -> Vec<u8> {
    let enc = r.encode();
    let mut out = Vec::with_capacity(4 + enc.len());
    out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
    out.extend_from_slice(&enc);
    out
}

impl ReadingStore {
    pub fn new(max_readings: u64) -> Self {
        Self {
            max_readings: max_readings.max(1),
            ..Default::default()
        }
    }

    /// Loads `readings.hgr` from `dir`, dropping a torn final frame.
    pub fn open_dir(dir: &Path, max_readings: u64) -> Result<Self, StoreError> {
        let path = dir.join(READINGS_FILE);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let mut store = Self::new(max_readings);
        let mut pos = 0usize;
        while let Some(len_bytes) = bytes.get(pos..pos + 4) {
            let len = u32::from_be_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
            let Some(body) = bytes.get(pos + 4..pos + 4 + len) else {
                break;
            };
            let reading = StoredReading::decode(body).map_err(|_| StoreError::Corrupt {
                index: store.file_frames,
            })?;
            store.insert_mem(reading);
            store.file_frames += 1;
            pos += 4 + len;
        }
        store.pruned_pending = 0;
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        if pos != bytes.len() {
            file.set_len(pos as u64)?;
            file.sync_all()?;
        }
        store.file = Some((path, file));
        Ok(store)
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn max_readings(&self) -> u64 {
        self.max_readings
    }

    pub fn contains(&self, device: &DeviceId, seq: u64) -> bool {
        self.by_device
            .get(device)
            .is_some_and(|m| m.contains_key(&seq))
    }

    pub fn device_count(&self, device: &DeviceId) -> usize {
        self.by_device.get(device).map_or(0, BTreeMap::len)
    }

    /// Number of rows pruned since the last call; the caller audits them.
    pub fn take_pruned(&mut self) -> u64 {
        std::mem::take(&mut self.pruned_pending)
    }

    fn insert_mem(&mut self, r: StoredReading) -> bool {
        let rows = self.by_device.entry(r.device_id).or_default();
        if rows.contains_key(&r.seq) {
            return false;
        }
        self.order.push_back((r.device_id, r.seq));
        rows.insert(r.seq, r);
        while self.order.len() as u64 > self.max_readings {
            let (d, s) = self.order.pop_front().expect("non-empty");
            if let Some(m) = self.by_device.get_mut(&d) {
                m.remove(&s);
            }
            self.pruned_pending += 1;
        }
        true
    }

    /// Inserts a reading. A duplicate `(device_id, seq)` is a no-op that
    /// returns `Ok(false)`.
    pub fn insert(&mut self, r: StoredReading) -> Result<bool, StoreError> {
        if self.contains(&r.device_id, r.seq) {
            return Ok(false);
        }
        if let Some((_, file)) = self.file.as_mut() {
            file.write_all(&frame(&r))
                .map_err(|e| StoreError::StorageFailure(e.to_string()))?;
            self.file_frames += 1;
        }
        self.insert_mem(r);
        if self.file_frames > self.max_readings.saturating_mul(2) {
            self.compact()?;
        }
        Ok(true)
    }

    fn compact(&mut self) -> Result<(), StoreError> {
        let Some((path, _)) = self.file.take() else {
            return Ok(());
        };
        let mut buf = Vec::new();
        for (d, s) in &self.order {
            buf.extend_from_slice(&frame(&self.by_device[d][s]));
        }
        write_atomic(&path, &buf)?;
        let file = OpenOptions::new().append(true).open(&path)?;
        self.file_frames = self.order.len() as u64;
        self.file = Some((path, file));
        Ok(())
    }

    /// Flushes appended rows to stable storage.
    pub fn sync(&mut self) -> Result<(), StoreError> {
        if let Some((_, f)) = self.file.as_mut() {
            f.sync_data()?;
        }
        Ok(())
    }

    /// Raw rows for one device with `from <= device_ts <= to`, ordered by
    /// device timestamp then sequence number.
    pub fn rows(&self, device: &DeviceId, from: u64, to: u64) -> Vec<&StoredReading> {
        let mut out: Vec<_> = self
            .by_device
            .get(device)
            .into_iter()
            .flat_map(|m| m.values())
            .filter(|r| (from..=to).contains(&r.device_ts))
            .collect();
        out.sort_by_key(|r| (r.device_ts, r.seq));
        out
    }

    /// All rows in range across devices, ordered by device id then
    /// timestamp then sequence number.
    pub fn rows_all(&self, from: u64, to: u64) -> Vec<&StoredReading> {
        let mut ids: Vec<_> = self.by_device.keys().copied().collect();
        ids.sort();
        ids.iter().flat_map(|d| self.rows(d, from, to)).collect()
    }

    pub fn query(&self, device: &DeviceId, q: &Query) -> Result<Vec<SeriesPoint>, StoreError> {
        if q.from > q.to {
            return Err(StoreError::BadRange);
        }
        let rows = self.rows(device, q.from, q.to);
        if q.agg == Aggregate::Raw {
            return Ok(rows
                .iter()
                .map(|r| SeriesPoint {
                    ts: r.device_ts,
                    value: r.value,
                    count: 1,
                })
                .collect());
        }
        if q.bucket_s == 0 {
            return Err(StoreError::BadRange);
        }
        let width = q.bucket_s.saturating_mul(1000);
        let mut buckets: BTreeMap<u64, (f64, f64, f64, u64)> = BTreeMap::new();
        for r in rows {
            let start = r.device_ts - r.device_ts % width;
            let e = buckets
                .entry(start)
                .or_insert((0.0, f64::INFINITY, f64::NEG_INFINITY, 0));
            e.0 += r.value;
            e.1 = e.1.min(r.value);
            e.2 = e.2.max(r.value);
            e.3 += 1;
        }
        Ok(buckets
            .into_iter()
            .map(|(ts, (sum, min, max, count))| SeriesPoint {
                ts,
                value: match q.agg {
                    Aggregate::Mean => sum / count as f64,
                    Aggregate::Min => min,
                    Aggregate::Max => max,
                    Aggregate::Count => count as f64,
                    Aggregate::Raw => unreachable!("handled above"),
                },
                count,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reading(dev: u64, seq: u64, ts: u64, value: f64) -> StoredReading {
        StoredReading {
            device_id: DeviceId::from_u64(dev),
            seq,
            metric: "temp_c".into(),
            value,
            device_ts: ts,
            arrival_ts: ts + 5,
        }
    }

    fn q(from: u64, to: u64, bucket_s: u64, agg: Aggregate) -> Query {
        Query {
            from,
            to,
            bucket_s,
            agg,
        }
    }

    #[test]
    fn duplicate_insert_is_noop() {
        let mut s = ReadingStore::new(10);
        assert!(s.insert(reading(1, 1, 0, 1.0)).unwrap());
        assert!(!s.insert(reading(1, 1, 0, 9.0)).unwrap());
        assert_eq!(s.len(), 1);
        assert_eq!(s.rows(&DeviceId::from_u64(1), 0, 10)[0].value, 1.0);
    }

    #[test]
    fn mean_of_one_bucket() {
        let mut s = ReadingStore::new(10);
        for (i, v) in [1.0, 2.0, 3.0].into_iter().enumerate() {
            s.insert(reading(1, i as u64 + 1, i as u64 * 1000, v)).unwrap();
        }
        let d = DeviceId::from_u64(1);
        let out = s.query(&d, &q(0, 59_999, 60, Aggregate::Mean)).unwrap();
        assert_eq!(out, vec![SeriesPoint { ts: 0, value: 2.0, count: 3 }]);
        assert!(s.query(&d, &q(100_000, 200_000, 60, Aggregate::Mean)).unwrap().is_empty());
        assert!(matches!(s.query(&d, &q(5, 4, 60, Aggregate::Mean)), Err(StoreError::BadRange)));
        assert!(matches!(s.query(&d, &q(0, 4, 0, Aggregate::Max)), Err(StoreError::BadRange)));
    }

    #[test]
    fn bounds_are_inclusive_and_buckets_aligned() {
        let mut s = ReadingStore::new(10);
        s.insert(reading(1, 1, 59_999, 1.0)).unwrap();
        s.insert(reading(1, 2, 60_000, 5.0)).unwrap();
        let d = DeviceId::from_u64(1);
        let out = s.query(&d, &q(59_999, 60_000, 60, Aggregate::Count)).unwrap();
        assert_eq!(out.iter().map(|p| p.ts).collect::<Vec<_>>(), vec![0, 60_000]);
    }

    #[test]
    fn fifo_pruning_counts() {
        let mut s = ReadingStore::new(3);
        for i in 1..=5 {
            s.insert(reading(1, i, i, 0.0)).unwrap();
        }
        assert_eq!(s.len(), 3);
        assert_eq!(s.take_pruned(), 2);
        assert_eq!(s.take_pruned(), 0);
        assert!(!s.contains(&DeviceId::from_u64(1), 2));
        assert!(s.contains(&DeviceId::from_u64(1), 3));
    }

    #[test]
    fn file_replay_reproduces_table() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = ReadingStore::open_dir(dir.path(), 4).unwrap();
            for i in 1..=20 {
                s.insert(reading(i % 3, i, i * 10, i as f64)).unwrap();
            }
            s.sync().unwrap();
        }
        let path = dir.path().join(READINGS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 200, 7]);
        fs::write(&path, bytes).unwrap();
        let s = ReadingStore::open_dir(dir.path(), 4).unwrap();
        assert_eq!(s.len(), 4);
        let seqs: Vec<u64> = s.rows_all(0, u64::MAX).iter().map(|r| r.seq).collect();
        let mut expect = vec![17, 18, 19, 20];
        expect.sort_by_key(|i| (i % 3, *i));
        assert_eq!(seqs, expect);
    }

    #[test]
    fn reading_codec_round_trip() {
        let r = reading(7, 9, 11, -3.25);
        assert_eq!(StoredReading::decode(&r.encode()).unwrap(), r);
    }
}
