//! Hash-chained audit log.
//!
//! `record_hash = SHA-256(prev_hash || index || at || category || body)` with
//! integers big-endian. On disk, `audit.hgl` holds `u32 length || record`
//! frames and `audit.head` holds the latest record hash so truncation is
//! detectable.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StoreError;
use crate::codec::{CodecError, Reader, Writer};
use crate::fsutil::write_atomic;

pub const LOG_FILE: &str = "audit.hgl";
pub const HEAD_FILE: &str = "audit.head";
pub const GENESIS_PREV: [u8; 32] = [0u8; 32];

/// Largest record frame accepted when reading a log back.
const MAX_FRAME: u32 = 8 + 8 + 1 + 2 + u16::MAX as u32 + 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum AuditCategory {
    Enroll = 0,
    Decide = 1,
    Revoke = 2,
    Quarantine = 3,
    Release = 4,
    Zone = 5,
    Policy = 6,
    Export = 7,
    Config = 8,
}

impl AuditCategory {
    pub const ALL: [AuditCategory; 9] = [
        Self::Enroll,
        Self::Decide,
        Self::Revoke,
        Self::Quarantine,
        Self::Release,
        Self::Zone,
        Self::Policy,
        Self::Export,
        Self::Config,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Enroll => "ENROLL",
            Self::Decide => "DECIDE",
            Self::Revoke => "REVOKE",
            Self::Quarantine => "QUARANTINE",
            Self::Release => "RELEASE",
            Self::Zone => "ZONE",
            Self::Policy => "POLICY",
            Self::Export => "EXPORT",
            Self::Config => "CONFIG",
        }
    }
}

impl fmt::Display for AuditCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn record_hash(
    prev_hash: &[u8; 32],
    index: u64,
    at: u64,
    category: AuditCategory,
    body: &[u8],
) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev_hash);
    h.update(index.to_be_bytes());
    h.update(at.to_be_bytes());
    h.update([category as u8]);
    h.update(body);
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditRecord {
    pub index: u64,
    pub at: u64,
    pub category: AuditCategory,
    #[serde(with = "hex_bytes")]
    pub body: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub prev_hash: [u8; 32],
    #[serde(with = "hex_bytes")]
    pub record_hash: [u8; 32],
}

mod hex_bytes {
    pub fn serialize<S: serde::Serializer, T: AsRef<[u8]>>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }
}

impl AuditRecord {
    /// Canonical bytes: `index | at | category | u16 len body | prev | hash`.
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(8 + 8 + 1 + 2 + self.body.len() + 64);
        w.u64(self.index)
            .u64(self.at)
            .u8(self.category as u8)
            .bytes(&self.body)
            .raw(&self.prev_hash)
            .raw(&self.record_hash);
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(buf);
        let index = r.u64()?;
        let at = r.u64()?;
        let raw = r.u8()?;
        let category = AuditCategory::from_u8(raw).ok_or(CodecError::InvalidValue {
            field: "category",
            value: raw.into(),
        })?;
        let body = r.bytes()?.to_vec();
        let prev_hash = r.array()?;
        let record_hash = r.array()?;
        r.finish()?;
        Ok(Self {
            index,
            at,
            category,
            body,
            prev_hash,
            record_hash,
        })
    }

    pub fn recompute_hash(&self) -> [u8; 32] {
        record_hash(&self.prev_hash, self.index, self.at, self.category, &self.body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChainStatus {
    Ok { n: u64 },
    Broken { index: u64 },
}

impl ChainStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainStatus::Ok { .. })
    }
}

impl fmt::Display for ChainStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChainStatus::Ok { n } => write!(f, "OK n={n}"),
            ChainStatus::Broken { index } => write!(f, "BROKEN index={index}"),
        }
    }
}

/// Checks every record's index, link, and hash, then the head pointer.
/// A missing head counts as the genesis value, so only an empty log
/// verifies without one.
pub fn verify_records(records: &[AuditRecord], head: Option<&[u8; 32]>) -> ChainStatus {
    let mut prev = GENESIS_PREV;
    for (i, rec) in records.iter().enumerate() {
        let i = i as u64;
        if rec.index != i || rec.prev_hash != prev || rec.recompute_hash() != rec.record_hash {
            return ChainStatus::Broken { index: i };
        }
        prev = rec.record_hash;
    }
    let n = records.len() as u64;
    if *head.unwrap_or(&GENESIS_PREV) == prev {
        ChainStatus::Ok { n }
    } else {
        ChainStatus::Broken { index: n }
    }
}

/// Splits an `audit.hgl` image into frames. Returns the decoded records, the
/// byte offset after the last whole frame, and whether a frame that was
/// fully present failed to decode.
fn split_frames(log: &[u8]) -> (Vec<AuditRecord>, usize, bool) {
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < log.len() {
        let Some(len_bytes) = log.get(pos..pos + 4) else {
            return (out, pos, false);
        };
        let len = u32::from_be_bytes(len_bytes.try_into().expect("4 bytes"));
        if len > MAX_FRAME {
            return (out, pos, true);
        }
        let Some(frame) = log.get(pos + 4..pos + 4 + len as usize) else {
            return (out, pos, false);
        };
        match AuditRecord::decode(frame) {
            Ok(rec) => out.push(rec),
            Err(_) => return (out, pos, true),
        }
        pos += 4 + len as usize;
    }
    (out, pos, false)
}

/// Verifies raw file contents. Any undecodable or partial frame is reported
/// as broken at its position in the chain.
pub fn verify_log_bytes(log: &[u8], head: Option<&[u8]>) -> ChainStatus {
    let (records, end, _) = split_frames(log);
    if end != log.len() {
        let status = verify_records(&records, records.last().map(|r| &r.record_hash));
        return match status {
            ChainStatus::Ok { n } => ChainStatus::Broken { index: n },
            broken => broken,
        };
    }
    let head = match head {
        None => None,
        Some(h) => match <&[u8; 32]>::try_from(h) {
            Ok(h) => Some(h),
            // A malformed head slot can't vouch for anything.
            Err(_) => {
                return match verify_records(&records, records.last().map(|r| &r.record_hash)) {
                    ChainStatus::Ok { n } => ChainStatus::Broken { index: n },
                    broken => broken,
                }
            }
        },
    };
    verify_records(&records, head)
}

/// Verifies the log files in `dir` without opening them for writing.
pub fn verify_dir(dir: &Path) -> io::Result<ChainStatus> {
    let log = match fs::read(dir.join(LOG_FILE)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e),
    };
    let head = match fs::read(dir.join(HEAD_FILE)) {
        Ok(b) => Some(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e),
    };
    Ok(verify_log_bytes(&log, head.as_deref()))
}

/// Durable sink for audit records. `append` must not return until the record
/// and the new head are persisted.
pub trait AuditBackend: Send {
    fn append(&mut self, frame: &[u8], head: &[u8; 32]) -> io::Result<()>;
}

#[derive(Debug, Default)]
pub struct MemoryBackend;

impl AuditBackend for MemoryBackend {
    fn append(&mut self, _frame: &[u8], _head: &[u8; 32]) -> io::Result<()> {
        Ok(())
    }
}

/// Wraps another backend and fails every append while the switch is on.
/// Used to exercise the storage-failure path.
#[derive(Clone, Default)]
pub struct FaultSwitch(Arc<AtomicBool>);

impl FaultSwitch {
    pub fn set(&self, failing: bool) {
        self.0.store(failing, Ordering::SeqCst);
    }

    pub fn wrap(&self, inner: Box<dyn AuditBackend>) -> Box<dyn AuditBackend> {
        Box::new(Faulty {
            switch: self.clone(),
            inner: Mutex::new(inner),
        })
    }
}

struct Faulty {
    switch: FaultSwitch,
    inner: Mutex<Box<dyn AuditBackend>>,
}

impl AuditBackend for Faulty {
    fn append(&mut self, frame: &[u8], head: &[u8; 32]) -> io::Result<()> {
        if self.switch.0.load(Ordering::SeqCst) {
            return Err(io::Error::other("injected storage failure"));
        }
        self.inner
            .get_mut()
            .map_err(|_| io::Error::other("poisoned"))?
            .append(frame, head)
    }
}

#[derive(Debug)]
pub struct FileBackend {
    log: File,
    head_path: PathBuf,
}

impl AuditBackend for FileBackend {
    fn append(&mut self, frame: &[u8], head: &[u8; 32]) -> io::Result<()> {
        self.log.write_all(frame)?;
        self.log.sync_data()?;
        write_atomic(&self.head_path, head)
    }
}

pub struct AuditLog {
    records: Vec<AuditRecord>,
    backend: Box<dyn AuditBackend>,
}

impl fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AuditLog")
            .field("len", &self.records.len())
            .finish_non_exhaustive()
    }
}

impl Default for AuditLog {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::with_backend(Vec::new(), Box::new(MemoryBackend))
    }

    pub fn with_backend(records: Vec<AuditRecord>, backend: Box<dyn AuditBackend>) -> Self {
        Self { records, backend }
    }

    /// Opens (or creates) the log in `dir`, repairing the two states a crash
    /// can leave behind: a partially written final frame, and a head slot
    /// one record behind the log. Anything else that fails verification is
    /// reported as corruption.
    pub fn open_dir(dir: &Path) -> Result<Self, StoreError> {
        let log_path = dir.join(LOG_FILE);
        let head_path = dir.join(HEAD_FILE);
        let bytes = match fs::read(&log_path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let (records, end, bad_frame) = split_frames(&bytes);
        if bad_frame {
            return Err(StoreError::Corrupt {
                index: records.len() as u64,
            });
        }
        let head = match fs::read(&head_path) {
            Ok(b) => Some(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let n = records.len();
        let lagging = match &head {
            None => n == 1,
            Some(h) if n == 1 => h[..] == GENESIS_PREV[..],
            Some(h) => n >= 2 && h[..] == records[n - 2].record_hash[..],
        };
        let head_ref = if lagging {
            Some(&records[n - 1].record_hash)
        } else {
            match &head {
                None => None,
                Some(h) => Some(<&[u8; 32]>::try_from(&h[..]).map_err(|_| {
                    StoreError::Corrupt { index: n as u64 }
                })?),
            }
        };
        // Nothing on disk is touched until the surviving prefix checks out.
        if let ChainStatus::Broken { index } = verify_records(&records, head_ref) {
            return Err(StoreError::Corrupt { index });
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        if end != bytes.len() {
            log.set_len(end as u64)?;
            log.sync_all()?;
        }
        if lagging {
            write_atomic(&head_path, &records[n - 1].record_hash)?;
        }
        Ok(Self::with_backend(
            records,
            Box::new(FileBackend { log, head_path }),
        ))
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn head(&self) -> [u8; 32] {
        self.records.last().map_or(GENESIS_PREV, |r| r.record_hash)
    }

    /// Appends and persists one record. On failure nothing is appended and
    /// the caller must abandon the operation it was auditing.
    pub fn append(
        &mut self,
        category: AuditCategory,
        body: &[u8],
        now_ms: u64,
    ) -> Result<&AuditRecord, StoreError> {
        if body.len() > u16::MAX as usize {
            return Err(StoreError::BodyTooLarge(body.len()));
        }
        let prev_hash = self.head();
        let index = self.records.len() as u64;
        let rec = AuditRecord {
            index,
            at: now_ms,
            category,
            body: body.to_vec(),
            prev_hash,
            record_hash: record_hash(&prev_hash, index, now_ms, category, body),
        };
        let enc = rec.encode();
        let mut frame = Vec::with_capacity(4 + enc.len());
        frame.extend_from_slice(&(enc.len() as u32).to_be_bytes());
        frame.extend_from_slice(&enc);
        self.backend
            .append(&frame, &rec.record_hash)
            .map_err(|e| StoreError::StorageFailure(e.to_string()))?;
        self.records.push(rec);
        Ok(self.records.last().expect("just pushed"))
    }

    pub fn verify(&self) -> ChainStatus {
        verify_records(&self.records, Some(&self.head()))
    }
}

/// Serializes records into the `audit.hgl` frame layout.
pub fn encode_log(records: &[AuditRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let enc = r.encode();
        out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
        out.extend_from_slice(&enc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen from tests/vectors/gen_vectors.py (hashlib.sha256).
    const RECORD0_HASH: &str = "8fc7ec907f796aee51897af3bdffe382142d8e7008e7a5434d26dd25ae7c1ed1";

    #[test]
    fn reference_hash() {
        let h = record_hash(&GENESIS_PREV, 0, 1_700_000_000_000, AuditCategory::Enroll, b"hello");
        assert_eq!(hex::encode(h), RECORD0_HASH);
    }

    #[test]
    fn genesis_and_links() {
        let mut log = AuditLog::in_memory();
        let r0 = log.append(AuditCategory::Config, b"a", 1).unwrap().clone();
        let r1 = log.append(AuditCategory::Zone, b"b", 2).unwrap().clone();
        assert_eq!((r0.index, r0.prev_hash), (0, GENESIS_PREV));
        assert_eq!(r1.prev_hash, r0.record_hash);
        assert_eq!(log.verify(), ChainStatus::Ok { n: 2 });
    }

    #[test]
    fn record_codec_round_trip() {
        let mut log = AuditLog::in_memory();
        log.append(AuditCategory::Export, &[9; 40], 5).unwrap();
        let r = &log.records()[0];
        assert_eq!(&AuditRecord::decode(&r.encode()).unwrap(), r);
    }

    #[test]
    fn failing_backend_leaves_log_unchanged() {
        let sw = FaultSwitch::default();
        let mut log = AuditLog::with_backend(Vec::new(), sw.wrap(Box::new(MemoryBackend)));
        log.append(AuditCategory::Config, b"x", 1).unwrap();
        sw.set(true);
        assert!(matches!(
            log.append(AuditCategory::Config, b"y", 2),
            Err(StoreError::StorageFailure(_))
        ));
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn empty_log_verifies() {
        assert_eq!(verify_log_bytes(&[], None), ChainStatus::Ok { n: 0 });
        assert_eq!(verify_log_bytes(&[], Some(&GENESIS_PREV)), ChainStatus::Ok { n: 0 });
        assert_eq!(verify_log_bytes(&[], Some(&[1; 32])), ChainStatus::Broken { index: 0 });
    }

    #[test]
    fn file_log_repairs_torn_tail_and_lagging_head() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut log = AuditLog::open_dir(dir.path()).unwrap();
            for i in 0..3u64 {
                log.append(AuditCategory::Config, &i.to_be_bytes(), i).unwrap();
            }
        }
        let status = verify_dir(dir.path()).unwrap();
        assert_eq!(status, ChainStatus::Ok { n: 3 });

        // torn trailing frame
        let path = dir.path().join(LOG_FILE);
        let mut bytes = fs::read(&path).unwrap();
        let full = bytes.len();
        bytes.extend_from_slice(&[0, 0, 0, 90, 1, 2]);
        fs::write(&path, &bytes).unwrap();
        assert_eq!(verify_dir(dir.path()).unwrap(), ChainStatus::Broken { index: 3 });
        let log = AuditLog::open_dir(dir.path()).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, full);

        // head one record behind
        let prev = log.records()[1].record_hash;
        drop(log);
        fs::write(dir.path().join(HEAD_FILE), prev).unwrap();
        assert_eq!(verify_dir(dir.path()).unwrap(), ChainStatus::Broken { index: 3 });
        AuditLog::open_dir(dir.path()).unwrap();
        assert_eq!(verify_dir(dir.path()).unwrap(), ChainStatus::Ok { n: 3 });
    }
}
