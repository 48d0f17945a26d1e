//! Durable state: the hash-chained audit log, the readings table, and
//! encrypted export bundles.

use std::io;

use thiserror::Error;

pub mod audit;
pub mod export;
pub mod readings;

pub use audit::{
    verify_dir, verify_log_bytes, verify_records, AuditCategory, AuditLog, AuditRecord,
    ChainStatus,
};
pub use export::{open_bundle, seal_bundle, BundleError, BundleHeader, EncryptedBundle};
pub use readings::{Aggregate, Query, ReadingStore, SeriesPoint, StoredReading};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("storage failure: {0}")]
    StorageFailure(String),
    #[error("stored log is corrupt at record {index}")]
    Corrupt { index: u64 },
    #[error("audit body of {0} bytes exceeds the record limit")]
    BodyTooLarge(usize),
    #[error("invalid range")]
    BadRange,
    #[error("unknown aggregate {0:?}")]
    BadAggregate(String),
    #[error("recipient key is not usable")]
    BadRecipient,
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::StorageFailure(e.to_string())
    }
}
