use homegate_core::store::audit::{encode_log, verify_log_bytes, verify_records, HEAD_FILE, LOG_FILE};
use homegate_core::store::{verify_dir, AuditCategory, AuditLog, AuditRecord, ChainStatus};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn chain(n: usize, seed: u64) -> Vec<AuditRecord> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut log = AuditLog::in_memory();
    for i in 0..n {
        let cat = AuditCategory::ALL[rng.gen_range(0..AuditCategory::ALL.len())];
        let len = rng.gen_range(0..40);
        let body: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        log.append(cat, &body, 1_700_000_000_000 + i as u64 * 1000).unwrap();
    }
    log.records().to_vec()
}

/// Byte range of each record's frame inside the encoded log.
fn frame_spans(records: &[AuditRecord]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut pos = 0;
    for r in records {
        let len = 4 + r.encode().len();
        spans.push((pos, pos + len));
        pos += len;
    }
    spans
}

#[test]
fn every_byte_mutation_reports_its_record() {
    let recs = chain(100, 1);
    let log = encode_log(&recs);
    let head = recs.last().unwrap().record_hash;
    assert_eq!(verify_log_bytes(&log, Some(&head)), ChainStatus::Ok { n: 100 });
    let spans = frame_spans(&recs);
    for (i, &(lo, hi)) in spans.iter().enumerate() {
        for pos in lo..hi {
            for delta in [0x01u8, 0x80, 0xff] {
                let mut m = log.clone();
                m[pos] ^= delta;
                assert_eq!(
                    verify_log_bytes(&m, Some(&head)),
                    ChainStatus::Broken { index: i as u64 },
                    "record {i} byte {} delta {delta:#x}",
                    pos - lo
                );
            }
        }
    }
}

#[test]
fn every_field_mutation_reports_its_record() {
    let recs = chain(100, 2);
    let head = recs.last().unwrap().record_hash;
    for i in 0..recs.len() {
        let mutations: [fn(&mut AuditRecord); 6] = [
            |r| r.index ^= 1,
            |r| r.at += 1,
            |r| r.category = if r.category == AuditCategory::Export { AuditCategory::Config } else { AuditCategory::Export },
            |r| r.body.push(0),
            |r| r.prev_hash[0] ^= 1,
            |r| r.record_hash[31] ^= 1,
        ];
        for f in mutations {
            let mut m = recs.clone();
            f(&mut m[i]);
            assert_eq!(verify_records(&m, Some(&head)), ChainStatus::Broken { index: i as u64 });
        }
    }
}

#[test]
fn truncation_detected_by_head() {
    let recs = chain(100, 3);
    let log = encode_log(&recs);
    let head = recs.last().unwrap().record_hash;
    let spans = frame_spans(&recs);
    for (k, &(lo, _)) in spans.iter().enumerate() {
        // Whole records dropped from the tail.
        assert_eq!(verify_log_bytes(&log[..lo], Some(&head)), ChainStatus::Broken { index: k as u64 });
        // A torn frame in the middle of record k.
        assert_eq!(verify_log_bytes(&log[..lo + 7], Some(&head)), ChainStatus::Broken { index: k as u64 });
    }
    // A missing head is only acceptable for an empty log.
    assert_eq!(verify_log_bytes(&log, None), ChainStatus::Broken { index: 100 });
    assert_eq!(verify_log_bytes(&[], None), ChainStatus::Ok { n: 0 });
}

#[test]
fn files_on_disk_verify_and_detect_tamper() {
    let tmp = tempfile::tempdir().unwrap();
    let mut log = AuditLog::open_dir(tmp.path()).unwrap();
    for i in 0..100u64 {
        log.append(AuditCategory::Config, &i.to_be_bytes(), 1000 + i).unwrap();
    }
    drop(log);
    assert_eq!(verify_dir(tmp.path()).unwrap(), ChainStatus::Ok { n: 100 });
    assert_eq!(verify_dir(tmp.path()).unwrap().to_string(), "OK n=100");

    let path = tmp.path().join(LOG_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let spans = frame_spans(AuditLog::open_dir(tmp.path()).unwrap().records());
    bytes[spans[42].0 + 20] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    assert_eq!(verify_dir(tmp.path()).unwrap().to_string(), "BROKEN index=42");
    assert!(AuditLog::open_dir(tmp.path()).is_err());

    std::fs::remove_file(tmp.path().join(HEAD_FILE)).unwrap();
    assert!(!verify_dir(tmp.path()).unwrap().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_chains_verify(n in 0..60usize, seed: u64) {
        let recs = chain(n, seed);
        let head = recs.last().map(|r| r.record_hash);
        prop_assert_eq!(verify_records(&recs, head.as_ref()), ChainStatus::Ok { n: n as u64 });
        let log = encode_log(&recs);
        prop_assert_eq!(verify_log_bytes(&log, head.as_ref().map(|h| &h[..])), ChainStatus::Ok { n: n as u64 });
        for r in &recs {
            prop_assert_eq!(&AuditRecord::decode(&r.encode()).unwrap(), r);
        }
    }
}
