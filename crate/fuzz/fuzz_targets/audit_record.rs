#![no_main]

use homegate_core::store::AuditRecord;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = AuditRecord::decode(data) {
        let _ = r.recompute_hash();
        assert_eq!(AuditRecord::decode(&r.encode()).unwrap(), r);
    }
});
