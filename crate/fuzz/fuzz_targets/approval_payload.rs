#![no_main]

use homegate_core::enrollment::ApprovalPayload;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = ApprovalPayload::decode(data) {
        assert_eq!(ApprovalPayload::decode(&p.encode()).unwrap(), p);
    }
});
