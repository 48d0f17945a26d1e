#![no_main]

use homegate_core::store::verify_log_bytes;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // First 32 bytes double as a head hash when present.
    let _ = verify_log_bytes(data, None);
    if data.len() >= 32 {
        let _ = verify_log_bytes(&data[32..], Some(&data[..32]));
    }
});
