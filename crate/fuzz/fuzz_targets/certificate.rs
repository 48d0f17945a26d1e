#![no_main]

use homegate_core::pki::Certificate;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = Certificate::decode(data) {
        assert_eq!(Certificate::decode(&c.encode()).unwrap(), c);
    }
});
