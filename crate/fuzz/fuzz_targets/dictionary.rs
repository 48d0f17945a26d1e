#![no_main]

use homegate_core::ids::parse_dictionary;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_dictionary(text) {
            assert!(entries.iter().all(|e| !e.service.is_empty() && !e.username.is_empty()));
        }
    }
});
