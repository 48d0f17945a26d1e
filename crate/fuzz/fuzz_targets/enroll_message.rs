#![no_main]

use homegate_core::enrollment::EnrollMessage;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = EnrollMessage::decode(data) {
        assert_eq!(EnrollMessage::decode(&m.encode()).unwrap(), m);
    }
});
