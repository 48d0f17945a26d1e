#![no_main]

use homegate_core::relay::Reading;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(r) = Reading::decode(data) {
        // Compare bytes rather than values so NaN payloads round-trip too.
        if let Ok(once) = r.encode() {
            let twice = Reading::decode(&once).unwrap().encode().unwrap();
            assert_eq!(once, twice);
        }
    }
});
