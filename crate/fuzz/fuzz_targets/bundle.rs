#![no_main]

use homegate_core::store::open_bundle;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = open_bundle(data, &[0x33; 32]);
});
