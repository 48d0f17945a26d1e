#![no_main]

use homegate_core::segmentation::AddrBlock;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(b) = text.parse::<AddrBlock>() {
        assert_eq!(b.to_string().parse::<AddrBlock>().unwrap(), b);
    }
});
