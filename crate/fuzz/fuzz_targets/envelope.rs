#![no_main]

use homegate_core::relay::{decode_envelope, peek_header, HOP_OFFSET};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let header = peek_header(data);
    if let Ok(d) = decode_envelope(data, |_| Some(([0u8; 32], 0))) {
        let h = header.expect("decodable envelope has a header");
        assert_eq!((h.device_id, h.seq), (d.device_id, d.seq));
        assert_eq!(data[HOP_OFFSET], d.hop_count);
    }
});
