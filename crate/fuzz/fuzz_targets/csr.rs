#![no_main]

use homegate_core::pki::CertSigningRequest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = CertSigningRequest::decode(data) {
        let _ = c.verify_proof();
        assert_eq!(CertSigningRequest::decode(&c.encode()).unwrap(), c);
    }
});
