#![no_main]
use libfuzzer_sys::fuzz_target;
use sbrk_core::shmq::{HandshakeRecord, Hello};

fuzz_target!(|data: &[u8]| {
    if let Ok(h) = Hello::decode(data) {
        assert_eq!(Hello::decode(&h.encode()).unwrap(), h);
    }
    if let Ok(r) = HandshakeRecord::decode(data) {
        let again = r.encode().expect("decoded record re-encodes");
        assert_eq!(HandshakeRecord::decode(&again).unwrap(), r);
    }
});
