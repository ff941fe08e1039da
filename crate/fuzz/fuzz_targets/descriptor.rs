#![no_main]
use libfuzzer_sys::fuzz_target;
use sbrk_core::nic::Descriptor;

fuzz_target!(|data: &[u8]| {
    if let Some(d) = Descriptor::decode(data) {
        assert_eq!(Descriptor::decode(&d.encode()), Some(d));
    }
});
