#![no_main]
use libfuzzer_sys::fuzz_target;
use sbrk_core::proto;

fuzz_target!(|data: &[u8]| {
    let Ok(msg) = proto::decode(data) else { return };
    // Anything that decodes must re-encode into a slot of the same size.
    let slot = proto::encode(&msg, data.len()).expect("decoded message re-encodes");
    assert_eq!(proto::decode(&slot).unwrap(), msg);
    if let Some((&ty, body)) = data.split_last() {
        let _ = proto::decode_parts(ty & proto::TYPE_MASK, body);
    }
});
