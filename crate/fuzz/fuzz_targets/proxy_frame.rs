#![no_main]
use libfuzzer_sys::fuzz_target;
use sbrk_core::proxy::{self, FRAME_HEADER_LEN};

fuzz_target!(|data: &[u8]| {
    if let Ok(p) = proxy::decode_params(data) {
        assert_eq!(proxy::decode_params(&proxy::encode_params(&p)).unwrap(), p);
    }
    let Some((h, body)) = data.split_first_chunk::<FRAME_HEADER_LEN>() else { return };
    let Ok((count, len)) = proxy::decode_frame_header(h) else { return };
    let Some(body) = body.get(..len) else { return };
    if let Ok(entries) = proxy::decode_frame_body(count, body, 4096) {
        assert_eq!(entries.len(), count as usize);
        let mut out = Vec::new();
        proxy::encode_frame(entries.iter().copied(), &mut out);
        assert_eq!(&out[..FRAME_HEADER_LEN], &h[..]);
        assert_eq!(&out[FRAME_HEADER_LEN..], body);
    }
});
