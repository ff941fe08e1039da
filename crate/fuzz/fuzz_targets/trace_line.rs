#![no_main]
use libfuzzer_sys::fuzz_target;
use sbrk_core::trace;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for (i, line) in text.lines().enumerate() {
        let _ = trace::parse_line(line, i + 1);
    }
    if let Ok(once) = trace::canonicalize(text, true) {
        assert_eq!(trace::canonicalize(&once, true).unwrap(), once);
    }
});
