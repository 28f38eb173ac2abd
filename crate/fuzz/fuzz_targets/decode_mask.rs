#![no_main]

use bsa_core::format::{decode_mask, encode_mask};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_mask(data) {
        assert_eq!(encode_mask(&m), data);
    }
});
