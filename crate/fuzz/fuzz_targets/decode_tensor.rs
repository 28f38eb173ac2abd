#![no_main]

use bsa_core::format::{decode_tensor, encode_tensor};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data) {
        // anything accepted must re-encode to the same bytes
        assert_eq!(encode_tensor(&t), data);
    }
});
