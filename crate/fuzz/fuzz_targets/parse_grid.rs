#![no_main]

use bsa_core::layout::parse_grid;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok((r, c)) = parse_grid(s) {
            assert!(r > 0 && c > 0);
        }
    }
});
