#![no_main]

use bsa_core::analysis::layerdrop::join_metrics;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut out = Vec::new();
    let _ = join_metrics(24, data, &mut out);
});
