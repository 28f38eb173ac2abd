//! Replays the checked-in fuzz seeds through the same invariants the fuzz
//! targets assert, so the corpus is exercised on stable toolchains too.

use std::fs;
use std::path::PathBuf;

use bsa_core::analysis::layerdrop::join_metrics;
use bsa_core::format::{decode_mask, decode_tensor, encode_mask, encode_tensor};
use bsa_core::layout::parse_grid;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn tensor_seeds() {
    let mut accepted = Vec::new();
    for (name, bytes) in seeds("decode_tensor") {
        if let Ok(t) = decode_tensor(&bytes) {
            assert_eq!(encode_tensor(&t), bytes, "{name}");
            accepted.push(name);
        }
    }
    assert_eq!(accepted, ["heads_2x2x2", "matrix_2x3", "scalar_row"]);
}

#[test]
fn mask_seeds() {
    let mut accepted = Vec::new();
    for (name, bytes) in seeds("decode_mask") {
        if let Ok(m) = decode_mask(&bytes) {
            assert_eq!(encode_mask(&m), bytes, "{name}");
            accepted.push(name);
        }
    }
    assert_eq!(accepted, ["ragged_2x3", "single_tile", "two_heads_10_keys"]);
}

#[test]
fn grid_seeds() {
    let mut accepted = Vec::new();
    for (name, bytes) in seeds("parse_grid") {
        if let Ok((r, c)) = parse_grid(std::str::from_utf8(&bytes).unwrap()) {
            assert!(r > 0 && c > 0);
            accepted.push(name);
        }
    }
    assert_eq!(accepted, ["spaces", "square", "upper"]);
}

#[test]
fn join_metrics_seeds() {
    let mut accepted = Vec::new();
    for (name, bytes) in seeds("join_metrics") {
        let mut out = Vec::new();
        if join_metrics(24, bytes.as_slice(), &mut out).is_ok() {
            accepted.push(name);
        }
    }
    assert_eq!(accepted, ["aliases.csv", "basic.csv"]);
}
