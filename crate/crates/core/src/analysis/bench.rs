//! Dense-vs-sparse wall-clock sweep.

use std::io::Write;
use std::time::Instant;

use crate::analysis::fmt_sig;
use crate::analysis::synth::random_inputs;
use crate::dense::{dense_attention, AttentionInputs};
use crate::error::{Error, Result};
use crate::layout::{BlockGeometry, TokenLayout, DEFAULT_BLOCK_K, DEFAULT_BLOCK_Q};
use crate::mask::{predict_mask, BlockMask, MaskPolicy};
use crate::sparse::{flop_estimate, sparse_attention, SparseAttentionJob};

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub tau: f64,
    pub rho: f64,
    pub block_q: usize,
    pub block_k: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub threads: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![4096, 8192, 16384, 32768],
            tau: 0.4,
            rho: 0.8,
            block_q: DEFAULT_BLOCK_Q,
            block_k: DEFAULT_BLOCK_K,
            heads: 1,
            head_dim: 64,
            repeats: 5,
            seed: 0,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub tokens: usize,
    pub dense_ms: f64,
    pub sparse_ms: f64,
    pub achieved_sparsity: f64,
    pub speedup: f64,
    pub theoretical_speedup: f64,
}

/// Median wall time of `repeats` runs after one untimed warm-up.
pub fn median_ms<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    Ok(if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    })
}

/// Times the dense streaming path and the sparse kernel on the same inputs.
pub fn bench_case(
    inputs: &AttentionInputs,
    layout: &TokenLayout,
    mask: &BlockMask,
    repeats: usize,
) -> Result<BenchRow> {
    let job = SparseAttentionJob::new(inputs, *layout, mask)?;
    let dense_ms = median_ms(repeats, || dense_attention(inputs))?;
    let sparse_ms = median_ms(repeats, || sparse_attention(&job))?;
    Ok(BenchRow {
        tokens: inputs.tokens(),
        dense_ms,
        sparse_ms,
        achieved_sparsity: mask.achieved_sparsity(),
        speedup: dense_ms / sparse_ms,
        theoretical_speedup: flop_estimate(&job).theoretical_speedup,
    })
}

pub fn bench_sweep(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats < 3 {
        return Err(Error::InvalidArgument("repeats must be at least 3".into()));
    }
    if cfg.sizes.is_empty() || cfg.sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument(
            "sizes must be non-empty and ascending".into(),
        ));
    }
    let run = || -> Result<Vec<BenchRow>> {
        cfg.sizes
            .iter()
            .map(|&n| {
                let layout = TokenLayout::new(1, n, 0, None)?;
                let inputs = random_inputs(cfg.heads, n, cfg.head_dim, cfg.seed ^ n as u64);
                let geom = BlockGeometry::for_layout(&layout, cfg.block_q, cfg.block_k)?;
                let policy = MaskPolicy::new(cfg.tau, cfg.rho, geom)?;
                let mask = predict_mask(&inputs, &layout, &policy)?;
                bench_case(&inputs, &layout, &mask, cfg.repeats)
            })
            .collect()
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["N", "dense_ms", "sparse_ms", "achieved_sparsity", "speedup"])?;
    for r in rows {
        w.write_record([
            r.tokens.to_string(),
            fmt_sig(r.dense_ms),
            fmt_sig(r.sparse_ms),
            fmt_sig(r.achieved_sparsity),
            fmt_sig(r.speedup),
        ])?;
    }
    w.flush()?;
    Ok(())
}
