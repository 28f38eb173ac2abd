//! Training-free block-mask prediction.
//!
//! Patch-token queries and keys are average-pooled over token blocks, the
//! pooled similarities are softmax-normalized into per-row distributions over
//! key blocks, and each query-block row keeps the shortest top-ranked prefix
//! that reaches the CDF threshold `tau`, extended to at least
//! `floor(nk_blocks · (1 − rho))` blocks.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::dense::AttentionInputs;
use crate::error::{Error, Result};
use crate::layout::{BlockGeometry, TokenLayout};
use crate::tensor::{softmax_in_place, Tensor};

/// Block-selection parameters: CDF threshold `tau`, sparse ratio `rho`, and
/// the block tiling they apply to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    tau: f64,
    rho: f64,
    geometry: BlockGeometry,
}

impl MaskPolicy {
    pub fn new(tau: f64, rho: f64, geometry: BlockGeometry) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Policy(format!("tau = {tau} is outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Policy(format!("rho = {rho} is outside [0, 1]")));
        }
        Ok(Self { tau, rho, geometry })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn geometry(&self) -> &BlockGeometry {
        &self.geometry
    }

    /// `floor(nk_blocks · (1 − rho))`, the ratio-driven minimum per row.
    pub fn min_blocks(&self) -> usize {
        min_blocks(self.geometry.nk_blocks, self.rho)
    }
}

pub fn min_blocks(nk_blocks: usize, rho: f64) -> usize {
    // The epsilon absorbs representation error such as 10 · (1 − 0.9) = 0.999…
    ((nk_blocks as f64 * (1.0 - rho)) + 1e-9).floor() as usize
}

/// Per-head, per-query-block bitset over key blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    heads: usize,
    geometry: BlockGeometry,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BlockMask {
    pub fn empty(heads: usize, geometry: BlockGeometry) -> Self {
        let words_per_row = geometry.nk_blocks.div_ceil(64);
        Self {
            heads,
            geometry,
            words_per_row,
            bits: vec![0; heads * geometry.nq_blocks * words_per_row],
        }
    }

    pub fn full(heads: usize, geometry: BlockGeometry) -> Self {
        let mut m = Self::empty(heads, geometry);
        for h in 0..heads {
            for qb in 0..geometry.nq_blocks {
                for kb in 0..geometry.nk_blocks {
                    m.set(h, qb, kb, true);
                }
            }
        }
        m
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn geometry(&self) -> &BlockGeometry {
        &self.geometry
    }

    fn row_words(&self, head: usize, qb: usize) -> &[u64] {
        let start = (head * self.geometry.nq_blocks + qb) * self.words_per_row;
        &self.bits[start..start + self.words_per_row]
    }

    pub fn get(&self, head: usize, qb: usize, kb: usize) -> bool {
        assert!(kb < self.geometry.nk_blocks);
        self.row_words(head, qb)[kb / 64] >> (kb % 64) & 1 == 1
    }

    pub fn set(&mut self, head: usize, qb: usize, kb: usize, on: bool) {
        assert!(head < self.heads && qb < self.geometry.nq_blocks && kb < self.geometry.nk_blocks);
        let word = (head * self.geometry.nq_blocks + qb) * self.words_per_row + kb / 64;
        if on {
            self.bits[word] |= 1 << (kb % 64);
        } else {
            self.bits[word] &= !(1 << (kb % 64));
        }
    }

    /// Selected key blocks of one row, ascending.
    pub fn selected(&self, head: usize, qb: usize) -> impl Iterator<Item = usize> + '_ {
        self.row_words(head, qb)
            .iter()
            .enumerate()
            .flat_map(|(w, &word)| {
                let mut rest = word;
                std::iter::from_fn(move || {
                    (rest != 0).then(|| {
                        let bit = rest.trailing_zeros() as usize;
                        rest &= rest - 1;
                        w * 64 + bit
                    })
                })
            })
    }

    pub fn row_count(&self, head: usize, qb: usize) -> usize {
        self.row_words(head, qb)
            .iter()
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    /// Token-pair area covered by the selected tiles of one head.
    pub fn selected_area(&self, head: usize) -> u64 {
        (0..self.geometry.nq_blocks)
            .map(|qb| {
                self.selected(head, qb)
                    .map(|kb| self.geometry.tile_area(qb, kb))
                    .sum::<u64>()
            })
            .sum()
    }

    /// Fraction of the patch-patch area of `head` that is skipped.
    pub fn head_sparsity(&self, head: usize) -> f64 {
        1.0 - self.selected_area(head) as f64 / self.geometry.total_area() as f64
    }

    /// Skipped fraction of the patch-patch area, over all heads.
    pub fn achieved_sparsity(&self) -> f64 {
        let selected: u64 = (0..self.heads).map(|h| self.selected_area(h)).sum();
        1.0 - selected as f64 / (self.geometry.total_area() as f64 * self.heads as f64)
    }

    /// First row with no selected block, if any.
    pub fn first_empty_row(&self) -> Option<(usize, usize)> {
        (0..self.heads)
            .flat_map(|h| (0..self.geometry.nq_blocks).map(move |qb| (h, qb)))
            .find(|&(h, qb)| self.row_count(h, qb) == 0)
    }
}

/// Average-pools rows of `[H × Np × d]` over consecutive blocks of `block`
/// tokens. A ragged tail block averages over its actual length.
pub fn block_pool(x: &Tensor, block: usize) -> Result<Tensor> {
    if block == 0 {
        return Err(Error::InvalidArgument("pooling block size is zero".into()));
    }
    let &[h, n, d] = x.shape() else {
        return Err(Error::Shape {
            op: "block_pool",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    };
    let nb = n.div_ceil(block);
    let mut out = Vec::with_capacity(h * nb * d);
    let mut sum = vec![0.0f64; d];
    for head in x.data().chunks_exact(n * d) {
        for rows in head.chunks(block * d) {
            sum.iter_mut().for_each(|s| *s = 0.0);
            for row in rows.chunks_exact(d) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
            }
            let len = (rows.len() / d) as f64;
            out.extend(sum.iter().map(|&s| (s / len) as f32));
        }
    }
    Tensor::new(vec![h, nb, d], out)
}

/// Per-head block probabilities, `[H × nq_blocks × nk_blocks]`, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledScores {
    probs: Tensor,
}

impl PooledScores {
    /// Wraps precomputed probabilities. Rows must be finite and non-negative.
    pub fn from_probabilities(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 3 {
            return Err(Error::Shape {
                op: "pooled scores",
                lhs: probs.shape().to_vec(),
                rhs: vec![],
            });
        }
        if probs.data().iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(
                "probabilities must be finite and >= 0".into(),
            ));
        }
        Ok(Self { probs })
    }

    pub fn heads(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn nq_blocks(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn nk_blocks(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn row(&self, head: usize, qb: usize) -> &[f32] {
        let nk = self.nk_blocks();
        let start = (head * self.nq_blocks() + qb) * nk;
        &self.probs.data()[start..start + nk]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }
}

/// `softmax(Qp Kpᵀ / √d_h)` per head for pooled `[H × nq × d]` and `[H × nk × d]`.
pub fn pooled_scores(qp: &Tensor, kp: &Tensor) -> Result<PooledScores> {
    let shape_err = || Error::Shape {
        op: "pooled_scores",
        lhs: qp.shape().to_vec(),
        rhs: kp.shape().to_vec(),
    };
    let (&[h, nq, d], &[h2, nk, d2]) = (qp.shape(), kp.shape()) else {
        return Err(shape_err());
    };
    if h != h2 || d != d2 {
        return Err(shape_err());
    }
    let scale = 1.0 / (d as f32).sqrt();
    let mut probs = vec![0.0f32; h * nq * nk];
    for head in 0..h {
        let q = &qp.data()[head * nq * d..(head + 1) * nq * d];
        let k = &kp.data()[head * nk * d..(head + 1) * nk * d];
        let slab = &mut probs[head * nq * nk..(head + 1) * nq * nk];
        for (qrow, out) in q.chunks_exact(d).zip(slab.chunks_exact_mut(nk)) {
            for (o, krow) in out.iter_mut().zip(k.chunks_exact(d)) {
                *o = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
            }
            softmax_in_place(out, scale);
        }
    }
    PooledScores::from_probabilities(Tensor::new(vec![h, nq, nk], probs)?)
}

/// Key blocks chosen for one probability row, in rank order.
///
/// Ranking is by descending probability with ties going to the lower index.
/// The CDF prefix is the shortest one whose cumulative mass reaches
/// `tau · Σ row`; it is then extended to `min_blocks` and to at least one.
pub fn select_row(probs: &[f32], tau: f64, min_blocks: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let total: f64 = order.iter().map(|&i| probs[i] as f64).sum();
    let mut prefix = 0;
    if tau > 0.0 {
        let target = tau * total;
        let mut cum = 0.0f64;
        for &i in &order {
            cum += probs[i] as f64;
            prefix += 1;
            if cum >= target {
                break;
            }
        }
    }
    let count = prefix.max(min_blocks).max(1).min(probs.len());
    order.truncate(count);
    order
}

/// Applies the selection rule to every row of every head.
pub fn select_blocks(scores: &PooledScores, policy: &MaskPolicy) -> Result<BlockMask> {
    let geom = *policy.geometry();
    if scores.nq_blocks() != geom.nq_blocks || scores.nk_blocks() != geom.nk_blocks {
        return Err(Error::Geometry(format!(
            "scores are {}x{} blocks, policy geometry is {}x{}",
            scores.nq_blocks(),
            scores.nk_blocks(),
            geom.nq_blocks,
            geom.nk_blocks
        )));
    }
    let min = policy.min_blocks();
    let rows: Vec<Vec<usize>> = (0..scores.heads() * geom.nq_blocks)
        .into_par_iter()
        .map(|r| {
            let (h, qb) = (r / geom.nq_blocks, r % geom.nq_blocks);
            select_row(scores.row(h, qb), policy.tau(), min)
        })
        .collect();
    let mut mask = BlockMask::empty(scores.heads(), geom);
    for (r, sel) in rows.into_iter().enumerate() {
        for kb in sel {
            mask.set(r / geom.nq_blocks, r % geom.nq_blocks, kb, true);
        }
    }
    Ok(mask)
}

/// Patch-token rows of `[H × N × d]` in partitioned order, `[H × Np × d]`.
pub(crate) fn patch_rows(x: &Tensor, layout: &TokenLayout) -> Result<Tensor> {
    let &[h, n, d] = x.shape() else {
        return Err(Error::Shape {
            op: "patch_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        });
    };
    if n != layout.total_tokens() {
        return Err(Error::Geometry(format!(
            "{n} tokens but layout has {}",
            layout.total_tokens()
        )));
    }
    let perm = layout.partition_permutation();
    let patches = &perm.gather()[layout.special_tokens()..];
    let mut out = Vec::with_capacity(h * patches.len() * d);
    for head in x.data().chunks_exact(n * d) {
        for &i in patches {
            out.extend_from_slice(&head[i * d..(i + 1) * d]);
        }
    }
    Tensor::new(vec![h, patches.len(), d], out)
}

/// Pooled block probabilities for the patch tokens of `inputs`.
pub fn predict_scores(
    inputs: &AttentionInputs,
    layout: &TokenLayout,
    geometry: &BlockGeometry,
) -> Result<PooledScores> {
    if geometry.n_patch != layout.patch_tokens() {
        return Err(Error::Geometry(format!(
            "geometry covers {} patch tokens, layout has {}",
            geometry.n_patch,
            layout.patch_tokens()
        )));
    }
    let qp = block_pool(&patch_rows(inputs.q(), layout)?, geometry.block_q)?;
    let kp = block_pool(&patch_rows(inputs.k(), layout)?, geometry.block_k)?;
    pooled_scores(&qp, &kp)
}

/// Full prediction: pool, score, select.
pub fn predict_mask(
    inputs: &AttentionInputs,
    layout: &TokenLayout,
    policy: &MaskPolicy,
) -> Result<BlockMask> {
    let scores = predict_scores(inputs, layout, policy.geometry())?;
    select_blocks(&scores, policy)
}
