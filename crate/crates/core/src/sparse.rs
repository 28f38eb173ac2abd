//! Block-sparse global attention with special-token carve-out.
//!
//! Tokens are reordered into `[specials | patches]`. Special-token query rows
//! attend densely to every key. Patch query rows, one query block at a time,
//! stream all special keys first and then the patch key blocks selected by
//! the mask in ascending order. Unselected patch keys contribute nothing.
//! Outputs are returned in the caller's original token order.

use std::ops::Range;

use rayon::prelude::*;

use crate::dense::AttentionInputs;
use crate::error::{Error, Result};
use crate::kernel::{attend_rows, KeyValues};
use crate::layout::TokenLayout;
use crate::mask::{BlockMask, MaskPolicy};
use crate::tensor::Tensor;

pub use crate::kernel::RowAccumulator;

/// Everything the kernel needs: inputs in original order, their layout, and
/// a patch-patch block mask whose geometry matches the layout.
#[derive(Debug, Clone, Copy)]
pub struct SparseAttentionJob<'a> {
    inputs: &'a AttentionInputs,
    layout: TokenLayout,
    mask: &'a BlockMask,
    policy: Option<MaskPolicy>,
}

impl<'a> SparseAttentionJob<'a> {
    pub fn new(
        inputs: &'a AttentionInputs,
        layout: TokenLayout,
        mask: &'a BlockMask,
    ) -> Result<Self> {
        if inputs.tokens() != layout.total_tokens() {
            return Err(Error::Geometry(format!(
                "inputs have {} tokens, layout has {}",
                inputs.tokens(),
                layout.total_tokens()
            )));
        }
        if mask.geometry().n_patch != layout.patch_tokens() {
            return Err(Error::Geometry(format!(
                "mask covers {} patch tokens, layout has {}",
                mask.geometry().n_patch,
                layout.patch_tokens()
            )));
        }
        if mask.heads() != inputs.heads() {
            return Err(Error::Geometry(format!(
                "mask has {} heads, inputs have {}",
                mask.heads(),
                inputs.heads()
            )));
        }
        Ok(Self {
            inputs,
            layout,
            mask,
            policy: None,
        })
    }

    /// Records the policy that produced the mask.
    pub fn with_policy(mut self, policy: MaskPolicy) -> Self {
        self.policy = Some(policy);
        self
    }

    pub fn inputs(&self) -> &AttentionInputs {
        self.inputs
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn mask(&self) -> &BlockMask {
        self.mask
    }

    pub fn policy(&self) -> Option<&MaskPolicy> {
        self.policy.as_ref()
    }
}

enum Work<'o> {
    Specials {
        head: usize,
        out: &'o mut [f32],
    },
    QueryBlock {
        head: usize,
        qb: usize,
        out: &'o mut [f32],
    },
}

/// Runs the block-sparse kernel. Output is `[H × N × d_h]` in original order.
pub fn sparse_attention(job: &SparseAttentionJob<'_>) -> Result<Tensor> {
    if let Some((head, qb)) = job.mask.first_empty_row() {
        return Err(Error::Geometry(format!(
            "mask row (head {head}, query block {qb}) selects no key block"
        )));
    }
    let inp = job.inputs;
    let (h, n, d) = (inp.heads(), inp.tokens(), inp.head_dim());
    let hl = inp.head_len();
    let geom = *job.mask.geometry();
    let n_special = job.layout.special_tokens();

    let perm = job.layout.partition_permutation();
    let identity = perm.is_identity();
    let reorder = |t: &Tensor| -> Vec<f32> {
        if identity {
            t.data().to_vec()
        } else {
            t.data()
                .chunks_exact(hl)
                .flat_map(|head| perm.apply_rows(head, d))
                .collect()
        }
    };
    let (q, k, v) = (reorder(inp.q()), reorder(inp.k()), reorder(inp.v()));

    let mut out = vec![0.0f32; h * hl];
    let mut work = Vec::with_capacity(h * (geom.nq_blocks + 1));
    for (head, slab) in out.chunks_mut(hl).enumerate() {
        let (specials, patches) = slab.split_at_mut(n_special * d);
        if n_special > 0 {
            work.push(Work::Specials {
                head,
                out: specials,
            });
        }
        for (qb, rows) in patches.chunks_mut(geom.block_q * d).enumerate() {
            work.push(Work::QueryBlock {
                head,
                qb,
                out: rows,
            });
        }
    }

    let scale = inp.scale();
    let ok = work.into_par_iter().all(|item| {
        let (head, ranges, q_rows, out): (usize, Vec<Range<usize>>, Range<usize>, &mut [f32]) =
            match item {
                Work::Specials { head, out } => {
                    (head, std::iter::once(0..n).collect(), 0..n_special, out)
                }
                Work::QueryBlock { head, qb, out } => {
                    let mut ranges = Vec::with_capacity(1 + geom.nk_blocks);
                    if n_special > 0 {
                        ranges.push(0..n_special);
                    }
                    ranges.extend(job.mask.selected(head, qb).map(|kb| {
                        let r = geom.k_range(kb);
                        n_special + r.start..n_special + r.end
                    }));
                    let r = geom.q_range(qb);
                    (head, ranges, n_special + r.start..n_special + r.end, out)
                }
            };
        let base = head * hl;
        let kv = KeyValues {
            keys: &k[base..base + hl],
            values: &v[base..base + hl],
            head_dim: d,
        };
        let queries = &q[base + q_rows.start * d..base + q_rows.end * d];
        attend_rows(queries, kv, &ranges, scale, out)
    });
    if !ok {
        return Err(Error::Geometry("a query row visited no keys".into()));
    }

    let out = if identity {
        out
    } else {
        out.chunks_exact(hl)
            .flat_map(|head| perm.invert_rows(head, d))
            .collect()
    };
    Tensor::new(vec![h, n, d], out)
}

/// Multiply-accumulate counts for `QKᵀ` plus `PV`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopEstimate {
    pub dense_macs: u128,
    pub sparse_macs: u128,
    pub theoretical_speedup: f64,
}

impl FlopEstimate {
    fn new(dense_macs: u128, sparse_macs: u128) -> Self {
        Self {
            dense_macs,
            sparse_macs,
            theoretical_speedup: dense_macs as f64 / sparse_macs as f64,
        }
    }
}

/// Work of one head under the mask. Special rows and special key columns are
/// always counted densely.
pub fn head_flop_estimate(job: &SparseAttentionJob<'_>, head: usize) -> FlopEstimate {
    let n = job.inputs.tokens() as u128;
    let d = job.inputs.head_dim() as u128;
    let s = job.layout.special_tokens() as u128;
    let geom = job.mask.geometry();
    let dense = 2 * n * n * d;
    // special rows over all keys, patch rows over special keys
    let mut pairs = s * n + (n - s) * s;
    pairs += job.mask.selected_area(head) as u128;
    debug_assert_eq!(geom.n_patch as u128 + s, n);
    FlopEstimate::new(dense, 2 * pairs * d)
}

/// Work summed over all heads.
pub fn flop_estimate(job: &SparseAttentionJob<'_>) -> FlopEstimate {
    let (dense, sparse) = (0..job.inputs.heads())
        .map(|h| head_flop_estimate(job, h))
        .fold((0u128, 0u128), |(a, b), e| {
            (a + e.dense_macs, b + e.sparse_macs)
        });
    FlopEstimate::new(dense, sparse)
}
