//! Reference multi-head attention.
//!
//! [`dense_attention`] streams keys through the shared online-softmax engine
//! and scales to long sequences. [`dense_attention_map`] materializes the
//! post-softmax probabilities with the same arithmetic as
//! [`matmul`](crate::tensor::matmul) and [`row_softmax`](crate::tensor::row_softmax), and is
//! only allowed below an element cap.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{attend_rows, KeyValues};
use crate::tensor::{matmul_into, softmax_in_place, Tensor};

/// Default element cap for materialized attention maps (2³¹).
pub const DEFAULT_MAP_CAP: u128 = 1 << 31;

/// Query rows per parallel work item in the dense path.
const DENSE_ROW_CHUNK: usize = 128;

/// Precomputed per-head queries, keys and values, each `[H × N × d_h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    q: Tensor,
    k: Tensor,
    v: Tensor,
}

impl AttentionInputs {
    /// Accepts `[H, N, d]` tensors, or `[N, d]` tensors as a single head.
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let lift = |t: Tensor| -> Result<Tensor> {
            match *t.shape() {
                [n, d] => t.reshape(vec![1, n, d]),
                [_, _, _] => Ok(t),
                _ => Err(Error::Shape {
                    op: "attention inputs",
                    lhs: t.shape().to_vec(),
                    rhs: vec![],
                }),
            }
        };
        let (q, k, v) = (lift(q)?, lift(k)?, lift(v)?);
        for other in [&k, &v] {
            if other.shape() != q.shape() {
                return Err(Error::Shape {
                    op: "attention inputs",
                    lhs: q.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
        if !(q.is_finite() && k.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("attention inputs"));
        }
        Ok(Self { q, k, v })
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn q(&self) -> &Tensor {
        &self.q
    }

    pub fn k(&self) -> &Tensor {
        &self.k
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn into_parts(self) -> (Tensor, Tensor, Tensor) {
        (self.q, self.k, self.v)
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.head_dim() as f32).sqrt()
    }

    pub(crate) fn head_len(&self) -> usize {
        self.tokens() * self.head_dim()
    }
}

/// `softmax(Q Kᵀ / √d_h) V` for every head.
pub fn dense_attention(inp: &AttentionInputs) -> Result<Tensor> {
    let (h, n, d) = (inp.heads(), inp.tokens(), inp.head_dim());
    let scale = inp.scale();
    let hl = inp.head_len();
    let mut out = vec![0.0f32; h * hl];
    out.par_chunks_mut(hl)
        .enumerate()
        .flat_map_iter(|(head, slab)| {
            slab.chunks_mut(DENSE_ROW_CHUNK * d)
                .enumerate()
                .map(move |(c, rows)| (head, c * DENSE_ROW_CHUNK, rows))
        })
        .for_each(|(head, row0, rows)| {
            let base = head * hl;
            let kv = KeyValues {
                keys: &inp.k.data()[base..base + hl],
                values: &inp.v.data()[base..base + hl],
                head_dim: d,
            };
            let q = &inp.q.data()[base + row0 * d..base + row0 * d + rows.len()];
            let visited = attend_rows(q, kv, std::slice::from_ref(&(0..n)), scale, rows);
            debug_assert!(visited);
        });
    Tensor::new(vec![h, n, d], out)
}

/// Post-softmax attention probabilities `[H × N × N]`, refusing maps above
/// [`DEFAULT_MAP_CAP`] elements.
pub fn dense_attention_map(inp: &AttentionInputs) -> Result<Tensor> {
    dense_attention_map_capped(inp, DEFAULT_MAP_CAP)
}

pub fn dense_attention_map_capped(inp: &AttentionInputs, cap: u128) -> Result<Tensor> {
    let (h, n, d) = (inp.heads(), inp.tokens(), inp.head_dim());
    let requested = h as u128 * n as u128 * n as u128;
    if requested > cap {
        return Err(Error::SizeCap { requested, cap });
    }
    let scale = inp.scale();
    let hl = inp.head_len();
    let mut map = vec![0.0f32; h * n * n];
    map.par_chunks_mut(n * n)
        .enumerate()
        .for_each(|(head, slab)| {
            let q = &inp.q.data()[head * hl..(head + 1) * hl];
            let k = &inp.k.data()[head * hl..(head + 1) * hl];
            let kt = transpose(k, n, d);
            matmul_into(q, &kt, slab, n, d, n);
            for row in slab.chunks_exact_mut(n) {
                softmax_in_place(row, scale);
            }
        });
    Tensor::new(vec![h, n, n], map)
}

/// Applies an `[H × N × N]` probability map to `V`.
pub fn apply_map(map: &Tensor, v: &Tensor) -> Result<Tensor> {
    let shape_err = || Error::Shape {
        op: "apply_map",
        lhs: map.shape().to_vec(),
        rhs: v.shape().to_vec(),
    };
    let (&[h, n, n2], &[h2, n3, d]) = (map.shape(), v.shape()) else {
        return Err(shape_err());
    };
    if n != n2 || h != h2 || n != n3 {
        return Err(shape_err());
    }
    let mut out = vec![0.0f32; h * n * d];
    out.par_chunks_mut(n * d)
        .enumerate()
        .for_each(|(head, slab)| {
            matmul_into(
                &map.data()[head * n * n..(head + 1) * n * n],
                &v.data()[head * n * d..(head + 1) * n * d],
                slab,
                n,
                n,
                d,
            );
        });
    Tensor::new(vec![h, n, d], out)
}

fn transpose(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = x[r * cols + c];
        }
    }
    t
}
