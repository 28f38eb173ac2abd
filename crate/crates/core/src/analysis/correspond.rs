//! Top-k patch-to-patch attention entries decoded into grid coordinates.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::io::Write;

use crate::analysis::fmt_sig;
use crate::error::{Error, Result};
use crate::layout::{TokenKind, TokenLayout};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub query: usize,
    pub key: usize,
    pub qframe: usize,
    pub qrow: i64,
    pub qcol: i64,
    pub kframe: usize,
    pub krow: i64,
    pub kcol: i64,
    pub weight: f32,
}

/// Heap entry ordered so that "greater" means "ranks higher": larger weight,
/// then smaller (query, key).
#[derive(Debug, Clone, Copy)]
struct Ranked {
    weight: f32,
    query: usize,
    key: usize,
}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.weight
            .total_cmp(&other.weight)
            .then_with(|| other.query.cmp(&self.query))
            .then_with(|| other.key.cmp(&self.key))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked {}

/// Head-averages `[H × N × N]` maps; `[N × N]` maps pass through.
pub fn mean_over_heads(map: &Tensor) -> Result<Tensor> {
    match *map.shape() {
        [_, _] => Ok(map.clone()),
        [h, n, m] => {
            let mut acc = vec![0.0f64; n * m];
            for slab in map.data().chunks_exact(n * m) {
                for (a, &x) in acc.iter_mut().zip(slab) {
                    *a += x as f64;
                }
            }
            Tensor::new(
                vec![n, m],
                acc.into_iter().map(|a| (a / h as f64) as f32).collect(),
            )
        }
        _ => Err(Error::Shape {
            op: "mean_over_heads",
            lhs: map.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// The `k` largest patch-to-patch entries, strongest first. Multi-head maps
/// are averaged over heads first. If fewer than `k` candidates exist, all
/// are returned.
pub fn top_k_correspondences(
    map: &Tensor,
    layout: &TokenLayout,
    k: usize,
    cross_view_only: bool,
) -> Result<Vec<Correspondence>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let map = mean_over_heads(map)?;
    let n = layout.total_tokens();
    if map.shape() != [n, n] {
        return Err(Error::Shape {
            op: "top_k_correspondences",
            lhs: map.shape().to_vec(),
            rhs: vec![n, n],
        });
    }
    let coords = (0..n)
        .map(|i| layout.token_coords(i))
        .collect::<Result<Vec<_>>>()?;
    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
    for (qi, row) in map.data().chunks_exact(n).enumerate() {
        if coords[qi].kind != TokenKind::Patch {
            continue;
        }
        for (ki, &weight) in row.iter().enumerate() {
            let kc = &coords[ki];
            if kc.kind != TokenKind::Patch || (cross_view_only && kc.frame == coords[qi].frame) {
                continue;
            }
            let cand = Ranked {
                weight,
                query: qi,
                key: ki,
            };
            if heap.len() < k {
                heap.push(Reverse(cand));
            } else if heap.peek().is_some_and(|worst| cand > worst.0) {
                heap.pop();
                heap.push(Reverse(cand));
            }
        }
    }
    let mut ranked: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
    ranked.sort_by(|a, b| b.cmp(a));
    Ok(ranked
        .into_iter()
        .map(|r| {
            let (q, kc) = (&coords[r.query], &coords[r.key]);
            Correspondence {
                query: r.query,
                key: r.key,
                qframe: q.frame,
                qrow: q.row,
                qcol: q.col,
                kframe: kc.frame,
                krow: kc.row,
                kcol: kc.col,
                weight: r.weight,
            }
        })
        .collect())
}

pub fn write_correspondences_csv<W: Write>(list: &[Correspondence], w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["qframe", "qrow", "qcol", "kframe", "krow", "kcol", "weight"])?;
    for c in list {
        w.write_record([
            c.qframe.to_string(),
            c.qrow.to_string(),
            c.qcol.to_string(),
            c.kframe.to_string(),
            c.krow.to_string(),
            c.kcol.to_string(),
            fmt_sig(c.weight as f64),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::synth::{synth_scene, SynthScene};
    use crate::dense::dense_attention_map;

    fn uniform(n: usize) -> Vec<f32> {
        vec![1.0 / n as f32; n * n]
    }

    #[test]
    fn planted_spike_comes_first() {
        let layout = TokenLayout::new(2, 4, 1, Some((2, 2))).unwrap();
        let n = layout.total_tokens();
        let mut data = uniform(n);
        data[2 * n + 8] = 0.9; // frame 0 patch (0,1) -> frame 1 patch (1,0)
        let map = Tensor::new(vec![n, n], data).unwrap();
        let top = top_k_correspondences(&map, &layout, 3, false).unwrap();
        let c = top[0];
        assert_eq!((c.qframe, c.qrow, c.qcol), (0, 0, 1));
        assert_eq!((c.kframe, c.krow, c.kcol), (1, 1, 0));
        assert_eq!(top.len(), 3);
        // equal weights fall back to (query, key) order
        assert!((top[1].query, top[1].key) < (top[2].query, top[2].key));
        assert!(top.iter().all(|c| c.qrow >= 0 && c.krow >= 0));
    }

    #[test]
    fn cross_view_on_single_frame_is_empty() {
        let layout = TokenLayout::new(1, 4, 0, None).unwrap();
        let map = Tensor::new(vec![4, 4], uniform(4)).unwrap();
        assert!(top_k_correspondences(&map, &layout, 5, true)
            .unwrap()
            .is_empty());
        assert_eq!(
            top_k_correspondences(&map, &layout, 50, false)
                .unwrap()
                .len(),
            16
        );
        assert!(top_k_correspondences(&map, &layout, 0, false).is_err());
    }

    #[test]
    fn recovers_planted_matches() {
        let scene = SynthScene::builder(4, 256)
            .head_dim(32)
            .matches(8)
            .signal(8.0);
        for seed in 0..5 {
            let out = synth_scene(&scene, seed).unwrap();
            let map = dense_attention_map(&out.inputs).unwrap();
            let top = top_k_correspondences(&map, &out.layout, 8, true).unwrap();
            let found = out
                .matches
                .iter()
                .filter(|m| {
                    let (q, k) = (
                        out.token_index(m.frame_a, m.token_a),
                        out.token_index(m.frame_b, m.token_b),
                    );
                    top.iter().any(|c| c.query == q && c.key == k)
                })
                .count();
            assert!(found >= 7, "seed {seed}: recovered {found} of 8");
        }
    }
}
