//! Mean and maximum post-softmax attention per special/patch quadrant.

use std::io::Write;

use rayon::prelude::*;

use crate::analysis::fmt_sig;
use crate::error::{Error, Result};
use crate::layout::{TokenKind, TokenLayout};
use crate::tensor::Tensor;

/// Query kind `2` key kind, e.g. `S2P` is special queries attending to patch keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrant {
    S2S,
    S2P,
    P2S,
    P2P,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::S2S, Quadrant::S2P, Quadrant::P2S, Quadrant::P2P];

    pub fn of(query: TokenKind, key: TokenKind) -> Self {
        match (query, key) {
            (TokenKind::Special, TokenKind::Special) => Quadrant::S2S,
            (TokenKind::Special, TokenKind::Patch) => Quadrant::S2P,
            (TokenKind::Patch, TokenKind::Special) => Quadrant::P2S,
            (TokenKind::Patch, TokenKind::Patch) => Quadrant::P2P,
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::S2S => "S2S",
            Quadrant::S2P => "S2P",
            Quadrant::P2S => "P2S",
            Quadrant::P2P => "P2P",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrantCell {
    pub entries: u64,
    pub mean: f64,
    pub max: f64,
}

/// Mean and population standard deviation of a per-head statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrantSummary {
    pub entries_per_head: u64,
    pub mean: Spread,
    pub max: Spread,
}

/// Statistics of one layer: per-head cells (`None` for empty quadrants) and
/// across-head summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuadrants {
    pub heads: Vec<[Option<QuadrantCell>; 4]>,
}

impl LayerQuadrants {
    pub fn cell(&self, head: usize, q: Quadrant) -> Option<QuadrantCell> {
        self.heads[head][q.index()]
    }

    pub fn summary(&self, q: Quadrant) -> Option<QuadrantSummary> {
        let cells: Vec<QuadrantCell> = self.heads.iter().filter_map(|h| h[q.index()]).collect();
        let first = cells.first()?;
        let means: Vec<f64> = cells.iter().map(|c| c.mean).collect();
        let maxes: Vec<f64> = cells.iter().map(|c| c.max).collect();
        Some(QuadrantSummary {
            entries_per_head: first.entries,
            mean: Spread::of(&means),
            max: Spread::of(&maxes),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantStats {
    pub layers: Vec<LayerQuadrants>,
}

impl QuadrantStats {
    /// One row per (layer, quadrant) with across-head mean ± std. Empty
    /// quadrants are written with `entries = 0` and blank statistics.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "layer", "quadrant", "entries", "mean_avg", "mean_std", "max_avg", "max_std",
        ])?;
        for (l, layer) in self.layers.iter().enumerate() {
            for q in Quadrant::ALL {
                let row = match layer.summary(q) {
                    Some(s) => vec![
                        l.to_string(),
                        q.name().into(),
                        s.entries_per_head.to_string(),
                        fmt_sig(s.mean.mean),
                        fmt_sig(s.mean.std),
                        fmt_sig(s.max.mean),
                        fmt_sig(s.max.std),
                    ],
                    None => vec![
                        l.to_string(),
                        q.name().into(),
                        "0".into(),
                        String::new(),
                        String::new(),
                        String::new(),
                        String::new(),
                    ],
                };
                w.write_record(row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Tolerance on map row sums.
const ROW_SUM_TOL: f64 = 1e-5;

/// Accepts `[N × N]`, `[H × N × N]` or `[L × H × N × N]` post-softmax maps in
/// the layout's original token order.
pub fn quadrant_stats(map: &Tensor, layout: &TokenLayout) -> Result<QuadrantStats> {
    let n = layout.total_tokens();
    let (layers, heads) = match *map.shape() {
        [a, b] if a == n && b == n => (1, 1),
        [h, a, b] if a == n && b == n => (1, h),
        [l, h, a, b] if a == n && b == n => (l, h),
        _ => {
            return Err(Error::Shape {
                op: "quadrant_stats",
                lhs: map.shape().to_vec(),
                rhs: vec![n, n],
            })
        }
    };
    let kinds: Vec<TokenKind> = (0..n).map(|i| layout.kind_of(i)).collect();
    let per_head: Vec<Result<[Option<QuadrantCell>; 4]>> = map
        .data()
        .par_chunks_exact(n * n)
        .map(|slab| head_cells(slab, &kinds))
        .collect();
    let mut cells = per_head
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter();
    let layers = (0..layers)
        .map(|_| LayerQuadrants {
            heads: cells.by_ref().take(heads).collect(),
        })
        .collect();
    Ok(QuadrantStats { layers })
}

fn head_cells(slab: &[f32], kinds: &[TokenKind]) -> Result<[Option<QuadrantCell>; 4]> {
    let n = kinds.len();
    let mut sum = [0.0f64; 4];
    let mut max = [f64::NEG_INFINITY; 4];
    let mut count = [0u64; 4];
    for (i, row) in slab.chunks_exact(n).enumerate() {
        let row_sum: f64 = row.iter().map(|&x| x as f64).sum();
        if (row_sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "map row {i} sums to {row_sum}, not a probability row"
            )));
        }
        for (j, &x) in row.iter().enumerate() {
            let q = Quadrant::of(kinds[i], kinds[j]).index();
            sum[q] += x as f64;
            max[q] = max[q].max(x as f64);
            count[q] += 1;
        }
    }
    Ok(std::array::from_fn(|q| {
        (count[q] > 0).then(|| QuadrantCell {
            entries: count[q],
            mean: sum[q] / count[q] as f64,
            max: max[q],
        })
    }))
}
