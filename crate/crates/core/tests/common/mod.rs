//! Reference implementations shared by the integration tests.

use bsa_core::{AttentionInputs, BlockMask, SpecialPlacement, Tensor, TokenLayout};

/// Ordinal of `token` among patch tokens, or `None` for a special token,
/// derived directly from the frame-uniform layout description.
pub fn patch_ordinal(layout: &TokenLayout, token: usize) -> Option<usize> {
    let (s, p) = (layout.specials_per_frame(), layout.patches_per_frame());
    let (frame, within) = (token / (s + p), token % (s + p));
    let slot = match layout.placement() {
        SpecialPlacement::Leading => within.checked_sub(s)?,
        SpecialPlacement::Trailing => Some(within).filter(|&w| w < p)?,
    };
    Some(frame * p + slot)
}

/// Naive f64 attention where unselected patch-patch tiles get `-inf` logits.
pub fn masked_oracle(inputs: &AttentionInputs, layout: &TokenLayout, mask: &BlockMask) -> Vec<f64> {
    let (h, n, d) = (inputs.heads(), inputs.tokens(), inputs.head_dim());
    let g = *mask.geometry();
    let (q, k, v) = (inputs.q().data(), inputs.k().data(), inputs.v().data());
    let scale = 1.0 / (d as f64).sqrt();
    let ordinals: Vec<Option<usize>> = (0..n).map(|t| patch_ordinal(layout, t)).collect();
    let mut out = vec![0.0; h * n * d];
    let mut logits = vec![0.0f64; n];
    for head in 0..h {
        let base = head * n * d;
        for i in 0..n {
            let qi = &q[base + i * d..base + (i + 1) * d];
            for (j, l) in logits.iter_mut().enumerate() {
                let allowed = match (ordinals[i], ordinals[j]) {
                    (Some(a), Some(b)) => mask.get(head, a / g.block_q, b / g.block_k),
                    _ => true,
                };
                *l = if allowed {
                    let kj = &k[base + j * d..base + (j + 1) * d];
                    qi.iter()
                        .zip(kj)
                        .map(|(&x, &y)| x as f64 * y as f64)
                        .sum::<f64>()
                        * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            let row = &mut out[base + i * d..base + (i + 1) * d];
            for (j, &l) in logits.iter().enumerate() {
                let w = (l - max).exp();
                z += w;
                for (o, &x) in row.iter_mut().zip(&v[base + j * d..base + (j + 1) * d]) {
                    *o += w * x as f64;
                }
            }
            row.iter_mut().for_each(|o| *o /= z);
        }
    }
    out
}

pub fn max_abs_diff_f64(a: &Tensor, b: &[f64]) -> f64 {
    a.data()
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}
