//! Streaming softmax-attention engine shared by the dense and block-sparse
//! paths. Logits are produced one key tile at a time and folded into
//! per-row running (max, normalizer, accumulator) state, so no row of the
//! attention matrix is ever materialized.

use std::ops::Range;

/// Keys per streamed tile.
pub(crate) const KEY_TILE: usize = 64;

/// Streaming softmax state for a single query row.
///
/// After [`finish`](Self::finish), the output equals the softmax-weighted sum
/// of every value row folded in so far.
#[derive(Debug, Clone)]
pub struct RowAccumulator {
    max: f32,
    norm: f32,
    acc: Vec<f32>,
}

impl RowAccumulator {
    pub fn new(head_dim: usize) -> Self {
        Self {
            max: f32::NEG_INFINITY,
            norm: 0.0,
            acc: vec![0.0; head_dim],
        }
    }

    pub fn max(&self) -> f32 {
        self.max
    }

    pub fn normalizer(&self) -> f32 {
        self.norm
    }

    /// Folds in one tile of already-scaled logits and the matching value rows
    /// (`values.len() == logits.len() * head_dim`). `logits` is overwritten
    /// with unnormalized probabilities.
    #[inline(always)]
    pub fn absorb(&mut self, logits: &mut [f32], values: &[f32]) {
        let d = self.acc.len();
        debug_assert_eq!(values.len(), logits.len() * d);
        let tile_max = logits
            .iter()
            .fold(f32::NEG_INFINITY, |m, &x| if x > m { x } else { m });
        if tile_max > self.max {
            let correction = exp_nonpositive(self.max - tile_max);
            self.norm *= correction;
            for a in self.acc.iter_mut() {
                *a *= correction;
            }
            self.max = tile_max;
        }
        let m = self.max;
        for l in logits.iter_mut() {
            *l = exp_nonpositive(*l - m);
        }
        self.norm += lane_sum(logits);
        for (&p, v) in logits.iter().zip(values.chunks_exact(d)) {
            for (a, &x) in self.acc.iter_mut().zip(v) {
                *a += p * x;
            }
        }
    }

    /// Writes `acc / norm` into `out`. Returns `false` if no key was visited.
    pub fn finish(&self, out: &mut [f32]) -> bool {
        if self.norm <= 0.0 {
            return false;
        }
        let inv = 1.0 / self.norm;
        for (o, &a) in out.iter_mut().zip(&self.acc) {
            *o = a * inv;
        }
        true
    }
}

/// `exp(x)` for `x <= 0` (and `-inf`), written without calls so that it
/// vectorizes. Cody-Waite range reduction with a degree-6 polynomial; within
/// two ulp of `f32::exp` down to the underflow cut-off.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // below this the result is under f32::MIN_POSITIVE; flush to zero
    const CUTOFF: f32 = -87.0;
    let keep = x >= CUTOFF;
    let x = if keep { x } else { CUTOFF };
    let n = (x * LOG2E + 0.5).floor();
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5e-1;
    let e = p * r * r + r + 1.0;
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    if keep {
        e * scale
    } else {
        0.0
    }
}

/// `a·b + c`, fused when the caller runs with FMA enabled. Without hardware
/// FMA `mul_add` would become a library call.
#[inline(always)]
fn madd<const FMA: bool>(a: f32, b: f32, c: f32) -> f32 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn lane_sum(xs: &[f32]) -> f32 {
    const LANES: usize = 8;
    let mut lanes = [0.0f32; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail: f32 = chunks.remainder().iter().sum();
    for c in chunks {
        for i in 0..LANES {
            lanes[i] += c[i];
        }
    }
    let mut width = LANES / 2;
    while width > 0 {
        for i in 0..width {
            lanes[i] += lanes[i + width];
        }
        width /= 2;
    }
    lanes[0] + tail
}

/// One head's keys and values, both `[tokens × head_dim]` row-major.
#[derive(Clone, Copy)]
pub(crate) struct KeyValues<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
    pub head_dim: usize,
}

/// Attends a contiguous group of query rows to the union of `key_ranges`,
/// visited in the given order, writing normalized outputs to `out`.
///
/// Returns `false` if any row saw no keys (its output is left untouched).
pub(crate) fn attend_rows(
    queries: &[f32],
    kv: KeyValues<'_>,
    key_ranges: &[Range<usize>],
    scale: f32,
    out: &mut [f32],
) -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        use std::arch::is_x86_feature_detected as has;
        if has!("avx512f") && has!("avx2") && has!("fma") {
            // SAFETY: the required CPU features were detected above.
            return unsafe { attend_rows_avx512(queries, kv, key_ranges, scale, out) };
        }
        if has!("avx2") && has!("fma") {
            // SAFETY: as above.
            return unsafe { attend_rows_avx2(queries, kv, key_ranges, scale, out) };
        }
    }
    attend_rows_dispatch::<1, false>(queries, kv, key_ranges, scale, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f,avx2,fma")]
unsafe fn attend_rows_avx512(
    queries: &[f32],
    kv: KeyValues<'_>,
    key_ranges: &[Range<usize>],
    scale: f32,
    out: &mut [f32],
) -> bool {
    attend_rows_dispatch::<4, true>(queries, kv, key_ranges, scale, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn attend_rows_avx2(
    queries: &[f32],
    kv: KeyValues<'_>,
    key_ranges: &[Range<usize>],
    scale: f32,
    out: &mut [f32],
) -> bool {
    attend_rows_dispatch::<1, true>(queries, kv, key_ranges, scale, out)
}

/// Picks a head-dim specialization; the fixed sizes keep per-row state in
/// registers. `R` query rows share each key/value load.
#[inline(always)]
fn attend_rows_dispatch<const R: usize, const FMA: bool>(
    queries: &[f32],
    kv: KeyValues<'_>,
    key_ranges: &[Range<usize>],
    scale: f32,
    out: &mut [f32],
) -> bool {
    match kv.head_dim {
        32 => attend_rows_fixed::<32, R, FMA>(queries, kv, key_ranges, scale, out),
        64 => attend_rows_fixed::<64, R, FMA>(queries, kv, key_ranges, scale, out),
        128 => attend_rows_fixed::<128, R, FMA>(queries, kv, key_ranges, scale, out),
        _ => attend_rows_portable(queries, kv, key_ranges, scale, out),
    }
}

#[inline(always)]
fn attend_rows_fixed<const D: usize, const R: usize, const FMA: bool>(
    queries: &[f32],
    kv: KeyValues<'_>,
    key_ranges: &[Range<usize>],
    scale: f32,
    out: &mut [f32],
) -> bool {
    debug_assert_eq!(kv.head_dim, D);
    let rows = queries.len() / D;
    let mut state = vec![
        FixedRow::<D> {
            max: f32::NEG_INFINITY,
            norm: 0.0,
            acc: [0.0; D],
        };
        rows
    ];
    let scaled: Vec<[f32; D]> = queries
        .chunks_exact(D)
        .map(|q| std::array::from_fn(|c| q[c] * scale))
        .collect();
    let mut keys_t = vec![[0.0f32; KEY_TILE]; D];
    for range in key_ranges {
        let mut start = range.start;
        while start < range.end {
            let end = (start + KEY_TILE).min(range.end);
            let t = end - start;
            for (j, key) in kv.keys[start * D..end * D].chunks_exact(D).enumerate() {
                for (c, &x) in key.iter().enumerate() {
                    keys_t[c][j] = x;
                }
            }
            for col in keys_t.iter_mut() {
                col[t..].fill(0.0);
            }
            let values = &kv.values[start * D..end * D];
            let mut q_groups = scaled.chunks_exact(R);
            let mut s_groups = state.chunks_exact_mut(R);
            for (q, s) in q_groups.by_ref().zip(s_groups.by_ref()) {
                tile_rows::<D, R, FMA>(q, s, &keys_t, values, t);
            }
            for (q, s) in q_groups
                .remainder()
                .chunks_exact(1)
                .zip(s_groups.into_remainder().chunks_exact_mut(1))
            {
                tile_rows::<D, 1, FMA>(q, s, &keys_t, values, t);
            }
            start = end;
        }
    }
    let mut all_visited = true;
    for (row, o) in state.iter().zip(out.chunks_exact_mut(D)) {
        if row.norm <= 0.0 {
            all_visited = false;
            continue;
        }
        let inv = 1.0 / row.norm;
        for (o, &a) in o.iter_mut().zip(&row.acc) {
            *o = a * inv;
        }
    }
    all_visited
}

#[derive(Clone, Copy)]
struct FixedRow<const D: usize> {
    max: f32,
    norm: f32,
    acc: [f32; D],
}

/// One key tile folded into `R` query rows at once so that key and value
/// loads are shared across the rows.
#[inline(always)]
fn tile_rows<const D: usize, const R: usize, const FMA: bool>(
    queries: &[[f32; D]],
    state: &mut [FixedRow<D>],
    keys_t: &[[f32; KEY_TILE]],
    values: &[f32],
    t: usize,
) {
    let mut logits = [[0.0f32; KEY_TILE]; R];
    for c in 0..D {
        let kc = &keys_t[c];
        for r in 0..R {
            let qc = queries[r][c];
            for j in 0..KEY_TILE {
                logits[r][j] = madd::<FMA>(qc, kc[j], logits[r][j]);
            }
        }
    }
    let mut accs: [[f32; D]; R] = std::array::from_fn(|r| state[r].acc);
    for r in 0..R {
        let tile = &mut logits[r][..t];
        let tile_max = tile
            .iter()
            .fold(f32::NEG_INFINITY, |m, &x| if x > m { x } else { m });
        let row = &mut state[r];
        if tile_max > row.max {
            let correction = exp_nonpositive(row.max - tile_max);
            row.norm *= correction;
            for a in accs[r].iter_mut() {
                *a *= correction;
            }
            row.max = tile_max;
        }
        let m = row.max;
        for l in tile.iter_mut() {
            *l = exp_nonpositive(*l - m);
        }
        row.norm += lane_sum(tile);
    }
    for (j, v) in values.chunks_exact(D).enumerate() {
        for r in 0..R {
            let p = logits[r][j];
            for c in 0..D {
                accs[r][c] = madd::<FMA>(p, v[c], accs[r][c]);
            }
        }
    }
    for (row, acc) in state.iter_mut().zip(accs) {
        row.acc = acc;
    }
}

#[inline(always)]
fn attend_rows_portable(
    queries: &[f32],
    kv: KeyValues<'_>,
    key_ranges: &[Range<usize>],
    scale: f32,
    out: &mut [f32],
) -> bool {
    let d = kv.head_dim;
    let rows = queries.len() / d;
    let mut accs = vec![RowAccumulator::new(d); rows];
    let mut logits = [0.0f32; KEY_TILE];
    // key tile transposed to [d × tile] so logits vectorize across keys
    let mut keys_t = vec![0.0f32; d * KEY_TILE];
    let scaled: Vec<f32> = queries.iter().map(|&x| x * scale).collect();
    for range in key_ranges {
        let mut start = range.start;
        while start < range.end {
            let end = (start + KEY_TILE).min(range.end);
            let t = end - start;
            for (j, key) in kv.keys[start * d..end * d].chunks_exact(d).enumerate() {
                for (c, &x) in key.iter().enumerate() {
                    keys_t[c * t + j] = x;
                }
            }
            let values = &kv.values[start * d..end * d];
            let tile = &mut logits[..t];
            for (q, acc) in scaled.chunks_exact(d).zip(accs.iter_mut()) {
                tile.fill(0.0);
                for (&qc, kc) in q.iter().zip(keys_t.chunks_exact(t)) {
                    for (l, &k) in tile.iter_mut().zip(kc) {
                        *l += qc * k;
                    }
                }
                acc.absorb(tile, values);
            }
            start = end;
        }
    }
    let mut all_visited = true;
    for (acc, o) in accs.iter().zip(out.chunks_exact_mut(d)) {
        all_visited &= acc.finish(o);
    }
    all_visited
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_weighted(logits: &[f64], values: &[Vec<f64>]) -> Vec<f64> {
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let d = values[0].len();
        (0..d)
            .map(|c| w.iter().zip(values).map(|(wi, v)| wi * v[c]).sum::<f64>() / z)
            .collect()
    }

    #[test]
    fn accumulator_matches_two_pass_softmax() {
        let logits = [0.3f32, -2.0, 5.0, 1.25, 4.9, -7.0, 0.0];
        let values: Vec<Vec<f64>> = (0..7)
            .map(|i| vec![i as f64, (i * i) as f64 * 0.1])
            .collect();
        let flat: Vec<f32> = values.iter().flatten().map(|&v| v as f32).collect();
        let mut acc = RowAccumulator::new(2);
        // uneven tiles, increasing then decreasing maxima
        let mut tiles = logits;
        let (a, rest) = tiles.split_at_mut(2);
        let (b, c) = rest.split_at_mut(1);
        acc.absorb(a, &flat[..4]);
        acc.absorb(b, &flat[4..6]);
        acc.absorb(c, &flat[6..]);
        let mut out = [0.0f32; 2];
        assert!(acc.finish(&mut out));
        let expect = softmax_weighted(&logits.map(|l| l as f64), &values);
        for (o, e) in out.iter().zip(expect) {
            assert!((*o as f64 - e).abs() < 1e-5, "{o} vs {e}");
        }
    }

    #[test]
    fn empty_accumulator_reports_unvisited() {
        let acc = RowAccumulator::new(3);
        let mut out = [0.0f32; 3];
        assert!(!acc.finish(&mut out));
    }

    #[test]
    fn kernel_variants_agree() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (rows, n, d) = (11, 150, 64);
        let mut gen = |len: usize| {
            (0..len)
                .map(|_| rng.gen_range(-2.0f32..2.0))
                .collect::<Vec<_>>()
        };
        let (q, k, v) = (gen(rows * d), gen(n * d), gen(n * d));
        let kv = KeyValues {
            keys: &k,
            values: &v,
            head_dim: d,
        };
        let ranges = [70..150, 0..13, 20..21];
        type Kernel = fn(&[f32], KeyValues<'_>, &[Range<usize>], f32, &mut [f32]) -> bool;
        let run = |f: Kernel| {
            let mut out = vec![0.0f32; rows * d];
            assert!(f(&q, kv, &ranges, 0.125, &mut out));
            out
        };
        let reference = run(attend_rows_portable);
        for other in [
            run(attend_rows_fixed::<64, 1, false>),
            run(attend_rows_fixed::<64, 4, false>),
            run(attend_rows_dispatch::<1, false>),
            run(attend_rows),
        ] {
            for (a, b) in reference.iter().zip(&other) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn lane_sum_handles_remainders() {
        let a: Vec<f32> = (0..37).map(|i| i as f32).collect();
        assert_eq!(lane_sum(&a), (0..37).sum::<i32>() as f32);
    }

    #[test]
    fn exp_matches_libm() {
        let mut x = 0.0f32;
        while x > -90.0 {
            let (got, want) = (exp_nonpositive(x), x.exp());
            if x >= -87.0 {
                assert!(
                    (got - want).abs() <= 3.0 * f32::EPSILON * want,
                    "{x}: {got} vs {want}"
                );
            } else {
                assert!(got < 1e-37);
            }
            x -= 0.0137;
        }
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert_eq!(exp_nonpositive(f32::NEG_INFINITY), 0.0);
    }
}
