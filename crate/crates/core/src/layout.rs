//! Multi-frame token layout: how special and patch tokens interleave in the
//! flattened sequence, the stable partition into `[specials | patches]`, and
//! the block geometry over the patch subsequence.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Default special tokens per frame: one camera token and four registers.
pub const DEFAULT_SPECIALS_PER_FRAME: usize = 5;
pub const DEFAULT_BLOCK_Q: usize = 128;
pub const DEFAULT_BLOCK_K: usize = 64;

/// Where each frame's special tokens sit relative to its patch tokens in the
/// flattened input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpecialPlacement {
    #[default]
    Leading,
    Trailing,
}

impl FromStr for SpecialPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "leading" | "first" => Ok(Self::Leading),
            "trailing" | "last" => Ok(Self::Trailing),
            _ => Err(Error::Layout(format!("unknown special placement {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Patch,
}

/// Frame-uniform token layout. Every frame carries `specials_per_frame`
/// special tokens and a `grid.0 × grid.1` patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    frames: usize,
    patches_per_frame: usize,
    specials_per_frame: usize,
    grid: (usize, usize),
    placement: SpecialPlacement,
}

impl TokenLayout {
    /// When `grid` is `None` a square grid is assumed if `patches_per_frame`
    /// is a perfect square, otherwise a single row.
    pub fn new(
        frames: usize,
        patches_per_frame: usize,
        specials_per_frame: usize,
        grid: Option<(usize, usize)>,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Layout("frame count must be at least 1".into()));
        }
        if patches_per_frame == 0 {
            return Err(Error::Layout("patches per frame must be at least 1".into()));
        }
        let grid = match grid {
            Some((r, c)) => {
                if r.checked_mul(c) != Some(patches_per_frame) {
                    return Err(Error::Layout(format!(
                        "grid {r}x{c} does not hold {patches_per_frame} patches"
                    )));
                }
                (r, c)
            }
            None => default_grid(patches_per_frame),
        };
        frames
            .checked_mul(patches_per_frame + specials_per_frame)
            .ok_or_else(|| Error::Layout("token count overflows".into()))?;
        Ok(Self {
            frames,
            patches_per_frame,
            specials_per_frame,
            grid,
            placement: SpecialPlacement::Leading,
        })
    }

    pub fn with_placement(mut self, placement: SpecialPlacement) -> Self {
        self.placement = placement;
        self
    }

    /// The same sequence viewed as one frame of `N` patch tokens and no
    /// specials. Used to run block-sparse attention without the special-token
    /// carve-out.
    pub fn flattened(&self) -> Self {
        let n = self.total_tokens();
        Self {
            frames: 1,
            patches_per_frame: n,
            specials_per_frame: 0,
            grid: (1, n),
            placement: SpecialPlacement::Leading,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn patches_per_frame(&self) -> usize {
        self.patches_per_frame
    }

    pub fn specials_per_frame(&self) -> usize {
        self.specials_per_frame
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn placement(&self) -> SpecialPlacement {
        self.placement
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.patches_per_frame + self.specials_per_frame
    }

    pub fn total_tokens(&self) -> usize {
        self.frames * self.tokens_per_frame()
    }

    pub fn special_tokens(&self) -> usize {
        self.frames * self.specials_per_frame
    }

    pub fn patch_tokens(&self) -> usize {
        self.frames * self.patches_per_frame
    }

    /// Number of entries of the global attention matrix, either over all
    /// tokens or over patch tokens only.
    pub fn attention_entry_count(&self, patch_only: bool) -> u128 {
        let n = if patch_only {
            self.patch_tokens()
        } else {
            self.total_tokens()
        } as u128;
        n * n
    }

    fn local_offsets(&self) -> (usize, usize) {
        match self.placement {
            SpecialPlacement::Leading => (0, self.specials_per_frame),
            SpecialPlacement::Trailing => (self.patches_per_frame, 0),
        }
    }

    pub fn kind_of(&self, index: usize) -> TokenKind {
        let local = index % self.tokens_per_frame();
        let (special_start, _) = self.local_offsets();
        if (special_start..special_start + self.specials_per_frame).contains(&local) {
            TokenKind::Special
        } else {
            TokenKind::Patch
        }
    }

    /// Decodes a flat token index into frame, kind and grid position.
    pub fn token_coords(&self, index: usize) -> Result<TokenCoord> {
        let n = self.total_tokens();
        if index >= n {
            return Err(Error::IndexOutOfRange { index, len: n });
        }
        let tpf = self.tokens_per_frame();
        let (frame, local) = (index / tpf, index % tpf);
        let (special_start, patch_start) = self.local_offsets();
        if (special_start..special_start + self.specials_per_frame).contains(&local) {
            return Ok(TokenCoord {
                frame,
                kind: TokenKind::Special,
                row: -1,
                col: -1,
                slot: local - special_start,
            });
        }
        let p = local - patch_start;
        let cols = self.grid.1;
        Ok(TokenCoord {
            frame,
            kind: TokenKind::Patch,
            row: (p / cols) as i64,
            col: (p % cols) as i64,
            slot: p,
        })
    }

    /// Inverse of [`token_coords`](Self::token_coords).
    pub fn token_index(&self, coord: &TokenCoord) -> Result<usize> {
        if coord.frame >= self.frames {
            return Err(Error::Layout(format!("frame {} out of range", coord.frame)));
        }
        let (special_start, patch_start) = self.local_offsets();
        let local = match coord.kind {
            TokenKind::Special => {
                if coord.slot >= self.specials_per_frame {
                    return Err(Error::Layout(format!(
                        "special slot {} out of range",
                        coord.slot
                    )));
                }
                special_start + coord.slot
            }
            TokenKind::Patch => {
                let (rows, cols) = self.grid;
                if coord.row < 0 || coord.col < 0 {
                    return Err(Error::Layout("negative patch coordinate".into()));
                }
                let (r, c) = (coord.row as usize, coord.col as usize);
                if r >= rows || c >= cols {
                    return Err(Error::Layout(format!("patch ({r}, {c}) outside grid")));
                }
                patch_start + r * cols + c
            }
        };
        Ok(coord.frame * self.tokens_per_frame() + local)
    }

    /// Stable permutation into `[all specials | all patches]` order.
    pub fn partition_permutation(&self) -> Permutation {
        let n = self.total_tokens();
        let tpf = self.tokens_per_frame();
        let (special_start, patch_start) = self.local_offsets();
        let mut gather = Vec::with_capacity(n);
        for f in 0..self.frames {
            let base = f * tpf + special_start;
            gather.extend(base..base + self.specials_per_frame);
        }
        for f in 0..self.frames {
            let base = f * tpf + patch_start;
            gather.extend(base..base + self.patches_per_frame);
        }
        Permutation::from_gather(gather)
    }
}

/// Position of a token inside the layout. Specials use `row == col == -1`
/// and are told apart by `slot`; for patches `slot` is the row-major index
/// within the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenCoord {
    pub frame: usize,
    pub kind: TokenKind,
    pub row: i64,
    pub col: i64,
    pub slot: usize,
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenKind::Special => "special",
            TokenKind::Patch => "patch",
        })
    }
}

fn default_grid(p: usize) -> (usize, usize) {
    let r = (p as f64).sqrt().round() as usize;
    if r * r == p {
        (r, r)
    } else {
        (1, p)
    }
}

/// Parses a patch grid given as `RxC` (e.g. `37x37`).
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Layout(format!("grid {s:?} is not of the form RxC")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Layout(format!("bad grid dimension {v:?}")))
    };
    let (r, c) = (parse(r)?, parse(c)?);
    r.checked_mul(c)
        .ok_or_else(|| Error::Layout(format!("grid {s:?} overflows")))?;
    Ok((r, c))
}

/// A permutation stored as gather indices: position `i` of the permuted
/// sequence holds element `gather[i]` of the original. `scatter` is its
/// inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    gather: Vec<usize>,
    scatter: Vec<usize>,
}

impl Permutation {
    pub fn from_gather(gather: Vec<usize>) -> Self {
        let mut scatter = vec![usize::MAX; gather.len()];
        for (i, &g) in gather.iter().enumerate() {
            scatter[g] = i;
        }
        debug_assert!(scatter.iter().all(|&s| s != usize::MAX));
        Self { gather, scatter }
    }

    pub fn len(&self) -> usize {
        self.gather.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gather.is_empty()
    }

    pub fn gather(&self) -> &[usize] {
        &self.gather
    }

    pub fn scatter(&self) -> &[usize] {
        &self.scatter
    }

    pub fn is_identity(&self) -> bool {
        self.gather.iter().enumerate().all(|(i, &g)| i == g)
    }

    /// Reorders rows of width `width`: output row `i` is input row `gather[i]`.
    pub fn apply_rows<T: Copy>(&self, rows: &[T], width: usize) -> Vec<T> {
        assert_eq!(rows.len(), self.len() * width);
        let mut out = Vec::with_capacity(rows.len());
        for &g in &self.gather {
            out.extend_from_slice(&rows[g * width..(g + 1) * width]);
        }
        out
    }

    /// Undoes [`apply_rows`](Self::apply_rows).
    pub fn invert_rows<T: Copy>(&self, rows: &[T], width: usize) -> Vec<T> {
        assert_eq!(rows.len(), self.len() * width);
        let mut out = Vec::with_capacity(rows.len());
        for &s in &self.scatter {
            out.extend_from_slice(&rows[s * width..(s + 1) * width]);
        }
        out
    }
}

/// Block tiling of the patch-token subsequence. The final block on either
/// axis may be shorter than the nominal size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeometry {
    pub n_patch: usize,
    pub block_q: usize,
    pub block_k: usize,
    pub nq_blocks: usize,
    pub nk_blocks: usize,
}

impl BlockGeometry {
    pub fn new(n_patch: usize, block_q: usize, block_k: usize) -> Result<Self> {
        if n_patch == 0 {
            return Err(Error::Geometry("no patch tokens".into()));
        }
        if block_q == 0 || block_k == 0 {
            return Err(Error::Geometry("block sizes must be at least 1".into()));
        }
        Ok(Self {
            n_patch,
            block_q,
            block_k,
            nq_blocks: n_patch.div_ceil(block_q),
            nk_blocks: n_patch.div_ceil(block_k),
        })
    }

    pub fn for_layout(layout: &TokenLayout, block_q: usize, block_k: usize) -> Result<Self> {
        Self::new(layout.patch_tokens(), block_q, block_k)
    }

    /// Patch-index range of query block `qb`.
    pub fn q_range(&self, qb: usize) -> std::ops::Range<usize> {
        let start = qb * self.block_q;
        start..(start + self.block_q).min(self.n_patch)
    }

    pub fn k_range(&self, kb: usize) -> std::ops::Range<usize> {
        let start = kb * self.block_k;
        start..(start + self.block_k).min(self.n_patch)
    }

    /// Token-pair area of tile `(qb, kb)`.
    pub fn tile_area(&self, qb: usize, kb: usize) -> u64 {
        (self.q_range(qb).len() * self.k_range(kb).len()) as u64
    }

    pub fn total_area(&self) -> u64 {
        (self.n_patch as u64) * (self.n_patch as u64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn no_specials_is_identity() {
        let l = TokenLayout::new(1, 4, 0, None).unwrap();
        assert!(l.partition_permutation().is_identity());
    }

    #[test]
    fn two_frames_one_special() {
        // s0 p0 p1 s1 p2 p3
        let l = TokenLayout::new(2, 2, 1, Some((1, 2))).unwrap();
        let p = l.partition_permutation();
        assert_eq!(p.gather(), &[0, 3, 1, 2, 4, 5]);
        let tags = ["s0", "p0", "p1", "s1", "p2", "p3"];
        let permuted = p.apply_rows(&tags, 1);
        assert_eq!(permuted, ["s0", "s1", "p0", "p1", "p2", "p3"]);
    }

    #[test]
    fn trailing_specials() {
        // p0 p1 s0 p2 p3 s1
        let l = TokenLayout::new(2, 2, 1, Some((1, 2)))
            .unwrap()
            .with_placement(SpecialPlacement::Trailing);
        assert_eq!(l.partition_permutation().gather(), &[2, 5, 0, 1, 3, 4]);
        assert_eq!(l.kind_of(2), TokenKind::Special);
        assert_eq!(l.token_coords(3).unwrap().row, 0);
    }

    #[test]
    fn entry_counts() {
        let l = TokenLayout::new(10, 37 * 37, 5, Some((37, 37))).unwrap();
        assert_eq!(l.attention_entry_count(true), 187_416_100);
        let l = TokenLayout::new(1, 1, 0, None).unwrap();
        assert_eq!(l.attention_entry_count(false), 1);
        let l = TokenLayout::new(2, 3, 1, None).unwrap();
        assert_eq!(l.attention_entry_count(false), 64);
        assert_eq!(l.attention_entry_count(true), 36);
    }

    #[test]
    fn coords() {
        let l = TokenLayout::new(1, 4, 1, Some((2, 2))).unwrap();
        let c = l.token_coords(0).unwrap();
        assert_eq!(
            (c.frame, c.kind, c.row, c.col),
            (0, TokenKind::Special, -1, -1)
        );
        let c = l.token_coords(3).unwrap();
        assert_eq!((c.frame, c.kind, c.row, c.col), (0, TokenKind::Patch, 1, 0));
        assert!(matches!(
            l.token_coords(5),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("37x37").unwrap(), (37, 37));
        assert_eq!(parse_grid("2X8").unwrap(), (2, 8));
        assert!(parse_grid("0x3").is_err());
        assert!(parse_grid("12").is_err());
        assert!(parse_grid("ax3").is_err());
        assert!(TokenLayout::new(1, 5, 0, Some((2, 2))).is_err());
    }

    #[test]
    fn geometry_ragged_tail() {
        let g = BlockGeometry::new(300, 128, 64).unwrap();
        assert_eq!((g.nq_blocks, g.nk_blocks), (3, 5));
        assert_eq!(g.q_range(2), 256..300);
        assert_eq!(g.k_range(4), 256..300);
        let sum: u64 = (0..3)
            .flat_map(|q| (0..5).map(move |k| (q, k)))
            .map(|(q, k)| g.tile_area(q, k))
            .sum();
        assert_eq!(sum, g.total_area());
        assert!(BlockGeometry::new(10, 0, 4).is_err());
    }

    fn layouts() -> impl Strategy<Value = TokenLayout> {
        (1usize..5, 1usize..12, 0usize..6, any::<bool>()).prop_map(|(f, p, s, trailing)| {
            let l = TokenLayout::new(f, p, s, None).unwrap();
            if trailing {
                l.with_placement(SpecialPlacement::Trailing)
            } else {
                l
            }
        })
    }

    proptest! {
        #[test]
        fn permutation_round_trip(l in layouts()) {
            let p = l.partition_permutation();
            let tags: Vec<usize> = (0..l.total_tokens()).collect();
            let there = p.apply_rows(&tags, 1);
            prop_assert_eq!(p.invert_rows(&there, 1), tags);
            // specials first, then patches, each group in original order
            let (specials, patches) = there.split_at(l.special_tokens());
            prop_assert!(specials.iter().all(|&i| l.kind_of(i) == TokenKind::Special));
            prop_assert!(patches.iter().all(|&i| l.kind_of(i) == TokenKind::Patch));
            prop_assert!(specials.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(patches.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn coords_round_trip(l in layouts(), seed in 0usize..1000) {
            let idx = seed % l.total_tokens();
            let c = l.token_coords(idx).unwrap();
            prop_assert_eq!(l.token_index(&c).unwrap(), idx);
        }

        #[test]
        fn patch_entries_bounded(l in layouts()) {
            let (full, patch) = (l.attention_entry_count(false), l.attention_entry_count(true));
            prop_assert!(patch <= full);
            prop_assert_eq!(patch == full, l.specials_per_frame() == 0);
        }
    }
}
