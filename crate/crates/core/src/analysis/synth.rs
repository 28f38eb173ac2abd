//! Synthetic multi-view attention inputs with planted cross-frame matches.
//!
//! Frames are shifted windows onto a shared scene grid. Two patch tokens in
//! different frames that see the same scene point form a candidate match;
//! a random subset of candidates is planted. Every scene point belongs to a
//! square region of `region × region` points carrying one random unit
//! direction `u`, and a token that takes part in a planted match gets `c·u`
//! added to its query (match source) or key (match target).
//!
//! In a periodic scene the windows wrap around a torus of the frame's own
//! size, so every patch has a counterpart in every other frame.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dense::AttentionInputs;
use crate::error::{Error, Result};
use crate::layout::{BlockGeometry, TokenLayout};
use crate::mask::BlockMask;
use crate::tensor::Tensor;

/// Standard-normal Q, K, V of shape `[heads × tokens × head_dim]`.
pub fn random_inputs(heads: usize, tokens: usize, head_dim: usize, seed: u64) -> AttentionInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = heads * tokens * head_dim;
    let mut draw = || {
        let data: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(vec![heads, tokens, head_dim], data).expect("shape")
    };
    let (q, k, v) = (draw(), draw(), draw());
    AttentionInputs::new(q, k, v).expect("finite")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlantedMatch {
    pub frame_a: usize,
    /// Patch index within `frame_a` (row-major on the grid).
    pub token_a: usize,
    pub frame_b: usize,
    pub token_b: usize,
}

/// Scene description. Use [`SynthScene::builder`] to get sensible defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub frames: usize,
    pub patches_per_frame: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub matches: usize,
    pub signal: f32,
    pub region: usize,
    pub max_shift: usize,
    pub periodic: bool,
}

impl SynthScene {
    pub fn builder(frames: usize, patches_per_frame: usize) -> Self {
        Self {
            frames,
            patches_per_frame,
            head_dim: 64,
            heads: 1,
            matches: 64,
            signal: 8.0,
            region: 1,
            max_shift: 4,
            periodic: false,
        }
    }

    pub fn head_dim(mut self, d: usize) -> Self {
        self.head_dim = d;
        self
    }

    pub fn heads(mut self, h: usize) -> Self {
        self.heads = h;
        self
    }

    /// Requested planted matches; capped at the number of candidates.
    pub fn matches(mut self, m: usize) -> Self {
        self.matches = m;
        self
    }

    pub fn signal(mut self, c: f32) -> Self {
        self.signal = c;
        self
    }

    pub fn region(mut self, r: usize) -> Self {
        self.region = r;
        self
    }

    pub fn max_shift(mut self, s: usize) -> Self {
        self.max_shift = s;
        self
    }

    pub fn periodic(mut self, periodic: bool) -> Self {
        self.periodic = periodic;
        self
    }

    pub fn layout(&self) -> Result<TokenLayout> {
        TokenLayout::new(self.frames, self.patches_per_frame, 0, None)
    }

    fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.heads == 0 || self.region == 0 {
            return Err(Error::InvalidArgument(
                "head_dim, heads and region must be at least 1".into(),
            ));
        }
        if !self.signal.is_finite() || self.signal < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "signal {} must be >= 0",
                self.signal
            )));
        }
        Ok(())
    }
}

/// Generated inputs plus the ground truth that produced them.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub inputs: AttentionInputs,
    pub layout: TokenLayout,
    pub matches: Vec<PlantedMatch>,
    pub shifts: Vec<(usize, usize)>,
}

impl SynthOutput {
    /// Flat token index of a patch (no specials in synthetic layouts).
    pub fn token_index(&self, frame: usize, patch: usize) -> usize {
        frame * self.layout.patches_per_frame() + patch
    }

    /// Patch-patch tiles containing at least one planted (query, key) pair,
    /// with the number of pairs in each, sorted by tile.
    pub fn block_relevance(&self, geom: &BlockGeometry) -> Vec<((usize, usize), usize)> {
        let mut tiles: Vec<(usize, usize)> = self
            .matches
            .iter()
            .map(|m| {
                let q = self.token_index(m.frame_a, m.token_a);
                let k = self.token_index(m.frame_b, m.token_b);
                (q / geom.block_q, k / geom.block_k)
            })
            .collect();
        tiles.sort_unstable();
        let mut out: Vec<((usize, usize), usize)> = Vec::new();
        for t in tiles {
            match out.last_mut() {
                Some((last, count)) if *last == t => *count += 1,
                _ => out.push((t, 1)),
            }
        }
        out
    }

    /// Fraction of planted pairs whose tile is selected in `head`'s mask.
    pub fn mask_recall(&self, mask: &BlockMask, head: usize) -> f64 {
        let relevance = self.block_relevance(mask.geometry());
        let total: usize = relevance.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return 1.0;
        }
        let hit: usize = relevance
            .iter()
            .filter(|((qb, kb), _)| mask.get(head, *qb, *kb))
            .map(|(_, c)| c)
            .sum();
        hit as f64 / total as f64
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a scene. Identical `(scene, seed)` pairs yield identical output.
pub fn synth_scene(scene: &SynthScene, seed: u64) -> Result<SynthOutput> {
    scene.validate()?;
    let layout = scene.layout()?;
    let (rows, cols) = layout.grid();
    let (f, p, d) = (scene.frames, scene.patches_per_frame, scene.head_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let shifts: Vec<(usize, usize)> = (0..f)
        .map(|frame| {
            if frame == 0 {
                (0, 0)
            } else {
                (
                    rng.gen_range(0..=scene.max_shift),
                    rng.gen_range(0..=scene.max_shift),
                )
            }
        })
        .collect();

    // Candidate matches over ordered frame pairs; a shift is a bijection so
    // each pair's candidates already form a partial injection.
    let mut candidates = Vec::new();
    for a in 0..f {
        for b in (0..f).filter(|&b| b != a) {
            for i in 0..p {
                let (r, c) = (i / cols + shifts[a].0, i % cols + shifts[a].1);
                let target = if scene.periodic {
                    Some((
                        (r + rows - shifts[b].0 % rows) % rows,
                        (c + cols - shifts[b].1 % cols) % cols,
                    ))
                } else {
                    r.checked_sub(shifts[b].0)
                        .zip(c.checked_sub(shifts[b].1))
                        .filter(|&(rb, cb)| rb < rows && cb < cols)
                };
                if let Some((rb, cb)) = target {
                    candidates.push(PlantedMatch {
                        frame_a: a,
                        token_a: i,
                        frame_b: b,
                        token_b: rb * cols + cb,
                    });
                }
            }
        }
    }
    let take = scene.matches.min(candidates.len());
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), take).into_vec();
    picked.sort_unstable();
    let matches: Vec<PlantedMatch> = picked.into_iter().map(|i| candidates[i]).collect();

    let (scene_rows, scene_cols) = if scene.periodic {
        (rows, cols)
    } else {
        (rows + scene.max_shift, cols + scene.max_shift)
    };
    let region_rows = scene_rows.div_ceil(scene.region);
    let region_cols = scene_cols.div_ceil(scene.region);
    let region_of = |frame: usize, patch: usize| {
        let r = (patch / cols + shifts[frame].0) % scene_rows;
        let c = (patch % cols + shifts[frame].1) % scene_cols;
        (r / scene.region) * region_cols + c / scene.region
    };

    let normal_scale = 1.0 / (d as f32).sqrt();
    let n = layout.total_tokens();
    let mut q = Vec::with_capacity(scene.heads * n * d);
    let mut k = Vec::with_capacity(scene.heads * n * d);
    let mut v = Vec::with_capacity(scene.heads * n * d);
    for _ in 0..scene.heads {
        let directions: Vec<Vec<f32>> = (0..region_rows * region_cols)
            .map(|_| unit_vector(&mut rng, d))
            .collect();
        let mut noise = |buf: &mut Vec<f32>, scale: f32| {
            let start = buf.len();
            buf.extend((0..n * d).map(|_| rng.sample::<f32, _>(StandardNormal) * scale));
            start
        };
        let q0 = noise(&mut q, normal_scale);
        let k0 = noise(&mut k, normal_scale);
        noise(&mut v, 1.0);

        let mut q_marked = vec![false; n];
        let mut k_marked = vec![false; n];
        for m in &matches {
            let qi = m.frame_a * p + m.token_a;
            let ki = m.frame_b * p + m.token_b;
            let u = &directions[region_of(m.frame_a, m.token_a)];
            if !std::mem::replace(&mut q_marked[qi], true) {
                for (x, &ux) in q[q0 + qi * d..q0 + (qi + 1) * d].iter_mut().zip(u) {
                    *x += scene.signal * ux;
                }
            }
            if !std::mem::replace(&mut k_marked[ki], true) {
                for (x, &ux) in k[k0 + ki * d..k0 + (ki + 1) * d].iter_mut().zip(u) {
                    *x += scene.signal * ux;
                }
            }
        }
    }
    let shape = vec![scene.heads, n, d];
    let inputs = AttentionInputs::new(
        Tensor::new(shape.clone(), q)?,
        Tensor::new(shape.clone(), k)?,
        Tensor::new(shape, v)?,
    )?;
    Ok(SynthOutput {
        inputs,
        layout,
        matches,
        shifts,
    })
}
