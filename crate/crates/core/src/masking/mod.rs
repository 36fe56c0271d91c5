//! Token masking: random, blockwise, attention-guided with hint tokens, and
//! teacher patch dropout.

mod codec;
mod tokens;

pub use codec::{decode_mask, encode_mask, MASK_HEADER_LEN};
pub use tokens::{block_layout, patchify, unpatchify, TokenGrid, TokenLevel};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    Random,
    Blockwise,
    Attention,
    PatchDropout,
}

impl MaskStrategy {
    pub fn code(self) -> u32 {
        match self {
            MaskStrategy::Random => 0,
            MaskStrategy::Blockwise => 1,
            MaskStrategy::Attention => 2,
            MaskStrategy::PatchDropout => 3,
        }
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Some(match c {
            0 => MaskStrategy::Random,
            1 => MaskStrategy::Blockwise,
            2 => MaskStrategy::Attention,
            3 => MaskStrategy::PatchDropout,
            _ => return None,
        })
    }
}

/// Visibility over `N` tokens. `masked_idx` and `hint_idx` are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVector {
    pub visible: Vec<bool>,
    pub masked_idx: Vec<usize>,
    pub hint_idx: Vec<usize>,
    pub strategy: MaskStrategy,
    /// Masking ratio the mask was drawn with.
    pub ratio: f64,
    /// Hint ratio (attention-guided only, else 0).
    pub hint_ratio: f64,
}

impl MaskVector {
    pub fn from_masked(
        n: usize,
        mut masked: Vec<usize>,
        mut hints: Vec<usize>,
        strategy: MaskStrategy,
        ratio: f64,
        hint_ratio: f64,
    ) -> Self {
        masked.sort_unstable();
        masked.dedup();
        hints.sort_unstable();
        hints.dedup();
        let mut visible = vec![true; n];
        for &i in &masked {
            visible[i] = false;
        }
        MaskVector {
            visible,
            masked_idx: masked,
            hint_idx: hints,
            strategy,
            ratio,
            hint_ratio,
        }
    }

    pub fn all_visible(n: usize, strategy: MaskStrategy) -> Self {
        Self::from_masked(n, Vec::new(), Vec::new(), strategy, 0.0, 0.0)
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.masked_idx.len()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        !self.visible[i]
    }

    pub fn masked_flags(&self) -> Vec<bool> {
        self.visible.iter().map(|v| !v).collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n];
        for &i in &self.masked_idx {
            if i >= n || self.visible[i] {
                return Err(invalid(format!("masked index {i} inconsistent with visibility")));
            }
            seen[i] = true;
        }
        if self.visible.iter().zip(&seen).any(|(&v, &s)| !v && !s) {
            return Err(invalid("invisible token missing from masked_idx"));
        }
        if self.hint_idx.iter().any(|&h| h >= n || seen[h]) {
            return Err(invalid("hint index is masked or out of range"));
        }
        Ok(())
    }
}

/// Knobs controlling every masking strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Student masking ratio.
    pub r: f64,
    /// Hint ratio kept visible among the highest-attention candidates.
    pub s: f64,
    /// Teacher patch-drop ratio.
    pub r_t: f64,
    /// Block edge in tokens (blockwise strategy).
    pub block_edge: usize,
    /// Student masking strategy.
    pub strategy: MaskStrategy,
    /// Rank ascending instead of descending (low-attending masking).
    pub invert_ranking: bool,
    /// Positions the noisy teacher never saw rank last and are neither
    /// masked nor hinted; when off, their attention values are used as is.
    pub exclude_dropped: bool,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            r: 0.7,
            s: 0.1,
            r_t: 0.7,
            block_edge: 2,
            strategy: MaskStrategy::Attention,
            invert_ranking: false,
            exclude_dropped: true,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(invalid(format!("masking.r = {} outside [0, 1]", self.r)));
        }
        if !(self.s >= 0.0 && (self.s < self.r || (self.s == 0.0 && self.r == 0.0))) {
            return Err(invalid(format!(
                "masking.s = {} must satisfy 0 <= s < r (r = {})",
                self.s, self.r
            )));
        }
        if !(0.0..=1.0).contains(&self.r_t) {
            return Err(invalid(format!("masking.r_t = {} outside [0, 1]", self.r_t)));
        }
        if self.block_edge == 0 {
            return Err(invalid("masking.block_edge must be positive"));
        }
        if self.strategy == MaskStrategy::PatchDropout {
            return Err(invalid("patch_dropout is a teacher-side strategy"));
        }
        Ok(())
    }
}

/// `⌈ratio·n⌉`, robust to floating error in the product (0.7·10 = 7).
pub fn ceil_count(ratio: f64, n: usize) -> usize {
    let x = ratio * n as f64;
    let r = x.round();
    let c = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (c.max(0.0) as usize).min(n)
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(invalid(format!("ratio {ratio} outside [0, 1]")));
    }
    Ok(())
}

/// Masks exactly `⌈ratio·n⌉` tokens drawn uniformly without replacement.
pub fn random_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskVector> {
    check_ratio(ratio)?;
    let k = ceil_count(ratio, n);
    // no draws for an empty mask, so a zero ratio leaves the stream untouched
    let idx = if k == 0 { Vec::new() } else { rand::seq::index::sample(rng, n, k).into_vec() };
    Ok(MaskVector::from_masked(n, idx, Vec::new(), MaskStrategy::Random, ratio, 0.0))
}

/// One axis-aligned cubic block chosen by [`blockwise_mask_with_blocks`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub origin: [usize; 3],
    pub edge: usize,
}

impl Block {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.edge)
    }
}

pub fn blockwise_mask<R: Rng + ?Sized>(
    grid: [usize; 3],
    ratio: f64,
    block_edge: usize,
    rng: &mut R,
) -> Result<MaskVector> {
    blockwise_mask_with_blocks(grid, ratio, block_edge, rng).map(|(m, _)| m)
}

/// Greedily masks random `block_edge³` blocks (overlap allowed) until the
/// masked count first reaches `⌈ratio·N⌉`.
pub fn blockwise_mask_with_blocks<R: Rng + ?Sized>(
    grid: [usize; 3],
    ratio: f64,
    block_edge: usize,
    rng: &mut R,
) -> Result<(MaskVector, Vec<Block>)> {
    check_ratio(ratio)?;
    if block_edge == 0 || grid.iter().any(|&g| g < block_edge) {
        return Err(shape(format!("block edge {block_edge} exceeds grid {grid:?}")));
    }
    let n: usize = grid.iter().product();
    let target = ceil_count(ratio, n);
    let mut masked = vec![false; n];
    let mut count = 0;
    let mut blocks = Vec::new();
    while count < target {
        let origin = [
            rng.gen_range(0..=grid[0] - block_edge),
            rng.gen_range(0..=grid[1] - block_edge),
            rng.gen_range(0..=grid[2] - block_edge),
        ];
        for d in origin[0]..origin[0] + block_edge {
            for h in origin[1]..origin[1] + block_edge {
                for w in origin[2]..origin[2] + block_edge {
                    let i = (d * grid[1] + h) * grid[2] + w;
                    if !masked[i] {
                        masked[i] = true;
                        count += 1;
                    }
                }
            }
        }
        blocks.push(Block {
            origin,
            edge: block_edge,
        });
    }
    let idx = (0..n).filter(|&i| masked[i]).collect();
    Ok((
        MaskVector::from_masked(n, idx, Vec::new(), MaskStrategy::Blockwise, ratio, 0.0),
        blocks,
    ))
}

/// Indices ordered by attention, highest first (lowest first when
/// `invert`), ties by ascending index. Excluded positions go last.
pub fn attention_ranking(satt: &[f64], excluded: Option<&[bool]>, invert: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..satt.len()).collect();
    let ex = |i: usize| excluded.map_or(false, |e| e[i]);
    order.sort_by(|&a, &b| {
        ex(a).cmp(&ex(b))
            .then_with(|| {
                let o = satt[b].partial_cmp(&satt[a]).expect("finite attention");
                if invert { o.reverse() } else { o }
            })
            .then(a.cmp(&b))
    });
    order
}

/// Attention-guided masking: the top `⌈rN⌉` ranked tokens are candidates,
/// the top `⌈sN⌉` of them stay visible as hints, the rest are masked.
pub fn attention_guided_mask(satt: &[f64], cfg: &MaskingConfig) -> Result<MaskVector> {
    attention_guided_mask_excluding(satt, None, cfg)
}

/// As [`attention_guided_mask`], but `excluded` positions rank below every
/// other token and are never candidates or hints.
pub fn attention_guided_mask_excluding(
    satt: &[f64],
    excluded: Option<&[bool]>,
    cfg: &MaskingConfig,
) -> Result<MaskVector> {
    let n = satt.len();
    if n == 0 {
        return Err(invalid("attention vector is empty"));
    }
    if satt.iter().any(|x| !x.is_finite()) {
        return Err(invalid("attention vector has non-finite entries"));
    }
    if let Some(e) = excluded {
        if e.len() != n {
            return Err(shape("exclusion mask length differs from attention length"));
        }
    }
    if !(0.0..=1.0).contains(&cfg.r) || !(cfg.s >= 0.0 && cfg.s <= cfg.r) {
        return Err(invalid(format!("bad ratios r = {}, s = {}", cfg.r, cfg.s)));
    }
    let ranking = attention_ranking(satt, excluded, cfg.invert_ranking);
    let eligible = n - excluded.map_or(0, |e| e.iter().filter(|&&x| x).count());
    let n_cand = ceil_count(cfg.r, n).min(eligible);
    let n_hint = ceil_count(cfg.s, n).min(n_cand);
    let hints = ranking[..n_hint].to_vec();
    let masked = ranking[n_hint..n_cand].to_vec();
    Ok(MaskVector::from_masked(n, masked, hints, MaskStrategy::Attention, cfg.r, cfg.s))
}

/// Replaces masked rows with `mask_embedding`.
pub fn apply_mask<T: Scalar>(tg: &TokenGrid<T>, m: &MaskVector, mask_embedding: &[T]) -> Result<TokenGrid<T>> {
    if m.len() != tg.len() {
        return Err(shape(format!("mask length {} vs {} tokens", m.len(), tg.len())));
    }
    if mask_embedding.len() != tg.width() {
        return Err(shape(format!(
            "mask embedding width {} vs token width {}",
            mask_embedding.len(),
            tg.width()
        )));
    }
    let mut out = tg.clone();
    let w = tg.width();
    let data = out.tokens.data_mut();
    for &i in &m.masked_idx {
        data[i * w..(i + 1) * w].copy_from_slice(mask_embedding);
    }
    Ok(out)
}

/// Teacher noise: exactly `⌈r_t·N⌉` random tokens replaced by the [MASK]
/// embedding.
pub fn patch_dropout<T: Scalar, R: Rng + ?Sized>(
    tg: &TokenGrid<T>,
    r_t: f64,
    mask_embedding: &[T],
    rng: &mut R,
) -> Result<(TokenGrid<T>, MaskVector)> {
    let m = dropout_mask(tg.len(), r_t, rng)?;
    Ok((apply_mask(tg, &m, mask_embedding)?, m))
}

/// Index selection used by [`patch_dropout`].
pub fn dropout_mask<R: Rng + ?Sized>(n: usize, r_t: f64, rng: &mut R) -> Result<MaskVector> {
    let mut m = random_mask(n, r_t, rng)?;
    m.strategy = MaskStrategy::PatchDropout;
    Ok(m)
}

fn integer_factor(coarse: [usize; 3], fine: [usize; 3]) -> Result<[usize; 3]> {
    let mut f = [0; 3];
    for a in 0..3 {
        if coarse[a] == 0 || fine[a] % coarse[a] != 0 {
            return Err(shape(format!("grid {fine:?} is not an integer multiple of {coarse:?}")));
        }
        f[a] = fine[a] / coarse[a];
    }
    Ok(f)
}

fn cell_members(cell: usize, coarse: [usize; 3], fine: [usize; 3], f: [usize; 3]) -> impl Iterator<Item = usize> {
    let cd = cell / (coarse[1] * coarse[2]);
    let ch = (cell / coarse[2]) % coarse[1];
    let cw = cell % coarse[2];
    (0..f[0]).flat_map(move |i| {
        (0..f[1]).flat_map(move |j| {
            (0..f[2]).map(move |k| ((cd * f[0] + i) * fine[1] + ch * f[1] + j) * fine[2] + cw * f[2] + k)
        })
    })
}

/// Expands a mask on a coarse grid to every aligned fine-grid token.
pub fn broadcast_mask(m: &MaskVector, coarse: [usize; 3], fine: [usize; 3]) -> Result<MaskVector> {
    if m.len() != coarse.iter().product::<usize>() {
        return Err(shape(format!("mask length {} vs grid {coarse:?}", m.len())));
    }
    let f = integer_factor(coarse, fine)?;
    let n = fine.iter().product();
    let expand = |idx: &[usize]| -> Vec<usize> {
        idx.iter().flat_map(|&c| cell_members(c, coarse, fine, f)).collect()
    };
    Ok(MaskVector::from_masked(
        n,
        expand(&m.masked_idx),
        expand(&m.hint_idx),
        m.strategy,
        m.ratio,
        m.hint_ratio,
    ))
}

/// Coarse-grid flags: a cell is set when every aligned fine token is set.
pub fn pool_all(flags: &[bool], fine: [usize; 3], coarse: [usize; 3]) -> Result<Vec<bool>> {
    if flags.len() != fine.iter().product::<usize>() {
        return Err(shape("flag length does not match fine grid"));
    }
    let f = integer_factor(coarse, fine)?;
    Ok((0..coarse.iter().product())
        .map(|c| cell_members(c, coarse, fine, f).all(|i| flags[i]))
        .collect())
}

/// Coarse mask whose masked cells are exactly the fully masked fine cells.
pub fn pool_mask(m: &MaskVector, fine: [usize; 3], coarse: [usize; 3]) -> Result<MaskVector> {
    let pooled = pool_all(&m.masked_flags(), fine, coarse)?;
    let hint_flags: Vec<bool> = {
        let mut h = vec![false; m.len()];
        for &i in &m.hint_idx {
            h[i] = true;
        }
        h
    };
    let hints = pool_all(&hint_flags, fine, coarse)?;
    let masked = (0..pooled.len()).filter(|&i| pooled[i]).collect();
    let hints = (0..hints.len()).filter(|&i| hints[i]).collect();
    Ok(MaskVector::from_masked(pooled.len(), masked, hints, m.strategy, m.ratio, m.hint_ratio))
}
