//! Corrupted inputs and targets for the three pre-training objectives.
//!
//! Text gets Poisson-length span masking, patches get blockwise masking, and
//! the word-patch alignment labels are derived from both masks.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::docmodel::{tokenize_image, EncodedInput, MASK_ID, NUM_RESERVED};
use crate::error::{Error, Result};
use crate::geometry::PatchGrid;

/// How a masked text position is corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplacementPolicy {
    pub mask_prob: f64,
    pub random_prob: f64,
    pub keep_prob: f64,
}

impl ReplacementPolicy {
    pub const BERT: ReplacementPolicy = ReplacementPolicy { mask_prob: 0.8, random_prob: 0.1, keep_prob: 0.1 };
    pub const ALL_MASK: ReplacementPolicy = ReplacementPolicy { mask_prob: 1.0, random_prob: 0.0, keep_prob: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskingConfig {
    pub text_ratio: f64,
    pub span_lambda: f64,
    pub span_max: usize,
    pub image_ratio: f64,
    pub min_block_patches: usize,
    pub block_aspect_range: (f64, f64),
    pub mlm_replacement: ReplacementPolicy,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            text_ratio: 0.30,
            span_lambda: 3.0,
            span_max: 10,
            image_ratio: 0.40,
            min_block_patches: 4,
            block_aspect_range: (0.3, 1.0 / 0.3),
            mlm_replacement: ReplacementPolicy::BERT,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        for (name, r) in [("text_ratio", self.text_ratio), ("image_ratio", self.image_ratio)] {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("{name} {r} outside [0, 1]"));
            }
        }
        if !(self.span_lambda > 0.0) || self.span_max == 0 {
            return fail(format!("span lambda {} / max {} must be positive", self.span_lambda, self.span_max));
        }
        let (lo, hi) = self.block_aspect_range;
        if !(lo > 0.0 && hi >= lo) || ((lo * hi) - 1.0).abs() > 1e-2 {
            return fail(format!("aspect range ({lo}, {hi}) must be positive and reciprocal-symmetric"));
        }
        if self.min_block_patches == 0 {
            return fail("min_block_patches must be positive".into());
        }
        let p = self.mlm_replacement;
        if [p.mask_prob, p.random_prob, p.keep_prob].iter().any(|&v| v < 0.0)
            || (p.mask_prob + p.random_prob + p.keep_prob - 1.0).abs() > 1e-9
        {
            return fail("replacement probabilities must be non-negative and sum to 1".into());
        }
        Ok(())
    }
}

/// Masked positions and every target the objectives need.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskingPlan {
    /// Masked text token positions (`L'`).
    pub masked_text: BTreeSet<usize>,
    /// Masked patch indices (`M'`).
    pub masked_patches: BTreeSet<usize>,
    pub text_replacements: BTreeMap<usize, Replacement>,
    /// Image-token target per masked patch.
    pub mim_targets: BTreeMap<usize, u32>,
    /// Alignment label per unmasked word position; `true` = aligned.
    pub wpa_labels: BTreeMap<usize, bool>,
}

impl MaskingPlan {
    /// Token id fed to the model at text position `i`.
    pub fn input_token(&self, i: usize, original: u32) -> u32 {
        match self.text_replacements.get(&i) {
            Some(Replacement::Mask) => MASK_ID,
            Some(Replacement::Random(id)) => *id,
            Some(Replacement::Keep) | None => original,
        }
    }
}

/// Indices in `0..n_maskable` covered by Poisson-length spans, the last one
/// clipped so exactly `round(ratio * n_maskable)` indices are masked.
pub fn sample_text_spans<R: Rng + ?Sized>(n_maskable: usize, cfg: &MaskingConfig, rng: &mut R) -> BTreeSet<usize> {
    let budget = (cfg.text_ratio * n_maskable as f64).round() as usize;
    let mut masked = BTreeSet::new();
    if budget == 0 {
        return masked;
    }
    let poisson = Poisson::new(cfg.span_lambda).expect("span lambda validated positive");
    let mut unmasked: Vec<usize> = (0..n_maskable).collect();
    while masked.len() < budget && !unmasked.is_empty() {
        let drawn: f64 = poisson.sample(rng);
        let len = (drawn as usize).clamp(1, cfg.span_max);
        let start = unmasked[rng.random_range(0..unmasked.len())];
        for p in (start..(start + len).min(n_maskable)).take(budget - masked.len()) {
            masked.insert(p);
        }
        unmasked.retain(|p| !masked.contains(p));
    }
    masked
}

/// One sampled rectangle of patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBlock {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchBlock {
    pub fn indices(&self, g: &PatchGrid) -> impl Iterator<Item = usize> + '_ {
        let cols = g.cols;
        (self.top..self.top + self.height)
            .flat_map(move |r| (self.left..self.left + self.width).map(move |c| r * cols + c))
    }
}

/// Result of blockwise masking, with the blocks that produced it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockMask {
    pub patches: BTreeSet<usize>,
    pub blocks: Vec<PatchBlock>,
}

fn admissible_shapes(g: &PatchGrid, cfg: &MaskingConfig) -> Vec<(usize, usize)> {
    let (lo, hi) = cfg.block_aspect_range;
    let mut out = vec![];
    for h in 1..=g.rows {
        for w in 1..=g.cols {
            let aspect = h as f64 / w as f64;
            if h * w >= cfg.min_block_patches && aspect >= lo - 1e-12 && aspect <= hi + 1e-12 {
                out.push((h, w));
            }
        }
    }
    out
}

const BLOCK_ATTEMPTS: usize = 10;
const STALL_LIMIT: usize = 10_000;

/// Masks rectangles of patches until at least `ceil(image_ratio * M)` are
/// covered. Block area is drawn uniformly between the minimum and the
/// remaining budget and the aspect ratio log-uniformly from the range.
pub fn sample_image_blocks<R: Rng + ?Sized>(g: &PatchGrid, cfg: &MaskingConfig, rng: &mut R) -> Result<BlockMask> {
    let total = g.len();
    let target = ((cfg.image_ratio * total as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut out = BlockMask::default();
    if target == 0 {
        return Ok(out);
    }
    let shapes = admissible_shapes(g, cfg);
    if shapes.is_empty() {
        return Err(Error::Masking(format!(
            "{}x{} grid cannot fit a block of {} patches with aspect in {:?}",
            g.rows, g.cols, cfg.min_block_patches, cfg.block_aspect_range
        )));
    }
    let smallest = shapes.iter().map(|(h, w)| h * w).min().unwrap_or(1);
    let (log_lo, log_hi) = (cfg.block_aspect_range.0.ln(), cfg.block_aspect_range.1.ln());
    let mut stalled = 0;
    while out.patches.len() < target {
        let remaining = target - out.patches.len();
        let max_area = remaining.max(smallest);
        let mut shape = None;
        for _ in 0..BLOCK_ATTEMPTS {
            let area = rng.random_range(cfg.min_block_patches as f64..=max_area.max(cfg.min_block_patches) as f64);
            let aspect = if log_hi > log_lo { rng.random_range(log_lo..=log_hi).exp() } else { log_lo.exp() };
            let h = (area * aspect).sqrt().round() as usize;
            let w = (area / aspect).sqrt().round() as usize;
            if shapes.contains(&(h, w)) {
                shape = Some((h, w));
                break;
            }
        }
        let (h, w) = match shape {
            Some(s) => s,
            None => {
                // fall back to the admissible shapes that fit the budget best
                let fitting: Vec<_> = shapes.iter().filter(|(h, w)| h * w <= max_area).copied().collect();
                let pool = if fitting.is_empty() { &shapes } else { &fitting };
                pool[rng.random_range(0..pool.len())]
            }
        };
        let block = PatchBlock {
            top: rng.random_range(0..=g.rows - h),
            left: rng.random_range(0..=g.cols - w),
            height: h,
            width: w,
        };
        let before = out.patches.len();
        out.patches.extend(block.indices(g));
        if out.patches.len() > before {
            out.blocks.push(block);
            stalled = 0;
        } else {
            stalled += 1;
            if stalled > STALL_LIMIT {
                return Err(Error::Masking("block sampler made no progress".into()));
            }
        }
    }
    Ok(out)
}

/// Alignment labels: for every word position outside `masked_text`,
/// aligned iff none of its patches is masked. Tokens with no patches are
/// aligned.
pub fn build_wpa_labels(
    incidence: &[BTreeSet<usize>],
    word_positions: impl IntoIterator<Item = usize>,
    masked_text: &BTreeSet<usize>,
    masked_patches: &BTreeSet<usize>,
) -> BTreeMap<usize, bool> {
    word_positions
        .into_iter()
        .filter(|p| !masked_text.contains(p))
        .map(|p| (p, incidence[p].iter().all(|k| !masked_patches.contains(k))))
        .collect()
}

/// Builds the full plan for one encoded document. `text_vocab` bounds the
/// ids drawn for random replacements; `image_vocab` sizes the MIM codebook.
pub fn build_plan<R: Rng + ?Sized>(
    enc: &EncodedInput,
    cfg: &MaskingConfig,
    text_vocab: usize,
    image_vocab: usize,
    rng: &mut R,
) -> Result<MaskingPlan> {
    cfg.validate()?;
    let words = enc.word_positions();
    let masked_text: BTreeSet<usize> =
        sample_text_spans(words.len(), cfg, rng).into_iter().map(|i| i + words.start).collect();

    let p = cfg.mlm_replacement;
    let mut text_replacements = BTreeMap::new();
    for &pos in &masked_text {
        let u: f64 = rng.random();
        let r = if u < p.mask_prob {
            Replacement::Mask
        } else if u < p.mask_prob + p.random_prob && text_vocab > NUM_RESERVED as usize {
            Replacement::Random(rng.random_range(NUM_RESERVED..text_vocab as u32))
        } else {
            Replacement::Keep
        };
        text_replacements.insert(pos, r);
    }

    let masked_patches = sample_image_blocks(&enc.grid, cfg, rng)?.patches;
    let mim_targets = if masked_patches.is_empty() {
        BTreeMap::new()
    } else {
        let tokens = tokenize_image(&enc.patch_pixels, enc.channels, image_vocab)?;
        masked_patches.iter().map(|&k| (k, tokens[k])).collect()
    };
    let wpa_labels = build_wpa_labels(&enc.incidence, words, &masked_text, &masked_patches);
    Ok(MaskingPlan { masked_text, masked_patches, text_replacements, mim_targets, wpa_labels })
}
