//! Pretraining supervision: masking plans and label generation for MVLM,
//! TIPA, RWTP, and BTIA.
//!
//! All plans for one document draw from a single seeded stream in fixed
//! order (MVLM, then TIPA, then BTIA), so a `(document, seed)` pair fully
//! determines the supervision. Geometry labels are computed on the 0..1000
//! integer page grid, where closed-form areas agree exactly with
//! pixel-counting oracles.

pub mod diou;
pub mod dump;
pub mod losses;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{TokenizedDoc, VocabSpec};
use crate::error::TensorError;
use crate::synth::render::cover_regions;
use crate::synth::{Image, SyntheticDocument, TextBlock, PAGE_UNITS};

/// Fraction of content tokens / blocks each plan masks.
pub const MASK_FRACTION: f64 = 0.15;

/// Target id that `cross_entropy_from_logits` skips.
pub const IGNORE_INDEX: i64 = -100;

/// Per-document mask count: `round(fraction * count)`, at least 1.
pub fn masked_count(count: usize) -> usize {
    ((MASK_FRACTION * count as f64).round() as usize).max(1)
}

fn sample_distinct(rng: &mut ChaCha8Rng, pool: &[usize], k: usize) -> Vec<usize> {
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    let mut picked = shuffled[..k].to_vec();
    picked.sort_unstable();
    picked
}

// ── MVLM ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Replacement {
    Mask,
    Random,
    Unchanged,
}

/// Which text positions MVLM corrupts, how, and their original ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MvlmPlan {
    /// Masked sequence positions, sorted.
    pub positions: Vec<usize>,
    pub replacement: Vec<Replacement>,
    pub targets: Vec<u32>,
}

impl MvlmPlan {
    pub fn empty() -> Self {
        MvlmPlan { positions: Vec::new(), replacement: Vec::new(), targets: Vec::new() }
    }

    /// CE target vector over the whole sequence: original ids at masked
    /// positions, `IGNORE_INDEX` everywhere else.
    pub fn target_vector(&self, n: usize) -> Vec<i64> {
        let mut t = vec![IGNORE_INDEX; n];
        for (&p, &id) in self.positions.iter().zip(&self.targets) {
            t[p] = id as i64;
        }
        t
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.positions.binary_search(&pos).is_ok()
    }
}

/// Draws the MVLM plan: exactly `round(0.15 * content)` positions (min 1),
/// replaced by `[MASK]` / a random token / unchanged with 80/10/10
/// per-position probabilities. Returns the corrupted id sequence.
pub fn plan_mvlm(
    td: &TokenizedDoc,
    vocab: VocabSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(MvlmPlan, Vec<u32>), TensorError> {
    let content = td.content_positions();
    if content.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "plan_mvlm",
            detail: "document has no content tokens".into(),
        });
    }
    let k = masked_count(content.len());
    let positions = sample_distinct(rng, &content, k);
    let mut replacement = Vec::with_capacity(k);
    let mut corrupted = td.token_ids.clone();
    let mut targets = Vec::with_capacity(k);
    for &p in &positions {
        targets.push(td.token_ids[p]);
        let u: f64 = rng.gen();
        let r = if u < 0.8 {
            corrupted[p] = VocabSpec::MASK;
            Replacement::Mask
        } else if u < 0.9 {
            corrupted[p] =
                rng.gen_range(VocabSpec::NUM_SPECIALS..vocab.size as u32);
            Replacement::Random
        } else {
            Replacement::Unchanged
        };
        replacement.push(r);
    }
    Ok((MvlmPlan { positions, replacement, targets }, corrupted))
}

// ── TIPA ────────────────────────────────────────────────────────────────

/// Blocks whose 2D positions are masked to `(0,0,0,0)`, with their true
/// boxes normalized to the unit square as regression targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipaPlan {
    /// Masked block ids, sorted.
    pub blocks: Vec<usize>,
    /// `(x0, y0, x1, y1)` in `[0, 1]`.
    pub gt_boxes: Vec<[f64; 4]>,
}

/// Block ids that still have at least one token in the sequence.
fn blocks_in_sequence(td: &TokenizedDoc) -> Vec<usize> {
    let mut present: Vec<usize> = td.block_index.iter().filter(|&&b| b >= 0).map(|&b| b as usize).collect();
    present.sort_unstable();
    present.dedup();
    present
}

pub fn plan_tipa(
    doc: &SyntheticDocument,
    td: &TokenizedDoc,
    rng: &mut ChaCha8Rng,
) -> Result<TipaPlan, TensorError> {
    let candidates = blocks_in_sequence(td);
    if candidates.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "plan_tipa",
            detail: "no blocks present in the tokenized sequence".into(),
        });
    }
    let k = masked_count(candidates.len());
    let blocks = sample_distinct(rng, &candidates, k);
    let gt_boxes = blocks
        .iter()
        .map(|&b| {
            let [x0, y0, x1, y1] = doc.blocks[b].bbox;
            let s = PAGE_UNITS as f64;
            [x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s]
        })
        .collect();
    Ok(TipaPlan { blocks, gt_boxes })
}

/// Zeroes the boxes of every token belonging to a masked block, which
/// routes all six spatial lookups to the reserved index 0.
pub fn apply_tipa_mask(td: &TokenizedDoc, plan: &TipaPlan) -> Vec<[u32; 4]> {
    let mut boxes = td.token_boxes.clone();
    for (i, &b) in td.block_index.iter().enumerate() {
        if b >= 0 && plan.blocks.binary_search(&(b as usize)).is_ok() {
            boxes[i] = [0, 0, 0, 0];
        }
    }
    boxes
}

// ── coverage geometry ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoverageMode {
    /// `|region ∩ token| / |token|`: the default. A token box far smaller
    /// than its region can still clear the 0.5 threshold.
    Containment,
    /// `|region ∩ token| / |region ∪ token|`.
    StrictIou,
}

impl Default for CoverageMode {
    fn default() -> Self {
        CoverageMode::Containment
    }
}

impl CoverageMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "containment" => Some(CoverageMode::Containment),
            "strict-iou" => Some(CoverageMode::StrictIou),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CoverageMode::Containment => "containment",
            CoverageMode::StrictIou => "strict-iou",
        }
    }
}

/// Overlap measure in `[0, 1]` between a region box and a token box, both
/// `(x0, y0, x1, y1)` in any consistent units. Labels threshold this at a
/// strict `> 0.5`.
pub fn coverage_measure(region: [f64; 4], token: [f64; 4], mode: CoverageMode) -> f64 {
    let iw = (region[2].min(token[2]) - region[0].max(token[0])).max(0.0);
    let ih = (region[3].min(token[3]) - region[1].max(token[1])).max(0.0);
    let inter = iw * ih;
    let token_area = (token[2] - token[0]) * (token[3] - token[1]);
    debug_assert!(token_area > 0.0, "token box must have positive area");
    match mode {
        CoverageMode::Containment => inter / token_area,
        CoverageMode::StrictIou => {
            let region_area = (region[2] - region[0]) * (region[3] - region[1]);
            inter / (region_area + token_area - inter)
        }
    }
}

/// The `g*g` region tiling normalized to the unit square (the integer
/// 0..1000 grid scaled by 1/1000; cells are exactly equal when `g`
/// divides 1000).
pub fn region_boxes(g: usize) -> Vec<[f64; 4]> {
    crate::embed::region_grid_units(g)
        .into_iter()
        .map(|b| b.map(|v| v as f64 / PAGE_UNITS as f64))
        .collect()
}

fn units_f64(b: [u32; 4]) -> [f64; 4] {
    b.map(|v| v as f64)
}

// ── RWTP ────────────────────────────────────────────────────────────────

/// Binary region-token incidence labels, `m x n` row-major, with a
/// validity mask that zeroes pad and special columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RwtpLabels {
    pub m: usize,
    pub n: usize,
    pub y: Vec<u8>,
    pub valid: Vec<u8>,
}

impl RwtpLabels {
    pub fn label(&self, region: usize, token: usize) -> u8 {
        self.y[region * self.n + token]
    }
}

/// `y[i][j] = 1` iff the coverage of token j's box by region i exceeds
/// 0.5. Geometry only; token ids never enter.
pub fn rwtp_labels(td: &TokenizedDoc, mode: CoverageMode) -> RwtpLabels {
    let (m, n) = (td.m(), td.n());
    let mut y = vec![0u8; m * n];
    let mut valid = vec![0u8; m * n];
    for j in 0..n {
        if td.block_index[j] < 0 {
            continue;
        }
        let token = units_f64(td.token_boxes[j]);
        for i in 0..m {
            let region = units_f64(td.visual_region_boxes[i]);
            valid[i * n + j] = 1;
            if coverage_measure(region, token, mode) > 0.5 {
                y[i * n + j] = 1;
            }
        }
    }
    RwtpLabels { m, n, y, valid }
}

// ── BTIA ────────────────────────────────────────────────────────────────

/// Covered blocks plus the two label families of the bidirectional
/// alignment task: TIA per text position (was my region covered?) and ITA
/// per visual region (do I hold MVLM-masked text?).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtiaPlan {
    /// Covered block ids, sorted.
    pub covered_blocks: Vec<usize>,
    /// Per text position, 1 = COVERED. Zero at specials and padding.
    pub tia_labels: Vec<u8>,
    /// Per visual region, 1 = HAS_MASKED_TEXT.
    pub ita_labels: Vec<u8>,
    /// Per packed position (visual first): positions scored by the loss.
    /// Excludes pads, specials, and MVLM-masked text positions.
    pub loss_mask: Vec<u8>,
}

/// Draws the covered blocks (15%, min 1, of blocks in sequence), derives
/// both label families, and returns the covered page raster.
pub fn plan_btia(
    doc: &SyntheticDocument,
    td: &TokenizedDoc,
    mvlm: &MvlmPlan,
    mode: CoverageMode,
    rng: &mut ChaCha8Rng,
) -> Result<(BtiaPlan, Image), TensorError> {
    let candidates = blocks_in_sequence(td);
    if candidates.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "plan_btia",
            detail: "no blocks present in the tokenized sequence".into(),
        });
    }
    let k = masked_count(candidates.len());
    let covered_blocks = sample_distinct(rng, &candidates, k);
    let (m, n) = (td.m(), td.n());

    let mut tia_labels = vec![0u8; n];
    for (j, &b) in td.block_index.iter().enumerate() {
        if b >= 0 && covered_blocks.binary_search(&(b as usize)).is_ok() {
            tia_labels[j] = 1;
        }
    }

    let mut ita_labels = vec![0u8; m];
    for i in 0..m {
        let region = units_f64(td.visual_region_boxes[i]);
        let hit = mvlm.positions.iter().any(|&j| {
            td.block_index[j] >= 0 && coverage_measure(region, units_f64(td.token_boxes[j]), mode) > 0.5
        });
        if hit {
            ita_labels[i] = 1;
        }
    }

    let mut loss_mask = vec![0u8; m + n];
    for slot in loss_mask.iter_mut().take(m) {
        *slot = 1;
    }
    for j in 0..n {
        if td.pad_mask[j] && td.block_index[j] >= 0 && !mvlm.is_masked(j) {
            loss_mask[m + j] = 1;
        }
    }

    let covered_refs: Vec<&TextBlock> = covered_blocks.iter().map(|&b| &doc.blocks[b]).collect();
    let covered_image = cover_regions(&doc.image, &covered_refs);
    Ok((BtiaPlan { covered_blocks, tia_labels, ita_labels, loss_mask }, covered_image))
}

// ── one-document supervision bundle ─────────────────────────────────────

/// Every masking decision and label matrix for one document, drawn in
/// fixed order (MVLM, TIPA, BTIA) from one seeded stream.
#[derive(Debug, Clone)]
pub struct PretrainPlan {
    pub mvlm: MvlmPlan,
    /// Token ids after MVLM corruption.
    pub corrupted_ids: Vec<u32>,
    pub tipa: TipaPlan,
    /// Token boxes after TIPA position masking.
    pub masked_boxes: Vec<[u32; 4]>,
    pub rwtp: RwtpLabels,
    pub btia: BtiaPlan,
    /// Page raster after BTIA covering.
    pub covered_image: Image,
}

pub fn make_pretrain_plan(
    doc: &SyntheticDocument,
    td: &TokenizedDoc,
    vocab: VocabSpec,
    mode: CoverageMode,
    seed: u64,
) -> Result<PretrainPlan, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mvlm, corrupted_ids) = plan_mvlm(td, vocab, &mut rng)?;
    let tipa = plan_tipa(doc, td, &mut rng)?;
    let masked_boxes = apply_tipa_mask(td, &tipa);
    let rwtp = rwtp_labels(td, mode);
    let (btia, covered_image) = plan_btia(doc, td, &mvlm, mode, &mut rng)?;
    Ok(PretrainPlan { mvlm, corrupted_ids, tipa, masked_boxes, rwtp, btia, covered_image })
}
