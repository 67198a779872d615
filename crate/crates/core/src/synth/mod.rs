//! Synthetic visually-rich documents.
//!
//! Pages live on a 0..1000 integer grid and are laid out on a fixed slot
//! lattice (4 columns x 8 rows). Each block occupies one slot, so boxes
//! never overlap and reading order is top-to-bottom, left-to-right by
//! construction. Cross-modal structure is manufactured deliberately:
//!
//! * the rendered pixel intensity of a block encodes its mean token id, so
//!   vision alone can recover text content;
//! * the first token of a block is a role marker and (vocab permitting) the
//!   second token names the block's slot, so text alone can recover layout;
//! * entity roles are tied to both a page band and the marker token, so
//!   either modality carries the labeling signal.
//!
//! Documents are generated independently per index from a seed stream,
//! which makes generation order-free and exactly reproducible.

pub mod io;
pub mod render;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::{derive_seed, streams};

/// Page coordinate bound: boxes live on `0..=1000`.
pub const PAGE_UNITS: u32 = 1000;

/// Slot lattice used by the generator.
pub const SLOT_COLS: u32 = 4;
pub const SLOT_ROWS: u32 = 8;
pub const SLOT_COUNT: usize = (SLOT_COLS * SLOT_ROWS) as usize;
const SLOT_W: u32 = PAGE_UNITS / SLOT_COLS;
const SLOT_H: u32 = PAGE_UNITS / SLOT_ROWS;
const INSET_X: u32 = 15;
const INSET_TOP: u32 = 12;
const INSET_BOTTOM: u32 = 13;

/// Reserved vocabulary ids. 0..=4 are the specials; role markers and slot
/// names follow; everything above is content.
pub const FIRST_MARKER_ID: u32 = 5;
pub const FIRST_SLOT_ID: u32 = FIRST_MARKER_ID + 4;
pub const FIRST_CONTENT_ID: u32 = FIRST_SLOT_ID + SLOT_COUNT as u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EntityRole {
    Header,
    Question,
    Answer,
    Other,
}

impl EntityRole {
    pub const ALL: [EntityRole; 4] = [
        EntityRole::Header,
        EntityRole::Question,
        EntityRole::Answer,
        EntityRole::Other,
    ];

    pub fn index(self) -> usize {
        match self {
            EntityRole::Header => 0,
            EntityRole::Question => 1,
            EntityRole::Answer => 2,
            EntityRole::Other => 3,
        }
    }

    pub fn marker_token(self, vocab_size: usize) -> u32 {
        let span = (vocab_size as u32).saturating_sub(FIRST_MARKER_ID).max(1);
        FIRST_MARKER_ID + (self.index() as u32 % span)
    }
}

/// One OCR-style text segment: token ids plus a page-grid bounding box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBlock {
    pub tokens: Vec<u32>,
    /// `(x0, y0, x1, y1)` on the `0..=1000` page grid, half-open semantics
    /// are not implied: boxes are closed rectangles with `x0 < x1`, `y0 < y1`.
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    pub entity_role: EntityRole,
}

impl TextBlock {
    pub fn width(&self) -> u32 {
        self.bbox[2] - self.bbox[0]
    }

    pub fn height(&self) -> u32 {
        self.bbox[3] - self.bbox[1]
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    fn validate(&self) -> Result<(), String> {
        let [x0, y0, x1, y1] = self.bbox;
        if !(x0 < x1 && x1 <= PAGE_UNITS && y0 < y1 && y1 <= PAGE_UNITS) {
            return Err(format!("invalid box {:?}", self.bbox));
        }
        if self.tokens.is_empty() {
            return Err("empty token list".into());
        }
        Ok(())
    }
}

/// Row-major grayscale page raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDocument {
    pub doc_id: String,
    pub doc_class: u32,
    /// Blocks in reading order: top-to-bottom, then left-to-right.
    pub blocks: Vec<TextBlock>,
    pub image: Image,
}

/// Intersection area of two page-grid boxes, in square units.
pub fn box_intersection_area(a: [u32; 4], b: [u32; 4]) -> u64 {
    let w = (a[2].min(b[2]) as i64 - a[0].max(b[0]) as i64).max(0) as u64;
    let h = (a[3].min(b[3]) as i64 - a[1].max(b[1]) as i64).max(0) as u64;
    w * h
}

pub fn validate_document(doc: &SyntheticDocument) -> Result<(), SynthError> {
    for (i, b) in doc.blocks.iter().enumerate() {
        b.validate().map_err(|detail| SynthError::InvalidDocument {
            doc_id: doc.doc_id.clone(),
            detail: format!("block {i}: {detail}"),
        })?;
    }
    for i in 0..doc.blocks.len() {
        for j in i + 1..doc.blocks.len() {
            if box_intersection_area(doc.blocks[i].bbox, doc.blocks[j].bbox) != 0 {
                return Err(SynthError::InvalidDocument {
                    doc_id: doc.doc_id.clone(),
                    detail: format!("blocks {i} and {j} overlap"),
                });
            }
        }
    }
    if doc.image.data.len() != doc.image.height * doc.image.width {
        return Err(SynthError::InvalidDocument {
            doc_id: doc.doc_id.clone(),
            detail: "image data length does not match dims".into(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub num_docs: usize,
    pub vocab_size: usize,
    /// Inclusive range of blocks per document.
    pub blocks_per_doc: (usize, usize),
    /// Inclusive range of tokens per block.
    pub tokens_per_block: (usize, usize),
    pub image_height: usize,
    pub image_width: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Priors over [HEADER, QUESTION, ANSWER, OTHER].
    pub role_priors: [f64; 4],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            num_docs: 1,
            vocab_size: 64,
            blocks_per_doc: (3, 10),
            tokens_per_block: (3, 6),
            image_height: 64,
            image_width: 64,
            num_classes: 4,
            seed: 0,
            role_priors: [0.15, 0.30, 0.30, 0.25],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.num_docs == 0 {
            return Err(SynthError::InvalidConfig("num_docs must be positive".into()));
        }
        if self.vocab_size < 8 {
            return Err(SynthError::InvalidConfig(format!(
                "vocab_size {} < 8 (5 specials + at least 3 content ids)",
                self.vocab_size
            )));
        }
        let (bmin, bmax) = self.blocks_per_doc;
        if bmin == 0 || bmin > bmax {
            return Err(SynthError::InvalidConfig(format!("bad blocks_per_doc range ({bmin}, {bmax})")));
        }
        let (tmin, tmax) = self.tokens_per_block;
        if tmin == 0 || tmin > tmax {
            return Err(SynthError::InvalidConfig(format!("bad tokens_per_block range ({tmin}, {tmax})")));
        }
        if self.image_height < 8 || self.image_width < 8 {
            return Err(SynthError::InvalidConfig("image must be at least 8x8".into()));
        }
        if self.num_classes == 0 {
            return Err(SynthError::InvalidConfig("num_classes must be positive".into()));
        }
        if self.role_priors.iter().any(|&p| p < 0.0) || self.role_priors.iter().sum::<f64>() <= 0.0 {
            return Err(SynthError::InvalidConfig("role_priors must be non-negative and sum > 0".into()));
        }
        Ok(())
    }
}

fn slot_box(slot: usize) -> [u32; 4] {
    let row = slot as u32 / SLOT_COLS;
    let col = slot as u32 % SLOT_COLS;
    let x0 = col * SLOT_W + INSET_X;
    let y0 = row * SLOT_H + INSET_TOP;
    [x0, y0, x0 + SLOT_W - 2 * INSET_X, y0 + SLOT_H - INSET_TOP - INSET_BOTTOM]
}

/// Slots a role may occupy: HEADER in the top band, QUESTION left /
/// ANSWER right in the middle band, OTHER at the bottom.
fn role_slots(role: EntityRole) -> Vec<usize> {
    let mut out = Vec::new();
    for row in 0..SLOT_ROWS {
        for col in 0..SLOT_COLS {
            let ok = match role {
                EntityRole::Header => row == 0,
                EntityRole::Question => (1..=5).contains(&row) && col < SLOT_COLS / 2,
                EntityRole::Answer => (1..=5).contains(&row) && col >= SLOT_COLS / 2,
                EntityRole::Other => row >= 6,
            };
            if ok {
                out.push((row * SLOT_COLS + col) as usize);
            }
        }
    }
    out
}

fn doc_class_for(block_count: usize, cfg: &CorpusConfig) -> u32 {
    let (bmin, bmax) = cfg.blocks_per_doc;
    let span = bmax - bmin + 1;
    ((block_count - bmin) * cfg.num_classes / span) as u32
}

/// Generates the document at `index` of the corpus described by `cfg`.
/// Documents are independent: each draws from its own stream keyed by
/// `(cfg.seed, index)`, so any subset can be produced in any order.
pub fn generate_document(cfg: &CorpusConfig, index: usize) -> Result<SyntheticDocument, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, streams::DOC_GEN, index as u64));
    let (bmin, bmax) = cfg.blocks_per_doc;
    let count = rng.gen_range(bmin..=bmax);
    if count > SLOT_COUNT {
        return Err(SynthError::InfeasiblePacking(format!(
            "{count} blocks requested but the page has only {SLOT_COUNT} slots"
        )));
    }
    let mut free: Vec<Vec<usize>> = EntityRole::ALL.iter().map(|&r| role_slots(r)).collect();
    let (tmin, tmax) = cfg.tokens_per_block;
    let v = cfg.vocab_size;
    let has_slot_tokens = v as u32 > FIRST_CONTENT_ID;
    let content_lo = if has_slot_tokens { FIRST_CONTENT_ID } else { FIRST_MARKER_ID };
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        // Draw a role from the priors, renormalized over bands with room.
        let open: Vec<usize> = (0..4).filter(|&r| !free[r].is_empty()).collect();
        if open.is_empty() {
            return Err(SynthError::InfeasiblePacking("all slot bands are full".into()));
        }
        let total: f64 = open.iter().map(|&r| cfg.role_priors[r]).sum();
        let role_idx = if total <= 0.0 {
            open[rng.gen_range(0..open.len())]
        } else {
            let draw = rng.gen_range(0.0..total);
            let mut acc = 0.0;
            let mut picked = open[open.len() - 1];
            for &r in &open {
                acc += cfg.role_priors[r];
                if draw < acc {
                    picked = r;
                    break;
                }
            }
            picked
        };
        let role = EntityRole::ALL[role_idx];
        let slot_pos = rng.gen_range(0..free[role_idx].len());
        let slot = free[role_idx].remove(slot_pos);
        let k = rng.gen_range(tmin..=tmax);
        let mut tokens = Vec::with_capacity(k);
        tokens.push(role.marker_token(v));
        if k >= 2 {
            if has_slot_tokens {
                tokens.push(FIRST_SLOT_ID + slot as u32);
            } else {
                tokens.push(rng.gen_range(content_lo..v as u32));
            }
        }
        if k >= 3 {
            let content = rng.gen_range(content_lo..v as u32);
            tokens.extend(std::iter::repeat(content).take(k - 2));
        }
        blocks.push(TextBlock { tokens, bbox: slot_box(slot), entity_role: role });
    }
    blocks.sort_by_key(|b| (b.bbox[1], b.bbox[0]));
    let image = render::render_image(&blocks, v, cfg.image_height, cfg.image_width);
    let doc = SyntheticDocument {
        doc_id: format!("{:016x}-{:06}", cfg.seed, index),
        doc_class: doc_class_for(count, cfg),
        blocks,
        image,
    };
    validate_document(&doc)?;
    Ok(doc)
}

/// Generates the whole corpus, in index order.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<SyntheticDocument>, SynthError> {
    cfg.validate()?;
    (0..cfg.num_docs).map(|i| generate_document(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_corpora() {
        let cfg = CorpusConfig { num_docs: 5, seed: 7, ..CorpusConfig::default() };
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn out_of_order_generation_matches_sequential() {
        let cfg = CorpusConfig { num_docs: 6, seed: 3, ..CorpusConfig::default() };
        let seq = generate_corpus(&cfg).unwrap();
        for &i in &[5usize, 0, 3] {
            assert_eq!(generate_document(&cfg, i).unwrap(), seq[i]);
        }
    }

    #[test]
    fn single_block_range_yields_single_block_docs() {
        let cfg = CorpusConfig { num_docs: 20, blocks_per_doc: (1, 1), seed: 1, ..CorpusConfig::default() };
        for doc in generate_corpus(&cfg).unwrap() {
            assert_eq!(doc.blocks.len(), 1);
        }
    }

    #[test]
    fn role_distribution_tracks_priors() {
        let cfg = CorpusConfig { num_docs: 2000, seed: 1, ..CorpusConfig::default() };
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for i in 0..cfg.num_docs {
            let doc = generate_document(&cfg, i).unwrap();
            for b in &doc.blocks {
                counts[b.entity_role.index()] += 1;
                total += 1;
            }
        }
        for (r, &c) in counts.iter().enumerate() {
            let frac = c as f64 / total as f64;
            let prior = cfg.role_priors[r];
            assert!(
                (frac - prior).abs() <= 0.10 * prior,
                "role {r}: fraction {frac:.4} vs prior {prior:.2}"
            );
        }
    }

    #[test]
    fn blocks_never_overlap_and_stay_on_page() {
        let cfg = CorpusConfig { num_docs: 50, seed: 11, ..CorpusConfig::default() };
        for doc in generate_corpus(&cfg).unwrap() {
            for b in &doc.blocks {
                assert!(b.bbox[0] < b.bbox[2] && b.bbox[2] <= PAGE_UNITS);
                assert!(b.bbox[1] < b.bbox[3] && b.bbox[3] <= PAGE_UNITS);
            }
            for i in 0..doc.blocks.len() {
                for j in i + 1..doc.blocks.len() {
                    assert_eq!(box_intersection_area(doc.blocks[i].bbox, doc.blocks[j].bbox), 0);
                }
            }
        }
    }

    #[test]
    fn reading_order_is_top_to_bottom_left_to_right() {
        let cfg = CorpusConfig { num_docs: 20, seed: 9, ..CorpusConfig::default() };
        for doc in generate_corpus(&cfg).unwrap() {
            for pair in doc.blocks.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                assert!((a.bbox[1], a.bbox[0]) <= (b.bbox[1], b.bbox[0]));
            }
        }
    }

    #[test]
    fn doc_class_reflects_block_count_band() {
        let cfg = CorpusConfig { num_docs: 200, seed: 4, ..CorpusConfig::default() };
        for doc in generate_corpus(&cfg).unwrap() {
            assert_eq!(doc.doc_class, doc_class_for(doc.blocks.len(), &cfg));
            assert!((doc.doc_class as usize) < cfg.num_classes);
        }
    }

    #[test]
    fn too_many_blocks_is_an_infeasible_packing() {
        let cfg = CorpusConfig {
            num_docs: 1,
            blocks_per_doc: (SLOT_COUNT + 1, SLOT_COUNT + 1),
            ..CorpusConfig::default()
        };
        assert!(matches!(
            generate_document(&cfg, 0),
            Err(SynthError::InfeasiblePacking(_))
        ));
    }

    #[test]
    fn tiny_vocab_is_rejected() {
        let cfg = CorpusConfig { vocab_size: 7, ..CorpusConfig::default() };
        assert!(matches!(cfg.validate(), Err(SynthError::InvalidConfig(_))));
    }

    #[test]
    fn overlapping_blocks_fail_validation() {
        let block = |bbox: [u32; 4]| TextBlock { tokens: vec![9], bbox, entity_role: EntityRole::Other };
        let doc = SyntheticDocument {
            doc_id: "t".into(),
            doc_class: 0,
            blocks: vec![block([0, 0, 100, 100]), block([50, 50, 150, 150])],
            image: Image::zeros(16, 16),
        };
        assert!(matches!(validate_document(&doc), Err(SynthError::InvalidDocument { .. })));
    }

    #[test]
    fn pixel_readout_recovers_block_content() {
        // Cross-modal learnability witness: the mean pixel over a block's
        // footprint equals the rendered intensity exactly, which inverts to
        // the block's mean token id.
        let cfg = CorpusConfig { num_docs: 20, seed: 13, ..CorpusConfig::default() };
        let mut checked = 0usize;
        'outer: for i in 0..cfg.num_docs {
            let doc = generate_document(&cfg, i).unwrap();
            for b in &doc.blocks {
                let (r0, r1, c0, c1) = render::pixel_rect(b.bbox, doc.image.height, doc.image.width);
                assert!(r1 > r0 && c1 > c0, "footprint must be non-empty");
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for r in r0..r1 {
                    for c in c0..c1 {
                        sum += doc.image.get(r, c) as f64;
                        n += 1;
                    }
                }
                let readout = sum / n as f64;
                let expected = render::block_intensity(b, cfg.vocab_size) as f64;
                assert_eq!(readout, expected, "pixel mean must equal the rendered intensity");
                let mean_tok = b.tokens.iter().map(|&t| t as f64).sum::<f64>() / b.tokens.len() as f64;
                let recovered = readout * (cfg.vocab_size as f64 + 1.0) - 1.0;
                assert!((recovered - mean_tok).abs() < 1e-4);
                checked += 1;
                if checked >= 100 {
                    break 'outer;
                }
            }
        }
        assert!(checked >= 100);
    }
}
