//! Input embeddings: token sequence construction, text embedding H_t,
//! visual embedding H_v, and packing into the encoder input H_vt.
//!
//! Every token inherits its block's bounding box; six spatial tables
//! (x0, y0, x1, y1, width, height) are indexed directly by grid coordinate,
//! with index 0 reserved as the masked-position embedding. Token local
//! position ids mark begin/middle/end of each block. Visual tokens are
//! average-pooled patches of the page raster plus the region's own box
//! embeddings; text is segment 0, vision segment 1.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::synth::{Image, SyntheticDocument, PAGE_UNITS};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Special token ids at the bottom of every vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabSpec {
    pub size: usize,
}

impl VocabSpec {
    pub const PAD: u32 = 0;
    pub const CLS: u32 = 1;
    pub const SEP: u32 = 2;
    pub const MASK: u32 = 3;
    pub const UNK: u32 = 4;
    pub const NUM_SPECIALS: u32 = 5;

    pub fn new(size: usize) -> Result<Self, TensorError> {
        if size < Self::NUM_SPECIALS as usize {
            return Err(TensorError::InvalidArgument {
                op: "VocabSpec::new",
                detail: format!("vocab size {size} cannot hold the {} specials", Self::NUM_SPECIALS),
            });
        }
        Ok(VocabSpec { size })
    }

    pub fn is_special(id: u32) -> bool {
        id < Self::NUM_SPECIALS
    }
}

/// Local-position ids: 0 is reserved for specials/padding.
pub const LP_PAD: u8 = 0;
pub const LP_BEGIN: u8 = 1;
pub const LP_MIDDLE: u8 = 2;
pub const LP_END: u8 = 3;

/// Box assigned to specials and padding: the full page.
pub const SPECIAL_BOX: [u32; 4] = [0, 0, PAGE_UNITS, PAGE_UNITS];

/// A document flattened to fixed-length model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedDoc {
    pub token_ids: Vec<u32>,
    pub token_boxes: Vec<[u32; 4]>,
    pub lp_ids: Vec<u8>,
    /// All zeros: text is segment 0.
    pub segment_ids: Vec<u8>,
    /// True at real (non-pad) positions, including [CLS] and [SEP].
    pub pad_mask: Vec<bool>,
    /// Source block of each position; -1 for specials and padding.
    pub block_index: Vec<i32>,
    /// Uniform g x g tiling of the page, row-major, integer-aligned.
    pub visual_region_boxes: Vec<[u32; 4]>,
}

impl TokenizedDoc {
    pub fn n(&self) -> usize {
        self.token_ids.len()
    }

    pub fn m(&self) -> usize {
        self.visual_region_boxes.len()
    }

    /// Content positions: real tokens that are not specials.
    pub fn content_positions(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.block_index[i] >= 0).collect()
    }
}

/// Integer-aligned region tiling of the page: cell (i, j) spans
/// `[j*1000/g, (j+1)*1000/g) x [i*1000/g, (i+1)*1000/g)`, row-major.
/// Cells are exactly equal when g divides 1000 and within one unit
/// otherwise; integer alignment keeps label generation pixel-exact.
pub fn region_grid_units(g: usize) -> Vec<[u32; 4]> {
    let p = PAGE_UNITS as usize;
    let bound = |k: usize| (k * p / g) as u32;
    let mut out = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            out.push([bound(j), bound(i), bound(j + 1), bound(i + 1)]);
        }
    }
    out
}

fn lp_for(pos_in_block: usize, block_len: usize) -> u8 {
    if pos_in_block == 0 {
        // A single-token block is all begin.
        LP_BEGIN
    } else if pos_in_block + 1 == block_len {
        LP_END
    } else {
        LP_MIDDLE
    }
}

/// Flattens `doc` to a length-`n` sequence: `[CLS]` + block tokens in
/// reading order + `[SEP]` + padding. If the content overflows, the head
/// `ceil((n-2)/2)` and tail `floor((n-2)/2)` tokens are kept.
pub fn tokenize(doc: &SyntheticDocument, n: usize, grid: usize) -> Result<TokenizedDoc, TensorError> {
    if n < 3 {
        return Err(TensorError::InvalidArgument {
            op: "tokenize",
            detail: format!("sequence length {n} must be at least 3"),
        });
    }
    if grid == 0 {
        return Err(TensorError::InvalidArgument { op: "tokenize", detail: "grid must be positive".into() });
    }
    struct Entry {
        id: u32,
        bbox: [u32; 4],
        lp: u8,
        block: i32,
    }
    let mut content: Vec<Entry> = Vec::new();
    for (bi, block) in doc.blocks.iter().enumerate() {
        let k = block.tokens.len();
        for (ti, &id) in block.tokens.iter().enumerate() {
            content.push(Entry { id, bbox: block.bbox, lp: lp_for(ti, k), block: bi as i32 });
        }
    }
    let budget = n - 2;
    if content.len() > budget {
        let head = budget.div_ceil(2);
        let tail = budget - head;
        let cut_from = content.len() - tail;
        let kept_tail = content.split_off(cut_from);
        content.truncate(head);
        content.extend(kept_tail);
    }

    let mut td = TokenizedDoc {
        token_ids: Vec::with_capacity(n),
        token_boxes: Vec::with_capacity(n),
        lp_ids: Vec::with_capacity(n),
        segment_ids: vec![0; n],
        pad_mask: Vec::with_capacity(n),
        block_index: Vec::with_capacity(n),
        visual_region_boxes: region_grid_units(grid),
    };
    let push = |id: u32, bbox: [u32; 4], lp: u8, block: i32, real: bool, td: &mut TokenizedDoc| {
        td.token_ids.push(id);
        td.token_boxes.push(bbox);
        td.lp_ids.push(lp);
        td.pad_mask.push(real);
        td.block_index.push(block);
    };
    push(VocabSpec::CLS, SPECIAL_BOX, LP_PAD, -1, true, &mut td);
    for e in &content {
        push(e.id, e.bbox, e.lp, e.block, true, &mut td);
    }
    push(VocabSpec::SEP, SPECIAL_BOX, LP_PAD, -1, true, &mut td);
    while td.token_ids.len() < n {
        push(VocabSpec::PAD, SPECIAL_BOX, LP_PAD, -1, false, &mut td);
    }
    Ok(td)
}

/// Tape handles for all embedding tables.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingVars {
    pub word: Var,
    pub seq_pos: Var,
    pub x0: Var,
    pub y0: Var,
    pub x1: Var,
    pub y1: Var,
    pub width: Var,
    pub height: Var,
    pub local_pos: Var,
    pub segment: Var,
    pub visual_pos: Var,
    pub patch_proj: Var,
}

fn spatial_ids(boxes: &[[u32; 4]]) -> [Vec<usize>; 6] {
    let mut ids: [Vec<usize>; 6] = Default::default();
    for b in boxes {
        let [x0, y0, x1, y1] = *b;
        ids[0].push(x0 as usize);
        ids[1].push(y0 as usize);
        ids[2].push(x1 as usize);
        ids[3].push(y1 as usize);
        ids[4].push((x1 - x0) as usize);
        ids[5].push((y1 - y0) as usize);
    }
    ids
}

fn add_spatial<E: Scalar>(
    tape: &mut Tape<E>,
    vars: &EmbeddingVars,
    mut acc: Var,
    boxes: &[[u32; 4]],
) -> Result<Var, TensorError> {
    let ids = spatial_ids(boxes);
    let tables = [vars.x0, vars.y0, vars.x1, vars.y1, vars.width, vars.height];
    for (table, id_vec) in tables.iter().zip(ids.iter()) {
        let looked = tape.embedding_lookup(*table, id_vec)?;
        acc = tape.add(acc, looked)?;
    }
    Ok(acc)
}

/// Final text embedding `H_t[n, d]`: word + sequence position + the six
/// spatial lookups + local position + segment 0. Positions whose box is
/// `(0,0,0,0)` (position-masked blocks) hit index 0 in all six spatial
/// tables.
pub fn embed_text<E: Scalar>(
    tape: &mut Tape<E>,
    vars: &EmbeddingVars,
    td: &TokenizedDoc,
) -> Result<Var, TensorError> {
    let n = td.n();
    let word_ids: Vec<usize> = td.token_ids.iter().map(|&t| t as usize).collect();
    let mut h = tape.embedding_lookup(vars.word, &word_ids)?;
    let pos_ids: Vec<usize> = (0..n).collect();
    let pos = tape.embedding_lookup(vars.seq_pos, &pos_ids)?;
    h = tape.add(h, pos)?;
    h = add_spatial(tape, vars, h, &td.token_boxes)?;
    let lp_ids: Vec<usize> = td.lp_ids.iter().map(|&l| l as usize).collect();
    let lp = tape.embedding_lookup(vars.local_pos, &lp_ids)?;
    h = tape.add(h, lp)?;
    let seg_ids: Vec<usize> = td.segment_ids.iter().map(|&s| s as usize).collect();
    let seg = tape.embedding_lookup(vars.segment, &seg_ids)?;
    h = tape.add(h, seg)?;
    Ok(h)
}

/// Average-pools the raster into `g*g` regions of `pool*pool` cells each,
/// row-major. Region pixel spans are integer splits; cells with no pixels
/// (raster smaller than the pooled grid) stay at the background value 0.
pub fn pool_patches<E: Scalar>(image: &Image, g: usize, pool: usize) -> Tensor<E> {
    let (h, w) = (image.height, image.width);
    let mut data = vec![E::zero(); g * g * pool * pool];
    for gi in 0..g {
        for gj in 0..g {
            let (r0, r1) = (gi * h / g, (gi + 1) * h / g);
            let (c0, c1) = (gj * w / g, (gj + 1) * w / g);
            let region = gi * g + gj;
            for pi in 0..pool {
                for pj in 0..pool {
                    let (rr0, rr1) = (r0 + pi * (r1 - r0) / pool, r0 + (pi + 1) * (r1 - r0) / pool);
                    let (cc0, cc1) = (c0 + pj * (c1 - c0) / pool, c0 + (pj + 1) * (c1 - c0) / pool);
                    let count = (rr1 - rr0) * (cc1 - cc0);
                    if count == 0 {
                        continue;
                    }
                    let mut sum = 0.0f64;
                    for r in rr0..rr1 {
                        for c in cc0..cc1 {
                            sum += image.get(r, c) as f64;
                        }
                    }
                    data[region * pool * pool + pi * pool + pj] = E::from_f64(sum / count as f64);
                }
            }
        }
    }
    Tensor::new(vec![g * g, pool * pool], data).expect("shape consistent")
}

/// Final visual embedding `H_v[m, d]`: projected pooled patches + visual
/// position + segment 1 + the six spatial lookups of each region's own box.
/// Returns the patch-input leaf alongside, so callers can probe gradients
/// that flow into the raw image features.
pub fn embed_visual<E: Scalar>(
    tape: &mut Tape<E>,
    vars: &EmbeddingVars,
    image: &Image,
    region_boxes: &[[u32; 4]],
    pool: usize,
    track_patch_grad: bool,
) -> Result<(Var, Var), TensorError> {
    let m = region_boxes.len();
    let g = (m as f64).sqrt().round() as usize;
    if g * g != m {
        return Err(TensorError::InvalidArgument {
            op: "embed_visual",
            detail: format!("{m} regions is not a square grid"),
        });
    }
    let pooled = pool_patches::<E>(image, g, pool).with_requires_grad(track_patch_grad);
    let patches = tape.leaf(pooled);
    let mut h = tape.matmul(patches, vars.patch_proj)?;
    let pos_ids: Vec<usize> = (0..m).collect();
    let pos = tape.embedding_lookup(vars.visual_pos, &pos_ids)?;
    h = tape.add(h, pos)?;
    let seg = tape.embedding_lookup(vars.segment, &vec![1usize; m])?;
    h = tape.add(h, seg)?;
    h = add_spatial(tape, vars, h, region_boxes)?;
    Ok((h, patches))
}

/// Modality layout of the packed sequence: visual tokens first, text after.
#[derive(Debug, Clone, PartialEq)]
pub struct PackMasks {
    pub m: usize,
    pub n: usize,
    /// 1 on visual slots.
    pub visual: Vec<bool>,
    /// 1 on non-pad text slots.
    pub text: Vec<bool>,
}

impl PackMasks {
    pub fn len(&self) -> usize {
        self.m + self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1 wherever the position is real: visual or non-pad text.
    pub fn nonpad(&self) -> Vec<bool> {
        self.visual.iter().zip(&self.text).map(|(&v, &t)| v || t).collect()
    }

    /// `[(m+n), d]` 0/1 matrix broadcasting a slot mask across features.
    pub fn mask_matrix<E: Scalar>(mask: &[bool], d: usize) -> Tensor<E> {
        Tensor::from_fn(&[mask.len(), d], |i| if mask[i / d] { 1.0 } else { 0.0 })
    }
}

/// Packs `H_v` and `H_t` into `H_vt[(m+n), d]` with visual tokens at
/// positions `0..m` and text at `m..m+n`.
pub fn pack<E: Scalar>(
    tape: &mut Tape<E>,
    h_v: Var,
    h_t: Var,
    td: &TokenizedDoc,
) -> Result<(Var, PackMasks), TensorError> {
    let (m, n) = (tape.value(h_v).shape()[0], tape.value(h_t).shape()[0]);
    if n != td.n() || m != td.m() {
        return Err(TensorError::ShapeMismatch {
            op: "pack",
            detail: format!("embeddings [{m}, {n}] vs tokenized doc [{}, {}]", td.m(), td.n()),
        });
    }
    let packed = tape.concat(&[h_v, h_t], 0)?;
    let mut visual = vec![false; m + n];
    let mut text = vec![false; m + n];
    for slot in visual.iter_mut().take(m) {
        *slot = true;
    }
    for i in 0..n {
        text[m + i] = td.pad_mask[i];
    }
    Ok((packed, PackMasks { m, n, visual, text }))
}

#[cfg(test)]
mod tests;
