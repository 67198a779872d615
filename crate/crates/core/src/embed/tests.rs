use super::*;
use crate::synth::{EntityRole, Image, SyntheticDocument, TextBlock};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

fn block(tokens: Vec<u32>, bbox: [u32; 4], role: EntityRole) -> TextBlock {
    TextBlock { tokens, bbox, entity_role: role }
}

fn doc_with_blocks(blocks: Vec<TextBlock>) -> SyntheticDocument {
    SyntheticDocument { doc_id: "t".into(), doc_class: 0, blocks, image: Image::zeros(16, 16) }
}

struct Tables {
    word: Tensor<f64>,
    seq_pos: Tensor<f64>,
    spatial: [Tensor<f64>; 6],
    local_pos: Tensor<f64>,
    segment: Tensor<f64>,
    visual_pos: Tensor<f64>,
    patch_proj: Tensor<f64>,
}

fn make_tables(v: usize, d: usize, n_max: usize, m: usize, pool: usize, zero: bool) -> Tables {
    let grid = PAGE_UNITS as usize + 1;
    let fill = |salt: usize| {
        move |i: usize| {
            if zero {
                0.0
            } else {
                (((i * 31 + salt * 97) % 503) as f64 - 251.0) * 0.003
            }
        }
    };
    Tables {
        word: Tensor::from_fn(&[v, d], fill(1)),
        seq_pos: Tensor::from_fn(&[n_max, d], fill(2)),
        spatial: [
            Tensor::from_fn(&[grid, d], fill(3)),
            Tensor::from_fn(&[grid, d], fill(4)),
            Tensor::from_fn(&[grid, d], fill(5)),
            Tensor::from_fn(&[grid, d], fill(6)),
            Tensor::from_fn(&[grid, d], fill(7)),
            Tensor::from_fn(&[grid, d], fill(8)),
        ],
        local_pos: Tensor::from_fn(&[4, d], fill(9)),
        segment: Tensor::from_fn(&[3, d], fill(10)),
        visual_pos: Tensor::from_fn(&[m, d], fill(11)),
        patch_proj: Tensor::from_fn(&[pool * pool, d], fill(12)),
    }
}

fn bind(tape: &mut Tape<f64>, t: &Tables) -> EmbeddingVars {
    EmbeddingVars {
        word: tape.constant(t.word.clone()),
        seq_pos: tape.constant(t.seq_pos.clone()),
        x0: tape.constant(t.spatial[0].clone()),
        y0: tape.constant(t.spatial[1].clone()),
        x1: tape.constant(t.spatial[2].clone()),
        y1: tape.constant(t.spatial[3].clone()),
        width: tape.constant(t.spatial[4].clone()),
        height: tape.constant(t.spatial[5].clone()),
        local_pos: tape.constant(t.local_pos.clone()),
        segment: tape.constant(t.segment.clone()),
        visual_pos: tape.constant(t.visual_pos.clone()),
        patch_proj: tape.constant(t.patch_proj.clone()),
    }
}

#[test]
fn lp_pattern_for_block_lengths_one_two_three() {
    let doc = doc_with_blocks(vec![
        block(vec![9], [15, 12, 235, 112], EntityRole::Header),
        block(vec![10, 11], [15, 137, 235, 237], EntityRole::Question),
        block(vec![12, 13, 14], [515, 137, 735, 237], EntityRole::Answer),
    ]);
    let td = tokenize(&doc, 16, 2).unwrap();
    let content_lp: Vec<u8> = (0..td.n()).filter(|&i| td.block_index[i] >= 0).map(|i| td.lp_ids[i]).collect();
    assert_eq!(content_lp, vec![1, 1, 3, 1, 2, 3]);
}

#[test]
fn empty_document_is_cls_sep_and_padding() {
    let doc = doc_with_blocks(vec![]);
    let td = tokenize(&doc, 8, 2).unwrap();
    assert_eq!(td.token_ids[0], VocabSpec::CLS);
    assert_eq!(td.token_ids[1], VocabSpec::SEP);
    assert!(td.token_ids[2..].iter().all(|&t| t == VocabSpec::PAD));
    assert_eq!(td.pad_mask.iter().filter(|&&p| p).count(), 2);
}

#[test]
fn truncation_keeps_head_and_tail_exactly() {
    // 3 blocks x 4 tokens = 12 content tokens, n = 9 leaves budget 7.
    let mk = |base: u32| (0..4).map(|i| base + i).collect::<Vec<_>>();
    let doc = doc_with_blocks(vec![
        block(mk(10), [15, 12, 235, 112], EntityRole::Header),
        block(mk(20), [15, 137, 235, 237], EntityRole::Question),
        block(mk(30), [515, 137, 735, 237], EntityRole::Answer),
    ]);
    let n = 9;
    let td = tokenize(&doc, n, 2).unwrap();
    assert_eq!(td.n(), n);
    // Oracle: direct slices of the flat content stream.
    let flat: Vec<u32> = doc.blocks.iter().flat_map(|b| b.tokens.clone()).collect();
    let budget = n - 2;
    let head = budget.div_ceil(2);
    let tail = budget - head;
    let mut want = vec![VocabSpec::CLS];
    want.extend(&flat[..head]);
    want.extend(&flat[flat.len() - tail..]);
    want.push(VocabSpec::SEP);
    assert_eq!(td.token_ids, want);
    assert_eq!(td.token_ids[1], flat[0], "first content token preserved");
    assert_eq!(td.token_ids[n - 2], *flat.last().unwrap(), "last content token preserved");
}

#[test]
fn lp_pattern_property_over_block_lengths() {
    for k in 1usize..=9 {
        let doc = doc_with_blocks(vec![block((0..k as u32).map(|i| 9 + i).collect(), [15, 12, 235, 112], EntityRole::Other)]);
        let td = tokenize(&doc, k + 4, 2).unwrap();
        let lp: Vec<u8> = (0..td.n()).filter(|&i| td.block_index[i] >= 0).map(|i| td.lp_ids[i]).collect();
        if k == 1 {
            assert_eq!(lp, vec![LP_BEGIN]);
        } else {
            let mut want = vec![LP_BEGIN];
            want.extend(std::iter::repeat(LP_MIDDLE).take(k - 2));
            want.push(LP_END);
            assert_eq!(lp, want);
        }
    }
}

#[test]
fn specials_get_full_page_box_and_lp_zero() {
    let doc = doc_with_blocks(vec![block(vec![9, 10], [15, 12, 235, 112], EntityRole::Other)]);
    let td = tokenize(&doc, 8, 2).unwrap();
    for i in 0..td.n() {
        if td.block_index[i] < 0 {
            assert_eq!(td.token_boxes[i], SPECIAL_BOX);
            assert_eq!(td.lp_ids[i], LP_PAD);
        }
    }
    assert!(td.segment_ids.iter().all(|&s| s == 0), "all text positions are segment 0");
}

#[test]
fn zero_tables_embed_to_zero() {
    let doc = doc_with_blocks(vec![block(vec![9, 10, 11], [15, 12, 235, 112], EntityRole::Other)]);
    let td = tokenize(&doc, 8, 2).unwrap();
    let tables = make_tables(16, 6, 8, 4, 2, true);
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &tables);
    let h_t = embed_text(&mut tape, &vars, &td).unwrap();
    assert!(tape.value(h_t).data().iter().all(|&v| v == 0.0));
    let image = Image::zeros(16, 16);
    let (h_v, _) = embed_visual(&mut tape, &vars, &image, &td.visual_region_boxes, 2, false).unwrap();
    assert!(tape.value(h_v).data().iter().all(|&v| v == 0.0));
}

#[test]
fn perturbing_one_word_row_touches_exactly_its_positions() {
    let doc = doc_with_blocks(vec![
        block(vec![9, 10, 9], [15, 12, 235, 112], EntityRole::Other),
        block(vec![11], [15, 137, 235, 237], EntityRole::Other),
    ]);
    let td = tokenize(&doc, 10, 2).unwrap();
    let d = 6;
    let tables = make_tables(16, d, 10, 4, 2, false);
    let run = |word: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut vars = bind(&mut tape, &tables);
        vars.word = tape.constant(word.clone());
        let h = embed_text(&mut tape, &vars, &td).unwrap();
        tape.value(h).data().to_vec()
    };
    let base = run(&tables.word);
    let mut poked = tables.word.clone();
    let target: u32 = 9;
    for j in 0..d {
        poked.data_mut()[target as usize * d + j] += 1.0;
    }
    let after = run(&poked);
    for i in 0..td.n() {
        let changed = (0..d).any(|j| base[i * d + j] != after[i * d + j]);
        assert_eq!(changed, td.token_ids[i] == target, "position {i}");
    }
}

#[test]
fn embed_text_matches_naive_lookup_oracle() {
    let doc = doc_with_blocks(vec![
        block(vec![9, 10], [15, 12, 235, 112], EntityRole::Header),
        block(vec![12, 13, 14], [515, 137, 735, 237], EntityRole::Answer),
    ]);
    let td = tokenize(&doc, 9, 2).unwrap();
    let d = 5;
    let tables = make_tables(16, d, 9, 4, 2, false);
    let mut tape = Tape::new();
    let vars = bind(&mut tape, &tables);
    let h = embed_text(&mut tape, &vars, &td).unwrap();
    let got = tape.value(h).data();
    for i in 0..td.n() {
        let [x0, y0, x1, y1] = td.token_boxes[i];
        let (w, hgt) = ((x1 - x0) as usize, (y1 - y0) as usize);
        for j in 0..d {
            let want = tables.word.data()[td.token_ids[i] as usize * d + j]
                + tables.seq_pos.data()[i * d + j]
                + tables.spatial[0].data()[x0 as usize * d + j]
                + tables.spatial[1].data()[y0 as usize * d + j]
                + tables.spatial[2].data()[x1 as usize * d + j]
                + tables.spatial[3].data()[y1 as usize * d + j]
                + tables.spatial[4].data()[w * d + j]
                + tables.spatial[5].data()[hgt * d + j]
                + tables.local_pos.data()[td.lp_ids[i] as usize * d + j]
                + tables.segment.data()[j];
            assert!((got[i * d + j] - want).abs() < 1e-12, "position {i} dim {j}");
        }
    }
}

#[test]
fn pooling_g2_on_4x4_gives_quadrant_means() {
    let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
    let image = Image { height: 4, width: 4, data };
    let pooled = pool_patches::<f64>(&image, 2, 1);
    assert_eq!(pooled.shape(), &[4, 1]);
    // Quadrant means of a row-major 0..16 grid.
    let want = [
        (0.0 + 1.0 + 4.0 + 5.0) / 4.0,
        (2.0 + 3.0 + 6.0 + 7.0) / 4.0,
        (8.0 + 9.0 + 12.0 + 13.0) / 4.0,
        (10.0 + 11.0 + 14.0 + 15.0) / 4.0,
    ];
    for (got, want) in pooled.data().iter().zip(want) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn region_grid_tiles_the_page() {
    assert_eq!(region_grid_units(1), vec![[0, 0, PAGE_UNITS, PAGE_UNITS]]);
    let quads = region_grid_units(2);
    assert_eq!(quads, vec![[0, 0, 500, 500], [500, 0, 1000, 500], [0, 500, 500, 1000], [500, 500, 1000, 1000]]);
    for g in [1usize, 2, 4, 5, 8] {
        let cells = region_grid_units(g);
        let area: u64 = cells.iter().map(|c| ((c[2] - c[0]) as u64) * ((c[3] - c[1]) as u64)).sum();
        assert_eq!(area, (PAGE_UNITS as u64).pow(2), "g={g} must tile the page");
        if PAGE_UNITS as usize % g == 0 {
            let want = (PAGE_UNITS as u64 / g as u64).pow(2);
            assert!(cells.iter().all(|c| ((c[2] - c[0]) as u64) * ((c[3] - c[1]) as u64) == want));
        }
    }
}

#[test]
fn pack_orders_visual_then_text_and_masks_partition() {
    let doc = doc_with_blocks(vec![block(vec![9], [15, 12, 235, 112], EntityRole::Other)]);
    let mut td = tokenize(&doc, 3, 2).unwrap();
    td.visual_region_boxes = region_grid_units(2); // m = 4 for shape checks below
    let (m, n, d) = (4usize, 3usize, 2usize);
    let mut tape = Tape::<f64>::new();
    let h_v = tape.constant(Tensor::from_fn(&[m, d], |i| i as f64));
    let h_t = tape.constant(Tensor::from_fn(&[n, d], |i| 100.0 + i as f64));
    let (packed, masks) = pack(&mut tape, h_v, h_t, &td).unwrap();
    assert_eq!(tape.value(packed).shape(), &[m + n, d]);
    assert_eq!(masks.visual, vec![true, true, true, true, false, false, false]);
    // [CLS] t [SEP]: all three text positions are real here.
    assert_eq!(masks.text, vec![false, false, false, false, true, true, true]);
    // Partition: visual + text + pad-indicator covers every slot exactly once.
    for i in 0..masks.len() {
        let pad = !masks.visual[i] && !masks.text[i];
        let sum = masks.visual[i] as u8 + masks.text[i] as u8 + pad as u8;
        assert_eq!(sum, 1);
    }
    // Slicing the packed sequence recovers both halves exactly.
    let parts = tape.split(packed, 0, &[m, n]).unwrap();
    assert_eq!(tape.value(parts[0]).data(), tape.value(h_v).data());
    assert_eq!(tape.value(parts[1]).data(), tape.value(h_t).data());
}

#[test]
fn pack_masks_mark_padding_as_neither_modality() {
    let doc = doc_with_blocks(vec![block(vec![9, 10], [15, 12, 235, 112], EntityRole::Other)]);
    let td = tokenize(&doc, 8, 2).unwrap();
    let mut tape = Tape::new();
    let h_v = tape.constant(Tensor::<f64>::zeros(&[4, 3]));
    let h_t = tape.constant(Tensor::<f64>::zeros(&[8, 3]));
    let (_, masks) = pack(&mut tape, h_v, h_t, &td).unwrap();
    for i in 0..td.n() {
        assert_eq!(masks.text[4 + i], td.pad_mask[i]);
    }
    assert_eq!(masks.nonpad().iter().filter(|&&b| b).count(), 4 + 4);
}
