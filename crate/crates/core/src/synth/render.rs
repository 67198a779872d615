//! Page rasterization and region covering.

use super::{Image, TextBlock, PAGE_UNITS};

/// Half-open pixel footprint `(r0..r1, c0..c1)` of a page-grid box on an
/// `h x w` raster. Floor on both ends: boxes that are disjoint in page
/// units stay disjoint in pixels. Both rendering and covering use this one
/// rule.
pub fn pixel_rect(bbox: [u32; 4], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let [x0, y0, x1, y1] = bbox;
    let r0 = y0 as usize * h / PAGE_UNITS as usize;
    let r1 = y1 as usize * h / PAGE_UNITS as usize;
    let c0 = x0 as usize * w / PAGE_UNITS as usize;
    let c1 = x1 as usize * w / PAGE_UNITS as usize;
    (r0, r1, c0, c1)
}

/// Intensity a block renders at: `(1 + mean(token id)) / (vocab_size + 1)`,
/// always in `(0, 1]`. Computed in f64, stored as f32.
pub fn block_intensity(block: &TextBlock, vocab_size: usize) -> f32 {
    let mean = block.tokens.iter().map(|&t| t as f64).sum::<f64>() / block.tokens.len() as f64;
    ((1.0 + mean) / (vocab_size as f64 + 1.0)) as f32
}

/// Renders blocks onto a zero background. Every pixel inside a block's
/// footprint takes the block's intensity; pixels outside all boxes stay 0.
/// Pure and idempotent.
pub fn render_image(blocks: &[TextBlock], vocab_size: usize, h: usize, w: usize) -> Image {
    let mut img = Image::zeros(h, w);
    for block in blocks {
        let value = block_intensity(block, vocab_size);
        let (r0, r1, c0, c1) = pixel_rect(block.bbox, h, w);
        for r in r0..r1 {
            for c in c0..c1 {
                img.data[r * w + c] = value;
            }
        }
    }
    img
}

/// Returns a copy of `image` with the footprints of `blocks_to_cover`
/// zeroed out. The input is not mutated.
pub fn cover_regions(image: &Image, blocks_to_cover: &[&TextBlock]) -> Image {
    let mut out = image.clone();
    for block in blocks_to_cover {
        let (r0, r1, c0, c1) = pixel_rect(block.bbox, image.height, image.width);
        for r in r0..r1 {
            for c in c0..c1 {
                out.data[r * image.width + c] = 0.0;
            }
        }
    }
    out
}
