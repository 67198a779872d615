//! Desk-scale bidirectional vision-language document encoder.
//!
//! The crate builds everything needed to pretrain and probe a small
//! document transformer on synthetic visually-rich pages: a dense tensor
//! library with reverse-mode autodiff, a synthetic corpus generator whose
//! pixels and tokens are correlated by construction, the packed
//! text+vision embedding layer, an L-layer encoder topped by a
//! bidirectional hybrid-attention layer, the four pretraining objectives
//! (MVLM, TIPA, RWTP, BTIA), and training / evaluation / checkpoint
//! machinery with a CLI in the companion crate.

pub mod embed;
pub mod encoder;
pub mod error;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use error::{CorpusIoError, SynthError, TensorError, TrainError};
pub use scalar::{Dtype, Scalar};
pub use synth::io::{load_corpus, save_corpus};
pub use synth::render::{cover_regions, render_image};
pub use synth::{generate_corpus, generate_document, CorpusConfig, EntityRole, Image, SyntheticDocument, TextBlock};
pub use tensor::gradcheck::{grad_check, GradCheckFailure, GradCheckReport};
pub use tensor::tape::{CustomOp, Tape, Var};
pub use tensor::{ParamStore, Parameter, Tensor};

/// Stateless seed derivation: every stochastic decision in the crate draws
/// from a ChaCha stream keyed by `(base_seed, stream, index)` so corpora,
/// masking plans, and training runs replay exactly and resume mid-run.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the mixed words
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fixed stream ids for [`derive_seed`].
pub mod streams {
    pub const DOC_GEN: u64 = 1;
    pub const PARAM_INIT: u64 = 2;
    pub const PLAN: u64 = 3;
    pub const EPOCH_SHUFFLE: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const EVAL: u64 = 6;
}
