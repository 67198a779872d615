//! Packed vision-language encoder: an L-layer pre-LN transformer over the
//! packed sequence followed by one bidirectional hybrid-attention layer.
//!
//! The hybrid layer runs four attention blocks with unshared projections:
//! text-over-text and text-over-vision fused into the text-side output,
//! vision-over-vision and vision-over-text fused into the vision-side
//! output, each fusion being `LN(a + b)` row-masked to its own modality.
//! By default every block's softmax is restricted to its intended key
//! modality; `literal_eq_masking` widens the softmax to every non-pad
//! position of the packed sequence instead, for A/B comparison.

pub mod dump;

use crate::embed::PackMasks;
use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    /// Transformer layers before the hybrid layer. 0 is a legal
    /// passthrough stack, useful for isolating the hybrid layer.
    pub layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_ff: usize,
    /// Dropout rate; must be 0 in test and grad-check modes.
    pub dropout: f64,
    /// Layer-norm epsilon.
    pub eps: f64,
}

impl EncoderConfig {
    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.heads == 0 || self.d == 0 || self.d % self.heads != 0 {
            return Err(TensorError::InvalidArgument {
                op: "EncoderConfig::validate",
                detail: format!("hidden size {} must be divisible by heads {}", self.d, self.heads),
            });
        }
        if self.d_ff == 0 {
            return Err(TensorError::InvalidArgument {
                op: "EncoderConfig::validate",
                detail: "d_ff must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::InvalidArgument {
                op: "EncoderConfig::validate",
                detail: format!("dropout {} outside [0, 1)", self.dropout),
            });
        }
        Ok(())
    }
}

/// q/k/v projection handles of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub q_w: Var,
    pub q_b: Var,
    pub k_w: Var,
    pub k_b: Var,
    pub v_w: Var,
    pub v_b: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderLayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub attn: AttentionVars,
    pub out_w: Var,
    pub out_b: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub ff1_w: Var,
    pub ff1_b: Var,
    pub ff2_w: Var,
    pub ff2_b: Var,
}

/// The four unshared attention blocks of the hybrid layer plus its three
/// layer norms.
#[derive(Debug, Clone, Copy)]
pub struct HybridVars {
    pub t_t: AttentionVars,
    pub v_t: AttentionVars,
    pub v_v: AttentionVars,
    pub t_v: AttentionVars,
    pub ln_t_g: Var,
    pub ln_t_b: Var,
    pub ln_v_g: Var,
    pub ln_v_b: Var,
    pub ln_out_g: Var,
    pub ln_out_b: Var,
}

/// Multi-head scaled dot-product attention without an output projection.
/// Heads are concatenated back to `[s, d]`. Returns the attention map
/// `[heads, s, s]` alongside.
pub fn attention_core<E: Scalar>(
    tape: &mut Tape<E>,
    q_input: Var,
    kv_input: Var,
    vars: &AttentionVars,
    heads: usize,
    key_mask: &[bool],
) -> Result<(Var, Tensor<E>), TensorError> {
    let s = tape.value(q_input).shape()[0];
    let d = tape.value(q_input).shape()[1];
    let d_k = d / heads;
    let project = |tape: &mut Tape<E>, x: Var, w: Var, b: Var| -> Result<Var, TensorError> {
        let p = tape.matmul(x, w)?;
        let p = tape.add_row(p, b)?;
        let r = tape.reshape(p, &[s, heads, d_k])?;
        tape.permute(r, &[1, 0, 2])
    };
    let qh = project(tape, q_input, vars.q_w, vars.q_b)?;
    let kh = project(tape, kv_input, vars.k_w, vars.k_b)?;
    let vh = project(tape, kv_input, vars.v_w, vars.v_b)?;
    let scores = tape.matmul_nt(qh, kh)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let probs = tape.masked_softmax(scaled, key_mask)?;
    let map = tape.value(probs).clone();
    let ctx = tape.matmul(probs, vh)?;
    let back = tape.permute(ctx, &[1, 0, 2])?;
    let out = tape.reshape(back, &[s, d])?;
    Ok((out, map))
}

/// The L-layer stack over the packed sequence. Pre-LN residual blocks;
/// padded keys are masked out of every softmax; `layers == 0` is the
/// identity. Returns the per-layer attention maps alongside.
pub fn encode_vlt<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    nonpad: &[bool],
    layers: &[EncoderLayerVars],
    cfg: &EncoderConfig,
    mut dropout_rng: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<(Var, Vec<Tensor<E>>), TensorError> {
    cfg.validate()?;
    if !nonpad.iter().any(|&b| b) {
        return Err(TensorError::DegenerateMask {
            op: "encode_vlt",
            detail: "every position is padding".into(),
        });
    }
    let mut h = x;
    let mut maps = Vec::with_capacity(layers.len());
    for layer in layers {
        let a = tape.layer_norm(h, layer.ln1_g, layer.ln1_b, cfg.eps)?;
        let (attn, map) = attention_core(tape, a, a, &layer.attn, cfg.heads, nonpad)?;
        maps.push(map);
        let mut proj = tape.matmul(attn, layer.out_w)?;
        proj = tape.add_row(proj, layer.out_b)?;
        if cfg.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                proj = tape.dropout(proj, cfg.dropout, rng)?;
            }
        }
        h = tape.add(h, proj)?;
        let b = tape.layer_norm(h, layer.ln2_g, layer.ln2_b, cfg.eps)?;
        let f1 = tape.matmul(b, layer.ff1_w)?;
        let f1 = tape.add_row(f1, layer.ff1_b)?;
        let f1 = tape.relu(f1);
        let mut f2 = tape.matmul(f1, layer.ff2_w)?;
        f2 = tape.add_row(f2, layer.ff2_b)?;
        if cfg.dropout > 0.0 {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f2 = tape.dropout(f2, cfg.dropout, rng)?;
            }
        }
        h = tape.add(h, f2)?;
    }
    Ok((h, maps))
}

/// Splits the encoder output into zero-padded per-modality sequences:
/// `H_v_l = H ⊙ M_v`, `H_t_l = H ⊙ M_t`. Their sum equals the input on
/// non-pad positions; pad rows are zero in both.
pub fn split_modalities<E: Scalar>(
    tape: &mut Tape<E>,
    x: Var,
    masks: &PackMasks,
) -> Result<(Var, Var), TensorError> {
    let d = tape.value(x).shape()[1];
    let mv = tape.constant(PackMasks::mask_matrix::<E>(&masks.visual, d));
    let mt = tape.constant(PackMasks::mask_matrix::<E>(&masks.text, d));
    let h_v = tape.mul(x, mv)?;
    let h_t = tape.mul(x, mt)?;
    Ok((h_v, h_t))
}

/// Everything the heads consume, plus retained attention maps.
#[derive(Debug)]
pub struct HybridOutputs<E: Scalar> {
    /// Encoder stack output `H_vt_L`.
    pub encoder_out: Var,
    /// Text-side hybrid output, zero outside non-pad text rows.
    pub hybrid_text: Var,
    /// Vision-side hybrid output, zero outside visual rows.
    pub hybrid_vision: Var,
    /// `LN(hybrid_text + hybrid_vision)`, zeroed on pad rows.
    pub hybrid: Var,
    pub masks: PackMasks,
    /// Per-layer self-attention maps `[heads, s, s]`.
    pub encoder_maps: Vec<Tensor<E>>,
    /// Hybrid maps keyed query->key; cross maps are absent when the
    /// bidirectional layer is disabled.
    pub map_t2t: Tensor<E>,
    pub map_t2v: Option<Tensor<E>>,
    pub map_v2v: Tensor<E>,
    pub map_v2t: Option<Tensor<E>>,
}

/// Runs the hybrid-attention layer on the encoder output. With `bvlha`
/// false the cross blocks are dropped and each side reduces to
/// `LN(self-attention)`, the ablation baseline.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_layer<E: Scalar>(
    tape: &mut Tape<E>,
    encoder_out: Var,
    masks: &PackMasks,
    vars: &HybridVars,
    heads: usize,
    bvlha: bool,
    literal_eq_masking: bool,
    eps: f64,
) -> Result<HybridOutputs<E>, TensorError> {
    let d = tape.value(encoder_out).shape()[1];
    if !masks.text.iter().any(|&b| b) {
        return Err(TensorError::DegenerateMask {
            op: "hybrid_layer",
            detail: "no valid text keys".into(),
        });
    }
    if !masks.visual.iter().any(|&b| b) {
        return Err(TensorError::DegenerateMask {
            op: "hybrid_layer",
            detail: "no valid visual keys".into(),
        });
    }
    let nonpad = masks.nonpad();
    let mt_mat = tape.constant(PackMasks::mask_matrix::<E>(&masks.text, d));
    let mv_mat = tape.constant(PackMasks::mask_matrix::<E>(&masks.visual, d));
    let np_mat = tape.constant(PackMasks::mask_matrix::<E>(&nonpad, d));
    let (h_v_l, h_t_l) = split_modalities(tape, encoder_out, masks)?;
    let text_keys: &[bool] = if literal_eq_masking { &nonpad } else { &masks.text };
    let vis_keys: &[bool] = if literal_eq_masking { &nonpad } else { &masks.visual };

    // Text side: language self-attention plus vision-for-language.
    let (t_t_raw, map_t2t) = attention_core(tape, h_t_l, h_t_l, &vars.t_t, heads, text_keys)?;
    let t_t = tape.mul(t_t_raw, mt_mat)?;
    let (text_sum, map_t2v) = if bvlha {
        let (v_t_raw, map) = attention_core(tape, h_t_l, h_v_l, &vars.v_t, heads, vis_keys)?;
        let v_t = tape.mul(v_t_raw, mt_mat)?;
        (tape.add(t_t, v_t)?, Some(map))
    } else {
        (t_t, None)
    };
    let ht_ln = tape.layer_norm(text_sum, vars.ln_t_g, vars.ln_t_b, eps)?;
    let hybrid_text = tape.mul(ht_ln, mt_mat)?;

    // Vision side: vision self-attention plus language-for-vision.
    let (v_v_raw, map_v2v) = attention_core(tape, h_v_l, h_v_l, &vars.v_v, heads, vis_keys)?;
    let v_v = tape.mul(v_v_raw, mv_mat)?;
    let (vis_sum, map_v2t) = if bvlha {
        let (t_v_raw, map) = attention_core(tape, h_v_l, h_t_l, &vars.t_v, heads, text_keys)?;
        let t_v = tape.mul(t_v_raw, mv_mat)?;
        (tape.add(v_v, t_v)?, Some(map))
    } else {
        (v_v, None)
    };
    let hv_ln = tape.layer_norm(vis_sum, vars.ln_v_g, vars.ln_v_b, eps)?;
    let hybrid_vision = tape.mul(hv_ln, mv_mat)?;

    let sum = tape.add(hybrid_text, hybrid_vision)?;
    let out_ln = tape.layer_norm(sum, vars.ln_out_g, vars.ln_out_b, eps)?;
    let hybrid = tape.mul(out_ln, np_mat)?;

    Ok(HybridOutputs {
        encoder_out,
        hybrid_text,
        hybrid_vision,
        hybrid,
        masks: masks.clone(),
        encoder_maps: Vec::new(),
        map_t2t,
        map_t2v,
        map_v2v,
        map_v2t,
    })
}
