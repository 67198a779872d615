//! Differentiable loss assembly for the four pretraining tasks. Every
//! function takes slices of the hybrid output already on the tape plus the
//! head's projection handles, and returns a scalar loss node.

use crate::embed::TokenizedDoc;
use crate::error::TensorError;
use crate::objectives::diou::diou_loss_tape;
use crate::objectives::{BtiaPlan, MvlmPlan, RwtpLabels, TipaPlan};
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two-layer MLP head handles: `fc2(relu(fc1(x)))`.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub fc1_w: Var,
    pub fc1_b: Var,
    pub fc2_w: Var,
    pub fc2_b: Var,
}

pub fn mlp_forward<E: Scalar>(tape: &mut Tape<E>, x: Var, head: &MlpVars) -> Result<Var, TensorError> {
    let h = tape.matmul(x, head.fc1_w)?;
    let h = tape.add_row(h, head.fc1_b)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, head.fc2_w)?;
    tape.add_row(out, head.fc2_b)
}

// ── MVLM ────────────────────────────────────────────────────────────────

/// Word-prediction logits over the text rows; the projection is
/// weight-tied to the word embedding table.
pub fn mvlm_logits<E: Scalar>(
    tape: &mut Tape<E>,
    h_text: Var,
    word_table: Var,
    vocab_bias: Var,
) -> Result<Var, TensorError> {
    let logits = tape.matmul_nt(h_text, word_table)?;
    tape.add_row(logits, vocab_bias)
}

/// Mean cross entropy over the masked positions only.
pub fn mvlm_loss<E: Scalar>(
    tape: &mut Tape<E>,
    logits: Var,
    plan: &MvlmPlan,
    n: usize,
) -> Result<Var, TensorError> {
    let targets = plan.target_vector(n);
    tape.cross_entropy_from_logits(logits, &targets, super::IGNORE_INDEX)
}

// ── TIPA ────────────────────────────────────────────────────────────────

/// Predicts one corner-form box per masked block: mean-pool the block's
/// token rows, run the MLP to 4 logits, squash to `(cx, cy, w, h)` in
/// `(0,1)⁴` with width/height floored at 1e-4, and convert to corners
/// clipped to `[0, 1]`.
pub fn tipa_boxes<E: Scalar>(
    tape: &mut Tape<E>,
    h_text: Var,
    head: &MlpVars,
    plan: &TipaPlan,
    td: &TokenizedDoc,
) -> Result<Var, TensorError> {
    let n = td.n();
    let k = plan.blocks.len();
    if k == 0 {
        return Err(TensorError::InvalidArgument {
            op: "tipa_boxes",
            detail: "plan has no masked blocks".into(),
        });
    }
    // Constant pooling matrix: row b averages the rows of block b's tokens.
    let mut pool = vec![0.0f64; k * n];
    for (row, &block) in plan.blocks.iter().enumerate() {
        let members: Vec<usize> =
            (0..n).filter(|&j| td.block_index[j] == block as i32).collect();
        if members.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "tipa_boxes",
                detail: format!("masked block {block} has no tokens in the sequence"),
            });
        }
        let w = 1.0 / members.len() as f64;
        for j in members {
            pool[row * n + j] = w;
        }
    }
    let pool_t = Tensor::<E>::from_f64_slice(&[k, n], &pool)?;
    let pool_var = tape.constant(pool_t);
    let pooled = tape.matmul(pool_var, h_text)?;
    let raw = mlp_forward(tape, pooled, head)?;
    let squashed = tape.sigmoid(raw);
    let parts = tape.split(squashed, 1, &[1, 1, 1, 1])?;
    let (cx, cy) = (parts[0], parts[1]);
    let floor_w = tape.constant(Tensor::<E>::filled(&[k, 1], E::from_f64(1e-4)));
    let w = tape.maximum(parts[2], floor_w)?;
    let h = tape.maximum(parts[3], floor_w)?;
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    let x0_raw = tape.sub(cx, half_w)?;
    let x0 = tape.clamp(x0_raw, 0.0, 1.0)?;
    let y0_raw = tape.sub(cy, half_h)?;
    let y0 = tape.clamp(y0_raw, 0.0, 1.0)?;
    let x1_raw = tape.add(cx, half_w)?;
    let x1 = tape.clamp(x1_raw, 0.0, 1.0)?;
    let y1_raw = tape.add(cy, half_h)?;
    let y1 = tape.clamp(y1_raw, 0.0, 1.0)?;
    tape.concat(&[x0, y0, x1, y1], 1)
}

/// Mean DIoU between the predicted boxes of the masked blocks and their
/// true boxes.
pub fn tipa_loss<E: Scalar>(
    tape: &mut Tape<E>,
    h_text: Var,
    head: &MlpVars,
    plan: &TipaPlan,
    td: &TokenizedDoc,
) -> Result<Var, TensorError> {
    let pred = tipa_boxes(tape, h_text, head, plan, td)?;
    diou_loss_tape(tape, pred, &plan.gt_boxes)
}

// ── RWTP ────────────────────────────────────────────────────────────────

/// Pair probabilities `[m*n, 1]`, row-major over (region, token): the MLP
/// with sigmoid applied to `concat(h_region_i, h_token_j)`.
pub fn rwtp_probs<E: Scalar>(
    tape: &mut Tape<E>,
    h_vis_rows: Var,
    h_text_rows: Var,
    head: &MlpVars,
) -> Result<Var, TensorError> {
    let m = tape.value(h_vis_rows).shape()[0];
    let n = tape.value(h_text_rows).shape()[0];
    let mut vis_ids = Vec::with_capacity(m * n);
    let mut text_ids = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            vis_ids.push(i);
            text_ids.push(j);
        }
    }
    let f_vis = tape.gather_rows(h_vis_rows, &vis_ids)?;
    let f_text = tape.gather_rows(h_text_rows, &text_ids)?;
    let pairs = tape.concat(&[f_vis, f_text], 1)?;
    let raw = mlp_forward(tape, pairs, head)?;
    Ok(tape.sigmoid(raw))
}

/// Mean binary cross entropy of the pair probabilities over valid
/// (region, token) pairs.
pub fn rwtp_loss<E: Scalar>(
    tape: &mut Tape<E>,
    probs: Var,
    labels: &RwtpLabels,
) -> Result<Var, TensorError> {
    let total = labels.m * labels.n;
    if tape.value(probs).numel() != total {
        return Err(TensorError::ShapeMismatch {
            op: "rwtp_loss",
            detail: format!("{} probs vs {}x{} labels", tape.value(probs).numel(), labels.m, labels.n),
        });
    }
    let label_t = Tensor::<E>::from_fn(&[total, 1], |i| labels.y[i] as f64);
    let mask: Vec<bool> = labels.valid.iter().map(|&v| v == 1).collect();
    tape.binary_cross_entropy(probs, &label_t, &mask)
}

// ── BTIA ────────────────────────────────────────────────────────────────

/// One shared MLP-with-sigmoid over every packed position of H_hybrid.
pub fn btia_probs<E: Scalar>(
    tape: &mut Tape<E>,
    h_hybrid: Var,
    head: &MlpVars,
) -> Result<Var, TensorError> {
    let raw = mlp_forward(tape, h_hybrid, head)?;
    Ok(tape.sigmoid(raw))
}

/// Mean BCE over the plan's loss mask: visual rows scored against ITA
/// labels, text rows against TIA labels.
pub fn btia_loss<E: Scalar>(
    tape: &mut Tape<E>,
    probs: Var,
    plan: &BtiaPlan,
) -> Result<Var, TensorError> {
    let m = plan.ita_labels.len();
    let n = plan.tia_labels.len();
    if tape.value(probs).numel() != m + n {
        return Err(TensorError::ShapeMismatch {
            op: "btia_loss",
            detail: format!("{} probs vs {} packed labels", tape.value(probs).numel(), m + n),
        });
    }
    let label_t = Tensor::<E>::from_fn(&[m + n, 1], |i| {
        if i < m {
            plan.ita_labels[i] as f64
        } else {
            plan.tia_labels[i - m] as f64
        }
    });
    let mask: Vec<bool> = plan.loss_mask.iter().map(|&v| v == 1).collect();
    tape.binary_cross_entropy(probs, &label_t, &mask)
}

// ── combination ─────────────────────────────────────────────────────────

/// Weighted sum of enabled task losses. An empty term list yields a
/// constant zero.
pub fn total_pretrain_loss<E: Scalar>(
    tape: &mut Tape<E>,
    terms: &[(Var, f64)],
) -> Result<Var, TensorError> {
    let mut acc: Option<Var> = None;
    for &(loss, weight) in terms {
        let scaled = tape.scale(loss, weight);
        acc = Some(match acc {
            Some(sum) => tape.add(sum, scaled)?,
            None => scaled,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(Tensor::scalar(E::zero()))))
}
