//! Distance-IoU box regression loss: `1 - IoU + ρ²(centers) / c²` with `c`
//! the diagonal of the smallest enclosing box. Values lie in `[0, 2)`.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_box(b: [f64; 4], what: &'static str) -> Result<(), TensorError> {
    if !(b[0] < b[2] && b[1] < b[3]) {
        return Err(TensorError::InvalidArgument {
            op: "diou",
            detail: format!("{what} box {b:?} is degenerate (needs x0 < x1 and y0 < y1)"),
        });
    }
    Ok(())
}

/// Plain-scalar DIoU of a single corner-form box pair. Used by evaluation;
/// the differentiable path is [`diou_loss_tape`].
pub fn diou(pred: [f64; 4], gt: [f64; 4]) -> Result<f64, TensorError> {
    check_box(pred, "predicted")?;
    check_box(gt, "ground-truth")?;
    Ok(1.0 - iou(pred, gt) + center_distance_term(pred, gt))
}

pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

fn center_distance_term(a: [f64; 4], b: [f64; 4]) -> f64 {
    let dx = (a[0] + a[2]) / 2.0 - (b[0] + b[2]) / 2.0;
    let dy = (a[1] + a[3]) / 2.0 - (b[1] + b[3]) / 2.0;
    let ex = a[2].max(b[2]) - a[0].min(b[0]);
    let ey = a[3].max(b[3]) - a[1].min(b[1]);
    (dx * dx + dy * dy) / (ex * ex + ey * ey)
}

/// Mean DIoU loss of predicted boxes `[k, 4]` (corner form, on the tape)
/// against constant ground-truth boxes. Gradients flow to the predictions.
pub fn diou_loss_tape<E: Scalar>(
    tape: &mut Tape<E>,
    pred: Var,
    gt_boxes: &[[f64; 4]],
) -> Result<Var, TensorError> {
    let shape = tape.value(pred).shape().to_vec();
    if shape.len() != 2 || shape[1] != 4 || shape[0] != gt_boxes.len() {
        return Err(TensorError::ShapeMismatch {
            op: "diou_loss_tape",
            detail: format!("pred {shape:?} vs {} gt boxes", gt_boxes.len()),
        });
    }
    for &b in gt_boxes {
        check_box(b, "ground-truth")?;
    }
    let k = gt_boxes.len();
    let col = |tape: &mut Tape<E>, c: usize| {
        let t = Tensor::<E>::from_fn(&[k, 1], |i| gt_boxes[i][c]);
        tape.constant(t)
    };
    let gx0 = col(tape, 0);
    let gy0 = col(tape, 1);
    let gx1 = col(tape, 2);
    let gy1 = col(tape, 3);
    let parts = tape.split(pred, 1, &[1, 1, 1, 1])?;
    let (px0, py0, px1, py1) = (parts[0], parts[1], parts[2], parts[3]);

    // Intersection, clamped at zero width/height.
    let ix0 = tape.maximum(px0, gx0)?;
    let iy0 = tape.maximum(py0, gy0)?;
    let ix1 = tape.minimum(px1, gx1)?;
    let iy1 = tape.minimum(py1, gy1)?;
    let iw_raw = tape.sub(ix1, ix0)?;
    let iw = tape.relu(iw_raw);
    let ih_raw = tape.sub(iy1, iy0)?;
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih)?;

    let pw = tape.sub(px1, px0)?;
    let ph = tape.sub(py1, py0)?;
    let p_area = tape.mul(pw, ph)?;
    let gw = tape.sub(gx1, gx0)?;
    let gh = tape.sub(gy1, gy0)?;
    let g_area = tape.mul(gw, gh)?;
    let areas = tape.add(p_area, g_area)?;
    let union = tape.sub(areas, inter)?;
    let iou = tape.div(inter, union)?;

    // Squared center distance over the squared enclosing diagonal.
    let pcx_sum = tape.add(px0, px1)?;
    let pcx = tape.scale(pcx_sum, 0.5);
    let pcy_sum = tape.add(py0, py1)?;
    let pcy = tape.scale(pcy_sum, 0.5);
    let gcx_sum = tape.add(gx0, gx1)?;
    let gcx = tape.scale(gcx_sum, 0.5);
    let gcy_sum = tape.add(gy0, gy1)?;
    let gcy = tape.scale(gcy_sum, 0.5);
    let dx = tape.sub(pcx, gcx)?;
    let dy = tape.sub(pcy, gcy)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let rho2 = tape.add(dx2, dy2)?;

    let ex0 = tape.minimum(px0, gx0)?;
    let ey0 = tape.minimum(py0, gy0)?;
    let ex1 = tape.maximum(px1, gx1)?;
    let ey1 = tape.maximum(py1, gy1)?;
    let ew = tape.sub(ex1, ex0)?;
    let eh = tape.sub(ey1, ey0)?;
    let ew2 = tape.mul(ew, ew)?;
    let eh2 = tape.mul(eh, eh)?;
    let c2 = tape.add(ew2, eh2)?;
    let dist_term = tape.div(rho2, c2)?;

    let neg_iou = tape.scale(iou, -1.0);
    let one_minus_iou = tape.add_scalar(neg_iou, 1.0);
    let per_pair = tape.add(one_minus_iou, dist_term)?;
    Ok(tape.mean_all(per_pair))
}
