//! Detection loss: IoU term over positive cells, class BCE over positive
//! cells, and an objectness term over every cell (focal when enabled).

use super::{assign_targets, GtBox, HeadOutput, MAX_LOG_SIZE_RATIO};
use crate::autograd::{Elem, Tape, Tx};
use ndarray::{ArrayD, IxDyn};

/// Weight of the IoU term inside the detection total.
pub const IOU_WEIGHT: f64 = 5.0;

/// Focal-loss shape parameters for the objectness term.
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

/// Scalar values of one detection-loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub iou: f64,
    pub cls: f64,
    pub obj: f64,
    pub total: f64,
    pub num_pos: usize,
}

struct PositiveCell {
    /// Batch index and cell coordinates.
    cell: (usize, usize, usize),
    gx: usize,
    gy: usize,
    class_id: usize,
    gt: super::BBox,
}

/// Builds the detection loss for a batch.
///
/// With no positive cells anywhere, the IoU and class terms are zero and
/// only the objectness term is active. `focal_on` switches the
/// objectness term between focal loss and plain BCE; either way it is
/// normalized by `max(1, num_pos)`.
pub fn detection_loss<E: Elem>(
    tape: &Tape<E>,
    outputs: &[HeadOutput],
    batch_gts: &[Vec<GtBox>],
    num_classes: usize,
    focal_on: bool,
) -> (Tx, LossBreakdown) {
    let levels: Vec<(usize, usize, usize)> = outputs
        .iter()
        .map(|o| {
            let s = tape.shape(o.reg);
            (o.stride, s[2], s[3])
        })
        .collect();
    let batch = tape.shape(outputs[0].reg)[0];
    assert_eq!(batch, batch_gts.len(), "one ground-truth list per image");

    // Assign each image against the shared grid geometry.
    let mut per_level: Vec<Vec<PositiveCell>> = outputs.iter().map(|_| Vec::new()).collect();
    for (ni, gts) in batch_gts.iter().enumerate() {
        for (li, la) in assign_targets(gts, &levels).into_iter().enumerate() {
            for (cy, cx, gi) in la.positives {
                per_level[li].push(PositiveCell {
                    cell: (ni, cy, cx),
                    gx: cx,
                    gy: cy,
                    class_id: gts[gi].class_id,
                    gt: gts[gi].bbox,
                });
            }
        }
    }
    let num_pos: usize = per_level.iter().map(Vec::len).sum();

    let constv = |vals: Vec<f64>| {
        tape.constant(ArrayD::from_shape_vec(
            IxDyn(&[vals.len()]),
            vals.into_iter().map(E::from_f64).collect(),
        )
        .unwrap())
    };

    // IoU of decoded positive boxes against their targets, kept on the
    // tape so gradients flow back through the regression outputs.
    let mut iou_parts: Vec<Tx> = Vec::new();
    let mut cls_parts: Vec<Tx> = Vec::new();
    for (out, cells) in outputs.iter().zip(&per_level) {
        if cells.is_empty() {
            continue;
        }
        let p = cells.len();
        let s = out.stride as f64;
        let idx: Vec<(usize, usize, usize)> = cells.iter().map(|c| c.cell).collect();

        let reg = tape.gather_cells(out.reg, &idx); // [p, 4]
        let col = |i: usize| {
            let c = tape.slice_block(reg, 1, i, 1);
            tape.reshape(c, &[p])
        };
        let gxs = constv(cells.iter().map(|c| c.gx as f64).collect());
        let gys = constv(cells.iter().map(|c| c.gy as f64).collect());
        let cx = tape.scale(tape.add(col(0), gxs), E::from_f64(s));
        let cy = tape.scale(tape.add(col(1), gys), E::from_f64(s));
        let clampv = tape.constant(ArrayD::from_elem(
            IxDyn(&[p]),
            E::from_f64(MAX_LOG_SIZE_RATIO as f64),
        ));
        let half_w = tape.scale(tape.exp(tape.min_elem(col(2), clampv)), E::from_f64(0.5 * s));
        let half_h = tape.scale(tape.exp(tape.min_elem(col(3), clampv)), E::from_f64(0.5 * s));
        let x1 = tape.sub(cx, half_w);
        let x2 = tape.add(cx, half_w);
        let y1 = tape.sub(cy, half_h);
        let y2 = tape.add(cy, half_h);

        let gx1 = constv(cells.iter().map(|c| c.gt.x_min as f64).collect());
        let gy1 = constv(cells.iter().map(|c| c.gt.y_min as f64).collect());
        let gx2 = constv(cells.iter().map(|c| c.gt.x_max as f64).collect());
        let gy2 = constv(cells.iter().map(|c| c.gt.y_max as f64).collect());

        let iw = tape.relu(tape.sub(tape.min_elem(x2, gx2), tape.max_elem(x1, gx1)));
        let ih = tape.relu(tape.sub(tape.min_elem(y2, gy2), tape.max_elem(y1, gy1)));
        let inter = tape.mul(iw, ih);
        let area_pred = tape.mul(tape.sub(x2, x1), tape.sub(y2, y1));
        let area_gt = constv(cells.iter().map(|c| c.gt.area() as f64).collect());
        let union = tape.sub(tape.add(area_pred, area_gt), inter);
        let union_safe = tape.add_scalar(union, E::from_f64(1e-9));
        iou_parts.push(tape.div(inter, union_safe));

        // Class term: BCE over the positive cells' class logits.
        let logits = tape.gather_cells(out.cls, &idx); // [p, num_classes]
        let mut onehot = ArrayD::<E>::zeros(IxDyn(&[p, num_classes]));
        for (r, c) in cells.iter().enumerate() {
            onehot[[r, c.class_id]] = E::one();
        }
        let targets = tape.constant(onehot);
        cls_parts.push(tape.bce_with_logits(logits, targets));
    }

    let zero = || tape.constant(ArrayD::zeros(IxDyn(&[])));
    let (loss_iou, loss_cls) = if num_pos == 0 {
        (zero(), zero())
    } else {
        let all_iou = if iou_parts.len() == 1 {
            iou_parts[0]
        } else {
            tape.concat(0, &iou_parts)
        };
        let ones = tape.constant(ArrayD::from_elem(IxDyn(&[num_pos]), E::one()));
        let loss_iou = tape.mean_all(tape.sub(ones, all_iou));

        let cls_sum = cls_parts
            .iter()
            .map(|&c| tape.sum_all(c))
            .reduce(|a, b| tape.add(a, b))
            .expect("at least one positive level");
        let loss_cls = tape.scale(cls_sum, E::from_f64(1.0 / num_pos as f64));
        (loss_iou, loss_cls)
    };

    // Objectness over every cell of every level.
    let mut obj_parts: Vec<Tx> = Vec::new();
    let mut obj_targets: Vec<E> = Vec::new();
    for (li, out) in outputs.iter().enumerate() {
        let s = tape.shape(out.obj);
        let (n, h, w) = (s[0], s[2], s[3]);
        obj_parts.push(tape.reshape(out.obj, &[n * h * w]));
        let mut t = vec![E::zero(); n * h * w];
        for c in &per_level[li] {
            let (ni, cy, cx) = c.cell;
            t[(ni * h + cy) * w + cx] = E::one();
        }
        obj_targets.extend(t);
    }
    let obj_logits = if obj_parts.len() == 1 {
        obj_parts[0]
    } else {
        tape.concat(0, &obj_parts)
    };
    let total_cells = obj_targets.len();
    let obj_target =
        tape.constant(ArrayD::from_shape_vec(IxDyn(&[total_cells]), obj_targets).unwrap());
    let obj_elems = if focal_on {
        tape.focal_with_logits(obj_logits, obj_target, FOCAL_ALPHA, FOCAL_GAMMA)
    } else {
        tape.bce_with_logits(obj_logits, obj_target)
    };
    let loss_obj = tape.scale(
        tape.sum_all(obj_elems),
        E::from_f64(1.0 / num_pos.max(1) as f64),
    );

    let total = tape.add(
        tape.add(tape.scale(loss_iou, E::from_f64(IOU_WEIGHT)), loss_cls),
        loss_obj,
    );
    let breakdown = LossBreakdown {
        iou: tape.scalar(loss_iou).to_f64(),
        cls: tape.scalar(loss_cls).to_f64(),
        obj: tape.scalar(loss_obj).to_f64(),
        total: tape.scalar(total).to_f64(),
        num_pos,
    };
    (total, breakdown)
}
