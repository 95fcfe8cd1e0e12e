//! Anchor-free object detection: box geometry, grid encoding, target
//! assignment, non-maximum suppression, losses, and the neck/head layers.

mod layers;
mod loss;

pub use layers::{DetectionHeads, HeadOutput, Neck, ScConv};
pub use loss::{detection_loss, LossBreakdown, IOU_WEIGHT};

use crate::error::{Error, Result};
use ndarray::ArrayD;
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

/// Feature strides of the three prediction levels.
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Center-prior assignment radius, in units of the level stride.
pub const CENTER_RADIUS: f32 = 2.5;

/// Upper clamp on predicted `ln(size / stride)` before exponentiation.
pub const MAX_LOG_SIZE_RATIO: f32 = 4.0;

/// Axis-aligned box in pixel coordinates, corners inclusive-exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl BBox {
    pub fn width(&self) -> f32 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f32 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f32 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f32, f32) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        self.x_min <= x && x <= self.x_max && self.y_min <= y && y <= self.y_max
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f32 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One scored box of one class, within a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    pub bbox: BBox,
}

/// A ground-truth box of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub class_id: usize,
    pub bbox: BBox,
}

fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox.x_min.total_cmp(&b.bbox.x_min))
        .then(a.bbox.y_min.total_cmp(&b.bbox.y_min))
}

/// Greedy per-class non-maximum suppression. Output is sorted by
/// descending score; calling it twice gives the same result.
pub fn nms(detections: &[Detection], iou_threshold: f32) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut keep: Vec<Detection> = Vec::new();
    for cand in sorted {
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == cand.class_id && iou(&k.bbox, &cand.bbox) > iou_threshold);
        if !suppressed {
            keep.push(cand);
        }
    }
    keep
}

/// Maps a box to the regression target of grid cell `(gx, gy)` at the
/// given stride: center offset in cells, log size in strides.
pub fn encode_box(b: &BBox, gx: usize, gy: usize, stride: usize) -> [f32; 4] {
    let s = stride as f32;
    let (cx, cy) = b.center();
    [
        cx / s - gx as f32,
        cy / s - gy as f32,
        (b.width() / s).ln(),
        (b.height() / s).ln(),
    ]
}

/// Inverse of [`encode_box`]: regression output of cell `(gx, gy)` to a
/// pixel-space box. The log-size channels are clamped above before
/// exponentiation.
pub fn decode_cell(t: [f32; 4], gx: usize, gy: usize, stride: usize) -> BBox {
    let s = stride as f32;
    let cx = (gx as f32 + t[0]) * s;
    let cy = (gy as f32 + t[1]) * s;
    let w = t[2].min(MAX_LOG_SIZE_RATIO).exp() * s;
    let h = t[3].min(MAX_LOG_SIZE_RATIO).exp() * s;
    BBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    }
}

/// Positive cells of one prediction level for one image.
#[derive(Debug, Clone)]
pub struct LevelAssignment {
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    /// `(cell_y, cell_x, gt_index)` triples.
    pub positives: Vec<(usize, usize, usize)>,
}

/// Center-prior assignment: a cell is positive for a box when the cell
/// center lies inside the box and within [`CENTER_RADIUS`] strides of the
/// box center along each axis. A cell claimed by several boxes goes to
/// the smallest by area.
pub fn assign_targets(gts: &[GtBox], levels: &[(usize, usize, usize)]) -> Vec<LevelAssignment> {
    levels
        .iter()
        .map(|&(stride, h, w)| {
            let s = stride as f32;
            let mut positives = Vec::new();
            for cy in 0..h {
                for cx in 0..w {
                    let px = (cx as f32 + 0.5) * s;
                    let py = (cy as f32 + 0.5) * s;
                    let mut best: Option<(usize, f32)> = None;
                    for (gi, gt) in gts.iter().enumerate() {
                        if !gt.bbox.contains(px, py) {
                            continue;
                        }
                        let (gcx, gcy) = gt.bbox.center();
                        if (px - gcx).abs() > CENTER_RADIUS * s
                            || (py - gcy).abs() > CENTER_RADIUS * s
                        {
                            continue;
                        }
                        let area = gt.bbox.area();
                        if best.map_or(true, |(_, a)| area < a) {
                            best = Some((gi, area));
                        }
                    }
                    if let Some((gi, _)) = best {
                        positives.push((cy, cx, gi));
                    }
                }
            }
            LevelAssignment {
                stride,
                h,
                w,
                positives,
            }
        })
        .collect()
}

fn sigmoid32(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decodes raw head outputs for a whole batch into per-image detections.
/// Each cell contributes at most its best-scoring class; detections below
/// `conf_threshold` are dropped. No suppression is applied here.
pub fn decode_predictions(
    levels: &[(ArrayD<f32>, ArrayD<f32>, ArrayD<f32>, usize)],
    conf_threshold: f32,
) -> Vec<Vec<Detection>> {
    assert!(!levels.is_empty(), "no prediction levels");
    let batch = levels[0].0.shape()[0];
    let mut out = vec![Vec::new(); batch];
    for (cls, reg, obj, stride) in levels {
        let (n, nc, h, w) = (
            cls.shape()[0],
            cls.shape()[1],
            cls.shape()[2],
            cls.shape()[3],
        );
        assert_eq!(n, batch);
        assert_eq!(reg.shape(), &[n, 4, h, w], "regression shape mismatch");
        assert_eq!(obj.shape(), &[n, 1, h, w], "objectness shape mismatch");
        for ni in 0..n {
            for gy in 0..h {
                for gx in 0..w {
                    let o = sigmoid32(obj[[ni, 0, gy, gx]]);
                    let (mut best_c, mut best_p) = (0usize, f32::MIN);
                    for ci in 0..nc {
                        let p = cls[[ni, ci, gy, gx]];
                        if p > best_p {
                            best_p = p;
                            best_c = ci;
                        }
                    }
                    let score = o * sigmoid32(best_p);
                    if score < conf_threshold {
                        continue;
                    }
                    let t = [
                        reg[[ni, 0, gy, gx]],
                        reg[[ni, 1, gy, gx]],
                        reg[[ni, 2, gy, gx]],
                        reg[[ni, 3, gy, gx]],
                    ];
                    out[ni].push(Detection {
                        class_id: best_c,
                        score,
                        bbox: decode_cell(t, gx, gy, *stride),
                    });
                }
            }
        }
    }
    for dets in &mut out {
        dets.sort_by(detection_order);
    }
    out
}

/// Writes detections in the interchange format, one per line:
/// `image_id class score x_min y_min x_max y_max`.
pub fn write_detections<W: Write>(
    out: &mut W,
    image_id: &str,
    detections: &[Detection],
) -> std::io::Result<()> {
    for d in detections {
        writeln!(
            out,
            "{} {} {:.6} {:.2} {:.2} {:.2} {:.2}",
            image_id, d.class_id, d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max
        )?;
    }
    Ok(())
}

/// Reads the interchange format back, grouping detections by image id.
pub fn read_detections<R: BufRead>(input: R) -> Result<BTreeMap<String, Vec<Detection>>> {
    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::InvalidArgument(format!("read failed: {e}")))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::InvalidArgument(format!(
                "detection line {}: expected 7 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let bad = |what: &str| {
            Error::InvalidArgument(format!("detection line {}: bad {what}", lineno + 1))
        };
        let class_id: usize = fields[1].parse().map_err(|_| bad("class"))?;
        let score: f32 = fields[2].parse().map_err(|_| bad("score"))?;
        let nums: Vec<f32> = fields[3..7]
            .iter()
            .map(|f| f.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("coordinate"))?;
        by_image
            .entry(fields[0].to_string())
            .or_default()
            .push(Detection {
                class_id,
                score,
                bbox: BBox {
                    x_min: nums[0],
                    y_min: nums[1],
                    x_max: nums[2],
                    y_max: nums[3],
                },
            });
    }
    Ok(by_image)
}
