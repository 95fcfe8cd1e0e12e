//! Synthetic desk-scale detection scenes: saturated colored shapes on a
//! desaturated gray background, with pixel-tight annotation boxes.

use super::Annotation;
use crate::detection::{iou, BBox, GtBox};
use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use ndarray::Array3;
use rand::Rng;

/// Shape classes drawn by the generator, in class-id order.
pub const TOY_CLASS_NAMES: [&str; 3] = ["block", "disc", "wedge"];

const BASE_COLORS: [[f32; 3]; 3] = [
    [0.85, 0.15, 0.20],
    [0.10, 0.70, 0.25],
    [0.15, 0.30, 0.90],
];

/// Scene-generation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Bounding-box side lengths, in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Maximum IoU allowed between any two placed boxes.
    pub max_overlap: f32,
    /// Placement attempts per object before giving up on it.
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 160,
            height: 160,
            min_objects: 1,
            max_objects: 4,
            min_size: 24,
            max_size: 64,
            max_overlap: 0.0,
            max_retries: 40,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "scene size {}x{} is below the 16-pixel minimum",
                self.width, self.height
            )));
        }
        if self.min_size < 4
            || self.min_size > self.max_size
            || self.max_size > self.width.min(self.height)
        {
            return Err(Error::Config(format!(
                "object sizes [{}, {}] must fit 4 ..= min(width, height)",
                self.min_size, self.max_size
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range ({}, {}) is inverted",
                self.min_objects, self.max_objects
            )));
        }
        if !(0.0..1.0).contains(&self.max_overlap) {
            return Err(Error::Config(format!(
                "max overlap {} must be in [0, 1)",
                self.max_overlap
            )));
        }
        if self.max_retries == 0 {
            return Err(Error::Config("need at least one placement retry".into()));
        }
        Ok(())
    }
}

/// A generated scene. `placement_shortfall` counts objects that could not
/// be placed within the retry budget.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub image: ImageTensor,
    pub annotation: Annotation,
    pub placement_shortfall: usize,
}

/// Pixel coordinates covered by one shape attempt, plus the class drawn.
struct Placement {
    class_id: usize,
    mask: Vec<(usize, usize)>,
    color: [f32; 3],
}

fn shape_mask(
    class_id: usize,
    x0: usize,
    y0: usize,
    bw: usize,
    bh: usize,
    orientation: usize,
) -> Vec<(usize, usize)> {
    let mut mask = Vec::new();
    match class_id {
        0 => {
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    mask.push((y, x));
                }
            }
        }
        1 => {
            let (a, b) = (bw as f32 / 2.0, bh as f32 / 2.0);
            let (cx, cy) = (x0 as f32 + a, y0 as f32 + b);
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let dx = (x as f32 + 0.5 - cx) / a;
                    let dy = (y as f32 + 0.5 - cy) / b;
                    if dx * dx + dy * dy <= 1.0 {
                        mask.push((y, x));
                    }
                }
            }
        }
        _ => {
            // A triangle filling the box, apex on the side picked by
            // `orientation`.
            let (x1, y1) = ((x0 + bw) as f32, (y0 + bh) as f32);
            let (x0f, y0f) = (x0 as f32, y0 as f32);
            let xm = x0f + bw as f32 / 2.0;
            let ym = y0f + bh as f32 / 2.0;
            let verts = match orientation % 4 {
                0 => [(xm, y0f), (x0f, y1), (x1, y1)],
                1 => [(xm, y1), (x0f, y0f), (x1, y0f)],
                2 => [(x0f, ym), (x1, y0f), (x1, y1)],
                _ => [(x1, ym), (x0f, y0f), (x0f, y1)],
            };
            let edge = |p: (f32, f32), q: (f32, f32), x: f32, y: f32| {
                (q.0 - p.0) * (y - p.1) - (q.1 - p.1) * (x - p.0)
            };
            for y in y0..y0 + bh {
                for x in x0..x0 + bw {
                    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                    let e0 = edge(verts[0], verts[1], px, py);
                    let e1 = edge(verts[1], verts[2], px, py);
                    let e2 = edge(verts[2], verts[0], px, py);
                    if (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0)
                        || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
                    {
                        mask.push((y, x));
                    }
                }
            }
        }
    }
    mask
}

fn tight_box(mask: &[(usize, usize)]) -> BBox {
    let mut y_lo = usize::MAX;
    let mut y_hi = 0;
    let mut x_lo = usize::MAX;
    let mut x_hi = 0;
    for &(y, x) in mask {
        y_lo = y_lo.min(y);
        y_hi = y_hi.max(y);
        x_lo = x_lo.min(x);
        x_hi = x_hi.max(x);
    }
    BBox {
        x_min: x_lo as f32,
        y_min: y_lo as f32,
        x_max: (x_hi + 1) as f32,
        y_max: (y_hi + 1) as f32,
    }
}

/// Draws one scene. The image is deterministic in `(rng state, cfg)`;
/// the background is pure gray so object pixels are separable by
/// saturation.
pub fn generate_toy_scene(
    rng: &mut impl Rng,
    cfg: &SceneConfig,
    image_id: &str,
) -> Result<ToyScene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);

    let fx: f32 = rng.gen_range(-1.0..1.0);
    let fy: f32 = rng.gen_range(-1.0..1.0);
    let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let mut data = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let u = fx * x as f32 / w as f32 + fy * y as f32 / h as f32;
            let g = 0.62 + 0.12 * (std::f32::consts::TAU * u + phase).sin()
                + rng.gen_range(-0.02..0.02f32);
            for c in 0..3 {
                data[[c, y, x]] = g;
            }
        }
    }

    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<GtBox> = Vec::new();
    let mut placements: Vec<Placement> = Vec::new();
    let mut shortfall = 0;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let class_id = rng.gen_range(0..TOY_CLASS_NAMES.len());
            let bw = rng.gen_range(cfg.min_size..=cfg.max_size);
            let bh = rng.gen_range(cfg.min_size..=cfg.max_size);
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            let orientation = rng.gen_range(0..4usize);
            let color = {
                let base = BASE_COLORS[class_id];
                [0, 1, 2].map(|c| (base[c] + rng.gen_range(-0.08..0.08)).clamp(0.02, 0.98))
            };
            let mask = shape_mask(class_id, x0, y0, bw, bh, orientation);
            debug_assert!(!mask.is_empty());
            let bbox = tight_box(&mask);
            if boxes.iter().any(|b| iou(&b.bbox, &bbox) > cfg.max_overlap) {
                continue;
            }
            boxes.push(GtBox { class_id, bbox });
            placements.push(Placement {
                class_id,
                mask,
                color,
            });
            placed = true;
            break;
        }
        if !placed {
            shortfall += 1;
        }
    }

    for p in &placements {
        debug_assert!(p.class_id < TOY_CLASS_NAMES.len());
        for &(y, x) in &p.mask {
            for c in 0..3 {
                data[[c, y, x]] = p.color[c];
            }
        }
    }

    let annotation = Annotation {
        image_id: image_id.to_string(),
        width: w,
        height: h,
        boxes,
    };
    annotation.validate()?;
    Ok(ToyScene {
        image: ImageTensor::new_unit(data),
        annotation,
        placement_shortfall: shortfall,
    })
}
