//! Letterbox resizing and deterministic shuffled batching of paired
//! samples into training-ready arrays.

use super::PairedSample;
use crate::detection::{BBox, GtBox};
use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use crate::weathersim::FogParams;
use ndarray::{Array3, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;

/// Gray value used for letterbox padding.
pub const PAD_VALUE: f32 = 0.5;

/// Affine image-to-target mapping produced by [`letterbox`]:
/// `target = source · scale + pad`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LetterboxMapping {
    pub scale: f32,
    pub pad_x: usize,
    pub pad_y: usize,
}

fn bilinear_resize(img: &ImageTensor, oh: usize, ow: usize) -> ImageTensor {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let sy_scale = h as f32 / oh as f32;
    let sx_scale = w as f32 / ow as f32;
    let data = Array3::from_shape_fn((c, oh, ow), |(ci, oy, ox)| {
        let sy = ((oy as f32 + 0.5) * sy_scale - 0.5).clamp(0.0, (h - 1) as f32);
        let sx = ((ox as f32 + 0.5) * sx_scale - 0.5).clamp(0.0, (w - 1) as f32);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ay = sy - y0 as f32;
        let ax = sx - x0 as f32;
        let top = img.data[[ci, y0, x0]] * (1.0 - ax) + img.data[[ci, y0, x1]] * ax;
        let bot = img.data[[ci, y1, x0]] * (1.0 - ax) + img.data[[ci, y1, x1]] * ax;
        top * (1.0 - ay) + bot * ay
    });
    ImageTensor {
        data,
        range: img.range,
    }
}

/// Aspect-preserving resize onto a `target_h`×`target_w` canvas, padding
/// the rest with [`PAD_VALUE`] and centering the content.
pub fn letterbox(
    img: &ImageTensor,
    target_h: usize,
    target_w: usize,
) -> Result<(ImageTensor, LetterboxMapping)> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "letterbox target {target_h}x{target_w} is empty"
        )));
    }
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("letterbox input is empty".into()));
    }
    let scale = (target_w as f32 / w as f32).min(target_h as f32 / h as f32);
    let new_w = ((w as f32 * scale).round() as usize).clamp(1, target_w);
    let new_h = ((h as f32 * scale).round() as usize).clamp(1, target_h);
    let resized = bilinear_resize(img, new_h, new_w);
    let pad_x = (target_w - new_w) / 2;
    let pad_y = (target_h - new_h) / 2;
    let mut data = Array3::from_elem((img.channels(), target_h, target_w), PAD_VALUE);
    data.slice_mut(ndarray::s![
        ..,
        pad_y..pad_y + new_h,
        pad_x..pad_x + new_w
    ])
    .assign(&resized.data);
    Ok((
        ImageTensor {
            data,
            range: img.range,
        },
        LetterboxMapping {
            scale,
            pad_x,
            pad_y,
        },
    ))
}

/// Applies a letterbox mapping to one box.
pub fn map_box(b: &BBox, m: &LetterboxMapping) -> BBox {
    BBox {
        x_min: b.x_min * m.scale + m.pad_x as f32,
        y_min: b.y_min * m.scale + m.pad_y as f32,
        x_max: b.x_max * m.scale + m.pad_x as f32,
        y_max: b.y_max * m.scale + m.pad_y as f32,
    }
}

/// Inverse of [`map_box`]: canvas coordinates back to the source image.
pub fn unmap_box(b: &BBox, m: &LetterboxMapping) -> BBox {
    BBox {
        x_min: (b.x_min - m.pad_x as f32) / m.scale,
        y_min: (b.y_min - m.pad_y as f32) / m.scale,
        x_max: (b.x_max - m.pad_x as f32) / m.scale,
        y_max: (b.y_max - m.pad_y as f32) / m.scale,
    }
}

/// One assembled batch: stacked `[n, 3, h, w]` images plus per-image
/// boxes already mapped into the target canvas.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub foggy: ArrayD<f32>,
    pub clean: ArrayD<f32>,
    pub gts: Vec<Vec<GtBox>>,
    pub fog: Vec<FogParams>,
}

/// Shuffles `0..n` and splits it into `batch_size` chunks, keeping the
/// final partial chunk.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Letterboxes and stacks the chosen samples.
pub fn assemble_batch(
    samples: &[PairedSample],
    indices: &[usize],
    target_h: usize,
    target_w: usize,
) -> Result<Batch> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = indices.len();
    let mut foggy = ArrayD::zeros(IxDyn(&[n, 3, target_h, target_w]));
    let mut clean = ArrayD::zeros(IxDyn(&[n, 3, target_h, target_w]));
    let mut ids = Vec::with_capacity(n);
    let mut gts = Vec::with_capacity(n);
    let mut fog = Vec::with_capacity(n);
    for (bi, &si) in indices.iter().enumerate() {
        let s = samples.get(si).ok_or_else(|| {
            Error::InvalidArgument(format!("batch index {si} out of range ({})", samples.len()))
        })?;
        let (f_img, mapping) = letterbox(&s.foggy, target_h, target_w)?;
        let (c_img, c_mapping) = letterbox(&s.clean, target_h, target_w)?;
        if mapping != c_mapping {
            return Err(Error::Shape(format!(
                "sample {}: foggy and clean images disagree in size",
                s.annotation.image_id
            )));
        }
        for ch in 0..3 {
            for y in 0..target_h {
                for x in 0..target_w {
                    foggy[[bi, ch, y, x]] = f_img.data[[ch, y, x]];
                    clean[[bi, ch, y, x]] = c_img.data[[ch, y, x]];
                }
            }
        }
        ids.push(s.annotation.image_id.clone());
        gts.push(
            s.annotation
                .boxes
                .iter()
                .map(|b| GtBox {
                    class_id: b.class_id,
                    bbox: map_box(&b.bbox, &mapping),
                })
                .collect(),
        );
        fog.push(s.fog);
    }
    Ok(Batch {
        ids,
        foggy,
        clean,
        gts,
        fog,
    })
}

/// Epoch iterator: deterministic shuffled batches over a sample slice.
pub struct BatchIterator<'a> {
    samples: &'a [PairedSample],
    plan: Vec<Vec<usize>>,
    next: usize,
    target_h: usize,
    target_w: usize,
}

impl<'a> BatchIterator<'a> {
    pub fn new(
        samples: &'a [PairedSample],
        batch_size: usize,
        target_h: usize,
        target_w: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(BatchIterator {
            samples,
            plan: shuffled_batches(samples.len(), batch_size, rng)?,
            next: 0,
            target_h,
            target_w,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.plan.len()
    }
}

impl Iterator for BatchIterator<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        let indices = self.plan.get(self.next)?;
        self.next += 1;
        Some(assemble_batch(
            self.samples,
            indices,
            self.target_h,
            self.target_w,
        ))
    }
}
