//! Channel-major floating-point rasters and 8-bit image I/O.
//!
//! All in-memory image math runs on `f32` values in a declared range,
//! normally `[0, 1]`. 8-bit files are mapped by dividing by 255 on load
//! and rounding to nearest on save.

use crate::error::{Error, Result};
use ndarray::Array3;
use std::path::Path;

/// Channel-major (C, H, W) floating-point raster with a declared value range.
///
/// Carries clean/foggy/restored images. The range is `[0, 1]` for stored
/// images and `[-1, 1]` for restoration-network outputs.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    /// Declared (lo, hi) value range. Not enforced on construction; callers
    /// that require a range use [`ImageTensor::validate_range`].
    pub range: (f32, f32),
}

impl ImageTensor {
    pub fn new_unit(data: Array3<f32>) -> Self {
        ImageTensor {
            data,
            range: (0.0, 1.0),
        }
    }

    pub fn new_tanh(data: Array3<f32>) -> Self {
        ImageTensor {
            data,
            range: (-1.0, 1.0),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Errors unless every value lies inside the declared range.
    pub fn validate_range(&self) -> Result<()> {
        let (lo, hi) = self.range;
        for &v in self.data.iter() {
            if !(lo..=hi).contains(&v) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "pixel value {v} outside declared range [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    /// Remaps a `[-1, 1]` raster into `[0, 1]` via `(y + 1) / 2`.
    pub fn tanh_to_unit(&self) -> ImageTensor {
        ImageTensor::new_unit(self.data.mapv(|v| (v + 1.0) / 2.0))
    }

    /// Interleaved 8-bit RGB rows, rounding to nearest and clamping.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels for RGB output, got {}",
                self.channels()
            )));
        }
        let (h, w) = (self.height(), self.width());
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = [0, 1, 2].map(|c| {
                    let v = self.data[[c, y, x]].clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                });
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        Ok(img)
    }

    pub fn from_rgb8(img: &image::RgbImage) -> ImageTensor {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0
        });
        ImageTensor::new_unit(data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ImageTensor> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        Ok(ImageTensor::from_rgb8(&img))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()?.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }
}
