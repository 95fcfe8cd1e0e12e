//! Physically-based fog synthesis via the atmospheric scattering model.
//!
//! A foggy image is formed as `I = J·t + A·(1 - t)` where `J` is the clean
//! scene radiance, `A` the global atmospheric light and `t = exp(-beta·d)`
//! the per-pixel transmission derived from a synthetic scene depth that
//! peaks at the image center. The analytic inverse is provided for
//! round-trip verification; it is not a dehazer.
//!
//! All fog arithmetic runs in `f64`: the inverse divides by `t`, which
//! amplifies single-precision rounding beyond useful tolerances.

use crate::error::{Error, Result};
use crate::raster::ImageTensor;
use ndarray::Array2;
use rand::Rng;

/// Transmission floor below which the analytic inverse is not trusted:
/// dividing by smaller `t` amplifies quantization noise unboundedly.
pub const T_FLOOR: f64 = 0.05;

/// Scattering-coefficient sampling range for training data.
pub const TRAIN_BETA_RANGE: (f64, f64) = (0.07, 0.12);

/// Wider scattering range for held-out test data, so evaluation covers
/// both lighter and denser fog than was trained on.
pub const TEST_BETA_RANGE: (f64, f64) = (0.05, 0.14);

/// Atmospheric light and scattering coefficient for one foggy rendering.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FogParams {
    /// Global atmospheric light, in `[0, 1]`.
    pub atmospheric_light: f64,
    /// Scattering coefficient, `>= 0` (0 is the degenerate "no fog" value).
    pub beta: f64,
}

impl FogParams {
    pub fn new(atmospheric_light: f64, beta: f64) -> Result<FogParams> {
        if !(0.0..=1.0).contains(&atmospheric_light) || !atmospheric_light.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "atmospheric light {atmospheric_light} outside [0, 1]"
            )));
        }
        if beta < 0.0 || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scattering coefficient {beta} must be >= 0"
            )));
        }
        Ok(FogParams {
            atmospheric_light,
            beta,
        })
    }
}

/// Per-pixel synthetic scene depth, maximal at the image center.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub values: Array2<f64>,
}

/// Per-pixel transmission `t = exp(-beta·d)`, values in `(0, 1]`.
#[derive(Debug, Clone)]
pub struct TransmissionMap {
    pub values: Array2<f64>,
}

/// Result of the analytic fog inverse. Pixels whose transmission fell below
/// [`T_FLOOR`] are flagged untrusted rather than reconstructed blindly.
#[derive(Debug, Clone)]
pub struct FogInversion {
    pub image: ImageTensor,
    pub untrusted: Array2<bool>,
}

/// Synthetic depth: `d = max(0, -0.04·rho + sqrt(max(w, h)))` with `rho` the
/// Euclidean pixel distance to the geometric center `((w-1)/2, (h-1)/2)`.
///
/// The clamp keeps depth nonnegative for extreme aspect ratios, where the
/// linear falloff would otherwise push `t` above 1.
pub fn compute_depth(width: usize, height: usize) -> Result<DepthMap> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument(format!(
            "depth map dimensions must be positive, got {width}x{height}"
        )));
    }
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let peak = (width.max(height) as f64).sqrt();
    let values = Array2::from_shape_fn((height, width), |(y, x)| {
        let rho = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        (-0.04 * rho + peak).max(0.0)
    });
    Ok(DepthMap { values })
}

/// Elementwise `t = exp(-beta·d)`.
pub fn compute_transmission(depth: &DepthMap, beta: f64) -> Result<TransmissionMap> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "scattering coefficient {beta} must be >= 0"
        )));
    }
    Ok(TransmissionMap {
        values: depth.values.mapv(|d| (-beta * d).exp()),
    })
}

/// Renders fog over a clean image: `I = J·t + A·(1 - t)` per pixel and
/// channel, with one shared transmission map across channels.
pub fn apply_fog(clean: &ImageTensor, params: &FogParams) -> Result<ImageTensor> {
    let depth = compute_depth(clean.width(), clean.height())?;
    apply_fog_with_depth(clean, params, &depth)
}

/// [`apply_fog`] with a precomputed depth map, for callers rendering many
/// images of the same size.
pub fn apply_fog_with_depth(
    clean: &ImageTensor,
    params: &FogParams,
    depth: &DepthMap,
) -> Result<ImageTensor> {
    if depth.values.dim() != (clean.height(), clean.width()) {
        return Err(Error::Shape(format!(
            "depth map {:?} does not match image {}x{}",
            depth.values.dim(),
            clean.height(),
            clean.width()
        )));
    }
    clean.validate_range()?;
    if clean.range != (0.0, 1.0) {
        return Err(Error::InvalidArgument(format!(
            "apply_fog expects a [0, 1] image, got declared range {:?}",
            clean.range
        )));
    }
    let t = compute_transmission(depth, params.beta)?;
    let a = params.atmospheric_light;
    let mut out = clean.data.clone();
    for c in 0..clean.channels() {
        for y in 0..clean.height() {
            for x in 0..clean.width() {
                let tv = t.values[[y, x]];
                let j = clean.data[[c, y, x]] as f64;
                out[[c, y, x]] = (j * tv + a * (1.0 - tv)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(ImageTensor::new_unit(out))
}

/// Analytic inverse of [`apply_fog`]: `J = (I - A·(1 - t)) / t`, clamped to
/// `[0, 1]`. Pixels with `t <` [`T_FLOOR`] are flagged in the mask.
pub fn invert_fog(foggy: &ImageTensor, params: &FogParams) -> Result<FogInversion> {
    let depth = compute_depth(foggy.width(), foggy.height())?;
    let t = compute_transmission(&depth, params.beta)?;
    let a = params.atmospheric_light;
    let mut out = foggy.data.clone();
    let untrusted = t.values.mapv(|tv| tv < T_FLOOR);
    for c in 0..foggy.channels() {
        for y in 0..foggy.height() {
            for x in 0..foggy.width() {
                let tv = t.values[[y, x]];
                let i = foggy.data[[c, y, x]] as f64;
                out[[c, y, x]] = ((i - a * (1.0 - tv)) / tv).clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(FogInversion {
        image: ImageTensor::new_unit(out),
        untrusted,
    })
}

/// Uniform sample from `[lo, hi]`; deterministic under a seeded `rng`.
pub fn sample_beta(range: (f64, f64), rng: &mut impl Rng) -> Result<f64> {
    let (lo, hi) = range;
    if !(lo > 0.0 && lo <= hi) || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "beta range ({lo}, {hi}) must satisfy 0 < lo <= hi"
        )));
    }
    if lo == hi {
        return Ok(lo);
    }
    Ok(rng.gen_range(lo..=hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit_image(rng: &mut impl Rng, h: usize, w: usize) -> ImageTensor {
        ImageTensor::new_unit(Array3::from_shape_fn((3, h, w), |_| rng.gen::<f32>()))
    }

    #[test]
    fn depth_at_center_is_sqrt_of_max_dim() {
        // Odd grid: a pixel sits exactly at the geometric center (rho = 0).
        let d = compute_depth(101, 101).unwrap();
        assert!((d.values[[50, 50]] - 101f64.sqrt()).abs() < 1e-12);
        // Even grid: the fractional-coordinate center puts the four nearest
        // pixels at rho = sqrt(0.5).
        let d = compute_depth(100, 100).unwrap();
        let expect = 10.0 - 0.04 * 0.5f64.sqrt();
        assert!((d.values[[50, 50]] - expect).abs() < 1e-12);
        assert!((d.values[[49, 49]] - expect).abs() < 1e-12);
    }

    #[test]
    fn depth_single_pixel() {
        let d = compute_depth(1, 1).unwrap();
        assert_eq!(d.values[[0, 0]], 1.0);
    }

    #[test]
    fn depth_matches_independent_per_pixel_loop() {
        // Independent oracle: evaluate the depth formula pixel by pixel
        // without going through Array2::from_shape_fn.
        let (w, h) = (100usize, 64usize);
        let d = compute_depth(w, h).unwrap();
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let rho = ((x as f64 - cx).hypot(y as f64 - cy)).abs();
                let expect = (-0.04 * rho + (w.max(h) as f64).sqrt()).max(0.0);
                assert!((d.values[[y, x]] - expect).abs() < 1e-12);
            }
        }
        // Spot value: corner of a 100x100 grid sits rho = 49.5·sqrt(2) from
        // the geometric center, giving d = 10 - 0.04·70.0036 = 7.1998573...
        let d = compute_depth(100, 100).unwrap();
        let expect = 10.0 - 0.04 * (49.5f64 * 49.5 * 2.0).sqrt();
        assert!((d.values[[0, 0]] - expect).abs() < 1e-9);
    }

    #[test]
    fn depth_rejects_zero_dims() {
        assert!(compute_depth(0, 5).is_err());
        assert!(compute_depth(5, 0).is_err());
    }

    #[test]
    fn depth_symmetric_under_flips_on_odd_grid() {
        let d = compute_depth(9, 7).unwrap();
        for y in 0..7 {
            for x in 0..9 {
                assert_eq!(d.values[[y, x]], d.values[[y, 8 - x]]);
                assert_eq!(d.values[[y, x]], d.values[[6 - y, x]]);
            }
        }
    }

    #[test]
    fn transmission_identity_at_zero_beta() {
        let d = compute_depth(8, 8).unwrap();
        let t = compute_transmission(&d, 0.0).unwrap();
        assert!(t.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transmission_scalar_value_and_monotonicity() {
        let d = DepthMap {
            values: Array2::from_elem((1, 1), 10.0),
        };
        let t = compute_transmission(&d, 0.1).unwrap();
        assert!((t.values[[0, 0]] - (-1.0f64).exp()).abs() < 1e-12);
        let t_lo = compute_transmission(&d, 0.07).unwrap();
        let t_hi = compute_transmission(&d, 0.12).unwrap();
        assert!(t_lo.values[[0, 0]] > t_hi.values[[0, 0]]);
        assert!(compute_transmission(&d, -0.1).is_err());
    }

    #[test]
    fn transmission_bounds_hold() {
        let d = compute_depth(33, 17).unwrap();
        for beta in [0.05, 0.07, 0.12, 0.14] {
            let t = compute_transmission(&d, beta).unwrap();
            assert!(t.values.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn fog_fixed_point_at_airlight() {
        let params = FogParams::new(0.5, 0.12).unwrap();
        let clean = ImageTensor::new_unit(Array3::from_elem((3, 16, 16), 0.5));
        let foggy = apply_fog(&clean, &params).unwrap();
        for &v in foggy.data.iter() {
            assert!((v - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn fog_identity_at_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let clean = random_unit_image(&mut rng, 12, 20);
        let params = FogParams::new(0.5, 0.0).unwrap();
        let foggy = apply_fog(&clean, &params).unwrap();
        assert_eq!(foggy.data, clean.data);
    }

    #[test]
    fn fog_scalar_blend_value() {
        // J = 1.0, A = 0.5, t = exp(-1): I = t + 0.5·(1 - t) = 0.683940.
        let clean = ImageTensor::new_unit(Array3::from_elem((1, 1, 1), 1.0));
        // A 1x1 image has depth 1, so beta = 1 gives t = exp(-1).
        let params = FogParams::new(0.5, 1.0).unwrap();
        let foggy = apply_fog(&clean, &params).unwrap();
        let t = (-1.0f64).exp();
        let expect = (t + 0.5 * (1.0 - t)) as f32;
        assert!((foggy.data[[0, 0, 0]] - expect).abs() < 1e-7);
        assert!((expect - 0.683_940).abs() < 1e-6);
    }

    #[test]
    fn fog_rejects_out_of_range_input() {
        let mut clean = ImageTensor::new_unit(Array3::zeros((3, 4, 4)));
        clean.data[[0, 0, 0]] = -0.2;
        let params = FogParams::new(0.5, 0.1).unwrap();
        assert!(apply_fog(&clean, &params).is_err());
    }

    #[test]
    fn inverse_round_trip_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4 {
            let clean = random_unit_image(&mut rng, 48, 48);
            let a = 0.3 + 0.4 * rng.gen::<f64>();
            let beta = sample_beta((0.05, 0.14), &mut rng).unwrap();
            let params = FogParams::new(a, beta).unwrap();
            let foggy = apply_fog(&clean, &params).unwrap();
            let inv = invert_fog(&foggy, &params).unwrap();
            let mut max_err = 0.0f32;
            for ((&j, &j_hat), &bad) in clean
                .data
                .iter()
                .zip(inv.image.data.iter())
                .zip(inv.untrusted.iter().cycle())
            {
                if !bad {
                    max_err = max_err.max((j - j_hat).abs());
                }
            }
            assert!(max_err < 1e-6, "round-trip error {max_err}");
        }
    }

    #[test]
    fn inverse_of_airlight_is_airlight() {
        let params = FogParams::new(0.5, 0.1).unwrap();
        let foggy = ImageTensor::new_unit(Array3::from_elem((3, 8, 8), 0.5));
        let inv = invert_fog(&foggy, &params).unwrap();
        for &v in inv.image.data.iter() {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn inverse_identity_at_zero_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let foggy = random_unit_image(&mut rng, 6, 6);
        let params = FogParams::new(0.5, 0.0).unwrap();
        let inv = invert_fog(&foggy, &params).unwrap();
        assert_eq!(inv.image.data, foggy.data);
        assert!(inv.untrusted.iter().all(|&b| !b));
    }

    #[test]
    fn center_transmission_is_minimal() {
        let d = compute_depth(25, 25).unwrap();
        let t = compute_transmission(&d, 0.1).unwrap();
        let center = t.values[[12, 12]];
        assert!(t.values.iter().all(|&v| center <= v));
    }

    #[test]
    fn beta_sampling_stays_in_range_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let b = sample_beta((0.07, 0.12), &mut rng).unwrap();
            assert!((0.07..=0.12).contains(&b));
        }
        for _ in 0..100 {
            let b = sample_beta((0.05, 0.14), &mut rng).unwrap();
            assert!((0.05..=0.14).contains(&b));
        }
        assert_eq!(sample_beta((0.1, 0.1), &mut rng).unwrap(), 0.1);
        assert!(sample_beta((0.2, 0.1), &mut rng).is_err());
        assert!(sample_beta((0.0, 0.1), &mut rng).is_err());

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            assert_eq!(
                sample_beta((0.07, 0.12), &mut a).unwrap(),
                sample_beta((0.07, 0.12), &mut b).unwrap()
            );
        }
    }
}
