//! Full model: shared backbone, detection neck and heads, and the
//! training-only restoration decoder, assembled according to a set of
//! variant flags so ablation runs can switch parts on and off.

use std::collections::BTreeMap;

use crate::autograd::{Elem, Tape, Tx};
use crate::backbone::{make_divisible, Backbone, BackboneConfig};
use crate::detection::{detection_loss, DetectionHeads, GtBox, HeadOutput, LossBreakdown, Neck};
use crate::error::{Error, Result};
use crate::nn::{Binding, ParamStore};
use crate::restoration::{restoration_loss, RestorationConfig, RestorationDecoder};
use ndarray::{ArrayD, IxDyn};

/// Which optional components a model variant includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantFlags {
    /// Restoration decoder and its loss term.
    pub restoration_on: bool,
    /// Deformable-conv + attention enhancement on the deepest map.
    pub dtfe_on: bool,
    /// Focal objectness loss instead of plain BCE.
    pub focal_on: bool,
    /// Self-calibrated convolutions in the detection heads.
    pub scconv_on: bool,
}

impl VariantFlags {
    /// Plain detector, nothing extra.
    pub fn base() -> Self {
        VariantFlags {
            restoration_on: false,
            dtfe_on: false,
            focal_on: false,
            scconv_on: false,
        }
    }

    /// Every component enabled.
    pub fn all_on() -> Self {
        VariantFlags {
            restoration_on: true,
            dtfe_on: true,
            focal_on: true,
            scconv_on: true,
        }
    }
}

/// Relative weights of the two loss groups in the grand total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Multiplier on the detection total.
    pub detection: f64,
    /// Multiplier on the restoration term.
    pub restoration: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            detection: 0.2,
            restoration: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("detection", self.detection), ("restoration", self.restoration)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Model construction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Input size as (height, width); both divisible by 32.
    pub image_size: (usize, usize),
    pub width_mult: f64,
    pub depth_mult: f64,
    pub flags: VariantFlags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 3,
            image_size: (160, 160),
            width_mult: 0.5,
            depth_mult: 0.33,
            flags: VariantFlags::all_on(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Config(format!(
                "image size must be a positive multiple of 32, got {h}x{w}"
            )));
        }
        if !(self.width_mult > 0.0) || !(self.depth_mult > 0.0) {
            return Err(Error::Config(format!(
                "width/depth multipliers must be positive, got {} and {}",
                self.width_mult, self.depth_mult
            )));
        }
        Ok(())
    }

    /// Channel width of the detection-head towers.
    pub fn head_width(&self) -> usize {
        make_divisible(256.0 * self.width_mult)
    }

    fn backbone_config(&self) -> BackboneConfig {
        let (h, w) = self.image_size;
        BackboneConfig {
            width_mult: self.width_mult,
            depth_mult: self.depth_mult,
            dtfe_map: self.flags.dtfe_on.then_some((h / 32, w / 32)),
            ..BackboneConfig::default()
        }
    }
}

/// One forward pass's outputs.
pub struct ModelOutputs {
    pub heads: Vec<HeadOutput>,
    /// Restored image in [-1, 1], present when the decoder is enabled.
    pub restored: Option<Tx>,
}

/// Scalar loss values of one joint forward/loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct JointLossBreakdown {
    pub detection: LossBreakdown,
    pub restoration: f64,
    pub grand_total: f64,
}

/// Backbone + neck + heads, with the restoration decoder attached when
/// the variant asks for it.
pub struct JointModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub heads: DetectionHeads,
    pub restoration: Option<RestorationDecoder>,
}

impl JointModel {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, seed: u64, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(store, seed, cfg.backbone_config())?;
        let w = backbone.cfg.widths();
        let level_widths = [w[2], w[3], w[4]];
        let neck = Neck::new(store, seed, level_widths, cfg.depth_mult);
        let heads = DetectionHeads::new(
            store,
            seed,
            level_widths,
            cfg.head_width(),
            cfg.num_classes,
            cfg.flags.scconv_on,
        )?;
        let restoration = if cfg.flags.restoration_on {
            let skip_channels: BTreeMap<String, usize> = [
                ("stride4".to_string(), w[1]),
                ("stride8".to_string(), w[2]),
                ("stride16".to_string(), w[3]),
            ]
            .into();
            Some(RestorationDecoder::new(
                store,
                seed,
                RestorationConfig {
                    c5_channels: w[4],
                    skip_channels,
                    final_upsample: 4,
                },
            )?)
        } else {
            None
        };
        Ok(JointModel {
            cfg,
            backbone,
            neck,
            heads,
            restoration,
        })
    }

    /// `x` is `[n, 3, h, w]` matching the configured image size.
    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Result<ModelOutputs> {
        let shape = bx.tape().shape(x);
        let (h, w) = self.cfg.image_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(Error::Shape(format!(
                "model expects [n, 3, {h}, {w}], got {shape:?}"
            )));
        }
        let pyr = self.backbone.forward(bx, x);
        let (p3, p4, p5) = self.neck.forward(bx, pyr.c3, pyr.c4, pyr.c5);
        let heads = self.heads.forward(bx, (p3, p4, p5));
        let restored = match &self.restoration {
            Some(dec) => Some(dec.forward(bx, pyr.c5, &pyr.skips)?),
            None => None,
        };
        Ok(ModelOutputs { heads, restored })
    }

    /// Grand total `w_det·detection + w_rest·restoration` on the tape,
    /// with every scalar term reported. `clean` is the batch of clean
    /// target images in [0, 1], required iff restoration is enabled.
    pub fn loss<E: Elem>(
        &self,
        tape: &Tape<E>,
        outputs: &ModelOutputs,
        gts: &[Vec<GtBox>],
        clean: Option<&ArrayD<E>>,
        weights: LossWeights,
    ) -> Result<(Tx, JointLossBreakdown)> {
        weights.validate()?;
        let (det_total, det) = detection_loss(
            tape,
            &outputs.heads,
            gts,
            self.cfg.num_classes,
            self.cfg.flags.focal_on,
        );
        let rest = match (&outputs.restored, clean) {
            (Some(r), Some(c)) => restoration_loss(tape, *r, c.clone()),
            (Some(_), None) => {
                return Err(Error::InvalidArgument(
                    "restoration is enabled; the loss needs clean target images".into(),
                ))
            }
            (None, _) => tape.constant(ArrayD::zeros(IxDyn(&[]))),
        };
        let grand = tape.add(
            tape.scale(det_total, E::from_f64(weights.detection)),
            tape.scale(rest, E::from_f64(weights.restoration)),
        );
        let breakdown = JointLossBreakdown {
            detection: det,
            restoration: tape.scalar(rest).to_f64(),
            grand_total: tape.scalar(grand).to_f64(),
        };
        Ok((grand, breakdown))
    }
}
