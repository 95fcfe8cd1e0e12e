//! Image restoration decoder. Used only during training: it upsamples the
//! deepest feature map back to input resolution, fusing shallow skip maps
//! on the way, and is supervised against the clean image. Inference paths
//! never construct it.

use crate::autograd::{Elem, Tape, Tx};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ConvTranspose2d, GroupNorm, ParamStore};
use std::collections::BTreeMap;

/// Skip keys the decoder fuses, shallowest last.
pub const SKIP_KEYS: [&str; 3] = ["stride16", "stride8", "stride4"];

#[derive(Debug, Clone)]
pub struct RestorationConfig {
    /// Channel width of the stride-32 input map.
    pub c5_channels: usize,
    /// Channel width of each skip map, keyed like [`SKIP_KEYS`].
    pub skip_channels: BTreeMap<String, usize>,
    /// Nearest-neighbor factor of the final stage (stride 4 to stride 1).
    pub final_upsample: usize,
}

impl RestorationConfig {
    /// Widths after each transposed-conv stage: halve three times.
    fn stage_widths(&self) -> [usize; 3] {
        let c = self.c5_channels;
        [c / 2, c / 4, c / 8]
    }

    pub fn validate(&self) -> Result<()> {
        if self.c5_channels % 8 != 0 {
            return Err(Error::Config(format!(
                "restoration decoder needs an input width divisible by 8, got {}",
                self.c5_channels
            )));
        }
        for key in SKIP_KEYS {
            if !self.skip_channels.contains_key(key) {
                return Err(Error::Config(format!(
                    "restoration decoder needs skip \"{key}\""
                )));
            }
        }
        if self.final_upsample == 0 {
            return Err(Error::Config("final upsample factor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    deconv: ConvTranspose2d,
    skip_proj: Conv2d,
    norm: GroupNorm,
    skip_key: &'static str,
}

/// Decoder: three stride-2 transposed convolutions with additive
/// 1x1-projected skips, then a nearest upsample and an output conv with
/// `tanh` squashing to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct RestorationDecoder {
    pub cfg: RestorationConfig,
    stages: Vec<DecoderStage>,
    out_conv: Conv2d,
}

/// Parameter-name prefix of every decoder weight; inference checkpoints
/// may omit the whole group.
pub const PARAM_PREFIX: &str = "restoration";

impl RestorationDecoder {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        cfg: RestorationConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.stage_widths();
        let p = PARAM_PREFIX;
        let mut stages = Vec::new();
        let mut cin = cfg.c5_channels;
        for (i, (key, cout)) in SKIP_KEYS.iter().zip(widths).enumerate() {
            let skip_c = cfg.skip_channels[*key];
            stages.push(DecoderStage {
                deconv: ConvTranspose2d::new(
                    store,
                    seed,
                    format!("{p}.up{i}.deconv"),
                    cin,
                    cout,
                    4,
                    2,
                    1,
                    false,
                ),
                skip_proj: Conv2d::new(
                    store,
                    seed,
                    format!("{p}.up{i}.proj"),
                    skip_c,
                    cout,
                    1,
                    1,
                    false,
                ),
                norm: GroupNorm::new(store, seed, format!("{p}.up{i}.norm"), cout),
                skip_key: key,
            });
            cin = cout;
        }
        let out_conv = Conv2d::new(store, seed, format!("{p}.out"), cin, 3, 3, 1, true);
        Ok(RestorationDecoder {
            cfg,
            stages,
            out_conv,
        })
    }

    /// Decodes the stride-32 map back to a `[n, 3, h, w]` image in
    /// `[-1, 1]`, where `h, w` are 32x the input map dims.
    pub fn forward<E: Elem>(
        &self,
        bx: &Binding<'_, E>,
        c5: Tx,
        skips: &BTreeMap<String, Tx>,
    ) -> Result<Tx> {
        let t = bx.tape();
        let mut y = c5;
        for stage in &self.stages {
            let up = stage.deconv.forward(bx, y);
            let skip = *skips.get(stage.skip_key).ok_or_else(|| {
                Error::Config(format!(
                    "restoration decoder needs skip \"{}\"",
                    stage.skip_key
                ))
            })?;
            let proj = stage.skip_proj.forward(bx, skip);
            let fused = t.add(up, proj);
            let normed = stage.norm.forward(bx, fused);
            y = t.silu(normed);
        }
        let shape = t.shape(y);
        let f = self.cfg.final_upsample;
        let up = t.upsample_nearest_to(y, shape[2] * f, shape[3] * f);
        let rgb = self.out_conv.forward(bx, up);
        Ok(t.tanh(rgb))
    }
}

/// Mean squared error between a `[-1, 1]` prediction and a `[0, 1]` target
/// image mapped onto the same range. The gradient w.r.t. the prediction is
/// `2 * (pred - mapped_target) / N`.
pub fn restoration_loss<E: Elem>(tape: &Tape<E>, pred: Tx, target_unit: ndarray::ArrayD<E>) -> Tx {
    let mapped = target_unit.mapv(|v| E::from_f64(2.0) * v - E::one());
    let target = tape.constant(mapped);
    let diff = tape.sub(pred, target);
    let sq = tape.mul(diff, diff);
    tape.mean_all(sq)
}
