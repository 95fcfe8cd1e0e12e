//! Run configuration: a sectioned TOML file that fully determines a run,
//! with exhaustive validation (every unknown key and every out-of-range
//! value is reported, not just the first).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datakit::SceneConfig;
use crate::error::{Error, Result};
use crate::evalkit::ApInterpolation;
use crate::model::{LossWeights, ModelConfig, VariantFlags};
use crate::training::{EvalSettings, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub num_classes: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub restoration: bool,
    /// Deep-feature enhancement stage on the coarsest backbone level.
    pub enhancement: bool,
    /// Focal loss on objectness instead of plain cross-entropy.
    pub focal_loss: bool,
    /// Spatially adaptive context convolutions in the detection heads.
    pub context_conv: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            num_classes: m.num_classes,
            image_height: m.image_size.0,
            image_width: m.image_size.1,
            width_mult: m.width_mult,
            depth_mult: m.depth_mult,
            restoration: m.flags.restoration_on,
            enhancement: m.flags.dtfe_on,
            focal_loss: m.flags.focal_on,
            context_conv: m.flags.scconv_on,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub detection_weight: f64,
    pub restoration_weight: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            base_lr: t.base_lr,
            lr_floor: t.lr_floor,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            detection_weight: t.loss_weights.detection,
            restoration_weight: t.loss_weights.restoration,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FogSection {
    pub atmospheric_light: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Wider scattering range used for held-out test splits.
    pub test_beta_min: f64,
    pub test_beta_max: f64,
}

impl Default for FogSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        FogSection {
            atmospheric_light: t.atmospheric_light,
            beta_min: t.beta_range.0,
            beta_max: t.beta_range.1,
            test_beta_min: crate::weathersim::TEST_BETA_RANGE.0,
            test_beta_max: crate::weathersim::TEST_BETA_RANGE.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub iou_threshold: f64,
    /// `"all-point"` or `"eleven-point"`.
    pub interpolation: String,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalSettings::default();
        EvalSection {
            conf_threshold: e.conf_threshold as f64,
            nms_threshold: e.nms_threshold as f64,
            iou_threshold: e.iou_threshold as f64,
            interpolation: "all-point".to_string(),
            batch_size: e.batch_size,
        }
    }
}

/// Toy-dataset synthesis settings for the dataset command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub train_count: usize,
    pub test_count: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub max_overlap: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        DataSection {
            train_count: 500,
            test_count: 100,
            width: s.width,
            height: s.height,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
            min_size: s.min_size,
            max_size: s.max_size,
            max_overlap: s.max_overlap as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainSection,
    pub fog: FogSection,
    pub eval: EvalSection,
    pub data: DataSection,
}

const SECTION_KEYS: [(&str, &[&str]); 5] = [
    (
        "model",
        &[
            "num_classes",
            "image_height",
            "image_width",
            "width_mult",
            "depth_mult",
            "restoration",
            "enhancement",
            "focal_loss",
            "context_conv",
        ],
    ),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "base_lr",
            "lr_floor",
            "momentum",
            "weight_decay",
            "detection_weight",
            "restoration_weight",
            "seed",
            "checkpoint_every",
        ],
    ),
    (
        "fog",
        &[
            "atmospheric_light",
            "beta_min",
            "beta_max",
            "test_beta_min",
            "test_beta_max",
        ],
    ),
    (
        "eval",
        &[
            "conf_threshold",
            "nms_threshold",
            "iou_threshold",
            "interpolation",
            "batch_size",
        ],
    ),
    (
        "data",
        &[
            "train_count",
            "test_count",
            "width",
            "height",
            "min_objects",
            "max_objects",
            "min_size",
            "max_size",
            "max_overlap",
        ],
    ),
];

impl RunConfig {
    /// Parses and fully validates; the error lists every unknown key and
    /// every invalid value, one per line.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut problems = Vec::new();
        for (section, value) in &table {
            match SECTION_KEYS.iter().find(|(name, _)| name == section) {
                None => problems.push(format!("unknown section `{section}`")),
                Some((_, known)) => match value.as_table() {
                    None => problems.push(format!("`{section}` must be a section, not a value")),
                    Some(entries) => {
                        for key in entries.keys() {
                            if !known.contains(&key.as_str()) {
                                problems.push(format!("unknown key `{section}.{key}`"));
                            }
                        }
                    }
                },
            }
        }
        let cfg: RunConfig = match table.try_into() {
            Ok(cfg) => cfg,
            Err(e) => {
                problems.push(format!("value error: {e}"));
                RunConfig::default()
            }
        };
        cfg.collect_problems(&mut problems);
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(format!(
                "invalid config:\n  - {}",
                problems.join("\n  - ")
            )))
        }
    }

    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text)
    }

    /// The resolved snapshot embedded in run manifests.
    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn collect_problems(&self, problems: &mut Vec<String>) {
        fn note(problems: &mut Vec<String>, section: &str, result: Result<()>) {
            if let Err(e) = result {
                problems.push(format!("[{section}] {e}"));
            }
        }
        note(problems, "model", self.model_config().validate());
        note(
            problems,
            "train",
            self.train_config().and_then(|t| t.validate()),
        );
        note(problems, "eval", self.eval_settings().map(|_| ()));
        note(problems, "data", self.scene_config().validate());
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.model.num_classes,
            image_size: (self.model.image_height, self.model.image_width),
            width_mult: self.model.width_mult,
            depth_mult: self.model.depth_mult,
            flags: VariantFlags {
                restoration_on: self.model.restoration,
                dtfe_on: self.model.enhancement,
                focal_on: self.model.focal_loss,
                scconv_on: self.model.context_conv,
            },
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr,
            lr_floor: self.train.lr_floor,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            loss_weights: LossWeights {
                detection: self.train.detection_weight,
                restoration: self.train.restoration_weight,
            },
            seed: self.train.seed,
            model: self.model_config(),
            beta_range: (self.fog.beta_min, self.fog.beta_max),
            atmospheric_light: self.fog.atmospheric_light,
            checkpoint_every: self.train.checkpoint_every,
        })
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        let interpolation = match self.eval.interpolation.as_str() {
            "all-point" => ApInterpolation::AllPoint,
            "eleven-point" => ApInterpolation::ElevenPoint,
            other => {
                return Err(Error::Config(format!(
                    "eval.interpolation must be \"all-point\" or \"eleven-point\", got \"{other}\""
                )))
            }
        };
        for (name, v) in [
            ("conf_threshold", self.eval.conf_threshold),
            ("nms_threshold", self.eval.nms_threshold),
            ("iou_threshold", self.eval.iou_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("eval.{name} {v} outside [0, 1]")));
            }
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be >= 1".into()));
        }
        Ok(EvalSettings {
            conf_threshold: self.eval.conf_threshold as f32,
            nms_threshold: self.eval.nms_threshold as f32,
            iou_threshold: self.eval.iou_threshold as f32,
            interpolation,
            batch_size: self.eval.batch_size,
        })
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            width: self.data.width,
            height: self.data.height,
            min_objects: self.data.min_objects,
            max_objects: self.data.max_objects,
            min_size: self.data.min_size,
            max_size: self.data.max_size,
            max_overlap: self.data.max_overlap as f32,
            ..SceneConfig::default()
        }
    }
}
