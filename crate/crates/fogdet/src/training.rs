//! Joint optimization: SGD with momentum and cosine-annealed learning
//! rate over the weighted detection + restoration total, plus the
//! ablation-variant matrix and the loss-weight sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::autograd::{Elem, Tape};
use crate::checkpoint;
use crate::datakit::{assemble_batch, shuffled_batches, Batch, PairedSample};
use crate::detection::{decode_predictions, nms, Detection};
use crate::error::{Error, Result};
use crate::evalkit::{ApInterpolation, EvalAccumulator, EvalResult};
use crate::model::{JointLossBreakdown, JointModel, LossWeights, ModelConfig, VariantFlags};
use crate::nn::{Binding, ParamStore};
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Full training-run settings.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Learning rate the cosine schedule decays to.
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    /// Scattering-coefficient sampling range for synthesized fog.
    pub beta_range: (f64, f64),
    pub atmospheric_light: f64,
    /// Steps between checkpoint files in [`Trainer::train`]; 0 disables
    /// periodic checkpoints (the final one is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            base_lr: 0.01,
            lr_floor: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss_weights: LossWeights::default(),
            seed: 0,
            model: ModelConfig::default(),
            beta_range: crate::weathersim::TRAIN_BETA_RANGE,
            atmospheric_light: 0.5,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Checks every field and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch size must be >= 1".to_string());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            problems.push(format!(
                "base learning rate {} must be positive",
                self.base_lr
            ));
        } else if !(0.0..=self.base_lr).contains(&self.lr_floor) {
            problems.push(format!(
                "lr floor {} must lie in [0, base_lr]",
                self.lr_floor
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            problems.push(format!(
                "weight decay {} must be nonnegative",
                self.weight_decay
            ));
        }
        if let Err(e) = self.loss_weights.validate() {
            problems.push(e.to_string());
        } else if self.loss_weights.detection == 0.0 && self.loss_weights.restoration == 0.0 {
            problems.push("loss weights must not both be zero".to_string());
        }
        if let Err(e) = self.model.validate() {
            problems.push(e.to_string());
        }
        let (lo, hi) = self.beta_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            problems.push(format!("beta range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.atmospheric_light) {
            problems.push(format!(
                "atmospheric light {} outside [0, 1]",
                self.atmospheric_light
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Reporting-side total: `w_det·detection_total + w_rest·restoration`.
/// The differentiable twin lives in [`JointModel::loss`].
pub fn total_loss(detection_total: f64, restoration: f64, weights: LossWeights) -> f64 {
    weights.detection * detection_total + weights.restoration * restoration
}

/// Cosine annealing from `base_lr` at step 0 down to `floor` at
/// `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f64, floor: f64) -> f64 {
    assert!(step <= total_steps, "step {step} > total {total_steps}");
    if total_steps == 0 {
        return base_lr;
    }
    let progress = step as f64 / total_steps as f64;
    floor + (base_lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0
}

/// SGD with classic momentum and decoupled-from-nothing weight decay:
/// `g' = g + wd·w`, `v = μ·v + g'`, `w -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<E: Elem> {
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<E>>,
}

impl<E: Elem> Sgd<E> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without an entry in `grads` are
    /// left untouched (they were not part of the graph this step).
    pub fn step(
        &mut self,
        store: &mut ParamStore<E>,
        grads: &BTreeMap<String, ArrayD<E>>,
        lr: f64,
    ) {
        let mu = E::from_f64(self.momentum);
        let wd = E::from_f64(self.weight_decay);
        let lr = E::from_f64(lr);
        for (name, grad) in grads {
            let w = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let mut g = grad.clone();
            if self.weight_decay != 0.0 {
                g.zip_mut_with(w, |gi, wi| *gi += wd * *wi);
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            v.zip_mut_with(&g, |vi, gi| *vi = mu * *vi + *gi);
            w.zip_mut_with(v, |wi, vi| *wi -= lr * *vi);
        }
    }
}

fn to_elem<E: Elem>(a: &ArrayD<f32>) -> ArrayD<E> {
    a.mapv(|v| E::from_f64(v as f64))
}

/// Forward + loss + backward on one batch, without an optimizer update.
/// Returns per-parameter gradients and the loss breakdown.
pub fn compute_grads<E: Elem>(
    model: &JointModel,
    store: &ParamStore<E>,
    batch: &Batch,
    weights: LossWeights,
) -> Result<(BTreeMap<String, ArrayD<E>>, JointLossBreakdown)> {
    let tape = Tape::<E>::new();
    let bx = Binding::new(&tape, store);
    let x = tape.constant(to_elem(&batch.foggy));
    let outputs = model.forward(&bx, x)?;
    let clean = model.restoration.as_ref().map(|_| to_elem(&batch.clean));
    let (grand, breakdown) = model.loss(&tape, &outputs, &batch.gts, clean.as_ref(), weights)?;
    let mut grads_by_node = tape.backward(grand);
    let mut grads = BTreeMap::new();
    for (name, tx) in bx.bound() {
        if let Some(g) = grads_by_node.take(tx) {
            grads.insert(name, g);
        }
    }
    Ok((grads, breakdown))
}

/// One SGD step on one batch. A non-finite grand total aborts with the
/// offending batch ids before any parameter is touched.
pub fn train_step<E: Elem>(
    model: &JointModel,
    store: &mut ParamStore<E>,
    opt: &mut Sgd<E>,
    batch: &Batch,
    weights: LossWeights,
    lr: f64,
    step: usize,
) -> Result<JointLossBreakdown> {
    let (grads, breakdown) = compute_grads(model, store, batch, weights)?;
    if !breakdown.grand_total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            batch_id: batch.ids.join(","),
            dump_path: "(not written)".into(),
        });
    }
    opt.step(store, &grads, lr);
    Ok(breakdown)
}

/// Owns the model, parameters, and optimizer state for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: JointModel,
    pub store: ParamStore<f32>,
    pub opt: Sgd<f32>,
    pub step: usize,
}

/// One metrics-log record, also written as a line of the run log.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub iou: f64,
    pub cls: f64,
    pub obj: f64,
    pub detection_total: f64,
    pub restoration: f64,
    pub grand_total: f64,
    pub num_pos: usize,
}

impl StepRecord {
    fn new(step: usize, lr: f64, b: &JointLossBreakdown) -> Self {
        StepRecord {
            step,
            lr,
            iou: b.detection.iou,
            cls: b.detection.cls,
            obj: b.detection.obj,
            detection_total: b.detection.total,
            restoration: b.restoration,
            grand_total: b.grand_total,
            num_pos: b.detection.num_pos,
        }
    }

    pub fn log_line(&self) -> String {
        format!(
            "step {} lr {:.6} iou {:.6} cls {:.6} obj {:.6} det {:.6} rest {:.6} total {:.6} pos {}",
            self.step,
            self.lr,
            self.iou,
            self.cls,
            self.obj,
            self.detection_total,
            self.restoration,
            self.grand_total,
            self.num_pos
        )
    }
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::<f32>::new();
        let model = JointModel::new(&mut store, cfg.seed, cfg.model.clone())?;
        let opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        Ok(Trainer {
            cfg,
            model,
            store,
            opt,
            step: 0,
        })
    }

    /// Full run over `samples`: shuffled batches per epoch, cosine lr,
    /// metrics to `log`, optional periodic checkpoints under `out_dir`.
    /// Returns every step record.
    pub fn train(
        &mut self,
        samples: &[PairedSample],
        out_dir: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<Vec<StepRecord>> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let (h, w) = self.cfg.model.image_size;
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(crate::nn::seed_for(self.cfg.seed, "shuffle"));
        let batches_per_epoch = samples.len().div_ceil(self.cfg.batch_size);
        let total_steps = self.cfg.epochs * batches_per_epoch;
        let mut records = Vec::new();
        for _epoch in 0..self.cfg.epochs {
            let plan = shuffled_batches(samples.len(), self.cfg.batch_size, &mut shuffle_rng)?;
            for indices in plan {
                let batch = assemble_batch(samples, &indices, h, w)?;
                let lr = lr_schedule(self.step, total_steps, self.cfg.base_lr, self.cfg.lr_floor);
                let breakdown = self.do_step(&batch, lr, out_dir)?;
                let record = StepRecord::new(self.step, lr, &breakdown);
                writeln!(log, "{}", record.log_line())
                    .map_err(|e| Error::io("metrics log", e))?;
                records.push(record);
                self.step += 1;
                if let Some(dir) = out_dir {
                    if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0
                    {
                        self.save_checkpoint(&dir.join(format!("step_{:06}.ckpt", self.step)))?;
                    }
                }
            }
        }
        if let Some(dir) = out_dir {
            self.save_checkpoint(&dir.join("final.ckpt"))?;
        }
        Ok(records)
    }

    fn do_step(
        &mut self,
        batch: &Batch,
        lr: f64,
        out_dir: Option<&Path>,
    ) -> Result<JointLossBreakdown> {
        match train_step(
            &self.model,
            &mut self.store,
            &mut self.opt,
            batch,
            self.cfg.loss_weights,
            lr,
            self.step,
        ) {
            Err(Error::NonFiniteLoss { step, batch_id, .. }) => {
                let dump_path = self.write_nonfinite_dump(out_dir, step, &batch_id)?;
                Err(Error::NonFiniteLoss {
                    step,
                    batch_id,
                    dump_path,
                })
            }
            other => other,
        }
    }

    fn write_nonfinite_dump(
        &self,
        out_dir: Option<&Path>,
        step: usize,
        batch_id: &str,
    ) -> Result<String> {
        let Some(dir) = out_dir else {
            return Ok("(no output directory configured)".into());
        };
        let path = dir.join(format!("nonfinite_step_{step}.txt"));
        let body = format!(
            "non-finite loss\nstep: {step}\nbatch ids: {batch_id}\nseed: {}\n",
            self.cfg.seed
        );
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path.display().to_string())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Evaluates the current parameters on `samples` and returns mAP@0.5.
    pub fn evaluate(&self, samples: &[PairedSample]) -> Result<EvalResult> {
        evaluate_detector(
            &self.model,
            &self.store,
            samples,
            EvalSettings::default(),
        )
    }
}

/// Inference-side thresholds.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub conf_threshold: f32,
    pub nms_threshold: f32,
    pub iou_threshold: f32,
    pub interpolation: ApInterpolation,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            conf_threshold: 0.01,
            nms_threshold: 0.45,
            iou_threshold: 0.5,
            interpolation: ApInterpolation::AllPoint,
            batch_size: 8,
        }
    }
}

/// Runs detection (no restoration decoding) over `samples` and scores it
/// against their annotations.
pub fn evaluate_detector(
    model: &JointModel,
    store: &ParamStore<f32>,
    samples: &[PairedSample],
    settings: EvalSettings,
) -> Result<EvalResult> {
    let (h, w) = model.cfg.image_size;
    let mut acc = EvalAccumulator::new(settings.iou_threshold);
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(settings.batch_size.max(1)) {
        let batch = assemble_batch(samples, chunk, h, w)?;
        let dets = detect_batch(model, store, &batch, settings)?;
        for (img_dets, gts) in dets.iter().zip(&batch.gts) {
            acc.add_image(img_dets, gts);
        }
    }
    Ok(acc.finish(settings.interpolation))
}

/// Forward + decode + NMS for one assembled batch, detections per image.
pub fn detect_batch(
    model: &JointModel,
    store: &ParamStore<f32>,
    batch: &Batch,
    settings: EvalSettings,
) -> Result<Vec<Vec<Detection>>> {
    let tape = Tape::<f32>::new();
    let bx = Binding::frozen(&tape, store);
    let x = tape.constant(batch.foggy.clone());
    let outputs = model.forward(&bx, x)?;
    let levels: Vec<(ArrayD<f32>, ArrayD<f32>, ArrayD<f32>, usize)> = outputs
        .heads
        .iter()
        .map(|hd| {
            (
                tape.value(hd.cls),
                tape.value(hd.reg),
                tape.value(hd.obj),
                hd.stride,
            )
        })
        .collect();
    Ok(decode_predictions(&levels, settings.conf_threshold)
        .into_iter()
        .map(|dets| nms(&dets, settings.nms_threshold))
        .collect())
}

/// Named ablation variants and their component flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Base,
        Variant::V1,
        Variant::V2,
        Variant::V3,
        Variant::V4,
        Variant::V5,
        Variant::V6,
        Variant::V7,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
            Variant::V5 => "v5",
            Variant::V6 => "v6",
            Variant::V7 => "v7",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == name.to_ascii_lowercase())
    }

    /// Base adds nothing; V1..V3 add restoration, enhancement, and focal
    /// incrementally; V4 enables everything; V5..V7 remove one component
    /// each from V4.
    pub fn flags(self) -> VariantFlags {
        let all = VariantFlags::all_on();
        match self {
            Variant::Base => VariantFlags::base(),
            Variant::V1 => VariantFlags {
                restoration_on: true,
                ..VariantFlags::base()
            },
            Variant::V2 => VariantFlags {
                restoration_on: true,
                dtfe_on: true,
                ..VariantFlags::base()
            },
            Variant::V3 => VariantFlags {
                restoration_on: true,
                dtfe_on: true,
                focal_on: true,
                ..VariantFlags::base()
            },
            Variant::V4 => all,
            Variant::V5 => VariantFlags {
                restoration_on: false,
                ..all
            },
            Variant::V6 => VariantFlags {
                dtfe_on: false,
                ..all
            },
            Variant::V7 => VariantFlags {
                focal_on: false,
                ..all
            },
        }
    }
}

/// One trained-and-scored ablation cell.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub map_score: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub final_loss: f64,
}

/// Trains every variant on the same data under each seed and evaluates
/// them on the held-out samples.
pub fn run_ablation(
    variants: &[Variant],
    base_cfg: &TrainConfig,
    train_samples: &[PairedSample],
    test_samples: &[PairedSample],
    seeds: &[u64],
    log: &mut dyn Write,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut cfg = base_cfg.clone();
            cfg.seed = seed;
            cfg.model.flags = variant.flags();
            writeln!(log, "=== variant {} seed {seed} ===", variant.name())
                .map_err(|e| Error::io("ablation log", e))?;
            let mut trainer = Trainer::new(cfg)?;
            let records = trainer.train(train_samples, None, log)?;
            let eval = trainer.evaluate(test_samples)?;
            writeln!(
                log,
                "variant {} seed {seed} map {:.4}",
                variant.name(),
                eval.map_score
            )
            .map_err(|e| Error::io("ablation log", e))?;
            rows.push(AblationRow {
                variant: variant.name().to_string(),
                seed,
                map_score: eval.map_score,
                per_class_ap: eval.per_class_ap,
                final_loss: records.last().map_or(f64::NAN, |r| r.grand_total),
            });
        }
    }
    Ok(rows)
}

/// The loss-weight grid exercised by the sweep command.
pub const WEIGHT_GRID: [(f64, f64); 7] = [
    (1.0, 1.0),
    (0.7, 0.3),
    (0.5, 0.5),
    (0.2, 0.6),
    (0.2, 0.8),
    (0.2, 1.0),
    (0.1, 1.2),
];

/// One trained-and-scored weight-sweep cell.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SweepRow {
    pub detection_weight: f64,
    pub restoration_weight: f64,
    pub map_score: f64,
}

/// Trains the configured model once per weight pair and evaluates each.
pub fn sweep_weights(
    grid: &[(f64, f64)],
    base_cfg: &TrainConfig,
    train_samples: &[PairedSample],
    test_samples: &[PairedSample],
    log: &mut dyn Write,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &(det_w, rest_w) in grid {
        let mut cfg = base_cfg.clone();
        cfg.loss_weights = LossWeights {
            detection: det_w,
            restoration: rest_w,
        };
        writeln!(log, "=== weights {det_w} & {rest_w} ===")
            .map_err(|e| Error::io("sweep log", e))?;
        let mut trainer = Trainer::new(cfg)?;
        trainer.train(train_samples, None, log)?;
        let eval = trainer.evaluate(test_samples)?;
        rows.push(SweepRow {
            detection_weight: det_w,
            restoration_weight: rest_w,
            map_score: eval.map_score,
        });
    }
    Ok(rows)
}
