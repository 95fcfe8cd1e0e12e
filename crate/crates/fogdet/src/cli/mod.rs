//! Command-line pipeline: dataset synthesis, training, evaluation,
//! inference with box overlays, ablation, loss-weight sweep, and timing.

pub mod overlay;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::datakit::{
    generate_toy_scene, letterbox, make_paired_sample, parse_voc_annotation, unmap_box,
    Annotation, Batch, DiskDataset, TOY_CLASS_NAMES,
};
use crate::detection::write_detections;
use crate::error::{Error, Result};
use crate::model::JointModel;
use crate::nn::{seed_for, ParamStore};
use crate::raster::ImageTensor;
use crate::training::{
    detect_batch, evaluate_detector, run_ablation, sweep_weights, Trainer, Variant, WEIGHT_GRID,
};
use crate::weathersim::{sample_beta, FogParams};

/// Record written alongside every command's outputs; re-running the same
/// command with the embedded config and seed reproduces them.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    /// Resolved config snapshot in the config-file format.
    pub config: String,
    /// Paths written, relative to the manifest's directory.
    pub artifacts: Vec<String>,
    /// Content hash over the command's file inputs.
    pub inputs_hash: String,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("manifest serialization: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("manifest {}: {e}", path.display())))
    }
}

/// SHA-256 over the names and contents of `paths`, files in sorted order
/// and directories walked recursively.
pub fn hash_inputs(paths: &[PathBuf]) -> Result<String> {
    fn visit(hasher: &mut Sha256, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .map(|r| r.map(|d| d.path()))
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(path, e))?;
            entries.sort();
            for entry in entries {
                visit(hasher, &entry)?;
            }
        } else {
            let name = path.file_name().unwrap_or_default().to_string_lossy();
            hasher.update(name.as_bytes());
            hasher.update([0]);
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            hasher.update(&bytes);
        }
        Ok(())
    }
    let mut sorted: Vec<PathBuf> = paths.to_vec();
    sorted.sort();
    let mut hasher = Sha256::new();
    for p in &sorted {
        visit(&mut hasher, p)?;
    }
    Ok(format!("{:x}", hasher.finalize()))
}

#[derive(Debug, Parser)]
#[command(
    name = "fogdet",
    about = "Joint image restoration and object detection for foggy scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArg {
    /// Config file; omitted sections fall back to defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::from_path(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fog a directory of clean images into a paired dataset.
    SynthFog {
        /// Directory of clean images (optionally with matching VOC XML).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Constant scattering coefficient; overrides the sampled range.
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        beta_min: Option<f64>,
        #[arg(long)]
        beta_max: Option<f64>,
        #[arg(long)]
        atmospheric_light: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Class names for annotations, in index order.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Generate a synthetic train/test dataset of simple shapes in fog.
    MakeDataset {
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train the joint model on a paired dataset.
    Train {
        /// Dataset root (uses its `train/` split when present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Named component combination (base, v1..v7) overriding the
        /// config's model flags.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score a checkpoint on a dataset and report per-class AP and mAP.
    Eval {
        /// Dataset root (uses its `test/` split when present).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run detection on images and write box overlays plus a detection
    /// file.
    Infer {
        /// An image file or a directory of images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        conf_threshold: Option<f64>,
        /// Class names for labels, in index order.
        #[arg(long, value_delimiter = ',')]
        classes: Vec<String>,
    },
    /// Train and score every requested variant under each seed.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated variant names; defaults to all eight.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Train once per loss-weight pair and score each.
    SweepWeights {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Measure mean per-image forward latency and frames per second.
    Bench {
        #[command(flatten)]
        config: ConfigArg,
        /// Checkpoint to load; a fresh initialization is timed otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Parses argv and runs; exit 0 on success, 1 on validation errors, 2 on
/// runtime failures.
pub fn main_entry() -> std::process::ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(exit_code_for(&e))
        }
    }
}

pub fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::AnnotationParse { .. } => 1,
        _ => 2,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthFog {
            input,
            output,
            config,
            beta,
            beta_min,
            beta_max,
            atmospheric_light,
            seed,
            classes,
        } => {
            let mut cfg = config.load()?;
            if let Some(b) = beta_min {
                cfg.fog.beta_min = b;
            }
            if let Some(b) = beta_max {
                cfg.fog.beta_max = b;
            }
            if let Some(a) = atmospheric_light {
                cfg.fog.atmospheric_light = a;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cmd_synth_fog(&input, &output, &cfg, beta, &class_list(&classes))
        }
        Command::MakeDataset {
            output,
            config,
            seed,
            train_count,
            test_count,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(n) = train_count {
                cfg.data.train_count = n;
            }
            if let Some(n) = test_count {
                cfg.data.test_count = n;
            }
            cmd_make_dataset(&output, &cfg)
        }
        Command::Train {
            data,
            output,
            config,
            epochs,
            batch_size,
            lr,
            seed,
            variant,
        } => {
            let mut cfg = config.load()?;
            if let Some(n) = epochs {
                cfg.train.epochs = n;
            }
            if let Some(n) = batch_size {
                cfg.train.batch_size = n;
            }
            if let Some(x) = lr {
                cfg.train.base_lr = x;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(name) = &variant {
                apply_variant(&mut cfg, name)?;
            }
            cmd_train(&data, &output, &cfg)
        }
        Command::Eval {
            data,
            checkpoint,
            output,
            config,
        } => cmd_eval(&data, &checkpoint, &output, &config.load()?),
        Command::Infer {
            input,
            checkpoint,
            output,
            config,
            conf_threshold,
            classes,
        } => {
            let mut cfg = config.load()?;
            if let Some(c) = conf_threshold {
                cfg.eval.conf_threshold = c;
            }
            cmd_infer(&input, &checkpoint, &output, &cfg, &class_list(&classes))
        }
        Command::Ablate {
            data,
            output,
            config,
            variants,
            seeds,
        } => {
            let cfg = config.load()?;
            let variants = parse_variants(&variants)?;
            let seeds = if seeds.is_empty() {
                vec![0, 1, 2]
            } else {
                seeds
            };
            cmd_ablate(&data, &output, &cfg, &variants, &seeds)
        }
        Command::SweepWeights {
            data,
            output,
            config,
        } => cmd_sweep_weights(&data, &output, &config.load()?),
        Command::Bench {
            config,
            checkpoint,
            runs,
            warmup,
            output,
        } => cmd_bench(&config.load()?, checkpoint.as_deref(), runs, warmup, output.as_deref()),
    }
}

fn class_list(flag: &[String]) -> Vec<String> {
    if flag.is_empty() {
        TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        flag.to_vec()
    }
}

fn apply_variant(cfg: &mut RunConfig, name: &str) -> Result<()> {
    let variant = Variant::from_name(name).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "unknown variant {name:?}; expected one of base, v1..v7"
        ))
    })?;
    let flags = variant.flags();
    cfg.model.restoration = flags.restoration_on;
    cfg.model.enhancement = flags.dtfe_on;
    cfg.model.focal_loss = flags.focal_on;
    cfg.model.context_conv = flags.scconv_on;
    Ok(())
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.is_empty() {
        return Ok(Variant::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| {
            Variant::from_name(n).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown variant {n:?}; expected one of base, v1..v7"
                ))
            })
        })
        .collect()
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn sanitize_id(stem: &str) -> String {
    let mut id: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
        .collect();
    if id.is_empty() {
        id.push('_');
    }
    id
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|r| r.ok().map(|d| d.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no images (png/jpg) in {}",
            dir.display()
        )));
    }
    Ok(files)
}

pub fn cmd_synth_fog(
    input: &Path,
    output: &Path,
    cfg: &RunConfig,
    constant_beta: Option<f64>,
    classes: &[String],
) -> Result<()> {
    let files = list_images(input)?;
    let mut failures = Vec::new();
    let mut loaded = Vec::new();
    for path in &files {
        match load_clean_with_annotation(path, classes) {
            Ok(pair) => loaded.push(pair),
            Err(e) => failures.push(format!("{}: {e}", path.display())),
        }
    }
    if !failures.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} input file(s) unreadable:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    ensure_dir(output)?;
    let mut ds = DiskDataset::create(output, classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.train.seed, "synth-fog"));
    let range = (cfg.fog.beta_min, cfg.fog.beta_max);
    for (image, annotation) in loaded {
        let beta = match constant_beta {
            Some(b) => b,
            None => sample_beta(range, &mut rng)?,
        };
        let fog = FogParams::new(cfg.fog.atmospheric_light, beta)?;
        ds.add_sample(&make_paired_sample(image, annotation, fog)?)?;
    }
    ds.save_index()?;
    let n = ds.ids.len();
    RunManifest {
        command: "synth-fog".into(),
        seed: cfg.train.seed,
        config: cfg.to_toml_string(),
        artifacts: vec![
            "images".into(),
            "clean".into(),
            "annotations".into(),
            "index.tsv".into(),
            "fog.tsv".into(),
            "classes.txt".into(),
        ],
        inputs_hash: hash_inputs(&[input.to_path_buf()])?,
    }
    .write(output)?;
    println!("fogged {n} image(s) into {}", output.display());
    Ok(())
}

fn load_clean_with_annotation(path: &Path, classes: &[String]) -> Result<(ImageTensor, Annotation)> {
    let image = ImageTensor::load(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_default();
    let xml_path = path.with_extension("xml");
    let annotation = if xml_path.exists() {
        let xml = fs::read_to_string(&xml_path).map_err(|e| Error::io(&xml_path, e))?;
        let parsed = parse_voc_annotation(&xml_path.to_string_lossy(), &xml, classes)?;
        Annotation {
            image_id: sanitize_id(&stem),
            ..parsed.annotation
        }
    } else {
        Annotation {
            image_id: sanitize_id(&stem),
            width: image.width(),
            height: image.height(),
            boxes: Vec::new(),
        }
    };
    Ok((image, annotation))
}

pub fn cmd_make_dataset(output: &Path, cfg: &RunConfig) -> Result<()> {
    let scene_cfg = cfg.scene_config();
    scene_cfg.validate()?;
    let classes: Vec<String> = TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    ensure_dir(output)?;
    let splits = [
        (
            "train",
            cfg.data.train_count,
            (cfg.fog.beta_min, cfg.fog.beta_max),
        ),
        (
            "test",
            cfg.data.test_count,
            (cfg.fog.test_beta_min, cfg.fog.test_beta_max),
        ),
    ];
    for (split, count, beta_range) in splits {
        let mut ds = DiskDataset::create(output.join(split), &classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(
            cfg.train.seed,
            &format!("make-dataset.{split}"),
        ));
        for i in 0..count {
            let id = format!("{split}_{i:06}");
            let scene = generate_toy_scene(&mut rng, &scene_cfg, &id)?;
            let beta = sample_beta(beta_range, &mut rng)?;
            let fog = FogParams::new(cfg.fog.atmospheric_light, beta)?;
            ds.add_sample(&make_paired_sample(scene.image, scene.annotation, fog)?)?;
        }
        ds.save_index()?;
        println!("wrote {count} {split} sample(s) under {}", output.join(split).display());
    }
    RunManifest {
        command: "make-dataset".into(),
        seed: cfg.train.seed,
        config: cfg.to_toml_string(),
        artifacts: vec!["train".into(), "test".into()],
        inputs_hash: hash_inputs(&[])?,
    }
    .write(output)?;
    Ok(())
}

/// Opens `root/<split>` when that is a dataset directory, else `root`.
fn open_split(root: &Path, split: &str) -> Result<DiskDataset> {
    let sub = root.join(split);
    if sub.join("index.tsv").is_file() {
        DiskDataset::open(sub)
    } else if root.join("index.tsv").is_file() {
        DiskDataset::open(root)
    } else {
        Err(Error::InvalidArgument(format!(
            "{} is not a dataset directory (no index.tsv in it or its {split}/ split)",
            root.display()
        )))
    }
}

/// Aligns the configured class count with the dataset, announcing the
/// override when they differ.
fn adopt_classes(cfg: &mut RunConfig, ds: &DiskDataset) {
    if cfg.model.num_classes != ds.classes.len() {
        println!(
            "note: dataset defines {} classes; overriding model.num_classes (was {})",
            ds.classes.len(),
            cfg.model.num_classes
        );
        cfg.model.num_classes = ds.classes.len();
    }
}

pub fn cmd_train(data: &Path, output: &Path, cfg: &RunConfig) -> Result<()> {
    let ds = open_split(data, "train")?;
    let mut cfg = cfg.clone();
    adopt_classes(&mut cfg, &ds);
    let train_cfg = cfg.train_config()?;
    train_cfg.validate()?;
    let samples = ds.load_all()?;
    ensure_dir(output)?;
    let log_path = output.join("metrics.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut trainer = Trainer::new(train_cfg)?;
    let records = trainer.train(&samples, Some(output), &mut log)?;
    let last = records.last().expect("at least one step ran");
    RunManifest {
        command: "train".into(),
        seed: cfg.train.seed,
        config: cfg.to_toml_string(),
        artifacts: vec!["metrics.log".into(), "final.ckpt".into()],
        inputs_hash: hash_inputs(&[data.to_path_buf()])?,
    }
    .write(output)?;
    println!(
        "trained {} step(s); final total loss {:.6}; checkpoint at {}",
        records.len(),
        last.grand_total,
        output.join("final.ckpt").display()
    );
    Ok(())
}

/// Builds the configured model and fills it from `path`. Restoration
/// parameters are optional: a detection-only checkpoint loads cleanly.
fn load_model(
    cfg: &RunConfig,
    path: &Path,
) -> Result<(JointModel, ParamStore<f32>)> {
    let model_cfg = cfg.model_config();
    model_cfg.validate()?;
    let mut store = ParamStore::<f32>::new();
    let model = JointModel::new(&mut store, cfg.train.seed, model_cfg)?;
    let report = checkpoint::load_into(path, &mut store, &["restoration."])?;
    if !report.missing.is_empty() {
        println!(
            "note: checkpoint has no restoration parameters ({} left at init); detection is unaffected",
            report.missing.len()
        );
    }
    Ok((model, store))
}

pub fn cmd_eval(data: &Path, ckpt: &Path, output: &Path, cfg: &RunConfig) -> Result<()> {
    let ds = open_split(data, "test")?;
    let mut cfg = cfg.clone();
    adopt_classes(&mut cfg, &ds);
    let settings = cfg.eval_settings()?;
    let (model, store) = load_model(&cfg, ckpt)?;
    let samples = ds.load_all()?;
    let result = evaluate_detector(&model, &store, &samples, settings)?;
    ensure_dir(output)?;

    let json_path = output.join("report.json");
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let jsonl_path = output.join("report.jsonl");
    let mut jsonl = String::new();
    for (class_id, ap) in &result.per_class_ap {
        let name = ds.classes.get(*class_id).map(String::as_str).unwrap_or("?");
        jsonl.push_str(
            &serde_json::json!({
                "record": "class_ap", "class_id": class_id, "name": name, "ap": ap
            })
            .to_string(),
        );
        jsonl.push('\n');
    }
    jsonl.push_str(
        &serde_json::json!({
            "record": "summary",
            "map": result.map_score,
            "iou_threshold": settings.iou_threshold,
            "images": samples.len()
        })
        .to_string(),
    );
    jsonl.push('\n');
    fs::write(&jsonl_path, jsonl).map_err(|e| Error::io(&jsonl_path, e))?;

    println!("class               ap");
    for (class_id, ap) in &result.per_class_ap {
        let name = ds.classes.get(*class_id).map(String::as_str).unwrap_or("?");
        println!("{class_id} {name:<17} {ap:.4}");
    }
    println!("mAP@{:.2}            {:.4}", settings.iou_threshold, result.map_score);

    RunManifest {
        command: "eval".into(),
        seed: cfg.train.seed,
        config: cfg.to_toml_string(),
        artifacts: vec!["report.json".into(), "report.jsonl".into()],
        inputs_hash: hash_inputs(&[data.to_path_buf(), ckpt.to_path_buf()])?,
    }
    .write(output)?;
    Ok(())
}

pub fn cmd_infer(
    input: &Path,
    ckpt: &Path,
    output: &Path,
    cfg: &RunConfig,
    classes: &[String],
) -> Result<()> {
    let files = if input.is_dir() {
        list_images(input)?
    } else if input.is_file() {
        vec![input.to_path_buf()]
    } else {
        return Err(Error::InvalidArgument(format!(
            "input {} is neither a file nor a directory",
            input.display()
        )));
    };
    let mut cfg = cfg.clone();
    cfg.model.num_classes = classes.len();
    let settings = cfg.eval_settings()?;
    let (model, store) = load_model(&cfg, ckpt)?;
    let (th, tw) = model.cfg.image_size;
    ensure_dir(output)?;

    let det_path = output.join("detections.txt");
    let mut det_file = fs::File::create(&det_path).map_err(|e| Error::io(&det_path, e))?;
    let mut artifacts = vec!["detections.txt".to_string()];
    let mut total = 0usize;
    for path in &files {
        let image = ImageTensor::load(path)?;
        let id = sanitize_id(
            &path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_default(),
        );
        let (canvas, mapping) = letterbox(&image, th, tw)?;
        let batch = Batch {
            ids: vec![id.clone()],
            foggy: canvas.data.clone().insert_axis(ndarray::Axis(0)).into_dyn(),
            clean: canvas.data.clone().insert_axis(ndarray::Axis(0)).into_dyn(),
            gts: vec![Vec::new()],
            fog: vec![FogParams::new(0.5, 0.0)?],
        };
        let mut dets = detect_batch(&model, &store, &batch, settings)?.remove(0);
        for d in &mut dets {
            d.bbox = clamp_bbox(&unmap_box(&d.bbox, &mapping), image.width(), image.height());
        }
        write_detections(&mut det_file, &id, &dets).map_err(|e| Error::io(&det_path, e))?;
        let overlay = overlay::overlay_detections(&image, &dets, classes)?;
        let img_name = format!("{id}_boxes.png");
        let img_path = output.join(&img_name);
        overlay.save(&img_path)?;
        artifacts.push(img_name);
        total += dets.len();
    }
    println!(
        "detected {total} object(s) across {} image(s); overlays in {}",
        files.len(),
        output.display()
    );
    RunManifest {
        command: "infer".into(),
        seed: cfg.train.seed,
        config: cfg.to_toml_string(),
        artifacts,
        inputs_hash: hash_inputs(&[input.to_path_buf(), ckpt.to_path_buf()])?,
    }
    .write(output)?;
    Ok(())
}

fn clamp_bbox(b: &crate::detection::BBox, w: usize, h: usize) -> crate::detection::BBox {
    crate::detection::BBox {
        x_min: b.x_min.clamp(0.0, w as f32),
        y_min: b.y_min.clamp(0.0, h as f32),
        x_max: b.x_max.clamp(0.0, w as f32),
        y_max: b.y_max.clamp(0.0, h as f32),
    }
}

pub fn cmd_ablate(
    data: &Path,
    output: &Path,
    cfg: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<()> {
    let train_ds = open_split(data, "train")?;
    let test_ds = open_split(data, "test")?;
    let mut cfg = cfg.clone();
    adopt_classes(&mut cfg, &train_ds);
    let base_cfg = cfg.train_config()?;
    base_cfg.validate()?;
    let train_samples = train_ds.load_all()?;
    let test_samples = test_ds.load_all()?;
    ensure_dir(output)?;
    let log_path = output.join("ablation.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let rows = run_ablation(
        variants,
        &base_cfg,
        &train_samples,
        &test_samples,
        seeds,
        &mut log,
    )?;

    write_report(output, "report", &rows)?;
    let mut table = String::from(
        "variant  restoration  enhancement  focal  context  mean_map  per_seed\n",
    );
    for variant in variants {
        let f = variant.flags();
        let scores: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == variant.name())
            .map(|r| r.map_score)
            .collect();
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        let mark = |b: bool| if b { "yes" } else { "-" };
        table.push_str(&format!(
            "{:<8} {:<12} {:<12} {:<6} {:<8} {:<9.4} {}\n",
            variant.name(),
            mark(f.restoration_on),
            mark(f.dtfe_on),
            mark(f.focal_on),
            mark(f.scconv_on),
            mean,
            scores
                .iter()
                .map(|s| format!("{s:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    let table_path = output.join("table.txt");
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");

    RunManifest {
        command: "ablate".into(),
        seed: cfg.train.seed,
        config: cfg.to_toml_string(),
        artifacts: vec![
            "report.json".into(),
            "report.jsonl".into(),
            "table.txt".into(),
            "ablation.log".into(),
        ],
        inputs_hash: hash_inputs(&[data.to_path_buf()])?,
    }
    .write(output)?;
    Ok(())
}

pub fn cmd_sweep_weights(data: &Path, output: &Path, cfg: &RunConfig) -> Result<()> {
    let train_ds = open_split(data, "train")?;
    let test_ds = open_split(data, "test")?;
    let mut cfg = cfg.clone();
    adopt_classes(&mut cfg, &train_ds);
    let base_cfg = cfg.train_config()?;
    base_cfg.validate()?;
    let train_samples = train_ds.load_all()?;
    let test_samples = test_ds.load_all()?;
    ensure_dir(output)?;
    let log_path = output.join("sweep.log");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let rows = sweep_weights(
        &WEIGHT_GRID,
        &base_cfg,
        &train_samples,
        &test_samples,
        &mut log,
    )?;
    write_report(output, "report", &rows)?;
    let mut table = String::from("detection_weight  restoration_weight  map\n");
    for row in &rows {
        table.push_str(&format!(
            "{:<17} {:<19} {:.4}\n",
            row.detection_weight, row.restoration_weight, row.map_score
        ));
    }
    let table_path = output.join("table.txt");
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");
    RunManifest {
        command: "sweep-weights".into(),
        seed: cfg.train.seed,
        config: cfg.to_toml_string(),
        artifacts: vec![
            "report.json".into(),
            "report.jsonl".into(),
            "table.txt".into(),
            "sweep.log".into(),
        ],
        inputs_hash: hash_inputs(&[data.to_path_buf()])?,
    }
    .write(output)?;
    Ok(())
}

fn write_report<T: serde::Serialize>(dir: &Path, stem: &str, rows: &[T]) -> Result<()> {
    let json_path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))?;
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let jsonl_path = dir.join(format!("{stem}.jsonl"));
    let mut jsonl = String::new();
    for row in rows {
        jsonl.push_str(
            &serde_json::to_string(row)
                .map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))?,
        );
        jsonl.push('\n');
    }
    fs::write(&jsonl_path, jsonl).map_err(|e| Error::io(&jsonl_path, e))
}

/// Latency summary; `fps` is the reciprocal of the mean latency.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BenchReport {
    pub runs: usize,
    pub warmup: usize,
    pub image_size: (usize, usize),
    pub latencies_ms: Vec<f64>,
    pub mean_latency_ms: f64,
    pub fps: f64,
}

pub fn cmd_bench(
    cfg: &RunConfig,
    ckpt: Option<&Path>,
    runs: usize,
    warmup: usize,
    output: Option<&Path>,
) -> Result<()> {
    if runs == 0 {
        return Err(Error::InvalidArgument("need at least one timed run".into()));
    }
    let (model, store) = match ckpt {
        Some(path) => load_model(cfg, path)?,
        None => {
            let model_cfg = cfg.model_config();
            model_cfg.validate()?;
            let mut store = ParamStore::<f32>::new();
            let model = JointModel::new(&mut store, cfg.train.seed, model_cfg)?;
            (model, store)
        }
    };
    let (h, w) = model.cfg.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(cfg.train.seed, "bench"));
    let foggy = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[1, 3, h, w]), |_| {
        rand::Rng::gen_range(&mut rng, 0.0..1.0)
    });
    let batch = Batch {
        ids: vec!["bench".into()],
        foggy: foggy.clone(),
        clean: foggy,
        gts: vec![Vec::new()],
        fog: vec![FogParams::new(0.5, 0.0)?],
    };
    let settings = cfg.eval_settings()?;
    for _ in 0..warmup {
        detect_batch(&model, &store, &batch, settings)?;
    }
    let mut latencies_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        detect_batch(&model, &store, &batch, settings)?;
        latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_latency_ms = latencies_ms.iter().sum::<f64>() / runs as f64;
    let report = BenchReport {
        runs,
        warmup,
        image_size: (h, w),
        latencies_ms,
        mean_latency_ms,
        fps: 1e3 / mean_latency_ms,
    };
    println!(
        "{}x{w}: mean latency {:.2} ms over {runs} run(s), {:.2} FPS",
        h, report.mean_latency_ms, report.fps
    );
    if let Some(dir) = output {
        ensure_dir(dir)?;
        let path = dir.join("bench.json");
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::InvalidArgument(format!("report serialization: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let mut jsonl = String::new();
        for (i, ms) in report.latencies_ms.iter().enumerate() {
            jsonl.push_str(&serde_json::json!({"record": "run", "index": i, "latency_ms": ms}).to_string());
            jsonl.push('\n');
        }
        jsonl.push_str(
            &serde_json::json!({
                "record": "summary", "mean_latency_ms": report.mean_latency_ms, "fps": report.fps
            })
            .to_string(),
        );
        jsonl.push('\n');
        let jsonl_path = dir.join("bench.jsonl");
        fs::write(&jsonl_path, jsonl).map_err(|e| Error::io(&jsonl_path, e))?;
        RunManifest {
            command: "bench".into(),
            seed: cfg.train.seed,
            config: cfg.to_toml_string(),
            artifacts: vec!["bench.json".into(), "bench.jsonl".into()],
            inputs_hash: match ckpt {
                Some(p) => hash_inputs(&[p.to_path_buf()])?,
                None => hash_inputs(&[])?,
            },
        }
        .write(dir)?;
    }
    Ok(())
}
