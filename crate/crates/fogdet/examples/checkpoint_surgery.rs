//! Demonstrates that restoration weights are a training-time extra: strip
//! them from a trained checkpoint and detection still loads and produces
//! bitwise-identical results.
//!
//! Usage: cargo run --example checkpoint_surgery [out_dir]

use fogdet::checkpoint;
use fogdet::datakit::{assemble_batch, generate_toy_scene, make_paired_sample, SceneConfig};
use fogdet::model::{JointModel, ModelConfig};
use fogdet::nn::ParamStore;
use fogdet::training::{detect_batch, EvalSettings, TrainConfig, Trainer};
use fogdet::weathersim::FogParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fogdet::Result<()> {
    let out = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_output/checkpoint_surgery".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| fogdet::Error::io(&out, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let scene_cfg = SceneConfig {
        width: 64,
        height: 64,
        min_size: 12,
        max_size: 24,
        ..SceneConfig::default()
    };
    let mut samples = Vec::new();
    for i in 0..4 {
        let scene = generate_toy_scene(&mut rng, &scene_cfg, &format!("s{i}"))?;
        samples.push(make_paired_sample(
            scene.image,
            scene.annotation,
            FogParams::new(0.5, 0.1)?,
        )?);
    }

    let model_cfg = ModelConfig {
        num_classes: 3,
        image_size: (64, 64),
        width_mult: 0.125,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 25,
        batch_size: 4,
        model: model_cfg.clone(),
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    let mut sink = std::io::sink();
    trainer.train(&samples, None, &mut sink)?;

    let full_path = out.join("full.ckpt");
    trainer.save_checkpoint(&full_path)?;

    let mut stripped = ParamStore::<f32>::new();
    let mut dropped = 0usize;
    for (name, value) in trainer.store.iter() {
        if name.starts_with("restoration.") {
            dropped += 1;
        } else {
            stripped.insert(name.clone(), value.clone());
        }
    }
    let stripped_path = out.join("detection_only.ckpt");
    checkpoint::save(&stripped, &stripped_path)?;
    println!(
        "full checkpoint: {} tensors; stripped: {} (dropped {dropped} restoration tensors)",
        trainer.store.len(),
        stripped.len()
    );

    let mut store = ParamStore::<f32>::new();
    let model = JointModel::new(&mut store, 0, model_cfg)?;
    let report = checkpoint::load_into(&stripped_path, &mut store, &["restoration."])?;
    println!(
        "loaded {} tensors; {} restoration tensors left at initialization",
        report.loaded,
        report.missing.len()
    );

    let batch = assemble_batch(&samples, &[0, 1], 64, 64)?;
    let settings = EvalSettings::default();
    let from_full = detect_batch(&trainer.model, &trainer.store, &batch, settings)?;
    let from_stripped = detect_batch(&model, &store, &batch, settings)?;
    assert_eq!(from_full, from_stripped);
    println!(
        "detections from full and stripped checkpoints are identical ({} + {} boxes)",
        from_full[0].len(),
        from_full[1].len()
    );
    Ok(())
}
