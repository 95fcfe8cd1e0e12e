//! Runs the detector on a foggy scene and renders the predictions next
//! to the ground truth, writing both the overlay image and the plain-text
//! detection records.
//!
//! Usage: cargo run --example detect_and_render [out_dir]

use fogdet::cli::overlay::overlay_detections;
use fogdet::datakit::{
    assemble_batch, generate_toy_scene, make_paired_sample, SceneConfig, TOY_CLASS_NAMES,
};
use fogdet::detection::write_detections;
use fogdet::model::ModelConfig;
use fogdet::training::{detect_batch, EvalSettings, TrainConfig, Trainer};
use fogdet::weathersim::FogParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fogdet::Result<()> {
    let out = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_output/detect_and_render".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| fogdet::Error::io(&out, e))?;

    let scene_cfg = SceneConfig {
        width: 64,
        height: 64,
        min_size: 14,
        max_size: 28,
        ..SceneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut samples = Vec::new();
    for i in 0..6 {
        let scene = generate_toy_scene(&mut rng, &scene_cfg, &format!("s{i}"))?;
        samples.push(make_paired_sample(
            scene.image,
            scene.annotation,
            FogParams::new(0.5, 0.09)?,
        )?);
    }

    let cfg = TrainConfig {
        epochs: 60,
        batch_size: 6,
        base_lr: 0.02,
        model: ModelConfig {
            num_classes: 3,
            image_size: (64, 64),
            width_mult: 0.125,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg)?;
    let mut sink = std::io::sink();
    trainer.train(&samples, None, &mut sink)?;

    let batch = assemble_batch(&samples, &[0], 64, 64)?;
    let settings = EvalSettings {
        conf_threshold: 0.05,
        ..EvalSettings::default()
    };
    let dets = detect_batch(&trainer.model, &trainer.store, &batch, settings)?.remove(0);
    println!("{} detection(s) on sample 0 (after overfitting on 6 scenes):", dets.len());
    let names: Vec<String> = TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    for d in &dets {
        println!(
            "  {:<6} score {:.2} at ({:.0}, {:.0})..({:.0}, {:.0})",
            names[d.class_id], d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max
        );
    }
    println!("ground truth: {} box(es)", samples[0].annotation.boxes.len());

    let overlay = overlay_detections(&samples[0].foggy, &dets, &names)?;
    let img_path = out.join("detections.png");
    overlay.save(&img_path)?;
    let txt_path = out.join("detections.txt");
    let mut file = std::fs::File::create(&txt_path).map_err(|e| fogdet::Error::io(&txt_path, e))?;
    write_detections(&mut file, "s0", &dets).map_err(|e| fogdet::Error::io(&txt_path, e))?;
    println!("overlay at {}, records at {}", img_path.display(), txt_path.display());
    Ok(())
}
