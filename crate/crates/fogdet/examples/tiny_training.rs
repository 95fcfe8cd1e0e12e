//! Trains the joint model end to end on a handful of generated scenes,
//! then evaluates it and round-trips the checkpoint.
//!
//! Usage: cargo run --example tiny_training [out_dir]

use fogdet::datakit::{generate_toy_scene, make_paired_sample, PairedSample, SceneConfig};
use fogdet::model::ModelConfig;
use fogdet::training::{TrainConfig, Trainer};
use fogdet::weathersim::{sample_beta, FogParams, TRAIN_BETA_RANGE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scenes(n: usize, seed: u64) -> fogdet::Result<Vec<PairedSample>> {
    let cfg = SceneConfig {
        width: 64,
        height: 64,
        min_size: 12,
        max_size: 28,
        ..SceneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let scene = generate_toy_scene(&mut rng, &cfg, &format!("s{i}"))?;
            let beta = sample_beta(TRAIN_BETA_RANGE, &mut rng)?;
            make_paired_sample(scene.image, scene.annotation, FogParams::new(0.5, beta)?)
        })
        .collect()
}

fn main() -> fogdet::Result<()> {
    let out = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_output/tiny_training".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| fogdet::Error::io(&out, e))?;

    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 4,
        base_lr: 0.01,
        model: ModelConfig {
            num_classes: 3,
            image_size: (64, 64),
            width_mult: 0.125,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let train = scenes(8, 100)?;
    let test = scenes(4, 200)?;

    let mut trainer = Trainer::new(cfg)?;
    let mut log = std::io::stdout();
    let records = trainer.train(&train, Some(&out), &mut log)?;
    let first = &records[0];
    let last = records.last().unwrap();
    println!(
        "total loss went {:.4} -> {:.4} over {} steps",
        first.grand_total,
        last.grand_total,
        records.len()
    );

    let eval = trainer.evaluate(&test)?;
    println!("held-out mAP@0.5 = {:.4}", eval.map_score);

    let loaded = fogdet::checkpoint::load::<f32>(&out.join("final.ckpt"))?;
    println!(
        "checkpoint holds {} parameter tensor(s), {} scalar(s) total",
        loaded.len(),
        loaded.element_count()
    );
    Ok(())
}
