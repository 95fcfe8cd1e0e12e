//! Shows the restoration branch learning to defog: overfits one batch,
//! then writes foggy input, restored output, and clean target side by
//! side with their PSNR against the target.
//!
//! Usage: cargo run --example restoration_preview [out_dir]

use fogdet::autograd::Tape;
use fogdet::datakit::{assemble_batch, generate_toy_scene, make_paired_sample, SceneConfig};
use fogdet::model::ModelConfig;
use fogdet::nn::Binding;
use fogdet::raster::ImageTensor;
use fogdet::training::{train_step, Sgd, TrainConfig, Trainer};
use fogdet::weathersim::FogParams;
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn psnr(a: &ImageTensor, b: &ImageTensor) -> f64 {
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    -10.0 * mse.log10()
}

fn main() -> fogdet::Result<()> {
    let out = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_output/restoration_preview".into()),
    );
    std::fs::create_dir_all(&out).map_err(|e| fogdet::Error::io(&out, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scene_cfg = SceneConfig {
        width: 64,
        height: 64,
        min_size: 14,
        max_size: 28,
        ..SceneConfig::default()
    };
    let scene = generate_toy_scene(&mut rng, &scene_cfg, "preview")?;
    let sample = make_paired_sample(scene.image, scene.annotation, FogParams::new(0.5, 0.12)?)?;

    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 1,
        base_lr: 0.02,
        model: ModelConfig {
            num_classes: 3,
            image_size: (64, 64),
            width_mult: 0.125,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let samples = vec![sample];
    let batch = assemble_batch(&samples, &[0], 64, 64)?;
    let mut trainer = Trainer::new(cfg)?;
    let mut opt = Sgd::new(0.9, 0.0);
    for step in 0..60 {
        let br = train_step(
            &trainer.model,
            &mut trainer.store,
            &mut opt,
            &batch,
            trainer.cfg.loss_weights,
            0.01,
            step,
        )?;
        if step % 15 == 0 {
            println!(
                "step {step:>2}: restoration loss {:.4}, total {:.4}",
                br.restoration, br.grand_total
            );
        }
    }

    let tape = Tape::<f32>::new();
    let bx = Binding::frozen(&tape, &trainer.store);
    let x = tape.constant(batch.foggy.clone());
    let outputs = trainer.model.forward(&bx, x)?;
    let restored = outputs.restored.expect("restoration branch is enabled");
    let value = tape.value(restored);
    let hw = value.shape()[2];
    let restored_img = ImageTensor::new_tanh(
        Array3::from_shape_fn((3, hw, hw), |(c, y, x)| value[[0, c, y, x]]),
    )
    .tanh_to_unit();

    let foggy_img = ImageTensor::new_unit(Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
        batch.foggy[[0, c, y, x]]
    }));
    let clean_img = ImageTensor::new_unit(Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
        batch.clean[[0, c, y, x]]
    }));
    println!("PSNR vs clean: foggy {:.2} dB, restored {:.2} dB", psnr(&foggy_img, &clean_img), psnr(&restored_img, &clean_img));

    foggy_img.save(out.join("foggy.png"))?;
    restored_img.save(out.join("restored.png"))?;
    clean_img.save(out.join("clean.png"))?;
    println!("images in {}", out.display());
    Ok(())
}
