//! Builds a small paired dataset of shape scenes in fog on disk, reopens
//! it, and prints what round-tripped.
//!
//! Usage: cargo run --example toy_dataset [out_dir]

use fogdet::datakit::{
    generate_toy_scene, make_paired_sample, write_voc_xml, DiskDataset, SceneConfig,
    TOY_CLASS_NAMES,
};
use fogdet::weathersim::{sample_beta, FogParams, TRAIN_BETA_RANGE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fogdet::Result<()> {
    let out = std::path::PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "example_output/toy_dataset".into()),
    );
    let classes: Vec<String> = TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let mut ds = DiskDataset::create(&out, &classes)?;

    let cfg = SceneConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..6 {
        let scene = generate_toy_scene(&mut rng, &cfg, &format!("scene_{i:03}"))?;
        let beta = sample_beta(TRAIN_BETA_RANGE, &mut rng)?;
        let sample = make_paired_sample(scene.image, scene.annotation, FogParams::new(0.5, beta)?)?;
        ds.add_sample(&sample)?;
    }
    ds.save_index()?;

    let reopened = DiskDataset::open(&out)?;
    println!(
        "dataset at {}: {} samples, classes {:?}",
        out.display(),
        reopened.ids.len(),
        reopened.classes
    );
    let first = reopened.load_sample(0)?;
    println!(
        "sample {} has {} box(es); fog beta {:.3}",
        first.annotation.image_id,
        first.annotation.boxes.len(),
        first.fog.beta
    );
    for b in &first.annotation.boxes {
        println!(
            "  {:<6} at ({:.0}, {:.0})..({:.0}, {:.0})",
            reopened.classes[b.class_id], b.bbox.x_min, b.bbox.y_min, b.bbox.x_max, b.bbox.y_max
        );
    }
    println!("\nVOC XML for that sample:\n{}", write_voc_xml(&first.annotation, &reopened.classes)?);
    Ok(())
}
