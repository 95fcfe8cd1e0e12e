//! Walks through the detection-quality metric by hand: greedy matching,
//! a per-class precision-recall curve, and the two AP integration rules.
//!
//! Usage: cargo run --example map_evaluation

use fogdet::detection::{BBox, Detection, GtBox};
use fogdet::evalkit::{average_precision, match_detections, ApInterpolation, EvalAccumulator};

fn b(x0: f32, y0: f32, x1: f32, y1: f32) -> BBox {
    BBox {
        x_min: x0,
        y_min: y0,
        x_max: x1,
        y_max: y1,
    }
}

fn main() {
    let gts = vec![
        GtBox {
            class_id: 0,
            bbox: b(10.0, 10.0, 50.0, 50.0),
        },
        GtBox {
            class_id: 0,
            bbox: b(60.0, 60.0, 90.0, 90.0),
        },
    ];
    let dets = vec![
        Detection {
            class_id: 0,
            score: 0.9,
            bbox: b(12.0, 11.0, 49.0, 52.0),
        },
        Detection {
            class_id: 0,
            score: 0.8,
            bbox: b(30.0, 30.0, 70.0, 70.0),
        },
        Detection {
            class_id: 0,
            score: 0.7,
            bbox: b(61.0, 59.0, 91.0, 88.0),
        },
    ];

    let flags = match_detections(&dets, &gts, 0.5);
    for (d, tp) in dets.iter().zip(&flags) {
        println!(
            "score {:.1} -> {}",
            d.score,
            if *tp { "true positive" } else { "false positive" }
        );
    }

    let scored: Vec<(f32, bool)> = dets.iter().map(|d| d.score).zip(flags).collect();
    let all = average_precision(&scored, gts.len(), ApInterpolation::AllPoint).unwrap();
    let eleven = average_precision(&scored, gts.len(), ApInterpolation::ElevenPoint).unwrap();
    println!("AP (all-point envelope) = {all:.4}");
    println!("AP (eleven-point)       = {eleven:.4}");

    let mut acc = EvalAccumulator::new(0.5);
    acc.add_image(&dets, &gts);
    acc.add_image(&[], &[GtBox { class_id: 1, bbox: b(0.0, 0.0, 5.0, 5.0) }]);
    let result = acc.finish(ApInterpolation::AllPoint);
    println!("\nstreamed over two images:");
    for (class_id, ap) in &result.per_class_ap {
        println!("  class {class_id}: AP {ap:.4}");
    }
    println!("  mAP@0.5 = {:.4}", result.map_score);
    for (class_id, curve) in &result.pr_curves {
        println!("  class {class_id} PR curve: {curve:?}");
    }
}
