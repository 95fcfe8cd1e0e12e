//! Release gate: eight end-to-end checks, one test per criterion. Each
//! test prints a single `criterion N: PASS` line with its measured
//! figures, so a full run reads as a checklist.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fogdet::autograd::{Elem, Tape};
use fogdet::checkpoint;
use fogdet::cli::{cmd_eval, cmd_infer, cmd_make_dataset, cmd_train};
use fogdet::config::RunConfig;
use fogdet::datakit::{
    assemble_batch, generate_toy_scene, make_paired_sample, Batch, DiskDataset, SceneConfig,
    TOY_CLASS_NAMES,
};
use fogdet::detection::{iou, nms, BBox, Detection, GtBox, IOU_WEIGHT};
use fogdet::dtfe::{deform_conv2d, Dtfe, TfeBlock, TfeConfig};
use fogdet::evalkit::{mean_ap, ApInterpolation};
use fogdet::model::{JointModel, LossWeights, ModelConfig, VariantFlags};
use fogdet::nn::{Binding, ParamStore};
use fogdet::raster::ImageTensor;
use fogdet::restoration::restoration_loss;
use fogdet::training::{compute_grads, run_ablation, train_step, TrainConfig, Trainer, Variant};
use fogdet::weathersim::{
    apply_fog, compute_depth, compute_transmission, invert_fog, sample_beta, FogParams,
    TEST_BETA_RANGE,
};

fn randu(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Relative disagreement between a finite-difference slope and the
/// reverse-mode gradient, floored so near-zero pairs compare absolutely.
fn rel_err(fd: f64, ad: f64, floor: f64) -> f64 {
    (fd - ad).abs() / (fd.abs() + ad.abs()).max(floor)
}

#[test]
fn criterion_1_fog_round_trip() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(401);

    // Synthesize-then-invert on ten random images, checking every pixel
    // the inverse reports as trustworthy.
    let mut worst = 0.0f64;
    let mut trusted = 0usize;
    for _ in 0..10 {
        let clean = ImageTensor::new_unit(Array3::from_shape_fn((3, 160, 160), |_| {
            rng.gen_range(0.0f32..1.0)
        }));
        let beta = sample_beta(TEST_BETA_RANGE, &mut rng).unwrap();
        let params = FogParams::new(0.5, beta).unwrap();
        let foggy = apply_fog(&clean, &params).unwrap();
        let inv = invert_fog(&foggy, &params).unwrap();
        for c in 0..3 {
            for y in 0..160 {
                for x in 0..160 {
                    if inv.untrusted[[y, x]] {
                        continue;
                    }
                    trusted += 1;
                    let d = (inv.image.data[[c, y, x]] as f64 - clean.data[[c, y, x]] as f64).abs();
                    worst = worst.max(d);
                }
            }
        }
    }
    assert!(trusted > 0, "inversion marked every pixel untrusted");
    assert!(worst < 1e-6, "round-trip error {worst:e} reached 1e-6");

    // A zero scattering coefficient must leave the image bit-identical.
    let clean = ImageTensor::new_unit(Array3::from_shape_fn((3, 64, 64), |_| {
        rng.gen_range(0.0f32..1.0)
    }));
    let nofog = apply_fog(&clean, &FogParams::new(0.5, 0.0).unwrap()).unwrap();
    assert_eq!(nofog.data, clean.data, "beta 0 altered the image");

    // An image equal to the atmospheric light is a fixed point.
    let flat = ImageTensor::new_unit(Array3::from_elem((3, 80, 80), 0.5f32));
    let fogged = apply_fog(&flat, &FogParams::new(0.5, 0.12).unwrap()).unwrap();
    let fp = fogged
        .data
        .iter()
        .map(|v| (*v - 0.5).abs())
        .fold(0.0f32, f32::max);
    assert!(fp < 1e-7, "fixed-point drift {fp:e}");

    // Depth peaks at the image center, so transmission bottoms out there.
    let depth = compute_depth(160, 160).unwrap();
    let trans = compute_transmission(&depth, 0.1).unwrap();
    let min_t = trans.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let center = trans.values[[79, 79]];
    assert!(
        min_t == center,
        "minimum transmission {min_t} is not at the center ({center})"
    );
    assert!(
        trans.values[[0, 0]] > center,
        "corner transmission should exceed the center's"
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 30.0, "criterion 1 took {secs:.1}s (budget 30s)");
    println!(
        "criterion 1: PASS — round-trip L-inf {worst:.2e} over {trusted} trusted pixels, \
         beta-0 identity, flat-image fixed point, center-minimal transmission ({secs:.1}s)"
    );
}

#[test]
fn criterion_2_deformable_conv() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(402);

    // All-zero offsets must reproduce a standard same-padding conv.
    let (n, cin, cout, k, h, w) = (2usize, 2usize, 3usize, 3usize, 6usize, 7usize);
    let x_v = randu(&mut rng, &[n, cin, h, w], -1.0, 1.0);
    let w_v = randu(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
    let b_v = randu(&mut rng, &[cout], -0.5, 0.5);
    let zero_gap;
    {
        let tape = Tape::<f64>::new();
        let x = tape.constant(x_v.clone());
        let wt = tape.constant(w_v.clone());
        let b = tape.constant(b_v.clone());
        let off = tape.constant(ArrayD::zeros(IxDyn(&[n, 2 * k * k, h, w])));
        let de = deform_conv2d(&tape, x, wt, Some(b), off);
        let st = tape.conv2d(x, wt, Some(b), 1, k / 2);
        zero_gap = max_abs_diff(&tape.value(de), &tape.value(st));
        assert!(zero_gap < 1e-5, "zero-offset gap {zero_gap:e}");
    }

    // A uniform one-pixel downward sampling shift: output row y of the
    // deformed conv equals output row y+1 of the standard conv, both
    // ruled by the same zero padding.
    {
        let tape = Tape::<f64>::new();
        let x = tape.constant(x_v.clone());
        let wt = tape.constant(w_v.clone());
        let b = tape.constant(b_v.clone());
        let mut off_v = ArrayD::zeros(IxDyn(&[n, 2 * k * k, h, w]));
        for ni in 0..n {
            for t in 0..k * k {
                for y in 0..h {
                    for xcol in 0..w {
                        off_v[[ni, 2 * t, y, xcol]] = 1.0;
                    }
                }
            }
        }
        let off = tape.constant(off_v);
        let de = tape.value(deform_conv2d(&tape, x, wt, Some(b), off));
        let st = tape.value(tape.conv2d(x, wt, Some(b), 1, k / 2));
        let mut shift_gap = 0.0f64;
        for ni in 0..n {
            for c in 0..cout {
                for y in 0..h - 1 {
                    for xcol in 0..w {
                        let d = (de[[ni, c, y, xcol]] - st[[ni, c, y + 1, xcol]]).abs();
                        shift_gap = shift_gap.max(d);
                    }
                }
            }
        }
        assert!(shift_gap < 1e-5, "uniform-shift gap {shift_gap:e}");
    }

    // Central finite differences against the reverse-mode gradients for
    // the input, the weights, the bias, and the offsets on a 5x5 map.
    let (n, cin, cout, k, h, w) = (1usize, 2usize, 2usize, 3usize, 5usize, 5usize);
    let x_v = randu(&mut rng, &[n, cin, h, w], -1.0, 1.0);
    let w_v = randu(&mut rng, &[cout, cin, k, k], -1.0, 1.0);
    let b_v = randu(&mut rng, &[cout], -0.5, 0.5);
    // Fractional offsets keep every sampling point strictly inside a
    // bilinear cell, where the surface is differentiable.
    let off_v = ArrayD::from_shape_fn(IxDyn(&[n, 2 * k * k, h, w]), |_| {
        let mag: f64 = rng.gen_range(0.1..0.45);
        if rng.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    });
    let r_v = randu(&mut rng, &[n, cout, h, w], -1.0, 1.0);

    let loss_of = |xv: &ArrayD<f64>, wv: &ArrayD<f64>, bv: &ArrayD<f64>, ov: &ArrayD<f64>| -> f64 {
        let tape = Tape::<f64>::new();
        let out = deform_conv2d(
            &tape,
            tape.constant(xv.clone()),
            tape.constant(wv.clone()),
            Some(tape.constant(bv.clone())),
            tape.constant(ov.clone()),
        );
        let weighted = tape.mul(out, tape.constant(r_v.clone()));
        tape.scalar(tape.sum_all(weighted)).to_f64()
    };

    let (gx, gw, gb, go) = {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(x_v.clone());
        let wt = tape.leaf(w_v.clone());
        let b = tape.leaf(b_v.clone());
        let off = tape.leaf(off_v.clone());
        let out = deform_conv2d(&tape, x, wt, Some(b), off);
        let weighted = tape.mul(out, tape.constant(r_v.clone()));
        let loss = tape.sum_all(weighted);
        let mut grads = tape.backward(loss);
        (
            grads.take(x).unwrap(),
            grads.take(wt).unwrap(),
            grads.take(b).unwrap(),
            grads.take(off).unwrap(),
        )
    };

    let step = 1e-5;
    let mut fd_worst = 0.0f64;
    let check = |value: &ArrayD<f64>,
                     grad: &ArrayD<f64>,
                     which: usize,
                     flat: usize,
                     fd_worst: &mut f64| {
        let mut lo = value.clone();
        let mut hi = value.clone();
        lo.as_slice_mut().unwrap()[flat] -= step;
        hi.as_slice_mut().unwrap()[flat] += step;
        let (flo, fhi) = match which {
            0 => (
                loss_of(&lo, &w_v, &b_v, &off_v),
                loss_of(&hi, &w_v, &b_v, &off_v),
            ),
            1 => (
                loss_of(&x_v, &lo, &b_v, &off_v),
                loss_of(&x_v, &hi, &b_v, &off_v),
            ),
            2 => (
                loss_of(&x_v, &w_v, &lo, &off_v),
                loss_of(&x_v, &w_v, &hi, &off_v),
            ),
            _ => (
                loss_of(&x_v, &w_v, &b_v, &lo),
                loss_of(&x_v, &w_v, &b_v, &hi),
            ),
        };
        let fd = (fhi - flo) / (2.0 * step);
        let ad = grad.as_slice().unwrap()[flat];
        let rel = rel_err(fd, ad, 1e-3);
        *fd_worst = fd_worst.max(rel);
        assert!(rel < 1e-3, "slot {which} coord {flat}: fd {fd} vs ad {ad}");
    };
    for i in 0..x_v.len() {
        check(&x_v, &gx, 0, i, &mut fd_worst);
    }
    for i in 0..w_v.len() {
        check(&w_v, &gw, 1, i, &mut fd_worst);
    }
    for i in 0..b_v.len() {
        check(&b_v, &gb, 2, i, &mut fd_worst);
    }
    let off_len = off_v.len();
    for _ in 0..60 {
        let i = rng.gen_range(0..off_len);
        check(&off_v, &go, 3, i, &mut fd_worst);
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 2 took {secs:.1}s (budget 60s)");
    println!(
        "criterion 2: PASS — zero-offset gap {zero_gap:.2e}, integer-shift equivalence, \
         worst gradient rel err {fd_worst:.2e} over input/weights/bias/offsets ({secs:.1}s)"
    );
}

#[test]
fn criterion_3_attention_block() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(403);

    // Attention rows are probability distributions.
    let cfg = TfeConfig {
        channels: 8,
        map_h: 4,
        map_w: 4,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut store = ParamStore::<f64>::new();
    let blk = TfeBlock::new(&mut store, 11, "blk", cfg).unwrap();
    let x_v = randu(&mut rng, &[2, 8, 4, 4], -1.0, 1.0);
    let mut row_gap = 0.0f64;
    {
        let tape = Tape::new();
        let bx = Binding::new(&tape, &store);
        let x = tape.constant(x_v.clone());
        let parts = blk.forward_parts(&bx, x);
        let attn = tape.value(parts.attn);
        assert_eq!(attn.shape(), &[4, 16, 16]);
        for row in attn.as_slice().unwrap().chunks(16) {
            let s: f64 = row.iter().sum();
            row_gap = row_gap.max((s - 1.0).abs());
        }
        assert!(row_gap < 1e-6, "attention row sum off by {row_gap:e}");
    }

    // Zeroing everything the block writes back over the residual path
    // (positional table, attention projection, final MLP layer) turns it
    // into the identity.
    for name in [
        "blk.pos",
        "blk.proj.weight",
        "blk.proj.bias",
        "blk.fc2.weight",
        "blk.fc2.bias",
    ] {
        store.get_mut(name).unwrap().fill(0.0);
    }
    {
        let tape = Tape::new();
        let bx = Binding::new(&tape, &store);
        let x = tape.constant(x_v.clone());
        let out = tape.value(blk.forward(&bx, x));
        let gap = max_abs_diff(&out, &x_v);
        assert!(gap == 0.0, "zeroed block drifted from identity by {gap:e}");
    }

    // With a single token the only attention weight is exactly 1 and the
    // mixed values equal the value vectors.
    {
        let cfg1 = TfeConfig {
            channels: 6,
            map_h: 1,
            map_w: 1,
            heads: 3,
            mlp_ratio: 2,
        };
        let mut store1 = ParamStore::<f64>::new();
        let blk1 = TfeBlock::new(&mut store1, 13, "one", cfg1).unwrap();
        let tape = Tape::new();
        let bx = Binding::new(&tape, &store1);
        let x = tape.constant(randu(&mut rng, &[2, 6, 1, 1], -1.0, 1.0));
        let parts = blk1.forward_parts(&bx, x);
        let attn = tape.value(parts.attn);
        assert_eq!(attn.shape(), &[6, 1, 1]);
        assert!(
            attn.iter().all(|&a| a == 1.0),
            "single-token attention is not exactly 1"
        );
        assert_eq!(
            tape.value(parts.mixed),
            tape.value(parts.v),
            "single-token mixing altered the values"
        );
    }

    // Finite differences through the full enhancement stage: deformable
    // layers feeding the attention block.
    let cfg2 = TfeConfig {
        channels: 4,
        map_h: 3,
        map_w: 3,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut store2 = ParamStore::<f64>::new();
    let enh = Dtfe::new(&mut store2, 5, "enh", cfg2, 3).unwrap();
    // The offset predictors start at zero, which parks every sampling
    // point on a bilinear cell corner; nudge them to generic positions.
    for name in [
        "enh.dft1.offset.weight",
        "enh.dft1.offset.bias",
        "enh.dft2.offset.weight",
        "enh.dft2.offset.bias",
    ] {
        let p = store2.get_mut(name).unwrap();
        let shape: Vec<usize> = p.shape().to_vec();
        *p = randu(&mut rng, &shape, -0.15, 0.15);
    }
    let x_v = randu(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);
    let r_v = randu(&mut rng, &[1, 4, 3, 3], -1.0, 1.0);

    let loss_of = |st: &ParamStore<f64>, xv: &ArrayD<f64>| -> f64 {
        let tape = Tape::new();
        let bx = Binding::new(&tape, st);
        let out = enh.forward(&bx, tape.constant(xv.clone()));
        let weighted = tape.mul(out, tape.constant(r_v.clone()));
        tape.scalar(tape.sum_all(weighted)).to_f64()
    };

    let (gx, param_grads) = {
        let tape = Tape::new();
        let bx = Binding::new(&tape, &store2);
        let x = tape.leaf(x_v.clone());
        let out = enh.forward(&bx, x);
        let weighted = tape.mul(out, tape.constant(r_v.clone()));
        let loss = tape.sum_all(weighted);
        let mut grads = tape.backward(loss);
        let mut by_name = BTreeMap::new();
        for (name, tx) in bx.bound() {
            if let Some(g) = grads.take(tx) {
                by_name.insert(name, g);
            }
        }
        (grads.take(x).unwrap(), by_name)
    };

    let step = 1e-5;
    let mut spot_worst = 0.0f64;
    for i in 0..x_v.len() {
        let mut lo = x_v.clone();
        let mut hi = x_v.clone();
        lo.as_slice_mut().unwrap()[i] -= step;
        hi.as_slice_mut().unwrap()[i] += step;
        let fd = (loss_of(&store2, &hi) - loss_of(&store2, &lo)) / (2.0 * step);
        let ad = gx.as_slice().unwrap()[i];
        let rel = rel_err(fd, ad, 1e-4);
        spot_worst = spot_worst.max(rel);
        assert!(rel < 1e-2, "input coord {i}: fd {fd} vs ad {ad}");
    }
    let names: Vec<String> = param_grads.keys().cloned().collect();
    for name in &names {
        let base = store2.get(name).unwrap().clone();
        let len = base.len();
        for _ in 0..2 {
            let i = rng.gen_range(0..len);
            let mut st = store2.clone();
            st.get_mut(name).unwrap().as_slice_mut().unwrap()[i] -= step;
            let flo = loss_of(&st, &x_v);
            let mut st = store2.clone();
            st.get_mut(name).unwrap().as_slice_mut().unwrap()[i] += step;
            let fhi = loss_of(&st, &x_v);
            let fd = (fhi - flo) / (2.0 * step);
            let ad = param_grads[name].as_slice().unwrap()[i];
            let rel = rel_err(fd, ad, 1e-4);
            spot_worst = spot_worst.max(rel);
            assert!(rel < 1e-2, "{name} coord {i}: fd {fd} vs ad {ad}");
        }
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 3 took {secs:.1}s (budget 60s)");
    println!(
        "criterion 3: PASS — row sums within {row_gap:.2e} of 1, zeroed-block identity, \
         single-token closed form, end-to-end gradient spot checks rel {spot_worst:.2e} ({secs:.1}s)"
    );
}

#[test]
fn criterion_4_loss_identities() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(404);

    // The documented default split between the two objectives.
    let weights = LossWeights::default();
    assert_eq!((weights.detection, weights.restoration), (0.2, 0.8));

    // Composite identities on a real forward pass, asserted bit-exactly:
    // the breakdown terms must recombine into the reported totals.
    let cfg = ModelConfig {
        num_classes: 2,
        image_size: (64, 64),
        width_mult: 0.125,
        depth_mult: 0.33,
        flags: VariantFlags::all_on(),
    };
    let mut store = ParamStore::<f64>::new();
    let model = JointModel::new(&mut store, 7, cfg).unwrap();
    let tape = Tape::new();
    let bx = Binding::new(&tape, &store);
    let x = tape.constant(randu(&mut rng, &[2, 3, 64, 64], 0.0, 1.0));
    let outputs = model.forward(&bx, x).unwrap();
    let gts = vec![
        vec![
            GtBox {
                class_id: 0,
                bbox: BBox {
                    x_min: 8.0,
                    y_min: 10.0,
                    x_max: 30.0,
                    y_max: 36.0,
                },
            },
            GtBox {
                class_id: 1,
                bbox: BBox {
                    x_min: 34.0,
                    y_min: 12.0,
                    x_max: 58.0,
                    y_max: 40.0,
                },
            },
        ],
        vec![GtBox {
            class_id: 1,
            bbox: BBox {
                x_min: 16.0,
                y_min: 20.0,
                x_max: 48.0,
                y_max: 52.0,
            },
        }],
    ];
    let clean = randu(&mut rng, &[2, 3, 64, 64], 0.0, 1.0);
    let (_, br) = model
        .loss(&tape, &outputs, &gts, Some(&clean), weights)
        .unwrap();
    let d = br.detection;
    assert!(d.num_pos > 0, "no positive cells were assigned");
    assert_eq!(
        d.total,
        IOU_WEIGHT * d.iou + d.cls + d.obj,
        "detection total is not the documented weighted sum"
    );
    assert_eq!(
        br.grand_total,
        0.2 * d.total + 0.8 * br.restoration,
        "grand total is not the documented weighted sum"
    );

    // Focal with gamma 0 collapses to alpha-weighted BCE.
    let mut focal_gap = 0.0f64;
    {
        let tape = Tape::<f64>::new();
        let z_v = randu(&mut rng, &[257], -6.0, 6.0);
        let y_v = ArrayD::from_shape_fn(IxDyn(&[257]), |_| {
            if rng.gen_bool(0.4) {
                1.0
            } else {
                0.0
            }
        });
        let z = tape.constant(z_v);
        let y = tape.constant(y_v.clone());
        for alpha in [0.25, 0.6] {
            let focal = tape.value(tape.focal_with_logits(z, y, alpha, 0.0));
            let bce = tape.bce_with_logits(z, y);
            let w = tape.constant(y_v.mapv(|t| alpha * t + (1.0 - alpha) * (1.0 - t)));
            let weighted = tape.value(tape.mul(bce, w));
            let gap = max_abs_diff(&focal, &weighted);
            focal_gap = focal_gap.max(gap);
            assert!(gap <= 1e-7, "gamma-0 focal vs weighted BCE gap {gap:e}");
        }
    }

    // The restoration gradient is 2(pred - mapped target)/N, with the
    // unit-range target mapped to [-1, 1].
    let mut rest_gap = 0.0f64;
    {
        let tape = Tape::<f64>::new();
        let p_v = randu(&mut rng, &[2, 3, 8, 8], -0.9, 0.9);
        let t_v = randu(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
        let pred = tape.leaf(p_v.clone());
        let loss = restoration_loss(&tape, pred, t_v.clone());
        let mut grads = tape.backward(loss);
        let g = grads.take(pred).unwrap();
        let n = p_v.len() as f64;
        for ((gv, pv), tv) in g.iter().zip(p_v.iter()).zip(t_v.iter()) {
            let expect = 2.0 * (pv - (2.0 * tv - 1.0)) / n;
            rest_gap = rest_gap.max((gv - expect).abs());
        }
        assert!(rest_gap <= 1e-12, "restoration gradient gap {rest_gap:e}");
    }

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "criterion 4 took {secs:.1}s (budget 10s)");
    println!(
        "criterion 4: PASS — detection and grand totals recombine bit-exactly \
         ({} positives), gamma-0 focal gap {focal_gap:.2e}, restoration gradient gap \
         {rest_gap:.2e} ({secs:.1}s)",
        d.num_pos
    );
}

/// Independent scorer: greedy per-image matching, then each class's AP
/// via an O(n^2) suffix-max precision envelope.
fn brute_force_map(
    per_image: &[(Vec<Detection>, Vec<GtBox>)],
    iou_thr: f32,
) -> (f64, BTreeMap<usize, f64>) {
    let mut flags: BTreeMap<usize, Vec<(f32, bool)>> = BTreeMap::new();
    let mut gt_count: BTreeMap<usize, usize> = BTreeMap::new();
    for (dets, gts) in per_image {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
        let mut taken = vec![false; gts.len()];
        let mut tp = vec![false; dets.len()];
        for di in order {
            let d = &dets[di];
            let mut best: Option<(usize, f32)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || g.class_id != d.class_id {
                    continue;
                }
                let ov = iou(&d.bbox, &g.bbox);
                if ov >= iou_thr && best.map_or(true, |(_, bo)| ov > bo) {
                    best = Some((gi, ov));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
                tp[di] = true;
            }
        }
        for (d, f) in dets.iter().zip(tp) {
            flags.entry(d.class_id).or_default().push((d.score, f));
        }
        for g in gts {
            *gt_count.entry(g.class_id).or_default() += 1;
        }
    }

    let mut per_class = BTreeMap::new();
    for (&cid, &num_gt) in &gt_count {
        if num_gt == 0 {
            continue;
        }
        let mut fl = flags.remove(&cid).unwrap_or_default();
        fl.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut recalls = Vec::with_capacity(fl.len());
        let mut precisions = Vec::with_capacity(fl.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(_, hit) in &fl {
            if hit {
                tp += 1;
            } else {
                fp += 1;
            }
            recalls.push(tp as f64 / num_gt as f64);
            precisions.push(tp as f64 / (tp + fp) as f64);
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..fl.len() {
            let best_later = precisions[i..].iter().cloned().fold(0.0, f64::max);
            ap += (recalls[i] - prev_r) * best_later;
            prev_r = recalls[i];
        }
        per_class.insert(cid, ap);
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (map, per_class)
}

/// Independent suppressor: walk candidates best-first, drop any that
/// overlaps an already-kept box of its class beyond the threshold.
fn reference_nms(dets: &[Detection], thr: f32) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then(dets[a].class_id.cmp(&dets[b].class_id))
            .then(dets[a].bbox.x_min.total_cmp(&dets[b].bbox.x_min))
            .then(dets[a].bbox.y_min.total_cmp(&dets[b].bbox.y_min))
    });
    let mut keep: Vec<Detection> = Vec::new();
    for i in order {
        let c = &dets[i];
        if keep
            .iter()
            .all(|k| k.class_id != c.class_id || iou(&k.bbox, &c.bbox) <= thr)
        {
            keep.push(c.clone());
        }
    }
    keep
}

#[test]
fn criterion_5_evaluation_oracles() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(405);

    let rand_box = |rng: &mut ChaCha8Rng| -> BBox {
        let x0: f32 = rng.gen_range(0.0..70.0);
        let y0: f32 = rng.gen_range(0.0..70.0);
        BBox {
            x_min: x0,
            y_min: y0,
            x_max: x0 + rng.gen_range(5.0..30.0),
            y_max: y0 + rng.gen_range(5.0..30.0),
        }
    };

    // Scoring: 200 random micro-problems against the independent scorer.
    let mut map_gap = 0.0f64;
    for _ in 0..200 {
        let images = rng.gen_range(1..=3);
        let mut per_image = Vec::new();
        for _ in 0..images {
            let gts: Vec<GtBox> = (0..rng.gen_range(0..=5))
                .map(|_| GtBox {
                    class_id: rng.gen_range(0..3),
                    bbox: rand_box(&mut rng),
                })
                .collect();
            let mut dets = Vec::new();
            for _ in 0..rng.gen_range(0..=5) {
                // Half the detections hug a ground-truth box so true
                // positives actually occur.
                let bbox = if !gts.is_empty() && rng.gen_bool(0.5) {
                    let g = &gts[rng.gen_range(0..gts.len())];
                    BBox {
                        x_min: g.bbox.x_min + rng.gen_range(-2.0..2.0),
                        y_min: g.bbox.y_min + rng.gen_range(-2.0..2.0),
                        x_max: g.bbox.x_max + rng.gen_range(-2.0..2.0),
                        y_max: g.bbox.y_max + rng.gen_range(-2.0..2.0),
                    }
                } else {
                    rand_box(&mut rng)
                };
                dets.push(Detection {
                    class_id: rng.gen_range(0..3),
                    score: rng.gen_range(0.0..1.0),
                    bbox,
                });
            }
            per_image.push((dets, gts));
        }
        let got = mean_ap(&per_image, 0.5, ApInterpolation::AllPoint);
        let (want_map, want_classes) = brute_force_map(&per_image, 0.5);
        let gap = (got.map_score - want_map).abs();
        map_gap = map_gap.max(gap);
        assert!(gap <= 1e-9, "mAP {} vs oracle {want_map}", got.map_score);
        assert_eq!(
            got.per_class_ap.len(),
            want_classes.len(),
            "per-class AP key sets differ"
        );
        for (cid, ap) in &got.per_class_ap {
            let w = want_classes[cid];
            assert!((ap - w).abs() <= 1e-9, "class {cid}: {ap} vs oracle {w}");
        }
    }

    // Suppression: 100 random candidate sets against the independent
    // suppressor, compared box for box.
    for _ in 0..100 {
        let dets: Vec<Detection> = (0..rng.gen_range(0..=25))
            .map(|_| Detection {
                class_id: rng.gen_range(0..3),
                score: rng.gen_range(0.0f32..1.0),
                bbox: rand_box(&mut rng),
            })
            .collect();
        let thr: f32 = rng.gen_range(0.2..0.7);
        let got = nms(&dets, thr);
        let want = reference_nms(&dets, thr);
        assert_eq!(got.len(), want.len(), "kept-set sizes differ");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.class_id, w.class_id);
            assert_eq!(g.score.to_bits(), w.score.to_bits());
            assert_eq!(g.bbox.x_min.to_bits(), w.bbox.x_min.to_bits());
            assert_eq!(g.bbox.y_min.to_bits(), w.bbox.y_min.to_bits());
            assert_eq!(g.bbox.x_max.to_bits(), w.bbox.x_max.to_bits());
            assert_eq!(g.bbox.y_max.to_bits(), w.bbox.y_max.to_bits());
        }
    }

    // Overlap hand cases: identical, disjoint, and a pair overlapping in
    // exactly one square unit out of seven.
    let unit = BBox {
        x_min: 10.0,
        y_min: 10.0,
        x_max: 20.0,
        y_max: 20.0,
    };
    assert_eq!(iou(&unit, &unit), 1.0);
    let far = BBox {
        x_min: 50.0,
        y_min: 50.0,
        x_max: 60.0,
        y_max: 60.0,
    };
    assert_eq!(iou(&unit, &far), 0.0);
    let a = BBox {
        x_min: 0.0,
        y_min: 0.0,
        x_max: 2.0,
        y_max: 2.0,
    };
    let b = BBox {
        x_min: 1.0,
        y_min: 1.0,
        x_max: 3.0,
        y_max: 3.0,
    };
    assert_eq!(iou(&a, &b), 1.0f32 / 7.0f32);

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 5 took {secs:.1}s (budget 60s)");
    println!(
        "criterion 5: PASS — 200 scoring problems within {map_gap:.1e} of the oracle, \
         100 suppression sets bit-identical, overlap hand cases exact ({secs:.1}s)"
    );
}

fn tiny_model(flags: VariantFlags) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        image_size: (32, 32),
        width_mult: 0.0625,
        depth_mult: 0.33,
        flags,
    }
}

fn tiny_batch(seed: u64) -> Batch {
    let cfg = SceneConfig {
        width: 32,
        height: 32,
        min_objects: 1,
        max_objects: 2,
        min_size: 8,
        max_size: 16,
        ..SceneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<_> = (0..2)
        .map(|i| {
            let scene = generate_toy_scene(&mut rng, &cfg, &format!("s{i}")).unwrap();
            let mut ann = scene.annotation;
            for b in &mut ann.boxes {
                b.class_id = b.class_id.min(1);
            }
            make_paired_sample(scene.image, ann, FogParams::new(0.5, 0.09).unwrap()).unwrap()
        })
        .collect();
    assemble_batch(&samples, &[0, 1], 32, 32).unwrap()
}

#[test]
fn criterion_6_training_dynamics() {
    let t0 = Instant::now();

    // Fifty steps on one fixed batch must at least halve the loss, and
    // two identically seeded runs must agree to the bit.
    let run = || -> Vec<u64> {
        let cfg = TrainConfig {
            base_lr: 0.02,
            batch_size: 2,
            model: tiny_model(VariantFlags::all_on()),
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg).unwrap();
        let batch = tiny_batch(61);
        (0..50)
            .map(|step| {
                train_step(
                    &trainer.model,
                    &mut trainer.store,
                    &mut trainer.opt,
                    &batch,
                    trainer.cfg.loss_weights,
                    0.01,
                    step,
                )
                .unwrap()
                .grand_total
                .to_bits()
            })
            .collect()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "two identically seeded runs diverged");
    let first = f64::from_bits(a[0]);
    let last = f64::from_bits(*a.last().unwrap());
    assert!(
        last <= 0.5 * first,
        "loss only went {first:.4} -> {last:.4} in 50 steps"
    );

    // With the restoration weight at zero, the shared parameters get
    // exactly the detection-only gradients and the decoder gets none.
    let batch = tiny_batch(62);
    let det_only_w = LossWeights {
        detection: 1.0,
        restoration: 0.0,
    };
    let mut store_joint = ParamStore::<f64>::new();
    let joint = JointModel::new(
        &mut store_joint,
        7,
        tiny_model(VariantFlags {
            restoration_on: true,
            ..VariantFlags::base()
        }),
    )
    .unwrap();
    let (grads_joint, _) = compute_grads(&joint, &store_joint, &batch, det_only_w).unwrap();
    let mut store_det = ParamStore::<f64>::new();
    let det = JointModel::new(&mut store_det, 7, tiny_model(VariantFlags::base())).unwrap();
    let (grads_det, _) = compute_grads(&det, &store_det, &batch, det_only_w).unwrap();
    let mut iso_gap = 0.0f64;
    for (name, g) in &grads_det {
        let gj = &grads_joint[name];
        for (x, y) in g.iter().zip(gj.iter()) {
            iso_gap = iso_gap.max((x - y).abs());
        }
    }
    assert!(iso_gap < 1e-9, "shared gradients differ by {iso_gap:e}");
    assert!(grads_joint.keys().any(|k| k.starts_with("restoration.")));
    for (name, g) in &grads_joint {
        if name.starts_with("restoration.") {
            assert!(g.iter().all(|v| *v == 0.0), "{name} got nonzero gradient");
        }
    }

    // With the detection weight at zero, the restoration objective still
    // reaches back into the backbone.
    let (grads, _) = compute_grads(
        &joint,
        &store_joint,
        &batch,
        LossWeights {
            detection: 0.0,
            restoration: 1.0,
        },
    )
    .unwrap();
    let backbone_norm: f64 = grads
        .iter()
        .filter(|(n, _)| n.starts_with("backbone."))
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum();
    assert!(backbone_norm > 0.0, "backbone got no restoration gradient");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 300.0, "criterion 6 took {secs:.1}s (budget 300s)");
    println!(
        "criterion 6: PASS — 50-step loss {first:.3} -> {last:.3}, bitwise-identical reruns, \
         zero-weight isolation both ways (backbone norm {backbone_norm:.2e}) ({secs:.1}s)"
    );
}

/// Run settings for the ablation study: small foggy scenes, a narrow
/// model, twenty epochs. Chosen so the detection-only baseline has real
/// headroom on the held-out split.
const ABLATION_CONFIG: &str = r#"
[model]
image_height = 64
image_width = 64
width_mult = 0.25

[train]
seed = 7

[data]
train_count = 500
test_count = 100
width = 64
height = 64
min_objects = 2
max_objects = 5
min_size = 10
max_size = 24
max_overlap = 0.15
"#;

#[test]
fn criterion_7_ablation_direction() {
    let t0 = Instant::now();
    let cfg = RunConfig::from_toml_str(ABLATION_CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_make_dataset(&data, &cfg).unwrap();
    let train = DiskDataset::open(data.join("train"))
        .unwrap()
        .load_all()
        .unwrap();
    let test = DiskDataset::open(data.join("test"))
        .unwrap()
        .load_all()
        .unwrap();
    assert_eq!((train.len(), test.len()), (500, 100));

    let base_cfg = cfg.train_config().unwrap();
    let log_path = std::env::temp_dir().join("fogdet_acceptance_ablation.log");
    let mut log = std::fs::File::create(&log_path).unwrap();
    let rows = run_ablation(
        &[Variant::Base, Variant::V1, Variant::V4],
        &base_cfg,
        &train,
        &test,
        &[0, 1, 2],
        &mut log,
    )
    .unwrap();

    let mean = |name: &str| -> f64 {
        let scores: Vec<f64> = rows
            .iter()
            .filter(|r| r.variant == name)
            .map(|r| r.map_score)
            .collect();
        assert_eq!(scores.len(), 3, "expected 3 seeds for {name}");
        scores.iter().sum::<f64>() / scores.len() as f64
    };
    let base_map = mean("base");
    let v1_map = mean("v1");
    let v4_map = mean("v4");
    for r in &rows {
        println!(
            "  ablation cell: {} seed {} map {:.4}",
            r.variant, r.seed, r.map_score
        );
    }
    assert!(
        v1_map >= base_map,
        "restoration variant fell below the baseline: {v1_map:.4} < {base_map:.4}"
    );
    assert!(
        v4_map >= base_map,
        "full variant fell below the baseline: {v4_map:.4} < {base_map:.4}"
    );

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 14400.0, "criterion 7 took {secs:.0}s (budget 4h)");
    println!(
        "criterion 7: PASS — mean mAP@0.5 over 3 seeds: baseline {base_map:.4}, \
         +restoration {v1_map:.4}, full {v4_map:.4} ({:.0} min)",
        secs / 60.0
    );
}

const HEADLESS_CONFIG: &str = r#"
[model]
image_height = 32
image_width = 32
width_mult = 0.0625

[train]
epochs = 2
batch_size = 4
seed = 3

[data]
train_count = 12
test_count = 4
width = 32
height = 32
min_objects = 1
max_objects = 2
min_size = 8
max_size = 16
"#;

#[test]
fn criterion_8_restoration_stripped_checkpoint() {
    let t0 = Instant::now();
    let cfg = RunConfig::from_toml_str(HEADLESS_CONFIG).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_make_dataset(&data, &cfg).unwrap();
    let run = dir.path().join("run");
    cmd_train(&data, &run, &cfg).unwrap();

    // Strip the restoration decoder from the trained checkpoint, leaving
    // a detection-only parameter set.
    let full = run.join("final.ckpt");
    let mut params = checkpoint::load::<f32>(&full).unwrap();
    let removed = params.remove_prefix("restoration.");
    assert!(removed > 0, "checkpoint had no restoration parameters");
    let stripped = dir.path().join("stripped.ckpt");
    checkpoint::save(&params, &stripped).unwrap();

    let eval_dir = dir.path().join("eval");
    cmd_eval(&data, &stripped, &eval_dir, &cfg).unwrap();
    assert!(eval_dir.join("report.json").is_file());
    assert!(eval_dir.join("report.jsonl").is_file());

    let infer_dir = dir.path().join("infer");
    let classes: Vec<String> = TOY_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    cmd_infer(
        &data.join("test").join("images"),
        &stripped,
        &infer_dir,
        &cfg,
        &classes,
    )
    .unwrap();
    assert!(infer_dir.join("detections.txt").is_file());
    let overlays = std::fs::read_dir(&infer_dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with("_boxes.png"))
        .count();
    assert_eq!(overlays, 4, "expected one overlay per test image");

    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 8 took {secs:.1}s (budget 60s)");
    println!(
        "criterion 8: PASS — stripped {removed} restoration parameters; eval and infer \
         both succeeded on the detection-only checkpoint ({secs:.1}s)"
    );
}
