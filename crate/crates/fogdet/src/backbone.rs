//! Feature-extraction trunk: a space-to-depth stem, four downsampling
//! stages with cross-stage partial blocks, spatial pyramid pooling on the
//! deepest stage, and an optional enhancement module on the final map.
//!
//! Channel widths and block counts scale with the configured multipliers;
//! widths are rounded to multiples of eight.

use crate::autograd::{Elem, Tx};
use crate::dtfe::{Dtfe, TfeConfig};
use crate::error::Result;
use crate::nn::{Binding, ConvBlock, ParamStore};
use std::collections::BTreeMap;

/// Rounds a scaled channel width to the nearest multiple of eight,
/// never below eight.
pub fn make_divisible(channels: f64) -> usize {
    (((channels + 4.0) / 8.0).floor() as usize * 8).max(8)
}

/// Scales a base block count by the depth multiplier, never below one.
pub fn scale_depth(base: usize, depth_mult: f64) -> usize {
    ((base as f64 * depth_mult).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneConfig {
    pub width_mult: f64,
    pub depth_mult: f64,
    pub use_spp: bool,
    /// Deepest-map (stride 32) spatial size when the enhancement module
    /// is enabled; `None` disables it.
    pub dtfe_map: Option<(usize, usize)>,
    pub dtfe_heads: usize,
    pub dtfe_mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            width_mult: 0.5,
            depth_mult: 0.33,
            use_spp: true,
            dtfe_map: None,
            dtfe_heads: 4,
            dtfe_mlp_ratio: 4,
        }
    }
}

const BASE_WIDTHS: [usize; 5] = [64, 128, 256, 512, 1024];
const BASE_DEPTHS: [usize; 4] = [3, 9, 9, 3];

impl BackboneConfig {
    /// Channel widths: stem plus the four stage outputs.
    pub fn widths(&self) -> [usize; 5] {
        let mut w = [0usize; 5];
        for (i, base) in BASE_WIDTHS.iter().enumerate() {
            w[i] = make_divisible(*base as f64 * self.width_mult);
        }
        w
    }

    /// Bottleneck counts for the four stages.
    pub fn depths(&self) -> [usize; 4] {
        let mut d = [0usize; 4];
        for (i, base) in BASE_DEPTHS.iter().enumerate() {
            d[i] = scale_depth(*base, self.depth_mult);
        }
        d
    }
}

/// 1x1 reduce, 3x3 conv, optional residual add.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: ConvBlock,
    pub conv2: ConvBlock,
    pub shortcut: bool,
}

impl Bottleneck {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: &str,
        channels: usize,
        shortcut: bool,
    ) -> Self {
        Bottleneck {
            conv1: ConvBlock::new(store, seed, format!("{name}.conv1"), channels, channels, 1, 1),
            conv2: ConvBlock::new(store, seed, format!("{name}.conv2"), channels, channels, 3, 1),
            shortcut,
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let y = self.conv1.forward(bx, x);
        let y = self.conv2.forward(bx, y);
        if self.shortcut {
            bx.tape().add(x, y)
        } else {
            y
        }
    }
}

/// Cross-stage partial block: the input is split by two 1x1 convs, one
/// half runs through a bottleneck chain, the halves are concatenated and
/// merged by a final 1x1 conv.
#[derive(Debug, Clone)]
pub struct CspBlock {
    pub main: ConvBlock,
    pub side: ConvBlock,
    pub bottlenecks: Vec<Bottleneck>,
    pub merge: ConvBlock,
}

impl CspBlock {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: &str,
        cin: usize,
        cout: usize,
        n: usize,
        shortcut: bool,
    ) -> Self {
        let mid = cout / 2;
        let bottlenecks = (0..n)
            .map(|i| Bottleneck::new(store, seed, &format!("{name}.b{i}"), mid, shortcut))
            .collect();
        CspBlock {
            main: ConvBlock::new(store, seed, format!("{name}.main"), cin, mid, 1, 1),
            side: ConvBlock::new(store, seed, format!("{name}.side"), cin, mid, 1, 1),
            bottlenecks,
            merge: ConvBlock::new(store, seed, format!("{name}.merge"), mid * 2, cout, 1, 1),
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let t = bx.tape();
        let mut main = self.main.forward(bx, x);
        for b in &self.bottlenecks {
            main = b.forward(bx, main);
        }
        let side = self.side.forward(bx, x);
        let joined = t.concat(1, &[main, side]);
        self.merge.forward(bx, joined)
    }
}

/// Spatial pyramid pooling: parallel max pools (5, 9, 13) concatenated
/// with the identity path, then merged back to the input width.
#[derive(Debug, Clone)]
pub struct Spp {
    pub pre: ConvBlock,
    pub post: ConvBlock,
}

pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];

impl Spp {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, seed: u64, name: &str, channels: usize) -> Self {
        let mid = channels / 2;
        Spp {
            pre: ConvBlock::new(store, seed, format!("{name}.pre"), channels, mid, 1, 1),
            post: ConvBlock::new(store, seed, format!("{name}.post"), mid * 4, channels, 1, 1),
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let t = bx.tape();
        let reduced = self.pre.forward(bx, x);
        let mut parts = vec![reduced];
        for k in SPP_KERNELS {
            parts.push(t.max_pool2d(reduced, k, 1, k / 2));
        }
        let joined = t.concat(1, &parts);
        self.post.forward(bx, joined)
    }
}

/// Multi-scale features produced by one backbone pass.
pub struct PyramidFeatures {
    /// Stride-8 map.
    pub c3: Tx,
    /// Stride-16 map.
    pub c4: Tx,
    /// Stride-32 map (after enhancement when enabled).
    pub c5: Tx,
    /// Shallow maps for the restoration decoder, keyed by stride.
    pub skips: BTreeMap<String, Tx>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: ConvBlock,
    down1: ConvBlock,
    csp1: CspBlock,
    down2: ConvBlock,
    csp2: CspBlock,
    down3: ConvBlock,
    csp3: CspBlock,
    down4: ConvBlock,
    spp: Option<Spp>,
    csp4: CspBlock,
    dtfe: Option<Dtfe>,
}

impl Backbone {
    pub fn new<E: Elem>(store: &mut ParamStore<E>, seed: u64, cfg: BackboneConfig) -> Result<Self> {
        let w = cfg.widths();
        let d = cfg.depths();
        let p = "backbone";
        let dtfe = match cfg.dtfe_map {
            Some((h, wd)) => Some(Dtfe::new(
                store,
                seed,
                &format!("{p}.enhance"),
                TfeConfig {
                    channels: w[4],
                    map_h: h,
                    map_w: wd,
                    heads: cfg.dtfe_heads,
                    mlp_ratio: cfg.dtfe_mlp_ratio,
                },
                3,
            )?),
            None => None,
        };
        Ok(Backbone {
            cfg,
            stem: ConvBlock::new(store, seed, format!("{p}.stem"), 12, w[0], 3, 1),
            down1: ConvBlock::new(store, seed, format!("{p}.down1"), w[0], w[1], 3, 2),
            csp1: CspBlock::new(store, seed, &format!("{p}.csp1"), w[1], w[1], d[0], true),
            down2: ConvBlock::new(store, seed, format!("{p}.down2"), w[1], w[2], 3, 2),
            csp2: CspBlock::new(store, seed, &format!("{p}.csp2"), w[2], w[2], d[1], true),
            down3: ConvBlock::new(store, seed, format!("{p}.down3"), w[2], w[3], 3, 2),
            csp3: CspBlock::new(store, seed, &format!("{p}.csp3"), w[3], w[3], d[2], true),
            down4: ConvBlock::new(store, seed, format!("{p}.down4"), w[3], w[4], 3, 2),
            spp: cfg.use_spp.then(|| Spp::new(store, seed, &format!("{p}.spp"), w[4])),
            csp4: CspBlock::new(store, seed, &format!("{p}.csp4"), w[4], w[4], d[3], false),
            dtfe,
        })
    }

    /// Runs the trunk. Input is `[n, 3, h, w]` with `h`, `w` divisible
    /// by 32.
    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> PyramidFeatures {
        let t = bx.tape();
        let shape = t.shape(x);
        assert_eq!(shape.len(), 4, "backbone wants [n, 3, h, w]");
        assert_eq!(shape[1], 3, "backbone wants 3 input channels");
        assert!(
            shape[2] % 32 == 0 && shape[3] % 32 == 0,
            "input dims must be divisible by 32, got {}x{}",
            shape[2],
            shape[3],
        );
        let focused = t.space_to_depth2(x);
        let s2 = self.stem.forward(bx, focused);

        let s4 = self.csp1.forward(bx, self.down1.forward(bx, s2));
        let s8 = self.csp2.forward(bx, self.down2.forward(bx, s4));
        let s16 = self.csp3.forward(bx, self.down3.forward(bx, s8));
        let mut s32 = self.down4.forward(bx, s16);
        if let Some(spp) = &self.spp {
            s32 = spp.forward(bx, s32);
        }
        s32 = self.csp4.forward(bx, s32);
        if let Some(dtfe) = &self.dtfe {
            s32 = dtfe.forward(bx, s32);
        }

        let mut skips = BTreeMap::new();
        skips.insert("stride4".to_string(), s4);
        skips.insert("stride8".to_string(), s8);
        skips.insert("stride16".to_string(), s16);
        PyramidFeatures {
            c3: s8,
            c4: s16,
            c5: s32,
            skips,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn make_divisible_rounds_to_eights() {
        assert_eq!(make_divisible(64.0 * 0.5), 32);
        assert_eq!(make_divisible(256.0 * 0.25), 64);
        assert_eq!(make_divisible(1024.0 * 0.33), 336);
        assert_eq!(make_divisible(3.0), 8);
    }

    #[test]
    fn depth_scaling_matches_expected_counts() {
        let small = BackboneConfig {
            depth_mult: 0.33,
            ..Default::default()
        };
        assert_eq!(small.depths(), [1, 3, 3, 1]);
        let full = BackboneConfig {
            depth_mult: 1.0,
            ..Default::default()
        };
        assert_eq!(full.depths(), [3, 9, 9, 3]);
    }

    #[test]
    fn default_widths_follow_multiplier() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.widths(), [32, 64, 128, 256, 512]);
        let quarter = BackboneConfig {
            width_mult: 0.25,
            ..Default::default()
        };
        assert_eq!(quarter.widths(), [16, 32, 64, 128, 256]);
    }

    #[test]
    fn focus_rearrangement_matches_index_oracle() {
        let t = Tape::<f64>::new();
        let ramp = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| (ix[2] * 4 + ix[3]) as f64);
        let x = t.constant(ramp);
        let y = t.value(t.space_to_depth2(x));
        assert_eq!(y.shape(), &[1, 4, 2, 2]);
        // Parity blocks in order (even,even), (even,odd), (odd,even),
        // (odd,odd): output[c][i][j] = input[2i + c/2][2j + c%2] in the
        // sense of row/col parity selection.
        let expect = [
            [[0.0, 2.0], [8.0, 10.0]],
            [[1.0, 3.0], [9.0, 11.0]],
            [[4.0, 6.0], [12.0, 14.0]],
            [[5.0, 7.0], [13.0, 15.0]],
        ];
        for c in 0..4 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(y[[0, c, i, j]], expect[c][i][j], "at c={c} i={i} j={j}");
                }
            }
        }
    }

    #[test]
    fn focus_preserves_pixel_multiset() {
        let t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = ArrayD::from_shape_fn(IxDyn(&[1, 3, 4, 4]), |_| rng.gen_range(0.0..1.0));
        let x = t.constant(xv.clone());
        let y = t.value(t.space_to_depth2(x));
        assert_eq!(y.shape(), &[1, 12, 2, 2]);
        let mut a: Vec<f64> = xv.iter().cloned().collect();
        let mut b: Vec<f64> = y.iter().cloned().collect();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn focus_of_constant_is_constant() {
        let t = Tape::<f64>::new();
        let x = t.constant(ArrayD::from_elem(IxDyn(&[2, 3, 6, 6]), 0.7));
        let y = t.value(t.space_to_depth2(x));
        assert!(y.iter().all(|&v| v == 0.7));
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize, hw: usize) -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(&[n, 3, hw, hw]), |_| rng.gen_range(0.0f32..1.0))
    }

    #[test]
    fn pyramid_shapes_and_widths() {
        let cfg = BackboneConfig {
            width_mult: 0.25,
            dtfe_map: Some((5, 5)),
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(&mut store, 11, cfg).unwrap();
        let t = Tape::<f32>::new();
        let bx = Binding::frozen(&t, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t.constant(random_image(&mut rng, 2, 160));
        let f = bb.forward(&bx, x);
        assert_eq!(t.shape(f.c3), vec![2, 64, 20, 20]);
        assert_eq!(t.shape(f.c4), vec![2, 128, 10, 10]);
        assert_eq!(t.shape(f.c5), vec![2, 256, 5, 5]);
        assert_eq!(t.shape(f.skips["stride4"]), vec![2, 32, 40, 40]);
        assert_eq!(t.shape(f.skips["stride8"]), vec![2, 64, 20, 20]);
        assert_eq!(t.shape(f.skips["stride16"]), vec![2, 128, 10, 10]);
        for tx in [f.c3, f.c4, f.c5] {
            assert!(t.value(tx).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn csp_block_matches_stepwise_composition() {
        let mut store = ParamStore::<f64>::new();
        let csp = CspBlock::new(&mut store, 17, "csp", 8, 8, 2, true);
        let t = Tape::<f64>::new();
        let bx = Binding::frozen(&t, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let xv = ArrayD::from_shape_fn(IxDyn(&[1, 8, 8, 8]), |_| rng.gen_range(-1.0..1.0));
        let x = t.constant(xv);
        let fused = csp.forward(&bx, x);

        let mut main = csp.main.forward(&bx, x);
        for b in &csp.bottlenecks {
            let y1 = b.conv1.forward(&bx, main);
            let y2 = b.conv2.forward(&bx, y1);
            main = t.add(main, y2);
        }
        let side = csp.side.forward(&bx, x);
        let joined = t.concat(1, &[main, side]);
        let reference = csp.merge.forward(&bx, joined);

        let a = t.value(fused);
        let b = t.value(reference);
        for (x1, x2) in a.iter().zip(b.iter()) {
            assert_eq!(x1, x2);
        }
    }

    #[test]
    fn spp_matches_stepwise_composition_and_keeps_shape() {
        let mut store = ParamStore::<f64>::new();
        let spp = Spp::new(&mut store, 23, "spp", 8);
        let t = Tape::<f64>::new();
        let bx = Binding::frozen(&t, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let xv = ArrayD::from_shape_fn(IxDyn(&[2, 8, 5, 5]), |_| rng.gen_range(-1.0..1.0));
        let x = t.constant(xv);
        let fused = spp.forward(&bx, x);
        assert_eq!(t.shape(fused), vec![2, 8, 5, 5]);

        let reduced = spp.pre.forward(&bx, x);
        let p5 = t.max_pool2d(reduced, 5, 1, 2);
        let p9 = t.max_pool2d(reduced, 9, 1, 4);
        let p13 = t.max_pool2d(reduced, 13, 1, 6);
        let joined = t.concat(1, &[reduced, p5, p9, p13]);
        let reference = spp.post.forward(&bx, joined);
        let a = t.value(fused);
        let b = t.value(reference);
        for (x1, x2) in a.iter().zip(b.iter()) {
            assert_eq!(x1, x2);
        }
    }

    #[test]
    fn gradient_reaches_the_input() {
        let cfg = BackboneConfig {
            width_mult: 0.125,
            dtfe_map: Some((1, 1)),
            ..Default::default()
        };
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(&mut store, 31, cfg).unwrap();
        let t = Tape::<f64>::new();
        let bx = Binding::new(&t, &store);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let xv = ArrayD::from_shape_fn(IxDyn(&[1, 3, 32, 32]), |_| rng.gen_range(0.0..1.0));
        let x = t.leaf(xv);
        let f = bb.forward(&bx, x);
        let loss = t.sum_all(f.c5);
        let grads = t.backward(loss);
        let gx = grads.get(x).expect("input gradient");
        assert!(gx.iter().all(|v| v.is_finite()));
        assert!(gx.iter().any(|&v| v != 0.0), "gradient vanished");
    }
}
