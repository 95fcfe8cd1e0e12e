//! Detection layer stack: feature-mixing neck across the three pyramid
//! levels, optional self-calibrated convolution, and decoupled
//! classification/regression/objectness heads.

use crate::autograd::{Elem, Tx};
use crate::backbone::{scale_depth, CspBlock};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, ConvBlock, GroupNorm, ParamStore};
use ndarray::{ArrayD, IxDyn};

/// Prior-probability bias for classification and objectness predictors:
/// sigmoid(bias) is about 0.01 at initialization.
pub const PRIOR_LOGIT: f64 = -4.595119850134589;

/// Pooling radius of the self-calibration branch.
pub const SC_POOL_RADIUS: usize = 4;

/// Self-calibrated convolution. The input splits channelwise: one half
/// is convolved under a gate computed from its own downsampled context,
/// the other half gets a plain convolution; results are concatenated.
#[derive(Debug, Clone)]
pub struct ScConv {
    pub channels: usize,
    plain: Conv2d,
    plain_norm: GroupNorm,
    context: Conv2d,
    context_norm: GroupNorm,
    inner: Conv2d,
    inner_norm: GroupNorm,
    outer: Conv2d,
    outer_norm: GroupNorm,
}

impl ScConv {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!(
                "self-calibrated conv needs an even channel width, got {channels}"
            )));
        }
        let half = channels / 2;
        let conv = |store: &mut ParamStore<E>, part: &str| {
            Conv2d::new(store, seed, format!("{name}.{part}"), half, half, 3, 1, false)
        };
        let norm = |store: &mut ParamStore<E>, part: &str| {
            GroupNorm::new(store, seed, format!("{name}.{part}.norm"), half)
        };
        Ok(ScConv {
            channels,
            plain: conv(store, "plain"),
            plain_norm: norm(store, "plain"),
            context: conv(store, "context"),
            context_norm: norm(store, "context"),
            inner: conv(store, "inner"),
            inner_norm: norm(store, "inner"),
            outer: conv(store, "outer"),
            outer_norm: norm(store, "outer"),
        })
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let t = bx.tape();
        let shape = t.shape(x);
        assert_eq!(shape[1], self.channels, "channel width mismatch");
        let half = self.channels / 2;
        let x1 = t.slice_block(x, 1, 0, half);
        let x2 = t.slice_block(x, 1, half, half);

        // Gate from pooled context of the first half.
        let pooled = t.avg_pool_ceil(x1, SC_POOL_RADIUS);
        let ctx = self.context_norm.forward(bx, self.context.forward(bx, pooled));
        let up = t.upsample_nearest_to(ctx, shape[2], shape[3]);
        let gate = t.sigmoid(t.add(x1, up));

        let inner = self.inner_norm.forward(bx, self.inner.forward(bx, x1));
        let gated = t.mul(inner, gate);
        let y1 = t.silu(self.outer_norm.forward(bx, self.outer.forward(bx, gated)));

        let y2 = t.silu(self.plain_norm.forward(bx, self.plain.forward(bx, x2)));
        t.concat(1, &[y1, y2])
    }
}

/// Path-aggregation neck: top-down then bottom-up fusion across the three
/// levels, preserving each level's channel width.
#[derive(Debug, Clone)]
pub struct Neck {
    lateral5: ConvBlock,
    lateral4: ConvBlock,
    fuse_td4: CspBlock,
    fuse_td3: CspBlock,
    down3: ConvBlock,
    fuse_bu4: CspBlock,
    down4: ConvBlock,
    fuse_bu5: CspBlock,
}

impl Neck {
    /// `widths` are the channel counts of the stride-8/16/32 inputs.
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        widths: [usize; 3],
        depth_mult: f64,
    ) -> Self {
        let [w3, w4, w5] = widths;
        let n = scale_depth(3, depth_mult);
        let p = "neck";
        Neck {
            lateral5: ConvBlock::new(store, seed, format!("{p}.lateral5"), w5, w4, 1, 1),
            lateral4: ConvBlock::new(store, seed, format!("{p}.lateral4"), w4, w3, 1, 1),
            fuse_td4: CspBlock::new(store, seed, &format!("{p}.fuse_td4"), 2 * w4, w4, n, false),
            fuse_td3: CspBlock::new(store, seed, &format!("{p}.fuse_td3"), 2 * w3, w3, n, false),
            down3: ConvBlock::new(store, seed, format!("{p}.down3"), w3, w3, 3, 2),
            fuse_bu4: CspBlock::new(store, seed, &format!("{p}.fuse_bu4"), 2 * w3, w4, n, false),
            down4: ConvBlock::new(store, seed, format!("{p}.down4"), w4, w4, 3, 2),
            fuse_bu5: CspBlock::new(store, seed, &format!("{p}.fuse_bu5"), 2 * w4, w5, n, false),
        }
    }

    /// `(c3, c4, c5)` in, `(p3, p4, p5)` out, same strides and widths.
    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, c3: Tx, c4: Tx, c5: Tx) -> (Tx, Tx, Tx) {
        let t = bx.tape();
        let up_to = |src: Tx, like: Tx| {
            let s = t.shape(like);
            t.upsample_nearest_to(src, s[2], s[3])
        };

        let lat5 = self.lateral5.forward(bx, c5);
        let td4 = self
            .fuse_td4
            .forward(bx, t.concat(1, &[up_to(lat5, c4), c4]));
        let lat4 = self.lateral4.forward(bx, td4);
        let p3 = self
            .fuse_td3
            .forward(bx, t.concat(1, &[up_to(lat4, c3), c3]));

        let p4 = self
            .fuse_bu4
            .forward(bx, t.concat(1, &[self.down3.forward(bx, p3), lat4]));
        let p5 = self
            .fuse_bu5
            .forward(bx, t.concat(1, &[self.down4.forward(bx, p4), lat5]));
        (p3, p4, p5)
    }
}

/// Raw per-level head outputs, all `[n, _, h, w]` at the level's stride.
pub struct HeadOutput {
    /// `[n, num_classes, h, w]` class logits.
    pub cls: Tx,
    /// `[n, 4, h, w]` box regression.
    pub reg: Tx,
    /// `[n, 1, h, w]` objectness logits.
    pub obj: Tx,
    pub stride: usize,
}

#[derive(Debug, Clone)]
struct HeadLevel {
    stem: ConvBlock,
    sc: Option<ScConv>,
    cls_tower: [ConvBlock; 2],
    reg_tower: [ConvBlock; 2],
    cls_pred: Conv2d,
    reg_pred: Conv2d,
    obj_pred: Conv2d,
}

/// Decoupled detection heads over the three neck outputs. Weights are not
/// shared between levels.
#[derive(Debug, Clone)]
pub struct DetectionHeads {
    pub num_classes: usize,
    pub head_width: usize,
    levels: Vec<HeadLevel>,
}

impl DetectionHeads {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        widths: [usize; 3],
        head_width: usize,
        num_classes: usize,
        with_sc: bool,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        let mut levels = Vec::new();
        for (li, cin) in widths.into_iter().enumerate() {
            let p = format!("head{li}");
            let tower = |store: &mut ParamStore<E>, branch: &str| {
                [
                    ConvBlock::new(store, seed, format!("{p}.{branch}0"), head_width, head_width, 3, 1),
                    ConvBlock::new(store, seed, format!("{p}.{branch}1"), head_width, head_width, 3, 1),
                ]
            };
            let pred = |store: &mut ParamStore<E>, part: &str, cout: usize, prior: bool| {
                let conv =
                    Conv2d::new(store, seed, format!("{p}.{part}"), head_width, cout, 1, 1, true);
                if prior {
                    store.insert(
                        format!("{p}.{part}.bias"),
                        ArrayD::from_elem(IxDyn(&[cout]), E::from_f64(PRIOR_LOGIT)),
                    );
                }
                conv
            };
            let sc = if with_sc {
                Some(ScConv::new(store, seed, &format!("{p}.sc"), head_width)?)
            } else {
                None
            };
            levels.push(HeadLevel {
                stem: ConvBlock::new(store, seed, format!("{p}.stem"), cin, head_width, 1, 1),
                sc,
                cls_tower: tower(store, "cls"),
                reg_tower: tower(store, "reg"),
                cls_pred: pred(store, "cls_pred", num_classes, true),
                reg_pred: pred(store, "reg_pred", 4, false),
                obj_pred: pred(store, "obj_pred", 1, true),
            });
        }
        Ok(DetectionHeads {
            num_classes,
            head_width,
            levels,
        })
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, pyramid: (Tx, Tx, Tx)) -> Vec<HeadOutput> {
        let inputs = [pyramid.0, pyramid.1, pyramid.2];
        let strides = crate::detection::STRIDES;
        self.levels
            .iter()
            .zip(inputs)
            .zip(strides)
            .map(|((level, x), stride)| {
                let mut f = level.stem.forward(bx, x);
                if let Some(sc) = &level.sc {
                    f = sc.forward(bx, f);
                }
                let mut c = f;
                for blk in &level.cls_tower {
                    c = blk.forward(bx, c);
                }
                let mut r = f;
                for blk in &level.reg_tower {
                    r = blk.forward(bx, r);
                }
                HeadOutput {
                    cls: level.cls_pred.forward(bx, c),
                    reg: level.reg_pred.forward(bx, r),
                    obj: level.obj_pred.forward(bx, r),
                    stride,
                }
            })
            .collect()
    }
}
