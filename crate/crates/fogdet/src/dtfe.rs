//! Deepest-stage feature enhancement: a dynamic feature transformation
//! network (two deformable convolutions, each with its own offset
//! predictor) followed by one pre-norm transformer block over the spatial
//! positions as tokens.

use crate::autograd::{BackArgs, Elem, Tape, Tx};
use crate::error::{Error, Result};
use crate::nn::{Binding, Conv2d, GroupNorm, Init, Linear, ParamStore};
use ndarray::{Array2, ArrayD, IxDyn};

/// Bilinear interpolation of all channels of a `[c, h, w]` map at a
/// fractional position, with zero padding outside the bounds.
pub fn bilinear_sample<E: Elem>(map: &ArrayD<E>, y: f64, x: f64) -> Vec<E> {
    assert_eq!(map.ndim(), 3, "bilinear_sample wants [c, h, w]");
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let ms = map.as_slice().expect("standard layout");
    let y0 = y.floor();
    let x0 = x.floor();
    let ay = E::from_f64(y - y0);
    let ax = E::from_f64(x - x0);
    let one = E::one();
    let fetch = |ci: usize, iy: i64, ix: i64| -> E {
        if iy < 0 || iy >= h as i64 || ix < 0 || ix >= w as i64 {
            E::zero()
        } else {
            ms[ci * h * w + iy as usize * w + ix as usize]
        }
    };
    let (iy0, ix0) = (y0 as i64, x0 as i64);
    (0..c)
        .map(|ci| {
            let v00 = fetch(ci, iy0, ix0);
            let v01 = fetch(ci, iy0, ix0 + 1);
            let v10 = fetch(ci, iy0 + 1, ix0);
            let v11 = fetch(ci, iy0 + 1, ix0 + 1);
            (one - ay) * ((one - ax) * v00 + ax * v01) + ay * ((one - ax) * v10 + ax * v11)
        })
        .collect()
}

/// Neighborhood of one fractional sample: corner indices and weights.
struct Corners {
    iy0: i64,
    ix0: i64,
    ay: f64,
    ax: f64,
}

impl Corners {
    fn at(py: f64, px: f64) -> Corners {
        let y0 = py.floor();
        let x0 = px.floor();
        Corners {
            iy0: y0 as i64,
            ix0: x0 as i64,
            ay: py - y0,
            ax: px - x0,
        }
    }

    fn weights(&self) -> [f64; 4] {
        let (ay, ax) = (self.ay, self.ax);
        [
            (1.0 - ay) * (1.0 - ax),
            (1.0 - ay) * ax,
            ay * (1.0 - ax),
            ay * ax,
        ]
    }

    fn offsets(&self) -> [(i64, i64); 4] {
        [
            (self.iy0, self.ix0),
            (self.iy0, self.ix0 + 1),
            (self.iy0 + 1, self.ix0),
            (self.iy0 + 1, self.ix0 + 1),
        ]
    }
}

fn in_bounds(iy: i64, ix: i64, h: usize, w: usize) -> bool {
    iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64
}

/// Builds deformed patch columns `[cin*k*k, n*h*w]`: tap `t = ky*k + kx`
/// of output pixel `(oy, ox)` samples the input at
/// `(oy + ky - pad + dy, ox + kx - pad + dx)` bilinearly, where `(dy, dx)`
/// come from offset channels `2t` and `2t + 1`.
fn deform_cols<E: Elem>(x: &ArrayD<E>, offsets: &ArrayD<E>, k: usize) -> Array2<E> {
    let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let pad = (k / 2) as i64;
    let kk = k * k;
    let xs = x.as_slice().unwrap();
    let os = offsets.as_slice().unwrap();
    let hw = h * w;
    let mut cols = Array2::<E>::zeros((cin * kk, n * hw));
    let cs = cols.as_slice_mut().unwrap();
    let cols_w = n * hw;
    for ni in 0..n {
        for oy in 0..h {
            for ox in 0..w {
                let col = (ni * h + oy) * w + ox;
                for t in 0..kk {
                    let (ky, kx) = (t / k, t % k);
                    let off_base = (ni * 2 * kk) * hw + oy * w + ox;
                    let dy = os[off_base + 2 * t * hw].to_f64();
                    let dx = os[off_base + (2 * t + 1) * hw].to_f64();
                    let py = oy as f64 + ky as f64 - pad as f64 + dy;
                    let px = ox as f64 + kx as f64 - pad as f64 + dx;
                    let cr = Corners::at(py, px);
                    let ws = cr.weights();
                    let pts = cr.offsets();
                    for ci in 0..cin {
                        let x_base = (ni * cin + ci) * hw;
                        let mut acc = E::zero();
                        for (wgt, (iy, ix)) in ws.iter().zip(pts.iter()) {
                            if *wgt != 0.0 && in_bounds(*iy, *ix, h, w) {
                                acc += E::from_f64(*wgt)
                                    * xs[x_base + *iy as usize * w + *ix as usize];
                            }
                        }
                        cs[(ci * kk + t) * cols_w + col] = acc;
                    }
                }
            }
        }
    }
    cols
}

/// Deformable convolution (stride 1, same padding `k/2`), differentiable
/// w.r.t. input, weights, bias, and offsets.
///
/// Shapes: `x [n, cin, h, w]`, `w [cout, cin, k, k]`, offsets
/// `[n, 2*k*k, h, w]` with per-tap `(dy, dx)` channel pairs.
pub fn deform_conv2d<E: Elem>(tape: &Tape<E>, x: Tx, w: Tx, b: Option<Tx>, offsets: Tx) -> Tx {
    let xv = crate::autograd::to_std(tape.value(x).view());
    let wv = crate::autograd::to_std(tape.value(w).view());
    let ov = crate::autograd::to_std(tape.value(offsets).view());
    let (n, cin, h, win) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    let (cout, cin_w, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
    assert_eq!(cin, cin_w, "deform_conv2d channel mismatch");
    assert_eq!(k, k2, "deform_conv2d kernel must be square");
    assert_eq!(k % 2, 1, "deform_conv2d kernel must be odd");
    assert_eq!(
        ov.shape(),
        &[n, 2 * k * k, h, win],
        "offset tensor must be [n, 2*k*k, h, w]"
    );
    let kk = k * k;
    let hw = h * win;

    let cols = deform_cols(&xv, &ov, k);
    let wm = wv
        .view()
        .into_shape_with_order((cout, cin * kk))
        .unwrap()
        .to_owned();
    let yf = crate::autograd::to_std(wm.dot(&cols).into_dyn().view());
    let y3 = yf.into_shape_with_order((cout, n, hw)).unwrap().into_dyn();
    let mut y = crate::autograd::to_std(y3.view().permuted_axes(vec![1, 0, 2]))
        .into_shape_with_order(IxDyn(&[n, cout, h, win]))
        .unwrap();

    let mut parents = vec![x, w, offsets];
    if let Some(bias) = b {
        let bv = tape.value(bias);
        assert_eq!(bv.len(), cout, "bias width mismatch");
        let bslice: Vec<E> = bv.iter().cloned().collect();
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for co in 0..cout {
                let base = (ni * cout + co) * hw;
                for v in &mut ys[base..base + hw] {
                    *v += bslice[co];
                }
            }
        }
        parents.push(bias);
    }
    let has_bias = b.is_some();

    tape.op(y, parents, Box::new(move |c: BackArgs<E>| {
        let grad = crate::autograd::to_std(c.grad.view());
        // [n, cout, h, w] -> [cout, n*h*w].
        let g3 = grad
            .view()
            .into_shape_with_order((n, cout, hw))
            .unwrap()
            .into_dyn();
        let gf = crate::autograd::to_std(g3.permuted_axes(vec![1, 0, 2]))
            .into_shape_with_order(IxDyn(&[cout, n * hw]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();

        let wv = c.parents[1];
        let wm = wv.view().into_shape_with_order((cout, cin * kk)).unwrap();
        let dw = crate::autograd::to_std(gf.dot(&cols.t()).into_dyn().view())
            .into_shape_with_order(IxDyn(&[cout, cin, k, k]))
            .unwrap();
        let wm_t = crate::autograd::to_std(wm.t().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let dcols = crate::autograd::to_std(wm_t.dot(&gf).into_dyn().view());
        let dcs = dcols.as_slice().unwrap();
        let cols_w = n * hw;

        let xv = crate::autograd::to_std(c.parents[0].view());
        let xs = xv.as_slice().unwrap();
        let ov = crate::autograd::to_std(c.parents[2].view());
        let os = ov.as_slice().unwrap();
        let pad = (k / 2) as i64;

        let mut dx = ArrayD::<E>::zeros(xv.raw_dim());
        let mut doff = ArrayD::<E>::zeros(ov.raw_dim());
        {
            let dxs = dx.as_slice_mut().unwrap();
            let dos = doff.as_slice_mut().unwrap();
            for ni in 0..n {
                for oy in 0..h {
                    for ox in 0..win {
                        let col = (ni * h + oy) * win + ox;
                        for t in 0..kk {
                            let (ky, kx) = (t / k, t % k);
                            let off_base = (ni * 2 * kk) * hw + oy * win + ox;
                            let dy = os[off_base + 2 * t * hw].to_f64();
                            let dxo = os[off_base + (2 * t + 1) * hw].to_f64();
                            let py = oy as f64 + ky as f64 - pad as f64 + dy;
                            let px = ox as f64 + kx as f64 - pad as f64 + dxo;
                            let cr = Corners::at(py, px);
                            let ws = cr.weights();
                            let pts = cr.offsets();
                            let (ay, ax) = (E::from_f64(cr.ay), E::from_f64(cr.ax));
                            let one = E::one();
                            let mut gpy = E::zero();
                            let mut gpx = E::zero();
                            for ci in 0..cin {
                                let g = dcs[(ci * kk + t) * cols_w + col];
                                if g == E::zero() {
                                    continue;
                                }
                                let x_base = (ni * cin + ci) * hw;
                                let fetch = |iy: i64, ix: i64| -> E {
                                    if in_bounds(iy, ix, h, win) {
                                        xs[x_base + iy as usize * win + ix as usize]
                                    } else {
                                        E::zero()
                                    }
                                };
                                for (wgt, (iy, ix)) in ws.iter().zip(pts.iter()) {
                                    if *wgt != 0.0 && in_bounds(*iy, *ix, h, win) {
                                        dxs[x_base + *iy as usize * win + *ix as usize] +=
                                            g * E::from_f64(*wgt);
                                    }
                                }
                                let v00 = fetch(pts[0].0, pts[0].1);
                                let v01 = fetch(pts[1].0, pts[1].1);
                                let v10 = fetch(pts[2].0, pts[2].1);
                                let v11 = fetch(pts[3].0, pts[3].1);
                                gpy += g * ((v10 - v00) * (one - ax) + (v11 - v01) * ax);
                                gpx += g * ((v01 - v00) * (one - ay) + (v11 - v10) * ay);
                            }
                            dos[off_base + 2 * t * hw] += gpy;
                            dos[off_base + (2 * t + 1) * hw] += gpx;
                        }
                    }
                }
            }
        }

        let mut out = vec![dx, dw, doff];
        if has_bias {
            let mut db = ArrayD::<E>::zeros(IxDyn(&[cout]));
            {
                let dbs = db.as_slice_mut().unwrap();
                let gs = grad.as_slice().unwrap();
                for ni in 0..n {
                    for co in 0..cout {
                        let base = (ni * cout + co) * hw;
                        let mut acc = E::zero();
                        for &v in &gs[base..base + hw] {
                            acc += v;
                        }
                        dbs[co] += acc;
                    }
                }
            }
            out.push(db);
        }
        out
    }))
}

/// One deformable conv layer: a zero-initialized plain conv predicts the
/// per-tap offsets, so the first forward equals a standard convolution.
#[derive(Debug, Clone)]
pub struct DeformLayer {
    pub name: String,
    pub offset_conv: Conv2d,
    pub k: usize,
    pub norm: GroupNorm,
}

impl DeformLayer {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: impl Into<String>,
        channels: usize,
        k: usize,
    ) -> Self {
        let name = name.into();
        let offset_conv = Conv2d::new(
            store,
            seed,
            format!("{name}.offset"),
            channels,
            2 * k * k,
            3,
            1,
            true,
        );
        // Start from plain convolution: zero offsets.
        *store.get_mut(&format!("{name}.offset.weight")).unwrap() =
            ArrayD::zeros(IxDyn(&[2 * k * k, channels, 3, 3]));
        store.add(
            format!("{name}.main.weight"),
            &[channels, channels, k, k],
            Init::KaimingUniform {
                fan_in: channels * k * k,
            },
            seed,
        );
        store.add(format!("{name}.main.bias"), &[channels], Init::Const(0.0), seed);
        let norm = GroupNorm::new(store, seed, format!("{name}.norm"), channels);
        DeformLayer {
            name,
            offset_conv,
            k,
            norm,
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let t = bx.tape();
        let offsets = self.offset_conv.forward(bx, x);
        let w = bx.param(&format!("{}.main.weight", self.name));
        let b = bx.param(&format!("{}.main.bias", self.name));
        let y = deform_conv2d(t, x, w, Some(b), offsets);
        let y = self.norm.forward(bx, y);
        t.silu(y)
    }
}

/// Dynamic feature transformation network: two deformable conv layers.
#[derive(Debug, Clone)]
pub struct Dft {
    pub layer1: DeformLayer,
    pub layer2: DeformLayer,
}

impl Dft {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        Dft {
            layer1: DeformLayer::new(store, seed, format!("{name}.dft1"), channels, k),
            layer2: DeformLayer::new(store, seed, format!("{name}.dft2"), channels, k),
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let y = self.layer1.forward(bx, x);
        self.layer2.forward(bx, y)
    }
}

/// Sizing of the transformer enhancement block.
#[derive(Debug, Clone, Copy)]
pub struct TfeConfig {
    pub channels: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl TfeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "attention width {} not divisible by head count {}",
                self.channels, self.heads
            )));
        }
        if self.map_h == 0 || self.map_w == 0 {
            return Err(Error::Config("attention map dims must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate values of one transformer block forward, exposed so tests
/// can inspect the attention matrix and value path.
pub struct TfeParts {
    /// `[n*heads, tokens, tokens]` attention probabilities.
    pub attn: Tx,
    /// `[n*heads, tokens, head_dim]` value vectors.
    pub v: Tx,
    /// `[n*heads, tokens, head_dim]` attention-mixed values.
    pub mixed: Tx,
    /// `[n, c, h, w]` block output.
    pub out: Tx,
}

/// One pre-norm transformer block over spatial tokens with a learned
/// positional table sized to the configured map resolution; other map
/// sizes are rejected.
#[derive(Debug, Clone)]
pub struct TfeBlock {
    pub name: String,
    pub cfg: TfeConfig,
    qkv: Linear,
    proj: Linear,
    fc1: Linear,
    fc2: Linear,
}

impl TfeBlock {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: impl Into<String>,
        cfg: TfeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let c = cfg.channels;
        let tokens = cfg.map_h * cfg.map_w;
        store.add(
            format!("{name}.pos"),
            &[tokens, c],
            Init::Uniform {
                lo: -0.02,
                hi: 0.02,
            },
            seed,
        );
        for part in ["ln1", "ln2"] {
            store.add(format!("{name}.{part}.gamma"), &[c], Init::Const(1.0), seed);
            store.add(format!("{name}.{part}.beta"), &[c], Init::Const(0.0), seed);
        }
        let qkv = Linear::new(store, seed, format!("{name}.qkv"), c, 3 * c, true);
        let proj = Linear::new(store, seed, format!("{name}.proj"), c, c, true);
        let hidden = c * cfg.mlp_ratio;
        let fc1 = Linear::new(store, seed, format!("{name}.fc1"), c, hidden, true);
        let fc2 = Linear::new(store, seed, format!("{name}.fc2"), hidden, c, true);
        Ok(TfeBlock {
            name,
            cfg,
            qkv,
            proj,
            fc1,
            fc2,
        })
    }

    fn layer_norm<E: Elem>(&self, bx: &Binding<'_, E>, which: &str, x: Tx) -> Tx {
        let gamma = bx.param(&format!("{}.{which}.gamma", self.name));
        let beta = bx.param(&format!("{}.{which}.beta", self.name));
        bx.tape().layer_norm(x, gamma, beta, 1e-5)
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        self.forward_parts(bx, x).out
    }

    pub fn forward_parts<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> TfeParts {
        let t = bx.tape();
        let shape = t.shape(x);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.cfg.channels, "attention channel width mismatch");
        assert_eq!(
            (h, w),
            (self.cfg.map_h, self.cfg.map_w),
            "attention block configured for {}x{} maps, got {h}x{w}",
            self.cfg.map_h,
            self.cfg.map_w,
        );
        let tokens = h * w;
        let heads = self.cfg.heads;
        let hd = c / heads;

        // [n, c, h, w] -> [n, tokens, c] plus positional table.
        let flat = t.reshape(x, &[n, c, tokens]);
        let toks = t.permute(flat, &[0, 2, 1]);
        let pos = bx.param(&format!("{}.pos", self.name));
        let toks = t.add_token_table(toks, pos);

        // Attention branch (pre-norm).
        let normed = self.layer_norm(bx, "ln1", toks);
        let qkv_in = t.reshape(normed, &[n * tokens, c]);
        let qkv = self.qkv.forward(bx, qkv_in); // [n*tokens, 3c]
        let to_heads = |part: Tx| -> Tx {
            // [n*tokens, c] -> [n*heads, tokens, hd]
            let r = t.reshape(part, &[n, tokens, heads, hd]);
            let p = t.permute(r, &[0, 2, 1, 3]);
            t.reshape(p, &[n * heads, tokens, hd])
        };
        let q = to_heads(t.slice_block(qkv, 1, 0, c));
        let k = to_heads(t.slice_block(qkv, 1, c, c));
        let v = to_heads(t.slice_block(qkv, 1, 2 * c, c));

        let kt = t.permute(k, &[0, 2, 1]);
        let logits = t.bmm(q, kt);
        let scaled = t.scale(logits, E::from_f64(1.0 / (hd as f64).sqrt()));
        let attn = t.softmax_last(scaled);
        let mixed = t.bmm(attn, v); // [n*heads, tokens, hd]

        // Back to [n*tokens, c], project, residual.
        let m = t.reshape(mixed, &[n, heads, tokens, hd]);
        let m = t.permute(m, &[0, 2, 1, 3]);
        let m = t.reshape(m, &[n * tokens, c]);
        let projected = self.proj.forward(bx, m);
        let projected = t.reshape(projected, &[n, tokens, c]);
        let after_attn = t.add(toks, projected);

        // MLP branch (pre-norm).
        let normed2 = self.layer_norm(bx, "ln2", after_attn);
        let mlp_in = t.reshape(normed2, &[n * tokens, c]);
        let hidden = self.fc1.forward(bx, mlp_in);
        let hidden = t.silu(hidden);
        let mlp_out = self.fc2.forward(bx, hidden);
        let mlp_out = t.reshape(mlp_out, &[n, tokens, c]);
        let after_mlp = t.add(after_attn, mlp_out);

        // [n, tokens, c] -> [n, c, h, w].
        let back = t.permute(after_mlp, &[0, 2, 1]);
        let out = t.reshape(back, &[n, c, h, w]);
        TfeParts {
            attn,
            v,
            mixed,
            out,
        }
    }
}

/// DFT followed by TFE; spatial and channel dims preserved.
#[derive(Debug, Clone)]
pub struct Dtfe {
    pub dft: Dft,
    pub tfe: TfeBlock,
}

impl Dtfe {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: &str,
        cfg: TfeConfig,
        deform_kernel: usize,
    ) -> Result<Self> {
        Ok(Dtfe {
            dft: Dft::new(store, seed, name, cfg.channels, deform_kernel),
            tfe: TfeBlock::new(store, seed, format!("{name}.tfe"), cfg)?,
        })
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let y = self.dft.forward(bx, x);
        self.tfe.forward(bx, y)
    }
}
