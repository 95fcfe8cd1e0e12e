//! Spatial ops: convolution via im2col + GEMM, transposed convolution,
//! pooling, nearest upsampling, and 2x space-to-depth.
//!
//! All kernels are square (`k x k`) with symmetric zero padding. Tensors
//! are `[n, c, h, w]` in standard layout.

use super::ops::{dims4, to_std};
use super::{BackArgs, Elem, Tape, Tx};
use ndarray::{Array1, Array2, ArrayD, IxDyn};

/// Output spatial dims of a convolution with square kernel `k`.
pub fn conv2d_shape(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(stride > 0, "stride must be positive");
    assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Output spatial dims of a transposed convolution with square kernel `k`.
pub fn conv_transpose2d_shape(
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let oh = (h - 1) * stride + k;
    let ow = (w - 1) * stride + k;
    assert!(oh >= 2 * pad && ow >= 2 * pad, "padding exceeds output extent");
    (oh - 2 * pad, ow - 2 * pad)
}

/// Unfolds `[n, c, h, w]` into `[c*k*k, n*oh*ow]` patch columns.
pub(crate) fn im2col<E: Elem>(x: &ArrayD<E>, k: usize, stride: usize, pad: usize) -> Array2<E> {
    let (n, c, h, w) = dims4(x);
    let (oh, ow) = conv2d_shape(h, w, k, stride, pad);
    let xs = x.as_slice().expect("im2col input standard layout");
    let cols_w = n * oh * ow;
    let mut cols = Array2::<E>::zeros((c * k * k, cols_w));
    let cs = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((ci * k + ky) * k + kx) * cols_w;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = x_base + iy as usize * w;
                        let dst = row_base + (ni * oh + oy) * ow;
                        let off = kx as isize - pad as isize;
                        if stride == 1 {
                            let ox_lo = (-off).max(0) as usize;
                            let ox_hi = ow.min(((w as isize - off).max(0)) as usize);
                            if ox_lo < ox_hi {
                                let src_lo = (ox_lo as isize + off) as usize;
                                cs[dst + ox_lo..dst + ox_hi].copy_from_slice(
                                    &xs[src_row + src_lo..src_row + src_lo + (ox_hi - ox_lo)],
                                );
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride) as isize + off;
                                if ix >= 0 && ix < w as isize {
                                    cs[dst + ox] = xs[src_row + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `[n, c, h, w]`.
pub(crate) fn col2im<E: Elem>(
    cols: &Array2<E>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> ArrayD<E> {
    let (oh, ow) = conv2d_shape(h, w, k, stride, pad);
    let cols_w = n * oh * ow;
    assert_eq!(cols.shape(), &[c * k * k, cols_w], "col2im shape mismatch");
    let cs = cols.as_slice().expect("col2im input standard layout");
    let mut x = ArrayD::<E>::zeros(IxDyn(&[n, c, h, w]));
    let xs = x.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_base = ((ci * k + ky) * k + kx) * cols_w;
                for ni in 0..n {
                    let x_base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = x_base + iy as usize * w;
                        let src = row_base + (ni * oh + oy) * ow;
                        let off = kx as isize - pad as isize;
                        for ox in 0..ow {
                            let ix = (ox * stride) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                xs[dst_row + ix as usize] += cs[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// ndarray's GEMM fast paths can hand back F-order results when a
/// dimension is 1; reshapes and slice access need C order.
fn std2<E: Elem>(a: Array2<E>) -> Array2<E> {
    if a.is_standard_layout() {
        a
    } else {
        to_std(a.into_dyn().view()).into_dimensionality().unwrap()
    }
}

fn add_channel_bias<E: Elem>(y: &mut ArrayD<E>, b: &ArrayD<E>) {
    let (n, c, h, w) = dims4(y);
    assert_eq!(b.len(), c, "bias width mismatch");
    let bs: Vec<E> = b.iter().cloned().collect();
    let ys = y.as_slice_mut().unwrap();
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            for v in &mut ys[base..base + hw] {
                *v += bs[ci];
            }
        }
    }
}

fn sum_over_channel<E: Elem>(g: &ArrayD<E>) -> Array1<E> {
    let (n, c, h, w) = dims4(g);
    let gs = g.as_slice().unwrap();
    let mut out = Array1::<E>::zeros(c);
    let os = out.as_slice_mut().unwrap();
    let hw = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut acc = E::zero();
            for &v in &gs[base..base + hw] {
                acc += v;
            }
            os[ci] += acc;
        }
    }
    out
}

/// `[cout, n*oh*ow]` (columns ordered n-major) -> `[n, cout, oh, ow]`.
fn gemm_out_to_nchw<E: Elem>(yf: Array2<E>, n: usize, oh: usize, ow: usize) -> ArrayD<E> {
    let cout = yf.shape()[0];
    let yf = if yf.is_standard_layout() {
        yf
    } else {
        to_std(yf.into_dyn().view())
            .into_dimensionality()
            .unwrap()
    };
    let y3 = yf
        .into_shape_with_order((cout, n, oh * ow))
        .unwrap()
        .into_dyn();
    to_std(y3.view().permuted_axes(vec![1, 0, 2]))
        .into_shape_with_order(IxDyn(&[n, cout, oh, ow]))
        .unwrap()
}

/// `[n, cout, oh, ow]` -> `[cout, n*oh*ow]` (columns ordered n-major).
fn nchw_to_gemm_out<E: Elem>(y: &ArrayD<E>) -> Array2<E> {
    let (n, cout, oh, ow) = dims4(y);
    let owned;
    let y = if y.is_standard_layout() {
        y
    } else {
        owned = to_std(y.view());
        &owned
    };
    let y3 = y
        .view()
        .into_shape_with_order((n, cout, oh * ow))
        .unwrap()
        .into_dyn();
    to_std(y3.permuted_axes(vec![1, 0, 2]))
        .into_shape_with_order(IxDyn(&[cout, n * oh * ow]))
        .unwrap()
        .into_dimensionality()
        .unwrap()
}

impl<E: Elem> Tape<E> {
    /// 2-D convolution: `x [n, cin, h, w]`, `w [cout, cin, k, k]`, optional
    /// `b [cout]`, square kernel, symmetric zero padding.
    pub fn conv2d(&self, x: Tx, w: Tx, b: Option<Tx>, stride: usize, pad: usize) -> Tx {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, win) = dims4(&xv);
        let (cout, cin_w, k, k2) = dims4(&wv);
        assert_eq!(cin, cin_w, "conv2d channel mismatch");
        assert_eq!(k, k2, "conv2d kernel must be square");
        let (oh, ow) = conv2d_shape(h, win, k, stride, pad);

        let cols = im2col(&xv, k, stride, pad);
        let wm = wv
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .unwrap()
            .to_owned();
        let yf = wm.dot(&cols);
        let mut y = gemm_out_to_nchw(yf, n, oh, ow);

        let mut parents = vec![x, w];
        if let Some(bias) = b {
            add_channel_bias(&mut y, &self.value(bias));
            parents.push(bias);
        }
        let has_bias = b.is_some();
        self.op(y, parents, Box::new(move |c: BackArgs<E>| {
            let gf = nchw_to_gemm_out(c.grad);
            let wv = c.parents[1];
            let wm = wv
                .view()
                .into_shape_with_order((cout, cin * k * k))
                .unwrap();
            let dx = if c.needs[0] {
                let dcols = std2(
                    to_std(wm.t().into_dyn())
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap()
                        .dot(&gf),
                );
                col2im(&dcols, n, cin, h, win, k, stride, pad)
            } else {
                ArrayD::zeros(IxDyn(&[0]))
            };
            let dw = std2(gf.dot(&cols.t()))
                .into_shape_with_order(IxDyn(&[cout, cin, k, k]))
                .unwrap()
                .into_dyn();
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(sum_over_channel(c.grad).into_dyn());
            }
            out
        }))
    }

    /// Transposed 2-D convolution: `x [n, cin, h, w]`, `w [cin, cout, k, k]`,
    /// output `[(h-1)*stride + k - 2*pad]` per spatial dim.
    pub fn conv_transpose2d(&self, x: Tx, w: Tx, b: Option<Tx>, stride: usize, pad: usize) -> Tx {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, cin, h, win) = dims4(&xv);
        let (cin_w, cout, k, k2) = dims4(&wv);
        assert_eq!(cin, cin_w, "conv_transpose2d channel mismatch");
        assert_eq!(k, k2, "conv_transpose2d kernel must be square");
        let (oh, ow) = conv_transpose2d_shape(h, win, k, stride, pad);
        {
            let (vh, vw) = conv2d_shape(oh, ow, k, stride, pad);
            assert_eq!((vh, vw), (h, win), "transposed-conv geometry is not invertible");
        }

        // x as [cin, n*h*w] with columns ordered n-major.
        let xf = nchw_to_gemm_out(&xv);
        let wm = wv
            .view()
            .into_shape_with_order((cin, cout * k * k))
            .unwrap()
            .to_owned();
        let cols = std2(
            to_std(wm.t().into_dyn())
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .dot(&xf),
        );
        let mut y = col2im(&cols, n, cout, oh, ow, k, stride, pad);

        let mut parents = vec![x, w];
        if let Some(bias) = b {
            add_channel_bias(&mut y, &self.value(bias));
            parents.push(bias);
        }
        let has_bias = b.is_some();
        self.op(y, parents, Box::new(move |c: BackArgs<E>| {
            let cols_g = im2col(c.grad, k, stride, pad);
            let wv = c.parents[1];
            let wm = wv
                .view()
                .into_shape_with_order((cin, cout * k * k))
                .unwrap();
            let dx = if c.needs[0] {
                let dxf = wm.dot(&cols_g);
                gemm_out_to_nchw(dxf, n, h, win)
            } else {
                ArrayD::zeros(IxDyn(&[0]))
            };
            let dw = std2(xf.dot(&cols_g.t()))
                .into_shape_with_order(IxDyn(&[cin, cout, k, k]))
                .unwrap()
                .into_dyn();
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(sum_over_channel(c.grad).into_dyn());
            }
            out
        }))
    }

    /// Max pooling with square window; padded cells never win. The gradient
    /// routes to the first maximal element in scan order.
    pub fn max_pool2d(&self, x: Tx, k: usize, stride: usize, pad: usize) -> Tx {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        let (oh, ow) = conv2d_shape(h, w, k, stride, pad);
        let xs = xv.as_slice().unwrap();
        let mut y = ArrayD::<E>::zeros(IxDyn(&[n, c, oh, ow]));
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let ys = y.as_slice_mut().unwrap();
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = E::neg_infinity();
                            let mut best_idx = u32::MAX;
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let idx = base + iy as usize * w + ix as usize;
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        best_idx = idx as u32;
                                    }
                                }
                            }
                            assert!(best_idx != u32::MAX, "max_pool2d window fully out of bounds");
                            ys[oi] = best;
                            argmax[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            }
        }
        self.op(y, vec![x], Box::new(move |c: BackArgs<E>| {
            let mut dx = ArrayD::<E>::zeros(c.parents[0].raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            let gs = c.grad.as_slice().unwrap();
            for (gi, &src) in gs.iter().zip(argmax.iter()) {
                ds[src as usize] += *gi;
            }
            vec![dx]
        }))
    }

    /// Average pooling with window and stride `r`, ceil-mode output dims;
    /// edge windows are clipped and averaged over their actual size.
    pub fn avg_pool_ceil(&self, x: Tx, r: usize) -> Tx {
        assert!(r > 0, "pool window must be positive");
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        let oh = h.div_ceil(r);
        let ow = w.div_ceil(r);
        let xs = xv.as_slice().unwrap();
        let mut y = ArrayD::<E>::zeros(IxDyn(&[n, c, oh, ow]));
        {
            let ys = y.as_slice_mut().unwrap();
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let y0 = oy * r;
                        let y1 = (y0 + r).min(h);
                        for ox in 0..ow {
                            let x0 = ox * r;
                            let x1 = (x0 + r).min(w);
                            let mut acc = E::zero();
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    acc += xs[base + iy * w + ix];
                                }
                            }
                            let count = E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            ys[oi] = acc / count;
                            oi += 1;
                        }
                    }
                }
            }
        }
        self.op(y, vec![x], Box::new(move |cx: BackArgs<E>| {
            let mut dx = ArrayD::<E>::zeros(cx.parents[0].raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            let gs = cx.grad.as_slice().unwrap();
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        let y0 = oy * r;
                        let y1 = (y0 + r).min(h);
                        for ox in 0..ow {
                            let x0 = ox * r;
                            let x1 = (x0 + r).min(w);
                            let count = E::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            let share = gs[oi] / count;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    ds[base + iy * w + ix] += share;
                                }
                            }
                            oi += 1;
                        }
                    }
                }
            }
            vec![dx]
        }))
    }

    /// Nearest-neighbour resample to an explicit `(oh, ow)`; source index is
    /// `floor(dst * src_extent / dst_extent)` per axis.
    pub fn upsample_nearest_to(&self, x: Tx, oh: usize, ow: usize) -> Tx {
        assert!(oh > 0 && ow > 0, "target dims must be positive");
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        let xs = xv.as_slice().unwrap();
        let y_map: Vec<usize> = (0..oh).map(|oy| oy * h / oh).collect();
        let x_map: Vec<usize> = (0..ow).map(|ox| ox * w / ow).collect();
        let mut y = ArrayD::<E>::zeros(IxDyn(&[n, c, oh, ow]));
        {
            let ys = y.as_slice_mut().unwrap();
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for &iy in &y_map {
                        let row = base + iy * w;
                        for &ix in &x_map {
                            ys[oi] = xs[row + ix];
                            oi += 1;
                        }
                    }
                }
            }
        }
        self.op(y, vec![x], Box::new(move |cx: BackArgs<E>| {
            let mut dx = ArrayD::<E>::zeros(cx.parents[0].raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            let gs = cx.grad.as_slice().unwrap();
            let mut oi = 0usize;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for &iy in &y_map {
                        let row = base + iy * w;
                        for &ix in &x_map {
                            ds[row + ix] += gs[oi];
                            oi += 1;
                        }
                    }
                }
            }
            vec![dx]
        }))
    }

    /// 2x space-to-depth: `[n, c, h, w]` (even `h`, `w`) -> `[n, 4c, h/2, w/2]`
    /// with the four pixel-parity sub-grids stacked along channels in the
    /// order (even,even), (even,odd), (odd,even), (odd,odd).
    pub fn space_to_depth2(&self, x: Tx) -> Tx {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        assert!(h % 2 == 0 && w % 2 == 0, "space_to_depth2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let xs = xv.as_slice().unwrap();
        let mut y = ArrayD::<E>::zeros(IxDyn(&[n, 4 * c, oh, ow]));
        {
            let ys = y.as_slice_mut().unwrap();
            for ni in 0..n {
                for (block, (py, px)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    for ci in 0..c {
                        let src_base = (ni * c + ci) * h * w;
                        let dst_base = ((ni * 4 + block) * c + ci) * oh * ow;
                        for oy in 0..oh {
                            let src_row = src_base + (2 * oy + py) * w;
                            let dst_row = dst_base + oy * ow;
                            for ox in 0..ow {
                                ys[dst_row + ox] = xs[src_row + 2 * ox + px];
                            }
                        }
                    }
                }
            }
        }
        self.op(y, vec![x], Box::new(move |cx: BackArgs<E>| {
            let mut dx = ArrayD::<E>::zeros(cx.parents[0].raw_dim());
            let ds = dx.as_slice_mut().unwrap();
            let gs = cx.grad.as_slice().unwrap();
            for ni in 0..n {
                for (block, (py, px)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                    for ci in 0..c {
                        let dst_base = (ni * c + ci) * h * w;
                        let src_base = ((ni * 4 + block) * c + ci) * oh * ow;
                        for oy in 0..oh {
                            let dst_row = dst_base + (2 * oy + py) * w;
                            let src_row = src_base + oy * ow;
                            for ox in 0..ow {
                                ds[dst_row + 2 * ox + px] += gs[src_row + ox];
                            }
                        }
                    }
                }
            }
            vec![dx]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<E: Elem>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<E> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| E::from_f64(rng.gen_range(-1.0..1.0)))
    }

    /// Direct quadruple-loop convolution used as an oracle.
    fn conv2d_naive(
        x: &ArrayD<f64>,
        w: &ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> ArrayD<f64> {
        let (n, cin, h, win) = dims4(x);
        let (cout, _, k, _) = dims4(w);
        let (oh, ow) = conv2d_shape(h, win, k, stride, pad);
        let mut y = ArrayD::<f64>::zeros(IxDyn(&[n, cout, oh, ow]));
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < win as isize {
                                        acc += x[[ni, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        y[[ni, co, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv2d_matches_naive_for_both_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let t = Tape::<f64>::new();
            let xv = random::<f64>(&mut rng, &[2, 3, 7, 6]);
            let wv = random::<f64>(&mut rng, &[4, 3, 3, 3]);
            let x = t.leaf(xv.clone());
            let w = t.leaf(wv.clone());
            let y = t.conv2d(x, w, None, stride, pad);
            let want = conv2d_naive(&xv, &wv, stride, pad);
            let got = t.value(y);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "conv mismatch: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_bias_shifts_every_output_cell() {
        let t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::zeros(IxDyn(&[1, 1, 4, 4])));
        let w = t.leaf(ArrayD::zeros(IxDyn(&[2, 1, 3, 3])));
        let b = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.25, -1.5]).unwrap(),
        );
        let y = t.conv2d(x, w, Some(b), 1, 1);
        let yv = t.value(y);
        assert!(yv
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 0)
            .iter()
            .all(|&v| v == 0.25));
        assert!(yv
            .index_axis(ndarray::Axis(0), 0)
            .index_axis(ndarray::Axis(0), 1)
            .iter()
            .all(|&v| v == -1.5));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x; w), y> must equal <x, conv_t(y; w)> for matched geometry.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &(stride, pad, hw) in &[(1usize, 1usize, 8usize), (2, 1, 7)] {
            let t = Tape::<f64>::new();
            let xv = random::<f64>(&mut rng, &[2, 3, hw, hw]);
            let x = t.leaf(xv.clone());
            let wv = random::<f64>(&mut rng, &[4, 3, 3, 3]); // conv layout [cout, cin, k, k]
            let w = t.leaf(wv.clone());
            let cy = t.conv2d(x, w, None, stride, pad);
            let yv = random::<f64>(&mut rng, &t.shape(cy));
            let lhs: f64 = (&t.value(cy) * &yv).sum();

            // Transposed layout is [cin_t = cout, cout_t = cin, k, k].
            let wt = t.leaf(wv.clone());
            let y = t.leaf(yv.clone());
            let xt = t.conv_transpose2d(y, wt, None, stride, pad);
            let rhs: f64 = (&t.value(xt) * &xv).sum();
            assert!(
                (lhs - rhs).abs() < 1e-9,
                "adjoint identity failed: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_transpose_doubles_spatial_dims_with_k4_s2_p1() {
        assert_eq!(conv_transpose2d_shape(5, 5, 4, 2, 1), (10, 10));
        assert_eq!(conv_transpose2d_shape(20, 20, 4, 2, 1), (40, 40));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let t = Tape::<f64>::new();
        let x = t.leaf(
            ArrayD::from_shape_vec(
                IxDyn(&[1, 1, 2, 2]),
                vec![1.0, 5.0, 3.0, 2.0],
            )
            .unwrap(),
        );
        let y = t.max_pool2d(x, 2, 2, 0);
        assert_eq!(t.value(y).iter().cloned().collect::<Vec<_>>(), vec![5.0]);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        let gx = g.get(x).unwrap();
        assert_eq!(
            gx.iter().cloned().collect::<Vec<_>>(),
            vec![0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn same_shape_max_pool_keeps_dims() {
        let t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t.leaf(random::<f64>(&mut rng, &[1, 2, 5, 5]));
        for &k in &[5usize, 9, 13] {
            let y = t.max_pool2d(x, k, 1, k / 2);
            assert_eq!(t.shape(y), vec![1, 2, 5, 5]);
        }
    }

    #[test]
    fn avg_pool_ceil_handles_ragged_edges() {
        // 5x5 with r=4: windows of 16, 4, 4, 1 elements.
        let t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::ones(IxDyn(&[1, 1, 5, 5])));
        let y = t.avg_pool_ceil(x, 4);
        assert_eq!(t.shape(y), vec![1, 1, 2, 2]);
        for &v in t.value(y).iter() {
            assert!((v - 1.0).abs() < 1e-12, "mean of ones must be one, got {v}");
        }
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        let gx = g.get(x).unwrap();
        // Corner cell (4,4) forms its own window: gradient exactly 1.
        assert!((gx[[0, 0, 4, 4]] - 1.0).abs() < 1e-12);
        // Interior cells of the 4x4 window share 1/16 each.
        assert!((gx[[0, 0, 0, 0]] - 1.0 / 16.0).abs() < 1e-12);
    }

    #[test]
    fn upsample_nearest_replicates_pixels() {
        let t = Tape::<f64>::new();
        let x = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = t.upsample_nearest_to(x, 4, 4);
        let yv = t.value(y);
        assert_eq!(yv[[0, 0, 0, 0]], 1.0);
        assert_eq!(yv[[0, 0, 1, 1]], 1.0);
        assert_eq!(yv[[0, 0, 0, 2]], 2.0);
        assert_eq!(yv[[0, 0, 3, 3]], 4.0);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        // Each source pixel feeds a 2x2 block.
        assert!(g.get(x).unwrap().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn upsample_to_odd_target_from_five() {
        // 5 -> 10 exact doubling; 5 -> 7 still covers all rows.
        let t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = t.leaf(random::<f64>(&mut rng, &[1, 1, 5, 5]));
        let y = t.upsample_nearest_to(x, 10, 10);
        let xv = t.value(x);
        let yv = t.value(y);
        for oy in 0..10 {
            for ox in 0..10 {
                assert_eq!(yv[[0, 0, oy, ox]], xv[[0, 0, oy / 2, ox / 2]]);
            }
        }
    }

    #[test]
    fn space_to_depth_orders_parity_blocks() {
        let t = Tape::<f64>::new();
        // 1x1x4x4 with values row*10 + col.
        let x = t.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 4]), |ix| {
            (ix[2] * 10 + ix[3]) as f64
        }));
        let y = t.space_to_depth2(x);
        assert_eq!(t.shape(y), vec![1, 4, 2, 2]);
        let yv = t.value(y);
        // Block 0: even rows, even cols.
        assert_eq!(yv[[0, 0, 0, 0]], 0.0);
        assert_eq!(yv[[0, 0, 1, 1]], 22.0);
        // Block 1: even rows, odd cols.
        assert_eq!(yv[[0, 1, 0, 0]], 1.0);
        // Block 2: odd rows, even cols.
        assert_eq!(yv[[0, 2, 0, 0]], 10.0);
        // Block 3: odd rows, odd cols.
        assert_eq!(yv[[0, 3, 1, 1]], 33.0);
    }

    #[test]
    fn space_to_depth_backward_restores_layout() {
        let t = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = t.leaf(random::<f64>(&mut rng, &[2, 3, 6, 8]));
        let y = t.space_to_depth2(x);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        // Bijection: every input pixel is used exactly once.
        assert!(g.get(x).unwrap().iter().all(|&v| v == 1.0));
    }
}
