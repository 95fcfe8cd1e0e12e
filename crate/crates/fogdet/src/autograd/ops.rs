//! Elementwise, linear-algebra, normalization and loss primitives.

use super::{BackArgs, Elem, Tape, Tx};
use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix2, Slice, Zip};

pub(crate) fn to_std<E: Elem>(v: ArrayViewD<'_, E>) -> ArrayD<E> {
    v.as_standard_layout().to_owned()
}

fn sigmoid_scalar<E: Elem>(z: E) -> E {
    let one = E::one();
    if z >= E::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    }
}

impl<E: Elem> Tape<E> {
    pub fn add(&self, a: Tx, b: Tx) -> Tx {
        let v = {
            let av = self.value(a);
            let bv = self.value(b);
            assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
            av + bv
        };
        self.op(v, vec![a, b], Box::new(|c: BackArgs<E>| {
            vec![c.grad.clone(), c.grad.clone()]
        }))
    }

    pub fn sub(&self, a: Tx, b: Tx) -> Tx {
        let v = {
            let av = self.value(a);
            let bv = self.value(b);
            assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
            av - bv
        };
        self.op(v, vec![a, b], Box::new(|c: BackArgs<E>| {
            vec![c.grad.clone(), c.grad.mapv(|g| -g)]
        }))
    }

    pub fn mul(&self, a: Tx, b: Tx) -> Tx {
        let v = {
            let av = self.value(a);
            let bv = self.value(b);
            assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
            av * bv
        };
        self.op(v, vec![a, b], Box::new(|c: BackArgs<E>| {
            vec![c.grad * c.parents[1], c.grad * c.parents[0]]
        }))
    }

    pub fn div(&self, a: Tx, b: Tx) -> Tx {
        let v = {
            let av = self.value(a);
            let bv = self.value(b);
            assert_eq!(av.shape(), bv.shape(), "div shape mismatch");
            av / bv
        };
        self.op(v, vec![a, b], Box::new(|c: BackArgs<E>| {
            let da = c.grad / c.parents[1];
            let db = Zip::from(c.grad)
                .and(c.parents[0])
                .and(c.parents[1])
                .map_collect(|&g, &a, &b| -g * a / (b * b));
            vec![da, db]
        }))
    }

    pub fn neg(&self, a: Tx) -> Tx {
        self.scale(a, -E::one())
    }

    pub fn scale(&self, a: Tx, k: E) -> Tx {
        let v = self.value(a).mapv(|x| x * k);
        self.op(v, vec![a], Box::new(move |c: BackArgs<E>| {
            vec![c.grad.mapv(|g| g * k)]
        }))
    }

    pub fn add_scalar(&self, a: Tx, k: E) -> Tx {
        let v = self.value(a).mapv(|x| x + k);
        self.op(v, vec![a], Box::new(|c: BackArgs<E>| vec![c.grad.clone()]))
    }

    pub fn exp(&self, a: Tx) -> Tx {
        let v = self.value(a).mapv(|x| x.exp());
        self.op(v, vec![a], Box::new(|c: BackArgs<E>| vec![c.grad * c.out]))
    }

    pub fn relu(&self, a: Tx) -> Tx {
        let v = self.value(a).mapv(|x| x.max(E::zero()));
        self.op(v, vec![a], Box::new(|c: BackArgs<E>| {
            vec![Zip::from(c.grad)
                .and(c.parents[0])
                .map_collect(|&g, &x| if x > E::zero() { g } else { E::zero() })]
        }))
    }

    pub fn sigmoid(&self, a: Tx) -> Tx {
        let v = self.value(a).mapv(sigmoid_scalar);
        self.op(v, vec![a], Box::new(|c: BackArgs<E>| {
            vec![Zip::from(c.grad)
                .and(c.out)
                .map_collect(|&g, &s| g * s * (E::one() - s))]
        }))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self, a: Tx) -> Tx {
        let v = self.value(a).mapv(|x| x * sigmoid_scalar(x));
        self.op(v, vec![a], Box::new(|c: BackArgs<E>| {
            vec![Zip::from(c.grad)
                .and(c.parents[0])
                .map_collect(|&g, &x| {
                    let s = sigmoid_scalar(x);
                    g * (s + x * s * (E::one() - s))
                })]
        }))
    }

    pub fn tanh(&self, a: Tx) -> Tx {
        let v = self.value(a).mapv(|x| x.tanh());
        self.op(v, vec![a], Box::new(|c: BackArgs<E>| {
            vec![Zip::from(c.grad)
                .and(c.out)
                .map_collect(|&g, &t| g * (E::one() - t * t))]
        }))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max_elem(&self, a: Tx, b: Tx) -> Tx {
        let v = {
            let av = self.value(a);
            let bv = self.value(b);
            Zip::from(&av).and(&bv).map_collect(|&x, &y| x.max(y))
        };
        self.op(v, vec![a, b], Box::new(|c: BackArgs<E>| {
            let da = Zip::from(c.grad)
                .and(c.parents[0])
                .and(c.parents[1])
                .map_collect(|&g, &x, &y| if x >= y { g } else { E::zero() });
            let db = Zip::from(c.grad)
                .and(c.parents[0])
                .and(c.parents[1])
                .map_collect(|&g, &x, &y| if x >= y { E::zero() } else { g });
            vec![da, db]
        }))
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min_elem(&self, a: Tx, b: Tx) -> Tx {
        let v = {
            let av = self.value(a);
            let bv = self.value(b);
            Zip::from(&av).and(&bv).map_collect(|&x, &y| x.min(y))
        };
        self.op(v, vec![a, b], Box::new(|c: BackArgs<E>| {
            let da = Zip::from(c.grad)
                .and(c.parents[0])
                .and(c.parents[1])
                .map_collect(|&g, &x, &y| if x <= y { g } else { E::zero() });
            let db = Zip::from(c.grad)
                .and(c.parents[0])
                .and(c.parents[1])
                .map_collect(|&g, &x, &y| if x <= y { E::zero() } else { g });
            vec![da, db]
        }))
    }

    pub fn sum_all(&self, a: Tx) -> Tx {
        let s = self.value(a).sum();
        let v = ArrayD::from_elem(ndarray::IxDyn(&[]), s);
        self.op(v, vec![a], Box::new(|c: BackArgs<E>| {
            let g = *c.grad.iter().next().expect("scalar grad");
            vec![ArrayD::from_elem(c.parents[0].raw_dim(), g)]
        }))
    }

    pub fn mean_all(&self, a: Tx) -> Tx {
        let n = E::from_f64(self.value(a).len() as f64);
        let s = self.sum_all(a);
        self.scale(s, E::one() / n)
    }

    /// 2-D matrix product `[m, k] x [k, n]`.
    pub fn matmul(&self, a: Tx, b: Tx) -> Tx {
        let av = self.value(a).into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let bv = self.value(b).into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        let v = av.dot(&bv).into_dyn();
        self.op(v, vec![a, b], Box::new(|c: BackArgs<E>| {
            let g = c.grad.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = c.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let b2 = c.parents[1].view().into_dimensionality::<Ix2>().unwrap();
            let da = if c.needs[0] {
                g.dot(&b2.t()).into_dyn()
            } else {
                ArrayD::zeros(ndarray::IxDyn(&[0]))
            };
            let db = if c.needs[1] {
                a2.t().dot(&g).into_dyn()
            } else {
                ArrayD::zeros(ndarray::IxDyn(&[0]))
            };
            vec![da, db]
        }))
    }

    /// Batched matrix product `[b, m, k] x [b, k, n]`.
    pub fn bmm(&self, a: Tx, b: Tx) -> Tx {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bb, k2, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(ba, bb, "bmm batch mismatch");
        assert_eq!(k, k2, "bmm inner-dim mismatch");
        let mut v = ArrayD::<E>::zeros(ndarray::IxDyn(&[ba, m, n]));
        for i in 0..ba {
            let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            v.index_axis_mut(Axis(0), i)
                .assign(&to_std(ai.view().into_dyn()).into_dimensionality::<Ix2>().unwrap().dot(
                    &to_std(bi.view().into_dyn()).into_dimensionality::<Ix2>().unwrap(),
                ));
        }
        self.op(v, vec![a, b], Box::new(move |c: BackArgs<E>| {
            let mut da = ArrayD::<E>::zeros(c.parents[0].raw_dim());
            let mut db = ArrayD::<E>::zeros(c.parents[1].raw_dim());
            for i in 0..ba {
                let gi = to_std(c.grad.index_axis(Axis(0), i))
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let ai = to_std(c.parents[0].index_axis(Axis(0), i))
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let bi = to_std(c.parents[1].index_axis(Axis(0), i))
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
            }
            vec![da, db]
        }))
    }

    /// Adds a `[c]` bias row to a `[r, c]` matrix.
    pub fn add_row_bias(&self, x: Tx, b: Tx) -> Tx {
        let xv = self.value(x);
        let bv = self.value(b);
        assert_eq!(xv.shape()[xv.ndim() - 1], bv.shape()[0], "bias width mismatch");
        let v = &xv + &bv;
        self.op(v, vec![x, b], Box::new(|c: BackArgs<E>| {
            let g2 = c
                .grad
                .view()
                .into_dimensionality::<Ix2>()
                .expect("row-bias grad 2-d");
            vec![c.grad.clone(), g2.sum_axis(Axis(0)).into_dyn()]
        }))
    }

    /// Adds a per-token table `[t, c]` to every sample of `[n, t, c]`.
    pub fn add_token_table(&self, x: Tx, table: Tx) -> Tx {
        let xv = self.value(x);
        let tv = self.value(table);
        assert_eq!(&xv.shape()[1..], tv.shape(), "token-table shape mismatch");
        let v = &xv + &tv;
        self.op(v, vec![x, table], Box::new(|c: BackArgs<E>| {
            vec![c.grad.clone(), c.grad.sum_axis(Axis(0))]
        }))
    }

    pub fn reshape(&self, a: Tx, shape: &[usize]) -> Tx {
        let v = self
            .value(a)
            .into_shape_with_order(ndarray::IxDyn(shape))
            .expect("reshape element-count mismatch");
        let parent_shape = self.shape(a);
        self.op(v, vec![a], Box::new(move |c: BackArgs<E>| {
            vec![c
                .grad
                .clone()
                .into_shape_with_order(ndarray::IxDyn(&parent_shape))
                .expect("reshape backward")]
        }))
    }

    pub fn permute(&self, a: Tx, axes: &[usize]) -> Tx {
        let v = to_std(self.value(a).view().permuted_axes(axes.to_vec()));
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        self.op(v, vec![a], Box::new(move |c: BackArgs<E>| {
            vec![to_std(c.grad.view().permuted_axes(inverse.clone()))]
        }))
    }

    pub fn concat(&self, axis: usize, parts: &[Tx]) -> Tx {
        let vals: Vec<ArrayD<E>> = parts.iter().map(|&p| self.value(p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let v = to_std(concatenate(Axis(axis), &views).expect("concat shapes").view());
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        self.op(v, parts.to_vec(), Box::new(move |c: BackArgs<E>| {
            let mut out = Vec::with_capacity(sizes.len());
            let mut start = 0isize;
            for &s in &sizes {
                out.push(to_std(c.grad.slice_axis(
                    Axis(axis),
                    Slice::from(start..start + s as isize),
                )));
                start += s as isize;
            }
            out
        }))
    }

    /// Contiguous block `[start, start+len)` along `axis`.
    pub fn slice_block(&self, a: Tx, axis: usize, start: usize, len: usize) -> Tx {
        let v = to_std(self.value(a).slice_axis(
            Axis(axis),
            Slice::from(start as isize..(start + len) as isize),
        ));
        self.op(v, vec![a], Box::new(move |c: BackArgs<E>| {
            let mut g = ArrayD::<E>::zeros(c.parents[0].raw_dim());
            g.slice_axis_mut(
                Axis(axis),
                Slice::from(start as isize..(start + len) as isize),
            )
            .assign(c.grad);
            vec![g]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Tx) -> Tx {
        let av = self.value(a);
        let last = av.ndim() - 1;
        let mut v = av;
        for mut lane in v.lanes_mut(Axis(last)) {
            let m = lane.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for x in lane.iter_mut() {
                *x = (*x - m).exp();
                sum += *x;
            }
            for x in lane.iter_mut() {
                *x = *x / sum;
            }
        }
        self.op(v, vec![a], Box::new(move |c: BackArgs<E>| {
            let mut g = c.grad.clone();
            let p = c.out;
            for (mut glane, plane) in g.lanes_mut(Axis(last)).into_iter().zip(p.lanes(Axis(last))) {
                let dot = glane
                    .iter()
                    .zip(plane.iter())
                    .fold(E::zero(), |acc, (&gi, &pi)| acc + gi * pi);
                for (gi, &pi) in glane.iter_mut().zip(plane.iter()) {
                    *gi = pi * (*gi - dot);
                }
            }
            vec![g]
        }))
    }

    /// Layer normalization over the last axis with per-feature affine.
    pub fn layer_norm(&self, x: Tx, gamma: Tx, beta: Tx, eps: f64) -> Tx {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let last = xv.ndim() - 1;
        let c = xv.shape()[last];
        assert_eq!(gv.len(), c, "layer_norm gamma width");
        assert_eq!(bv.len(), c, "layer_norm beta width");
        let epse = E::from_f64(eps);
        let cn = E::from_f64(c as f64);

        let mut xhat = xv;
        for mut lane in xhat.lanes_mut(Axis(last)) {
            let mean = lane.iter().fold(E::zero(), |a, &v| a + v) / cn;
            let var = lane
                .iter()
                .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                / cn;
            let inv_std = E::one() / (var + epse).sqrt();
            for v in lane.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
        let gslice: Vec<E> = gv.iter().cloned().collect();
        let bslice: Vec<E> = bv.iter().cloned().collect();
        let mut y = xhat.clone();
        for mut lane in y.lanes_mut(Axis(last)) {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = *v * gslice[i] + bslice[i];
            }
        }
        self.op(y, vec![x, gamma, beta], Box::new(move |cx: BackArgs<E>| {
            // Recompute xhat from the parent value (out already has affine applied).
            let xpar = cx.parents[0];
            let mut xhat = xpar.clone();
            let mut inv_stds = Vec::new();
            for mut lane in xhat.lanes_mut(Axis(last)) {
                let mean = lane.iter().fold(E::zero(), |a, &v| a + v) / cn;
                let var = lane
                    .iter()
                    .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                    / cn;
                let inv_std = E::one() / (var + epse).sqrt();
                inv_stds.push(inv_std);
                for v in lane.iter_mut() {
                    *v = (*v - mean) * inv_std;
                }
            }
            let mut dgamma = vec![E::zero(); gslice.len()];
            let mut dbeta = vec![E::zero(); gslice.len()];
            let mut dx = cx.grad.clone();
            for (li, (mut glane, xlane)) in dx
                .lanes_mut(Axis(last))
                .into_iter()
                .zip(xhat.lanes(Axis(last)))
                .enumerate()
            {
                let inv_std = inv_stds[li];
                // dxhat = g * gamma; accumulate affine grads first.
                let mut mean_dxhat = E::zero();
                let mut mean_dxhat_xhat = E::zero();
                let mut dxhat = vec![E::zero(); gslice.len()];
                for (i, (g, &xh)) in glane.iter().zip(xlane.iter()).enumerate() {
                    dgamma[i] += *g * xh;
                    dbeta[i] += *g;
                    let d = *g * gslice[i];
                    dxhat[i] = d;
                    mean_dxhat += d;
                    mean_dxhat_xhat += d * xh;
                }
                mean_dxhat = mean_dxhat / cn;
                mean_dxhat_xhat = mean_dxhat_xhat / cn;
                for (i, (g, &xh)) in glane.iter_mut().zip(xlane.iter()).enumerate() {
                    *g = inv_std * (dxhat[i] - mean_dxhat - xh * mean_dxhat_xhat);
                }
            }
            vec![
                dx,
                ArrayD::from_shape_vec(ndarray::IxDyn(&[gslice.len()]), dgamma).unwrap(),
                ArrayD::from_shape_vec(ndarray::IxDyn(&[bslice.len()]), dbeta).unwrap(),
            ]
        }))
    }

    /// Group normalization over `[n, c, h, w]` with per-channel affine.
    pub fn group_norm(&self, x: Tx, groups: usize, gamma: Tx, beta: Tx, eps: f64) -> Tx {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(&xv);
        assert_eq!(c % groups, 0, "group_norm channels not divisible by groups");
        let gv = self.value(gamma);
        let bv = self.value(beta);
        assert_eq!(gv.len(), c, "group_norm gamma width");
        let cg = c / groups;
        let group_len = E::from_f64((cg * h * w) as f64);
        let epse = E::from_f64(eps);

        let normalize = move |src: &ArrayD<E>| -> (ArrayD<E>, Vec<E>) {
            let mut xhat = src.clone();
            let mut inv_stds = Vec::with_capacity(n * groups);
            {
                let flat = xhat.as_slice_mut().expect("group_norm standard layout");
                let chw = c * h * w;
                let ghw = cg * h * w;
                for ni in 0..n {
                    for gi in 0..groups {
                        let base = ni * chw + gi * ghw;
                        let seg = &mut flat[base..base + ghw];
                        let mean = seg.iter().fold(E::zero(), |a, &v| a + v) / group_len;
                        let var = seg
                            .iter()
                            .fold(E::zero(), |a, &v| a + (v - mean) * (v - mean))
                            / group_len;
                        let inv_std = E::one() / (var + epse).sqrt();
                        inv_stds.push(inv_std);
                        for v in seg.iter_mut() {
                            *v = (*v - mean) * inv_std;
                        }
                    }
                }
            }
            (xhat, inv_stds)
        };

        let (xhat, _) = normalize(&xv);
        let gslice: Vec<E> = gv.iter().cloned().collect();
        let bslice: Vec<E> = bv.iter().cloned().collect();
        let mut y = xhat;
        {
            let flat = y.as_slice_mut().unwrap();
            let hw = h * w;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for v in &mut flat[base..base + hw] {
                        *v = *v * gslice[ci] + bslice[ci];
                    }
                }
            }
        }
        self.op(y, vec![x, gamma, beta], Box::new(move |cx: BackArgs<E>| {
            let (xhat, inv_stds) = normalize(cx.parents[0]);
            let xslice = xhat.as_slice().unwrap();
            let gr = cx.grad.as_slice().expect("grad standard layout");
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            let mut dx = vec![E::zero(); gr.len()];
            let chw = c * h * w;
            let ghw = cg * h * w;
            let hw = h * w;
            for ni in 0..n {
                for gi in 0..groups {
                    let base = ni * chw + gi * ghw;
                    let inv_std = inv_stds[ni * groups + gi];
                    let mut mean_d = E::zero();
                    let mut mean_dx = E::zero();
                    for j in 0..ghw {
                        let ci = gi * cg + j / hw;
                        let g = gr[base + j];
                        let xh = xslice[base + j];
                        dgamma[ci] += g * xh;
                        dbeta[ci] += g;
                        let d = g * gslice[ci];
                        mean_d += d;
                        mean_dx += d * xh;
                    }
                    mean_d = mean_d / group_len;
                    mean_dx = mean_dx / group_len;
                    for j in 0..ghw {
                        let ci = gi * cg + j / hw;
                        let d = gr[base + j] * gslice[ci];
                        dx[base + j] = inv_std * (d - mean_d - xslice[base + j] * mean_dx);
                    }
                }
            }
            vec![
                ArrayD::from_shape_vec(cx.parents[0].raw_dim(), dx).unwrap(),
                ArrayD::from_shape_vec(ndarray::IxDyn(&[c]), dgamma).unwrap(),
                ArrayD::from_shape_vec(ndarray::IxDyn(&[c]), dbeta).unwrap(),
            ]
        }))
    }

    /// Numerically stable elementwise binary cross-entropy with logits:
    /// `max(z, 0) - z*y + ln(1 + exp(-|z|))`. Targets are typically constants.
    pub fn bce_with_logits(&self, z: Tx, y: Tx) -> Tx {
        let zv = self.value(z);
        let yv = self.value(y);
        assert_eq!(zv.shape(), yv.shape(), "bce shape mismatch");
        let v = Zip::from(&zv).and(&yv).map_collect(|&z, &y| {
            z.max(E::zero()) - z * y + (E::one() + (-z.abs()).exp()).ln()
        });
        self.op(v, vec![z, y], Box::new(|c: BackArgs<E>| {
            let dz = Zip::from(c.grad)
                .and(c.parents[0])
                .and(c.parents[1])
                .map_collect(|&g, &z, &y| g * (sigmoid_scalar(z) - y));
            let dy = if c.needs[1] {
                Zip::from(c.grad)
                    .and(c.parents[0])
                    .map_collect(|&g, &z| -g * z)
            } else {
                ArrayD::zeros(ndarray::IxDyn(&[0]))
            };
            vec![dz, dy]
        }))
    }

    /// Elementwise focal loss with logits:
    /// `-alpha_t * (1 - p_t)^gamma * ln(p_t)` with `p_t = sigmoid(z)` for
    /// positive targets and `1 - sigmoid(z)` for negatives; `alpha_t` is
    /// `alpha` for positives and `1 - alpha` for negatives.
    pub fn focal_with_logits(&self, z: Tx, y: Tx, alpha: f64, gamma: f64) -> Tx {
        let zv = self.value(z);
        let yv = self.value(y);
        assert_eq!(zv.shape(), yv.shape(), "focal shape mismatch");
        let al = E::from_f64(alpha);
        let ga = E::from_f64(gamma);
        let tiny = E::from_f64(1e-12).max(E::min_positive_value());
        let half = E::from_f64(0.5);
        let pt_of = move |z: E, y: E| -> (E, E) {
            let p = sigmoid_scalar(z);
            let pos = y > half;
            let pt = if pos { p } else { E::one() - p };
            let at = if pos { al } else { E::one() - al };
            (pt, at)
        };
        let v = Zip::from(&zv).and(&yv).map_collect(|&z, &y| {
            let (pt, at) = pt_of(z, y);
            let ln_pt = pt.max(tiny).ln();
            -at * (E::one() - pt).powf(ga) * ln_pt
        });
        self.op(v, vec![z, y], Box::new(move |c: BackArgs<E>| {
            let dz = Zip::from(c.grad)
                .and(c.parents[0])
                .and(c.parents[1])
                .map_collect(|&g, &z, &y| {
                    let (pt, at) = pt_of(z, y);
                    let pt_c = pt.max(tiny);
                    // dL/dpt, guarding the gamma term at gamma = 0.
                    let mut dl_dpt = -at * (E::one() - pt).powf(ga) / pt_c;
                    if ga != E::zero() {
                        dl_dpt = dl_dpt
                            + at * ga * (E::one() - pt).powf(ga - E::one()) * pt_c.ln();
                    }
                    // dpt/dz = ±p(1-p) = ±pt(1-pt).
                    let sign = if y > half { E::one() } else { -E::one() };
                    g * dl_dpt * sign * pt * (E::one() - pt)
                });
            vec![dz, ArrayD::zeros(ndarray::IxDyn(&[0]))]
        }))
    }

    /// Gathers per-cell vectors from a `[n, c, h, w]` map: row `i` of the
    /// `[cells.len(), c]` result is `x[n_i, :, y_i, x_i]`. The backward
    /// pass scatter-adds, so repeated cells accumulate.
    pub fn gather_cells(&self, x: Tx, cells: &[(usize, usize, usize)]) -> Tx {
        let xv = self.value(x);
        let (n, ch, h, w) = dims4(&xv);
        for &(ni, y, xi) in cells {
            assert!(ni < n && y < h && xi < w, "gather_cells index out of range");
        }
        let xs = xv.as_slice().expect("standard layout");
        let hw = h * w;
        let rows = cells.len();
        let mut out = ArrayD::<E>::zeros(ndarray::IxDyn(&[rows, ch]));
        {
            let os = out.as_slice_mut().unwrap();
            for (r, &(ni, y, xi)) in cells.iter().enumerate() {
                let base = ni * ch * hw + y * w + xi;
                for ci in 0..ch {
                    os[r * ch + ci] = xs[base + ci * hw];
                }
            }
        }
        let cells = cells.to_vec();
        self.op(out, vec![x], Box::new(move |c: BackArgs<E>| {
            let gs = c.grad.as_slice().expect("standard layout");
            let mut dx = ArrayD::<E>::zeros(c.parents[0].raw_dim());
            {
                let ds = dx.as_slice_mut().unwrap();
                for (r, &(ni, y, xi)) in cells.iter().enumerate() {
                    let base = ni * ch * hw + y * w + xi;
                    for ci in 0..ch {
                        ds[base + ci * hw] += gs[r * ch + ci];
                    }
                }
            }
            vec![dx]
        }))
    }
}

pub(crate) fn dims4<E: Elem>(a: &ArrayD<E>) -> (usize, usize, usize, usize) {
    assert_eq!(a.ndim(), 4, "expected a 4-d tensor, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3])
}
