//! Neural-network operations: softmax, normalization layers, convolution,
//! pooling, bilinear resampling and table lookup.

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, IxDyn};

use crate::ops::{mm2, reshape_arr};
use crate::{lit, Element, Tensor};

impl<T: Element> Tensor<T> {
    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<T> {
        let x = self.data();
        let mut out = x.clone();
        for mut lane in out.rows_mut() {
            let mut mx = T::neg_infinity();
            for &v in lane.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for v in lane.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v = *v / sum;
            }
        }
        drop(x);
        let saved = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = g.clone();
                for (mut glane, ylane) in gx.rows_mut().into_iter().zip(saved.rows()) {
                    let mut dot = T::zero();
                    for (&gv, &yv) in glane.iter().zip(ylane.iter()) {
                        dot += gv * yv;
                    }
                    for (gv, &yv) in glane.iter_mut().zip(ylane.iter()) {
                        *gv = (*gv - dot) * yv;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Layer normalization over the last axis with per-channel affine.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Tensor<T> {
        let c = *self.shape().last().unwrap();
        assert_eq!(gamma.shape(), vec![c]);
        assert_eq!(beta.shape(), vec![c]);
        let eps = lit::<T>(eps);
        let x = self.data();
        let mut xhat = x.clone();
        let lanes = xhat.len() / c;
        let mut inv_std = Vec::with_capacity(lanes);
        for mut lane in xhat.rows_mut() {
            let n = lit::<T>(c as f64);
            let mean = lane.iter().fold(T::zero(), |a, &b| a + b) / n;
            let var = lane
                .iter()
                .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
                / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for v in lane.iter_mut() {
                *v = (*v - mean) * is;
            }
        }
        drop(x);
        let g_arr = gamma.data().clone();
        let b_arr = beta.data().clone();
        let mut out = xhat.clone();
        for mut lane in out.rows_mut() {
            for (i, v) in lane.iter_mut().enumerate() {
                *v = *v * g_arr[[i]] + b_arr[[i]];
            }
        }
        let saved_xhat = xhat;
        let saved_inv = inv_std;
        Tensor::from_op(
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, ps| {
                let gamma = ps[1].data();
                let cn = lit::<T>(c as f64);
                let mut gx = g.clone();
                let mut ggamma = Array1::<T>::zeros(c);
                let mut gbeta = Array1::<T>::zeros(c);
                for ((mut glane, xlane), &is) in gx
                    .rows_mut()
                    .into_iter()
                    .zip(saved_xhat.rows())
                    .zip(saved_inv.iter())
                {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_x = T::zero();
                    for (i, (gv, &xv)) in glane.iter_mut().zip(xlane.iter()).enumerate() {
                        ggamma[i] += *gv * xv;
                        gbeta[i] += *gv;
                        let dxhat = *gv * gamma[[i]];
                        mean_dxhat += dxhat;
                        mean_dxhat_x += dxhat * xv;
                        *gv = dxhat;
                    }
                    mean_dxhat /= cn;
                    mean_dxhat_x /= cn;
                    for (gv, &xv) in glane.iter_mut().zip(xlane.iter()) {
                        *gv = is * (*gv - mean_dxhat - xv * mean_dxhat_x);
                    }
                }
                vec![
                    Some(gx),
                    Some(ggamma.into_dyn()),
                    Some(gbeta.into_dyn()),
                ]
            }),
        )
    }

    /// 2-D convolution on `[N, C_in, H, W]` with kernel `[C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Tensor<T> {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be [N,C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [K,C,kh,kw]");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let x = self.data();
        let w2 = {
            let wd = weight.data();
            wd.view()
                .into_shape_with_order((cout, cin * kh * kw))
                .unwrap()
                .to_owned()
        };
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, cout, ho, wo]));
        {
            let out_slice = out.as_slice_mut().unwrap();
            for ni in 0..n {
                let cols = im2col(&x, ni, cin, h, w, kh, kw, stride, pad, ho, wo);
                let y = mm2(w2.view().into_dyn(), cols.view().into_dyn());
                let y = y.as_slice().unwrap();
                let base = ni * cout * ho * wo;
                out_slice[base..base + cout * ho * wo].copy_from_slice(y);
            }
        }
        if let Some(b) = bias {
            let bd = b.data();
            for ni in 0..n {
                for co in 0..cout {
                    let bv = bd[[co]];
                    out.index_axis_mut(Axis(0), ni)
                        .index_axis_mut(Axis(0), co)
                        .mapv_inplace(|v| v + bv);
                }
            }
        }
        drop(x);

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op(
            out,
            parents,
            Box::new(move |g, ps| {
                let x = ps[0].data();
                let wd = ps[1].data();
                let w2 = wd
                    .view()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap()
                    .to_owned();
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[n, cin, h, w]));
                let mut gw2 = Array2::<T>::zeros((cout, cin * kh * kw));
                let mut gb = Array1::<T>::zeros(cout);
                for ni in 0..n {
                    let gy = g
                        .index_axis(Axis(0), ni)
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap()
                        .to_owned();
                    let cols = im2col(&x, ni, cin, h, w, kh, kw, stride, pad, ho, wo);
                    // dW += gy @ cols^T
                    let gw_n = mm2(gy.view().into_dyn(), cols.view().reversed_axes().into_dyn());
                    gw2 += &gw_n.into_dimensionality::<Ix2>().unwrap();
                    // dX = col2im(W^T @ gy)
                    let gcols = mm2(w2.view().reversed_axes().into_dyn(), gy.view().into_dyn());
                    col2im(
                        &gcols.into_dimensionality::<Ix2>().unwrap(),
                        &mut gx,
                        ni,
                        cin,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        ho,
                        wo,
                    );
                    if has_bias {
                        for co in 0..cout {
                            let mut s = T::zero();
                            for v in g
                                .index_axis(Axis(0), ni)
                                .index_axis(Axis(0), co)
                                .iter()
                            {
                                s += *v;
                            }
                            gb[co] += s;
                        }
                    }
                }
                let gw = reshape_arr(gw2.into_dyn(), &[cout, cin, kh, kw]);
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    grads.push(Some(gb.into_dyn()));
                }
                grads
            }),
        )
    }

    /// Max pooling on `[N, C, H, W]`.
    pub fn max_pool2d(&self, k: usize, stride: usize) -> Tensor<T> {
        let xs = self.shape();
        assert_eq!(xs.len(), 4);
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let x = self.data();
        let xsl = x.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[n, c, ho, wo]));
        let mut argmax = vec![0usize; n * c * ho * wo];
        {
            let osl = out.as_slice_mut().unwrap();
            let mut oi = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * h * w;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let idx = base + (oy * stride + ky) * w + (ox * stride + kx);
                                    if xsl[idx] > best {
                                        best = xsl[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            osl[oi] = best;
                            argmax[oi] = best_idx;
                            oi += 1;
                        }
                    }
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[n, c, h, w]));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    for (oi, &src) in argmax.iter().enumerate() {
                        gxs[src] += gs[oi];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Bilinear resize of an `[h, w, c]` tensor to `[out_h, out_w, c]`,
    /// half-pixel (corner-unaligned) convention.
    pub fn bilinear_resize_hw(&self, out_h: usize, out_w: usize) -> Tensor<T> {
        let xs = self.shape();
        assert_eq!(xs.len(), 3, "bilinear_resize_hw expects [h,w,c]");
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        if h == out_h && w == out_w {
            return self.clone();
        }
        let ytaps = resize_taps::<T>(h, out_h);
        let xtaps = resize_taps::<T>(w, out_w);
        let x = self.data();
        let xsl = x.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[out_h, out_w, c]));
        {
            let osl = out.as_slice_mut().unwrap();
            for oy in 0..out_h {
                let (y0, y1, wy) = ytaps[oy];
                for ox in 0..out_w {
                    let (x0, x1, wx) = xtaps[ox];
                    let w00 = (T::one() - wy) * (T::one() - wx);
                    let w01 = (T::one() - wy) * wx;
                    let w10 = wy * (T::one() - wx);
                    let w11 = wy * wx;
                    let o = (oy * out_w + ox) * c;
                    let i00 = (y0 * w + x0) * c;
                    let i01 = (y0 * w + x1) * c;
                    let i10 = (y1 * w + x0) * c;
                    let i11 = (y1 * w + x1) * c;
                    for ch in 0..c {
                        osl[o + ch] = w00 * xsl[i00 + ch]
                            + w01 * xsl[i01 + ch]
                            + w10 * xsl[i10 + ch]
                            + w11 * xsl[i11 + ch];
                    }
                }
            }
        }
        drop(x);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&[h, w, c]));
                {
                    let gxs = gx.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    for oy in 0..out_h {
                        let (y0, y1, wy) = ytaps[oy];
                        for ox in 0..out_w {
                            let (x0, x1, wx) = xtaps[ox];
                            let w00 = (T::one() - wy) * (T::one() - wx);
                            let w01 = (T::one() - wy) * wx;
                            let w10 = wy * (T::one() - wx);
                            let w11 = wy * wx;
                            let o = (oy * out_w + ox) * c;
                            let i00 = (y0 * w + x0) * c;
                            let i01 = (y0 * w + x1) * c;
                            let i10 = (y1 * w + x0) * c;
                            let i11 = (y1 * w + x1) * c;
                            for ch in 0..c {
                                let gv = gs[o + ch];
                                gxs[i00 + ch] += w00 * gv;
                                gxs[i01 + ch] += w01 * gv;
                                gxs[i10 + ch] += w10 * gv;
                                gxs[i11 + ch] += w11 * gv;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row lookup `table[indices, :]` with scatter-add gradient.
    pub fn gather_rows(&self, indices: std::rc::Rc<Vec<usize>>) -> Tensor<T> {
        let ts = self.shape();
        assert_eq!(ts.len(), 2);
        let (r, c) = (ts[0], ts[1]);
        let t = self.data();
        let tsl = t.as_slice().unwrap();
        let m = indices.len();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[m, c]));
        {
            let osl = out.as_slice_mut().unwrap();
            for (i, &row) in indices.iter().enumerate() {
                debug_assert!(row < r);
                osl[i * c..(i + 1) * c].copy_from_slice(&tsl[row * c..(row + 1) * c]);
            }
        }
        drop(t);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gt = ArrayD::<T>::zeros(IxDyn(&[r, c]));
                {
                    let gts = gt.as_slice_mut().unwrap();
                    let gs = g.as_slice().unwrap();
                    for (i, &row) in indices.iter().enumerate() {
                        for ch in 0..c {
                            gts[row * c + ch] += gs[i * c + ch];
                        }
                    }
                }
                vec![Some(gt)]
            }),
        )
    }
}

/// Batch normalization over `[N, C, H, W]`, channel-wise statistics.
///
/// Running statistics live outside the graph and are updated in place during
/// training forward passes (PyTorch conventions: biased variance for
/// normalization, unbiased for the running estimate).
#[allow(clippy::too_many_arguments)]
pub fn batch_norm2d<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &mut ArrayD<T>,
    running_var: &mut ArrayD<T>,
    training: bool,
    momentum: f64,
    eps: f64,
) -> Tensor<T> {
    let xs = x.shape();
    assert_eq!(xs.len(), 4);
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let count = (n * h * w) as f64;
    let epsv = lit::<T>(eps);

    let (mean, var) = if training {
        let xd = x.data();
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                for v in xd.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    s += *v;
                }
            }
            mean[ci] = s / lit::<T>(count);
        }
        for ci in 0..c {
            let m = mean[ci];
            let mut s = T::zero();
            for ni in 0..n {
                for v in xd.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                    s += (*v - m) * (*v - m);
                }
            }
            var[ci] = s / lit::<T>(count);
        }
        drop(xd);
        let mom = lit::<T>(momentum);
        let unbias = if count > 1.0 {
            lit::<T>(count / (count - 1.0))
        } else {
            T::one()
        };
        for ci in 0..c {
            running_mean[[ci]] = (T::one() - mom) * running_mean[[ci]] + mom * mean[ci];
            running_var[[ci]] =
                (T::one() - mom) * running_var[[ci]] + mom * var[ci] * unbias;
        }
        (mean, var)
    } else {
        let mut mean = Array1::<T>::zeros(c);
        let mut var = Array1::<T>::zeros(c);
        for ci in 0..c {
            mean[ci] = running_mean[[ci]];
            var[ci] = running_var[[ci]];
        }
        (mean, var)
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + epsv).sqrt()).collect();
    let xd = x.data();
    let mut xhat = xd.clone();
    drop(xd);
    for ni in 0..n {
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            xhat.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .mapv_inplace(|v| (v - m) * is);
        }
    }
    let gd = gamma.data().clone();
    let bd = beta.data().clone();
    let mut out = xhat.clone();
    for ni in 0..n {
        for ci in 0..c {
            let gv = gd[[ci]];
            let bv = bd[[ci]];
            out.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .mapv_inplace(|v| v * gv + bv);
        }
    }

    let saved_xhat = xhat;
    let saved_inv = inv_std;
    Tensor::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, ps| {
            let gamma = ps[1].data();
            let cf = lit::<T>(count);
            let mut gx = g.clone();
            let mut ggamma = Array1::<T>::zeros(c);
            let mut gbeta = Array1::<T>::zeros(c);
            for ci in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for ni in 0..n {
                    let gl = g.index_axis(Axis(0), ni);
                    let gl = gl.index_axis(Axis(0), ci);
                    let xl = saved_xhat.index_axis(Axis(0), ni);
                    let xl = xl.index_axis(Axis(0), ci);
                    for (&gv, &xv) in gl.iter().zip(xl.iter()) {
                        sum_g += gv;
                        sum_gx += gv * xv;
                    }
                }
                ggamma[ci] = sum_gx;
                gbeta[ci] = sum_g;
                let gma = gamma[[ci]];
                let is = saved_inv[ci];
                if training {
                    let mean_g = sum_g / cf;
                    let mean_gx = sum_gx / cf;
                    for ni in 0..n {
                        let mut gl = gx.index_axis_mut(Axis(0), ni);
                        let mut gl = gl.index_axis_mut(Axis(0), ci);
                        let xl = saved_xhat.index_axis(Axis(0), ni);
                        let xl = xl.index_axis(Axis(0), ci);
                        for (gv, &xv) in gl.iter_mut().zip(xl.iter()) {
                            *gv = gma * is * (*gv - mean_g - xv * mean_gx);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let mut gl = gx.index_axis_mut(Axis(0), ni);
                        let mut gl = gl.index_axis_mut(Axis(0), ci);
                        for gv in gl.iter_mut() {
                            *gv = *gv * gma * is;
                        }
                    }
                }
            }
            vec![Some(gx), Some(ggamma.into_dyn()), Some(gbeta.into_dyn())]
        }),
    )
}

/// Per-output-pixel interpolation taps for half-pixel bilinear resampling.
fn resize_taps<T: Element>(in_size: usize, out_size: usize) -> Vec<(usize, usize, T)> {
    let scale = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let src = src.max(0.0);
            let i0 = (src.floor() as usize).min(in_size - 1);
            let i1 = (i0 + 1).min(in_size - 1);
            let frac = if i1 > i0 { src - i0 as f64 } else { 0.0 };
            (i0, i1, lit::<T>(frac))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &ArrayD<T>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let xsl = x.as_slice().expect("conv input must be contiguous");
    let mut cols = Array2::<T>::zeros((cin * kh * kw, ho * wo));
    let csl = cols.as_slice_mut().unwrap();
    for c in 0..cin {
        let cbase = (n * cin + c) * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = cbase + iy as usize * w;
                    let obase = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        csl[obase + ox] = xsl[ibase + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Element>(
    cols: &Array2<T>,
    gx: &mut ArrayD<T>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let csl = cols.as_slice().unwrap();
    let gsl = gx.as_slice_mut().unwrap();
    for c in 0..cin {
        let cbase = (n * cin + c) * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let ibase = cbase + iy as usize * w;
                    let obase = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gsl[ibase + ix as usize] += csl[obase + ox];
                    }
                }
            }
        }
    }
}

/// `x @ w + b` for `x: [m, c_in]`, `w: [c_in, c_out]`, `b: [c_out]`.
pub fn linear<T: Element>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let y = x.matmul(w);
    match b {
        Some(b) => y.add_bcast(b),
        None => y,
    }
}
