//! Differentiable primitive operations.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn, Slice};

use crate::{lit, Element, Tensor};

/// Reshape an owned array, copying only when the layout forces it.
pub(crate) fn reshape_arr<T: Element>(a: ArrayD<T>, dims: &[usize]) -> ArrayD<T> {
    let a = standardize(a);
    a.into_shape_with_order((IxDyn(dims), ndarray::Order::RowMajor))
        .expect("reshape length mismatch")
}

pub(crate) fn standardize<T: Element>(a: ArrayD<T>) -> ArrayD<T> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

pub(crate) fn mm2<T: Element>(a: ArrayViewD<'_, T>, b: ArrayViewD<'_, T>) -> ArrayD<T> {
    let a2 = a.into_dimensionality::<Ix2>().expect("matmul lhs must be 2-d");
    let b2 = b.into_dimensionality::<Ix2>().expect("matmul rhs must be 2-d");
    assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimension mismatch");
    let mut c = Array2::<T>::zeros((a2.nrows(), b2.ncols()));
    general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut c);
    c.into_dyn()
}

fn unbroadcast_to<T: Element>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    // Sum g down to `shape`, assuming standard trailing-axis broadcast.
    let extra = g.ndim() - shape.len();
    let mut out = g.clone();
    for _ in 0..extra {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &s) in shape.iter().enumerate() {
        if out.shape()[ax] != s {
            debug_assert_eq!(s, 1);
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    out
}

impl<T: Element> Tensor<T> {
    // ---- elementwise binary ----

    pub fn add(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        let out = &*self.data() + &*rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        let out = &*self.data() - &*rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.mapv(|v| -v))]),
        )
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "mul shape mismatch");
        let out = &*self.data() * &*rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                vec![Some(g * &*b), Some(g * &*a)]
            }),
        )
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), rhs.shape(), "div shape mismatch");
        let out = &*self.data() / &*rhs.data();
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                let ga = g / &*b;
                let gb = ndarray::Zip::from(g)
                    .and(&*a)
                    .and(&*b)
                    .map_collect(|&g, &a, &b| -g * a / (b * b));
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// `self * scalar + rhs * scalar` fused is not needed; plain scalar ops:
    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        let s = lit::<T>(s);
        let out = self.data().mapv(|v| v + s);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor<T> {
        let sv = lit::<T>(s);
        let out = self.data().mapv(|v| v * sv);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.mapv(|v| v * sv))]),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.mul_scalar(-1.0)
    }

    // ---- elementwise unary ----

    pub fn relu(&self) -> Tensor<T> {
        let out = self.data().mapv(|v| if v > T::zero() { v } else { T::zero() });
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, ps| {
                let x = ps[0].data();
                let gx = ndarray::Zip::from(g)
                    .and(&*x)
                    .map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() });
                vec![Some(gx)]
            }),
        )
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor<T> {
        let k = lit::<T>(0.797_884_560_802_865_4); // sqrt(2/pi)
        let c = lit::<T>(0.044715);
        let half = lit::<T>(0.5);
        let out = self
            .data()
            .mapv(|x| half * x * (T::one() + (k * (x + c * x * x * x)).tanh()));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let x = ps[0].data();
                let three = lit::<T>(3.0);
                let gx = ndarray::Zip::from(g).and(&*x).map_collect(|&g, &x| {
                    let t = (k * (x + c * x * x * x)).tanh();
                    let d = half * (T::one() + t)
                        + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
                    g * d
                });
                vec![Some(gx)]
            }),
        )
    }

    pub fn exp(&self) -> Tensor<T> {
        let out = self.data().mapv(T::exp);
        let saved = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g * &saved)]),
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero below the floor.
    pub fn ln_floor(&self, floor: f64) -> Tensor<T> {
        let m = lit::<T>(floor);
        let out = self.data().mapv(|v| if v > m { v.ln() } else { m.ln() });
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let x = ps[0].data();
                let gx = ndarray::Zip::from(g)
                    .and(&*x)
                    .map_collect(|&g, &x| if x > m { g / x } else { T::zero() });
                vec![Some(gx)]
            }),
        )
    }

    pub fn abs(&self) -> Tensor<T> {
        let out = self.data().mapv(T::abs);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, ps| {
                let x = ps[0].data();
                let gx = ndarray::Zip::from(g).and(&*x).map_collect(|&g, &x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                });
                vec![Some(gx)]
            }),
        )
    }

    pub fn sqrt(&self) -> Tensor<T> {
        let out = self.data().mapv(T::sqrt);
        let saved = out.clone();
        let half = lit::<T>(0.5);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = ndarray::Zip::from(g)
                    .and(&saved)
                    .map_collect(|&g, &y| g * half / y);
                vec![Some(gx)]
            }),
        )
    }

    pub fn square(&self) -> Tensor<T> {
        let out = self.data().mapv(|v| v * v);
        let two = lit::<T>(2.0);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let x = ps[0].data();
                let gx = ndarray::Zip::from(g).and(&*x).map_collect(|&g, &x| g * two * x);
                vec![Some(gx)]
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out = self.data().mapv(T::tanh);
        let saved = out.clone();
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = ndarray::Zip::from(g)
                    .and(&saved)
                    .map_collect(|&g, &y| g * (T::one() - y * y));
                vec![Some(gx)]
            }),
        )
    }

    /// Clamp into `[lo, hi]`; the gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let lo = lit::<T>(lo);
        let hi = lit::<T>(hi);
        let out = self.data().mapv(|v| v.max(lo).min(hi));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, ps| {
                let x = ps[0].data();
                let gx = ndarray::Zip::from(g)
                    .and(&*x)
                    .map_collect(|&g, &x| if x > lo && x < hi { g } else { T::zero() });
                vec![Some(gx)]
            }),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, dims: &[usize]) -> Tensor<T> {
        let in_shape = self.shape();
        assert_eq!(
            self.len(),
            dims.iter().product::<usize>(),
            "reshape length mismatch"
        );
        let out = reshape_arr(self.to_array(), dims);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(reshape_arr(g.clone(), &in_shape))]),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor<T> {
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let out = standardize(self.to_array().permuted_axes(IxDyn(axes)));
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(standardize(
                    g.clone().permuted_axes(IxDyn(&inverse)),
                ))]
            }),
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, end: usize) -> Tensor<T> {
        let in_shape = self.shape();
        assert!(end <= in_shape[axis] && start < end, "slice out of bounds");
        let out = standardize(
            self.data()
                .slice_axis(Axis(axis), Slice::from(start..end))
                .to_owned(),
        );
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = ArrayD::<T>::zeros(IxDyn(&in_shape));
                gx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn concat(axis: usize, parts: &[Tensor<T>]) -> Tensor<T> {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
        let view_refs: Vec<_> = views.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &view_refs).expect("concat shape mismatch");
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            standardize(out),
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &s in &sizes {
                    grads.push(Some(standardize(
                        g.slice_axis(Axis(axis), Slice::from(off..off + s)).to_owned(),
                    )));
                    off += s;
                }
                grads
            }),
        )
    }

    /// Stack along a new leading axis.
    pub fn stack_new0(parts: &[Tensor<T>]) -> Tensor<T> {
        let expanded: Vec<Tensor<T>> = parts
            .iter()
            .map(|p| {
                let mut dims = vec![1];
                dims.extend(p.shape());
                p.reshape(&dims)
            })
            .collect();
        Tensor::concat(0, &expanded)
    }

    /// Zero-pad the first two axes of an `[h, w, c]` tensor.
    pub fn pad_hw(&self, bottom: usize, right: usize) -> Tensor<T> {
        let in_shape = self.shape();
        assert_eq!(in_shape.len(), 3);
        let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
        if bottom == 0 && right == 0 {
            return self.clone();
        }
        let mut out = ArrayD::<T>::zeros(IxDyn(&[h + bottom, w + right, c]));
        out.slice_axis_mut(Axis(0), Slice::from(0..h))
            .slice_axis_mut(Axis(1), Slice::from(0..w))
            .assign(&self.data());
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .slice_axis(Axis(0), Slice::from(0..h))
                    .slice_axis(Axis(1), Slice::from(0..w))
                    .to_owned();
                vec![Some(standardize(gx))]
            }),
        )
    }

    pub fn crop_hw(&self, h: usize, w: usize) -> Tensor<T> {
        let in_shape = self.shape();
        assert_eq!(in_shape.len(), 3);
        if in_shape[0] == h && in_shape[1] == w {
            return self.clone();
        }
        self.slice_axis(0, 0, h).slice_axis(1, 0, w)
    }

    /// Cyclic roll of the first two axes of an `[h, w, c]` tensor.
    pub fn roll_hw(&self, shift_h: isize, shift_w: isize) -> Tensor<T> {
        fn roll_arr<T: Element>(a: &ArrayD<T>, sh: isize, sw: isize) -> ArrayD<T> {
            let (h, w) = (a.shape()[0] as isize, a.shape()[1] as isize);
            let sh = sh.rem_euclid(h) as usize;
            let sw = sw.rem_euclid(w) as usize;
            let mut out = ArrayD::<T>::zeros(a.raw_dim());
            let (h, w) = (h as usize, w as usize);
            for i in 0..h {
                for j in 0..w {
                    let src = a.index_axis(Axis(0), i);
                    let src = src.index_axis(Axis(0), j);
                    let mut dst = out.index_axis_mut(Axis(0), (i + sh) % h);
                    let mut dst = dst.index_axis_mut(Axis(0), (j + sw) % w);
                    dst.assign(&src);
                }
            }
            out
        }
        let out = roll_arr(&self.data(), shift_h, shift_w);
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(roll_arr(g, -shift_h, -shift_w))]),
        )
    }

    // ---- broadcast adds ----

    /// `self + rhs` where `rhs` is broadcast over `self`'s leading axes
    /// (ndarray trailing-axis broadcast rules).
    pub fn add_bcast(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let rhs_shape = rhs.shape();
        let out = {
            let a = self.data();
            let b = rhs.data();
            let bb = b.broadcast(a.raw_dim()).expect("broadcast failure");
            &*a + &bb
        };
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                vec![Some(g.clone()), Some(unbroadcast_to(g, &rhs_shape))]
            }),
        )
    }

    /// Add a constant (non-differentiable) broadcastable array.
    pub fn add_const(&self, rhs: &ArrayD<T>) -> Tensor<T> {
        let out = {
            let a = self.data();
            let bb = rhs.broadcast(a.raw_dim()).expect("broadcast failure");
            &*a + &bb
        };
        Tensor::from_op(
            out,
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.clone())]),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, rhs: &Tensor<T>) -> Tensor<T> {
        let out = mm2(self.data().view(), rhs.data().view());
        Tensor::from_op(
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(|g, ps| {
                let a = ps[0].data();
                let b = ps[1].data();
                let ga = mm2(g.view(), b.view().reversed_axes());
                let gb = mm2(a.view().reversed_axes(), g.view());
                vec![Some(standardize(ga)), Some(standardize(gb))]
            }),
        )
    }

    /// Batched `a @ b` on `[B, m, k] x [B, k, n]`.
    pub fn bmm(&self, rhs: &Tensor<T>) -> Tensor<T> {
        batched_mm(self, rhs, false)
    }

    /// Batched `a @ b^T` on `[B, m, k] x [B, n, k]`.
    pub fn bmm_nt(&self, rhs: &Tensor<T>) -> Tensor<T> {
        batched_mm(self, rhs, true)
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<T> {
        let in_shape = self.shape();
        let s = self.data().sum();
        Tensor::from_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            vec![self.clone()],
            Box::new(move |g, _| {
                vec![Some(ArrayD::from_elem(IxDyn(&in_shape), g[[0]]))]
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor<T> {
        let in_shape = self.shape();
        let out = self.data().sum_axis(Axis(axis));
        Tensor::from_op(
            out.into_dyn(),
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .clone()
                    .insert_axis(Axis(axis))
                    .broadcast(IxDyn(&in_shape))
                    .unwrap()
                    .to_owned();
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor<T> {
        let n = self.shape()[axis] as f64;
        self.sum_axis(axis).mul_scalar(1.0 / n)
    }
}

fn batched_mm<T: Element>(a: &Tensor<T>, b: &Tensor<T>, transpose_b: bool) -> Tensor<T> {
    fn run<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>, ta: bool, tb: bool) -> ArrayD<T> {
        let bsz = a.shape()[0];
        debug_assert_eq!(bsz, b.shape()[0]);
        let mut out: Option<ArrayD<T>> = None;
        for i in 0..bsz {
            let ai = a.index_axis(Axis(0), i);
            let bi = b.index_axis(Axis(0), i);
            let ai = if ta { ai.reversed_axes() } else { ai };
            let bi = if tb { bi.reversed_axes() } else { bi };
            let c = mm2(ai.into_dyn(), bi.into_dyn());
            let out = out.get_or_insert_with(|| {
                ArrayD::zeros(IxDyn(&[bsz, c.shape()[0], c.shape()[1]]))
            });
            out.index_axis_mut(Axis(0), i).assign(&c);
        }
        out.expect("empty batch")
    }
    let (av, bv) = (a.to_array(), b.to_array());
    assert_eq!(av.ndim(), 3);
    assert_eq!(bv.ndim(), 3);
    let out = if transpose_b {
        run(&av, &bv, false, true)
    } else {
        run(&av, &bv, false, false)
    };
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, ps| {
            let a = ps[0].data();
            let b = ps[1].data();
            if transpose_b {
                // y = a b^T: ga = g b ; gb = g^T a
                let ga = run(g, &b, false, false);
                let gb = run(g, &a, true, false);
                vec![Some(ga), Some(gb)]
            } else {
                // y = a b: ga = g b^T ; gb = a^T g
                let ga = run(g, &b, false, true);
                let gb = run(&a, g, true, false);
                vec![Some(ga), Some(gb)]
            }
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use ndarray::arr2;

    #[test]
    fn matmul_values() {
        let a = Tensor::<f64>::param(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = Tensor::<f64>::param(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = a.matmul(&b);
        assert_eq!(c.data()[[0, 0]], 19.0);
        assert_eq!(c.data()[[1, 1]], 50.0);
    }

    #[test]
    fn roll_is_cyclic() {
        let a = Tensor::<f64>::param(
            ndarray::Array::from_shape_vec((2, 2, 1), vec![1.0, 2.0, 3.0, 4.0])
                .unwrap()
                .into_dyn(),
        );
        let r = a.roll_hw(1, 0);
        assert_eq!(r.data()[[0, 0, 0]], 3.0);
        assert_eq!(r.data()[[1, 0, 0]], 1.0);
    }
}
