//! Entropic-regularized optimal transport as a single differentiable op.
//!
//! Forward runs log-domain Sinkhorn iterations between two histograms and
//! returns the transport cost `sum_ij P_ij C_ij` of the resulting plan.
//! Backward replays the iterations in reverse, which is algebraically the
//! same gradient as autodiff through the unrolled loop but stores only the
//! per-iteration potentials instead of full `n x m` intermediates.

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::{lit, Element, Tensor};

/// Histogram entries at or below this mass are treated as outside the
/// support: they get a floored log weight and a zero gradient.
pub const SUPPORT_CUTOFF: f64 = 1e-8;
const LOG_FLOOR: f64 = -700.0;

fn masked_log<T: Element>(x: &Array1<T>) -> Array1<T> {
    let cutoff = lit::<T>(SUPPORT_CUTOFF);
    let floor = lit::<T>(LOG_FLOOR);
    x.mapv(|v| if v > cutoff { v.ln() } else { floor })
}

/// `lse_j (z[j] + row[j])`-style helper: log-sum-exp of an iterator.
fn lse<T: Element>(vals: impl Iterator<Item = T> + Clone) -> T {
    let mut mx = T::neg_infinity();
    for v in vals.clone() {
        if v > mx {
            mx = v;
        }
    }
    if mx == T::neg_infinity() {
        return T::neg_infinity();
    }
    let mut s = T::zero();
    for v in vals {
        s += (v - mx).exp();
    }
    mx + s.ln()
}

struct SinkhornRun<T> {
    f_hist: Vec<Array1<T>>, // f_0 .. f_T
    g_hist: Vec<Array1<T>>, // g_1 .. g_T
}

fn run_forward<T: Element>(
    la: &Array1<T>,
    lb: &Array1<T>,
    cost: &Array2<T>,
    eps: T,
    iters: usize,
) -> SinkhornRun<T> {
    let n = la.len();
    let m = lb.len();
    let mut f = Array1::<T>::zeros(n);
    let mut f_hist = Vec::with_capacity(iters + 1);
    let mut g_hist = Vec::with_capacity(iters);
    f_hist.push(f.clone());
    let mut g = Array1::<T>::zeros(m);
    for _ in 0..iters {
        for j in 0..m {
            let l = lse((0..n).map(|i| (f[i] - cost[[i, j]]) / eps));
            g[j] = eps * (lb[j] - l);
        }
        g_hist.push(g.clone());
        for i in 0..n {
            let l = lse((0..m).map(|j| (g[j] - cost[[i, j]]) / eps));
            f[i] = eps * (la[i] - l);
        }
        f_hist.push(f.clone());
    }
    SinkhornRun { f_hist, g_hist }
}

fn plan_cost<T: Element>(run: &SinkhornRun<T>, cost: &Array2<T>, eps: T) -> T {
    let f = run.f_hist.last().unwrap();
    let g = run.g_hist.last().unwrap();
    let cap = lit::<T>(40.0);
    let mut total = T::zero();
    for i in 0..f.len() {
        for j in 0..g.len() {
            let e = ((f[i] + g[j] - cost[[i, j]]) / eps).min(cap);
            total += e.exp() * cost[[i, j]];
        }
    }
    total
}

/// Entropic OT cost between histograms `a` (length n) and `b` (length m)
/// over a fixed cost matrix. Differentiable in `a` and `b`.
pub fn sinkhorn_cost<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    cost: std::rc::Rc<Array2<T>>,
    epsilon: f64,
    iterations: usize,
) -> Tensor<T> {
    assert!(epsilon > 0.0 && iterations >= 1);
    let eps = lit::<T>(epsilon);
    let a_arr: Array1<T> = a.data().iter().cloned().collect();
    let b_arr: Array1<T> = b.data().iter().cloned().collect();
    let (n, m) = (a_arr.len(), b_arr.len());
    assert_eq!(cost.shape(), [n, m], "cost matrix shape mismatch");

    let la = masked_log(&a_arr);
    let lb = masked_log(&b_arr);
    let run = run_forward(&la, &lb, &cost, eps, iterations);
    let loss = plan_cost(&run, &cost, eps);

    let a_shape = a.shape();
    let b_shape = b.shape();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[1]), loss),
        vec![a.clone(), b.clone()],
        Box::new(move |up, ps| {
            let upstream = up[[0]];
            let a_data: Array1<T> = ps[0].data().iter().cloned().collect();
            let b_data: Array1<T> = ps[1].data().iter().cloned().collect();
            let t = run.g_hist.len();
            let f_t = run.f_hist.last().unwrap();
            let g_t = run.g_hist.last().unwrap();
            let cap = lit::<T>(40.0);

            // Direct derivative of the plan cost w.r.t. final potentials.
            let mut gf = Array1::<T>::zeros(n);
            let mut gg = Array1::<T>::zeros(m);
            for i in 0..n {
                for j in 0..m {
                    let e = ((f_t[i] + g_t[j] - cost[[i, j]]) / eps).min(cap);
                    let p = e.exp() * cost[[i, j]] / eps * upstream;
                    gf[i] += p;
                    gg[j] += p;
                }
            }

            let mut gla = Array1::<T>::zeros(n);
            let mut glb = Array1::<T>::zeros(m);
            for step in (0..t).rev() {
                let g_s = &run.g_hist[step];
                let f_prev = &run.f_hist[step];
                // f_{s+1} = eps*la - eps*lse_j((g_s - C)/eps)
                for i in 0..n {
                    gla[i] += eps * gf[i];
                }
                // gg_j -= sum_i gf_i * softmax_j((g_s[j]-C_ij)/eps)
                for i in 0..n {
                    if gf[i] == T::zero() {
                        continue;
                    }
                    let l = lse((0..m).map(|j| (g_s[j] - cost[[i, j]]) / eps));
                    for j in 0..m {
                        let wij = ((g_s[j] - cost[[i, j]]) / eps - l).exp();
                        gg[j] -= gf[i] * wij;
                    }
                }
                // g_{s+1} = eps*lb - eps*lse_i((f_s - C)/eps)
                for j in 0..m {
                    glb[j] += eps * gg[j];
                }
                // gf_prev_i = -sum_j gg_j * softmax_i((f_s[i]-C_ij)/eps)
                let mut gf_prev = Array1::<T>::zeros(n);
                for j in 0..m {
                    if gg[j] == T::zero() {
                        continue;
                    }
                    let l = lse((0..n).map(|i| (f_prev[i] - cost[[i, j]]) / eps));
                    for i in 0..n {
                        let vij = ((f_prev[i] - cost[[i, j]]) / eps - l).exp();
                        gf_prev[i] -= gg[j] * vij;
                    }
                }
                gf = gf_prev;
                gg.fill(T::zero());
            }

            let cutoff = lit::<T>(SUPPORT_CUTOFF);
            let ga: Array1<T> = gla
                .iter()
                .zip(a_data.iter())
                .map(|(&gl, &av)| if av > cutoff { gl / av } else { T::zero() })
                .collect();
            let gb: Array1<T> = glb
                .iter()
                .zip(b_data.iter())
                .map(|(&gl, &bv)| if bv > cutoff { gl / bv } else { T::zero() })
                .collect();
            vec![
                Some(crate::ops::reshape_arr(ga.into_dyn(), &a_shape)),
                Some(crate::ops::reshape_arr(gb.into_dyn(), &b_shape)),
            ]
        }),
    )
}

/// Squared-Euclidean cost between pixel centers of an `h x w` grid with both
/// axes normalized to `[0, 1]`.
pub fn grid_cost_matrix<T: Element>(h: usize, w: usize) -> Array2<T> {
    let n = h * w;
    let coords: Vec<(f64, f64)> = (0..n)
        .map(|idx| {
            let y = (idx / w) as f64;
            let x = (idx % w) as f64;
            ((y + 0.5) / h as f64, (x + 0.5) / w as f64)
        })
        .collect();
    let mut cost = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let dy = coords[i].0 - coords[j].0;
            let dx = coords[i].1 - coords[j].1;
            cost[[i, j]] = lit::<T>(dy * dy + dx * dx);
        }
    }
    cost
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_diracs_cost_zero() {
        let mut a = ArrayD::<f64>::zeros(IxDyn(&[4]));
        a[[1]] = 1.0;
        let at = Tensor::param(a.clone());
        let bt = Tensor::param(a);
        let cost = std::rc::Rc::new(grid_cost_matrix::<f64>(2, 2));
        let l = sinkhorn_cost(&at, &bt, cost, 1e-2, 50);
        assert!(l.value().abs() < 1e-6, "got {}", l.value());
    }

    #[test]
    fn separated_diracs_cost_squared_distance() {
        // 1x4 grid: pixels at x = 0.125, 0.375, 0.625, 0.875
        let mut a = ArrayD::<f64>::zeros(IxDyn(&[4]));
        let mut b = ArrayD::<f64>::zeros(IxDyn(&[4]));
        a[[0]] = 1.0;
        b[[2]] = 1.0; // distance 0.5
        let at = Tensor::param(a);
        let bt = Tensor::param(b);
        let cost = std::rc::Rc::new(grid_cost_matrix::<f64>(1, 4));
        let l = sinkhorn_cost(&at, &bt, cost, 1e-3, 100);
        assert!((l.value() - 0.25).abs() < 0.005, "got {}", l.value());
    }
}
