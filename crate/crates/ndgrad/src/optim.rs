//! Named parameter sets, Adam and plain SGD.

use std::cell::RefCell;
use std::rc::Rc;

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::{lit, Element, Tensor};

/// Shared handle to non-trainable state (e.g. batch-norm running statistics).
pub type BufferRef<T> = Rc<RefCell<ArrayD<T>>>;

/// An ordered, named collection of trainable tensors plus state buffers.
/// Iteration order is registration order, which keeps updates and
/// serialization deterministic.
#[derive(Default)]
pub struct ParamSet<T: Element> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, BufferRef<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> Tensor<T> {
        let name = name.into();
        assert!(
            self.params.insert(name.clone(), t.clone()).is_none(),
            "duplicate parameter name {name}"
        );
        t
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, b: BufferRef<T>) -> BufferRef<T> {
        let name = name.into();
        assert!(
            self.buffers.insert(name.clone(), b.clone()).is_none(),
            "duplicate buffer name {name}"
        );
        b
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &BufferRef<T>)> {
        self.buffers.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Global L2 norm of all present gradients.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0f64;
        for t in self.params.values() {
            if let Some(g) = t.grad() {
                sq += g.iter().map(|&v| v.to_f64() * v.to_f64()).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    /// Scale gradients so the global norm does not exceed `max_norm`.
    /// Returns the pre-clip norm.
    pub fn clip_grad_norm(&self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let scale = lit::<T>(max_norm / norm);
            for t in self.params.values() {
                if let Some(mut g) = t.take_grad() {
                    g.mapv_inplace(|v| v * scale);
                    t.set_grad(g);
                }
            }
        }
        norm
    }

    /// Bitwise-exact snapshot of every parameter (registration order).
    pub fn snapshot(&self) -> Vec<(String, ArrayD<T>)> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.to_array()))
            .collect()
    }

    /// Load values by name; shapes must match. Unknown names are an error.
    pub fn load(&self, named: &[(String, ArrayD<T>)]) -> Result<(), String> {
        for (name, arr) in named {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| format!("unknown parameter {name}"))?;
            if t.shape() != arr.shape() {
                return Err(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    t.shape(),
                    arr.shape()
                ));
            }
            t.data_mut().assign(arr);
        }
        Ok(())
    }
}

/// Adam with optional L2 weight decay folded into the gradient.
pub struct Adam<T: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, weight_decay: f64) -> Self {
        let m = params
            .params
            .values()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        let v = params
            .params
            .values()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &ParamSet<T>) {
        self.t += 1;
        let b1 = lit::<T>(self.beta1);
        let b2 = lit::<T>(self.beta2);
        let lr = lit::<T>(self.lr);
        let eps = lit::<T>(self.eps);
        let wd = lit::<T>(self.weight_decay);
        let bc1 = lit::<T>(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = lit::<T>(1.0 - self.beta2.powi(self.t as i32));
        for (idx, p) in params.params.values().enumerate() {
            let Some(mut g) = p.take_grad() else { continue };
            if self.weight_decay != 0.0 {
                let data = p.data();
                ndarray::Zip::from(&mut g).and(&*data).for_each(|g, &w| {
                    *g += wd * w;
                });
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|m, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|v, &g| {
                *v = b2 * *v + (T::one() - b2) * g * g;
            });
            let mut data = p.data_mut();
            ndarray::Zip::from(&mut *data)
                .and(&*m)
                .and(&*v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    pub fn state_arrays(&self) -> (u64, &[ArrayD<T>], &[ArrayD<T>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, t: u64, m: Vec<ArrayD<T>>, v: Vec<ArrayD<T>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Plain stochastic gradient descent.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step<T: Element>(&self, params: &ParamSet<T>) {
        let lr = lit::<T>(self.lr);
        for p in params.params.values() {
            let Some(g) = p.take_grad() else { continue };
            let mut data = p.data_mut();
            ndarray::Zip::from(&mut *data).and(&g).for_each(|w, &g| {
                *w = *w - lr * g;
            });
        }
    }
}
