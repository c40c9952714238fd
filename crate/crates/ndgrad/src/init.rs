//! Deterministic parameter initializers. All sampling happens in f64 and is
//! cast to the target element type, so different precisions see the same
//! values (up to rounding) for the same seed.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{lit, Element, Tensor};

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn trunc_normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let mut data = ArrayD::<T>::zeros(IxDyn(shape));
    for v in data.iter_mut() {
        let z = loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z;
            }
        };
        *v = lit::<T>(z * std);
    }
    Tensor::param(data)
}

/// Kaiming-normal fan-in initialization for ReLU stacks.
pub fn kaiming_normal<T: Element, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let mut data = ArrayD::<T>::zeros(IxDyn(shape));
    for v in data.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = lit::<T>(z * std);
    }
    Tensor::param(data)
}

pub fn zeros<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::param(ArrayD::zeros(IxDyn(shape)))
}

pub fn ones<T: Element>(shape: &[usize]) -> Tensor<T> {
    Tensor::param(ArrayD::from_elem(IxDyn(shape), T::one()))
}
