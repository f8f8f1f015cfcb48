//! Pointwise activations. Backward functions take whatever the forward
//! needed to keep: the input for leaky ReLU, the output for ReLU and sigmoid.

use super::{Real, Tensor};

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    x.map(|v| if v > T::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, gy: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    let mut g = gy.clone();
    for (g, &v) in g.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g *= s;
        }
    }
    g
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut g = gy.clone();
    for (g, &v) in g.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    g
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
    let mut g = gy.clone();
    for (g, &v) in g.data_mut().iter_mut().zip(y.data()) {
        *g *= v * (T::one() - v);
    }
    g
}
