//! Minimal layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are `N x C x H x W` (convolutional) or `N x F` (dense). Every forward that will
//! be differentiated returns a cache; `backward` consumes it, accumulates parameter gradients
//! and returns the gradient with respect to the layer input. Per-sample work runs in parallel,
//! but gradient reductions always sum in sample order so results do not depend on the thread
//! count.

mod conv;
mod dense;
mod norm;

pub use conv::{Conv2d, ConvCache};
pub use dense::{l2_normalize_rows, l2_normalize_rows_backward, relu, relu_backward, Linear, LinearCache};
pub use norm::{Norm2d, NormCache};

use ndarray::ArrayD;

use crate::scalar::Scalar;

/// Trainable tensor with its gradient accumulator and optimizer state (`velocity` is the SGD
/// momentum buffer or Adam's first moment, `second` Adam's second moment).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
    pub velocity: ArrayD<T>,
    pub second: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let zeros = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad: zeros.clone(),
            velocity: zeros.clone(),
            second: zeros,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Mutable handle on one named piece of model state.
pub enum Slot<'a, T> {
    Param(&'a mut Param<T>),
    /// Non-trainable state such as running statistics.
    Buffer(&'a mut ArrayD<T>),
}

/// Anything exposing named state for optimization and checkpointing.
pub trait Module<T: Scalar> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gradient descent with momentum and L2 weight decay:
/// `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Scalar, M: Module<T> + ?Sized>(&self, module: &mut M) {
        let lr = T::lit(self.lr);
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        module.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                let Param { value, grad, velocity, .. } = p;
                ndarray::Zip::from(&mut *velocity)
                    .and(&*grad)
                    .and(&*value)
                    .for_each(|v, &g, &w| *v = mu * *v + g + wd * w);
                ndarray::Zip::from(value).and(&*velocity).for_each(|w, &v| *w -= lr * v);
            }
        });
    }
}

/// Adam with L2 weight decay folded into the gradient (`g + wd w`), bias-corrected moments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay }
    }

    /// `step` is the 1-based index of this update.
    pub fn step<T: Scalar, M: Module<T> + ?Sized>(&self, module: &mut M, step: u64) {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let wd = T::lit(self.weight_decay);
        let eps = T::lit(self.eps);
        let c1 = T::one() - T::lit(self.beta1.powi(step as i32));
        let c2 = T::one() - T::lit(self.beta2.powi(step as i32));
        let lr = T::lit(self.lr);
        module.visit("", &mut |_, slot| {
            if let Slot::Param(p) = slot {
                let Param { value, grad, velocity, second } = p;
                ndarray::Zip::from(value)
                    .and(&*grad)
                    .and(velocity)
                    .and(second)
                    .for_each(|w, &g, m, v| {
                        let g = g + wd * *w;
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
            }
        });
    }
}

pub fn zero_grad<T: Scalar, M: Module<T> + ?Sized>(module: &mut M) {
    module.visit("", &mut |_, slot| {
        if let Slot::Param(p) = slot {
            p.zero_grad();
        }
    });
}
