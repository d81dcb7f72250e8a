use ndarray::{Array1, Array2, Axis, Dimension, Ix1, Ix2, Zip};
use rand::Rng;

use super::{join, Module, Param, Slot};
use crate::scalar::Scalar;

/// Affine layer `y = x W^T + b` with `W` stored as `out x in`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug)]
pub struct LinearCache<T> {
    input: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization for weights and bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..bound));
        let w = Array2::from_shape_simple_fn((outputs, inputs), &mut draw);
        let b = Array1::from_shape_simple_fn(outputs, &mut draw);
        Self {
            weight: Param::new(w.into_dyn()),
            bias: Param::new(b.into_dyn()),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<T>, keep_cache: bool) -> (Array2<T>, Option<LinearCache<T>>) {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight");
        let b = self.bias.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        let out = x.dot(&w.t()) + &b;
        (out, keep_cache.then(|| LinearCache { input: x.clone() }))
    }

    pub fn backward(&mut self, cache: LinearCache<T>, grad: &Array2<T>) -> Array2<T> {
        let dw = grad.t().dot(&cache.input);
        let db = grad.sum_axis(Axis(0));
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &db.into_dyn();
        let w = self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight");
        grad.dot(&w)
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

pub fn relu<T: Scalar, D: Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Scalar, D: Dimension>(
    output: &ndarray::Array<T, D>,
    grad: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut out = grad.clone();
    Zip::from(&mut out).and(output).for_each(|g, &y| {
        if y <= T::zero() {
            *g = T::zero();
        }
    });
    out
}

/// Row-wise L2 normalization; also returns the row norms for the backward pass.
pub fn l2_normalize_rows<T: Scalar>(x: &Array2<T>) -> (Array2<T>, Array1<T>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(T::lit(1e-12)));
    let out = x / &norms.view().insert_axis(Axis(1));
    (out, norms)
}

/// `dx = (dy - y <y, dy>) / ||x||` per row.
pub fn l2_normalize_rows_backward<T: Scalar>(y: &Array2<T>, norms: &Array1<T>, grad: &Array2<T>) -> Array2<T> {
    let mut dx = grad.clone();
    for ((mut d, yr), &n) in dx.outer_iter_mut().zip(y.outer_iter()).zip(norms) {
        let proj = yr.dot(&d);
        Zip::from(&mut d).and(yr).for_each(|g, &yv| *g = (*g - yv * proj) / n);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut lin = Linear::<f64>::new(5, 3, &mut rng);
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        let probe = Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0..1.0));
        let (_, cache) = lin.forward(&x, true);
        let dx = lin.backward(cache.unwrap(), &probe);
        let obj = |l: &Linear<f64>, x: &Array2<f64>| (l.forward(x, false).0 * &probe).sum();
        let h = 1e-6;
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[[2, 3]] += h;
        xm[[2, 3]] -= h;
        assert!(((obj(&lin, &xp) - obj(&lin, &xm)) / (2.0 * h) - dx[[2, 3]]).abs() < 1e-8);
        let (mut p, mut m) = (lin.clone(), lin.clone());
        p.bias.value[[1]] += h;
        m.bias.value[[1]] -= h;
        assert!(((obj(&p, &x) - obj(&m, &x)) / (2.0 * h) - lin.bias.grad[[1]]).abs() < 1e-8);
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Array2<f64> = Array2::from_shape_simple_fn((2, 4), || rng.random_range(-1.0..1.0));
        let probe: Array2<f64> = Array2::from_shape_simple_fn((2, 4), || rng.random_range(-1.0..1.0));
        let (y, n) = l2_normalize_rows(&x);
        for r in y.outer_iter() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
        let dx = l2_normalize_rows_backward(&y, &n, &probe);
        let h = 1e-6;
        for idx in [[0usize, 0], [1, 3]] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let num = ((l2_normalize_rows(&xp).0 * &probe).sum() - (l2_normalize_rows(&xm).0 * &probe).sum()) / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-8);
        }
    }
}
