use ndarray::{Array2, Array4, ArrayView3, Axis, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{join, Module, Param, Slot};
use crate::scalar::Scalar;

/// 3x3 convolution with zero padding 1 and no bias (every convolution feeds a normalization).
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    /// `C_out x (C_in * 9)`.
    pub weight: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Unfolded input patches, one `(C_in * 9) x (H_out * W_out)` matrix per sample.
#[derive(Debug)]
pub struct ConvCache<T> {
    cols: Vec<Array2<T>>,
    in_shape: (usize, usize, usize),
}

const K: usize = 3;

pub(crate) fn out_size(n: usize, stride: usize) -> usize {
    (n + 2 - K) / stride + 1
}

fn im2col<T: Scalar>(x: ArrayView3<'_, T>, stride: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let mut cols = Array2::zeros((c * K * K, ho * wo));
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let mut row = cols.row_mut(ci * K * K + ky * K + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &Array2<T>, shape: (usize, usize, usize), stride: usize) -> ndarray::Array3<T> {
    let (c, h, w) = shape;
    let (ho, wo) = (out_size(h, stride), out_size(w, stride));
    let mut x = ndarray::Array3::zeros(shape);
    for ci in 0..c {
        for ky in 0..K {
            for kx in 0..K {
                let row = cols.row(ci * K * K + ky * K + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            x[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialization (fan-in).
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let fan_in = (in_channels * K * K) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w = Array2::from_shape_simple_fn((out_channels, in_channels * K * K), || {
            T::lit(normal.sample(rng))
        });
        Self {
            weight: Param::new(w.into_dyn()),
            in_channels,
            out_channels,
            stride,
        }
    }

    fn weight2(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&self, x: &Array4<T>, keep_cache: bool) -> (Array4<T>, Option<ConvCache<T>>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = (out_size(h, self.stride), out_size(w, self.stride));
        let weight = self.weight2();
        let per_sample: Vec<(Array2<T>, Array2<T>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let cols = im2col(x.index_axis(Axis(0), i), self.stride);
                let out = weight.dot(&cols);
                (out, cols)
            })
            .collect();
        let mut out = Array4::zeros((n, self.out_channels, ho, wo));
        let mut cols = Vec::with_capacity(if keep_cache { n } else { 0 });
        for (i, (o, col)) in per_sample.into_iter().enumerate() {
            out.index_axis_mut(Axis(0), i)
                .assign(&o.into_shape_with_order((self.out_channels, ho, wo)).expect("conv output shape"));
            if keep_cache {
                cols.push(col);
            }
        }
        let cache = keep_cache.then_some(ConvCache {
            cols,
            in_shape: (c, h, w),
        });
        (out, cache)
    }

    /// Accumulates the weight gradient; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, cache: ConvCache<T>, grad: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let (n, co, ho, wo) = grad.dim();
        let weight = self.weight2().to_owned();
        let stride = self.stride;
        let in_shape = cache.in_shape;
        let per_sample: Vec<(Array2<T>, Option<ndarray::Array3<T>>)> = cache
            .cols
            .into_par_iter()
            .enumerate()
            .map(|(i, cols)| {
                let g = grad
                    .index_axis(Axis(0), i)
                    .to_owned()
                    .into_shape_with_order((co, ho * wo))
                    .expect("grad shape");
                let dw = g.dot(&cols.t());
                let dx = need_input_grad.then(|| col2im(&weight.t().dot(&g), in_shape, stride));
                (dw, dx)
            })
            .collect();
        let mut dx = need_input_grad.then(|| Array4::zeros((n, in_shape.0, in_shape.1, in_shape.2)));
        let mut dw_total = Array2::<T>::zeros(weight.raw_dim());
        for (i, (dw, dxi)) in per_sample.into_iter().enumerate() {
            dw_total += &dw;
            if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
                dx.index_axis_mut(Axis(0), i).assign(&dxi);
            }
        }
        self.weight.grad += &dw_total.into_dyn();
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "weight"), Slot::Param(&mut self.weight));
    }
}
