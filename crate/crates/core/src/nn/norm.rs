use ndarray::{s, Array1, Array3, Array4, ArrayD, ArrayView3, Axis};
use rayon::prelude::*;

use super::{join, Module, Param, Slot};
use crate::scalar::Scalar;

/// Per-channel normalization with an affine transform.
///
/// The first `instance_channels` channels are instance-normalized (statistics per sample);
/// the remaining channels are batch-normalized (statistics over the batch in training,
/// running averages in evaluation). `instance_channels = 0` is plain batch normalization;
/// half the channels gives the mixed instance/batch layout.
#[derive(Debug, Clone)]
pub struct Norm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub instance_channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug)]
pub struct NormCache<T> {
    xhat: Array4<T>,
    /// Per channel, one inverse standard deviation per normalization group.
    inv_std: Vec<Vec<T>>,
    /// Whether batch channels used batch statistics (true) or frozen running statistics.
    batch_stats: bool,
}

/// Mean and biased variance of a group.
fn moments<T: Scalar>(values: impl Iterator<Item = T> + Clone, count: usize) -> (T, T) {
    let m = T::from_usize_lossy(count);
    let mean = values.clone().fold(T::zero(), |a, v| a + v) / m;
    let var = values.fold(T::zero(), |a, v| a + (v - mean) * (v - mean)) / m;
    (mean, var)
}

impl<T: Scalar> Norm2d<T> {
    pub fn new(channels: usize, instance_channels: usize) -> Self {
        assert!(instance_channels <= channels);
        Self {
            gamma: Param::new(ArrayD::from_elem(vec![channels], T::one())),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: ArrayD::zeros(vec![channels]),
            running_var: ArrayD::from_elem(vec![channels], T::one()),
            instance_channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalizes one channel (`N x H x W`), returning `xhat` and per-group inverse stds.
    /// `running` is `Some((mean, var))` when frozen statistics apply.
    fn normalize_channel(&self, x: ArrayView3<'_, T>, instance: bool, running: Option<(T, T)>) -> (Array3<T>, Vec<T>, Option<(T, T)>) {
        let eps = T::lit(self.eps);
        let (n, h, w) = x.dim();
        let mut xhat = Array3::zeros((n, h, w));
        if instance {
            let mut inv = Vec::with_capacity(n);
            for b in 0..n {
                let sample = x.index_axis(Axis(0), b);
                let (mean, var) = moments(sample.iter().copied(), h * w);
                let is = T::one() / (var + eps).sqrt();
                xhat.index_axis_mut(Axis(0), b).assign(&sample.mapv(|v| (v - mean) * is));
                inv.push(is);
            }
            (xhat, inv, None)
        } else {
            let (mean, var, batch) = match running {
                Some((m, v)) => (m, v, None),
                None => {
                    let (m, v) = moments(x.iter().copied(), n * h * w);
                    (m, v, Some((m, v)))
                }
            };
            let is = T::one() / (var + eps).sqrt();
            xhat.zip_mut_with(&x, |o, &v| *o = (v - mean) * is);
            (xhat, vec![is], batch)
        }
    }

    fn run(&self, x: &Array4<T>, batch_stats: bool) -> (Array4<T>, NormCache<T>, Vec<Option<(T, T)>>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels(), "norm channels");
        let per_channel: Vec<_> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let instance = ch < self.instance_channels;
                let running = (!instance && !batch_stats)
                    .then(|| (self.running_mean[[ch]], self.running_var[[ch]]));
                self.normalize_channel(x.slice(s![.., ch, .., ..]), instance, running)
            })
            .collect();
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut out = Array4::zeros((n, c, h, w));
        let mut inv_std = Vec::with_capacity(c);
        let mut stats = Vec::with_capacity(c);
        for (ch, (xh, inv, st)) in per_channel.into_iter().enumerate() {
            let (g, b) = (self.gamma.value[[ch]], self.beta.value[[ch]]);
            out.slice_mut(s![.., ch, .., ..]).assign(&xh.mapv(|v| g * v + b));
            xhat.slice_mut(s![.., ch, .., ..]).assign(&xh);
            inv_std.push(inv);
            stats.push(st);
        }
        (out, NormCache { xhat, inv_std, batch_stats }, stats)
    }

    /// Training forward: batch statistics, running averages updated.
    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, NormCache<T>) {
        let (n, _, h, w) = x.dim();
        let (out, cache, stats) = self.run(x, true);
        let mom = T::lit(self.momentum);
        let count = n * h * w;
        let unbias = if count > 1 {
            T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
        } else {
            T::one()
        };
        for (ch, st) in stats.into_iter().enumerate() {
            if let Some((mean, var)) = st {
                let rm = &mut self.running_mean[[ch]];
                *rm = (T::one() - mom) * *rm + mom * mean;
                let rv = &mut self.running_var[[ch]];
                *rv = (T::one() - mom) * *rv + mom * var * unbias;
            }
        }
        (out, cache)
    }

    /// Evaluation forward; the cache is only needed for gradient checks.
    pub fn forward_eval(&self, x: &Array4<T>) -> (Array4<T>, NormCache<T>) {
        let (out, cache, _) = self.run(x, false);
        (out, cache)
    }

    pub fn backward(&mut self, cache: NormCache<T>, grad: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = grad.dim();
        let NormCache { xhat, inv_std, batch_stats } = cache;
        let results: Vec<(Array3<T>, T, T)> = (0..c)
            .into_par_iter()
            .map(|ch| {
                let g = grad.slice(s![.., ch, .., ..]);
                let xh = xhat.slice(s![.., ch, .., ..]);
                let dgamma = g.iter().zip(xh.iter()).fold(T::zero(), |a, (&gv, &xv)| a + gv * xv);
                let dbeta = g.iter().fold(T::zero(), |a, &gv| a + gv);
                let gamma = self.gamma.value[[ch]];
                let mut dx = Array3::zeros((n, h, w));
                let groups: Vec<(Vec<usize>, T)> = if ch < self.instance_channels {
                    (0..n).map(|b| (vec![b], inv_std[ch][b])).collect()
                } else {
                    vec![((0..n).collect(), inv_std[ch][0])]
                };
                let frozen = ch >= self.instance_channels && !batch_stats;
                for (members, is) in groups {
                    if frozen {
                        for &b in &members {
                            dx.index_axis_mut(Axis(0), b)
                                .assign(&g.index_axis(Axis(0), b).mapv(|v| v * gamma * is));
                        }
                        continue;
                    }
                    let m = T::from_usize_lossy(members.len() * h * w);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for &b in &members {
                        for (&gv, &xv) in g.index_axis(Axis(0), b).iter().zip(xh.index_axis(Axis(0), b)) {
                            let d = gv * gamma;
                            sum_d += d;
                            sum_dx += d * xv;
                        }
                    }
                    for &b in &members {
                        let mut dst = dx.index_axis_mut(Axis(0), b);
                        ndarray::Zip::from(&mut dst)
                            .and(g.index_axis(Axis(0), b))
                            .and(xh.index_axis(Axis(0), b))
                            .for_each(|o, &gv, &xv| {
                                *o = is / m * (m * gv * gamma - sum_d - xv * sum_dx);
                            });
                    }
                }
                (dx, dgamma, dbeta)
            })
            .collect();
        let mut dx = Array4::zeros((n, c, h, w));
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for (ch, (d, dg, db)) in results.into_iter().enumerate() {
            dx.slice_mut(s![.., ch, .., ..]).assign(&d);
            dgamma[ch] = dg;
            dbeta[ch] = db;
        }
        self.gamma.grad += &dgamma.into_dyn();
        self.beta.grad += &dbeta.into_dyn();
        dx
    }
}

impl<T: Scalar> Module<T> for Norm2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'_, T>)) {
        f(join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(join(prefix, "running_mean"), Slot::Buffer(&mut self.running_mean));
        f(join(prefix, "running_var"), Slot::Buffer(&mut self.running_var));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn check_gradients(instance_channels: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(instance_channels as u64);
        let mut norm = Norm2d::<f64>::new(4, instance_channels);
        for ch in 0..4 {
            norm.gamma.value[[ch]] = rng.random_range(0.5..1.5);
            norm.beta.value[[ch]] = rng.random_range(-0.5..0.5);
        }
        let x = Array4::from_shape_simple_fn((3, 4, 3, 2), || rng.random_range(-2.0..2.0));
        let probe = Array4::from_shape_simple_fn((3, 4, 3, 2), || rng.random_range(-1.0..1.0));
        let objective = |n: &Norm2d<f64>, x: &Array4<f64>| (n.clone().forward_train(x).0 * &probe).sum();
        let (_, cache) = norm.clone().forward_train(&x);
        let dx = norm.backward(cache, &probe);
        let h = 1e-6;
        for idx in [[0usize, 0, 0, 0], [2, 1, 2, 1], [1, 3, 1, 0], [0, 2, 0, 1]] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[idx] += h;
            xm[idx] -= h;
            let num = (objective(&norm, &xp) - objective(&norm, &xm)) / (2.0 * h);
            assert!((num - dx[idx]).abs() < 1e-6, "{idx:?}: {num} vs {}", dx[idx]);
        }
        for ch in 0..4 {
            let (mut p, mut m) = (norm.clone(), norm.clone());
            p.gamma.value[[ch]] += h;
            m.gamma.value[[ch]] -= h;
            let num = (objective(&p, &x) - objective(&m, &x)) / (2.0 * h);
            assert!((num - norm.gamma.grad[[ch]]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_norm_gradients() {
        check_gradients(0);
    }

    #[test]
    fn mixed_instance_batch_gradients() {
        check_gradients(2);
    }

    #[test]
    fn training_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut norm = Norm2d::<f64>::new(2, 1);
        let x = Array4::from_shape_simple_fn((4, 2, 3, 3), || rng.random_range(0.0..5.0));
        let (y, _) = norm.forward_train(&x);
        let ch1 = y.slice(s![.., 1, .., ..]);
        assert!(ch1.mean().unwrap().abs() < 1e-12);
        let inst = y.slice(s![2, 0, .., ..]);
        assert!(inst.mean().unwrap().abs() < 1e-12);
        assert!(norm.running_mean[[1]] != 0.0);
        assert_eq!(norm.running_mean[[0]], 0.0);
    }

    #[test]
    fn eval_mode_is_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let norm = Norm2d::<f64>::new(2, 1);
        let x = Array4::from_shape_simple_fn((2, 2, 2, 2), || rng.random_range(0.0..1.0));
        let (full, _) = norm.forward_eval(&x);
        let one = x.slice(s![1..2, .., .., ..]).to_owned();
        let (single, _) = norm.forward_eval(&one);
        assert_eq!(full.slice(s![1..2, .., .., ..]), single);
    }
}
