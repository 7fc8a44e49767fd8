//! Polynomial learning-rate decay and SGD with momentum.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

/// `init_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: u64, max_iter: u64, init_lr: f64, power: f64) -> Result<f64> {
    if iter > max_iter || max_iter == 0 {
        return Err(Error::Schedule { iter, max_iter });
    }
    Ok(init_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// Momentum SGD with weight decay added to the gradient:
/// `b <- m b + g + wd theta`, `theta <- theta - lr b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &ParamSet<T>, momentum: f64, weight_decay: f64) -> Self {
        let buffers = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { momentum, weight_decay, buffers }
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        &self.buffers[id.0]
    }

    /// Updates every parameter; a parameter absent from `grads` has zero
    /// gradient but still decays and carries momentum.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &HashMap<ParamId, Tensor<T>>, lr: f64) {
        let m = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for id in params.ids().collect::<Vec<_>>() {
            let theta = params.get_mut(id);
            let buf = self.buffers[id.0].data_mut();
            let g = grads.get(&id).map(Tensor::data);
            for (i, (b, th)) in buf.iter_mut().zip(theta.data_mut()).enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                *b = m * *b + gi + wd * *th;
                *th = *th - lr * *b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_values() {
        assert_eq!(poly_lr(0, 100, 0.001, 0.9).unwrap(), 0.001);
        assert_eq!(poly_lr(100, 100, 0.001, 0.9).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 0.001, 0.9).unwrap();
        assert!((mid - 0.001 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 5.358_867_312_681_466e-4).abs() < 1e-12);
        assert!(matches!(poly_lr(101, 100, 0.001, 0.9), Err(Error::Schedule { iter: 101, max_iter: 100 })));
    }

    #[test]
    fn two_parameter_step_matches_hand_recurrence() {
        let mut ps = ParamSet::<f64>::new();
        let a = ps.insert("a", Tensor::from_vec(&[1], vec![0.5]));
        let b = ps.insert("b", Tensor::from_vec(&[1], vec![-2.0]));
        let mut opt = Sgd::new(&ps, 0.9, 1e-5);
        let (lr, ga, gb) = (0.1, 0.3, -0.7);
        let grads = HashMap::from([(a, Tensor::from_vec(&[1], vec![ga])), (b, Tensor::from_vec(&[1], vec![gb]))]);
        opt.step(&mut ps, &grads, lr);
        let ba = ga + 1e-5 * 0.5;
        let bb = gb + 1e-5 * -2.0;
        assert!((ps.get(a).data()[0] - (0.5 - lr * ba)).abs() < 1e-12);
        assert!((ps.get(b).data()[0] - (-2.0 - lr * bb)).abs() < 1e-12);
        let (ta, tb) = (ps.get(a).data()[0], ps.get(b).data()[0]);
        opt.step(&mut ps, &grads, lr);
        let ba2 = 0.9 * ba + ga + 1e-5 * ta;
        let bb2 = 0.9 * bb + gb + 1e-5 * tb;
        assert!((ps.get(a).data()[0] - (ta - lr * ba2)).abs() < 1e-12);
        assert!((ps.get(b).data()[0] - (tb - lr * bb2)).abs() < 1e-12);
        assert!((opt.buffer(a).data()[0] - ba2).abs() < 1e-12);
    }
}
