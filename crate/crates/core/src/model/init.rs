//! Seeded parameter initialisation. Each tensor draws from its own stream
//! keyed by its name, so initial values do not depend on registration order.

use rand_distr::{Distribution, Normal};

use crate::params::{ParamId, ParamSet};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub struct Init<'a, T: Real> {
    params: &'a mut ParamSet<T>,
    seed: u64,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, seed: u64) -> Self {
        Self { params, seed }
    }

    /// Zero-mean normal with std `sqrt(gain / fan_in)`.
    fn normal_gain(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let std = (gain / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let mut r = rng::stream(self.seed, name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(&mut r))).collect();
        self.params.insert(name, Tensor::from_vec(shape, data))
    }

    /// LeCun-normal weights, used for attention and projection matrices.
    pub fn normal(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        self.normal_gain(name, shape, fan_in, 1.0)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.params.insert(name, Tensor::zeros(shape))
    }

    /// He-normal conv weight `[cout, cin, k, k]` plus zero bias.
    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> (ParamId, ParamId) {
        let w = self.normal_gain(&format!("{name}.w"), &[cout, cin, k, k], cin * k * k, 2.0);
        let b = self.zeros(&format!("{name}.b"), &[cout]);
        (w, b)
    }

    /// `[cin, cout]` weight plus zero bias.
    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> (ParamId, ParamId) {
        let w = self.normal(&format!("{name}.w"), &[cin, cout], cin);
        let b = self.zeros(&format!("{name}.b"), &[cout]);
        (w, b)
    }

    /// Layer-norm scale (ones) and offset (zeros).
    pub fn norm(&mut self, name: &str, width: usize) -> (ParamId, ParamId) {
        let g = self.params.insert(format!("{name}.g"), Tensor::full(&[width], T::one()));
        let b = self.zeros(&format!("{name}.b"), &[width]);
        (g, b)
    }
}
