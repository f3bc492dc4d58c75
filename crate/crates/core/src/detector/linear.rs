use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Dense affine layer `y = W x + b` with row-major `W` of shape `out x inp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inp: usize,
    pub out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self { inp, out, w: vec![0.0; inp * out], b: vec![0.0; out] }
    }

    /// He-style gaussian init scaled by `gain`.
    pub fn random(inp: usize, out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, gain * (2.0 / inp as f64).sqrt()).expect("finite std");
        let w = (0..inp * out).map(|_| normal.sample(rng)).collect();
        Self { inp, out, w, b: vec![0.0; out] }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.inp, self.out)
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.inp);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            *yo = self.b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.out];
        self.forward(x, &mut y);
        y
    }

    /// Accumulates parameter gradients for upstream `dy` at input `x` into `self`.
    pub fn accumulate(&mut self, x: &[f64], dy: &[f64]) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.b[o] += g;
            let row = &mut self.w[o * self.inp..(o + 1) * self.inp];
            for (w, xi) in row.iter_mut().zip(x) {
                *w += g * xi;
            }
        }
    }

    /// Adds `W^T dy` into `dx`.
    pub fn backward_input(&self, dy: &[f64], dx: &mut [f64]) {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.w[o * self.inp..(o + 1) * self.inp];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
    }
}
