//! Dense-layer micro-toolkit for the two tiny networks in this crate (the
//! latent decoder and the guidance towers). Layers expose explicit forward /
//! backward passes; gradients land in caller-owned buffers so the hot
//! sampling loop can run allocation-free.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Fully connected layer, weights row-major `[out_dim x in_dim]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Gradient accumulator with the same shape as its layer.
#[derive(Debug, Clone)]
pub struct AffineGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Affine { in_dim, out_dim, w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim] }
    }

    /// Gaussian init with per-row scale `scale / sqrt(in_dim)`.
    pub fn seeded(in_dim: usize, out_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let std = scale / (in_dim as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
        let w = (0..in_dim * out_dim).map(|_| rng.sample(normal)).collect();
        Affine { in_dim, out_dim, w, b: vec![0.0; out_dim] }
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_dim);
        for (o, (row, &b)) in out
            .iter_mut()
            .zip(self.w.chunks_exact(self.in_dim).zip(&self.b))
        {
            let mut acc = b;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            *o = acc;
        }
    }

    /// Input gradient: `gx = W^T gout`. Overwrites `gx`.
    pub fn backward_input(&self, gout: &[f64], gx: &mut [f64]) {
        debug_assert_eq!(gout.len(), self.out_dim);
        debug_assert_eq!(gx.len(), self.in_dim);
        gx.fill(0.0);
        for (row, &g) in self.w.chunks_exact(self.in_dim).zip(gout) {
            for (gxi, wi) in gx.iter_mut().zip(row) {
                *gxi += wi * g;
            }
        }
    }

    /// Accumulate parameter gradients for input `x` and upstream `gout`.
    pub fn backward_params(&self, x: &[f64], gout: &[f64], grad: &mut AffineGrad) {
        debug_assert_eq!(grad.w.len(), self.w.len());
        for ((row, &g), gb) in grad
            .w
            .chunks_exact_mut(self.in_dim)
            .zip(gout)
            .zip(&mut grad.b)
        {
            *gb += g;
            for (gwi, xi) in row.iter_mut().zip(x) {
                *gwi += g * xi;
            }
        }
    }

    pub fn grad_buffer(&self) -> AffineGrad {
        AffineGrad { w: vec![0.0; self.w.len()], b: vec![0.0; self.b.len()] }
    }

    /// Plain gradient step `p -= lr * g`.
    pub fn apply_step(&mut self, grad: &AffineGrad, lr: f64) {
        for (p, g) in self.w.iter_mut().zip(&grad.w) {
            *p -= lr * g;
        }
        for (p, g) in self.b.iter_mut().zip(&grad.b) {
            *p -= lr * g;
        }
    }
}

impl AffineGrad {
    pub fn reset(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.w {
            *g *= s;
        }
        for g in &mut self.b {
            *g *= s;
        }
    }
}

pub fn tanh_inplace(x: &mut [f64]) {
    for v in x {
        *v = v.tanh();
    }
}

/// Backward through tanh given the *activated* values `y = tanh(x)`:
/// scales `g` by `1 - y^2` in place.
pub fn tanh_backward_inplace(y: &[f64], g: &mut [f64]) {
    for (gi, yi) in g.iter_mut().zip(y) {
        *gi *= 1.0 - yi * yi;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fd_input_grad(layer: &Affine, x: &[f64], gout: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; layer.out_dim];
        let mut grad = vec![0.0; x.len()];
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            layer.forward(&xp, &mut out);
            let fp = dot(&out, gout);
            let mut xm = x.to_vec();
            xm[i] -= h;
            layer.forward(&xm, &mut out);
            let fm = dot(&out, gout);
            grad[i] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let layer = Affine::seeded(5, 3, 1.0, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.7).collect();
        let gout = vec![0.5, -1.2, 2.0];
        let mut gx = vec![0.0; 5];
        layer.backward_input(&gout, &mut gx);
        let fd = fd_input_grad(&layer, &x, &gout);
        for (a, b) in gx.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(8);
        let mut layer = Affine::seeded(3, 2, 1.0, &mut rng);
        let x = vec![0.4, -0.2, 1.1];
        let gout = vec![1.0, -0.5];
        let mut grad = layer.grad_buffer();
        layer.backward_params(&x, &gout, &mut grad);
        let h = 1e-6;
        let mut out = vec![0.0; 2];
        for i in 0..layer.w.len() {
            let orig = layer.w[i];
            layer.w[i] = orig + h;
            layer.forward(&x, &mut out);
            let fp = dot(&out, &gout);
            layer.w[i] = orig - h;
            layer.forward(&x, &mut out);
            let fm = dot(&out, &gout);
            layer.w[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad.w[i] - fd).abs() < 1e-6);
        }
    }

    #[test]
    fn tanh_backward_uses_activated_values() {
        let mut y = vec![0.3, -0.8];
        tanh_inplace(&mut y);
        let mut g = vec![1.0, 1.0];
        tanh_backward_inplace(&y, &mut g);
        for (gi, yi) in g.iter().zip(&y) {
            assert!((gi - (1.0 - yi * yi)).abs() < 1e-12);
        }
    }
}

/// Solve a small dense linear system `A x = b` by Gaussian elimination with
/// partial pivoting. Returns `None` when the system is effectively singular.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|row| row.len() == n));
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap()
        })?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in row + 1..n {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}
