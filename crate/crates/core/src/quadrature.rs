//! Gauss–Hermite rules for integrals against `exp(-z^2)`, and their tensor
//! products.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

/// One-dimensional Gauss–Hermite rule: `sum_k w_k f(z_k) ~ int exp(-z^2) f(z) dz`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: nodes are the eigenvalues of the symmetric Jacobi matrix
    /// of the Hermite recurrence, weights `sqrt(pi) v_0^2`.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "a Gauss-Hermite rule needs at least one node");
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let off = libm::sqrt(k as f64 / 2.0);
            jacobi[(k, k - 1)] = off;
            jacobi[(k - 1, k)] = off;
        }
        let eig = jacobi.symmetric_eigen();
        let sqrt_pi = libm::sqrt(core::f64::consts::PI);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| {
                let v0 = eig.eigenvectors[(0, j)];
                (eig.eigenvalues[j], sqrt_pi * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // exact symmetry around zero
        for k in 0..n / 2 {
            let z = 0.5 * (pairs[n - 1 - k].0 - pairs[k].0);
            let w = 0.5 * (pairs[n - 1 - k].1 + pairs[k].1);
            pairs[k] = (-z, w);
            pairs[n - 1 - k] = (z, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Tensor-product rule in `dim` dimensions, stored flat.
#[derive(Clone, Debug)]
pub struct TensorRule {
    dim: usize,
    /// `len * dim` node coordinates, point-major.
    points: Vec<f64>,
    /// `log(prod w) + |z|^2` per point: the correction that turns the
    /// `exp(-|z|^2)` rule into a plain-measure rule.
    log_weight: Vec<f64>,
}

impl TensorRule {
    pub fn new(rule: &GaussHermite, dim: usize) -> Self {
        let n = rule.len();
        let total = n.pow(dim as u32);
        let mut points = Vec::with_capacity(total * dim);
        let mut log_weight = Vec::with_capacity(total);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            let mut lw = 0.0;
            for &k in &idx {
                let z = rule.nodes[k];
                points.push(z);
                lw += libm::log(rule.weights[k]) + z * z;
            }
            log_weight.push(lw);
            for d in 0..dim {
                idx[d] += 1;
                if idx[d] < n {
                    break;
                }
                idx[d] = 0;
            }
        }
        TensorRule {
            dim,
            points,
            log_weight,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weight.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.dim..(k + 1) * self.dim]
    }

    pub fn log_weight(&self, k: usize) -> f64 {
        self.log_weight[k]
    }
}
