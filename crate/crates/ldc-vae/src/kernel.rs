//! RBF kernel K(a, b) = exp(-|a-b|^2 / h) and its closed-form gradient
//! grad_a K = -(2/h)(a - b) K. Note the convention: h divides the squared
//! distance directly, and the median heuristic is h = med^2 / ln n over the
//! pairwise distances of the particle set.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Smallest bandwidth ever returned; also the fallback when every pairwise
/// distance is zero.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct RbfKernel {
    bandwidth: f64,
}

impl RbfKernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !bandwidth.is_finite() || bandwidth <= 0.0 {
            return Err(Error::Contract(format!(
                "RbfKernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(RbfKernel { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-d2 / self.bandwidth).exp()
    }

    /// Gradient of K(a, b) with respect to `a`.
    pub fn grad_wrt_first(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let k = self.eval(a, b);
        a.iter()
            .zip(b)
            .map(|(x, y)| -(2.0 / self.bandwidth) * (x - y) * k)
            .collect()
    }

    /// All pairwise values and first-argument gradients between two point
    /// sets of equal dimension.
    pub fn cross(&self, a: &Tensor, b: &Tensor) -> Result<KernelMatrix> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
            return Err(Error::shape(
                "RbfKernel::cross",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            ));
        }
        let (n, m, d) = (a.rows(), b.rows(), a.cols());
        let mut values = vec![0.0; n * m];
        let mut grads = vec![0.0; n * m * d];
        for i in 0..n {
            let ai = a.row(i);
            for j in 0..m {
                let bj = b.row(j);
                let d2: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
                let k = (-d2 / self.bandwidth).exp();
                values[i * m + j] = k;
                let g = &mut grads[(i * m + j) * d..(i * m + j + 1) * d];
                for ((gk, &x), &y) in g.iter_mut().zip(ai).zip(bj) {
                    *gk = -(2.0 / self.bandwidth) * (x - y) * k;
                }
            }
        }
        Ok(KernelMatrix { n, m, d, values, grads })
    }

    /// Pairwise values and gradients within one point set.
    pub fn square(&self, points: &Tensor) -> Result<KernelMatrix> {
        self.cross(points, points)
    }
}

/// Dense kernel evaluations between a row set (first index) and a column set.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    n: usize,
    m: usize,
    d: usize,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl KernelMatrix {
    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.m
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    /// grad_{a_i} K(a_i, b_j), a d-vector.
    pub fn grad(&self, i: usize, j: usize) -> &[f64] {
        &self.grads[(i * self.m + j) * self.d..(i * self.m + j + 1) * self.d]
    }
}

/// Median heuristic h = med^2 / ln n over all pairwise Euclidean distances.
/// A single point has no pairs and gets the floor; so does a degenerate set
/// where the median distance is zero.
pub fn median_bandwidth(points: &Tensor) -> Result<f64> {
    if points.shape().len() != 2 || points.rows() == 0 {
        return Err(Error::shape(
            "median_bandwidth",
            format!("{:?}", points.shape()),
        ));
    }
    let n = points.rows();
    if n == 1 {
        return Ok(BANDWIDTH_FLOOR);
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    let h = med * med / (n as f64).ln();
    if !h.is_finite() {
        return Err(Error::NonFinite("median bandwidth (pairwise distances overflow)".to_string()));
    }
    Ok(h.max(BANDWIDTH_FLOOR))
}
