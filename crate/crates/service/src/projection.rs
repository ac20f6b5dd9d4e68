//! Two-dimensional views of embeddings for display.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Top two principal axes of a point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit-length axes, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Variance captured along each axis.
    pub explained_variance: Vec<f64>,
}

impl Pca2 {
    /// Fits the axes. Returns `None` for fewer than two rows or ragged input.
    pub fn fit(rows: &[Vec<f64>]) -> Option<Self> {
        let n = rows.len();
        let d = rows.first()?.len();
        if n < 2 || d == 0 || rows.iter().any(|r| r.len() != d) {
            return None;
        }
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = Vec::new();
        let mut explained_variance = Vec::new();
        for &k in order.iter().take(2) {
            let mut axis: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // Eigenvector sign is arbitrary; pin it so the largest entry is positive.
            let pivot = axis
                .iter()
                .copied()
                .fold(0.0_f64, |best, x| if x.abs() > best.abs() { x } else { best });
            if pivot < 0.0 {
                axis.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(axis);
            explained_variance.push(eig.eigenvalues[k].max(0.0));
        }
        while components.len() < 2 {
            components.push(vec![0.0; d]);
            explained_variance.push(0.0);
        }
        Some(Self {
            mean,
            components,
            explained_variance,
        })
    }

    pub fn project(&self, x: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (o, axis) in out.iter_mut().zip(&self.components) {
            *o = axis
                .iter()
                .zip(x.iter().zip(&self.mean))
                .map(|(a, (v, m))| a * (v - m))
                .sum();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedCentroid {
    pub class_name: String,
    pub x: f64,
    pub y: f64,
}

/// Pool embeddings and class centroids in the plane of the pool's top two
/// principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProjection {
    pub step: u64,
    pub explained_variance: Vec<f64>,
    pub points: Vec<ProjectedPoint>,
    pub centroids: Vec<ProjectedCentroid>,
}
