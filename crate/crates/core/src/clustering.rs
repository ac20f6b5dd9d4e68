//! DBSCAN over embedding vectors.
//!
//! A point is a core point when at least `min_pts` points (itself included)
//! lie within Euclidean distance `eps`. Clusters are grown from core points
//! in ascending index order, so a border point reachable from several
//! clusters joins the one with the lowest-indexed core point.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterLabel {
    Cluster(usize),
    Noise,
}

impl ClusterLabel {
    pub fn cluster(self) -> Option<usize> {
        match self {
            ClusterLabel::Cluster(c) => Some(c),
            ClusterLabel::Noise => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<ClusterLabel>,
    pub core: Vec<bool>,
    pub n_clusters: usize,
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterAssignment {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == ClusterLabel::Noise).count()
    }

    /// Member indices of each cluster.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let ClusterLabel::Cluster(c) = l {
                out[*c].push(i);
            }
        }
        out
    }

    /// Assignment in which every point is noise.
    pub fn all_noise(n: usize, eps: f64, min_pts: usize) -> Self {
        Self {
            labels: vec![ClusterLabel::Noise; n],
            core: vec![false; n],
            n_clusters: 0,
            eps,
            min_pts,
        }
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_points<P: AsRef<[f64]>>(points: &[P]) -> Result<usize> {
    let dim = points
        .first()
        .map(|p| p.as_ref().len())
        .ok_or_else(|| Error::InvalidInput("no points to cluster".into()))?;
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
    }
    Ok(dim)
}

/// Default density threshold for a pool of `n` points: `max(4, ceil(log2 n))`.
pub fn default_min_pts(n: usize) -> usize {
    let log = if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    };
    log.max(4)
}

pub fn dbscan<P: AsRef<[f64]>>(points: &[P], eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidInput("min_pts must be at least 1".into()));
    }
    check_points(points)?;

    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let pi = points[i].as_ref();
            (0..n)
                .filter(|&j| squared_distance(pi, points[j].as_ref()) <= eps2)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels = vec![ClusterLabel::Noise; n];
    let mut assigned = vec![false; n];
    let mut n_clusters = 0;
    let mut queue = VecDeque::new();

    for seed in 0..n {
        if assigned[seed] || !core[seed] {
            continue;
        }
        let id = n_clusters;
        n_clusters += 1;
        assigned[seed] = true;
        labels[seed] = ClusterLabel::Cluster(id);
        queue.push_back(seed);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if assigned[q] {
                    continue;
                }
                assigned[q] = true;
                labels[q] = ClusterLabel::Cluster(id);
                if core[q] {
                    queue.push_back(q);
                }
            }
        }
    }

    Ok(ClusterAssignment {
        labels,
        core,
        n_clusters,
        eps,
        min_pts,
    })
}

/// Percentile of the k-distance curve read by [`suggest_eps`].
pub const DEFAULT_EPS_QUANTILE: f64 = 0.9;

/// k-distance heuristic for `eps`: each point's distance to its `min_pts`-th
/// nearest other point, sorted ascending, read at the 90th percentile
/// (nearest-rank).
pub fn suggest_eps<P: AsRef<[f64]>>(points: &[P], min_pts: usize) -> Result<f64> {
    suggest_eps_at(points, min_pts, DEFAULT_EPS_QUANTILE)
}

/// [`suggest_eps`] read at an arbitrary quantile in `(0, 1]`.
pub fn suggest_eps_at<P: AsRef<[f64]>>(points: &[P], min_pts: usize, quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile <= 1.0) {
        return Err(Error::InvalidInput(format!("eps quantile must lie in (0, 1], got {quantile}")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidInput("min_pts must be at least 1".into()));
    }
    if points.len() <= min_pts {
        return Err(Error::InvalidInput(format!(
            "suggest_eps needs more than {min_pts} points, got {}",
            points.len()
        )));
    }
    check_points(points)?;
    let n = points.len();
    let mut kdist: Vec<f64> = (0..n)
        .map(|i| {
            let pi = points[i].as_ref();
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(pi, points[j].as_ref()))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(min_pts - 1, f64::total_cmp);
            kth.sqrt()
        })
        .collect();
    kdist.sort_by(f64::total_cmp);
    let rank = ((quantile * n as f64) - 1e-9).ceil() as usize;
    Ok(kdist[rank.clamp(1, n) - 1])
}
