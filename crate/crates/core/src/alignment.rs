//! Aligns embedding clusters with known classes.
//!
//! A cluster takes the label of the class whose labeled-embedding centroid is
//! nearest in squared Euclidean distance, unless even that distance reaches
//! the threshold `t`, in which case it is a potential unknown.

use serde::{Deserialize, Serialize};

use crate::clustering::{squared_distance, ClusterAssignment};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroid {
    /// Class index in the label set.
    pub class: usize,
    pub centroid: Vec<f64>,
    pub count: usize,
}

/// Centroids of the labeled embeddings, one per class that has at least one
/// labeled sample, ordered by class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCentroids {
    entries: Vec<ClassCentroid>,
}

impl ClassCentroids {
    pub fn from_embeddings<P: AsRef<[f64]>>(embeddings: &[P], labels: &[usize]) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.len(),
                actual: labels.len(),
            });
        }
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut groups: Vec<Vec<&[f64]>> = vec![Vec::new(); n_classes];
        for (e, &l) in embeddings.iter().zip(labels) {
            groups[l].push(e.as_ref());
        }
        let mut entries = Vec::new();
        for (class, members) in groups.into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            entries.push(ClassCentroid {
                class,
                count: members.len(),
                centroid: centroid(&members)?,
            });
        }
        Ok(Self { entries })
    }

    pub fn from_entries(mut entries: Vec<ClassCentroid>) -> Result<Self> {
        entries.sort_by_key(|e| e.class);
        if entries.windows(2).any(|w| w[0].class == w[1].class) {
            return Err(Error::InvalidInput("duplicate class centroid".into()));
        }
        if entries
            .iter()
            .any(|e| e.centroid.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidInput("centroid is not finite".into()));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[ClassCentroid] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Nearest class and its squared distance. Ties go to the lower class index.
    pub fn nearest(&self, v: &[f64]) -> Result<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for e in &self.entries {
            let d = cluster_class_distance(v, &e.centroid)?;
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((e.class, d));
            }
        }
        best.ok_or_else(|| Error::InvalidInput("no class centroids to align against".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AuxiliaryLabel {
    Known { class: usize },
    PotentialUnknown,
}

/// Alignment outcome for one cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub label: AuxiliaryLabel,
    /// Squared distance to the nearest class centroid.
    pub distance: f64,
    pub nearest_class: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Threshold {
    /// Fixed squared-distance threshold.
    Explicit { value: f64 },
    /// `scale` times the median squared gap between each class centroid and
    /// its nearest neighbour.
    Adaptive { scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignConfig {
    pub threshold: Threshold,
    /// Used when the adaptive threshold is unavailable (fewer than two
    /// classes) or degenerate (zero).
    pub fallback: Option<f64>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::Adaptive { scale: 0.5 },
            fallback: None,
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        match self.threshold {
            Threshold::Explicit { value } if !(value > 0.0) => {
                Err(Error::Config(format!("alignment threshold must be positive, got {value}")))
            }
            Threshold::Adaptive { scale } if !(scale > 0.0) => {
                Err(Error::Config(format!("adaptive threshold scale must be positive, got {scale}")))
            }
            _ => match self.fallback {
                Some(f) if !(f > 0.0) => Err(Error::Config(
                    "fallback alignment threshold must be positive".into(),
                )),
                _ => Ok(()),
            },
        }
    }

    /// The threshold to use against `cents`.
    pub fn resolve(&self, cents: &ClassCentroids) -> Result<f64> {
        self.validate()?;
        match self.threshold {
            Threshold::Explicit { value } => Ok(value),
            Threshold::Adaptive { scale } => {
                let adaptive = if cents.len() >= 2 {
                    Some(scale * 2.0 * adaptive_threshold(cents)?)
                } else {
                    None
                };
                match (adaptive, self.fallback) {
                    (Some(t), _) if t > 0.0 => Ok(t),
                    (_, Some(f)) => Ok(f),
                    (Some(_), None) => Err(Error::Config(
                        "adaptive alignment threshold is zero (coincident class centroids); \
                         set an explicit threshold"
                            .into(),
                    )),
                    (None, None) => Err(Error::Config(
                        "adaptive alignment threshold needs at least two classes; \
                         set an explicit threshold"
                            .into(),
                    )),
                }
            }
        }
    }
}

/// Coordinate-wise arithmetic mean.
pub fn centroid<P: AsRef<[f64]>>(vectors: &[P]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidInput("centroid of an empty set".into()))?;
    let dim = first.as_ref().len();
    let mut sum = vec![0.0; dim];
    for (i, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Squared Euclidean distance (no square root).
pub fn cluster_class_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(squared_distance(a, b))
}

/// Labels one point (cluster centroid or single embedding) against `cents`.
pub fn align_point(v: &[f64], cents: &ClassCentroids, threshold: f64) -> Result<Alignment> {
    let (class, distance) = cents.nearest(v)?;
    let label = if distance >= threshold {
        AuxiliaryLabel::PotentialUnknown
    } else {
        AuxiliaryLabel::Known { class }
    };
    Ok(Alignment {
        label,
        distance,
        nearest_class: class,
    })
}

/// Alignment of every cluster centroid, indexed like `cluster_centroids`.
pub fn align_centroids<P: AsRef<[f64]>>(
    cluster_centroids: &[P],
    cents: &ClassCentroids,
    threshold: f64,
) -> Result<Vec<Alignment>> {
    if cents.is_empty() {
        return Err(Error::InvalidInput("no class centroids to align against".into()));
    }
    cluster_centroids
        .iter()
        .map(|c| align_point(c.as_ref(), cents, threshold))
        .collect()
}

/// Centroid of each cluster's member points.
pub fn cluster_centroids<P: AsRef<[f64]>>(
    points: &[P],
    assignment: &ClusterAssignment,
) -> Result<Vec<Vec<f64>>> {
    if points.len() != assignment.labels.len() {
        return Err(Error::DimensionMismatch {
            expected: assignment.labels.len(),
            actual: points.len(),
        });
    }
    assignment
        .members()
        .into_iter()
        .map(|m| {
            let vs: Vec<&[f64]> = m.iter().map(|&i| points[i].as_ref()).collect();
            centroid(&vs)
        })
        .collect()
}

/// Clusters `points` are aligned one label per cluster id; noise points get
/// no label here.
pub fn align<P: AsRef<[f64]>>(
    points: &[P],
    assignment: &ClusterAssignment,
    cents: &ClassCentroids,
    threshold: f64,
) -> Result<Vec<Alignment>> {
    let centroids = cluster_centroids(points, assignment)?;
    align_centroids(&centroids, cents, threshold)
}

/// Median over classes of the squared distance to the nearest other class
/// centroid, halved.
pub fn adaptive_threshold(cents: &ClassCentroids) -> Result<f64> {
    let entries = cents.entries();
    if entries.len() < 2 {
        return Err(Error::Config(
            "adaptive threshold needs at least two class centroids; set an explicit threshold"
                .into(),
        ));
    }
    let mut gaps: Vec<f64> = entries
        .iter()
        .enumerate()
        .map(|(i, a)| {
            entries
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, b)| squared_distance(&a.centroid, &b.centroid))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    let median = if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    };
    Ok(median / 2.0)
}
