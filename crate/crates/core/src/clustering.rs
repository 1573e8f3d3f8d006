//! Pseudo-label generation: re-weighted multi-branch distances and DBSCAN.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::encoder::{Branch, MultiScaleEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{self_distance_matrix, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    /// Maximum neighbor distance.
    pub eps: f64,
    /// Neighbor count (self included) that makes a point a core point.
    pub min_pts: usize,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self {
            eps: 0.6,
            min_pts: 4,
        }
    }
}

impl DbscanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::InvalidParameter(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.min_pts == 0 {
            return Err(Error::InvalidParameter("min_pts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Cluster assignment of every instance for one epoch. `None` marks an outlier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabeling {
    pub assignment: Vec<Option<usize>>,
    pub num_clusters: usize,
    pub epoch: usize,
}

impl PseudoLabeling {
    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn num_outliers(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }

    /// Instance indices of every cluster, in ascending order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_clusters];
        for (i, a) in self.assignment.iter().enumerate() {
            if let Some(k) = a {
                out[*k].push(i);
            }
        }
        out
    }

    /// Indices of non-outlier instances.
    pub fn clustered(&self) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.map(|_| i))
            .collect()
    }
}

/// `(1 - 2*lambda1) * global + lambda1 * up + lambda1 * down`.
pub fn blended_distance(global: &Mat, up: &Mat, down: &Mat, lambda1: f64) -> Result<Mat> {
    if !(0.0..0.5).contains(&lambda1) {
        return Err(Error::InvalidParameter(format!("lambda1 {lambda1} outside [0, 0.5)")));
    }
    for m in [up, down] {
        if m.rows() != global.rows() || m.cols() != global.cols() {
            return Err(Error::DimensionMismatch {
                expected: global.rows() * global.cols(),
                got: m.rows() * m.cols(),
            });
        }
    }
    let wg = 1.0 - 2.0 * lambda1;
    let data = global
        .as_slice()
        .iter()
        .zip(up.as_slice())
        .zip(down.as_slice())
        .map(|((g, u), d)| wg * g + lambda1 * u + lambda1 * d)
        .collect();
    Mat::from_vec(global.rows(), global.cols(), data)
}

/// DBSCAN over a precomputed distance matrix.
///
/// Clusters are numbered in discovery order while scanning points by
/// ascending index; a border point reachable from several clusters joins the
/// first one discovered. `None` is noise.
pub fn dbscan(dist: &Mat, cfg: &DbscanConfig) -> Result<Vec<Option<usize>>> {
    cfg.validate()?;
    if !dist.is_distance_matrix() {
        return Err(Error::InvalidDistanceMatrix);
    }
    let n = dist.rows();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist.get(i, j) <= cfg.eps).collect())
        .collect();
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= cfg.min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !is_core[start] || labels[start].is_some() {
            continue;
        }
        let id = next;
        next += 1;
        labels[start] = Some(id);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbors[p] {
                if labels[q].is_some() {
                    continue;
                }
                labels[q] = Some(id);
                if is_core[q] {
                    queue.push_back(q);
                }
            }
        }
    }
    Ok(labels)
}

/// Renumbers cluster ids contiguously by first appearance.
pub fn compact_labels(raw: &[Option<usize>]) -> PseudoLabeling {
    let mut remap = std::collections::HashMap::new();
    let assignment = raw
        .iter()
        .map(|r| {
            r.map(|id| {
                let next = remap.len();
                *remap.entry(id).or_insert(next)
            })
        })
        .collect();
    PseudoLabeling {
        assignment,
        num_clusters: remap.len(),
        epoch: 0,
    }
}

/// Per-branch cosine distances of a set of embeddings.
pub fn branch_distances(embeddings: &[MultiScaleEmbedding]) -> Result<[Mat; 3]> {
    let per = |b: Branch| -> Result<Mat> {
        let vs: Vec<Vec<f64>> = embeddings.iter().map(|e| e.branch(b).to_vec()).collect();
        self_distance_matrix(&vs)
    };
    Ok([per(Branch::Global)?, per(Branch::Up)?, per(Branch::Down)?])
}

/// Blended distance matrix followed by DBSCAN and relabeling. One label set
/// is shared by all three branches.
pub fn generate_pseudo_labels(
    embeddings: &[MultiScaleEmbedding],
    lambda1: f64,
    cfg: &DbscanConfig,
) -> Result<PseudoLabeling> {
    let [g, u, d] = branch_distances(embeddings)?;
    let blended = blended_distance(&g, &u, &d, lambda1)?;
    let raw = dbscan(&blended, cfg)?;
    Ok(compact_labels(&raw))
}
