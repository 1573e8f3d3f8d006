//! Cluster memory dictionaries: one centroid matrix per branch.

use crate::clustering::PseudoLabeling;
use crate::encoder::{Branch, MultiScaleEmbedding};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMemoryBank {
    centroids: [Mat; 3],
    momentum: f64,
    frozen: bool,
    /// Rescale a centroid to unit norm after each momentum update.
    pub renormalize: bool,
}

impl ClusterMemoryBank {
    /// Centroids are the (un-normalized) per-branch means of each cluster's
    /// members. Outlier instances are skipped.
    pub fn init(
        embeddings: &[MultiScaleEmbedding],
        labels: &PseudoLabeling,
        momentum: f64,
    ) -> Result<Self> {
        if labels.num_clusters == 0 {
            return Err(Error::NoClusters);
        }
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                got: embeddings.len(),
            });
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidParameter(format!("momentum {momentum} outside [0, 1]")));
        }
        let dim = embeddings
            .iter()
            .zip(&labels.assignment)
            .find_map(|(e, a)| a.map(|_| e.global.len()))
            .ok_or(Error::NoClusters)?;
        let members = labels.members();
        let mut centroids: [Mat; 3] = std::array::from_fn(|_| Mat::zeros(labels.num_clusters, dim));
        for (k, idx) in members.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::InvalidParameter(format!("cluster {k} has no members")));
            }
            let inv = 1.0 / idx.len() as f64;
            for b in Branch::ALL {
                let row = centroids[b.index()].row_mut(k);
                for &i in idx {
                    let v = embeddings[i].branch(b);
                    if v.len() != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: v.len(),
                        });
                    }
                    for (r, x) in row.iter_mut().zip(v) {
                        *r += x;
                    }
                }
                row.iter_mut().for_each(|r| *r *= inv);
            }
        }
        Ok(Self {
            centroids,
            momentum,
            frozen: false,
            renormalize: false,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.centroids[0].rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids[0].cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn centroids(&self, branch: Branch) -> &Mat {
        &self.centroids[branch.index()]
    }

    pub fn centroid(&self, branch: Branch, k: usize) -> &[f64] {
        self.centroids[branch.index()].row(k)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// `phi_k <- m * phi_k + (1 - m) * u_q` on one branch.
    pub fn momentum_update(&mut self, branch: Branch, k: usize, u_q: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::MemoryFrozen);
        }
        let c = self.num_clusters();
        if k >= c {
            return Err(Error::ClusterOutOfRange {
                id: k,
                num_clusters: c,
            });
        }
        if u_q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u_q.len(),
            });
        }
        let m = self.momentum;
        let row = self.centroids[branch.index()].row_mut(k);
        for (phi, u) in row.iter_mut().zip(u_q) {
            *phi = m * *phi + (1.0 - m) * u;
        }
        if self.renormalize {
            let n = norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(())
    }

    /// Dot products of `u_q` with every centroid of a branch.
    pub fn similarity_row(&self, branch: Branch, u_q: &[f64]) -> Result<Vec<f64>> {
        if u_q.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: u_q.len(),
            });
        }
        Ok(self.centroids[branch.index()]
            .iter_rows()
            .map(|phi| dot(phi, u_q))
            .collect())
    }

    /// Raw bit patterns of every centroid, for exact before/after comparison.
    pub fn snapshot_bits(&self) -> Vec<u64> {
        self.centroids
            .iter()
            .flat_map(|m| m.as_slice().iter().map(|v| v.to_bits()))
            .collect()
    }
}
