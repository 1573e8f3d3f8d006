//! ClusterNCE, feature distillation, and the two staged objectives.
//!
//! Every function returns the loss value together with its gradient with
//! respect to the query embedding(s). Centroids and teacher embeddings are
//! constants: no gradient flows into them.

use serde::{Deserialize, Serialize};

use crate::encoder::{Branch, MultiScaleEmbedding};
use crate::error::{Error, Result};
use crate::memory::ClusterMemoryBank;
use crate::numerics::{dot, norm, Mat, NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of each local branch; the global branch gets `1 - lambda2`.
    pub lambda2: f64,
    /// Distillation weight.
    pub mu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.05,
            lambda2: 0.1,
            mu: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(0.0..=0.5).contains(&self.lambda2) {
            return Err(Error::InvalidParameter(format!("lambda2 {} outside [0, 0.5]", self.lambda2)));
        }
        if !(self.mu >= 0.0) {
            return Err(Error::InvalidParameter(format!("mu must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// `(global, up, down)` weights: `(1 - lambda2, lambda2, lambda2)`.
pub fn branch_weights(lambda2: f64) -> [f64; 3] {
    [1.0 - lambda2, lambda2, lambda2]
}

/// Loss value plus per-branch gradients with respect to the query embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: MultiScaleEmbedding,
}

/// Softmax cross-entropy of a query against every centroid.
///
/// `loss = logsumexp_k(u.phi_k / tau) - u.phi_pos / tau`, gradient
/// `(sum_k p_k phi_k - phi_pos) / tau`.
pub fn cluster_nce(u_q: &[f64], centroids: &Mat, positive: usize, tau: f64) -> Result<(f64, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be > 0, got {tau}")));
    }
    let c = centroids.rows();
    if positive >= c {
        return Err(Error::ClusterOutOfRange {
            id: positive,
            num_clusters: c,
        });
    }
    if u_q.len() != centroids.cols() {
        return Err(Error::DimensionMismatch {
            expected: centroids.cols(),
            got: u_q.len(),
        });
    }
    let logits: Vec<f64> = centroids.iter_rows().map(|phi| dot(u_q, phi) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let loss = max + z.ln() - logits[positive];

    let mut grad = vec![0.0; u_q.len()];
    for (phi, w) in centroids.iter_rows().zip(&weights) {
        let p = w / z;
        for (g, x) in grad.iter_mut().zip(phi) {
            *g += p * x;
        }
    }
    for (g, x) in grad.iter_mut().zip(centroids.row(positive)) {
        *g = (*g - x) / tau;
    }
    Ok((loss, grad))
}

/// `mu * | u/|u| - t/|t| |^2` and its gradient with respect to `u`.
pub fn distill_l2(u: &[f64], teacher: &[f64], mu: f64) -> Result<(f64, Vec<f64>)> {
    if u.len() != teacher.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher.len(),
            got: u.len(),
        });
    }
    let nu = norm(u);
    let nt = norm(teacher);
    if !(nu > NORM_EPS) || !(nt > NORM_EPS) {
        return Err(Error::DegenerateVector);
    }
    let diff: Vec<f64> = u.iter().zip(teacher).map(|(a, b)| a / nu - b / nt).collect();
    let penalty = mu * dot(&diff, &diff);
    // Jacobian of normalization applied to 2 mu diff: (g - uh (uh.g)) / |u|.
    let g: Vec<f64> = diff.iter().map(|d| 2.0 * mu * d).collect();
    let uh_g: f64 = u.iter().zip(&g).map(|(a, b)| a / nu * b).sum();
    let grad = u
        .iter()
        .zip(&g)
        .map(|(a, gi)| (gi - a / nu * uh_g) / nu)
        .collect();
    Ok((penalty, grad))
}

fn combine(parts: [(f64, Vec<f64>); 3], lambda2: f64) -> LossOutput {
    let w = branch_weights(lambda2);
    let mut loss = 0.0;
    let mut grads: [Vec<f64>; 3] = Default::default();
    for (b, (l, g)) in parts.into_iter().enumerate() {
        loss += w[b] * l;
        grads[b] = g.into_iter().map(|v| w[b] * v).collect();
    }
    let [global, up, down] = grads;
    LossOutput {
        loss,
        grads: MultiScaleEmbedding { global, up, down },
    }
}

fn check_bank(emb: &MultiScaleEmbedding, bank: &ClusterMemoryBank) -> Result<()> {
    for b in Branch::ALL {
        if emb.branch(b).len() != bank.dim() {
            return Err(Error::DimensionMismatch {
                expected: bank.dim(),
                got: emb.branch(b).len(),
            });
        }
    }
    Ok(())
}

/// Weighted ClusterNCE over the three branches with one shared positive id.
pub fn stage1_loss(
    emb: &MultiScaleEmbedding,
    bank: &ClusterMemoryBank,
    positive: usize,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_bank(emb, bank)?;
    let part = |b: Branch| cluster_nce(emb.branch(b), bank.centroids(b), positive, cfg.tau);
    Ok(combine(
        [part(Branch::Global)?, part(Branch::Up)?, part(Branch::Down)?],
        cfg.lambda2,
    ))
}

/// Per branch ClusterNCE plus the distillation penalty towards the teacher,
/// weighted like [`stage1_loss`].
pub fn stage2_loss(
    student: &MultiScaleEmbedding,
    teacher: &MultiScaleEmbedding,
    bank: &ClusterMemoryBank,
    positive: usize,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    check_bank(student, bank)?;
    let part = |b: Branch| -> Result<(f64, Vec<f64>)> {
        let (nce, mut g) = cluster_nce(student.branch(b), bank.centroids(b), positive, cfg.tau)?;
        let (pen, gd) = distill_l2(student.branch(b), teacher.branch(b), cfg.mu)?;
        for (a, d) in g.iter_mut().zip(gd) {
            *a += d;
        }
        Ok((nce + pen, g))
    };
    Ok(combine(
        [part(Branch::Global)?, part(Branch::Up)?, part(Branch::Down)?],
        cfg.lambda2,
    ))
}
