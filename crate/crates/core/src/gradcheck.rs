//! Finite-difference verification of every analytic gradient in the crate.
//!
//! Each family draws random instances from a seeded generator, evaluates the
//! analytic gradient, and compares it with central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::clustering::compact_labels;
use crate::encoder::{
    backward, forward_batch, Branch, EncoderDims, EncoderParams, Mode, MultiScaleEmbedding,
};
use crate::error::Result;
use crate::losses::{cluster_nce, distill_l2, stage1_loss, stage2_loss, LossConfig};
use crate::memory::ClusterMemoryBank;
use crate::numerics::{finite_diff_gradient, l2_normalize, max_relative_error, Mat};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const FAMILIES: [&str; 5] = ["cluster_nce", "distill_l2", "stage1_loss", "stage2_loss", "encoder_backward"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        if let Ok(v) = l2_normalize(&normal_vec(rng, n)) {
            return v;
        }
    }
}

fn random_embedding(rng: &mut ChaCha8Rng, dim: usize) -> MultiScaleEmbedding {
    MultiScaleEmbedding {
        global: unit_vec(rng, dim),
        up: unit_vec(rng, dim),
        down: unit_vec(rng, dim),
    }
}

fn flatten(e: &MultiScaleEmbedding) -> Vec<f64> {
    Branch::ALL.iter().flat_map(|&b| e.branch(b).to_vec()).collect()
}

fn unflatten(x: &[f64], dim: usize) -> MultiScaleEmbedding {
    MultiScaleEmbedding {
        global: x[..dim].to_vec(),
        up: x[dim..2 * dim].to_vec(),
        down: x[2 * dim..].to_vec(),
    }
}

/// A bank over `c` clusters of random unit embeddings, plus a loss config
/// with random temperature, branch weight and distillation weight.
fn random_bank(rng: &mut ChaCha8Rng, c: usize, dim: usize) -> Result<(ClusterMemoryBank, LossConfig)> {
    let n = 2 * c;
    let embs: Vec<_> = (0..n).map(|_| random_embedding(rng, dim)).collect();
    let raw: Vec<Option<usize>> = (0..n).map(|i| Some(i % c)).collect();
    let bank = ClusterMemoryBank::init(&embs, &compact_labels(&raw), 0.1)?;
    let cfg = LossConfig {
        tau: rng.random_range(0.05..1.0),
        lambda2: rng.random_range(0.0..0.5),
        mu: rng.random_range(0.0..2.0),
    };
    Ok((bank, cfg))
}

fn check_cluster_nce(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dim = rng.random_range(2..10);
    let c = rng.random_range(1..8);
    let rows: Vec<Vec<f64>> = (0..c).map(|_| unit_vec(rng, dim)).collect();
    let centroids = Mat::from_rows(&rows)?;
    let positive = rng.random_range(0..c);
    let tau = rng.random_range(0.05..1.0);
    let u = unit_vec(rng, dim);
    let (_, analytic) = cluster_nce(&u, &centroids, positive, tau)?;
    let numeric = finite_diff_gradient(
        |x| cluster_nce(x, &centroids, positive, tau).map_or(f64::NAN, |r| r.0),
        &u,
        FD_STEP,
    );
    Ok(max_relative_error(&analytic, &numeric))
}

fn check_distill(rng: &mut ChaCha8Rng) -> Result<f64> {
    let dim = rng.random_range(2..10);
    let u = normal_vec(rng, dim);
    let t = unit_vec(rng, dim);
    let mu = rng.random_range(0.1..2.0);
    let (_, analytic) = distill_l2(&u, &t, mu)?;
    let numeric = finite_diff_gradient(|x| distill_l2(x, &t, mu).map_or(f64::NAN, |r| r.0), &u, FD_STEP);
    Ok(max_relative_error(&analytic, &numeric))
}

fn check_stage(rng: &mut ChaCha8Rng, with_teacher: bool) -> Result<f64> {
    let dim = rng.random_range(2..8);
    let c = rng.random_range(1..6);
    let (bank, cfg) = random_bank(rng, c, dim)?;
    let k = rng.random_range(0..c);
    let student = random_embedding(rng, dim);
    let teacher = random_embedding(rng, dim);
    let eval = |e: &MultiScaleEmbedding| {
        if with_teacher {
            stage2_loss(e, &teacher, &bank, k, &cfg)
        } else {
            stage1_loss(e, &bank, k, &cfg)
        }
    };
    let analytic = flatten(&eval(&student)?.grads);
    let numeric = finite_diff_gradient(
        |x| eval(&unflatten(x, dim)).map_or(f64::NAN, |o| o.loss),
        &flatten(&student),
        FD_STEP,
    );
    Ok(max_relative_error(&analytic, &numeric))
}

/// Full pipeline: encoder forward on a batch, stage-1 or stage-2 loss per
/// instance, encoder backward, compared against differences in parameter space.
fn check_encoder(rng: &mut ChaCha8Rng, trial: usize) -> Result<f64> {
    let dims = EncoderDims {
        input: 5,
        hidden: 7,
        rows: 4,
        cols: 2,
        channels: 4,
    };
    let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Eval };
    let mut p = EncoderParams::init(dims, rng)?;
    p.batch_norm = trial % 4 != 3;
    let lay = p.layout().clone();
    {
        let theta = p.theta_mut();
        // Positive output biases keep the GEM clamp away from the probe.
        for v in &mut theta[lay.b2.clone()] {
            *v = rng.random_range(0.05..0.3);
        }
        for b in 0..3 {
            for v in &mut theta[lay.bn_scale[b].clone()] {
                *v = rng.random_range(0.5..1.5);
            }
            for v in &mut theta[lay.bn_shift[b].clone()] {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    for b in 0..3 {
        p.running_mean[b] = (0..dims.channels).map(|_| rng.random_range(0.0..1.0)).collect();
        p.running_var[b] = (0..dims.channels).map(|_| rng.random_range(0.2..2.0)).collect();
    }
    let batch = 4;
    let inputs: Vec<Vec<f64>> = (0..batch).map(|_| normal_vec(rng, dims.input)).collect();
    let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
    let c = 3;
    let (bank, cfg) = random_bank(rng, c, dims.channels)?;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..c)).collect();
    let teachers: Vec<_> = (0..batch).map(|_| random_embedding(rng, dims.channels)).collect();
    let distill = trial % 3 == 0;

    let losses = |params: &EncoderParams| -> Result<(f64, Vec<MultiScaleEmbedding>)> {
        let (embs, _) = forward_batch(params, &refs, mode)?;
        let mut total = 0.0;
        let mut grads = Vec::with_capacity(batch);
        for (i, e) in embs.iter().enumerate() {
            let out = if distill {
                stage2_loss(e, &teachers[i], &bank, labels[i], &cfg)?
            } else {
                stage1_loss(e, &bank, labels[i], &cfg)?
            };
            total += out.loss;
            grads.push(out.grads);
        }
        Ok((total, grads))
    };
    let (_, upstream) = losses(&p)?;
    let (_, cache) = forward_batch(&p, &refs, mode)?;
    let analytic = backward(&p, &cache, &upstream)?.flat;
    let base = p.clone();
    let numeric = finite_diff_gradient(
        |theta| {
            let mut q = base.clone();
            q.theta_mut().copy_from_slice(theta);
            losses(&q).map_or(f64::NAN, |r| r.0)
        },
        p.theta(),
        FD_STEP,
    );
    Ok(max_relative_error(&analytic, &numeric))
}

/// Runs `trials` random instances of one family.
pub fn check_family(name: &str, trials: usize, seed: u64) -> Result<GradCheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0_f64;
    for trial in 0..trials {
        let err = match name {
            "cluster_nce" => check_cluster_nce(&mut rng)?,
            "distill_l2" => check_distill(&mut rng)?,
            "stage1_loss" => check_stage(&mut rng, false)?,
            "stage2_loss" => check_stage(&mut rng, true)?,
            "encoder_backward" => check_encoder(&mut rng, trial)?,
            other => {
                return Err(crate::Error::InvalidParameter(format!("unknown gradient family {other}")))
            }
        };
        // f64::max drops NaN; a NaN anywhere must fail the family.
        worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        trials,
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    })
}

pub fn run_suite(trials: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    FAMILIES
        .iter()
        .enumerate()
        .map(|(i, name)| check_family(name, trials, seed.wrapping_add(i as u64)))
        .collect()
}
