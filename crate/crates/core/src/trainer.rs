//! Teacher training, teacher-guided student warm-up, and distillation epochs.
//!
//! Every epoch re-clusters the training set with the current encoder,
//! rebuilds the three memory dictionaries from the new pseudo labels, then
//! runs identity-balanced mini-batches through the encoder, the loss, the
//! momentum memory update and an Adam step.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{generate_pseudo_labels, DbscanConfig, PseudoLabeling};
use crate::data::{Dataset, Split};
use crate::encoder::{
    backward, embed_all, forward_batch, Branch, EncoderDims, EncoderParams, Mode,
    MultiScaleEmbedding, DEFAULT_GEM_P,
};
use crate::error::{Error, Result};
use crate::evaluation::{cluster_quality, evaluate};
use crate::losses::{stage1_loss, stage2_loss, LossConfig};
use crate::memory::ClusterMemoryBank;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Consecutive cluster-free epochs tolerated before training aborts.
pub const MAX_EMPTY_EPOCHS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: f64,
    pub tau: f64,
    pub momentum: f64,
    pub eps: f64,
    pub min_pts: usize,
    /// Pseudo identities per batch (P).
    pub batch_identities: usize,
    /// Instances per pseudo identity (K).
    pub batch_instances: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub num_epochs: usize,
    /// Batches per epoch; `None` means one pass over the clustered instances.
    pub num_iterations: Option<usize>,
    pub warmup_multiplier: usize,
    pub seed: u64,
    /// Zeroes wall-clock fields so logs are byte-reproducible.
    pub deterministic: bool,
    pub batch_norm: bool,
    pub renormalize_centroids: bool,
    pub gem_p: f64,
    pub encoder: EncoderDims,
    /// Evaluate on the query/gallery splits after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.1,
            mu: 1.0,
            tau: 0.05,
            momentum: 0.1,
            eps: 0.6,
            min_pts: 4,
            batch_identities: 16,
            batch_instances: 16,
            lr: 3.5e-4,
            weight_decay: 5e-4,
            lr_decay_every: 20,
            lr_decay_factor: 0.1,
            num_epochs: 50,
            num_iterations: None,
            warmup_multiplier: 2,
            seed: 0,
            deterministic: true,
            batch_norm: true,
            renormalize_centroids: false,
            gem_p: DEFAULT_GEM_P,
            encoder: EncoderDims::default(),
            eval_each_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        self.dbscan_config().validate()?;
        self.encoder.validate()?;
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(0.0..0.5).contains(&self.lambda1) {
            return bad(format!("lambda1 {} outside [0, 0.5)", self.lambda1));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if self.batch_identities == 0 || self.batch_instances == 0 {
            return bad("batch identities and instances must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.lr_decay_factor > 0.0) {
            return bad("learning rate, weight decay or decay factor out of range".into());
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be >= 1".into());
        }
        if !(self.gem_p >= 1.0) {
            return bad(format!("gem_p {} < 1", self.gem_p));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda2: self.lambda2,
            mu: self.mu,
        }
    }

    pub fn dbscan_config(&self) -> DbscanConfig {
        DbscanConfig {
            eps: self.eps,
            min_pts: self.min_pts,
        }
    }

    /// Step-decayed learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn iterations_for(&self, num_clustered: usize) -> usize {
        self.num_iterations.unwrap_or_else(|| {
            num_clustered.div_ceil(self.batch_identities * self.batch_instances)
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update with L2 weight decay folded into the gradient.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: state.step });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Identity-balanced batch: `min(P, C)` distinct clusters, `K` instances each
/// (without replacement when the cluster is large enough).
pub fn pk_sample<R: Rng + ?Sized>(
    labels: &PseudoLabeling,
    p: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let c = labels.num_clusters;
    if c == 0 {
        return Err(Error::NoClustersThisEpoch);
    }
    let members = labels.members();
    let chosen = index::sample(rng, c, p.min(c));
    let mut batch = Vec::with_capacity(p.min(c) * k);
    for cluster in chosen.iter() {
        let pool = &members[cluster];
        if pool.len() >= k {
            batch.extend(index::sample(rng, pool.len(), k).iter().map(|i| pool[i]));
        } else {
            batch.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    pub num_clusters: usize,
    pub num_outliers: usize,
    pub mean_loss: f64,
    /// Pseudo-label agreement with the (training-unused) identities.
    pub pseudo_ari: Option<f64>,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub wall_time_s: f64,
}

/// Instrumentation hooks, called in algorithm order.
#[derive(Debug)]
pub enum TrainEvent<'a> {
    Clustered { epoch: usize, labels: &'a PseudoLabeling },
    MemoryInitialized { epoch: usize, bank: &'a ClusterMemoryBank },
    Iteration { epoch: usize, iteration: usize, loss: f64 },
    MemoryUpdated { branch: Branch, cluster: usize },
    WarmupFinished { params: &'a EncoderParams, bank: &'a ClusterMemoryBank },
    EpochFinished { record: &'a EpochRecord, params: &'a EncoderParams },
}

pub trait TrainObserver {
    fn on_event(&mut self, event: &TrainEvent<'_>);
}

impl TrainObserver for () {
    fn on_event(&mut self, _: &TrainEvent<'_>) {}
}

impl<F: FnMut(&TrainEvent<'_>)> TrainObserver for F {
    fn on_event(&mut self, event: &TrainEvent<'_>) {
        self(event)
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub epoch: usize,
    pub labels: Option<PseudoLabeling>,
    pub bank: Option<ClusterMemoryBank>,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Seeded initialization with batch-norm statistics calibrated on `inputs`.
    pub fn new(cfg: &TrainConfig, inputs: &[&[f64]]) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = EncoderParams::init(cfg.encoder, &mut rng)?;
        params.gem_p = cfg.gem_p;
        params.batch_norm = cfg.batch_norm;
        params.calibrate_batch_norm(inputs)?;
        let adam = AdamState::new(params.num_trainable());
        Ok(Self {
            params,
            adam,
            epoch: 0,
            labels: None,
            bank: None,
            rng,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub optimizer: AdamState,
    pub records: Vec<EpochRecord>,
}

enum Objective<'a> {
    Stage1 { update_memory: bool },
    Stage2 { teacher: &'a EncoderParams },
}

/// One mini-batch: forward, loss, memory update, backward, Adam. Returns the
/// mean per-query loss.
#[allow(clippy::too_many_arguments)]
fn train_iteration(
    state: &mut TrainState,
    inputs: &[&[f64]],
    labels: &PseudoLabeling,
    bank: &mut ClusterMemoryBank,
    objective: &Objective<'_>,
    cfg: &TrainConfig,
    lr: f64,
    observer: &mut dyn TrainObserver,
) -> Result<f64> {
    let batch = pk_sample(labels, cfg.batch_identities, cfg.batch_instances, &mut state.rng)?;
    let batch_inputs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i]).collect();
    let (embs, cache) = forward_batch(&state.params, &batch_inputs, Mode::Train)?;
    let teacher_embs = match objective {
        Objective::Stage2 { teacher } => Some(forward_batch(teacher, &batch_inputs, Mode::Eval)?.0),
        Objective::Stage1 { .. } => None,
    };
    let loss_cfg = cfg.loss_config();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<MultiScaleEmbedding> = Vec::with_capacity(batch.len());
    for (q, &idx) in batch.iter().enumerate() {
        let k = labels.assignment[idx].expect("pk_sample draws clustered instances");
        let out = match &teacher_embs {
            Some(t) => stage2_loss(&embs[q], &t[q], bank, k, &loss_cfg)?,
            None => stage1_loss(&embs[q], bank, k, &loss_cfg)?,
        };
        total += out.loss;
        let mut g = out.grads;
        for b in Branch::ALL {
            g.branch_mut(b).iter_mut().for_each(|v| *v *= scale);
        }
        grads.push(g);
    }
    let update_memory = !matches!(objective, Objective::Stage1 { update_memory: false });
    if update_memory {
        for (q, &idx) in batch.iter().enumerate() {
            let k = labels.assignment[idx].expect("clustered");
            for b in Branch::ALL {
                bank.momentum_update(b, k, embs[q].branch(b))?;
                observer.on_event(&TrainEvent::MemoryUpdated { branch: b, cluster: k });
            }
        }
    }
    let param_grads = backward(&state.params, &cache, &grads)?;
    state.params.update_running_stats(&cache);
    adam_step(
        state.params.theta_mut(),
        &param_grads.flat,
        &mut state.adam,
        lr,
        cfg.weight_decay,
    )?;
    Ok(total * scale)
}

fn train_inputs(dataset: &Dataset) -> (Vec<&[f64]>, Vec<Option<u32>>) {
    dataset
        .split(Split::Train)
        .into_iter()
        .map(|i| (i.input.as_slice(), i.identity))
        .unzip()
}

fn has_eval_splits(dataset: &Dataset) -> bool {
    !dataset.split(Split::Query).is_empty() && !dataset.split(Split::Gallery).is_empty()
}

/// One clustering epoch shared by teacher and student training.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    phase: &str,
    state: &mut TrainState,
    dataset: &Dataset,
    inputs: &[&[f64]],
    truth: &[Option<u32>],
    teacher: Option<&EncoderParams>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<EpochRecord> {
    let start = Instant::now();
    let epoch = state.epoch;
    let embeddings = embed_all(&state.params, inputs)?;
    let mut labels = generate_pseudo_labels(&embeddings, cfg.lambda1, &cfg.dbscan_config())?;
    labels.epoch = epoch;
    observer.on_event(&TrainEvent::Clustered {
        epoch,
        labels: &labels,
    });
    let quality = cluster_quality(&labels, truth)?;

    let mut mean_loss = 0.0;
    if labels.num_clusters > 0 {
        let mut bank = ClusterMemoryBank::init(&embeddings, &labels, cfg.momentum)?;
        bank.renormalize = cfg.renormalize_centroids;
        observer.on_event(&TrainEvent::MemoryInitialized { epoch, bank: &bank });
        let iterations = cfg.iterations_for(labels.len() - labels.num_outliers());
        let objective = match teacher {
            Some(t) => Objective::Stage2 { teacher: t },
            None => Objective::Stage1 {
                update_memory: true,
            },
        };
        let lr = cfg.lr_at(epoch);
        for iteration in 0..iterations {
            let loss = train_iteration(state, inputs, &labels, &mut bank, &objective, cfg, lr, observer)?;
            observer.on_event(&TrainEvent::Iteration {
                epoch,
                iteration,
                loss,
            });
            mean_loss += loss / iterations as f64;
        }
        state.bank = Some(bank);
    }

    let eval = if cfg.eval_each_epoch && has_eval_splits(dataset) {
        Some(evaluate(&state.params, dataset)?)
    } else {
        None
    };
    let record = EpochRecord {
        phase: phase.to_string(),
        epoch,
        num_clusters: labels.num_clusters,
        num_outliers: labels.num_outliers(),
        mean_loss,
        pseudo_ari: quality.ari,
        map: eval.as_ref().map(|r| r.map),
        rank1: eval.as_ref().map(|r| r.rank1()),
        wall_time_s: if cfg.deterministic {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        },
    };
    state.labels = Some(labels);
    state.epoch += 1;
    observer.on_event(&TrainEvent::EpochFinished {
        record: &record,
        params: &state.params,
    });
    Ok(record)
}

fn run_epochs(
    phase: &str,
    state: &mut TrainState,
    dataset: &Dataset,
    teacher: Option<&EncoderParams>,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpochRecord>> {
    let (inputs, truth) = train_inputs(dataset);
    let mut records = Vec::with_capacity(cfg.num_epochs);
    let mut empty = 0;
    for _ in 0..cfg.num_epochs {
        let record = run_epoch(phase, state, dataset, &inputs, &truth, teacher, cfg, observer)?;
        empty = if record.num_clusters == 0 { empty + 1 } else { 0 };
        records.push(record);
        if empty >= MAX_EMPTY_EPOCHS {
            return Err(Error::ClusteringCollapsed(empty));
        }
    }
    Ok(records)
}

/// Trains a teacher from scratch with the stage-1 objective.
pub fn train_teacher(
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (inputs, _) = train_inputs(dataset);
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("empty training split".into()));
    }
    let mut state = TrainState::new(cfg, &inputs)?;
    let records = run_epochs("teacher", &mut state, dataset, None, cfg, observer)?;
    Ok(TrainOutcome {
        params: state.params,
        optimizer: state.adam,
        records,
    })
}

/// Trains the student against frozen centroids built from teacher embeddings.
///
/// The bank stays frozen for the whole warm-up, and neither memory updates
/// nor the distillation penalty are used.
pub fn warmup_student(
    teacher: &EncoderParams,
    state: &mut TrainState,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let (inputs, _) = train_inputs(dataset);
    let teacher_embs = embed_all(teacher, &inputs)?;
    let labels = generate_pseudo_labels(&teacher_embs, cfg.lambda1, &cfg.dbscan_config())?;
    observer.on_event(&TrainEvent::Clustered {
        epoch: 0,
        labels: &labels,
    });
    if labels.num_clusters == 0 {
        return Err(Error::NoClustersThisEpoch);
    }
    let mut bank = ClusterMemoryBank::init(&teacher_embs, &labels, cfg.momentum)?;
    bank.freeze();
    observer.on_event(&TrainEvent::MemoryInitialized { epoch: 0, bank: &bank });
    let iterations =
        cfg.iterations_for(labels.len() - labels.num_outliers()) * cfg.warmup_multiplier;
    let objective = Objective::Stage1 {
        update_memory: false,
    };
    let lr = cfg.lr_at(0);
    for iteration in 0..iterations {
        let loss = train_iteration(state, &inputs, &labels, &mut bank, &objective, cfg, lr, observer)?;
        observer.on_event(&TrainEvent::Iteration {
            epoch: 0,
            iteration,
            loss,
        });
    }
    observer.on_event(&TrainEvent::WarmupFinished {
        params: &state.params,
        bank: &bank,
    });
    state.labels = Some(labels);
    state.bank = Some(bank);
    Ok(())
}

/// Warm-up followed by distillation epochs with the stage-2 objective.
///
/// The student is initialized exactly like a teacher with the same seed.
pub fn train_student(
    teacher: &EncoderParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if teacher.dims() != &cfg.encoder {
        return Err(Error::InvalidParameter("teacher and student dimensions differ".into()));
    }
    let (inputs, _) = train_inputs(dataset);
    if inputs.is_empty() {
        return Err(Error::InvalidParameter("empty training split".into()));
    }
    let mut state = TrainState::new(cfg, &inputs)?;
    warmup_student(teacher, &mut state, dataset, cfg, observer)?;
    let records = run_epochs("student", &mut state, dataset, Some(teacher), cfg, observer)?;
    Ok(TrainOutcome {
        params: state.params,
        optimizer: state.adam,
        records,
    })
}
