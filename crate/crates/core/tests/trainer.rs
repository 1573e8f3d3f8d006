mod common;

use common::*;
use mskd::checkpoint::checkpoint_to_bytes;
use mskd::clustering::generate_pseudo_labels;
use mskd::data::Split;
use mskd::encoder::{backward, embed_all, forward_batch, Branch, EncoderParams, Mode};
use mskd::losses::stage1_loss;
use mskd::memory::ClusterMemoryBank;
use mskd::trainer::{
    adam_step, train_student, train_teacher, AdamState, TrainConfig, TrainEvent, TrainState,
};
use mskd::Error;
use rand::Rng;

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        num_epochs: 3,
        num_iterations: Some(2),
        batch_identities: 4,
        batch_instances: 4,
        seed,
        ..Default::default()
    }
}

#[derive(Debug, PartialEq)]
enum Step {
    Clustered,
    MemoryInit,
    Iteration,
    Update(Branch, usize),
    WarmupDone,
    EpochDone,
}

fn record_steps(e: &TrainEvent<'_>, log: &mut Vec<Step>) {
    log.push(match e {
        TrainEvent::Clustered { .. } => Step::Clustered,
        TrainEvent::MemoryInitialized { .. } => Step::MemoryInit,
        TrainEvent::Iteration { .. } => Step::Iteration,
        TrainEvent::MemoryUpdated { branch, cluster } => Step::Update(*branch, *cluster),
        TrainEvent::WarmupFinished { .. } => Step::WarmupDone,
        TrainEvent::EpochFinished { .. } => Step::EpochDone,
    });
}

#[test]
fn epoch_follows_cluster_init_iterate_order() {
    let ds = small_dataset(1, 6);
    let cfg = quick_cfg(1);
    let mut log = Vec::new();
    let out = train_teacher(&ds, &cfg, &mut |e: &TrainEvent<'_>| record_steps(e, &mut log)).unwrap();
    assert_eq!(out.records.len(), 3);
    let coarse: Vec<&Step> = log.iter().filter(|s| !matches!(s, Step::Update(..))).collect();
    let epoch = [Step::Clustered, Step::MemoryInit, Step::Iteration, Step::Iteration, Step::EpochDone];
    let expected: Vec<&Step> = epoch.iter().cycle().take(15).collect();
    assert_eq!(coarse, expected);
}

#[test]
fn memory_updates_share_cluster_across_branches() {
    let ds = small_dataset(2, 6);
    let cfg = quick_cfg(2);
    let mut log = Vec::new();
    train_teacher(&ds, &cfg, &mut |e: &TrainEvent<'_>| record_steps(e, &mut log)).unwrap();
    let updates: Vec<(Branch, usize)> = log
        .iter()
        .filter_map(|s| match s {
            Step::Update(b, k) => Some((*b, *k)),
            _ => None,
        })
        .collect();
    assert!(!updates.is_empty());
    assert_eq!(updates.len() % 3, 0);
    for triple in updates.chunks(3) {
        assert_eq!(triple[0].0, Branch::Global);
        assert_eq!(triple[1].0, Branch::Up);
        assert_eq!(triple[2].0, Branch::Down);
        assert!(triple.iter().all(|t| t.1 == triple[0].1));
    }
}

#[test]
fn warmup_is_frozen_and_teacher_untouched() {
    let ds = small_dataset(3, 6);
    let cfg = quick_cfg(3);
    let teacher = train_teacher(&ds, &cfg, &mut ()).unwrap().params;
    let teacher_bytes = checkpoint_to_bytes(&teacher);

    let mut log = Vec::new();
    let mut banks = Vec::new();
    let mut warm_labels = None;
    train_student(&teacher, &ds, &cfg, &mut |e: &TrainEvent<'_>| {
        if log.iter().all(|s| *s != Step::WarmupDone) {
            match e {
                TrainEvent::MemoryInitialized { bank, .. } => banks.push(bank.snapshot_bits()),
                TrainEvent::WarmupFinished { bank, .. } => banks.push(bank.snapshot_bits()),
                TrainEvent::Clustered { labels, .. } => warm_labels = Some((*labels).clone()),
                _ => {}
            }
        }
        record_steps(e, &mut log);
    })
    .unwrap();

    assert_eq!(checkpoint_to_bytes(&teacher), teacher_bytes);
    assert_eq!(banks.len(), 2);
    assert_eq!(banks[0], banks[1]);
    let done = log.iter().position(|s| *s == Step::WarmupDone).unwrap();
    let warm = &log[..done];
    assert_eq!(warm.iter().filter(|s| **s == Step::Iteration).count(), 2 * 2);
    assert!(!warm.iter().any(|s| matches!(s, Step::Update(..))));

    // Warm-up labels equal a direct clustering of the teacher's embeddings.
    let inputs: Vec<&[f64]> = ds.split(Split::Train).iter().map(|i| i.input.as_slice()).collect();
    let direct = generate_pseudo_labels(
        &embed_all(&teacher, &inputs).unwrap(),
        cfg.lambda1,
        &cfg.dbscan_config(),
    )
    .unwrap();
    assert_eq!(warm_labels.unwrap(), direct);
}

#[test]
fn student_without_distillation_or_warmup_is_the_teacher_algorithm() {
    let ds = small_dataset(4, 6);
    let cfg = TrainConfig {
        mu: 0.0,
        warmup_multiplier: 0,
        ..quick_cfg(4)
    };
    let teacher = train_teacher(&ds, &cfg, &mut ()).unwrap();
    // Any frozen model serves as the (ignored) teacher.
    let other = train_teacher(&ds, &quick_cfg(99), &mut ()).unwrap().params;
    let student = train_student(&other, &ds, &cfg, &mut ()).unwrap();
    assert_eq!(checkpoint_to_bytes(&student.params), checkpoint_to_bytes(&teacher.params));
    for (s, t) in student.records.iter().zip(&teacher.records) {
        assert_eq!(s.mean_loss.to_bits(), t.mean_loss.to_bits());
        assert_eq!(s.num_clusters, t.num_clusters);
    }
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset(5, 6);
    let cfg = quick_cfg(5);
    let a = train_teacher(&ds, &cfg, &mut ()).unwrap();
    let b = train_teacher(&ds, &cfg, &mut ()).unwrap();
    assert_eq!(checkpoint_to_bytes(&a.params), checkpoint_to_bytes(&b.params));
    assert_eq!(a.records, b.records);
    assert_eq!(a.optimizer, b.optimizer);
}

#[test]
fn zero_epochs_returns_initial_params() {
    let ds = small_dataset(6, 6);
    let cfg = TrainConfig {
        num_epochs: 0,
        ..quick_cfg(6)
    };
    let out = train_teacher(&ds, &cfg, &mut ()).unwrap();
    assert!(out.records.is_empty());
    let inputs: Vec<&[f64]> = ds.split(Split::Train).iter().map(|i| i.input.as_slice()).collect();
    let init = TrainState::new(&cfg, &inputs).unwrap().params;
    assert_eq!(checkpoint_to_bytes(&out.params), checkpoint_to_bytes(&init));
}

#[test]
fn clustering_collapse_aborts() {
    let ds = small_dataset(7, 6);
    let cfg = TrainConfig {
        min_pts: 1000,
        num_epochs: 10,
        ..quick_cfg(7)
    };
    let mut epochs = 0;
    let err = train_teacher(&ds, &cfg, &mut |e: &TrainEvent<'_>| {
        if matches!(e, TrainEvent::EpochFinished { .. }) {
            epochs += 1;
        }
    })
    .unwrap_err();
    assert!(matches!(err, Error::ClusteringCollapsed(3)));
    assert_eq!(epochs, 3);
    assert!(err.to_string().contains("clustering collapsed"));
}

#[test]
fn warmup_without_clusters_errors() {
    let ds = small_dataset(8, 6);
    let cfg = quick_cfg(8);
    let teacher = train_teacher(&ds, &cfg, &mut ()).unwrap().params;
    let cfg = TrainConfig {
        min_pts: 1000,
        ..cfg
    };
    let err = train_student(&teacher, &ds, &cfg, &mut ()).unwrap_err();
    assert!(err.to_string().contains("no clusters this epoch"));
}

/// One Adam step on a fixed batch should lower that batch's stage-1 loss.
#[test]
fn single_step_descent() {
    let ds = small_dataset(9, 8);
    let inputs: Vec<&[f64]> = ds.split(Split::Train).iter().map(|i| i.input.as_slice()).collect();
    let mut r = rng(9);
    let mut decreased = 0;
    for trial in 0..100u64 {
        let cfg = TrainConfig {
            seed: trial,
            ..Default::default()
        };
        let params = TrainState::new(&cfg, &inputs).unwrap().params;
        let batch: Vec<usize> = (0..16).map(|_| r.random_range(0..inputs.len())).collect();
        let xs: Vec<&[f64]> = batch.iter().map(|&i| inputs[i]).collect();
        let embs = embed_all(&params, &xs).unwrap();
        let labels = mskd::clustering::compact_labels(
            &(0..xs.len()).map(|i| Some(i % 4)).collect::<Vec<_>>(),
        );
        let bank = ClusterMemoryBank::init(&embs, &labels, 0.1).unwrap();
        let loss_cfg = cfg.loss_config();
        let batch_loss = |p: &EncoderParams| -> (f64, Vec<_>) {
            let (es, _) = forward_batch(p, &xs, Mode::Train).unwrap();
            let outs: Vec<_> = es
                .iter()
                .enumerate()
                .map(|(i, e)| stage1_loss(e, &bank, labels.assignment[i].unwrap(), &loss_cfg).unwrap())
                .collect();
            (outs.iter().map(|o| o.loss).sum(), outs.into_iter().map(|o| o.grads).collect())
        };
        let (before, grads) = batch_loss(&params);
        let (_, cache) = forward_batch(&params, &xs, Mode::Train).unwrap();
        let g = backward(&params, &cache, &grads).unwrap();
        let mut stepped = params.clone();
        let mut adam = AdamState::new(params.num_trainable());
        adam_step(stepped.theta_mut(), &g.flat, &mut adam, 1e-3, 0.0).unwrap();
        let (after, _) = batch_loss(&stepped);
        decreased += usize::from(after < before);
    }
    assert!(decreased >= 90, "loss decreased on {decreased}/100 trials");
}
