use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{embeddings, stay, toy};
use hcr_core::cohort::grouped_kfold;
use hcr_core::models::{predict, ModelConfig, ModelKind, ModelParams, StayInput, EMBEDDING_TABLE};
use hcr_core::ndcore::optim::AmsGrad;
use hcr_core::traineval::{auroc, cross_validate, train_model, train_step, TrainConfig};

fn deterministic(cfg: ModelConfig) -> ModelConfig {
    ModelConfig { spatial_dropout: 0.0, fusion_dropout: 0.0, conv_weight_decay: 0.0, cts_weight_decay: 0.0, ..cfg }
}

/// Stays whose notes carry token 1 exactly when the label is positive.
fn planted(n: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<StayInput> {
    (0..n)
        .map(|i| {
            let mut s = stay(i as u64, cfg, 1 + i % 3, 5, 20, rng);
            s.label = i % 2 == 0;
            let seq = s.notes.as_mut().unwrap();
            for (j, t) in seq.tokens.iter_mut().enumerate() {
                if *t == 1 {
                    *t = 2;
                }
                if s.label && j % cfg.note_length == 0 {
                    *t = 1;
                }
            }
            s
        })
        .collect()
}

#[test]
fn single_batch_loss_does_not_increase() {
    let cfg = deterministic(toy());
    for kind in ModelKind::ALL {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let emb = embeddings(20, cfg.embedding_dim, &mut rng);
            let stays: Vec<StayInput> = (0..6).map(|i| stay(i, &cfg, 2, 5, 20, &mut rng)).collect();
            let batch: Vec<&StayInput> = stays.iter().collect();
            let mut params = ModelParams::init(kind, &cfg, seed).unwrap();
            let mut opt = AmsGrad::new(1e-3);
            let mut losses = Vec::new();
            for _ in 0..11 {
                let mut r = ChaCha8Rng::seed_from_u64(0);
                losses.push(train_step(&mut params, &mut opt, &batch, (1.0, 1.5), Some(&emb), &mut r).unwrap());
            }
            let rises = losses.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
            assert!(rises <= 1, "{kind} seed {seed}: {losses:?}");
            for w in losses.windows(2) {
                assert!(w[1] <= w[0] + 1e-6, "{kind} seed {seed}: {losses:?}");
            }
            assert!(losses[10] < losses[0], "{kind} seed {seed}: {losses:?}");
        }
    }
}

#[test]
fn amsgrad_second_moment_maximum_never_shrinks() {
    let cfg = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emb = embeddings(20, cfg.embedding_dim, &mut rng);
    let stays: Vec<StayInput> = (0..8).map(|i| stay(i, &cfg, 1 + i as usize % 2, 5, 20, &mut rng)).collect();
    let mut params = ModelParams::init(ModelKind::MmHcr, &cfg, 1).unwrap();
    let mut opt = AmsGrad::new(1e-2);
    let names: Vec<String> = params.trainable_names().cloned().collect();
    let mut prev: Option<Vec<Vec<f64>>> = None;
    for step in 0..12 {
        let batch: Vec<&StayInput> = stays.iter().filter(|s| s.n_notes() == 1 + step % 2).collect();
        train_step(&mut params, &mut opt, &batch, (1.0, 2.0), Some(&emb), &mut rng).unwrap();
        let now: Vec<Vec<f64>> = names.iter().map(|n| opt.v_max(n).unwrap().to_vec()).collect();
        if let Some(p) = &prev {
            for (a, b) in p.iter().flatten().zip(now.iter().flatten()) {
                assert!(b >= a, "v_max decreased at step {step}");
            }
        }
        prev = Some(now);
    }
    assert_eq!(opt.steps(), 12);
}

#[test]
fn training_history_and_best_epoch_agree() {
    let cfg = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let emb = embeddings(20, cfg.embedding_dim, &mut rng);
    let stays = planted(24, &cfg, &mut rng);
    let (train, val): (Vec<&StayInput>, Vec<&StayInput>) = stays.iter().partition(|s| s.hadm_id % 4 != 0);
    for kind in ModelKind::ALL {
        let mut t = TrainConfig::for_model(kind);
        t.epochs = 8;
        t.patience = 3;
        t.batch_size = 4;
        let m = train_model(kind, &cfg, &t, &train, &val, Some(&emb), 2).unwrap();
        assert!(!m.history.is_empty() && m.history.len() <= t.epochs);
        let min = m.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(m.best_val_loss, min);
        assert_eq!(m.history[m.best_epoch - 1].val_loss, min);
        // stopping happens exactly `patience` epochs after the best one, or at the limit
        assert!(m.history.len() == t.epochs || m.history.len() == m.best_epoch + t.patience);
        for r in &m.history {
            assert!(r.train_loss.is_finite() && r.val_loss.is_finite());
        }
    }
}

#[test]
fn note_model_memorises_planted_token_without_dropout() {
    let cfg = ModelConfig { spatial_dropout: 0.0, ..toy() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let emb = embeddings(20, cfg.embedding_dim, &mut rng);
    let stays = planted(40, &cfg, &mut rng);
    let refs: Vec<&StayInput> = stays.iter().collect();
    let mut t = TrainConfig::for_model(ModelKind::NotesHcr);
    t.epochs = 60;
    t.patience = 60;
    t.lr = 1e-2;
    t.lr_drops = Vec::new();
    t.batch_size = 8;
    let m = train_model(ModelKind::NotesHcr, &cfg, &t, &refs, &refs, Some(&emb), 3).unwrap();
    let probs = predict(&m.params, &refs, Some(&emb), 16).unwrap();
    let labels: Vec<bool> = refs.iter().map(|s| s.label).collect();
    let a = auroc(&probs, &labels).unwrap();
    assert!(a >= 0.99, "training AUROC {a}");
}

#[test]
fn cross_validation_does_not_depend_on_thread_count() {
    let cfg = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let emb = embeddings(20, cfg.embedding_dim, &mut rng);
    let stays = planted(30, &cfg, &mut rng);
    let pairs: Vec<(u64, u64)> = stays.iter().map(|s| (s.hadm_id, s.hadm_id / 2 + rng.gen_range(0..2) * 100)).collect();
    let folds = grouped_kfold(&pairs, 5, 4).unwrap();
    for kind in [ModelKind::CtsRnn, ModelKind::MmHcr] {
        let mut t = TrainConfig::for_model(kind);
        t.epochs = 2;
        t.batch_size = 8;
        t.seed = 21;
        let one = cross_validate(kind, 24, &cfg, &t, &stays, &folds, Some(&emb), 1).unwrap();
        let two = cross_validate(kind, 24, &cfg, &t, &stays, &folds, Some(&emb), 2).unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(a.test_ids, b.test_ids);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.test_probs), bits(&b.test_probs), "{kind} fold {}", a.fold);
            assert_eq!(a.model.params, b.model.params);
        }
    }
}

#[test]
fn trainable_embeddings_start_pretrained_and_keep_padding_zero() {
    let cfg = ModelConfig { train_embeddings: true, ..toy() };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let emb = embeddings(20, cfg.embedding_dim, &mut rng);
    let stays = planted(16, &cfg, &mut rng);
    let refs: Vec<&StayInput> = stays.iter().collect();
    let mut t = TrainConfig::for_model(ModelKind::NotesHcr);
    t.epochs = 3;
    t.patience = 3;
    t.batch_size = 4;
    let m = train_model(ModelKind::NotesHcr, &cfg, &t, &refs, &refs, Some(&emb), 1).unwrap();
    let table = m.params.get(EMBEDDING_TABLE).unwrap();
    assert_eq!(table.shape(), [20, cfg.embedding_dim]);
    assert!(table.data()[..cfg.embedding_dim].iter().all(|v| *v == 0.0));
    assert_ne!(table.data(), emb.data.as_slice());
    assert_eq!(
        m.params.param_count(),
        ModelParams::init(ModelKind::NotesHcr, &toy(), 0).unwrap().param_count() + 20 * cfg.embedding_dim
    );

    // the table travels with the model: no external vectors needed to predict
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.params.save(&path).unwrap();
    let loaded = ModelParams::load(&path).unwrap();
    let a = predict(&m.params, &refs, None, 8).unwrap();
    let b = predict(&loaded, &refs, Some(&emb), 8).unwrap();
    assert_eq!(a, b);

    // frozen embeddings are not parameters
    let frozen = ModelParams::init(ModelKind::NotesHcr, &toy(), 0).unwrap();
    assert!(frozen.get(EMBEDDING_TABLE).is_err());
}
