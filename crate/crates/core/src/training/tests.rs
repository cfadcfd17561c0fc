use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::augment::AugmentationConfig;
use crate::datagen::{generate, SynthConfig};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::objectives::ContrastiveLossConfig;
use crate::session::{build_vocab_from_sessions, Document};

fn corpus(n: usize) -> (Vec<Session>, Vocab) {
    let cfg = SynthConfig {
        session_count: n,
        n_intents: 6,
        vocab_terms: 120,
        ..SynthConfig::default()
    };
    let sessions = generate(&cfg).unwrap().sessions;
    let vocab = build_vocab_from_sessions(&sessions, 1).unwrap();
    (sessions, vocab)
}

fn encoder(vocab: &Vocab, seed: u64) -> EncoderParams {
    let cfg = EncoderConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        max_len: 64,
        vocab_size: vocab.len(),
        dropout_rate: 0.1,
    };
    EncoderParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn pretrain_cfg(batch: usize) -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: batch,
        ..TrainConfig::pretrain()
    }
}

fn finetune_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        ..TrainConfig::finetune()
    }
}

fn run_pretrain(sessions: &[Session], vocab: &Vocab, params: EncoderParams, train: &TrainConfig) -> PretrainOutcome {
    pretrain(
        sessions,
        vocab,
        params,
        &AugmentationConfig::default(),
        &ContrastiveLossConfig::default(),
        train,
        &mut NoObserver,
    )
    .unwrap()
}

#[test]
fn linear_decay_ends_below_start() {
    let train = TrainConfig {
        epochs: 3,
        learning_rate: 5e-5,
        ..TrainConfig::finetune()
    };
    let (sessions, vocab) = corpus(12);
    let out = finetune(&sessions, None, &vocab, encoder(&vocab, 0), &train, &mut NoObserver).unwrap();
    let first = out.logs.first().unwrap().lr;
    let last = out.logs.last().unwrap().lr;
    assert_eq!(first, 5e-5);
    assert!(last < first && last > 0.0);
    assert_eq!(train.lr_at(5, 10), 2.5e-5);
    assert_eq!(TrainConfig::pretrain().lr_at(9, 10), 1e-3);
}

#[test]
fn data_fraction_uses_floor_of_sessions() {
    let (sessions, vocab) = corpus(53);
    let train = TrainConfig {
        data_fraction: 0.2,
        ..pretrain_cfg(4)
    };
    let out = run_pretrain(&sessions, &vocab, encoder(&vocab, 0), &train);
    assert_eq!(out.sessions_used, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = subsample(&sessions, 0.2, &mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(a, subsample(&sessions, 0.2, &mut rng));
}

#[test]
fn constant_encoder_logs_chance_accuracy() {
    let (sessions, vocab) = corpus(40);
    let mut params = encoder(&vocab, 0);
    params.fill(0.0);
    params.g1_b.fill(1.0);
    let train = TrainConfig {
        learning_rate: 0.0,
        ..pretrain_cfg(8)
    };
    let out = run_pretrain(&sessions, &vocab, params, &train);
    assert_eq!(out.logs.len(), 5);
    for log in &out.logs {
        assert!((log.acc.unwrap() - 1.0 / 15.0).abs() < 1e-12);
        assert!((log.loss - 15f64.ln()).abs() < 1e-9);
    }
}

#[test]
fn first_step_loss_is_near_uniform() {
    let (sessions, vocab) = corpus(16);
    let bound = 15f64.ln();
    for seed in 0..10 {
        let train = TrainConfig {
            seed,
            ..pretrain_cfg(8)
        };
        let out = run_pretrain(&sessions, &vocab, encoder(&vocab, seed), &train);
        let l = out.logs[0].loss;
        assert!(l >= 0.5 * bound && l <= 1.5 * bound, "seed {seed}: {l}");
    }
}

#[test]
fn pretraining_is_deterministic() {
    let (sessions, vocab) = corpus(20);
    let a = run_pretrain(&sessions, &vocab, encoder(&vocab, 1), &pretrain_cfg(4));
    let b = run_pretrain(&sessions, &vocab, encoder(&vocab, 1), &pretrain_cfg(4));
    assert_eq!(a.params, b.params);
    assert_eq!(a.logs, b.logs);
}

#[test]
fn pretraining_needs_two_sessions() {
    let (sessions, vocab) = corpus(3);
    let train = TrainConfig {
        data_fraction: 0.5,
        ..pretrain_cfg(2)
    };
    let err = pretrain(
        &sessions,
        &vocab,
        encoder(&vocab, 0),
        &AugmentationConfig::default(),
        &ContrastiveLossConfig::default(),
        &train,
        &mut NoObserver,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    assert!(TrainConfig { batch_size: 1, ..pretrain_cfg(2) }.validate().is_err());
}

#[test]
fn instance_count_is_total_candidates() {
    let (mut sessions, vocab) = corpus(10);
    sessions[0].queries[0].candidates.truncate(3);
    let expected: usize = sessions.iter().flat_map(|s| &s.queries).map(|q| q.candidates.len()).sum();
    assert_eq!(ranking_instances(&sessions, &vocab, 64).len(), expected);
    sessions[1].queries[0].candidates.clear();
    assert_eq!(ranking_instances(&sessions, &vocab, 64).len(), expected - 5);
    let out = finetune(&sessions, None, &vocab, encoder(&vocab, 0), &finetune_cfg(), &mut NoObserver).unwrap();
    assert_eq!(out.instances, expected - 5);
}

#[test]
fn pretrained_and_random_starts_differ() {
    let (sessions, vocab) = corpus(16);
    let pre = run_pretrain(&sessions, &vocab, encoder(&vocab, 2), &pretrain_cfg(4)).params;
    let a = finetune(&sessions, None, &vocab, pre, &finetune_cfg(), &mut NoObserver).unwrap();
    let b = finetune(&sessions, None, &vocab, encoder(&vocab, 2), &finetune_cfg(), &mut NoObserver).unwrap();
    assert!(a.params.is_finite() && b.params.is_finite());
    assert_ne!(a.params, b.params);
}

#[test]
fn validation_selects_best_epoch() {
    let (sessions, vocab) = corpus(24);
    let train = TrainConfig {
        epochs: 3,
        ..TrainConfig::finetune()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut obs = CheckpointDir::create(dir.path(), vocab.clone(), serde_json::json!({})).unwrap();
    let out = finetune(&sessions[..16], Some(&sessions[16..]), &vocab, encoder(&vocab, 0), &train, &mut obs).unwrap();
    assert_eq!(out.validation.len(), 3);
    let best = out
        .validation
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, r)| if r.map > acc.1 { (i + 1, r.map) } else { acc });
    assert_eq!(out.best_epoch, best.0);
    assert_eq!(obs.best_epoch(), Some(best.0));
    for e in 1..=3 {
        assert!(obs.epoch_path(e).exists());
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), out.logs.len());
    let first: StepLog = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first.stage, Stage::Finetune);
    assert!(first.acc.is_none());
}

fn trained_checkpoint() -> (Checkpoint, Vec<Session>) {
    let (sessions, vocab) = corpus(12);
    let out = finetune(&sessions, None, &vocab, encoder(&vocab, 0), &finetune_cfg(), &mut NoObserver).unwrap();
    (Checkpoint::new(vocab, out.params), sessions)
}

#[test]
fn predict_scores_every_candidate_deterministically() {
    let (ck, sessions) = trained_checkpoint();
    let two = vec![Session::new("x", sessions[0].queries[..1].to_vec()).unwrap(), {
        let mut s = sessions[1].clone();
        s.session_id = "y".into();
        s.queries.truncate(1);
        s
    }];
    let run = predict(&ck, &two, "t").unwrap();
    assert_eq!(run.rows.len(), 10);
    assert_eq!(run.to_trec_string(), predict(&ck, &two, "t").unwrap().to_trec_string());

    let restored = Checkpoint::from_json(&ck.to_json()).unwrap();
    assert_eq!(predict(&restored, &sessions, "t").unwrap(), predict(&ck, &sessions, "t").unwrap());
}

#[test]
fn duplicate_titles_score_identically() {
    let (ck, sessions) = trained_checkpoint();
    let mut s = sessions[0].clone();
    let dup = s.queries[0].candidates[0].title.clone();
    s.queries[0].candidates[3] = Document::new(dup, 0, None).unwrap();
    let run = predict(&ck, &[s], "t").unwrap();
    let score = |doc: &str| run.rows.iter().find(|r| r.doc_id == doc && r.query_id.ends_with("_1")).unwrap().score;
    assert_eq!(score("d000"), score("d003"));
}

#[test]
fn foreign_vocabulary_is_rejected() {
    let (ck, _) = trained_checkpoint();
    let foreign = crate::session::parse_sessions(
        r#"{"session_id":"z","queries":[{"text":"alpha beta","timestamp":1,"candidates":[{"title":"gamma delta","click":1}]}]}"#,
        std::path::Path::new("x"),
    )
    .unwrap();
    assert!(matches!(predict(&ck, &foreign, "t"), Err(Error::Data(_))));
}

#[test]
fn train_config_key_values() {
    let cfg = TrainConfig {
        grad_clip: Some(1.0),
        seed: 4,
        ..TrainConfig::finetune()
    };
    let mut back = TrainConfig::pretrain();
    config::apply_all(&mut [&mut back], &cfg.entries()).unwrap();
    assert_eq!(back, cfg);
    assert!(back.set("lr_schedule", "cosine").is_err());
}

#[test]
fn pretraining_holds_position_embeddings_fixed_by_default() {
    let (sessions, vocab) = corpus(16);
    let start = encoder(&vocab, 5);
    let out = run_pretrain(&sessions, &vocab, start.clone(), &pretrain_cfg(4));
    assert_eq!(out.params.pos_emb, start.pos_emb);
    assert_ne!(out.params.tok_emb, start.tok_emb);

    let thawed = TrainConfig {
        frozen: Vec::new(),
        ..pretrain_cfg(4)
    };
    let out = run_pretrain(&sessions, &vocab, start.clone(), &thawed);
    assert_ne!(out.params.pos_emb, start.pos_emb);
}

#[test]
fn unknown_frozen_entry_is_a_config_error() {
    let (sessions, vocab) = corpus(8);
    let train = TrainConfig {
        frozen: vec!["layers.7".into()],
        ..finetune_cfg()
    };
    let err = finetune(&sessions, None, &vocab, encoder(&vocab, 0), &train, &mut NoObserver).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let mut cfg = TrainConfig::finetune();
    cfg.set("frozen", "tok_emb, layers.0").unwrap();
    assert_eq!(cfg.frozen, vec!["tok_emb".to_string(), "layers.0".to_string()]);
    cfg.set("frozen", "none").unwrap();
    assert!(cfg.frozen.is_empty());
}
