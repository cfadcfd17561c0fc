use coca_core::encoder::{Checkpoint, EncoderConfig, EncoderParams};
use coca_core::evaluation::{evaluate, Qrels, RunFile, DEFAULT_KS};
use coca_core::experiment::{prepare_data, run_pipeline, ExperimentConfig};
use coca_core::session::{read_sessions, write_sessions};
use coca_core::training::score_sessions;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn library_pipeline_is_reproducible() {
    let cfg = ExperimentConfig::tiny();
    let data = prepare_data(&cfg).unwrap();
    let a = run_pipeline(&cfg, &data, true).unwrap();
    let b = run_pipeline(&cfg, &data, true).unwrap();
    assert!(a.pretrained);
    assert_eq!(a.run.to_trec_string(), b.run.to_trec_string());
    assert_eq!(a.test, b.test);
    assert!(a.contrastive_loss.unwrap().is_finite());

    let base = run_pipeline(&cfg, &data, false).unwrap();
    assert!(base.contrastive_loss.is_none());
    assert_eq!(base.test.evaluated, a.test.evaluated);
}

#[test]
fn sessions_and_checkpoints_survive_the_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::tiny();
    let data = prepare_data(&cfg).unwrap();

    let path = dir.path().join("test.jsonl");
    write_sessions(&path, &data.test).unwrap();
    assert_eq!(read_sessions(&path).unwrap(), data.test);

    let enc = EncoderConfig {
        vocab_size: data.vocab.len(),
        ..cfg.encoder.clone()
    };
    let params = EncoderParams::init(&enc, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let ckpt_path = dir.path().join("checkpoint.json");
    Checkpoint::new(data.vocab.clone(), params.clone()).save(&ckpt_path).unwrap();
    let loaded = Checkpoint::load(&ckpt_path).unwrap();

    let before = RunFile::from_scores("t", score_sessions(&params, &data.vocab, &data.test).unwrap());
    let after = RunFile::from_scores("t", score_sessions(&loaded.params, &loaded.vocab, &data.test).unwrap());
    assert_eq!(before, after);

    let qrels = Qrels::from_sessions(&data.test);
    let qrels_path = dir.path().join("test.qrels");
    qrels.write(&qrels_path).unwrap();
    let report = evaluate(&after, &Qrels::read(&qrels_path).unwrap(), &DEFAULT_KS).unwrap();
    assert!(report.evaluated > 0);
    assert!((0.0..=1.0).contains(&report.map));
}
