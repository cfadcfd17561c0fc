use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::session::{TokenSequence, CLS, EOS, PAD, SEP};

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_len: 16,
        vocab_size: 20,
        dropout_rate: 0.0,
    }
}

fn params(config: &EncoderConfig, seed: u64) -> EncoderParams {
    EncoderParams::init_with_std(config, 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn seq(ids: &[u32], max_len: usize) -> TokenSequence {
    let mut padded = ids.to_vec();
    padded.resize(max_len, PAD);
    TokenSequence {
        ids: padded,
        segments: vec![0; max_len],
        positions: (0..max_len as u32).collect(),
        attn_mask: (0..max_len).map(|i| u8::from(i < ids.len())).collect(),
    }
}

fn sample_batch(max_len: usize) -> Vec<TokenSequence> {
    vec![
        seq(&[CLS, 9, 10, EOS, 11, EOS, SEP], max_len),
        seq(&[CLS, 12, EOS, 13, 14, 15, EOS, SEP], max_len),
        seq(&[CLS, 16, EOS, SEP], max_len),
    ]
}

#[test]
fn output_shape_and_determinism() {
    let cfg = EncoderConfig {
        n_layers: 2,
        ..tiny_config()
    };
    let p = params(&cfg, 1);
    let batch = sample_batch(cfg.max_len);
    let (a, _) = p.forward(&batch, None).unwrap();
    let (b, _) = p.forward(&batch, None).unwrap();
    assert_eq!(a.dim(), (3, 8));
    assert_eq!(a, b);
}

#[test]
fn zero_layers_reads_embedding_of_cls() {
    let cfg = EncoderConfig {
        n_layers: 0,
        ..tiny_config()
    };
    let p = params(&cfg, 2);
    let batch = sample_batch(cfg.max_len);
    let (rep, _) = p.forward(&batch, None).unwrap();
    let x = &p.tok_emb.row(CLS as usize) + &p.pos_emb.row(0) + &p.seg_emb.row(0);
    let mean = x.sum() / 8.0;
    let centered = x.mapv(|v| v - mean);
    let std = (centered.dot(&centered) / 8.0 + 1e-12).sqrt();
    let expected: Array1<f64> = &centered / std * &p.emb_ln_g.row(0) + &p.emb_ln_b.row(0);
    for b in 0..3 {
        for (u, v) in rep.row(b).iter().zip(expected.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}

#[test]
fn padding_does_not_change_output() {
    let cfg = EncoderConfig {
        n_layers: 2,
        max_len: 32,
        ..tiny_config()
    };
    let p = params(&cfg, 3);
    let short = sample_batch(10);
    let long = sample_batch(32);
    let (a, _) = p.forward(&short, None).unwrap();
    let (b, _) = p.forward(&long, None).unwrap();
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn attention_rows_are_distributions() {
    let cfg = EncoderConfig {
        n_layers: 2,
        ..tiny_config()
    };
    let p = params(&cfg, 4);
    let (_, trace) = p.forward(&sample_batch(cfg.max_len), None).unwrap();
    for i in 0..3 {
        let len = trace.real_len(i).unwrap();
        for layer in 0..2 {
            for head in 0..2 {
                let probs = trace.attention(i, layer, head).unwrap();
                assert_eq!(probs.ncols(), len);
                for row in probs.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn rejects_out_of_range_ids() {
    let p = params(&tiny_config(), 5);
    let bad = seq(&[CLS, 99, SEP], 16);
    assert!(matches!(p.forward(&[bad], None), Err(Error::Data(_))));
}

#[test]
fn g1_identity_and_constant() {
    let mut p = params(&tiny_config(), 6);
    let (rep, _) = p.forward(&sample_batch(16), None).unwrap();
    p.g1_w = Array2::eye(8);
    p.g1_b.fill(0.0);
    assert_eq!(p.project_g1(&rep), rep);
    p.g1_w.fill(0.0);
    p.g1_b = Array2::from_shape_fn((1, 8), |(_, j)| j as f64);
    let z = p.project_g1(&rep);
    for row in z.rows() {
        assert_eq!(row, p.g1_b.row(0));
    }
}

#[test]
fn g2_examples() {
    let mut p = params(&tiny_config(), 7);
    let (rep, _) = p.forward(&sample_batch(16), None).unwrap();
    p.g2_w.fill(0.0);
    assert!(p.project_g2(&rep).iter().all(|&s| s == 0.5));
    p.g2_b.fill(20.0);
    assert!(p.project_g2(&rep).iter().all(|&s| (1.0 - s) < 1e-8));
    let mut prev = 0.0;
    for b in [-3.0, -1.0, 0.0, 0.5, 4.0] {
        p.g2_b.fill(b);
        let s = p.project_g2(&rep)[0];
        assert!(s > prev);
        prev = s;
    }
}

#[test]
fn unused_parameters_get_zero_gradient() {
    let p = params(&tiny_config(), 8);
    let batch = sample_batch(16);
    let (rep, trace) = p.forward(&batch, None).unwrap();
    let mut grads = p.zeros_like();
    let d_rep = Array2::from_elem(rep.raw_dim(), 0.1);
    p.backward(&trace, &d_rep, &mut grads).unwrap();
    // token 17 appears nowhere; position 12 is beyond every sequence; no segment-1 tokens
    assert!(grads.tok_emb.row(17).iter().all(|&g| g == 0.0));
    assert!(grads.pos_emb.row(12).iter().all(|&g| g == 0.0));
    assert!(grads.seg_emb.row(1).iter().all(|&g| g == 0.0));
    assert!(grads.g1_w.iter().all(|&g| g == 0.0));
    assert!(grads.tok_emb.row(9).iter().any(|&g| g != 0.0));
}

#[test]
fn duplicate_examples_contribute_equally() {
    let p = params(&tiny_config(), 9);
    let one = vec![sample_batch(16)[1].clone()];
    let two = vec![one[0].clone(), one[0].clone()];
    let (rep1, t1) = p.forward(&one, None).unwrap();
    let (rep2, t2) = p.forward(&two, None).unwrap();
    assert_eq!(rep2.row(0), rep2.row(1));
    let mut g1 = p.zeros_like();
    let mut g2 = p.zeros_like();
    let upstream = Array2::from_shape_fn(rep1.raw_dim(), |(_, j)| j as f64 - 3.0);
    p.backward(&t1, &upstream, &mut g1).unwrap();
    let upstream2 = Array2::from_shape_fn(rep2.raw_dim(), |(_, j)| j as f64 - 3.0);
    p.backward(&t2, &upstream2, &mut g2).unwrap();
    g1.scale(2.0);
    for ((_, a), (_, b)) in g1.named_tensors().into_iter().zip(g2.named_tensors()) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }
}

#[test]
fn backward_rejects_mismatched_upstream() {
    let p = params(&tiny_config(), 10);
    let (_, trace) = p.forward(&sample_batch(16), None).unwrap();
    let mut grads = p.zeros_like();
    assert!(p.backward(&trace, &Array2::zeros((2, 8)), &mut grads).is_err());
}

#[test]
fn dropout_only_in_train_mode() {
    let cfg = EncoderConfig {
        dropout_rate: 0.5,
        ..tiny_config()
    };
    let p = params(&cfg, 11);
    let batch = sample_batch(16);
    let (eval, _) = p.forward(&batch, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (train, trace) = p.forward(&batch, Some(&mut rng)).unwrap();
    assert_ne!(eval, train);
    let zeros = train.iter().filter(|&&v| v == 0.0).count();
    assert!(zeros > 0);
    for (e, t) in eval.iter().zip(train.iter()) {
        assert!(*t == 0.0 || (t - 2.0 * e).abs() < 1e-12);
    }
    // gradient flows only through kept units
    let mut grads = p.zeros_like();
    p.backward(&trace, &Array2::ones(train.raw_dim()), &mut grads).unwrap();
    assert!(grads.global_norm() > 0.0);
}

#[test]
fn gradients_match_finite_differences() {
    for seed in [1, 2] {
        let p = params(&tiny_config(), seed);
        let report = grad_check(&p, seed).unwrap();
        assert!(report.passed(), "{:?}", report.worst());
        assert!(report.groups.iter().any(|g| g.max_abs_grad > 0.0));
    }
}

#[test]
fn two_layer_gradients_match_finite_differences() {
    let cfg = EncoderConfig {
        n_layers: 2,
        ..tiny_config()
    };
    let report = grad_check(&params(&cfg, 3), 3).unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}

#[test]
fn grad_check_detects_a_perturbed_attention_gradient() {
    let p = params(&tiny_config(), 4);
    let report = grad_check_with(&p, 4, |g| {
        g.layers[0].wq *= 1.01;
    })
    .unwrap();
    assert!(!report.passed());
    assert!(report.failures().iter().all(|f| f.name == "layers.0.wq"));
}

#[test]
fn grad_check_requires_dropout_off() {
    let cfg = EncoderConfig {
        dropout_rate: 0.1,
        ..tiny_config()
    };
    assert!(matches!(grad_check(&params(&cfg, 5), 5), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_and_validation() {
    use crate::session::Vocab;
    let counts = (0..12).map(|i| (format!("t{i}"), 1)).collect();
    let vocab = Vocab::from_counts(&counts, 1).unwrap();
    let p = params(&tiny_config(), 12);
    let ck = Checkpoint::new(vocab.clone(), p.clone());
    let restored = Checkpoint::from_json(&ck.to_json()).unwrap();
    assert_eq!(restored, ck);

    let mut broken: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
    broken["tensors"][0]["shape"] = serde_json::json!([21, 8]);
    assert!(Checkpoint::from_json(&broken.to_string()).is_err());
    let mut version: serde_json::Value = serde_json::from_str(&ck.to_json()).unwrap();
    version["format_version"] = serde_json::json!(99);
    assert!(Checkpoint::from_json(&version.to_string()).is_err());
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config();
    cfg.n_heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config();
    cfg.max_len = 4;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config();
    cfg.dropout_rate = 1.0;
    assert!(cfg.validate().is_err());
}
