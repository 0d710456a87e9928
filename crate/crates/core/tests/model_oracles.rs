mod common;

use baklava::attention::softmax_in_place;
use baklava::cache::{CacheSet, DEFAULT_SINKS};
use baklava::model::{init_model, Model, Weights};
use baklava::tensor::Matrix;
use baklava::ModelConfig;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use common::*;

fn small() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_q_heads: 4,
        num_kv_heads: 2,
        head_dim: 8,
        d_model: 32,
        d_ff: 64,
        max_context: 64,
        ..ModelConfig::default()
    }
}

#[test]
fn seed_seven_first_embedding_entry() {
    let model = init_model(&ModelConfig::default().with_seed(7)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let first: f32 = Normal::new(0.0f32, 0.02).unwrap().sample(&mut rng);
    assert_eq!(model.weights().embedding.get(0, 0).to_bits(), first.to_bits());
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let a = init_model(&ModelConfig::default()).unwrap();
    let b = init_model(&ModelConfig::default()).unwrap();
    let c = init_model(&ModelConfig::default().with_seed(1)).unwrap();
    assert_eq!(a.weights(), b.weights());
    assert_ne!(a.weights(), c.weights());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = ModelConfig {
        num_kv_heads: 3,
        ..ModelConfig::default()
    };
    let msg = init_model(&bad).unwrap_err().to_string();
    assert!(msg.contains("num_q_heads not multiple of num_kv_heads"), "{msg}");
    let odd = ModelConfig {
        head_dim: 15,
        d_model: 120,
        ..ModelConfig::default()
    };
    assert!(init_model(&odd).is_err());
}

#[test]
fn logits_match_cache_free_oracle_on_one_chunk() {
    let model = init_model(&small()).unwrap();
    let tokens: Vec<u32> = baklava::io::encode_text(b"grouped query heads share");
    let mut caches = CacheSet::full(model.config(), DEFAULT_SINKS).unwrap();
    let out = model.forward_chunk(&tokens, &mut caches, false).unwrap();
    assert!(max_relative_error(&out.logits, &reference_logits(&model, &tokens)) < 1e-5);
}

#[test]
fn split_feeding_equals_one_chunk() {
    let model = init_model(&small()).unwrap();
    let tokens: Vec<u32> = baklava::io::encode_text(b"feeding in pieces");
    let mut whole = CacheSet::full(model.config(), DEFAULT_SINKS).unwrap();
    let a = model.forward_chunk(&tokens, &mut whole, false).unwrap().logits;
    let mut parts = CacheSet::full(model.config(), DEFAULT_SINKS).unwrap();
    let mut b = Matrix::zeros(0, model.config().vocab_size);
    for piece in tokens.chunks(5) {
        b.extend_rows(&model.forward_chunk(piece, &mut parts, false).unwrap().logits)
            .unwrap();
    }
    let b_f64: Vec<Vec<f64>> = b
        .iter_rows()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    assert!(max_relative_error(&a, &b_f64) < 1e-5);
}

/// Expands each KV group into one copy per query head.
fn as_mha(model: &Model) -> Model {
    let cfg = model.config();
    let gs = cfg.group_size();
    let hd = cfg.head_dim;
    let mut w: Weights = model.weights().clone();
    for l in &mut w.layers {
        let expand = |m: &Matrix| {
            let rows: Vec<Vec<f32>> = (0..cfg.num_q_heads)
                .flat_map(|h| {
                    let g = h / gs;
                    (g * hd..(g + 1) * hd).map(|r| m.row(r).to_vec()).collect::<Vec<_>>()
                })
                .collect();
            Matrix::from_rows(&rows).unwrap()
        };
        l.wk = expand(&l.wk);
        l.wv = expand(&l.wv);
    }
    let mha = ModelConfig {
        num_kv_heads: cfg.num_q_heads,
        ..cfg.clone()
    };
    Model::from_weights(mha, w).unwrap()
}

#[test]
fn gqa_matches_mha_with_replicated_kv() {
    let gqa = init_model(&small()).unwrap();
    let mha = as_mha(&gqa);
    let tokens: Vec<u32> = baklava::io::encode_text(b"one cache per group");
    let mut c1 = CacheSet::full(gqa.config(), DEFAULT_SINKS).unwrap();
    let mut c2 = CacheSet::full(mha.config(), DEFAULT_SINKS).unwrap();
    let a = gqa.forward_stream(&tokens, &mut c1).unwrap();
    let b = mha.forward_stream(&tokens, &mut c2).unwrap();
    let b64: Vec<Vec<f64>> = b
        .iter_rows()
        .map(|r| r.iter().map(|&x| x as f64).collect())
        .collect();
    assert!(max_relative_error(&a, &b64) < 1e-5);
    // group size 1 is plain multi-head attention
    assert!(max_relative_error(&b, &reference_logits(&mha, &tokens)) < 1e-5);
}

#[test]
fn generation_matches_oracle_and_is_repeatable() {
    let model = init_model(&small()).unwrap();
    let prompt = baklava::io::encode_text(b"abc");
    let run = || {
        let mut c = CacheSet::full(model.config(), DEFAULT_SINKS).unwrap();
        model.greedy_generate(&prompt, 12, &mut c).unwrap()
    };
    let got = run();
    assert_eq!(got, run());
    assert_eq!(got, reference_generate(&model, &prompt, 12));
    let mut c = CacheSet::full(model.config(), DEFAULT_SINKS).unwrap();
    assert!(model.greedy_generate(&prompt, 0, &mut c).unwrap().is_empty());
    assert_eq!(c.total_seen(), 0);
}

#[test]
fn out_of_vocab_and_empty_inputs_fail() {
    let model = init_model(&small()).unwrap();
    let mut c = CacheSet::full(model.config(), DEFAULT_SINKS).unwrap();
    assert!(model.forward_chunk(&[], &mut c, false).is_err());
    assert!(model.forward_chunk(&[257], &mut c, false).is_err());
}

#[test]
fn from_weights_rejects_bad_shapes_and_nan() {
    let model = init_model(&small()).unwrap();
    let mut w = model.weights().clone();
    w.final_norm.pop();
    assert!(Model::from_weights(small(), w).is_err());
    let mut w = model.weights().clone();
    w.layers[0].norm1[0] = f32::NAN;
    assert!(Model::from_weights(small(), w).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(xs in prop::collection::vec(-50.0f64..50.0, 1..64)) {
        let mut v = xs.clone();
        softmax_in_place(&mut v);
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(v.iter().all(|p| *p >= 0.0));
    }
}
