use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::ModelConfig;
use crate::model::init_model;
use crate::store::{KvStore, StoreConfig};
use crate::tensor::rope_apply;

fn small() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        head_dim: 4,
        tokens_per_frame: 2,
        vocab_size: 32,
        local_window: 8,
        chunk_size: 4,
        ..ModelConfig::default()
    }
}

fn encoder(cfg: &ModelConfig, seed: u64, sink_frames: usize) -> StreamEncoder {
    let model = Arc::new(init_model(cfg, seed).unwrap());
    let (writer, _) = KvStore::create(StoreConfig::for_model(cfg, sink_frames)).unwrap();
    StreamEncoder::new(model, writer, sink_frames).unwrap()
}

fn frames(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<InputFrame> {
    (0..n)
        .map(|i| InputFrame {
            tokens: (0..cfg.tokens_per_frame)
                .map(|_| rng.random_range(0..cfg.vocab_size as u32))
                .collect(),
            timestamp: i as f64,
        })
        .collect()
}

fn stored_bits(store: &KvStore) -> Vec<Vec<u32>> {
    let snap = store.snapshot();
    let all: Vec<u64> = (0..snap.len()).collect();
    snap.load(&all).unwrap().iter().map(|f| f.bits()).collect()
}

/// Straightforward per-token reference: for each token and layer, list the
/// visible positions, rotate every key at its effective position, and run
/// softmax attention with plain loops.
fn naive_windowed(model: &ToyModel, tokens: &[u32], sink_tokens: usize, clamp: bool) -> Matrix {
    let cfg = model.config();
    let (h, d, window) = (cfg.num_heads, cfg.head_dim, cfg.local_window);
    let mut hidden = model.embed_tokens(tokens).unwrap();
    for layer in 0..cfg.num_layers {
        let p = model.project(layer, &hidden).unwrap();
        let mut attn = Matrix::zeros(tokens.len(), h * d);
        for t in 0..tokens.len() {
            let q = rope_apply(p.q.row(t), t as u64, d, cfg.rope_base).unwrap();
            let lo = (t + 1).saturating_sub(window);
            let mut visible: Vec<(usize, u64)> = (0..sink_tokens.min(lo))
                .map(|j| (j, if clamp { (t - window) as u64 } else { j as u64 }))
                .collect();
            visible.extend((lo..=t).map(|j| (j, j as u64)));
            for head in 0..h {
                let cols = head * d..(head + 1) * d;
                let scores: Vec<f64> = visible
                    .iter()
                    .map(|&(j, pos)| {
                        let k = rope_apply(p.k.row(j), pos, d, cfg.rope_base).unwrap();
                        let s: f64 = cols.clone().map(|c| q[c] as f64 * k[c] as f64).sum();
                        s / (d as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                for c in cols.clone() {
                    let mut acc = 0.0;
                    for (idx, &(j, _)) in visible.iter().enumerate() {
                        acc += (scores[idx] - max).exp() / z * p.v.get(j, c) as f64;
                    }
                    attn.row_mut(t)[c] = acc as f32;
                }
            }
        }
        model.finish_layer(layer, &mut hidden, &attn).unwrap();
    }
    hidden
}

fn streamed_hidden(enc: &mut StreamEncoder, input: &[InputFrame]) -> Matrix {
    let mut all = Matrix::empty(enc.config().model_dim());
    for f in input {
        enc.encode_chunk(std::slice::from_ref(f)).unwrap();
        all.append(enc.last_hidden().unwrap()).unwrap();
    }
    all
}

#[test]
fn short_stream_equals_dense_forward() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = frames(&mut rng, &cfg, 4); // 8 tokens = l_L
    let mut enc = encoder(&cfg, 5, 1);
    let hidden = streamed_hidden(&mut enc, &input);
    let tokens: Vec<u32> = input.iter().flat_map(|f| f.tokens.clone()).collect();
    let dense = enc.model.forward_dense(&tokens).unwrap();
    assert!(hidden.max_abs_diff(dense.final_hidden().unwrap()).unwrap() < 1e-5);
    // stored KV per layer equals the dense K/V rows
    let snap = enc.store().snapshot();
    for f in snap.load(&[0, 1, 2, 3]).unwrap() {
        for (layer, kv) in f.layers.iter().enumerate() {
            let start = f.encode_position_start as usize;
            let want = dense.layer_kv[layer].keys.slice_rows(start..start + 2);
            assert!(kv.keys.max_abs_diff(&want).unwrap() < 1e-5);
        }
    }
}

#[test]
fn long_stream_matches_naive_window_reference() {
    let cfg = small();
    for sinks in [0, 1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(2 + sinks as u64);
        let input = frames(&mut rng, &cfg, 14);
        let mut enc = encoder(&cfg, 9, sinks);
        let hidden = streamed_hidden(&mut enc, &input);
        let tokens: Vec<u32> = input.iter().flat_map(|f| f.tokens.clone()).collect();
        let reference = naive_windowed(&enc.model, &tokens, sinks * 2, true);
        let diff = hidden.max_abs_diff(&reference).unwrap();
        assert!(diff < 1e-5, "sinks={sinks} deviation {diff}");
    }
}

#[test]
fn distance_ceiling_changes_sink_scores() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = frames(&mut rng, &cfg, 10);
    let mut enc = encoder(&cfg, 9, 1);
    let hidden = streamed_hidden(&mut enc, &input);
    let tokens: Vec<u32> = input.iter().flat_map(|f| f.tokens.clone()).collect();
    let clamped = naive_windowed(&enc.model, &tokens, 2, true);
    let unclamped = naive_windowed(&enc.model, &tokens, 2, false);
    // identical while every sink is inside the window
    assert_eq!(clamped.slice_rows(0..9), unclamped.slice_rows(0..9));
    assert!(hidden.max_abs_diff(&clamped).unwrap() < 1e-5);
    assert!(hidden.slice_rows(10..20).max_abs_diff(&unclamped.slice_rows(10..20)).unwrap() > 1e-4);
}

#[test]
fn attention_span_is_window_plus_sinks() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let input = frames(&mut rng, &cfg, 12); // 24 tokens = 3 windows
    for sinks in [0usize, 1] {
        let mut enc = encoder(&cfg, 1, sinks);
        enc.enable_probe();
        enc.encode_all(input.clone()).unwrap();
        let sink_tokens = sinks * cfg.tokens_per_frame;
        let expect: Vec<usize> = (0..24).map(|t| (t + 1).min(cfg.local_window + sink_tokens)).collect();
        for layer in enc.probe().unwrap() {
            assert_eq!(layer, &expect);
        }
        assert!(enc.window_tokens() <= cfg.local_window);
    }
}

#[test]
fn chunk_size_does_not_change_stored_kv() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = frames(&mut rng, &cfg, 15);
    let runs: Vec<Vec<Vec<u32>>> = [1, cfg.tokens_per_frame, cfg.chunk_size, 3]
        .into_iter()
        .map(|c| {
            let mut enc = encoder(&cfg, 2, 1).with_chunk_size(c).unwrap();
            enc.encode_chunk(&input).unwrap();
            stored_bits(enc.store())
        })
        .collect();
    for r in &runs[1..] {
        assert_eq!(r, &runs[0]);
    }
}

#[test]
fn encoding_is_deterministic() {
    let cfg = small();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let input = frames(&mut rng, &cfg, 9);
    let a = {
        let mut e = encoder(&cfg, 3, 1);
        e.encode_all(input.clone()).unwrap();
        stored_bits(e.store())
    };
    let b = {
        let mut e = encoder(&cfg, 3, 1);
        e.encode_all(input).unwrap();
        stored_bits(e.store())
    };
    assert_eq!(a, b);
}

#[test]
fn positions_and_progress() {
    let cfg = small();
    let mut enc = encoder(&cfg, 0, 1);
    assert_eq!(enc.assign_positions(3), vec![0, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let out = enc.encode_chunk(&frames(&mut rng, &cfg, 2)).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].encode_positions(), 2..4);
    assert_eq!(enc.state(), StreamState { tokens_encoded: 4, next_frame: 2 });
    assert_eq!(enc.assign_positions(2), vec![4, 5]);
}

#[test]
fn malformed_frames_are_rejected() {
    let cfg = small();
    let mut enc = encoder(&cfg, 0, 1);
    let bad = InputFrame {
        tokens: vec![1, 2, 3],
        timestamp: 0.0,
    };
    assert!(matches!(enc.encode_chunk(&[bad]), Err(Error::Shape(_))));
    let oov = InputFrame {
        tokens: vec![1, 99],
        timestamp: 0.0,
    };
    assert!(matches!(enc.encode_chunk(&[oov]), Err(Error::Vocab { id: 99, .. })));
    assert_eq!(enc.state().next_frame, 0);
}

#[test]
fn rate_control_counts() {
    let hour_at_30fps = (0..30 * 3600).map(|_| vec![0u32]);
    let out: Vec<InputFrame> = ingest_rate_control(hour_at_30fps, 30.0, 0.5).unwrap().collect();
    assert_eq!(out.len(), 1800);
    assert!(out.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
    assert_eq!(out[1].timestamp, 2.0);

    let ten_seconds = (0..10).map(|i| vec![i]);
    let out: Vec<InputFrame> = ingest_rate_control(ten_seconds, 1.0, 1.0).unwrap().collect();
    assert_eq!(out.len(), 10);
    assert_eq!(out[9].tokens, vec![9]);
    assert!(ingest_rate_control(Vec::<Vec<u32>>::new(), 1.0, 0.0).is_err());
}
