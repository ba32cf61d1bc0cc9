#![allow(dead_code)]

use gpn::encoder::VideoFeatures;
use gpn::jqag::{TokenSequence, NUM_SPECIAL};
use gpn::{Batch, ModelConfig, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FRAME_DIM: usize = 12;
pub const OBJECT_DIM: usize = 8;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        frame_dim: FRAME_DIM,
        object_dim: OBJECT_DIM,
        layers: 2,
        heads: 4,
        lstm_layers: 2,
        question_types: 5,
        answers: 6,
        vocab: 20,
        ..ModelConfig::default()
    }
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn features(rng: &mut ChaCha8Rng, n: usize) -> VideoFeatures {
    VideoFeatures::new(uniform(rng, n, FRAME_DIM), uniform(rng, n, OBJECT_DIM)).unwrap()
}

pub fn question(rng: &mut ChaCha8Rng, vocab: usize) -> TokenSequence {
    let len = rng.random_range(1..=6);
    let words: Vec<usize> = (0..len).map(|_| rng.random_range(NUM_SPECIAL..vocab)).collect();
    TokenSequence::from_words(&words)
}

/// A random batch for `small_config()`.
pub fn batch(rng: &mut ChaCha8Rng, b: usize, n: usize) -> Batch {
    let cfg = small_config();
    let feats: Vec<VideoFeatures> = (0..b).map(|_| features(rng, n)).collect();
    let qs: Vec<TokenSequence> = (0..b).map(|_| question(rng, cfg.vocab)).collect();
    let types: Vec<usize> = (0..b).map(|_| rng.random_range(0..cfg.question_types)).collect();
    let answers: Vec<usize> = (0..b).map(|_| rng.random_range(0..cfg.answers)).collect();
    Batch::from_examples((0..b).map(|i| (&feats[i], types[i], &qs[i], answers[i]))).unwrap()
}

/// Rows of `t` reordered so that row `i` of the result is row `perm[i]`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    t.select_rows(perm)
}
