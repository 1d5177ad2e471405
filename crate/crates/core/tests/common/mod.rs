//! Reference implementations shared by the integration tests.
//!
//! Everything here recomputes from scratch without the KV cache so it can
//! serve as an oracle for the incremental code paths.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdlm::corpus::{EOS_ID, MASK_ID};
use sdlm::decode::{DecodeConfig, DecodeMode};
use sdlm::layout::{AttnMask, BlockStyle};
use sdlm::net::{init_params, Matrix, ModelConfig, Parameters};
use sdlm::TokenId;

pub fn tiny_config(vocab_size: usize, block_size: usize) -> ModelConfig {
    ModelConfig {
        vocab_size,
        dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_positions: 48,
        block_size,
        pos_encoding: Default::default(),
        style: Default::default(),
    }
}

/// Random weights scaled up so logits are peaked and confidences spread out.
pub fn peaked_params(config: &ModelConfig, seed: u64, scale: f32) -> Parameters<f32> {
    let mut p = init_params(config, seed).unwrap();
    p.data_mut().iter_mut().for_each(|x| *x *= scale);
    p
}

/// Random prompt over non-special ids (all ids >= 4 plus BOS at the end).
pub fn random_prompt(rng: &mut ChaCha8Rng, vocab_size: usize, max_len: usize) -> Vec<TokenId> {
    let len = rng.random_range(1..=max_len);
    let mut p: Vec<TokenId> = (0..len).map(|_| rng.random_range(4..vocab_size as TokenId)).collect();
    p.push(1);
    p
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uncached forward over `committed ++ block`, where `block` is a noise
/// block headed by the last committed token. Returns all block rows.
pub fn reference_block_rows(params: &Parameters<f32>, committed: &[TokenId], block: &[TokenId]) -> Matrix<f32> {
    let n = committed.len();
    let d = block.len();
    let style: BlockStyle = params.config().style;
    let tokens: Vec<TokenId> = committed.iter().chain(block).copied().collect();
    let positions: Vec<usize> = (0..n).chain(n - 1..n - 1 + d).collect();
    let mask = AttnMask::from_fn(n + d, n + d, |u, v| {
        if u < n {
            v <= u
        } else if v < n {
            v + 1 < n
        } else {
            !style.intra_block_causal || v <= u
        }
    });
    let logits = params.forward(&tokens, &positions, &mask).unwrap();
    logits.select_rows(n..n + d)
}

/// Proposal rows for the next block, recomputed without a cache.
pub fn reference_proposal(params: &Parameters<f32>, committed: &[TokenId]) -> Matrix<f32> {
    let cfg = params.config();
    let d = cfg.block_size;
    let mut block = vec![*committed.last().unwrap()];
    block.extend(std::iter::repeat_n(MASK_ID, d - 1));
    let rows = reference_block_rows(params, committed, &block);
    rows.select_rows((0..cfg.style.horizon(d)).map(|j| cfg.style.prediction_slot(j)))
}

/// Logits predicting draft position `known.len()` given the true draft prefix `known`.
pub fn reference_verify_row(params: &Parameters<f32>, committed: &[TokenId], known: &[TokenId]) -> Vec<f32> {
    let cfg = params.config();
    let d = cfg.block_size;
    let mut block = vec![*committed.last().unwrap()];
    block.extend_from_slice(known);
    block.resize(d, MASK_ID);
    let rows = reference_block_rows(params, committed, &block);
    rows.row(cfg.style.prediction_slot(known.len())).to_vec()
}

pub fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = i;
        }
    }
    best as TokenId
}

pub fn logit_conf(row: &[f32]) -> f64 {
    let id = argmax(row) as usize;
    let max = row[id] as f64;
    1.0 / row.iter().map(|&z| (z as f64 - max).exp()).sum::<f64>()
}

/// Largest `j` whose running product of confidences is at least `tau`, floor 1.
pub fn gamma_oracle(confs: &[f64], tau: f64) -> usize {
    let mut best = 1;
    for j in 1..=confs.len() {
        let product: f64 = confs[..j].iter().product();
        if product >= tau {
            best = j;
        }
    }
    best.min(confs.len())
}

/// Greedy longest-prefix decoding with logit confidence and no cache.
/// Returns the output and every proposal matrix in order.
pub fn reference_generate(
    params: &Parameters<f32>,
    prompt: &[TokenId],
    config: &DecodeConfig,
) -> (Vec<TokenId>, Vec<Matrix<f32>>) {
    assert_eq!(config.mode, DecodeMode::Greedy);
    let mut committed = prompt.to_vec();
    let mut out = Vec::new();
    let mut proposals = Vec::new();
    while out.len() < config.max_new_tokens {
        let rows = reference_proposal(params, &committed);
        let confs: Vec<f64> = (0..rows.rows).map(|j| logit_conf(rows.row(j))).collect();
        let gamma = gamma_oracle(&confs, config.tau);
        let mut accepted: Vec<TokenId> = (0..gamma).map(|j| argmax(rows.row(j))).collect();
        if let Some(e) = accepted.iter().position(|&t| t == EOS_ID) {
            accepted.truncate(e + 1);
        }
        accepted.truncate(config.max_new_tokens - out.len());
        proposals.push(rows);
        out.extend_from_slice(&accepted);
        committed.extend_from_slice(&accepted);
        if accepted.last() == Some(&EOS_ID) {
            break;
        }
    }
    (out, proposals)
}

/// `max |a - b| / max |b|` over two equally shaped matrices.
pub fn max_relative_deviation(a: &Matrix<f32>, b: &Matrix<f32>) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    let scale = b.data.iter().fold(0f64, |m, &x| m.max((x as f64).abs())).max(1e-30);
    let diff = a.data.iter().zip(&b.data).fold(0f64, |m, (&x, &y)| m.max((x as f64 - y as f64).abs()));
    diff / scale
}
