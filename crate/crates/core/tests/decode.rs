mod common;

use common::*;
use sdlm::corpus::MASK_ID;
use sdlm::decode::{decode_step, generate, verify_block, Confidence, DecodeConfig, DecodeMode};
use sdlm::layout::{AttnMask, BlockStyle};
use sdlm::net::ModelConfig;
use sdlm::{SdlmError, TokenId};

#[test]
fn unit_block_proposal_is_next_token_distribution() {
    let params = peaked_params(&tiny_config(20, 1), 3, 10.0);
    let prompt: Vec<TokenId> = vec![7, 9, 4, 12, 1];
    let mut cache = params.new_cache();
    let rows = decode_step(&params, &mut cache, &prompt).unwrap();
    assert_eq!(rows.rows, 1);

    let causal = params.forward(&prompt, &[0, 1, 2, 3, 4], &AttnMask::causal(5)).unwrap();
    let expected = causal.select_rows([4]);
    assert!(max_relative_deviation(&rows, &expected) <= 1e-6);
}

#[test]
fn cache_grows_by_accepted_counts() {
    let params = peaked_params(&tiny_config(20, 4), 5, 25.0);
    let prompt: Vec<TokenId> = vec![6, 6, 8, 1];
    let mut cache = params.new_cache();
    decode_step(&params, &mut cache, &prompt).unwrap();
    assert_eq!(cache.len(), 4);
    decode_step(&params, &mut cache, &[9, 10, 11]).unwrap();
    assert_eq!(cache.len(), 7);
    decode_step(&params, &mut cache, &[12]).unwrap();
    assert_eq!(cache.len(), 8);
    assert_eq!(cache.tokens(), &[6, 6, 8, 1, 9, 10, 11, 12]);
}

#[test]
fn length_error_when_block_passes_position_table() {
    let config = ModelConfig { max_positions: 10, ..tiny_config(20, 4) };
    let params = peaked_params(&config, 1, 1.0);
    let mut cache = params.new_cache();
    let prompt: Vec<TokenId> = vec![5; 7];
    match decode_step(&params, &mut cache, &prompt) {
        Err(SdlmError::Length { needed: 11, max: 10 }) => {}
        other => panic!("unexpected {other:?}"),
    }
    assert!(decode_step(&params, &mut cache, &prompt[..6]).is_ok());
}

#[test]
fn tau_one_is_token_by_token_greedy() {
    let params = peaked_params(&tiny_config(20, 4), 8, 3.0);
    let prompt: Vec<TokenId> = vec![9, 5, 14, 1];
    let config = DecodeConfig { tau: 1.0, max_new_tokens: 12, ..DecodeConfig::default() };
    let (out, trace) = generate(&params, &prompt, &config).unwrap();
    assert!(trace.steps.iter().all(|s| s.gamma == 1));

    // Plain causal greedy decoding with an explicit position table.
    let mut seq = prompt.clone();
    for _ in 0..out.len() {
        let n = seq.len();
        let mut tokens = seq.clone();
        tokens.push(seq[n - 1]);
        tokens.extend([MASK_ID; 3]);
        let rows = reference_block_rows(&params, &seq, &tokens[n..]);
        seq.push(argmax(rows.row(0)));
    }
    assert_eq!(&seq[prompt.len()..], &out[..]);
}

#[test]
fn speculative_accounting_and_first_tokens() {
    let params = peaked_params(&tiny_config(20, 4), 21, 25.0);
    let prompt: Vec<TokenId> = vec![4, 5, 6, 7, 1];
    let spec = DecodeConfig { mode: DecodeMode::Speculative, max_new_tokens: 16, ..DecodeConfig::default() };
    let (out, trace) = generate(&params, &prompt, &spec).unwrap();
    assert_eq!(trace.forward_passes, 2 * trace.steps.len());
    let total: usize = trace.steps.iter().map(|s| s.gamma).sum();
    assert_eq!(total, out.len());
    assert_eq!(trace.tokens_per_pass(), total as f64 / (2 * trace.steps.len()) as f64);
    assert!(trace.steps.iter().all(|s| (1..=4).contains(&s.raw_gamma)));

    // The first step of both modes starts from the same block head.
    let greedy = DecodeConfig { tau: 1.0, max_new_tokens: 16, ..DecodeConfig::default() };
    let (g_out, _) = generate(&params, &prompt, &greedy).unwrap();
    assert_eq!(g_out[0], out[0]);
}

#[test]
fn verification_stops_at_first_mismatch() {
    let params = peaked_params(&tiny_config(20, 4), 33, 25.0);
    let prompt: Vec<TokenId> = vec![8, 13, 9, 1];
    let mut cache = params.new_cache();
    let rows = decode_step(&params, &mut cache, &prompt).unwrap();
    let draft: Vec<TokenId> = (0..4).map(|j| argmax(rows.row(j))).collect();

    let first = verify_block(&params, &mut cache, &draft).unwrap();
    assert_eq!(first.verified[0], draft[0]);
    assert_eq!(cache.len(), prompt.len(), "verification must not commit");

    // Agree on positions 1 and 2, then disagree on 3 whatever follows.
    let agreeing = vec![draft[0], first.verified[1], 0, 0];
    let probe = verify_block(&params, &mut cache, &agreeing).unwrap();
    let wrong = (probe.verified[2] + 1) % 20;
    for tail in [4, 17] {
        let crafted = vec![draft[0], first.verified[1], wrong, tail];
        assert_eq!(verify_block(&params, &mut cache, &crafted).unwrap().gamma, 2);
    }

    // A draft that equals its own re-prediction is accepted in full.
    let mut full = vec![draft[0]];
    for k in 1..4 {
        let mut trial = full.clone();
        trial.resize(4, 0);
        full.push(verify_block(&params, &mut cache, &trial).unwrap().verified[k]);
    }
    assert_eq!(verify_block(&params, &mut cache, &full).unwrap().gamma, 4);
    assert!(matches!(verify_block(&params, &mut cache, &full[..3]), Err(SdlmError::Contract(_))));
}

#[test]
fn ablation_styles_decode_consistently() {
    for style in [
        BlockStyle { shift: false, intra_block_causal: false },
        BlockStyle { shift: true, intra_block_causal: true },
    ] {
        let config = ModelConfig { style, ..tiny_config(20, 4) };
        let params = peaked_params(&config, 44, 25.0);
        let mut rng = seeded(44);
        for _ in 0..10 {
            let prompt = random_prompt(&mut rng, 20, 10);
            let dc = DecodeConfig { tau: 0.2, max_new_tokens: 10, ..DecodeConfig::default() };
            let (fast, trace) = generate(&params, &prompt, &dc).unwrap();
            let (slow, _) = reference_generate(&params, &prompt, &dc);
            assert_eq!(fast, slow, "{style:?}");
            let horizon = style.horizon(4);
            assert!(trace.steps.iter().all(|s| s.proposed.len() == horizon));
        }
    }
}

#[test]
fn entropy_confidence_drives_acceptance() {
    let params = peaked_params(&tiny_config(20, 4), 2, 25.0);
    let prompt: Vec<TokenId> = vec![10, 11, 1];
    let dc = DecodeConfig { confidence: Confidence::Entropy, tau: 0.5, max_new_tokens: 12, ..DecodeConfig::default() };
    let (_, trace) = generate(&params, &prompt, &dc).unwrap();
    for s in &trace.steps {
        assert!(s.confidences.iter().all(|c| (0.0..=1.0).contains(c)));
        assert_eq!(s.raw_gamma, gamma_oracle(&s.confidences, 0.5));
    }
}

#[test]
fn block_size_mismatch_is_a_config_error() {
    let params = peaked_params(&tiny_config(20, 4), 2, 1.0);
    let dc = DecodeConfig { block_size: 3, ..DecodeConfig::default() };
    assert!(matches!(generate(&params, &[5, 1], &dc), Err(SdlmError::Config(_))));
    assert!(matches!(generate(&params, &[], &DecodeConfig::default()), Err(SdlmError::Contract(_))));
}

#[test]
fn trace_serializes_to_json() {
    let params = peaked_params(&tiny_config(20, 4), 2, 25.0);
    let (_, trace) = generate(&params, &[5, 6, 1], &DecodeConfig { max_new_tokens: 5, ..Default::default() }).unwrap();
    let json = serde_json::to_string(&trace).unwrap();
    let back: sdlm::decode::DecodeTrace = serde_json::from_str(&json).unwrap();
    assert_eq!(back, trace);
}
