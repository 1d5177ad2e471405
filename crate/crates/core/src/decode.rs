//! Block proposal, confidence scoring and longest-prefix acceptance.
//!
//! Each step runs the uncached tail of the committed sequence plus one
//! noise block `[last token, mask, ...]` through the model. The noise
//! block's rows propose the next `D` tokens. Greedy mode keeps the longest
//! prefix whose cumulative confidence stays above `tau`; speculative mode
//! re-predicts every position under progressively longer true prefixes in
//! a second batched pass and keeps the longest self-consistent prefix.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{EOS_ID, MASK_ID};
use crate::layout::AttnMask;
use crate::net::{KvCache, Matrix, Parameters, Real};
use crate::{Result, SdlmError, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    /// Softmax probability of the chosen token.
    Logit,
    /// One minus the normalized entropy of the distribution.
    Entropy,
}

impl Confidence {
    pub fn score<F: Real>(self, row: &[F]) -> (TokenId, f64) {
        match self {
            Confidence::Logit => conf_logit(row),
            Confidence::Entropy => conf_entropy(row),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Confidence::Logit => "logit",
            Confidence::Entropy => "entropy",
        }
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Confidence {
    type Err = SdlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Confidence::Logit),
            "entropy" => Ok(Confidence::Entropy),
            _ => Err(SdlmError::config(format!("unknown confidence {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Speculative,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Speculative => "speculative",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecodeMode {
    type Err = SdlmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "speculative" => Ok(DecodeMode::Speculative),
            _ => Err(SdlmError::config(format!("unknown decode mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub tau: f64,
    pub confidence: Confidence,
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub block_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            tau: 0.98,
            confidence: Confidence::Logit,
            mode: DecodeMode::Greedy,
            max_new_tokens: 64,
            block_size: 4,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(SdlmError::config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if self.max_new_tokens == 0 {
            return Err(SdlmError::config("max_new_tokens must be at least 1"));
        }
        if self.block_size == 0 {
            return Err(SdlmError::config("block_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Argmax token of every proposal row.
    pub proposed: Vec<TokenId>,
    pub confidences: Vec<f64>,
    /// Accepted length before EOS and budget truncation.
    pub raw_gamma: usize,
    /// Tokens actually appended this step.
    pub gamma: usize,
    pub passes: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<StepRecord>,
    pub generated_tokens: usize,
    pub forward_passes: usize,
    pub wall_clock_secs: f64,
}

impl DecodeTrace {
    pub fn tokens_per_pass(&self) -> f64 {
        if self.forward_passes == 0 {
            0.0
        } else {
            self.generated_tokens as f64 / self.forward_passes as f64
        }
    }

    /// Output split into the runs accepted at each step.
    pub fn runs<'a>(&self, output: &'a [TokenId]) -> Vec<&'a [TokenId]> {
        let mut runs = Vec::with_capacity(self.steps.len());
        let mut at = 0;
        for s in &self.steps {
            runs.push(&output[at..at + s.gamma]);
            at += s.gamma;
        }
        runs
    }
}

/// Lowest index among the maxima.
pub fn argmax<F: Real>(row: &[F]) -> TokenId {
    let mut best = 0;
    for (i, &z) in row.iter().enumerate() {
        if z > row[best] {
            best = i;
        }
    }
    best as TokenId
}

fn softmax_f64<F: Real>(row: &[F], max: f64) -> Vec<f64> {
    let exps: Vec<f64> = row.iter().map(|&z| (z.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Argmax token and its softmax probability.
pub fn conf_logit<F: Real>(row: &[F]) -> (TokenId, f64) {
    let id = argmax(row);
    let max = row[id as usize].as_f64();
    let sum: f64 = row.iter().map(|&z| (z.as_f64() - max).exp()).sum();
    (id, (1.0 / sum).clamp(0.0, 1.0))
}

/// Argmax token and `1 - H(softmax) / ln |V|`.
pub fn conf_entropy<F: Real>(row: &[F]) -> (TokenId, f64) {
    let id = argmax(row);
    if row.len() < 2 {
        return (id, 1.0);
    }
    let probs = softmax_f64(row, row[id as usize].as_f64());
    let entropy: f64 = probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    (id, (1.0 - entropy / (row.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Longest prefix whose running confidence product stays at or above
/// `tau`, never less than one token.
pub fn gamma_tau(confidences: &[f64], tau: f64) -> usize {
    let mut product = 1.0;
    let mut accepted = 0;
    for (j, &c) in confidences.iter().enumerate() {
        product *= c;
        if product >= tau {
            accepted = j + 1;
        }
    }
    accepted.max(1).min(confidences.len().max(1))
}

/// Propose the next block.
///
/// Commits `pending` to `cache` and returns one logit row per proposed
/// token (`D` rows with shifted prediction, `D-1` without).
pub fn decode_step(params: &Parameters<f32>, cache: &mut KvCache<f32>, pending: &[TokenId]) -> Result<Matrix<f32>> {
    let cfg = params.config();
    let d = cfg.block_size;
    let style = cfg.style;
    let last = *pending.last().ok_or_else(|| SdlmError::contract("decode_step needs pending tokens"))?;
    let c = cache.len();
    let p = pending.len();
    let n = c + p;
    if n + d > cfg.max_positions {
        return Err(SdlmError::Length { needed: n + d, max: cfg.max_positions });
    }

    let mut tokens = Vec::with_capacity(p + d);
    tokens.extend_from_slice(pending);
    tokens.push(last);
    tokens.extend(std::iter::repeat_n(MASK_ID, d - 1));
    let positions: Vec<usize> = (c..n).chain(n - 1..n - 1 + d).collect();
    let mask = AttnMask::from_fn(p + d, n + d, |r, v| {
        if r < p {
            v <= c + r
        } else if v < n {
            v < n - 1
        } else {
            style.intra(r - p, v - n)
        }
    });
    let logits = params.forward_cached(cache, &tokens, &positions, &mask, p)?;
    let horizon = style.horizon(d);
    Ok(logits.select_rows((0..horizon).map(|j| p + style.prediction_slot(j))))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verification {
    /// Length of the longest prefix where draft and re-prediction agree, at least one.
    pub gamma: usize,
    /// Re-predicted token for each draft position.
    pub verified: Vec<TokenId>,
}

/// Re-predict each draft position given the true draft prefix before it.
///
/// Row `j` holds `[last committed, draft[..j], mask, ...]`; all rows go
/// through one batched forward pass against `cache`, which must already
/// contain everything up to the draft.
pub fn verify_block(params: &Parameters<f32>, cache: &mut KvCache<f32>, draft: &[TokenId]) -> Result<Verification> {
    let cfg = params.config();
    let d = cfg.block_size;
    let style = cfg.style;
    let horizon = style.horizon(d);
    if draft.len() != horizon {
        return Err(SdlmError::contract(format!("draft of {} tokens, expected {horizon}", draft.len())));
    }
    let n = cache.len();
    let head = *cache.tokens().last().ok_or_else(|| SdlmError::contract("verification needs a committed prefix"))?;
    if n - 1 + d > cfg.max_positions {
        return Err(SdlmError::Length { needed: n - 1 + d, max: cfg.max_positions });
    }

    let mut tokens = Vec::with_capacity(horizon * d);
    let mut positions = Vec::with_capacity(horizon * d);
    for j in 0..horizon {
        for slot in 0..d {
            tokens.push(match slot {
                0 => head,
                s if s <= j => draft[s - 1],
                _ => MASK_ID,
            });
            positions.push(n - 1 + slot);
        }
    }
    let mask = AttnMask::from_fn(horizon * d, n + horizon * d, |r, v| {
        if v < n {
            v < n - 1
        } else {
            let v = v - n;
            r / d == v / d && style.intra(r % d, v % d)
        }
    });
    let logits = params.forward_cached(cache, &tokens, &positions, &mask, 0)?;
    let verified: Vec<TokenId> = (0..horizon).map(|j| argmax(logits.row(j * d + style.prediction_slot(j)))).collect();
    let matching = draft.iter().zip(&verified).take_while(|(a, b)| a == b).count();
    Ok(Verification { gamma: matching.max(1), verified })
}

/// The first `gamma` proposed tokens, cut after the first EOS and at `remaining`.
pub fn accept_run(proposed: &[TokenId], gamma: usize, remaining: usize) -> Vec<TokenId> {
    let mut run = proposed[..gamma.min(proposed.len())].to_vec();
    if let Some(eos) = run.iter().position(|&t| t == EOS_ID) {
        run.truncate(eos + 1);
    }
    run.truncate(remaining);
    run
}

/// Decode a continuation of `prompt`, stopping at EOS or `max_new_tokens`.
pub fn generate(params: &Parameters<f32>, prompt: &[TokenId], config: &DecodeConfig) -> Result<(Vec<TokenId>, DecodeTrace)> {
    config.validate()?;
    if config.block_size != params.config().block_size {
        return Err(SdlmError::config(format!(
            "decode block_size {} differs from checkpoint block_size {}",
            config.block_size,
            params.config().block_size
        )));
    }
    if prompt.is_empty() {
        return Err(SdlmError::contract("prompt must be non-empty"));
    }
    let started = Instant::now();
    let mut cache = params.new_cache();
    let mut pending = prompt.to_vec();
    let mut output: Vec<TokenId> = Vec::new();
    let mut trace = DecodeTrace::default();

    while output.len() < config.max_new_tokens {
        let rows = decode_step(params, &mut cache, &pending)?;
        let (proposed, confidences): (Vec<TokenId>, Vec<f64>) =
            (0..rows.rows).map(|r| config.confidence.score(rows.row(r))).unzip();
        let (raw_gamma, passes) = match config.mode {
            DecodeMode::Greedy => (gamma_tau(&confidences, config.tau), 1),
            DecodeMode::Speculative => (verify_block(params, &mut cache, &proposed)?.gamma, 2),
        };
        let accepted = accept_run(&proposed, raw_gamma, config.max_new_tokens - output.len());

        trace.forward_passes += passes;
        trace.generated_tokens += accepted.len();
        trace.steps.push(StepRecord { proposed, confidences, raw_gamma, gamma: accepted.len(), passes });
        output.extend_from_slice(&accepted);
        if accepted.last() == Some(&EOS_ID) {
            break;
        }
        pending = accepted;
    }
    trace.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((output, trace))
}
