//! Block-prediction and next-token objectives, and the Adam training loop.

use std::io::Write;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::layout::{build_train_layout, partition_blocks, BlockStyle, TrainLayout};
use crate::net::{Matrix, Parameters, Real};
use crate::{Result, SdlmError, TokenId};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;
const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub block_size: usize,
    /// Probability that each candidate noise block is inserted.
    pub keep_prob: f64,
    pub shift: bool,
    pub intra_block_causal: bool,
    /// Add next-token loss on clean entries.
    pub aux_ntp: bool,
    /// Upper bound on interleaved sequence length.
    pub max_layout_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            steps: 3000,
            seed: 0,
            block_size: 4,
            keep_prob: 1.0,
            shift: true,
            intra_block_causal: false,
            aux_ntp: false,
            max_layout_len: 128,
        }
    }
}

impl TrainConfig {
    pub fn style(&self) -> BlockStyle {
        BlockStyle { shift: self.shift, intra_block_causal: self.intra_block_causal }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SdlmError::config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(SdlmError::config("batch_size must be at least 1"));
        }
        if self.block_size == 0 {
            return Err(SdlmError::config("block_size must be at least 1"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(SdlmError::config(format!("keep_prob {} outside (0, 1]", self.keep_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub nsp: f64,
    pub aux: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.nsp + self.aux
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub aux_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters<f32>,
    pub history: Vec<LossRecord>,
}

/// Cross-entropy of one logit row against `target`, and optionally its
/// gradient scaled by `weight` accumulated into `grad`.
fn cross_entropy<F: Real>(row: &[F], target: TokenId, weight: f64, grad: Option<&mut [F]>) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.as_f64()));
    let sum: f64 = row.iter().map(|&z| (z.as_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    if let Some(g) = grad {
        for (i, (gi, &z)) in g.iter_mut().zip(row).enumerate() {
            let p = (z.as_f64() - lse).exp();
            let onehot = if i == target as usize { 1.0 } else { 0.0 };
            *gi += F::from_f64_lossy(weight * (p - onehot));
        }
    }
    lse - row[target as usize].as_f64()
}

fn check_targets<F>(logits: &Matrix<F>, targets: impl IntoIterator<Item = (usize, TokenId)>) -> Result<()> {
    for (entry, target) in targets {
        if entry >= logits.rows {
            return Err(SdlmError::contract(format!("target entry {entry} beyond {} rows", logits.rows)));
        }
        if target as usize >= logits.cols {
            return Err(SdlmError::contract(format!("target {target} outside vocab of {}", logits.cols)));
        }
    }
    Ok(())
}

/// `(entry, target, weight)` for the block-prediction term: each block's
/// targets are averaged, then blocks are averaged.
fn nsp_weights(layout: &TrainLayout) -> Vec<(usize, TokenId, f64)> {
    let mut per_block = vec![0usize; layout.blocks.len()];
    for t in &layout.loss_targets {
        per_block[t.block] += 1;
    }
    let supervised = per_block.iter().filter(|&&n| n > 0).count();
    layout
        .loss_targets
        .iter()
        .map(|t| (t.entry, t.target, 1.0 / (supervised * per_block[t.block]) as f64))
        .collect()
}

fn aux_weights(layout: &TrainLayout) -> Vec<(usize, TokenId, f64)> {
    let n = layout.aux_targets.len();
    layout.aux_targets.iter().map(|&(e, t)| (e, t, 1.0 / n as f64)).collect()
}

/// Block-prediction loss of a layout; zero when the layout has no blocks.
pub fn nsp_loss<F: Real>(logits: &Matrix<F>, layout: &TrainLayout) -> Result<f64> {
    if logits.rows != layout.len() {
        return Err(SdlmError::contract(format!("{} logit rows for layout of {}", logits.rows, layout.len())));
    }
    let weights = nsp_weights(layout);
    check_targets(logits, weights.iter().map(|&(e, t, _)| (e, t)))?;
    Ok(weights.iter().map(|&(e, t, w)| w * cross_entropy(logits.row(e), t, 0.0, None)).sum())
}

/// Mean next-token cross-entropy predicting `tokens[supervise_from..]`.
pub fn ntp_loss<F: Real>(logits: &Matrix<F>, tokens: &[TokenId], supervise_from: usize) -> Result<f64> {
    if logits.rows != tokens.len() {
        return Err(SdlmError::contract("logit rows must match token count"));
    }
    if supervise_from == 0 || supervise_from >= tokens.len() {
        return Err(SdlmError::contract(format!("supervise_from {supervise_from} out of range")));
    }
    check_targets(logits, (supervise_from..tokens.len()).map(|t| (t - 1, tokens[t])))?;
    let n = (tokens.len() - supervise_from) as f64;
    Ok((supervise_from..tokens.len())
        .map(|t| cross_entropy(logits.row(t - 1), tokens[t], 0.0, None))
        .sum::<f64>()
        / n)
}

/// Loss of one layout and the gradient of `scale · total` with respect to its logits.
pub fn layout_loss_and_grad<F: Real>(
    logits: &Matrix<F>,
    layout: &TrainLayout,
    aux_ntp: bool,
    scale: f64,
) -> Result<(LossParts, Vec<F>)> {
    if logits.rows != layout.len() {
        return Err(SdlmError::contract("logit rows must match layout length"));
    }
    let mut grad = vec![F::zero(); logits.data.len()];
    let cols = logits.cols;
    let mut run = |weights: &[(usize, TokenId, f64)]| -> Result<f64> {
        check_targets(logits, weights.iter().map(|&(e, t, _)| (e, t)))?;
        let mut total = 0.0;
        for &(e, t, w) in weights {
            let g = &mut grad[e * cols..(e + 1) * cols];
            total += w * cross_entropy(logits.row(e), t, w * scale, Some(g));
        }
        Ok(total)
    };
    let nsp = run(&nsp_weights(layout))?;
    let aux = if aux_ntp { run(&aux_weights(layout))? } else { 0.0 };
    Ok((LossParts { nsp, aux }, grad))
}

/// Per-layout losses under fixed weights, in input order.
pub fn batch_losses(params: &Parameters<f32>, layouts: &[TrainLayout], aux_ntp: bool) -> Result<Vec<LossParts>> {
    layouts
        .iter()
        .map(|l| {
            let logits = params.forward(&l.tokens, &l.position_ids, &l.mask)?;
            let nsp = nsp_loss(&logits, l)?;
            let aux = if aux_ntp {
                let w = aux_weights(l);
                w.iter().map(|&(e, t, w)| w * cross_entropy(logits.row(e), t, 0.0, None)).sum()
            } else {
                0.0
            };
            Ok(LossParts { nsp, aux })
        })
        .collect()
}

/// Layout for one sample with freshly drawn block placement.
pub fn sample_layout(config: &TrainConfig, sample: &Sample, seed: u64) -> Result<TrainLayout> {
    let budget = config
        .max_layout_len
        .checked_sub(sample.prompt.len())
        .filter(|&b| b >= sample.response.len())
        .ok_or_else(|| {
            SdlmError::config(format!(
                "max_layout_len {} cannot hold a sample of {} tokens",
                config.max_layout_len,
                sample.prompt.len() + sample.response.len()
            ))
        })?;
    let blocks = partition_blocks(sample.response.len(), config.block_size, config.keep_prob, seed, budget)?;
    build_train_layout(sample, &blocks, config.style())
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mhat = *m as f64 / c1;
            let vhat = *v as f64 / c2;
            *p -= (lr * mhat / (vhat.sqrt() + ADAM_EPS)) as f32;
        }
    }
}

/// Train `model` on `samples` with the block-prediction objective.
///
/// Each step draws `batch_size` samples with replacement, places blocks
/// per sample, averages gradients over the batch, clips them to global
/// norm 1 and applies one Adam update at a constant learning rate.
pub fn train(config: &TrainConfig, model: Parameters<f32>, samples: &[Sample]) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(SdlmError::config("no training samples"));
    }
    let mc = model.config();
    if mc.block_size != config.block_size {
        return Err(SdlmError::config(format!(
            "model block_size {} differs from training block_size {}",
            mc.block_size, config.block_size
        )));
    }
    if mc.style != config.style() {
        return Err(SdlmError::config("model block style differs from training config"));
    }

    let mut params = model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(params.num_params());
    let mut history = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch_size as f64;

    for step in 0..config.steps {
        let mut layouts = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let sample = &samples[rng.random_range(0..samples.len())];
            layouts.push(sample_layout(config, sample, rng.next_u64())?);
        }

        let mut grads = params.zeros_like();
        let mut totals = LossParts::default();
        for layout in &layouts {
            let (logits, tape) = params.forward_train(&layout.tokens, &layout.position_ids, &layout.mask)?;
            let (parts, dlogits) = layout_loss_and_grad(&logits, layout, config.aux_ntp, scale)?;
            params.backward(&tape, &dlogits, &mut grads)?;
            totals.nsp += parts.nsp * scale;
            totals.aux += parts.aux * scale;
        }
        if !totals.total().is_finite() {
            return Err(SdlmError::NonFinite { step, detail: format!("loss {:?}", totals) });
        }

        let norm = grads.data().iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(SdlmError::NonFinite { step, detail: "gradient norm".into() });
        }
        if norm > CLIP_NORM {
            let s = (CLIP_NORM / norm) as f32;
            grads.data_mut().iter_mut().for_each(|g| *g *= s);
        }
        adam.step(params.data_mut(), grads.data(), config.learning_rate);
        if !params.is_finite() {
            return Err(SdlmError::NonFinite { step, detail: "parameters after update".into() });
        }
        history.push(LossRecord { step, loss: totals.nsp, aux_loss: totals.aux });
    }
    Ok(TrainOutcome { params, history })
}

pub fn write_loss_csv<W: Write>(out: W, history: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{AttnMask, BlockSpec};

    fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Matrix<f32> {
        Matrix { rows, cols, data }
    }

    fn one_block_layout() -> TrainLayout {
        let s = Sample { prompt: vec![1, 2], response: vec![3, 0] };
        build_train_layout(&s, &[BlockSpec::new(1, 2)], BlockStyle::default()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let layout = one_block_layout();
        let logits = matrix(6, 4, vec![0.0; 24]);
        assert!((nsp_loss(&logits, &layout).unwrap() - 4f64.ln()).abs() < 1e-12);
        let tokens = [1, 2, 3, 0];
        let logits = matrix(4, 4, vec![0.5; 16]);
        assert!((ntp_loss(&logits, &tokens, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_logits_give_zero() {
        let layout = one_block_layout();
        let mut data = vec![-1e4f32; 24];
        for t in &layout.loss_targets {
            data[t.entry * 4 + t.target as usize] = 1e4;
        }
        assert!(nsp_loss(&matrix(6, 4, data), &layout).unwrap().abs() < 1e-9);
    }

    #[test]
    fn one_block_matches_hand_computation() {
        let layout = one_block_layout();
        let data: Vec<f32> = (0..24).map(|i| ((i * 7 % 11) as f32 - 5.0) * 0.3).collect();
        let logits = matrix(6, 4, data.clone());
        // Brute-force softmax over the two target rows.
        let ce = |row: usize, target: usize| {
            let r = &data[row * 4..row * 4 + 4];
            let z: f64 = r.iter().map(|&x| (x as f64).exp()).sum();
            -((r[target] as f64).exp() / z).ln()
        };
        let expected = (ce(2, 3) + ce(3, 0)) / 2.0;
        assert!((nsp_loss(&logits, &layout).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn out_of_vocab_target_is_rejected() {
        let layout = one_block_layout();
        let logits = matrix(6, 3, vec![0.0; 18]);
        assert!(matches!(nsp_loss(&logits, &layout), Err(SdlmError::Contract(_))));
    }

    #[test]
    fn logit_gradient_matches_difference() {
        let layout = one_block_layout();
        let data: Vec<f64> = (0..24).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.2).collect();
        let logits = Matrix { rows: 6, cols: 4, data: data.clone() };
        let (parts, grad) = layout_loss_and_grad(&logits, &layout, true, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..24 {
            let mut plus = data.clone();
            plus[i] += h;
            let mut minus = data.clone();
            minus[i] -= h;
            let f = |d: Vec<f64>| {
                let m = Matrix { rows: 6, cols: 4, data: d };
                layout_loss_and_grad(&m, &layout, true, 1.0).unwrap().0.total()
            };
            let fd = (f(plus) - f(minus)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-7, "i={i}: {fd} vs {}", grad[i]);
        }
        assert!(parts.aux > 0.0);
    }

    #[test]
    fn zero_blocks_loss_is_aux_only() {
        let s = Sample { prompt: vec![1], response: vec![2, 3] };
        let layout = build_train_layout(&s, &[], BlockStyle::default()).unwrap();
        let logits = matrix(3, 4, vec![0.0; 12]);
        let (parts, _) = layout_loss_and_grad(&logits, &layout, false, 1.0).unwrap();
        assert_eq!(parts.total(), 0.0);
        let (parts, _) = layout_loss_and_grad(&logits, &layout, true, 1.0).unwrap();
        assert_eq!(parts.nsp, 0.0);
        assert!((parts.aux - 4f64.ln()).abs() < 1e-12);
        assert_eq!(layout.mask, AttnMask::causal(3));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { keep_prob: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn loss_csv_header() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[LossRecord { step: 0, loss: 1.5, aux_loss: 0.0 }]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,aux_loss\n0,1.5,0.0\n");
    }
}
