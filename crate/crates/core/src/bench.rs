//! Held-out evaluation, tau sweeps and the training ablation harness.
//!
//! Accuracy is exact match of the generated continuation (through EOS)
//! against the reference response. Speed is reported as accepted tokens
//! per forward pass, which is portable across machines; wall-clock
//! throughput is recorded alongside but is only informative.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Sample;
use crate::decode::{generate, Confidence, DecodeConfig, DecodeTrace};
use crate::layout::BlockStyle;
use crate::net::{init_params, ModelConfig, Parameters};
use crate::trainer::{train, TrainConfig};
use crate::{Result, SdlmError, TokenId};

/// Repetitions per sweep row for the wall-clock median.
pub const WALL_CLOCK_REPS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub output: Vec<TokenId>,
    pub exact: bool,
    pub correct_tokens: usize,
    pub trace: DecodeTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    /// Fraction of reference tokens reproduced at their own position.
    pub token_accuracy: f64,
    pub samples: Vec<SampleEval>,
}

impl EvalResult {
    pub fn generated_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.trace.generated_tokens).sum()
    }

    pub fn forward_passes(&self) -> usize {
        self.samples.iter().map(|s| s.trace.forward_passes).sum()
    }

    pub fn steps(&self) -> usize {
        self.samples.iter().map(|s| s.trace.steps.len()).sum()
    }

    pub fn wall_clock_secs(&self) -> f64 {
        self.samples.iter().map(|s| s.trace.wall_clock_secs).sum()
    }

    /// Σγ over Σpasses across every sample.
    pub fn tokens_per_pass(&self) -> f64 {
        let passes = self.forward_passes();
        if passes == 0 {
            0.0
        } else {
            self.generated_tokens() as f64 / passes as f64
        }
    }

    pub fn wall_tps(&self) -> f64 {
        let secs = self.wall_clock_secs();
        if secs > 0.0 {
            self.generated_tokens() as f64 / secs
        } else {
            0.0
        }
    }

    pub fn outputs(&self) -> Vec<&[TokenId]> {
        self.samples.iter().map(|s| s.output.as_slice()).collect()
    }
}

/// Largest generation budget `prompt_len` leaves under `max_positions`.
pub fn generation_room(config: &ModelConfig, prompt_len: usize) -> usize {
    (config.max_positions + 1).saturating_sub(prompt_len + config.block_size)
}

/// Generate a continuation for every sample and score it against the reference.
///
/// `max_new_tokens` is clamped per sample to what the position table allows.
pub fn eval_task(params: &Parameters<f32>, samples: &[Sample], config: &DecodeConfig) -> Result<EvalResult> {
    let mut evals = Vec::with_capacity(samples.len());
    let mut exact = 0;
    let mut correct = 0;
    let mut reference = 0;
    for sample in samples {
        let room = generation_room(params.config(), sample.prompt.len());
        if room == 0 {
            return Err(SdlmError::Length {
                needed: sample.prompt.len() + params.config().block_size,
                max: params.config().max_positions,
            });
        }
        let cfg = DecodeConfig { max_new_tokens: config.max_new_tokens.min(room), ..*config };
        let (output, trace) = generate(params, &sample.prompt, &cfg)?;
        let hits = output.iter().zip(&sample.response).filter(|(a, b)| a == b).count();
        let is_exact = output == sample.response;
        exact += is_exact as usize;
        correct += hits;
        reference += sample.response.len();
        evals.push(SampleEval { output, exact: is_exact, correct_tokens: hits, trace });
    }
    Ok(EvalResult {
        accuracy: ratio(exact, samples.len()),
        token_accuracy: ratio(correct, reference),
        samples: evals,
    })
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub task: String,
    pub mode: String,
    pub confidence: String,
    pub tau: f64,
    #[serde(rename = "D")]
    pub d: usize,
    pub accuracy: f64,
    pub tokens_per_pass: f64,
    pub wall_tps: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Raw evaluation behind each row (first repetition), same order as `rows`.
    pub evals: Vec<EvalResult>,
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| task | mode | confidence | tau | D | accuracy | tokens/pass | wall tok/s | steps |\n\
             |---|---|---|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {:.3} | {:.3} | {:.1} | {} |",
                r.task, r.mode, r.confidence, r.tau, r.d, r.accuracy, r.tokens_per_pass, r.wall_tps, r.steps
            );
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// One row per `(tau, confidence)` pair, in the given order.
///
/// Each row is evaluated `reps` times (at least once); token outputs must
/// agree across repetitions and the wall-clock column is their median.
pub fn sweep_tau(
    params: &Parameters<f32>,
    task: &str,
    samples: &[Sample],
    taus: &[f64],
    confidences: &[Confidence],
    base: &DecodeConfig,
    reps: usize,
) -> Result<BenchReport> {
    if taus.is_empty() || confidences.is_empty() {
        return Err(SdlmError::config("sweep needs at least one tau and one confidence kind"));
    }
    if taus.windows(2).any(|w| w[1] > w[0]) {
        return Err(SdlmError::config(format!("taus must be sorted in descending order, got {taus:?}")));
    }
    let mut rows = Vec::new();
    let mut evals = Vec::new();
    for &tau in taus {
        for &confidence in confidences {
            let cfg = DecodeConfig { tau, confidence, ..*base };
            let first = eval_task(params, samples, &cfg)?;
            let mut wall = vec![first.wall_tps()];
            for _ in 1..reps.max(1) {
                let again = eval_task(params, samples, &cfg)?;
                if again.outputs() != first.outputs() {
                    return Err(SdlmError::contract(format!("outputs changed between repetitions at tau {tau}")));
                }
                wall.push(again.wall_tps());
            }
            rows.push(BenchRow {
                task: task.to_string(),
                mode: cfg.mode.name().to_string(),
                confidence: confidence.name().to_string(),
                tau,
                d: cfg.block_size,
                accuracy: first.accuracy,
                tokens_per_pass: first.tokens_per_pass(),
                wall_tps: median(wall),
                steps: first.steps(),
            });
            evals.push(first);
        }
    }
    Ok(BenchReport { rows, evals })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub shift: bool,
    pub intra_block_causal: bool,
    pub train_steps: usize,
    pub final_loss: f64,
    pub accuracy: f64,
    pub token_accuracy: f64,
    pub tokens_per_pass: f64,
}

/// The baseline and the two single-change variants.
pub fn ablation_variants() -> [(&'static str, BlockStyle); 3] {
    [
        ("baseline", BlockStyle { shift: true, intra_block_causal: false }),
        ("no-shift", BlockStyle { shift: false, intra_block_causal: false }),
        ("causal-intra", BlockStyle { shift: true, intra_block_causal: true }),
    ]
}

/// Train each variant from the same initialization seed and budget, then
/// evaluate it with the same decode settings.
pub fn ablation_study(
    model: &ModelConfig,
    train_config: &TrainConfig,
    init_seed: u64,
    train_samples: &[Sample],
    eval_samples: &[Sample],
    decode: &DecodeConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, style) in ablation_variants() {
        let model_cfg = ModelConfig { style, ..*model };
        let tc = TrainConfig { shift: style.shift, intra_block_causal: style.intra_block_causal, ..train_config.clone() };
        let outcome = train(&tc, init_params(&model_cfg, init_seed)?, train_samples)?;
        let eval = eval_task(&outcome.params, eval_samples, decode)?;
        rows.push(AblationRow {
            variant: name.to_string(),
            shift: style.shift,
            intra_block_causal: style.intra_block_causal,
            train_steps: tc.steps,
            final_loss: outcome.history.last().map_or(f64::NAN, |r| r.loss),
            accuracy: eval.accuracy,
            token_accuracy: eval.token_accuracy,
            tokens_per_pass: eval.tokens_per_pass(),
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn csv_header_matches_schema() {
        let report = BenchReport {
            rows: vec![BenchRow {
                task: "copy".into(),
                mode: "greedy".into(),
                confidence: "logit".into(),
                tau: 0.9,
                d: 4,
                accuracy: 1.0,
                tokens_per_pass: 2.5,
                wall_tps: 100.0,
                steps: 7,
            }],
            evals: vec![],
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "task,mode,confidence,tau,D,accuracy,tokens_per_pass,wall_tps,steps"
        );
        assert!(report.to_markdown().contains("| copy | greedy | logit | 0.9 | 4 |"));
    }

    #[test]
    fn room_accounts_for_block() {
        let cfg = ModelConfig {
            vocab_size: 20,
            dim: 8,
            n_layers: 1,
            n_heads: 1,
            max_positions: 32,
            block_size: 4,
            pos_encoding: Default::default(),
            style: Default::default(),
        };
        assert_eq!(generation_room(&cfg, 10), 19);
        assert_eq!(generation_room(&cfg, 29), 0);
    }
}
