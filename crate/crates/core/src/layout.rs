//! Attention masks, position ids and loss targets for block prediction.
//!
//! A training sequence interleaves clean tokens with noise blocks. A noise
//! block that predicts response tokens `i..i+D` holds a copy of token `i-1`
//! followed by `D-1` mask tokens, and reuses the positions of the tokens it
//! stands in for. Clean entries never see noise entries; a noise block sees
//! the clean prefix strictly before its head plus itself.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Sample, Vocab};
use crate::{Result, SdlmError, TokenId};

/// Dense boolean attention mask; `allows(u, v)` means row `u` may attend to column `v`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        AttnMask { rows, cols, bits: vec![false; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for u in 0..rows {
            for v in 0..cols {
                bits.push(f(u, v));
            }
        }
        AttnMask { rows, cols, bits }
    }

    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |u, v| v <= u)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allows(&self, u: usize, v: usize) -> bool {
        self.bits[u * self.cols + v]
    }

    pub fn set(&mut self, u: usize, v: usize, allowed: bool) {
        self.bits[u * self.cols + v] = allowed;
    }

    pub fn row(&self, u: usize) -> &[bool] {
        &self.bits[u * self.cols..(u + 1) * self.cols]
    }

    /// Rows rendered as `1`/`0` strings.
    pub fn to_rows(&self) -> Vec<String> {
        (0..self.rows)
            .map(|u| self.row(u).iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }
}

/// How noise blocks are supervised and attend internally. Fixed per checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStyle {
    /// Entry at block offset `k` predicts the token one position ahead.
    /// When off, mask entries predict the token at their own position and
    /// the head carries no target.
    pub shift: bool,
    /// Causal instead of bidirectional attention inside a noise block.
    pub intra_block_causal: bool,
}

impl Default for BlockStyle {
    fn default() -> Self {
        BlockStyle { shift: true, intra_block_causal: false }
    }
}

impl BlockStyle {
    /// Number of tokens a block of size `d` proposes.
    pub fn horizon(&self, d: usize) -> usize {
        if self.shift {
            d
        } else {
            d.saturating_sub(1)
        }
    }

    /// Block offset whose logits predict the `j`-th (0-based) proposed token.
    pub fn prediction_slot(&self, j: usize) -> usize {
        if self.shift {
            j
        } else {
            j + 1
        }
    }

    /// Whether offset `a` may attend to offset `b` inside one noise block.
    #[inline]
    pub fn intra(&self, a: usize, b: usize) -> bool {
        !self.intra_block_causal || b <= a
    }
}

/// A noise block predicting response tokens `start..start+size` (1-based
/// response coordinates; index 0 is the last prompt token). A block may run
/// past the end of the response; its extra entries carry no target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub start: usize,
    pub size: usize,
}

impl BlockSpec {
    pub fn new(start: usize, size: usize) -> Self {
        BlockSpec { start, size }
    }

    pub fn end(&self) -> usize {
        self.start + self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Prompt,
    Clean,
    NoiseHead,
    NoiseMask,
}

impl SegmentKind {
    pub fn is_noise(self) -> bool {
        matches!(self, SegmentKind::NoiseHead | SegmentKind::NoiseMask)
    }

    fn label(self) -> &'static str {
        match self {
            SegmentKind::Prompt => "prompt",
            SegmentKind::Clean => "clean",
            SegmentKind::NoiseHead => "head",
            SegmentKind::NoiseMask => "mask",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTarget {
    pub entry: usize,
    pub target: TokenId,
    /// Index into [`TrainLayout::blocks`].
    pub block: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlacedBlock {
    pub spec: BlockSpec,
    /// Index of the head entry in the layout.
    pub entry_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLayout {
    pub tokens: Vec<TokenId>,
    pub position_ids: Vec<usize>,
    pub mask: AttnMask,
    pub loss_targets: Vec<LossTarget>,
    /// Next-token targets on clean entries, used only by the auxiliary loss.
    pub aux_targets: Vec<(usize, TokenId)>,
    pub segment_kinds: Vec<SegmentKind>,
    pub blocks: Vec<PlacedBlock>,
    pub prompt_len: usize,
}

impl TrainLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Human-readable dump: one line per entry, then the mask as a `#`/`.` grid.
    pub fn debug_dump(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "entry kind   pos token   target");
        for (u, &tok) in self.tokens.iter().enumerate() {
            let target = self
                .loss_targets
                .iter()
                .find(|t| t.entry == u)
                .map(|t| vocab.decode(&[t.target]))
                .unwrap_or_else(|| "-".to_string());
            let _ = writeln!(
                out,
                "{u:<5} {:<6} {:<3} {:<7} {target}",
                self.segment_kinds[u].label(),
                self.position_ids[u],
                vocab.decode(&[tok]),
            );
        }
        let _ = writeln!(out, "mask:");
        for u in 0..self.mask.rows() {
            let row: String = self.mask.row(u).iter().map(|&b| if b { '#' } else { '.' }).collect();
            let _ = writeln!(out, "{u:>3} {row}");
        }
        out
    }
}

/// Causal mask plus bidirectional attention inside the tail block
/// `[block_start, total_len)`.
pub fn single_block_mask(total_len: usize, block_start: usize, block_size: usize) -> Result<AttnMask> {
    if block_size == 0 {
        return Err(SdlmError::layout("block size must be at least 1"));
    }
    if block_start + block_size > total_len {
        return Err(SdlmError::layout(format!(
            "block [{block_start}, {}) extends beyond length {total_len}",
            block_start + block_size
        )));
    }
    if block_start + block_size != total_len {
        return Err(SdlmError::layout("block must occupy the tail of the sequence"));
    }
    Ok(AttnMask::from_fn(total_len, total_len, |u, v| {
        v <= u || (u >= block_start && v >= block_start)
    }))
}

/// Interleave `sample` with the noise blocks described by `blocks`.
pub fn build_train_layout(sample: &Sample, blocks: &[BlockSpec], style: BlockStyle) -> Result<TrainLayout> {
    let prompt_len = sample.prompt.len();
    let response_len = sample.response.len();
    if prompt_len == 0 {
        return Err(SdlmError::layout("prompt must be non-empty"));
    }
    let mut prev_end = 1;
    for b in blocks {
        if b.size == 0 || b.start == 0 {
            return Err(SdlmError::layout(format!("invalid block {b:?}")));
        }
        if b.start < prev_end {
            return Err(SdlmError::layout(format!("block {b:?} overlaps or is out of order")));
        }
        if b.start > response_len {
            return Err(SdlmError::layout(format!("block {b:?} starts past response of {response_len}")));
        }
        prev_end = b.end();
    }

    // Response index k (1-based) sits at position prompt_len - 1 + k; index 0
    // is the last prompt token.
    let resp_token = |k: usize| -> TokenId {
        if k == 0 {
            sample.prompt[prompt_len - 1]
        } else {
            sample.response[k - 1]
        }
    };
    let resp_pos = |k: usize| prompt_len - 1 + k;

    let total = prompt_len + response_len + blocks.iter().map(|b| b.size).sum::<usize>();
    let mut tokens = Vec::with_capacity(total);
    let mut position_ids = Vec::with_capacity(total);
    let mut kinds = Vec::with_capacity(total);
    // Per entry: (block index, offset) for noise entries.
    let mut noise_of: Vec<Option<(usize, usize)>> = Vec::with_capacity(total);
    let mut loss_targets = Vec::new();
    let mut aux_targets = Vec::new();
    let mut placed = Vec::with_capacity(blocks.len());

    for (p, &tok) in sample.prompt.iter().enumerate() {
        tokens.push(tok);
        position_ids.push(p);
        kinds.push(SegmentKind::Prompt);
        noise_of.push(None);
    }
    aux_targets.push((prompt_len - 1, resp_token(1)));

    let mut next_block = blocks.iter().enumerate().peekable();
    for k in 1..=response_len {
        if let Some(&(bi, b)) = next_block.peek() {
            if b.start == k {
                next_block.next();
                let entry_start = tokens.len();
                placed.push(PlacedBlock { spec: *b, entry_start });
                for o in 0..b.size {
                    let entry = tokens.len();
                    if o == 0 {
                        tokens.push(resp_token(k - 1));
                        kinds.push(SegmentKind::NoiseHead);
                    } else {
                        tokens.push(crate::corpus::MASK_ID);
                        kinds.push(SegmentKind::NoiseMask);
                    }
                    position_ids.push(resp_pos(k - 1 + o));
                    noise_of.push(Some((bi, o)));
                    // Entries past the end of the response stay unsupervised.
                    let target = if style.shift { Some(k + o) } else { (o > 0).then(|| k - 1 + o) };
                    if let Some(t) = target.filter(|&t| t <= response_len) {
                        loss_targets.push(LossTarget { entry, target: resp_token(t), block: bi });
                    }
                }
            }
        }
        let entry = tokens.len();
        tokens.push(resp_token(k));
        position_ids.push(resp_pos(k));
        kinds.push(SegmentKind::Clean);
        noise_of.push(None);
        if k < response_len {
            aux_targets.push((entry, resp_token(k + 1)));
        }
    }
    debug_assert_eq!(tokens.len(), total);

    let head_pos: Vec<usize> = placed.iter().map(|b| resp_pos(b.spec.start - 1)).collect();
    let mask = AttnMask::from_fn(total, total, |u, v| match (noise_of[u], noise_of[v]) {
        (None, None) => position_ids[v] <= position_ids[u],
        (None, Some(_)) => false,
        (Some((bu, _)), None) => position_ids[v] < head_pos[bu],
        (Some((bu, ou)), Some((bv, ov))) => bu == bv && style.intra(ou, ov),
    });

    Ok(TrainLayout {
        tokens,
        position_ids,
        mask,
        loss_targets,
        aux_targets,
        segment_kinds: kinds,
        blocks: placed,
        prompt_len,
    })
}

/// Tile blocks of `block_size` from `offset`. The last block keeps its full
/// width even when it runs past the response; decoding always proposes
/// full blocks, so training sees the same block shape.
pub(crate) fn tile_blocks(response_len: usize, block_size: usize, offset: usize) -> Vec<BlockSpec> {
    (offset..=response_len)
        .step_by(block_size.max(1))
        .map(|start| BlockSpec::new(start, block_size))
        .collect()
}

/// Random block placement for one training sample.
///
/// Draws a start offset uniformly from `1..=block_size`, tiles candidate
/// blocks from there, keeps each with probability `keep_prob`, and stops
/// at the first kept block that would push `response_len + Σ size` past
/// `budget`.
pub fn partition_blocks(
    response_len: usize,
    block_size: usize,
    keep_prob: f64,
    seed: u64,
    budget: usize,
) -> Result<Vec<BlockSpec>> {
    if block_size == 0 {
        return Err(SdlmError::config("block size must be at least 1"));
    }
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(SdlmError::config(format!("keep_prob {keep_prob} outside (0, 1]")));
    }
    if budget < response_len {
        return Err(SdlmError::config(format!(
            "layout budget {budget} below response length {response_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(1..=block_size);
    let mut used = response_len;
    let mut kept = Vec::new();
    for block in tile_blocks(response_len, block_size, offset) {
        if !rng.random_bool(keep_prob) {
            continue;
        }
        if used + block.size > budget {
            break;
        }
        used += block.size;
        kept.push(block);
    }
    Ok(kept)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::MASK_ID;

    fn example_sample() -> Sample {
        // prompt [x1, x2], response [y1, y2]
        Sample { prompt: vec![10, 11], response: vec![20, 21] }
    }

    /// Independent restatement of the tail-block predicate.
    fn brute_force_mask(total: usize, start: usize) -> Vec<String> {
        let mut rows = Vec::new();
        for u in 0..total {
            let mut row = String::new();
            for v in 0..total {
                let causal = v <= u;
                let in_block = u >= start && v >= start;
                row.push(if causal | in_block { '1' } else { '0' });
            }
            rows.push(row);
        }
        rows
    }

    #[test]
    fn single_block_examples() {
        let m = single_block_mask(4, 2, 2).unwrap();
        assert_eq!(m.to_rows(), ["1000", "1100", "1111", "1111"]);
        assert_eq!(m.to_rows(), brute_force_mask(4, 2));

        let causal = single_block_mask(5, 4, 1).unwrap();
        assert_eq!(causal, AttnMask::causal(5));

        let full = single_block_mask(3, 0, 3).unwrap();
        assert!(full.to_rows().iter().all(|r| r == "111"));
    }

    #[test]
    fn single_block_rejects_overrun() {
        assert!(matches!(single_block_mask(4, 3, 2), Err(SdlmError::Layout(_))));
        assert!(matches!(single_block_mask(4, 1, 2), Err(SdlmError::Layout(_))));
        assert!(matches!(single_block_mask(4, 4, 0), Err(SdlmError::Layout(_))));
    }

    #[test]
    fn interleaved_layout_example() {
        let layout =
            build_train_layout(&example_sample(), &[BlockSpec::new(1, 2)], BlockStyle::default()).unwrap();
        assert_eq!(layout.tokens, vec![10, 11, 11, MASK_ID, 20, 21]);
        assert_eq!(layout.position_ids, vec![0, 1, 1, 2, 2, 3]);
        let targets: Vec<(usize, TokenId)> = layout.loss_targets.iter().map(|t| (t.entry, t.target)).collect();
        assert_eq!(targets, vec![(2, 20), (3, 21)]);
        let visible = |u: usize| -> Vec<usize> { (0..6).filter(|&v| layout.mask.allows(u, v)).collect() };
        assert_eq!(visible(4), vec![0, 1, 4]);
        assert_eq!(visible(5), vec![0, 1, 4, 5]);
        // The head copies x2, so the block sees only the prefix before it.
        assert_eq!(visible(2), vec![0, 2, 3]);
        assert_eq!(visible(3), vec![0, 2, 3]);
        assert_eq!(
            layout.segment_kinds,
            vec![
                SegmentKind::Prompt,
                SegmentKind::Prompt,
                SegmentKind::NoiseHead,
                SegmentKind::NoiseMask,
                SegmentKind::Clean,
                SegmentKind::Clean
            ]
        );
    }

    #[test]
    fn unit_block_is_next_token_supervision() {
        let s = example_sample();
        let layout = build_train_layout(&s, &[BlockSpec::new(2, 1)], BlockStyle::default()).unwrap();
        // [x1, x2, y1, y1', y2]; the head copy of y1 predicts y2.
        assert_eq!(layout.tokens, vec![10, 11, 20, 20, 21]);
        assert_eq!(layout.loss_targets, vec![LossTarget { entry: 3, target: 21, block: 0 }]);
        let clean_view: Vec<bool> = (0..5).map(|v| layout.mask.allows(2, v)).collect();
        let head_view: Vec<bool> = (0..5).map(|v| layout.mask.allows(3, v)).collect();
        // Same context as the clean y1, just pointing at its own copy.
        assert_eq!(clean_view, [true, true, true, false, false]);
        assert_eq!(head_view, [true, true, false, true, false]);
    }

    #[test]
    fn zero_blocks_is_plain_causal() {
        let s = example_sample();
        let layout = build_train_layout(&s, &[], BlockStyle::default()).unwrap();
        assert_eq!(layout.tokens, vec![10, 11, 20, 21]);
        assert_eq!(layout.mask, AttnMask::causal(4));
        assert!(layout.loss_targets.is_empty());
        assert_eq!(layout.aux_targets, vec![(1, 20), (2, 21)]);
    }

    #[test]
    fn no_shift_targets_own_position() {
        let s = Sample { prompt: vec![10], response: vec![20, 21, 22] };
        let style = BlockStyle { shift: false, intra_block_causal: false };
        let layout = build_train_layout(&s, &[BlockSpec::new(1, 3)], style).unwrap();
        // head x1 (no target), masks at the positions of y1 and y2
        let targets: Vec<(usize, TokenId)> = layout.loss_targets.iter().map(|t| (t.entry, t.target)).collect();
        assert_eq!(targets, vec![(2, 20), (3, 21)]);
        assert_eq!(layout.position_ids[2], 1);
        assert_eq!(layout.position_ids[3], 2);
    }

    #[test]
    fn causal_intra_block() {
        let s = Sample { prompt: vec![10], response: vec![20, 21, 22] };
        let style = BlockStyle { shift: true, intra_block_causal: true };
        let layout = build_train_layout(&s, &[BlockSpec::new(1, 3)], style).unwrap();
        assert!(layout.mask.allows(3, 1));
        assert!(!layout.mask.allows(1, 3));
    }

    #[test]
    fn rejects_overlapping_blocks() {
        let s = Sample { prompt: vec![10], response: vec![20, 21, 22, 23] };
        let err = build_train_layout(&s, &[BlockSpec::new(1, 3), BlockSpec::new(2, 2)], BlockStyle::default());
        assert!(matches!(err, Err(SdlmError::Layout(_))));
        let err = build_train_layout(&s, &[BlockSpec::new(5, 2)], BlockStyle::default());
        assert!(matches!(err, Err(SdlmError::Layout(_))));
    }

    #[test]
    fn overrunning_block_leaves_tail_unsupervised() {
        let s = Sample { prompt: vec![10], response: vec![20, 21, 22, 23] };
        let layout = build_train_layout(&s, &[BlockSpec::new(3, 4)], BlockStyle::default()).unwrap();
        // block entries follow prompt + y1 + y2
        let targets: Vec<(usize, TokenId)> = layout.loss_targets.iter().map(|t| (t.entry, t.target)).collect();
        assert_eq!(targets, vec![(3, 22), (4, 23)]);
        assert_eq!(layout.position_ids[3..7], [2, 3, 4, 5]);
        let no_shift = BlockStyle { shift: false, intra_block_causal: false };
        let layout = build_train_layout(&s, &[BlockSpec::new(3, 4)], no_shift).unwrap();
        let targets: Vec<(usize, TokenId)> = layout.loss_targets.iter().map(|t| (t.entry, t.target)).collect();
        assert_eq!(targets, vec![(4, 22), (5, 23)]);
    }

    #[test]
    fn tiling_with_fixed_offset() {
        assert_eq!(tile_blocks(8, 4, 1), vec![BlockSpec::new(1, 4), BlockSpec::new(5, 4)]);
        assert_eq!(tile_blocks(8, 4, 3), vec![BlockSpec::new(3, 4), BlockSpec::new(7, 4)]);
        assert_eq!(tile_blocks(3, 1, 1), (1..=3).map(|i| BlockSpec::new(i, 1)).collect::<Vec<_>>());
    }

    #[test]
    fn partition_full_coverage_and_budget() {
        let blocks = partition_blocks(6, 1, 1.0, 9, 100).unwrap();
        assert_eq!(blocks, (1..=6).map(|i| BlockSpec::new(i, 1)).collect::<Vec<_>>());
        let tight = partition_blocks(6, 1, 1.0, 9, 8).unwrap();
        assert_eq!(tight, vec![BlockSpec::new(1, 1), BlockSpec::new(2, 1)]);
        assert_eq!(partition_blocks(6, 2, 0.5, 3, 30).unwrap(), partition_blocks(6, 2, 0.5, 3, 30).unwrap());
    }

    #[test]
    fn partition_can_drop_everything() {
        let empty = (0..200u64).find(|&seed| partition_blocks(4, 4, 1e-9, seed, 50).unwrap().is_empty());
        assert!(empty.is_some());
    }

    #[test]
    fn partition_rejects_bad_arguments() {
        assert!(partition_blocks(4, 0, 1.0, 0, 10).is_err());
        assert!(partition_blocks(4, 2, 0.0, 0, 10).is_err());
        assert!(partition_blocks(4, 2, 1.5, 0, 10).is_err());
        assert!(partition_blocks(4, 2, 1.0, 0, 3).is_err());
    }
}
