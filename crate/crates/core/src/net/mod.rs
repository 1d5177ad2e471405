//! Minimal pre-norm decoder transformer.
//!
//! The network reads order only through explicit position ids and an
//! arbitrary boolean attention mask, which is what lets one set of weights
//! serve causal prefixes, interleaved training layouts, cached decoding and
//! batched verification rows.

mod cache;
mod checkpoint;
mod model;
mod params;
mod real;

use serde::{Deserialize, Serialize};

pub use cache::KvCache;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CKPT_FORMAT};
pub use model::Tape;
pub use params::{init_params, Parameters, TensorId, TensorSpec};
pub use real::Real;

use crate::layout::BlockStyle;
use crate::{Result, SdlmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosEncoding {
    #[default]
    LearnedAbsolute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_positions: usize,
    /// Decoding horizon `D`; baked into the checkpoint.
    pub block_size: usize,
    #[serde(default)]
    pub pos_encoding: PosEncoding,
    #[serde(default)]
    pub style: BlockStyle,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SdlmError::Config(m));
        if self.vocab_size == 0 || self.dim == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad(format!("degenerate model config {self:?}"));
        }
        if self.dim % self.n_heads != 0 {
            return bad(format!("dim {} not divisible by n_heads {}", self.dim, self.n_heads));
        }
        if self.block_size == 0 {
            return bad("block_size must be at least 1".into());
        }
        if self.style.horizon(self.block_size) == 0 {
            return bad("unshifted prediction needs block_size of at least 2".into());
        }
        if self.max_positions < self.block_size + 1 {
            return bad(format!("max_positions {} too small for block_size", self.max_positions));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.dim
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Copy> Matrix<F> {
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn select_rows(&self, rows: impl IntoIterator<Item = usize>) -> Matrix<F> {
        let mut data = Vec::new();
        let mut n = 0;
        for r in rows {
            data.extend_from_slice(self.row(r));
            n += 1;
        }
        Matrix { rows: n, cols: self.cols, data }
    }
}
