use super::Real;
use crate::TokenId;

/// Per-layer keys and values for committed tokens at positions `0..len()`.
///
/// Append-only: a committed entry is never rewritten and the length never
/// shrinks. Noise-block entries are never committed.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache<F = f32> {
    dim: usize,
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    tokens: Vec<TokenId>,
}

impl<F: Real> KvCache<F> {
    pub fn new(n_layers: usize, dim: usize) -> Self {
        KvCache {
            dim,
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            tokens: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.keys.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn keys(&self, layer: usize) -> &[F] {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &[F] {
        &self.values[layer]
    }

    /// Append the leading `count` rows of a chunk's per-layer K/V.
    pub(crate) fn append(&mut self, chunk_kv: &[(Vec<F>, Vec<F>)], tokens: &[TokenId], count: usize) {
        debug_assert_eq!(chunk_kv.len(), self.keys.len());
        let width = count * self.dim;
        for (layer, (k, v)) in chunk_kv.iter().enumerate() {
            self.keys[layer].extend_from_slice(&k[..width]);
            self.values[layer].extend_from_slice(&v[..width]);
        }
        self.tokens.extend_from_slice(&tokens[..count]);
    }
}
