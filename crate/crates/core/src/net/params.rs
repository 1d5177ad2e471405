use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Real};
use crate::Result;

const INIT_STD: f64 = 0.02;
const PER_LAYER: usize = 12;

/// Names every weight tensor; layer-indexed variants carry the layer number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorId {
    TokEmb,
    PosEmb,
    Ln1Gain(usize),
    Ln1Bias(usize),
    Wq(usize),
    Wk(usize),
    Wv(usize),
    Wo(usize),
    Ln2Gain(usize),
    Ln2Bias(usize),
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
    LnFGain,
    LnFBias,
    WOut,
    BOut,
}

impl TensorId {
    fn slot(self, n_layers: usize) -> usize {
        use TensorId::*;
        let layer = |l: usize, k: usize| 2 + l * PER_LAYER + k;
        let tail = 2 + n_layers * PER_LAYER;
        match self {
            TokEmb => 0,
            PosEmb => 1,
            Ln1Gain(l) => layer(l, 0),
            Ln1Bias(l) => layer(l, 1),
            Wq(l) => layer(l, 2),
            Wk(l) => layer(l, 3),
            Wv(l) => layer(l, 4),
            Wo(l) => layer(l, 5),
            Ln2Gain(l) => layer(l, 6),
            Ln2Bias(l) => layer(l, 7),
            W1(l) => layer(l, 8),
            B1(l) => layer(l, 9),
            W2(l) => layer(l, 10),
            B2(l) => layer(l, 11),
            LnFGain => tail,
            LnFBias => tail + 1,
            WOut => tail + 2,
            BOut => tail + 3,
        }
    }
}

/// One entry of the tensor manifest; `offset` counts elements into the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn manifest(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.dim;
    let h = config.mlp_hidden();
    let v = config.vocab_size;
    let mut specs = Vec::with_capacity(6 + config.n_layers * PER_LAYER);
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        specs.push(TensorSpec { name, shape, offset });
        offset += len;
    };
    push("tok_emb".into(), vec![v, d]);
    push("pos_emb".into(), vec![config.max_positions, d]);
    for l in 0..config.n_layers {
        push(format!("layers.{l}.ln1.gain"), vec![d]);
        push(format!("layers.{l}.ln1.bias"), vec![d]);
        push(format!("layers.{l}.attn.wq"), vec![d, d]);
        push(format!("layers.{l}.attn.wk"), vec![d, d]);
        push(format!("layers.{l}.attn.wv"), vec![d, d]);
        push(format!("layers.{l}.attn.wo"), vec![d, d]);
        push(format!("layers.{l}.ln2.gain"), vec![d]);
        push(format!("layers.{l}.ln2.bias"), vec![d]);
        push(format!("layers.{l}.mlp.w1"), vec![d, h]);
        push(format!("layers.{l}.mlp.b1"), vec![h]);
        push(format!("layers.{l}.mlp.w2"), vec![h, d]);
        push(format!("layers.{l}.mlp.b2"), vec![d]);
    }
    push("ln_f.gain".into(), vec![d]);
    push("ln_f.bias".into(), vec![d]);
    push("out.w".into(), vec![d, v]);
    push("out.b".into(), vec![v]);
    specs
}

/// All learned weights of one model in a single flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F = f32> {
    config: ModelConfig,
    specs: Vec<TensorSpec>,
    data: Vec<F>,
}

impl<F: Real> Parameters<F> {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let specs = manifest(&config);
        let total = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        Ok(Parameters { config, specs, data: vec![F::zero(); total] })
    }

    pub(crate) fn from_parts(config: ModelConfig, data: Vec<F>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(crate::SdlmError::contract(format!(
                "expected {} parameters, got {}",
                p.data.len(),
                data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    /// Same shapes, all zeros; used for gradient buffers.
    pub fn zeros_like(&self) -> Self {
        Parameters { config: self.config, specs: self.specs.clone(), data: vec![F::zero(); self.data.len()] }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, id: TensorId) -> &[F] {
        let s = &self.specs[id.slot(self.config.n_layers)];
        &self.data[s.offset..s.offset + s.len()]
    }

    pub fn get_mut(&mut self, id: TensorId) -> &mut [F] {
        let s = &self.specs[id.slot(self.config.n_layers)];
        let range = s.offset..s.offset + s.len();
        &mut self.data[range]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        Parameters {
            config: self.config,
            specs: self.specs.clone(),
            data: self.data.iter().map(|&x| G::from_f64_lossy(x.as_f64())).collect(),
        }
    }

    /// Rewrite the block style (shift / intra-block attention) recorded with the weights.
    pub fn set_style(&mut self, style: crate::layout::BlockStyle) -> Result<()> {
        let mut config = self.config;
        config.style = style;
        config.validate()?;
        self.config = config;
        Ok(())
    }
}

/// Scaled-normal initialization. Layer-norm gains start at one, biases at
/// zero, and residual output projections are shrunk by `1/sqrt(2·layers)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Parameters<f32>> {
    let mut p = Parameters::zeros(*config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let base = Normal::new(0.0, INIT_STD).expect("valid std");
    let residual = Normal::new(0.0, residual_std).expect("valid std");

    let mut fill = |p: &mut Parameters<f32>, id: TensorId, dist: &Normal<f64>| {
        for x in p.get_mut(id) {
            *x = dist.sample(&mut rng) as f32;
        }
    };
    fill(&mut p, TensorId::TokEmb, &base);
    fill(&mut p, TensorId::PosEmb, &base);
    for l in 0..config.n_layers {
        p.get_mut(TensorId::Ln1Gain(l)).fill(1.0);
        p.get_mut(TensorId::Ln2Gain(l)).fill(1.0);
        fill(&mut p, TensorId::Wq(l), &base);
        fill(&mut p, TensorId::Wk(l), &base);
        fill(&mut p, TensorId::Wv(l), &base);
        fill(&mut p, TensorId::Wo(l), &residual);
        fill(&mut p, TensorId::W1(l), &base);
        fill(&mut p, TensorId::W2(l), &residual);
    }
    p.get_mut(TensorId::LnFGain).fill(1.0);
    fill(&mut p, TensorId::WOut, &base);
    Ok(p)
}
