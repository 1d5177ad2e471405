use std::borrow::Cow;

use super::real::gemm;
use super::{KvCache, Matrix, Parameters, Real, TensorId as T};
use crate::layout::AttnMask;
use crate::{Result, SdlmError, TokenId};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone)]
struct LnTape<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

#[derive(Debug, Clone)]
struct LayerTape<F> {
    ln1: LnTape<F>,
    h1: Vec<F>,
    q: Vec<F>,
    k: Vec<F>,
    v: Vec<F>,
    /// `heads × T × T`, zero where masked.
    probs: Vec<F>,
    attn: Vec<F>,
    ln2: LnTape<F>,
    h2: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
}

/// Activations saved by an uncached forward pass for [`Parameters::backward`].
#[derive(Debug, Clone)]
pub struct Tape<F> {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    mask: AttnMask,
    layers: Vec<LayerTape<F>>,
    lnf: LnTape<F>,
    hf: Vec<F>,
}

pub(crate) struct Output<F> {
    pub logits: Matrix<F>,
    pub chunk_kv: Vec<(Vec<F>, Vec<F>)>,
    pub tape: Option<Tape<F>>,
}

fn layer_norm<F: Real>(x: &[F], gain: &[F], bias: &[F], d: usize) -> (Vec<F>, LnTape<F>) {
    let rows = x.len() / d;
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let eps = F::from_f64_lossy(LN_EPS);
    let mut out = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = (var + eps).sqrt().recip();
        rstd[r] = rs;
        for i in 0..d {
            let xh = (row[i] - mean) * rs;
            xhat[r * d + i] = xh;
            out[r * d + i] = xh * gain[i] + bias[i];
        }
    }
    (out, LnTape { xhat, rstd })
}

/// Accumulates gain/bias gradients and adds the input gradient into `dx`.
fn layer_norm_backward<F: Real>(
    dy: &[F],
    tape: &LnTape<F>,
    gain: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
    d: usize,
) {
    let inv_d = F::from_f64_lossy(1.0 / d as f64);
    let mut dxhat = vec![F::zero(); d];
    for (r, &rs) in tape.rstd.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &tape.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for i in 0..d {
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_dxhat += dxhat[i];
            mean_dxhat_xhat += dxhat[i] * xh[i];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        for i in 0..d {
            dx[r * d + i] += rs * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

fn gelu<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn add_column_sums<F: Real>(acc: &mut [F], x: &[F]) {
    for row in x.chunks(acc.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

/// Masked multi-head attention of `T` queries over `S` keys.
#[allow(clippy::too_many_arguments)]
fn attend<F: Real>(
    q: &[F],
    keys: &[F],
    values: &[F],
    mask: &AttnMask,
    n_heads: usize,
    d: usize,
    out: &mut [F],
    mut probs: Option<&mut [F]>,
) -> Result<()> {
    let t_len = mask.rows();
    let s_len = mask.cols();
    let dh = d / n_heads;
    let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut allowed = Vec::with_capacity(s_len);
    let mut weights = Vec::with_capacity(s_len);
    for t in 0..t_len {
        allowed.clear();
        allowed.extend((0..s_len).filter(|&j| mask.allows(t, j)));
        if allowed.is_empty() {
            return Err(SdlmError::contract(format!("mask row {t} attends to nothing")));
        }
        for h in 0..n_heads {
            let qh = &q[t * d + h * dh..t * d + (h + 1) * dh];
            weights.clear();
            let mut max = F::neg_infinity();
            for &j in &allowed {
                let s = dot(qh, &keys[j * d + h * dh..j * d + (h + 1) * dh]) * scale;
                max = max.max(s);
                weights.push(s);
            }
            let mut total = F::zero();
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                total += *w;
            }
            let inv = total.recip();
            let oh = &mut out[t * d + h * dh..t * d + (h + 1) * dh];
            oh.fill(F::zero());
            for (&j, w) in allowed.iter().zip(weights.iter_mut()) {
                *w *= inv;
                let vh = &values[j * d + h * dh..j * d + (h + 1) * dh];
                for (o, &v) in oh.iter_mut().zip(vh) {
                    *o += *w * v;
                }
            }
            if let Some(p) = probs.as_deref_mut() {
                let base = (h * t_len + t) * s_len;
                for (&j, &w) in allowed.iter().zip(&weights) {
                    p[base + j] = w;
                }
            }
        }
    }
    Ok(())
}

impl<F: Real> Parameters<F> {
    fn check_inputs(&self, tokens: &[TokenId], positions: &[usize], mask: &AttnMask, past: usize) -> Result<()> {
        let cfg = self.config();
        let t = tokens.len();
        if t == 0 {
            return Err(SdlmError::contract("empty input"));
        }
        if positions.len() != t {
            return Err(SdlmError::contract(format!("{t} tokens but {} position ids", positions.len())));
        }
        if mask.rows() != t || mask.cols() != past + t {
            return Err(SdlmError::contract(format!(
                "mask is {}x{}, expected {t}x{}",
                mask.rows(),
                mask.cols(),
                past + t
            )));
        }
        if let Some(&tok) = tokens.iter().find(|&&tok| tok as usize >= cfg.vocab_size) {
            return Err(SdlmError::contract(format!("token {tok} outside vocab of {}", cfg.vocab_size)));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_positions) {
            return Err(SdlmError::contract(format!("position {p} >= max_positions {}", cfg.max_positions)));
        }
        Ok(())
    }

    pub(crate) fn run(
        &self,
        past: Option<&KvCache<F>>,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &AttnMask,
        record: bool,
    ) -> Result<Output<F>> {
        let cfg = *self.config();
        let past_len = past.map_or(0, |c| c.len());
        self.check_inputs(tokens, positions, mask, past_len)?;
        if let Some(c) = past {
            if c.n_layers() != cfg.n_layers || c.dim() != cfg.dim {
                return Err(SdlmError::contract("cache does not match model shape"));
            }
        }
        if record && past_len > 0 {
            return Err(SdlmError::contract("gradient tape requires an uncached pass"));
        }
        let (t_len, d, hidden, vocab) = (tokens.len(), cfg.dim, cfg.mlp_hidden(), cfg.vocab_size);

        let mut x = vec![F::zero(); t_len * d];
        let tok_emb = self.get(T::TokEmb);
        let pos_emb = self.get(T::PosEmb);
        for (r, (&tok, &pos)) in tokens.iter().zip(positions).enumerate() {
            let te = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
            let pe = &pos_emb[pos * d..(pos + 1) * d];
            for i in 0..d {
                x[r * d + i] = te[i] + pe[i];
            }
        }

        let mut chunk_kv = Vec::with_capacity(cfg.n_layers);
        let mut layer_tapes = Vec::with_capacity(if record { cfg.n_layers } else { 0 });
        for l in 0..cfg.n_layers {
            let (h1, ln1) = layer_norm(&x, self.get(T::Ln1Gain(l)), self.get(T::Ln1Bias(l)), d);
            let mut q = vec![F::zero(); t_len * d];
            let mut k = vec![F::zero(); t_len * d];
            let mut v = vec![F::zero(); t_len * d];
            gemm(false, false, t_len, d, d, &h1, self.get(T::Wq(l)), F::zero(), &mut q);
            gemm(false, false, t_len, d, d, &h1, self.get(T::Wk(l)), F::zero(), &mut k);
            gemm(false, false, t_len, d, d, &h1, self.get(T::Wv(l)), F::zero(), &mut v);

            let (keys, values): (Cow<[F]>, Cow<[F]>) = match past {
                Some(c) if past_len > 0 => (
                    Cow::Owned([c.keys(l), &k[..]].concat()),
                    Cow::Owned([c.values(l), &v[..]].concat()),
                ),
                _ => (Cow::Borrowed(&k[..]), Cow::Borrowed(&v[..])),
            };
            let mut attn = vec![F::zero(); t_len * d];
            let mut probs = if record { vec![F::zero(); cfg.n_heads * t_len * t_len] } else { Vec::new() };
            attend(
                &q,
                &keys,
                &values,
                mask,
                cfg.n_heads,
                d,
                &mut attn,
                record.then_some(&mut probs[..]),
            )?;
            drop((keys, values));

            // x += attn Wo
            gemm(false, false, t_len, d, d, &attn, self.get(T::Wo(l)), F::one(), &mut x);

            let (h2, ln2) = layer_norm(&x, self.get(T::Ln2Gain(l)), self.get(T::Ln2Bias(l)), d);
            let mut u = vec![F::zero(); t_len * hidden];
            gemm(false, false, t_len, d, hidden, &h2, self.get(T::W1(l)), F::zero(), &mut u);
            add_bias(&mut u, self.get(T::B1(l)));
            let g: Vec<F> = u.iter().map(|&z| gelu(z)).collect();
            gemm(false, false, t_len, hidden, d, &g, self.get(T::W2(l)), F::one(), &mut x);
            add_bias(&mut x, self.get(T::B2(l)));

            if record {
                layer_tapes.push(LayerTape { ln1, h1, q, k: k.clone(), v: v.clone(), probs, attn, ln2, h2, u, g });
            }
            chunk_kv.push((k, v));
        }

        let (hf, lnf) = layer_norm(&x, self.get(T::LnFGain), self.get(T::LnFBias), d);
        let mut logits = vec![F::zero(); t_len * vocab];
        gemm(false, false, t_len, d, vocab, &hf, self.get(T::WOut), F::zero(), &mut logits);
        add_bias(&mut logits, self.get(T::BOut));

        let tape = record.then(|| Tape {
            tokens: tokens.to_vec(),
            positions: positions.to_vec(),
            mask: mask.clone(),
            layers: layer_tapes,
            lnf,
            hf,
        });
        Ok(Output { logits: Matrix { rows: t_len, cols: vocab, data: logits }, chunk_kv, tape })
    }

    /// Logits for every entry of `tokens`; row `u` sees column `v` iff `mask.allows(u, v)`.
    pub fn forward(&self, tokens: &[TokenId], positions: &[usize], mask: &AttnMask) -> Result<Matrix<F>> {
        Ok(self.run(None, tokens, positions, mask, false)?.logits)
    }

    /// Forward pass that also records the activations needed by [`Self::backward`].
    pub fn forward_train(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &AttnMask,
    ) -> Result<(Matrix<F>, Tape<F>)> {
        let out = self.run(None, tokens, positions, mask, true)?;
        Ok((out.logits, out.tape.expect("recorded")))
    }

    pub fn new_cache(&self) -> KvCache<F> {
        KvCache::new(self.config().n_layers, self.config().dim)
    }

    /// Run a chunk against the committed prefix in `cache`.
    ///
    /// `mask` is `chunk × (cache + chunk)`. The first `commit_count` chunk
    /// entries must be plain causal continuations of the cache (positions
    /// `len, len+1, ...`); their K/V are appended, the rest are dropped.
    pub fn forward_cached(
        &self,
        cache: &mut KvCache<F>,
        tokens: &[TokenId],
        positions: &[usize],
        mask: &AttnMask,
        commit_count: usize,
    ) -> Result<Matrix<F>> {
        let c = cache.len();
        if commit_count > tokens.len() {
            return Err(SdlmError::contract(format!(
                "commit_count {commit_count} exceeds chunk of {}",
                tokens.len()
            )));
        }
        for r in 0..commit_count {
            if positions.get(r) != Some(&(c + r)) {
                return Err(SdlmError::contract(format!(
                    "committed entry {r} has position {:?}, cache expects {}",
                    positions.get(r),
                    c + r
                )));
            }
            if mask.rows() == tokens.len()
                && mask.cols() == c + tokens.len()
                && !(0..mask.cols()).all(|v| mask.allows(r, v) == (v <= c + r))
            {
                return Err(SdlmError::contract(format!("committed entry {r} is not causal")));
            }
        }
        let out = self.run(Some(cache), tokens, positions, mask, false)?;
        cache.append(&out.chunk_kv, tokens, commit_count);
        Ok(out.logits)
    }

    /// Accumulate parameter gradients of `sum(dlogits ⊙ logits)` into `grads`.
    pub fn backward(&self, tape: &Tape<F>, dlogits: &[F], grads: &mut Parameters<F>) -> Result<()> {
        let cfg = *self.config();
        let (t_len, d, hidden, vocab) = (tape.tokens.len(), cfg.dim, cfg.mlp_hidden(), cfg.vocab_size);
        if dlogits.len() != t_len * vocab {
            return Err(SdlmError::contract("dlogits shape mismatch"));
        }
        if grads.config() != self.config() {
            return Err(SdlmError::contract("gradient buffer has a different config"));
        }
        let n_heads = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = F::from_f64_lossy(1.0 / (dh as f64).sqrt());

        gemm(true, false, d, t_len, vocab, &tape.hf, dlogits, F::one(), grads.get_mut(T::WOut));
        add_column_sums(grads.get_mut(T::BOut), dlogits);
        let mut dhf = vec![F::zero(); t_len * d];
        gemm(false, true, t_len, vocab, d, dlogits, self.get(T::WOut), F::zero(), &mut dhf);

        // Gradient w.r.t. the residual stream.
        let mut dx = vec![F::zero(); t_len * d];
        {
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            layer_norm_backward(&dhf, &tape.lnf, self.get(T::LnFGain), &mut dgain, &mut dbias, &mut dx, d);
            add_into(grads.get_mut(T::LnFGain), &dgain);
            add_into(grads.get_mut(T::LnFBias), &dbias);
        }

        for l in (0..cfg.n_layers).rev() {
            let lt = &tape.layers[l];

            // MLP branch: x_out = x_mid + gelu(h2 W1 + b1) W2 + b2
            add_column_sums(grads.get_mut(T::B2(l)), &dx);
            gemm(true, false, hidden, t_len, d, &lt.g, &dx, F::one(), grads.get_mut(T::W2(l)));
            let mut du = vec![F::zero(); t_len * hidden];
            gemm(false, true, t_len, d, hidden, &dx, self.get(T::W2(l)), F::zero(), &mut du);
            for (g, &z) in du.iter_mut().zip(&lt.u) {
                *g *= gelu_grad(z);
            }
            add_column_sums(grads.get_mut(T::B1(l)), &du);
            gemm(true, false, d, t_len, hidden, &lt.h2, &du, F::one(), grads.get_mut(T::W1(l)));
            let mut dh2 = vec![F::zero(); t_len * d];
            gemm(false, true, t_len, hidden, d, &du, self.get(T::W1(l)), F::zero(), &mut dh2);
            {
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                layer_norm_backward(&dh2, &lt.ln2, self.get(T::Ln2Gain(l)), &mut dgain, &mut dbias, &mut dx, d);
                add_into(grads.get_mut(T::Ln2Gain(l)), &dgain);
                add_into(grads.get_mut(T::Ln2Bias(l)), &dbias);
            }

            // Attention branch: x_mid = x_in + attn Wo
            gemm(true, false, d, t_len, d, &lt.attn, &dx, F::one(), grads.get_mut(T::Wo(l)));
            let mut dattn = vec![F::zero(); t_len * d];
            gemm(false, true, t_len, d, d, &dx, self.get(T::Wo(l)), F::zero(), &mut dattn);

            let mut dq = vec![F::zero(); t_len * d];
            let mut dk = vec![F::zero(); t_len * d];
            let mut dv = vec![F::zero(); t_len * d];
            let mut dp = vec![F::zero(); t_len];
            for h in 0..n_heads {
                let hs = h * dh..(h + 1) * dh;
                for t in 0..t_len {
                    let p_row = &lt.probs[(h * t_len + t) * t_len..(h * t_len + t + 1) * t_len];
                    let dout = &dattn[t * d + hs.start..t * d + hs.end];
                    let mut weighted = F::zero();
                    for j in 0..t_len {
                        if !tape.mask.allows(t, j) {
                            continue;
                        }
                        let vj = &lt.v[j * d + hs.start..j * d + hs.end];
                        dp[j] = dot(dout, vj);
                        weighted += p_row[j] * dp[j];
                        let dvj = &mut dv[j * d + hs.start..j * d + hs.end];
                        for (g, &o) in dvj.iter_mut().zip(dout) {
                            *g += p_row[j] * o;
                        }
                    }
                    for j in 0..t_len {
                        if !tape.mask.allows(t, j) {
                            continue;
                        }
                        let ds = p_row[j] * (dp[j] - weighted) * scale;
                        for i in hs.clone() {
                            dq[t * d + i] += ds * lt.k[j * d + i];
                            dk[j * d + i] += ds * lt.q[t * d + i];
                        }
                    }
                }
            }
            gemm(true, false, d, t_len, d, &lt.h1, &dq, F::one(), grads.get_mut(T::Wq(l)));
            gemm(true, false, d, t_len, d, &lt.h1, &dk, F::one(), grads.get_mut(T::Wk(l)));
            gemm(true, false, d, t_len, d, &lt.h1, &dv, F::one(), grads.get_mut(T::Wv(l)));
            let mut dh1 = vec![F::zero(); t_len * d];
            gemm(false, true, t_len, d, d, &dq, self.get(T::Wq(l)), F::zero(), &mut dh1);
            gemm(false, true, t_len, d, d, &dk, self.get(T::Wk(l)), F::one(), &mut dh1);
            gemm(false, true, t_len, d, d, &dv, self.get(T::Wv(l)), F::one(), &mut dh1);
            {
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                layer_norm_backward(&dh1, &lt.ln1, self.get(T::Ln1Gain(l)), &mut dgain, &mut dbias, &mut dx, d);
                add_into(grads.get_mut(T::Ln1Gain(l)), &dgain);
                add_into(grads.get_mut(T::Ln1Bias(l)), &dbias);
            }
        }

        for (r, (&tok, &pos)) in tape.tokens.iter().zip(&tape.positions).enumerate() {
            let row = &dx[r * d..(r + 1) * d];
            add_into(&mut grads.get_mut(T::TokEmb)[tok as usize * d..(tok as usize + 1) * d], row);
            add_into(&mut grads.get_mut(T::PosEmb)[pos * d..(pos + 1) * d], row);
        }
        Ok(())
    }
}

fn add_into<F: Real>(acc: &mut [F], x: &[F]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += v;
    }
}
