//! Post-norm transformer encoder with manual backpropagation.
//!
//! The encoder exposes every layer's activations (embedding output plus each
//! block output) so downstream components can pick the layer whose features
//! transfer best. Backward passes accept gradients entering at any subset of
//! those layers, which is what the adversarial stage needs: the discriminator
//! taps one layer while the KL measurer taps another.

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenBatch;
use crate::error::{Error, Result};
use crate::tensor::{all_finite3, flat2, matmul3, randn2};

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// How token-level states collapse to one vector per post.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FirstToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_rate: f64,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_positions < 2 {
            return Err(Error::Config("degenerate encoder configuration".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            max_positions: 512,
            dropout_rate: 0.1,
            pooling: Pooling::FirstToken,
        }
    }
}

/// Weights of a single transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
}

impl LayerParams {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        LayerParams {
            wq: randn2(d, d, INIT_STD, rng),
            wk: randn2(d, d, INIT_STD, rng),
            wv: randn2(d, d, INIT_STD, rng),
            wo: randn2(d, d, INIT_STD, rng),
            w1: randn2(d, f, INIT_STD, rng),
            b1: Array1::zeros(f),
            w2: randn2(f, d, INIT_STD, rng),
            b2: Array1::zeros(d),
            ln1_g: Array1::ones(d),
            ln1_b: Array1::zeros(d),
            ln2_g: Array1::ones(d),
            ln2_b: Array1::zeros(d),
        }
    }

    fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        LayerParams {
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            w1: Array2::zeros((d, f)),
            b1: Array1::zeros(f),
            w2: Array2::zeros((f, d)),
            b2: Array1::zeros(d),
            ln1_g: Array1::zeros(d),
            ln1_b: Array1::zeros(d),
            ln2_g: Array1::zeros(d),
            ln2_b: Array1::zeros(d),
        }
    }
}

/// All weights of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            tok_emb: randn2(cfg.vocab_size, cfg.d_model, INIT_STD, rng),
            pos_emb: randn2(cfg.max_positions, cfg.d_model, INIT_STD, rng),
            layers: (0..cfg.n_layers).map(|_| LayerParams::init(cfg, rng)).collect(),
        }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        EncoderParams {
            tok_emb: Array2::zeros((cfg.vocab_size, cfg.d_model)),
            pos_emb: Array2::zeros((cfg.max_positions, cfg.d_model)),
            layers: (0..cfg.n_layers).map(|_| LayerParams::zeros(cfg)).collect(),
        }
    }

    /// Flatten every parameter in a fixed order (gradient checking).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend(self.tok_emb.iter());
        out.extend(self.pos_emb.iter());
        for l in &self.layers {
            out.extend(l.wq.iter());
            out.extend(l.wk.iter());
            out.extend(l.wv.iter());
            out.extend(l.wo.iter());
            out.extend(l.w1.iter());
            out.extend(l.b1.iter());
            out.extend(l.w2.iter());
            out.extend(l.b2.iter());
            out.extend(l.ln1_g.iter());
            out.extend(l.ln1_b.iter());
            out.extend(l.ln2_g.iter());
            out.extend(l.ln2_b.iter());
        }
        out
    }

    /// Inverse of [`EncoderParams::to_flat`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut next = move || it.next().expect("flat vector long enough");
        for v in self.tok_emb.iter_mut() {
            *v = next();
        }
        for v in self.pos_emb.iter_mut() {
            *v = next();
        }
        for l in &mut self.layers {
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1] {
                for v in m.iter_mut() {
                    *v = next();
                }
            }
            for v in l.b1.iter_mut() {
                *v = next();
            }
            for v in l.w2.iter_mut() {
                *v = next();
            }
            for v in l.b2.iter_mut() {
                *v = next();
            }
            for a in [&mut l.ln1_g, &mut l.ln1_b, &mut l.ln2_g, &mut l.ln2_b] {
                for v in a.iter_mut() {
                    *v = next();
                }
            }
        }
    }

    /// Squared L2 norm over all tensors, honouring a frozen set.
    pub fn sq_norm(&self, frozen: &FrozenLayers) -> f64 {
        let mut acc = 0.0;
        if !frozen.embeddings {
            acc += self.tok_emb.iter().map(|v| v * v).sum::<f64>();
            acc += self.pos_emb.iter().map(|v| v * v).sum::<f64>();
        }
        for (i, l) in self.layers.iter().enumerate() {
            if frozen.layers[i] {
                continue;
            }
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2] {
                acc += m.iter().map(|v| v * v).sum::<f64>();
            }
            for a in [&l.b1, &l.b2, &l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b] {
                acc += a.iter().map(|v| v * v).sum::<f64>();
            }
        }
        acc
    }

    /// Scale every unfrozen tensor in place (gradient clipping).
    pub fn scale(&mut self, factor: f64, frozen: &FrozenLayers) {
        if !frozen.embeddings {
            self.tok_emb.mapv_inplace(|v| v * factor);
            self.pos_emb.mapv_inplace(|v| v * factor);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            if frozen.layers[i] {
                continue;
            }
            for m in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.w1, &mut l.w2] {
                m.mapv_inplace(|v| v * factor);
            }
            for a in [&mut l.b1, &mut l.b2, &mut l.ln1_g, &mut l.ln1_b, &mut l.ln2_g, &mut l.ln2_b] {
                a.mapv_inplace(|v| v * factor);
            }
        }
    }
}

/// Which parts of an encoder are excluded from gradient updates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenLayers {
    pub embeddings: bool,
    pub layers: Vec<bool>,
}

impl FrozenLayers {
    pub fn none(n_layers: usize) -> Self {
        FrozenLayers { embeddings: false, layers: vec![false; n_layers] }
    }
}

/// Parameter-sharing mode for target-encoder initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum ShareMode {
    Full,
    Partial(usize),
}

/// Per-layer activations from one forward pass: embedding output plus each
/// block output, `n_layers + 1` tensors of shape `[batch, seq, d_model]`.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub layers: Vec<Array3<f64>>,
}

impl HiddenStates {
    pub fn n_states(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &Array3<f64> {
        &self.layers[i]
    }
}

struct LayerCache {
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    attn: Array4<f64>,
    ctx: Array3<f64>,
    drop_attn: Option<Array3<f64>>,
    ln1_xhat: Array3<f64>,
    ln1_inv_std: Array2<f64>,
    h1: Array3<f64>,
    z: Array3<f64>,
    drop_ffn: Option<Array3<f64>>,
    ln2_xhat: Array3<f64>,
    ln2_inv_std: Array2<f64>,
}

/// Intermediate activations retained for the backward pass.
pub struct EncoderCache {
    layers: Vec<LayerCache>,
}

/// Gradients mirroring [`EncoderParams`].
pub type EncoderGrads = EncoderParams;

/// Config plus parameters; the unit the training loops operate on.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let params = EncoderParams::init(&cfg, rng);
        Ok(Encoder { cfg, params })
    }

    /// Deterministic forward pass without dropout; the spec-level `encode`.
    pub fn encode(&self, batch: &TokenBatch) -> Result<HiddenStates> {
        let (states, _) = self.run(batch, None, false)?;
        Ok(states)
    }

    /// Forward pass that retains intermediates for [`Encoder::backward`].
    /// Dropout is applied only when a generator is supplied and the
    /// configured rate is positive.
    pub fn forward_cached(
        &self,
        batch: &TokenBatch,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(HiddenStates, EncoderCache)> {
        let (states, cache) = self.run(batch, dropout_rng, true)?;
        Ok((states, cache.expect("cache requested")))
    }

    fn dropout_mask(&self, shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        let keep = 1.0 - self.cfg.dropout_rate;
        Array3::from_shape_fn(shape, |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }

    fn run(
        &self,
        batch: &TokenBatch,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        want_cache: bool,
    ) -> Result<(HiddenStates, Option<EncoderCache>)> {
        let cfg = &self.cfg;
        let p = &self.params;
        let (b, s) = batch.ids.dim();
        if s > cfg.max_positions {
            return Err(Error::Config(format!(
                "sequence length {s} exceeds positional capacity {}",
                cfg.max_positions
            )));
        }
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let dk = cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        // Embedding sum.
        let mut x0 = Array3::<f64>::zeros((b, s, d));
        for i in 0..b {
            for j in 0..s {
                let id = batch.ids[[i, j]];
                if id >= cfg.vocab_size {
                    return Err(Error::TokenIdOutOfRange { id, vocab_size: cfg.vocab_size });
                }
                let emb = &p.tok_emb.row(id) + &p.pos_emb.row(j);
                x0.slice_mut(s![i, j, ..]).assign(&emb);
            }
        }
        if !all_finite3(&x0) {
            return Err(Error::NonFiniteActivation { layer: 0 });
        }

        let mut states = vec![x0];
        let mut caches: Vec<LayerCache> = Vec::new();

        for (li, layer) in p.layers.iter().enumerate() {
            let h = &states[li];
            let q = matmul3(h, &layer.wq);
            let k = matmul3(h, &layer.wk);
            let v = matmul3(h, &layer.wv);

            let mut attn = Array4::<f64>::zeros((b, nh, s, s));
            let mut ctx = Array3::<f64>::zeros((b, s, d));
            for bi in 0..b {
                for hi in 0..nh {
                    let cols = hi * dk..(hi + 1) * dk;
                    let qh = q.slice(s![bi, .., cols.clone()]);
                    let kh = k.slice(s![bi, .., cols.clone()]);
                    let vh = v.slice(s![bi, .., cols.clone()]);
                    let mut scores = qh.dot(&kh.t());
                    scores.mapv_inplace(|x| x * scale);
                    for j in 0..s {
                        if batch.mask[[bi, j]] == 0.0 {
                            scores.column_mut(j).fill(f64::NEG_INFINITY);
                        }
                    }
                    let probs = crate::tensor::softmax_rows(&scores);
                    ctx.slice_mut(s![bi, .., cols]).assign(&probs.dot(&vh));
                    attn.slice_mut(s![bi, hi, .., ..]).assign(&probs);
                }
            }

            let mut attn_out = matmul3(&ctx, &layer.wo);
            let drop_attn = match (&mut dropout_rng, cfg.dropout_rate > 0.0) {
                (Some(rng), true) => {
                    let m = self.dropout_mask((b, s, d), rng);
                    attn_out *= &m;
                    Some(m)
                }
                _ => None,
            };

            let r1 = h + &attn_out;
            let (h1, ln1_xhat, ln1_inv_std) = layer_norm(&r1, &layer.ln1_g, &layer.ln1_b);

            let mut z = matmul3(&h1, &layer.w1);
            z += &layer.b1;
            let a = z.mapv(|x| x.max(0.0));
            let mut f = matmul3(&a, &layer.w2);
            f += &layer.b2;
            let drop_ffn = match (&mut dropout_rng, cfg.dropout_rate > 0.0) {
                (Some(rng), true) => {
                    let m = self.dropout_mask((b, s, d), rng);
                    f *= &m;
                    Some(m)
                }
                _ => None,
            };

            let r2 = &h1 + &f;
            let (h2, ln2_xhat, ln2_inv_std) = layer_norm(&r2, &layer.ln2_g, &layer.ln2_b);

            if !all_finite3(&h2) {
                return Err(Error::NonFiniteActivation { layer: li + 1 });
            }
            if want_cache {
                caches.push(LayerCache {
                    q,
                    k,
                    v,
                    attn,
                    ctx,
                    drop_attn,
                    ln1_xhat,
                    ln1_inv_std,
                    h1,
                    z,
                    drop_ffn,
                    ln2_xhat,
                    ln2_inv_std,
                });
            }
            states.push(h2);
        }

        Ok((
            HiddenStates { layers: states },
            want_cache.then_some(EncoderCache { layers: caches }),
        ))
    }

    /// Backpropagate gradients entering at any subset of hidden states.
    /// `d_states[i]` is the gradient on `HiddenStates.layers[i]`.
    pub fn backward(
        &self,
        batch: &TokenBatch,
        states: &HiddenStates,
        cache: &EncoderCache,
        d_states: Vec<Option<Array3<f64>>>,
    ) -> EncoderGrads {
        let cfg = &self.cfg;
        let p = &self.params;
        assert_eq!(d_states.len(), cfg.n_layers + 1, "one gradient slot per hidden state");
        let (b, s) = batch.ids.dim();
        let d = cfg.d_model;
        let nh = cfg.n_heads;
        let dk = cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();

        let mut grads = EncoderParams::zeros(cfg);
        let mut carried: Option<Array3<f64>> = None;
        let mut d_states = d_states;

        for li in (0..cfg.n_layers).rev() {
            let mut d_h2 = match (carried.take(), d_states[li + 1].take()) {
                (Some(mut c), Some(seed)) => {
                    c += &seed;
                    c
                }
                (Some(c), None) => c,
                (None, Some(seed)) => seed,
                (None, None) => continue,
            };
            let layer = &p.layers[li];
            let lc = &cache.layers[li];
            let g = &mut grads.layers[li];
            let h = &states.layers[li];

            // LayerNorm 2.
            let (d_r2, d_g2, d_b2) =
                layer_norm_backward(&d_h2, &lc.ln2_xhat, &lc.ln2_inv_std, &layer.ln2_g);
            g.ln2_g += &d_g2;
            g.ln2_b += &d_b2;
            d_h2 = d_r2;

            // FFN branch.
            let mut d_f = d_h2.clone();
            if let Some(m) = &lc.drop_ffn {
                d_f *= m;
            }
            let mut d_h1 = d_h2;
            let a = lc.z.mapv(|x| x.max(0.0));
            g.w2 += &flat2(&a).t().dot(&flat2(&d_f));
            g.b2 += &d_f.sum_axis(Axis(0)).sum_axis(Axis(0));
            let mut d_z = matmul3(&d_f, &layer.w2.t().to_owned());
            ndarray::Zip::from(&mut d_z).and(&lc.z).for_each(|dz, &z| {
                if z <= 0.0 {
                    *dz = 0.0;
                }
            });
            g.w1 += &flat2(&lc.h1).t().dot(&flat2(&d_z));
            g.b1 += &d_z.sum_axis(Axis(0)).sum_axis(Axis(0));
            d_h1 += &matmul3(&d_z, &layer.w1.t().to_owned());

            // LayerNorm 1.
            let (d_r1, d_g1, d_b1) =
                layer_norm_backward(&d_h1, &lc.ln1_xhat, &lc.ln1_inv_std, &layer.ln1_g);
            g.ln1_g += &d_g1;
            g.ln1_b += &d_b1;

            // Attention branch.
            let mut d_attn_out = d_r1.clone();
            if let Some(m) = &lc.drop_attn {
                d_attn_out *= m;
            }
            let mut d_h = d_r1;
            g.wo += &flat2(&lc.ctx).t().dot(&flat2(&d_attn_out));
            let d_ctx = matmul3(&d_attn_out, &layer.wo.t().to_owned());

            let mut d_q = Array3::<f64>::zeros((b, s, d));
            let mut d_k = Array3::<f64>::zeros((b, s, d));
            let mut d_v = Array3::<f64>::zeros((b, s, d));
            for bi in 0..b {
                for hi in 0..nh {
                    let cols = hi * dk..(hi + 1) * dk;
                    let a_h = lc.attn.slice(s![bi, hi, .., ..]);
                    let d_ctx_h = d_ctx.slice(s![bi, .., cols.clone()]);
                    let v_h = lc.v.slice(s![bi, .., cols.clone()]);
                    let q_h = lc.q.slice(s![bi, .., cols.clone()]);
                    let k_h = lc.k.slice(s![bi, .., cols.clone()]);

                    let d_a = d_ctx_h.dot(&v_h.t());
                    d_v.slice_mut(s![bi, .., cols.clone()])
                        .assign(&a_h.t().dot(&d_ctx_h));

                    // softmax backward, row-wise
                    let rowsum = (&d_a * &a_h).sum_axis(Axis(1));
                    let mut d_scores = &d_a - &rowsum.insert_axis(Axis(1));
                    d_scores *= &a_h;
                    d_scores.mapv_inplace(|x| x * scale);

                    d_q.slice_mut(s![bi, .., cols.clone()])
                        .assign(&d_scores.dot(&k_h));
                    d_k.slice_mut(s![bi, .., cols]).assign(&d_scores.t().dot(&q_h));
                }
            }

            g.wq += &flat2(h).t().dot(&flat2(&d_q));
            g.wk += &flat2(h).t().dot(&flat2(&d_k));
            g.wv += &flat2(h).t().dot(&flat2(&d_v));
            d_h += &matmul3(&d_q, &layer.wq.t().to_owned());
            d_h += &matmul3(&d_k, &layer.wk.t().to_owned());
            d_h += &matmul3(&d_v, &layer.wv.t().to_owned());

            carried = Some(d_h);
        }

        // Embedding gradients.
        let d_x0 = match (carried, d_states[0].take()) {
            (Some(mut c), Some(seed)) => {
                c += &seed;
                Some(c)
            }
            (Some(c), None) => Some(c),
            (None, Some(seed)) => Some(seed),
            (None, None) => None,
        };
        if let Some(d_x0) = d_x0 {
            for i in 0..b {
                for j in 0..s {
                    let id = batch.ids[[i, j]];
                    let dv = d_x0.slice(s![i, j, ..]);
                    let mut tok = grads.tok_emb.row_mut(id);
                    tok += &dv;
                    let mut pos = grads.pos_emb.row_mut(j);
                    pos += &dv;
                }
            }
        }
        grads
    }
}

/// Per-position layer normalisation. Returns (output, xhat, inv_std).
pub fn layer_norm(
    x: &Array3<f64>,
    gain: &Array1<f64>,
    bias: &Array1<f64>,
) -> (Array3<f64>, Array3<f64>, Array2<f64>) {
    let (b, s, d) = x.dim();
    let mut xhat = Array3::<f64>::zeros((b, s, d));
    let mut inv_std = Array2::<f64>::zeros((b, s));
    let mut out = Array3::<f64>::zeros((b, s, d));
    for bi in 0..b {
        for si in 0..s {
            let row = x.slice(s![bi, si, ..]);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv_std[[bi, si]] = istd;
            for di in 0..d {
                let xh = (row[di] - mean) * istd;
                xhat[[bi, si, di]] = xh;
                out[[bi, si, di]] = gain[di] * xh + bias[di];
            }
        }
    }
    (out, xhat, inv_std)
}

fn layer_norm_backward(
    d_out: &Array3<f64>,
    xhat: &Array3<f64>,
    inv_std: &Array2<f64>,
    gain: &Array1<f64>,
) -> (Array3<f64>, Array1<f64>, Array1<f64>) {
    let (b, s, d) = d_out.dim();
    let mut d_x = Array3::<f64>::zeros((b, s, d));
    let mut d_g = Array1::<f64>::zeros(d);
    let mut d_b = Array1::<f64>::zeros(d);
    for bi in 0..b {
        for si in 0..s {
            let dy = d_out.slice(s![bi, si, ..]);
            let xh = xhat.slice(s![bi, si, ..]);
            let istd = inv_std[[bi, si]];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for di in 0..d {
                let dxh = dy[di] * gain[di];
                mean_dxhat += dxh;
                mean_dxhat_xhat += dxh * xh[di];
                d_g[di] += dy[di] * xh[di];
                d_b[di] += dy[di];
            }
            mean_dxhat /= d as f64;
            mean_dxhat_xhat /= d as f64;
            for di in 0..d {
                let dxh = dy[di] * gain[di];
                d_x[[bi, si, di]] = istd * (dxh - mean_dxhat - xh[di] * mean_dxhat_xhat);
            }
        }
    }
    (d_x, d_g, d_b)
}

/// Collapse one layer's token states to a single vector per example.
pub fn pool(
    states: &HiddenStates,
    layer: usize,
    mask: &Array2<f64>,
    strategy: Pooling,
) -> Array2<f64> {
    let x = states.layer(layer);
    let (b, s, d) = x.dim();
    match strategy {
        Pooling::FirstToken => x.slice(s![.., 0, ..]).to_owned(),
        Pooling::Mean => {
            let mut out = Array2::<f64>::zeros((b, d));
            for bi in 0..b {
                let count: f64 = (0..s).map(|j| mask[[bi, j]]).sum();
                let count = count.max(1.0);
                for j in 0..s {
                    if mask[[bi, j]] > 0.0 {
                        let row = x.slice(s![bi, j, ..]);
                        let mut acc = out.row_mut(bi);
                        acc += &row;
                    }
                }
                let mut acc = out.row_mut(bi);
                acc /= count;
            }
            out
        }
    }
}

/// Scatter a pooled-feature gradient back to token positions.
pub fn pool_backward(
    d_pooled: &Array2<f64>,
    mask: &Array2<f64>,
    seq_len: usize,
    strategy: Pooling,
) -> Array3<f64> {
    let (b, d) = d_pooled.dim();
    let mut out = Array3::<f64>::zeros((b, seq_len, d));
    match strategy {
        Pooling::FirstToken => {
            out.slice_mut(s![.., 0, ..]).assign(d_pooled);
        }
        Pooling::Mean => {
            for bi in 0..b {
                let count: f64 = (0..seq_len).map(|j| mask[[bi, j]]).sum();
                let count = count.max(1.0);
                for j in 0..seq_len {
                    if mask[[bi, j]] > 0.0 {
                        let scaled = d_pooled.row(bi).mapv(|v| v / count);
                        out.slice_mut(s![bi, j, ..]).assign(&scaled);
                    }
                }
            }
        }
    }
    out
}

/// Copy source weights into a fresh target encoder.
///
/// `Full` copies everything and freezes nothing. `Partial(k)` copies
/// everything and freezes the embeddings plus the bottom `k` layers, which
/// are then excluded from gradient updates during adaptation.
pub fn init_target_from_source(source: &Encoder, mode: ShareMode) -> Result<(Encoder, FrozenLayers)> {
    let n = source.cfg.n_layers;
    let frozen = match mode {
        ShareMode::Full => FrozenLayers::none(n),
        ShareMode::Partial(k) => {
            if k > n {
                return Err(Error::InvalidArgument(format!(
                    "partial sharing depth {k} exceeds n_layers {n}"
                )));
            }
            FrozenLayers {
                embeddings: true,
                layers: (0..n).map(|i| i < k).collect(),
            }
        }
    };
    Ok((source.clone(), frozen))
}

/// Both encoders of an adversarial pair must agree on architecture.
pub fn verify_compatible(a: &EncoderConfig, b: &EncoderConfig) -> Result<()> {
    if a != b {
        return Err(Error::CheckpointMismatch(format!(
            "encoder configs differ: {a:?} vs {b:?}"
        )));
    }
    Ok(())
}
