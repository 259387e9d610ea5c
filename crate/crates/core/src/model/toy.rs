//! Deterministic pre-norm decoder-only transformer.
//!
//! Forward math, per sequence of `n` tokens:
//!
//! ```text
//! h      = tok_emb[t] + pos_emb[p]
//! block: h += attn(LN1(h)) ; h += W_out·gelu(W_in·LN2(h) + b_in) + b_out
//! logits = LN_f(h) · unembed
//! ```
//!
//! Attention is causal multi-head with heads taking contiguous `d_head`
//! slices of Q/K/V, scores scaled by `1/sqrt(d_head)`, and no biases. GELU
//! is the tanh approximation. LayerNorm uses biased variance and `LN_EPS`.
//!
//! Initialization draws every parameter from [`crate::rng::seeded`] in the
//! order `tok_emb, pos_emb, blocks[0..], ln_f, unembed` (block order:
//! `ln1, w_q, w_k, w_v, w_o, ln2, w_in, b_in, w_out, b_out`), each tensor
//! row-major, each element `symmetric_f32(scale)`. Scales: token embedding
//! 1, positional embedding 0.1, weight matrices `1/sqrt(fan_in)`. LayerNorm
//! gains start at 1 and all biases at 0; those consume no random draws.

use ndarray::{s, Array1, Array2, Axis};

use super::{check_layer, ActivationBatch, HookPoint, LanguageModel, ModelConfig, TokenId};
use crate::error::{Error, Result};
use crate::rng;

pub const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f32>,
    pub bias: Array1<f32>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gain: Array1::ones(d),
            bias: Array1::zeros(d),
        }
    }

    pub(crate) fn forward(&self, x: &Array2<f32>) -> (Array2<f32>, LnCache) {
        let d = x.ncols() as f32;
        let mut normed = Array2::zeros(x.raw_dim());
        let mut inv_std = Array1::zeros(x.nrows());
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
            let r = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = r;
            for (o, &v) in normed.row_mut(i).iter_mut().zip(row.iter()) {
                *o = (v - mean) * r;
            }
        }
        let out = &normed * &self.gain + &self.bias;
        (out, LnCache { normed, inv_std })
    }
}

pub(crate) struct LnCache {
    pub normed: Array2<f32>,
    pub inv_std: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    /// `[d_model × d_model]`, applied as `x · w_q`.
    pub w_q: Array2<f32>,
    pub w_k: Array2<f32>,
    pub w_v: Array2<f32>,
    pub w_o: Array2<f32>,
    pub ln2: LayerNorm,
    /// `[d_model × d_mlp]`.
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    /// `[d_mlp × d_model]`.
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

pub(crate) struct BlockCache {
    pub ln1: LnCache,
    pub attn_in: Array2<f32>,
    pub q: Array2<f32>,
    pub k: Array2<f32>,
    pub v: Array2<f32>,
    pub probs: Vec<Array2<f32>>,
    pub z: Array2<f32>,
    pub ln2: LnCache,
    pub mlp_in: Array2<f32>,
    pub pre: Array2<f32>,
    pub act: Array2<f32>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl Block {
    pub(crate) fn forward(&self, h: Array2<f32>, n_heads: usize) -> (Array2<f32>, BlockCache) {
        let n = h.nrows();
        let d = h.ncols();
        let d_head = d / n_heads;
        let scale = 1.0 / (d_head as f32).sqrt();

        let (attn_in, ln1) = self.ln1.forward(&h);
        let q = attn_in.dot(&self.w_q);
        let k = attn_in.dot(&self.w_k);
        let v = attn_in.dot(&self.w_v);
        let mut z = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let cols = s![.., head * d_head..(head + 1) * d_head];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|x| x * scale);
            causal_softmax(&mut scores);
            z.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let mid = &h + &z.dot(&self.w_o);

        let (mlp_in, ln2) = self.ln2.forward(&mid);
        let pre = mlp_in.dot(&self.w_in) + &self.b_in;
        let act = pre.mapv(gelu);
        let out = &mid + &(act.dot(&self.w_out) + &self.b_out);

        let cache = BlockCache {
            ln1,
            attn_in,
            q,
            k,
            v,
            probs,
            z,
            ln2,
            mlp_in,
            pre,
            act,
        };
        (out, cache)
    }
}

/// Row-wise softmax over the lower triangle; masked entries become exactly 0.
fn causal_softmax(scores: &mut Array2<f32>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let max = row
            .iter()
            .take(i + 1)
            .fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.iter_mut().take(i + 1).for_each(|v| *v /= sum);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// `[vocab_size × d_model]`.
    pub tok_emb: Array2<f32>,
    /// `[max_seq_len × d_model]`.
    pub pos_emb: Array2<f32>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    /// `[d_model × vocab_size]`.
    pub unembed: Array2<f32>,
}

impl ToyModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(config.seed);
        let d = config.d_model;
        let d_mlp = config.d_mlp();
        let mut draw = |rows: usize, cols: usize, scale: f32| {
            Array2::from_shape_simple_fn((rows, cols), || rng::symmetric_f32(&mut rng, scale))
        };
        let tok_emb = draw(config.vocab_size, d, 1.0);
        let pos_emb = draw(config.max_seq_len, d, 0.1);
        let mat = 1.0 / (d as f32).sqrt();
        let mlp = 1.0 / (d_mlp as f32).sqrt();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                w_q: draw(d, d, mat),
                w_k: draw(d, d, mat),
                w_v: draw(d, d, mat),
                w_o: draw(d, d, mat),
                ln2: LayerNorm::identity(d),
                w_in: draw(d, d_mlp, mat),
                b_in: Array1::zeros(d_mlp),
                w_out: draw(d_mlp, d, mlp),
                b_out: Array1::zeros(d),
            })
            .collect();
        let unembed = draw(d, config.vocab_size, mat);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            ln_f: LayerNorm::identity(d),
            unembed,
        })
    }

    /// All-zero weights with identity LayerNorms, for hand-built fixtures.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let d_mlp = config.d_mlp();
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::identity(d),
                w_q: Array2::zeros((d, d)),
                w_k: Array2::zeros((d, d)),
                w_v: Array2::zeros((d, d)),
                w_o: Array2::zeros((d, d)),
                ln2: LayerNorm::identity(d),
                w_in: Array2::zeros((d, d_mlp)),
                b_in: Array1::zeros(d_mlp),
                w_out: Array2::zeros((d_mlp, d)),
                b_out: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            tok_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_seq_len, d)),
            blocks,
            ln_f: LayerNorm::identity(d),
            unembed: Array2::zeros((d, config.vocab_size)),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Range {
                what: "sequence length",
                index: tokens.len(),
                limit: self.config.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Range {
                what: "token id",
                index: t as usize,
                limit: self.config.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[TokenId]) -> Array2<f32> {
        let mut h = Array2::zeros((tokens.len(), self.config.d_model));
        for (p, &t) in tokens.iter().enumerate() {
            let mut row = h.row_mut(p);
            row.assign(&self.tok_emb.row(t as usize));
            row += &self.pos_emb.row(p);
        }
        h
    }

    /// Runs blocks `0..=last` and returns the residual stream with caches.
    pub(crate) fn forward_cached(
        &self,
        tokens: &[TokenId],
        last: usize,
    ) -> Result<(Array2<f32>, Vec<BlockCache>)> {
        self.check_tokens(tokens)?;
        check_layer(last, self.config.n_layers)?;
        let mut h = self.embed(tokens);
        let mut caches = Vec::with_capacity(last + 1);
        for block in &self.blocks[..=last] {
            let (out, cache) = block.forward(h, self.config.n_heads);
            caches.push(cache);
            h = out;
        }
        Ok((h, caches))
    }

    /// Residual stream after block `layer`, without hooks.
    pub fn residual(&self, tokens: &[TokenId], layer: usize) -> Result<Array2<f32>> {
        Ok(self.forward_cached(tokens, layer)?.0)
    }

    fn run_hooks(
        h: Array2<f32>,
        layer: usize,
        tokens: &[TokenId],
        hooks: &[HookPoint<'_>],
    ) -> Array2<f32> {
        let mut active = hooks.iter().filter(|hp| hp.layer == layer).peekable();
        if active.peek().is_none() {
            return h;
        }
        let mut batch = ActivationBatch {
            values: h,
            layer,
            token_ids: tokens.to_vec(),
        };
        for hook in active {
            (hook.transform)(&mut batch);
        }
        batch.values
    }
}

impl LanguageModel for ToyModel {
    fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn forward_hooked(&self, tokens: &[TokenId], hooks: &[HookPoint<'_>]) -> Result<Array2<f32>> {
        self.check_tokens(tokens)?;
        for hook in hooks {
            check_layer(hook.layer, self.config.n_layers)?;
        }
        let mut h = self.embed(tokens);
        for (layer, block) in self.blocks.iter().enumerate() {
            h = block.forward(h, self.config.n_heads).0;
            h = Self::run_hooks(h, layer, tokens, hooks);
            if h.nrows() != tokens.len() || h.ncols() != self.config.d_model {
                return Err(Error::shape(
                    format!("hook output at layer {layer}"),
                    &[tokens.len(), self.config.d_model],
                    h.shape(),
                ));
            }
        }
        let (normed, _) = self.ln_f.forward(&h);
        Ok(normed.dot(&self.unembed))
    }

    fn capture_activations(&self, tokens: &[TokenId], layer: usize) -> Result<ActivationBatch> {
        let values = self.residual(tokens, layer)?;
        ActivationBatch::new(values, layer, tokens.to_vec())
    }
}

/// Column sums, used by bias gradients.
pub(crate) fn col_sum(x: &Array2<f32>) -> Array1<f32> {
    x.sum_axis(Axis(0))
}
