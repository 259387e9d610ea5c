//! Hookable language models.
//!
//! [`LanguageModel`] is the adapter contract every backend implements: a
//! hooked forward pass returning per-position logits and residual-stream
//! capture at a block boundary. [`ToyModel`] is the built-in deterministic
//! backend used by tests, fixtures and the CLI.

mod backward;
pub(crate) mod io;
mod tokenizer;
mod toy;

use std::sync::Mutex;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{Gradients, ResidualLoss};
pub use io::{load_model, save_model};
pub use tokenizer::{WordTokenizer, UNK_TOKEN};
pub use toy::{Block, LayerNorm, ToyModel, LN_EPS};

pub type TokenId = u32;

fn default_max_seq_len() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub seed: u64,
    /// Rows of the learned positional embedding.
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
    /// Hidden width of each MLP; `None` means `4 * d_model`.
    #[serde(default)]
    pub d_mlp: Option<usize>,
}

impl ModelConfig {
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, vocab_size: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            vocab_size,
            seed,
            max_seq_len: default_max_seq_len(),
            d_mlp: None,
        }
    }

    pub fn d_mlp(&self) -> usize {
        self.d_mlp.unwrap_or(4 * self.d_model)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("d_mlp", self.d_mlp()),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(Error::Config("vocab_size exceeds token id range".into()));
        }
        Ok(())
    }
}

/// Residual-stream vectors captured after one block, one row per position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub values: Array2<f32>,
    pub layer: usize,
    pub token_ids: Vec<TokenId>,
}

impl ActivationBatch {
    pub fn new(values: Array2<f32>, layer: usize, token_ids: Vec<TokenId>) -> Result<Self> {
        if values.nrows() != token_ids.len() {
            return Err(Error::shape(
                "activation rows",
                &[token_ids.len()],
                &[values.nrows()],
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("activation batch has non-finite entries".into()));
        }
        Ok(Self {
            values,
            layer,
            token_ids,
        })
    }

    pub fn n_positions(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

type HookFn<'a> = dyn Fn(&mut ActivationBatch) + Send + Sync + 'a;

/// A transform applied to the residual stream right after block `layer`.
pub struct HookPoint<'a> {
    pub layer: usize,
    pub transform: Box<HookFn<'a>>,
}

impl<'a> HookPoint<'a> {
    pub fn new(layer: usize, f: impl Fn(&mut ActivationBatch) + Send + Sync + 'a) -> Self {
        Self {
            layer,
            transform: Box::new(f),
        }
    }

    pub fn identity(layer: usize) -> Self {
        Self::new(layer, |_| {})
    }
}

impl std::fmt::Debug for HookPoint<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HookPoint").field("layer", &self.layer).finish()
    }
}

/// Adapter contract for hookable autoregressive models.
///
/// Hooks registered at layer `l` observe (and may rewrite) the residual
/// stream after block `l`; the forward pass continues from the rewritten
/// values. Implementations must be immutable under `forward_hooked`.
pub trait LanguageModel: Sync {
    fn n_layers(&self) -> usize;
    fn d_model(&self) -> usize;
    fn vocab_size(&self) -> usize;

    /// Logits `[tokens.len() × vocab_size]`.
    fn forward_hooked(&self, tokens: &[TokenId], hooks: &[HookPoint<'_>]) -> Result<Array2<f32>>;

    fn forward(&self, tokens: &[TokenId]) -> Result<Array2<f32>> {
        self.forward_hooked(tokens, &[])
    }

    fn capture_activations(&self, tokens: &[TokenId], layer: usize) -> Result<ActivationBatch> {
        check_layer(layer, self.n_layers())?;
        let slot: Mutex<Option<ActivationBatch>> = Mutex::new(None);
        let hook = HookPoint::new(layer, |batch: &mut ActivationBatch| {
            *slot.lock().unwrap() = Some(batch.clone());
        });
        self.forward_hooked(tokens, std::slice::from_ref(&hook))?;
        drop(hook);
        Ok(slot.into_inner().unwrap().unwrap_or_else(|| ActivationBatch {
            values: Array2::zeros((0, self.d_model())),
            layer,
            token_ids: Vec::new(),
        }))
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn n_layers(&self) -> usize {
        (**self).n_layers()
    }
    fn d_model(&self) -> usize {
        (**self).d_model()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn forward_hooked(&self, tokens: &[TokenId], hooks: &[HookPoint<'_>]) -> Result<Array2<f32>> {
        (**self).forward_hooked(tokens, hooks)
    }
    fn capture_activations(&self, tokens: &[TokenId], layer: usize) -> Result<ActivationBatch> {
        (**self).capture_activations(tokens, layer)
    }
}

pub(crate) fn check_layer(layer: usize, n_layers: usize) -> Result<()> {
    if layer >= n_layers {
        return Err(Error::Range {
            what: "layer",
            index: layer,
            limit: n_layers,
        });
    }
    Ok(())
}

/// `log softmax(row)[target]`, accumulated in f64.
pub fn log_prob(row: ArrayView1<'_, f32>, target: TokenId) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    row[target as usize] as f64 - max - sum.ln()
}

/// Sum of log-probabilities of `continuation` given `prompt`, each token
/// conditioned on the prompt and the continuation tokens before it.
pub fn answer_loglikelihood<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64> {
    if continuation.is_empty() {
        return Err(Error::Argument("continuation must be non-empty".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Argument(
            "prompt must be non-empty to condition the first continuation token".into(),
        ));
    }
    let vocab = model.vocab_size();
    if let Some(&t) = continuation.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::Range {
            what: "token id",
            index: t as usize,
            limit: vocab,
        });
    }
    let mut full = Vec::with_capacity(prompt.len() + continuation.len());
    full.extend_from_slice(prompt);
    full.extend_from_slice(continuation);
    let logits = model.forward(&full)?;
    Ok(continuation
        .iter()
        .enumerate()
        .map(|(j, &tok)| log_prob(logits.row(prompt.len() + j - 1), tok))
        .sum())
}

/// Argmax over a logit row, ties resolved to the lowest token id.
pub fn argmax_token(row: ArrayView1<'_, f32>) -> TokenId {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy continuation of `prompt` for `n_tokens` steps.
pub fn greedy_decode<M: LanguageModel + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    n_tokens: usize,
) -> Result<Vec<TokenId>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let logits = model.forward(&seq)?;
        let Some(last) = logits.nrows().checked_sub(1) else {
            return Err(Error::Argument("cannot decode from an empty prompt".into()));
        };
        let next = argmax_token(logits.row(last));
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}
