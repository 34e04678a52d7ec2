//! Small decoder-only transformer with full activation capture.
//!
//! Blocks are pre-norm: `x' = x + attn(LN1(x))`, `x'' = x' + mlp(LN2(x'))`, so
//! every layer output decomposes exactly into the previous residual plus the
//! attention and MLP sub-layer outputs. Logits are `E x^L` with an untied
//! decoder matrix `E` and no final normalization, which makes the logit lens
//! at the last layer identical to the model output.
//!
//! Forward and backward passes are written by hand over flat row-major
//! buffers. Besides parameter gradients, the backward pass can report the
//! gradient of a loss with respect to every attention probability.

mod backward;
pub mod checkpoint;
mod forward;
pub mod linalg;
pub mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backward::AttnGradPoint;
pub use forward::Trace;
pub use linalg::Scalar;
use linalg::{argmax, log_sum_exp};
use params::Layout;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(u32),
    #[error("position {pos} outside sequence of length {len}")]
    PositionOutOfRange { pos: usize, len: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default sized for single-core training.
    pub fn small(vocab_size: usize, max_seq: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 6,
            n_heads: 4,
            d_model: 128,
            d_ff: 512,
            vocab_size,
            max_seq,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(ModelError::Config("empty vocabulary or context".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Perturbation added to one head's post-softmax attention pattern.
#[derive(Clone, Debug)]
pub struct AttnDelta<T> {
    pub layer: usize,
    pub head: usize,
    /// `seq x seq`, row = query position.
    pub delta: Vec<T>,
}

/// Interventions applied during a forward pass.
#[derive(Clone, Debug)]
pub struct Hooks<T> {
    /// Positions whose key vectors are zeroed in every head of every layer
    /// before attention scores are computed.
    pub key_zero: Vec<usize>,
    /// `(layer, head)` pairs whose value vectors are zeroed.
    pub zero_values: Vec<(usize, usize)>,
    pub attn_delta: Vec<AttnDelta<T>>,
}

impl<T> Default for Hooks<T> {
    fn default() -> Self {
        Hooks {
            key_zero: Vec::new(),
            zero_values: Vec::new(),
            attn_delta: Vec::new(),
        }
    }
}

impl<T> Hooks<T> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn key_zero(positions: impl IntoIterator<Item = usize>) -> Self {
        let mut key_zero: Vec<usize> = positions.into_iter().collect();
        key_zero.sort_unstable();
        key_zero.dedup();
        Hooks {
            key_zero,
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.key_zero.is_empty() && self.zero_values.is_empty() && self.attn_delta.is_empty()
    }
}

/// How the logit lens treats a hidden vector before the decoder matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LensNorm {
    /// `E h` on the raw vector.
    #[default]
    Raw,
    /// `E LN(h)` with a parameter-free layer norm.
    Normalized,
}

/// Model weights with their layout.
#[derive(Clone, Debug)]
pub struct Transformer<T> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
}

impl<T: Scalar> Transformer<T> {
    /// Freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = params::init_params(&config, &layout);
        Ok(Transformer {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: ModelConfig, params: Vec<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.len {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, found {}",
                layout.len,
                params.len()
            )));
        }
        Ok(Transformer {
            config,
            layout,
            params,
        })
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|x| U::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_seq,
            });
        }
        if let Some(&t) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(ModelError::UnknownToken(t));
        }
        Ok(())
    }

    /// Logits at every position plus the activation trace.
    pub fn forward(&self, tokens: &[u32], hooks: &Hooks<T>) -> Result<Trace<T>, ModelError> {
        self.check_tokens(tokens)?;
        Ok(self.forward_batch(&[tokens], hooks))
    }

    /// Cross-entropy `-log p[gold]` of the prediction made at `position`.
    pub fn loss_at(
        &self,
        tokens: &[u32],
        position: usize,
        gold: u32,
        hooks: &Hooks<T>,
    ) -> Result<T, ModelError> {
        if position >= tokens.len() {
            return Err(ModelError::PositionOutOfRange {
                pos: position,
                len: tokens.len(),
            });
        }
        let trace = self.forward(tokens, hooks)?;
        Ok(cross_entropy(trace.logits_at(position), gold as usize))
    }

    /// Gradient of the loss at `position` with respect to each layer's
    /// attention pattern; entry `[layer][head * n * n + i * n + j]`.
    pub fn grad_attention(
        &self,
        tokens: &[u32],
        position: usize,
        gold: u32,
        point: AttnGradPoint,
        hooks: &Hooks<T>,
    ) -> Result<(Trace<T>, Vec<Vec<T>>), ModelError> {
        if position >= tokens.len() {
            return Err(ModelError::PositionOutOfRange {
                pos: position,
                len: tokens.len(),
            });
        }
        let trace = self.forward(tokens, hooks)?;
        let v = self.config.vocab_size;
        let mut dlogits = vec![T::zero(); tokens.len() * v];
        cross_entropy_grad(
            trace.logits_at(position),
            gold as usize,
            &mut dlogits[position * v..][..v],
        );
        let grads = self.backward(&trace, &dlogits, hooks, None, Some(point));
        Ok((trace, grads.expect("attention gradients requested")))
    }

    /// Decoder scores `E h` for a hidden vector.
    pub fn decode(&self, h: &[T], norm: LensNorm) -> Vec<T> {
        let d = self.config.d_model;
        assert_eq!(h.len(), d, "hidden vector width");
        let normed;
        let h = match norm {
            LensNorm::Raw => h,
            LensNorm::Normalized => {
                let ones = vec![T::one(); d];
                let zeros = vec![T::zero(); d];
                let mut out = vec![T::zero(); d];
                let (mut m, mut s) = ([T::zero()], [T::zero()]);
                linalg::layer_norm(h, d, &ones, &zeros, &mut out, &mut m, &mut s);
                normed = out;
                &normed
            }
        };
        self.params[self.layout.unembed.clone()]
            .chunks_exact(d)
            .map(|row| row.iter().zip(h).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    /// `argmax(E h)`, ties broken toward the lowest token id.
    pub fn logit_lens(&self, h: &[T], norm: LensNorm) -> u32 {
        argmax(&self.decode(h, norm)) as u32
    }
}

/// `-log softmax(logits)[gold]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], gold: usize) -> T {
    log_sum_exp(logits) - logits[gold]
}

/// Writes `softmax(logits) - onehot(gold)` into `out`.
pub(crate) fn cross_entropy_grad<T: Scalar>(logits: &[T], gold: usize, out: &mut [T]) {
    out.copy_from_slice(logits);
    linalg::softmax_in_place(out);
    out[gold] -= T::one();
}

#[cfg(test)]
mod tests;
