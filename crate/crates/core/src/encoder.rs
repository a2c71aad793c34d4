//! Instance encoder: word + dual position embeddings, same-padded 1-D
//! convolution over the token axis, max-pool over time restricted to real
//! tokens, then ReLU. Output width is `n_filters` (230 in the default
//! configuration).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{position_rows, EmbeddingTable, IndexedInstance};
use crate::diffcore::{NodeId, ParameterStore, Role, Tape, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Encoder hyperparameters. Defaults follow the reference setup: 50-d word
/// vectors, 5-d position channels, window 3, 230 filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_word: usize,
    pub d_pos: usize,
    pub max_len: usize,
    pub window: usize,
    pub n_filters: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { d_word: 50, d_pos: 5, max_len: 128, window: 3, n_filters: 230 }
    }
}

impl EncoderConfig {
    /// Per-token input width: word channel plus both position channels.
    pub fn d_in(&self) -> usize {
        self.d_word + 2 * self.d_pos
    }

    /// Output embedding width.
    pub fn output_dim(&self) -> usize {
        self.n_filters
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_word == 0 || self.d_pos == 0 || self.n_filters == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must be >= 1".into()));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!(
                "encoder window must be odd, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

pub const WORD_EMB: &str = "enc.word_emb";
pub const POS_HEAD_EMB: &str = "enc.pos_head_emb";
pub const POS_TAIL_EMB: &str = "enc.pos_tail_emb";
pub const CONV_W: &str = "enc.conv_w";
pub const CONV_B: &str = "enc.conv_b";

/// Create the encoder parameters in a store. The word-embedding rows are
/// copied from the table (and fine-tuned during training); position rows
/// are small uniform; conv weights are Xavier-uniform.
pub fn init_encoder_params<F: Scalar>(
    store: &mut ParameterStore<F>,
    cfg: &EncoderConfig,
    table: &EmbeddingTable<F>,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    if table.dim() != cfg.d_word {
        return Err(Error::Config(format!(
            "embedding table width {} does not match encoder d_word {}",
            table.dim(),
            cfg.d_word
        )));
    }
    store.insert(
        WORD_EMB,
        Role::Encoder,
        Tensor::new(vec![table.n_rows(), cfg.d_word], table.matrix().to_vec())?,
    )?;
    let pos_rows = position_rows(cfg.max_len);
    for name in [POS_HEAD_EMB, POS_TAIL_EMB] {
        let values: Vec<F> =
            (0..pos_rows * cfg.d_pos).map(|_| F::from_f64(rng.gen_range(-0.1..0.1))).collect();
        store.insert(name, Role::Encoder, Tensor::new(vec![pos_rows, cfg.d_pos], values)?)?;
    }
    let fan_in = cfg.window * cfg.d_in();
    let limit = (6.0 / (fan_in + cfg.n_filters) as f64).sqrt();
    let conv_w: Vec<F> =
        (0..cfg.n_filters * fan_in).map(|_| F::from_f64(rng.gen_range(-limit..limit))).collect();
    store.insert(CONV_W, Role::Encoder, Tensor::new(vec![cfg.n_filters, fan_in], conv_w)?)?;
    store.insert(CONV_B, Role::Encoder, Tensor::zeros(vec![cfg.n_filters]))?;
    Ok(())
}

/// Tape handles for the encoder parameters, either trainable (`params`) or
/// held constant for the current graph (`frozen`).
#[derive(Clone, Copy, Debug)]
pub struct EncoderBinding {
    pub word_emb: NodeId,
    pub pos_head: NodeId,
    pub pos_tail: NodeId,
    pub conv_w: NodeId,
    pub conv_b: NodeId,
}

impl EncoderBinding {
    pub fn params<F: Scalar>(tape: &mut Tape<F>, store: &ParameterStore<F>) -> Result<Self> {
        Ok(EncoderBinding {
            word_emb: tape.param(store, WORD_EMB)?,
            pos_head: tape.param(store, POS_HEAD_EMB)?,
            pos_tail: tape.param(store, POS_TAIL_EMB)?,
            conv_w: tape.param(store, CONV_W)?,
            conv_b: tape.param(store, CONV_B)?,
        })
    }

    pub fn frozen<F: Scalar>(tape: &mut Tape<F>, store: &ParameterStore<F>) -> Result<Self> {
        Ok(EncoderBinding {
            word_emb: tape.frozen_param(store, WORD_EMB)?,
            pos_head: tape.frozen_param(store, POS_HEAD_EMB)?,
            pos_tail: tape.frozen_param(store, POS_TAIL_EMB)?,
            conv_w: tape.frozen_param(store, CONV_W)?,
            conv_b: tape.frozen_param(store, CONV_B)?,
        })
    }
}

/// Encode one instance to its `n_filters`-dimensional vector.
///
/// Only the real tokens are embedded and convolved (the convolution
/// zero-pads at both sentence ends), so the pooled result is invariant to
/// how much PAD follows the sentence. A degenerate zero-length instance is
/// pooled over one forced slot.
pub fn encode_instance<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &EncoderBinding,
    cfg: &EncoderConfig,
    instance: &IndexedInstance,
) -> Result<NodeId> {
    let len = instance.len.clamp(1, cfg.max_len);
    let words = tape.embed_lookup(binding.word_emb, &instance.token_ids[..len])?;
    let heads = tape.embed_lookup(binding.pos_head, &instance.head_pos_ids[..len])?;
    let tails = tape.embed_lookup(binding.pos_tail, &instance.tail_pos_ids[..len])?;
    let concat = tape.concat_cols(&[words, heads, tails])?;
    let conv = tape.conv1d_same(concat, binding.conv_w, binding.conv_b, cfg.window)?;
    let pooled = tape.max_over_time(conv)?;
    Ok(tape.relu(pooled))
}

/// Encode a batch; one embedding node per instance, in input order.
pub fn encode_batch<F: Scalar>(
    tape: &mut Tape<F>,
    binding: &EncoderBinding,
    cfg: &EncoderConfig,
    instances: &[&IndexedInstance],
) -> Result<Vec<NodeId>> {
    instances.iter().map(|inst| encode_instance(tape, binding, cfg, inst)).collect()
}
