//! Decoder-only causal transformer.
//!
//! Pre-norm blocks with learned absolute positions and an LM head tied to the
//! token embedding. Linear weights are stored `out × in` and applied as
//! `x · Wᵀ`, so a LoRA update `W₀ + (α/r)·B·A` merges without transposes.

mod checkpoint;
mod generate;

pub use checkpoint::{load_checkpoint, save_checkpoint, weights_from_bytes, weights_to_bytes};
pub use generate::{generate, GenerationParams, Strategy};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::lora::{AdapterSet, Projection};
use crate::tensor::{Gradients, Tape, Tensor, TensorError, Var};
use crate::tokenizer::{TokenId, TokenizerError, BYTE_VOCAB_SIZE};

pub const INIT_STD: f32 = 0.02;
pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds context length {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("{0}")]
    Contract(String),
    #[error("adapter set does not match model: {0}")]
    AdapterMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub seed: u64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB_SIZE,
            context_length: 512,
            model_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_hidden: 256,
            seed: 0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
            ("model_dim", self.model_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.context_length < 2 {
            return Err(ModelError::InvalidConfig("context_length must be at least 2".into()));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_in_w: Tensor,
    pub mlp_in_b: Tensor,
    pub mlp_out_w: Tensor,
    pub mlp_out_b: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.mlp_in_w,
            &self.mlp_in_b,
            &self.mlp_out_w,
            &self.mlp_out_b,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.mlp_in_w,
            &mut self.mlp_in_b,
            &mut self.mlp_out_w,
            &mut self.mlp_out_b,
        ]
    }

    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Query => &self.wq,
            Projection::Value => &self.wv,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Query => &mut self.wq,
            Projection::Value => &mut self.wv,
        }
    }
}

const LAYER_PARAM_NAMES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "ln2.gain",
    "ln2.bias",
    "mlp.in.weight",
    "mlp.in.bias",
    "mlp.out.weight",
    "mlp.out.bias",
];

/// Full parameter set of the model. The LM head reuses `token_embedding`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    pub config: TransformerConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

/// Deterministic initialization: N(0, 0.02²) for matrices and embeddings,
/// unit gains and zero biases for norms and MLP biases.
pub fn init_model(config: &TransformerConfig) -> Result<TransformerWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (v, c, d, h) = (
        config.vocab_size,
        config.context_length,
        config.model_dim,
        config.mlp_hidden,
    );
    let token_embedding = Tensor::randn(&[v, d], INIT_STD, &mut rng);
    let position_embedding = Tensor::randn(&[c, d], INIT_STD, &mut rng);
    let layers = (0..config.num_layers)
        .map(|_| LayerWeights {
            ln1_gain: Tensor::ones(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::randn(&[d, d], INIT_STD, &mut rng),
            wk: Tensor::randn(&[d, d], INIT_STD, &mut rng),
            wv: Tensor::randn(&[d, d], INIT_STD, &mut rng),
            wo: Tensor::randn(&[d, d], INIT_STD, &mut rng),
            ln2_gain: Tensor::ones(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            mlp_in_w: Tensor::randn(&[h, d], INIT_STD, &mut rng),
            mlp_in_b: Tensor::zeros(&[h]),
            mlp_out_w: Tensor::randn(&[d, h], INIT_STD, &mut rng),
            mlp_out_b: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(TransformerWeights {
        config: config.clone(),
        token_embedding,
        position_embedding,
        layers,
        final_gain: Tensor::ones(&[d]),
        final_bias: Tensor::zeros(&[d]),
    })
}

/// Parameters registered on a tape, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundWeights {
    vars: Vec<Var>,
    num_layers: usize,
}

impl BoundWeights {
    fn token_embedding(&self) -> Var {
        self.vars[0]
    }
    fn position_embedding(&self) -> Var {
        self.vars[1]
    }
    fn layer(&self, l: usize, slot: usize) -> Var {
        self.vars[2 + l * 12 + slot]
    }
    fn final_norm(&self) -> (Var, Var) {
        let base = 2 + self.num_layers * 12;
        (self.vars[base], self.vars[base + 1])
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adds gradients from `grads` into the matching weight tensors.
    pub fn accumulate(&self, grads: &Gradients, weights: &mut TransformerWeights) -> Result<()> {
        for (var, tensor) in self.vars.iter().zip(weights.params_mut()) {
            grads.accumulate_into(*var, tensor)?;
        }
        Ok(())
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// Final normalized hidden states, `t × d`.
    pub hidden: Var,
    /// Next-token logits, `t × V`, when requested.
    pub logits: Option<Var>,
}

/// Dropout applied to adapter inputs; `None` at evaluation time.
pub struct AdapterDropout<'r> {
    pub rng: &'r mut dyn rand::RngCore,
}

impl TransformerWeights {
    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Canonical `(name, tensor)` list; this order defines the checkpoint layout.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.token_embedding),
            ("pos_emb".to_string(), &self.position_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_PARAM_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("ln_f.gain".to_string(), &self.final_gain));
        out.push(("ln_f.bias".to_string(), &self.final_bias));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Registers every weight on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundWeights {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundWeights {
            vars,
            num_layers: self.layers.len(),
        }
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::Contract("forward needs at least one token".into()));
        }
        if ids.len() > self.config.context_length {
            return Err(ModelError::ContextOverflow {
                len: ids.len(),
                max: self.config.context_length,
            });
        }
        Ok(())
    }

    /// Forward pass on a tape using previously bound weights and adapters.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundWeights,
        adapters: Option<(&AdapterSet, &crate::lora::BoundAdapters)>,
        ids: &[TokenId],
        mut dropout: Option<AdapterDropout<'_>>,
        want_logits: bool,
    ) -> Result<ForwardVars> {
        self.check_ids(ids)?;
        let t = ids.len();
        let heads = self.config.num_heads;
        let tok = tape.embedding(bound.token_embedding(), ids)?;
        let pos = tape.slice_rows(bound.position_embedding(), 0, t)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..self.layers.len() {
            let a = tape.layer_norm(x, bound.layer(l, 0), bound.layer(l, 1), LAYER_NORM_EPS)?;
            let mut q = tape.matmul_nt(a, bound.layer(l, 2))?;
            let k = tape.matmul_nt(a, bound.layer(l, 3))?;
            let mut v = tape.matmul_nt(a, bound.layer(l, 4))?;
            if let Some((set, vars)) = adapters {
                for (proj, out) in [(Projection::Query, &mut q), (Projection::Value, &mut v)] {
                    if let Some(idx) = set.index_of(l, proj) {
                        let rng = dropout.as_mut().map(|d| &mut *d.rng);
                        let delta = set.adapters()[idx].delta_on_tape(tape, vars.pair(idx), a, rng)?;
                        *out = tape.add(*out, delta)?;
                    }
                }
            }
            let att = tape.causal_attention(q, k, v, heads)?;
            let proj = tape.matmul_nt(att, bound.layer(l, 5))?;
            x = tape.add(x, proj)?;
            let m = tape.layer_norm(x, bound.layer(l, 6), bound.layer(l, 7), LAYER_NORM_EPS)?;
            let hdn = tape.matmul_nt(m, bound.layer(l, 8))?;
            let hdn = tape.add_row(hdn, bound.layer(l, 9))?;
            let hdn = tape.gelu(hdn)?;
            let out = tape.matmul_nt(hdn, bound.layer(l, 10))?;
            let out = tape.add_row(out, bound.layer(l, 11))?;
            x = tape.add(x, out)?;
        }
        let (g, b) = bound.final_norm();
        let hidden = tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        let logits = if want_logits {
            Some(tape.matmul_nt(hidden, bound.token_embedding())?)
        } else {
            None
        };
        Ok(ForwardVars { hidden, logits })
    }

    /// Next-token logits (`t × V`) for `ids`, evaluation mode.
    pub fn forward(&self, ids: &[TokenId], adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let bound_adapters = adapters.map(|a| a.bind(&mut tape, false));
        let pair = adapters.zip(bound_adapters.as_ref());
        if let Some(set) = adapters {
            set.check_compatible(self)?;
        }
        let out = self.forward_on_tape(&mut tape, &bound, pair, ids, None, true)?;
        Ok(tape.value(out.logits.expect("logits requested")).clone())
    }

    /// Final hidden states (`t × d`), evaluation mode.
    pub fn hidden_states(&self, ids: &[TokenId], adapters: Option<&AdapterSet>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let bound_adapters = adapters.map(|a| a.bind(&mut tape, false));
        if let Some(set) = adapters {
            set.check_compatible(self)?;
        }
        let out = self.forward_on_tape(&mut tape, &bound, adapters.zip(bound_adapters.as_ref()), ids, None, false)?;
        Ok(tape.value(out.hidden).clone())
    }
}

/// Mean next-token negative log-likelihood of a chunk: position `i` predicts
/// `chunk[i + 1]` from `chunk[..=i]`, averaged over the `t − 1` predictions.
pub fn chunk_nll(
    weights: &TransformerWeights,
    chunk: &[TokenId],
    adapters: Option<&AdapterSet>,
) -> Result<f32> {
    if chunk.len() < 2 {
        return Err(ModelError::Contract(format!(
            "chunk needs at least 2 tokens, got {}",
            chunk.len()
        )));
    }
    let logits = weights.forward(&chunk[..chunk.len() - 1], adapters)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, &chunk[1..])?;
    Ok(tape.value(loss).item())
}

/// Records the chunk loss on `tape` (for training).
pub fn chunk_nll_on_tape(
    weights: &TransformerWeights,
    tape: &mut Tape,
    bound: &BoundWeights,
    adapters: Option<(&AdapterSet, &crate::lora::BoundAdapters)>,
    chunk: &[TokenId],
    dropout: Option<AdapterDropout<'_>>,
) -> Result<Var> {
    if chunk.len() < 2 {
        return Err(ModelError::Contract(format!(
            "chunk needs at least 2 tokens, got {}",
            chunk.len()
        )));
    }
    let out = weights.forward_on_tape(tape, bound, adapters, &chunk[..chunk.len() - 1], dropout, true)?;
    Ok(tape.cross_entropy(out.logits.expect("logits requested"), &chunk[1..])?)
}

/// Per-position `log p(ids[i] | ids[..i])` for `i ≥ 1`, computed in f64 from
/// one forward pass.
pub fn sequence_logprobs(
    weights: &TransformerWeights,
    ids: &[TokenId],
    adapters: Option<&AdapterSet>,
) -> Result<Vec<f64>> {
    if ids.len() < 2 {
        return Ok(Vec::new());
    }
    let logits = weights.forward(&ids[..ids.len() - 1], adapters)?;
    Ok(ids[1..]
        .iter()
        .enumerate()
        .map(|(i, &target)| crate::tensor::log_softmax_at(logits.row(i), target as usize))
        .collect())
}

/// Fills every parameter with fresh N(0, std²) draws; for gradient checks at
/// points away from initialization.
pub fn randomize_weights<R: Rng + ?Sized>(weights: &mut TransformerWeights, std: f32, rng: &mut R) {
    for t in weights.params_mut() {
        let fresh = Tensor::randn(t.shape(), std, rng);
        t.data_mut().copy_from_slice(fresh.data());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::ByteTokenizer;

    fn small() -> TransformerConfig {
        TransformerConfig {
            context_length: 32,
            model_dim: 16,
            num_heads: 2,
            mlp_hidden: 32,
            seed: 3,
            ..TransformerConfig::default()
        }
    }

    #[test]
    fn divisibility_rule() {
        let ok = TransformerConfig {
            model_dim: 64,
            num_heads: 4,
            ..Default::default()
        };
        assert!(init_model(&ok).is_ok());
        let bad = TransformerConfig {
            model_dim: 65,
            num_heads: 4,
            ..Default::default()
        };
        assert!(matches!(init_model(&bad), Err(ModelError::InvalidConfig(_))));
        let short = TransformerConfig {
            context_length: 1,
            ..Default::default()
        };
        assert!(init_model(&short).is_err());
    }

    #[test]
    fn same_seed_same_bits() {
        let a = init_model(&small()).unwrap();
        let b = init_model(&small()).unwrap();
        assert_eq!(weights_to_bytes(&a), weights_to_bytes(&b));
        let c = init_model(&TransformerConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(weights_to_bytes(&a), weights_to_bytes(&c));
    }

    #[test]
    fn embedding_mean_is_near_zero() {
        let w = init_model(&TransformerConfig::default()).unwrap();
        let data = w.token_embedding.data();
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * INIT_STD as f64 / n.sqrt(), "mean {mean}");
        assert!(w.final_gain.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn single_token_shape() {
        let w = init_model(&small()).unwrap();
        let logits = w.forward(&[5], None).unwrap();
        assert_eq!(logits.shape(), &[1, BYTE_VOCAB_SIZE]);
        assert!(logits.all_finite());
    }

    #[test]
    fn context_overflow() {
        let w = init_model(&small()).unwrap();
        let ids = vec![4; 33];
        assert!(matches!(
            w.forward(&ids, None),
            Err(ModelError::ContextOverflow { len: 33, max: 32 })
        ));
    }

    #[test]
    fn causal_prefix_is_bit_identical() {
        let w = init_model(&small()).unwrap();
        let tok = ByteTokenizer::new();
        let ids = tok.encode("oil prices rise");
        let base = w.forward(&ids, None).unwrap();
        for j in 0..ids.len() {
            let mut changed = ids.clone();
            changed[j] = if changed[j] == 100 { 101 } else { 100 };
            let out = w.forward(&changed, None).unwrap();
            let v = base.cols();
            assert!(base.data()[..j * v]
                .iter()
                .zip(&out.data()[..j * v])
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn chunk_nll_examples() {
        let w = init_model(&TransformerConfig::default()).unwrap();
        let tok = ByteTokenizer::new();
        let ids = tok.encode("The energy sector rallied as Brent crude climbed.");
        let nll = chunk_nll(&w, &ids, None).unwrap();
        assert!((nll - (BYTE_VOCAB_SIZE as f32).ln()).abs() < 0.5, "{nll}");
        assert!(chunk_nll(&w, &ids[..1], None).is_err());

        // Independent per-position -log p sum from the raw logits.
        let logits = w.forward(&ids[..ids.len() - 1], None).unwrap();
        let mut total = 0.0f64;
        for (i, &target) in ids[1..].iter().enumerate() {
            let row: Vec<f64> = logits.row(i).iter().map(|&v| v as f64).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[target as usize].exp() / z).ln();
        }
        let oracle = total / (ids.len() - 1) as f64;
        assert!((nll as f64 - oracle).abs() < 1e-5);
    }
}
