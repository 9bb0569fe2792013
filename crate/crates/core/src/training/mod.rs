//! Fine-tuning loops: next-token training on token chunks and ordinal
//! regression on labeled headlines.

mod adamw;
mod classifier;
mod history;

pub use adamw::{adamw_step, AdamWConfig, AdamWState, StepStats};
pub use classifier::{
    decode_score, evaluate_classifier, headline_ids, predict_bucket, raw_score, train_classifier,
    ClassifierMetrics, Prediction, RegressionHead, HEAD_BIAS, HEAD_WEIGHT,
};
pub use history::{append_run_log, EpochRecord, TrainHistory};

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenChunk;
use crate::lora::{self, AdapterSet, BoundAdapters};
use crate::model::{self, AdapterDropout, BoundWeights, ModelError, TransformerWeights};
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training examples")]
    EmptyData,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("non-finite loss {loss} at epoch {epoch}, example {example}; gradient norms: {grad_norms:?}")]
    NonFinite {
        epoch: usize,
        example: usize,
        loss: f64,
        grad_norms: Vec<(String, f64)>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<crate::tensor::TensorError> for TrainError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

impl TrainError {
    fn is_non_finite(&self) -> bool {
        matches!(
            self,
            TrainError::NonFiniteGradient
                | TrainError::NonFinite { .. }
                | TrainError::Model(ModelError::Tensor(crate::tensor::TensorError::NonFinite { .. }))
        )
    }
}

/// Which tensors the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// Adapter factors (and a head, if any); the base stays frozen.
    #[default]
    Adapters,
    /// Every base weight as well, for training a base model from scratch.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Write a checkpoint every n epochs (0 = never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop once an epoch's mean loss falls below this value.
    pub stop_below: Option<f64>,
    pub target: TrainTarget,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            stop_below: None,
            target: TrainTarget::Adapters,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return fail("weight decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.clip_norm >= 0.0) {
            return fail("eps must be positive and clip norm non-negative");
        }
        if self.checkpoint_every > 0 && self.checkpoint_dir.is_none() {
            return fail("checkpoint_every needs a checkpoint directory");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
        }
    }
}

/// Mutable view of everything a run may touch.
pub(crate) struct Trainable<'a> {
    pub weights: &'a mut TransformerWeights,
    pub adapters: &'a mut AdapterSet,
    pub head: Option<&'a mut RegressionHead>,
    pub target: TrainTarget,
}

/// Tape handles for one example.
pub(crate) struct Bound {
    pub weights: BoundWeights,
    pub adapters: BoundAdapters,
    pub head: Option<(Var, Var)>,
}

impl Trainable<'_> {
    pub(crate) fn bind(&self, tape: &mut Tape) -> Bound {
        let full = self.target == TrainTarget::Full;
        Bound {
            weights: self.weights.bind(tape, full),
            adapters: self.adapters.bind(tape, true),
            head: self
                .head
                .as_ref()
                .map(|h| (tape.param(h.weight.clone()), tape.param(h.bias.clone()))),
        }
    }

    fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        if self.target == TrainTarget::Full {
            bound.weights.accumulate(grads, self.weights)?;
        }
        bound.adapters.accumulate(grads, self.adapters)?;
        if let (Some(head), Some((w, b))) = (self.head.as_deref_mut(), bound.head) {
            grads.accumulate_into(w, &mut head.weight)?;
            grads.accumulate_into(b, &mut head.bias)?;
        }
        Ok(())
    }

    /// Optimizer parameter list, in a fixed order.
    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        if self.target == TrainTarget::Full {
            let names: Vec<String> = self.weights.named_params().into_iter().map(|(n, _)| n).collect();
            out.extend(names.into_iter().zip(self.weights.params_mut()));
        }
        let names: Vec<String> = self.adapters.named_params().into_iter().map(|(n, _)| n).collect();
        out.extend(names.into_iter().zip(lora::trainable_parameters(self.adapters)));
        if let Some(head) = self.head.as_deref_mut() {
            out.push((HEAD_WEIGHT.to_string(), &mut head.weight));
            out.push((HEAD_BIAS.to_string(), &mut head.bias));
        }
        out
    }

    fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    fn grad_norms(&mut self) -> Vec<(String, f64)> {
        self.named_params_mut()
            .into_iter()
            .map(|(n, t)| {
                let norm = t.grad().map_or(0.0, |g| g.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt());
                (n, norm)
            })
            .collect()
    }

    fn save_checkpoint(&self, dir: &std::path::Path, epoch: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        if self.target == TrainTarget::Full {
            model::save_checkpoint(self.weights, &dir.join(format!("model-epoch{epoch:04}.ftlm")))?;
        }
        if !self.adapters.is_empty() || self.head.is_some() {
            let extras = self.head.as_ref().map(|h| h.named()).unwrap_or_default();
            lora::save_adapters(self.adapters, &extras, &dir.join(format!("adapters-epoch{epoch:04}.ftla")))?;
        }
        Ok(())
    }
}

/// Shared loop: per epoch, shuffle example order with the run seed, average
/// losses over each batch, step the optimizer, record the epoch mean.
pub(crate) fn run_training<F>(
    mut model: Trainable<'_>,
    n_examples: usize,
    config: &TrainConfig,
    mut example_loss: F,
) -> Result<TrainHistory>
where
    F: FnMut(&Trainable<'_>, &mut Tape, &Bound, usize, &mut ChaCha8Rng) -> Result<Var>,
{
    config.validate()?;
    if n_examples == 0 {
        return Err(TrainError::EmptyData);
    }
    model.adapters.check_compatible(model.weights)?;
    let opt = config.optimizer();
    let mut state = AdamWState::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut history = TrainHistory::default();
    model.zero_grads();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut total = 0.0f64;
        for batch in order.chunks(config.batch_size) {
            let weight = 1.0 / batch.len() as f32;
            for &example in batch {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let value = example_loss(&model, &mut tape, &bound, example, &mut dropout_rng)
                    .map(|loss| (Some(loss), tape.value(loss).item() as f64));
                let (loss, value) = match value {
                    Ok(v) => v,
                    Err(e) if e.is_non_finite() => (None, f64::NAN),
                    Err(e) => return Err(e),
                };
                let Some(loss) = loss.filter(|_| value.is_finite()) else {
                    return Err(TrainError::NonFinite {
                        epoch,
                        example,
                        loss: value,
                        grad_norms: model.grad_norms(),
                    });
                };
                total += value;
                let scaled = tape.scale(loss, weight)?;
                let grads = tape.backward(scaled)?;
                model.accumulate(&bound, &grads)?;
            }
            let mut named = model.named_params_mut();
            let mut params: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            match adamw_step(&mut params, &mut state, &opt) {
                Ok(_) => {}
                Err(TrainError::NonFiniteGradient) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        example: batch[batch.len() - 1],
                        loss: f64::NAN,
                        grad_norms: model.grad_norms(),
                    })
                }
                Err(e) => return Err(e),
            }
            model.zero_grads();
        }
        let record = EpochRecord {
            epoch,
            loss: total / n_examples as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.6} ({:.2}s)", record.loss, record.seconds);
        history.epochs.push(record);
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let dir = config.checkpoint_dir.as_deref().expect("validated");
            model.save_checkpoint(dir, epoch)?;
        }
        if config.stop_below.is_some_and(|s| record.loss < s) {
            break;
        }
    }
    Ok(history)
}

/// Next-token training over fixed-length chunks. Only adapters are updated
/// unless `config.target` is [`TrainTarget::Full`].
pub fn train_lm(
    weights: &mut TransformerWeights,
    adapters: &mut AdapterSet,
    chunks: &[TokenChunk],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if config.target == TrainTarget::Adapters && adapters.is_empty() {
        return Err(TrainError::Config("adapter training needs attached adapters".into()));
    }
    let model = Trainable {
        weights,
        adapters,
        head: None,
        target: config.target,
    };
    run_training(model, chunks.len(), config, |m, tape, bound, i, rng| {
        let dropout = Some(AdapterDropout { rng });
        Ok(model::chunk_nll_on_tape(
            m.weights,
            tape,
            &bound.weights,
            Some((&*m.adapters, &bound.adapters)),
            &chunks[i].ids,
            dropout,
        )?)
    })
}

/// Mean next-token NLL over chunks in evaluation mode (no dropout).
pub fn mean_chunk_nll(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    chunks: &[TokenChunk],
) -> Result<f64> {
    if chunks.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut total = 0.0;
    for c in chunks {
        total += model::chunk_nll(weights, &c.ids, adapters)? as f64;
    }
    Ok(total / chunks.len() as f64)
}
