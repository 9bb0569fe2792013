use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_training, Result, TrainConfig, TrainError, TrainHistory, Trainable};
use crate::labels::{code_to_bucket, LabeledHeadline, ReturnBucket};
use crate::lora::AdapterSet;
use crate::model::{AdapterDropout, TransformerWeights, INIT_STD};
use crate::tensor::{Tape, Tensor, Var};
use crate::tokenizer::{ByteTokenizer, TokenId, BOS_ID};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Mean-pools the final hidden states and maps them to one scalar code.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionHead {
    /// `1 × d`
    pub weight: Tensor,
    /// `[1]`
    pub bias: Tensor,
}

impl RegressionHead {
    pub fn new(model_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: Tensor::randn(&[1, model_dim], INIT_STD, &mut rng),
            bias: Tensor::zeros(&[1]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![(HEAD_WEIGHT.to_string(), &self.weight), (HEAD_BIAS.to_string(), &self.bias)]
    }

    /// Rebuilds a head from the extra tensors stored beside adapters.
    pub fn from_named(extras: Vec<(String, Tensor)>, model_dim: usize) -> Result<Self> {
        let mut weight = None;
        let mut bias = None;
        for (name, t) in extras {
            match name.as_str() {
                HEAD_WEIGHT if t.shape() == [1, model_dim] => weight = Some(t),
                HEAD_BIAS if t.shape() == [1] => bias = Some(t),
                _ => {}
            }
        }
        match (weight, bias) {
            (Some(weight), Some(bias)) => Ok(Self { weight, bias }),
            _ => Err(TrainError::Config(format!(
                "adapter file holds no regression head for width {model_dim}"
            ))),
        }
    }

    fn on_tape(tape: &mut Tape, hidden: Var, (w, b): (Var, Var)) -> Result<Var> {
        let pooled = tape.mean_rows(hidden)?;
        let out = tape.matmul_nt(pooled, w)?;
        Ok(tape.add_row(out, b)?)
    }
}

/// Begin-of-sequence followed by the headline bytes, cut to the context.
pub fn headline_ids(text: &str, context_length: usize) -> Vec<TokenId> {
    let mut ids = vec![BOS_ID];
    ids.extend(ByteTokenizer::new().encode(text));
    ids.truncate(context_length);
    ids
}

/// Squared error between the head output and each headline's bucket code.
pub fn train_classifier(
    weights: &mut TransformerWeights,
    adapters: &mut AdapterSet,
    head: &mut RegressionHead,
    dataset: &[LabeledHeadline],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    if head.weight.shape() != [1, weights.config.model_dim] {
        return Err(TrainError::Config("head width does not match model".into()));
    }
    let ctx = weights.config.context_length;
    let examples: Vec<(Vec<TokenId>, f32)> = dataset
        .iter()
        .map(|r| (headline_ids(&r.headline.text, ctx), r.bucket.code() as f32))
        .collect();
    let model = Trainable {
        weights,
        adapters,
        head: Some(head),
        target: config.target,
    };
    // Each headline is its own sequence, so no padding or masking is needed.
    run_training(model, examples.len(), config, |m, tape, bound, i, rng| {
        let (ids, code) = &examples[i];
        let out = m.weights.forward_on_tape(
            tape,
            &bound.weights,
            Some((&*m.adapters, &bound.adapters)),
            ids,
            Some(AdapterDropout { rng }),
            false,
        )?;
        let pred = RegressionHead::on_tape(tape, out.hidden, bound.head.expect("head bound"))?;
        Ok(tape.mse(pred, &[*code])?)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bucket: ReturnBucket,
    /// Unrounded head output.
    pub raw: f32,
}

/// Head output for one headline, evaluation mode.
pub fn raw_score(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    head: &RegressionHead,
    text: &str,
) -> Result<f32> {
    let ids = headline_ids(text, weights.config.context_length);
    let hidden = weights.hidden_states(&ids, adapters)?;
    let mut tape = Tape::new();
    let h = tape.constant(hidden);
    let w = tape.constant(head.weight.clone());
    let b = tape.constant(head.bias.clone());
    let out = RegressionHead::on_tape(&mut tape, h, (w, b))?;
    Ok(tape.value(out).item())
}

/// Rounds half away from zero, sends 0 to −1, clamps to ±6.
pub fn decode_score(raw: f32) -> ReturnBucket {
    code_to_bucket(raw.round() as i64)
}

pub fn predict_bucket(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    head: &RegressionHead,
    text: &str,
) -> Result<Prediction> {
    let raw = raw_score(weights, adapters, head, text)?;
    Ok(Prediction {
        bucket: decode_score(raw),
        raw,
    })
}

/// Both candidate readings of "accuracy" are reported: exact-bucket hit rate
/// and mean absolute code distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub count: usize,
    pub accuracy: f64,
    /// Mean |decoded code − true code|.
    pub mean_abs_code_error: f64,
    /// Mean |raw score − true code|.
    pub mean_abs_raw_error: f64,
    pub mse: f64,
}

pub fn evaluate_classifier(
    weights: &TransformerWeights,
    adapters: Option<&AdapterSet>,
    head: &RegressionHead,
    dataset: &[LabeledHeadline],
) -> Result<ClassifierMetrics> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let (mut hits, mut abs_code, mut abs_raw, mut sq) = (0usize, 0.0f64, 0.0f64, 0.0f64);
    for row in dataset {
        let p = predict_bucket(weights, adapters, head, &row.headline.text)?;
        let truth = row.bucket.code() as f64;
        hits += usize::from(p.bucket == row.bucket);
        abs_code += (p.bucket.code() as f64 - truth).abs();
        abs_raw += (p.raw as f64 - truth).abs();
        sq += (p.raw as f64 - truth).powi(2);
    }
    let n = dataset.len() as f64;
    Ok(ClassifierMetrics {
        count: dataset.len(),
        accuracy: hits as f64 / n,
        mean_abs_code_error: abs_code / n,
        mean_abs_raw_error: abs_raw / n,
        mse: sq / n,
    })
}
