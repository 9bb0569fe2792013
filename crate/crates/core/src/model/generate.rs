use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelError, Result, TransformerWeights};
use crate::lora::AdapterSet;
use crate::tokenizer::{ByteTokenizer, TokenId, BOS_ID, EOS_ID};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Temperature { temperature: f32 },
    TopK { k: usize, temperature: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 64,
            strategy: Strategy::Greedy,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        match self.strategy {
            Strategy::Greedy => Ok(()),
            Strategy::Temperature { temperature } | Strategy::TopK { temperature, .. }
                if !(temperature > 0.0 && temperature.is_finite()) =>
            {
                Err(ModelError::Contract(format!("temperature must be > 0, got {temperature}")))
            }
            Strategy::TopK { k: 0, .. } => Err(ModelError::Contract("top-k needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample(logits: &[f32], strategy: Strategy, rng: &mut ChaCha8Rng) -> usize {
    let (temperature, k) = match strategy {
        Strategy::Greedy => return argmax(logits),
        Strategy::Temperature { temperature } => (temperature, logits.len()),
        Strategy::TopK { k, temperature } => (temperature, k.min(logits.len())),
    };
    let mut order: Vec<usize> = (0..logits.len()).collect();
    // Stable sort keeps index order among equal logits.
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
    order.truncate(k);
    let max = logits[order[0]] as f64;
    let weights: Vec<f64> = order
        .iter()
        .map(|&i| ((logits[i] as f64 - max) / temperature as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in order.iter().zip(&weights) {
        if u < w {
            return i;
        }
        u -= w;
    }
    *order.last().expect("k >= 1")
}

/// Continues `prompt` token by token. The returned text includes the prompt.
///
/// Stops at end-of-sequence or after `max_new_tokens`. Once the sequence no
/// longer fits, only the most recent `context_length − 1` tokens are fed.
pub fn generate(
    weights: &TransformerWeights,
    prompt: &str,
    params: &GenerationParams,
    adapters: Option<&AdapterSet>,
) -> Result<String> {
    params.validate()?;
    let tok = ByteTokenizer::new();
    let mut ids: Vec<TokenId> = tok.encode(prompt);
    let ctx = weights.config.context_length;
    if ids.len() > ctx {
        return Err(ModelError::ContextOverflow { len: ids.len(), max: ctx });
    }
    if params.max_new_tokens == 0 {
        return Ok(prompt.to_string());
    }
    if ids.is_empty() {
        ids.push(BOS_ID);
    }
    let prompt_len = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..params.max_new_tokens {
        let window = if ids.len() >= ctx { &ids[ids.len() - (ctx - 1)..] } else { &ids[..] };
        let logits = weights.forward(window, adapters)?;
        let next = sample(logits.row(logits.rows() - 1), params.strategy, &mut rng) as TokenId;
        if next == EOS_ID {
            break;
        }
        ids.push(next);
    }
    let continuation = tok.decode(&ids[prompt_len..])?;
    Ok(format!("{prompt}{continuation}"))
}
