use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EvalError, Result};
use crate::lora::AdapterSet;
use crate::model::{self, GenerationParams, Strategy, TransformerWeights};
use crate::retry::RetryPolicy;
use crate::tokenizer::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    LogProbs,
    Generation,
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Capability::LogProbs => "log-probabilities",
            Capability::Generation => "generation",
        })
    }
}

/// A model under evaluation.
pub trait ModelBackend {
    fn id(&self) -> &str;

    fn supports(&self, capability: Capability) -> bool;

    /// `log p(continuation[i] | context, continuation[..i])` for each `i`.
    fn continuation_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>>;

    /// Generated continuation of `prompt` (without the prompt itself).
    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String>;

    /// Prompt tokens that fit alongside `max_new_tokens`; `None` if unbounded.
    fn prompt_budget(&self, _max_new_tokens: usize) -> Option<usize> {
        None
    }
}

pub(crate) fn unsupported(backend: &dyn ModelBackend, capability: Capability) -> EvalError {
    EvalError::Unsupported {
        backend: backend.id().to_string(),
        capability,
    }
}

/// A checkpoint held in memory, optionally with adapters.
pub struct LocalBackend {
    pub id: String,
    pub weights: TransformerWeights,
    pub adapters: Option<AdapterSet>,
}

impl LocalBackend {
    pub fn new(id: impl Into<String>, weights: TransformerWeights, adapters: Option<AdapterSet>) -> Result<Self> {
        if let Some(a) = &adapters {
            a.check_compatible(&weights)?;
        }
        Ok(Self {
            id: id.into(),
            weights,
            adapters,
        })
    }
}

impl ModelBackend for LocalBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports(&self, _capability: Capability) -> bool {
        true
    }

    /// Keeps the whole continuation and as much trailing context as fits.
    fn continuation_logprobs(&self, context: &[TokenId], continuation: &[TokenId]) -> Result<Vec<f64>> {
        if context.is_empty() {
            return Err(EvalError::Contract("scoring needs at least one context token".into()));
        }
        if continuation.is_empty() {
            return Ok(Vec::new());
        }
        let ctx = self.weights.config.context_length;
        // logits cover ids[..len-1], so len may be ctx + 1
        if continuation.len() > ctx {
            return Err(EvalError::Contract(format!(
                "continuation of {} tokens exceeds context length {ctx}",
                continuation.len()
            )));
        }
        let keep = (ctx + 1 - continuation.len()).min(context.len());
        let mut ids = context[context.len() - keep..].to_vec();
        ids.extend_from_slice(continuation);
        let all = model::sequence_logprobs(&self.weights, &ids, self.adapters.as_ref())?;
        Ok(all[all.len() - continuation.len()..].to_vec())
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String> {
        let full = model::generate(&self.weights, prompt, params, self.adapters.as_ref())?;
        Ok(full[prompt.len()..].to_string())
    }

    fn prompt_budget(&self, max_new_tokens: usize) -> Option<usize> {
        Some(self.weights.config.context_length.saturating_sub(max_new_tokens).max(1))
    }
}

pub const CHAT_TOKEN_ENV: &str = "CHAT_API_TOKEN";

/// Chat-completion endpoint: POST `{model, messages, temperature}`, read
/// `choices[0].message.content`. Generation only.
#[derive(Debug, Clone)]
pub struct RemoteChatBackend {
    pub id: String,
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: String,
}

impl RemoteChatBackend {
    /// Bearer token from `CHAT_API_TOKEN` when set.
    pub fn new(id: impl Into<String>, url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            url: url.into(),
            model: model.into(),
            token: std::env::var(CHAT_TOKEN_ENV).ok().filter(|t| !t.is_empty()),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }

    fn attempt(&self, agent: &ureq::Agent, body: &serde_json::Value) -> std::result::Result<String, (bool, String)> {
        let mut req = agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        match req.send_json(body) {
            Ok(mut resp) => {
                let parsed: ChatResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| (false, format!("bad response body: {e}")))?;
                parsed
                    .choices
                    .into_iter()
                    .next()
                    .map(|c| c.message.content)
                    .ok_or_else(|| (false, "response has no choices".to_string()))
            }
            Err(ureq::Error::StatusCode(code)) => Err((code == 429 || code >= 500, format!("HTTP {code}"))),
            Err(e) => Err((true, e.to_string())),
        }
    }
}

impl ModelBackend for RemoteChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports(&self, capability: Capability) -> bool {
        capability == Capability::Generation
    }

    fn continuation_logprobs(&self, _context: &[TokenId], _continuation: &[TokenId]) -> Result<Vec<f64>> {
        Err(unsupported(self, Capability::LogProbs))
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<String> {
        let temperature = match params.strategy {
            Strategy::Greedy => 0.0,
            Strategy::Temperature { temperature } | Strategy::TopK { temperature, .. } => temperature,
        };
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
        });
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&agent, &body) {
                Ok(text) => return Ok(text),
                Err((true, msg)) if attempts <= self.retry.max_retries => {
                    let delay = self.retry.delay(attempts);
                    log::warn!("{}: request failed ({msg}); retrying in {delay:?}", self.id);
                    thread::sleep(delay);
                }
                Err((_, message)) => {
                    return Err(EvalError::Remote {
                        backend: self.id.clone(),
                        attempts,
                        message,
                    })
                }
            }
        }
    }
}
