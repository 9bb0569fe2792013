use serde::{Deserialize, Serialize};
use serde_json::json;

use super::backend::{unsupported, Capability, ModelBackend};
use super::report::EvalReport;
use super::rouge::{rouge_l, rouge_n, RougeScore};
use super::{EvalError, Result};
use crate::corpus::TokenChunk;
use crate::model::GenerationParams;
use crate::tokenizer::{ByteTokenizer, BOS_ID};

/// Corpus-level perplexity: one exp of the mean NLL over every predicted
/// position of every chunk.
pub fn perplexity(backend: &dyn ModelBackend, chunks: &[TokenChunk], dataset: &str) -> Result<EvalReport> {
    if !backend.supports(Capability::LogProbs) {
        return Err(unsupported(backend, Capability::LogProbs));
    }
    if chunks.is_empty() {
        return Err(EvalError::Contract("perplexity needs at least one chunk".into()));
    }
    let (mut total, mut count) = (0.0f64, 0usize);
    for c in chunks {
        if c.ids.len() < 2 {
            return Err(EvalError::Contract("chunks need at least 2 tokens".into()));
        }
        let lp = backend.continuation_logprobs(&c.ids[..1], &c.ids[1..])?;
        total -= lp.iter().sum::<f64>();
        count += lp.len();
    }
    let nll = total / count as f64;
    let mut r = EvalReport::new("perplexity", dataset, backend.id());
    r.samples = chunks.len();
    r.set("mean_nll", nll);
    r.set("perplexity", nll.exp());
    r.set("tokens", count as f64);
    r.checked()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryItem {
    pub id: String,
    pub input: String,
    #[serde(default)]
    pub query: Option<String>,
    pub reference: String,
    #[serde(default)]
    pub candidate: Option<String>,
}

/// Query first, then as much of the input's tail as the budget allows.
pub fn summary_prompt(item: &SummaryItem, budget: Option<usize>) -> String {
    let head = item.query.as_deref().map(|q| format!("{q}\n")).unwrap_or_default();
    let Some(budget) = budget else {
        return format!("{head}{}", item.input);
    };
    // Byte tokenizer: one token per byte.
    let room = budget.saturating_sub(head.len());
    let input = &item.input;
    let mut start = input.len().saturating_sub(room);
    while !input.is_char_boundary(start) {
        start += 1;
    }
    let mut prompt = format!("{head}{}", &input[start..]);
    while prompt.len() > budget {
        // Query alone is over budget: keep its tail too.
        let mut cut = prompt.len() - budget;
        while !prompt.is_char_boundary(cut) {
            cut += 1;
        }
        prompt = prompt[cut..].to_string();
    }
    prompt
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryScores {
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

pub fn score_summary(candidate: &str, reference: &str) -> SummaryScores {
    SummaryScores {
        rouge1: rouge_n(candidate, reference, 1).expect("n = 1"),
        rouge2: rouge_n(candidate, reference, 2).expect("n = 2"),
        rouge_l: rouge_l(candidate, reference),
    }
}

/// Mean ROUGE-1/2/L F1 over items. Missing candidates are generated; a
/// failed generation is recorded and the item left out of the means.
pub fn summarization_eval(
    backend: &dyn ModelBackend,
    items: &[SummaryItem],
    params: &GenerationParams,
    dataset: &str,
) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(EvalError::Contract("summarization needs at least one item".into()));
    }
    let needs_generation = items.iter().any(|i| i.candidate.is_none());
    if needs_generation && !backend.supports(Capability::Generation) {
        return Err(unsupported(backend, Capability::Generation));
    }
    let budget = backend.prompt_budget(params.max_new_tokens);
    let mut sums = [0.0f64; 3];
    let mut done = 0usize;
    let mut failures = Vec::new();
    for item in items {
        let candidate = match &item.candidate {
            Some(c) => c.clone(),
            None => match backend.generate(&summary_prompt(item, budget), params) {
                Ok(c) => c,
                Err(e @ (EvalError::Remote { .. } | EvalError::Model(_))) => {
                    failures.push(format!("{}: {e}", item.id));
                    continue;
                }
                Err(e) => return Err(e),
            },
        };
        let s = score_summary(&candidate, &item.reference);
        sums[0] += s.rouge1.f1;
        sums[1] += s.rouge2.f1;
        sums[2] += s.rouge_l.f1;
        done += 1;
    }
    let mut r = EvalReport::new("rouge", dataset, backend.id());
    r.samples = done;
    r.failures = failures;
    r.set("completed", done as f64);
    r.set("failed", (items.len() - done) as f64);
    if done == 0 {
        r.status = super::ReportStatus::Failed {
            error: "every item failed".into(),
        };
        return Ok(r);
    }
    r.set("rouge1_f1", sums[0] / done as f64);
    r.set("rouge2_f1", sums[1] / done as f64);
    r.set("rougeL_f1", sums[2] / done as f64);
    r.config = json!({"generation": params});
    r.checked()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McItem {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub gold: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    None,
    PerToken,
}

/// Index of the best score; the lowest index wins ties.
pub fn mc_predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Summed log-probability of each choice given the question, and the
/// per-token average of the same.
pub fn mc_scores(backend: &dyn ModelBackend, item: &McItem) -> Result<(Vec<f64>, Vec<f64>)> {
    let tok = ByteTokenizer::new();
    let mut context = vec![BOS_ID];
    context.extend(tok.encode(&item.question));
    let mut raw = Vec::with_capacity(item.choices.len());
    let mut per_token = Vec::with_capacity(item.choices.len());
    for choice in &item.choices {
        let cont = tok.encode(&format!(" {choice}"));
        let lps = backend.continuation_logprobs(&context, &cont)?;
        // A running mean keeps equal per-token scores exactly equal, so a
        // uniform model ties on every choice.
        let mut mean = 0.0;
        for (i, lp) in lps.iter().enumerate() {
            mean += (lp - mean) / (i + 1) as f64;
        }
        raw.push(lps.iter().sum());
        per_token.push(mean);
    }
    Ok((raw, per_token))
}

/// Accuracy under both normalizations; `accuracy` follows `normalization`.
pub fn mc_accuracy(
    backend: &dyn ModelBackend,
    items: &[McItem],
    normalization: Normalization,
    dataset: &str,
) -> Result<EvalReport> {
    if !backend.supports(Capability::LogProbs) {
        return Err(unsupported(backend, Capability::LogProbs));
    }
    if items.is_empty() {
        return Err(EvalError::Contract("multiple choice needs at least one item".into()));
    }
    let bad: Vec<String> = items
        .iter()
        .filter(|i| i.choices.len() < 2 || i.gold >= i.choices.len())
        .map(|i| format!("{}: needs >= 2 choices and a valid gold index", i.id))
        .collect();
    if !bad.is_empty() {
        return Err(EvalError::Validation(bad));
    }
    let (mut raw_hits, mut norm_hits) = (0usize, 0usize);
    for item in items {
        let (raw, per_token) = mc_scores(backend, item)?;
        raw_hits += usize::from(mc_predict(&raw) == item.gold);
        norm_hits += usize::from(mc_predict(&per_token) == item.gold);
    }
    let n = items.len() as f64;
    let mut r = EvalReport::new("multiple_choice", dataset, backend.id());
    r.samples = items.len();
    r.set("accuracy_raw", raw_hits as f64 / n);
    r.set("accuracy_per_token", norm_hits as f64 / n);
    r.set(
        "accuracy",
        match normalization {
            Normalization::None => raw_hits,
            Normalization::PerToken => norm_hits,
        } as f64
            / n,
    );
    r.config = json!({"normalization": normalization});
    r.checked()
}
