//! Evaluation: perplexity, ROUGE, multiple-choice log-likelihood accuracy,
//! human preference tallies, and side-by-side backend comparison.

mod backend;
mod preferences;
mod report;
mod rouge;
mod tasks;

pub use backend::{Capability, LocalBackend, ModelBackend, RemoteChatBackend, CHAT_TOKEN_ENV};
pub use preferences::{aggregate_preferences, load_votes_csv, PreferenceSummary, PreferenceVote};
pub use report::{render_table, write_reports, EvalReport, ReportStatus};
pub use rouge::{rouge_l, rouge_n, rouge_tokens, RougeScore};
pub use tasks::{
    mc_accuracy, mc_predict, mc_scores, perplexity, score_summary, summarization_eval, summary_prompt, McItem,
    Normalization, SummaryItem, SummaryScores,
};

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::corpus::TokenChunk;
use crate::model::{GenerationParams, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("backend {backend} does not support {capability}")]
    Unsupported { backend: String, capability: Capability },
    #[error("{0}")]
    Contract(String),
    #[error("validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
    #[error("remote backend {backend} failed after {attempts} attempt(s): {message}")]
    Remote {
        backend: String,
        attempts: usize,
        message: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Reads one JSON value per non-blank line.
pub fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Which metrics [`compare_backends`] runs.
#[derive(Debug, Clone, Default)]
pub struct EvalSuite {
    pub perplexity: Option<(String, Vec<TokenChunk>)>,
    pub summarization: Option<(String, Vec<SummaryItem>)>,
    pub multiple_choice: Option<(String, Vec<McItem>)>,
    pub normalization: Normalization,
    pub generation: GenerationParams,
}

impl EvalSuite {
    pub fn metric_count(&self) -> usize {
        [
            self.perplexity.is_some(),
            self.summarization.is_some(),
            self.multiple_choice.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }
}

fn settle(metric: &str, dataset: &str, backend: &dyn ModelBackend, outcome: Result<EvalReport>) -> EvalReport {
    match outcome {
        Ok(r) => r,
        Err(e) => {
            let mut r = EvalReport::new(metric, dataset, backend.id());
            r.status = match e {
                EvalError::Unsupported { capability, .. } => ReportStatus::Skipped {
                    reason: format!("backend lacks {capability}"),
                },
                other => ReportStatus::Failed {
                    error: other.to_string(),
                },
            };
            r
        }
    }
}

/// Runs every configured metric on every backend: one report per
/// (backend, metric). Capability gaps become SKIPPED rows and other errors
/// FAILED rows; neither stops the comparison.
pub fn compare_backends(backends: &[&dyn ModelBackend], suite: &EvalSuite) -> Result<Vec<EvalReport>> {
    if backends.len() < 2 {
        return Err(EvalError::Contract("comparison needs at least two backends".into()));
    }
    if suite.metric_count() == 0 {
        return Err(EvalError::Contract("comparison suite has no metrics".into()));
    }
    let mut out = Vec::new();
    for &b in backends {
        if let Some((name, chunks)) = &suite.perplexity {
            out.push(settle("perplexity", name, b, perplexity(b, chunks, name)));
        }
        if let Some((name, items)) = &suite.summarization {
            out.push(settle("rouge", name, b, summarization_eval(b, items, &suite.generation, name)));
        }
        if let Some((name, items)) = &suite.multiple_choice {
            out.push(settle("multiple_choice", name, b, mc_accuracy(b, items, suite.normalization, name)));
        }
    }
    Ok(out)
}
