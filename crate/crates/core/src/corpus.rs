//! Article loading, token-stream chunking and train/test splitting.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::tokenizer::{ByteTokenizer, TokenId, EOS_ID};

pub const DEFAULT_CHUNK_LEN: usize = 512;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus directory {0} does not exist")]
    MissingDirectory(PathBuf),
    #[error("no usable .txt articles found under {0}")]
    Empty(PathBuf),
    #[error("corpus has {found} tokens but at least {required} are needed for one chunk")]
    TooSmall { found: usize, required: usize },
    #[error("chunk length must be at least 2, got {0}")]
    ChunkLength(usize),
    #[error("test fraction must be strictly between 0 and 1, got {0}")]
    Fraction(f64),
    #[error("fraction split needs at least 2 articles, got {0}")]
    TooFewArticles(usize),
    #[error("date split requires dates for every article; undated: {0:?}")]
    Undated(Vec<String>),
    #[error("split leaves the training set empty")]
    EmptyTrain,
    #[error("manifest {path} line {line}: {message}")]
    Manifest {
        path: String,
        line: usize,
        message: String,
    },
    #[error("chunk file {path} line {line}: {message}")]
    ChunkFile {
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

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Article {
    /// Path relative to the corpus root, `/`-separated.
    pub source_id: String,
    pub text: String,
    pub date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenChunk {
    pub ids: Vec<TokenId>,
    /// Source ids of the articles whose tokens appear in this chunk.
    pub sources: Vec<String>,
}

/// Non-fatal problems met while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadWarning {
    Unreadable { source_id: String, reason: String },
    Blank { source_id: String },
    Duplicate { source_id: String, first: String },
}

impl std::fmt::Display for LoadWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LoadWarning::Unreadable { source_id, reason } => write!(f, "skipping {source_id}: {reason}"),
            LoadWarning::Blank { source_id } => write!(f, "skipping {source_id}: no text"),
            LoadWarning::Duplicate { source_id, first } => {
                write!(f, "skipping {source_id}: duplicate of {first}")
            }
        }
    }
}

fn relative_id(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Loads every `.txt` file below `dir` in lexicographic order of relative
/// path. Unreadable, blank and duplicate files are reported and skipped.
pub fn load_corpus_with_warnings(dir: &Path) -> Result<(Vec<Article>, Vec<LoadWarning>)> {
    if !dir.is_dir() {
        return Err(CorpusError::MissingDirectory(dir.to_path_buf()));
    }
    let mut paths: Vec<(String, PathBuf)> = Vec::new();
    let mut warnings = Vec::new();
    for entry in WalkDir::new(dir).follow_links(true) {
        match entry {
            Ok(e) if e.file_type().is_file() && e.path().extension().is_some_and(|x| x == "txt") => {
                paths.push((relative_id(dir, e.path()), e.into_path()));
            }
            Ok(_) => {}
            Err(e) => warnings.push(LoadWarning::Unreadable {
                source_id: e.path().map(|p| relative_id(dir, p)).unwrap_or_default(),
                reason: e.to_string(),
            }),
        }
    }
    paths.sort();

    let mut seen: HashMap<String, String> = HashMap::new();
    let mut articles = Vec::new();
    for (source_id, path) in paths {
        let text = match fs::read(&path).map(String::from_utf8) {
            Ok(Ok(t)) => t,
            Ok(Err(e)) => {
                warnings.push(LoadWarning::Unreadable {
                    source_id,
                    reason: format!("not UTF-8 ({e})"),
                });
                continue;
            }
            Err(e) => {
                warnings.push(LoadWarning::Unreadable {
                    source_id,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        if text.trim().is_empty() {
            warnings.push(LoadWarning::Blank { source_id });
            continue;
        }
        if let Some(first) = seen.get(&text) {
            warnings.push(LoadWarning::Duplicate {
                source_id,
                first: first.clone(),
            });
            continue;
        }
        seen.insert(text.clone(), source_id.clone());
        articles.push(Article {
            source_id,
            text,
            date: None,
        });
    }
    if articles.is_empty() {
        return Err(CorpusError::Empty(dir.to_path_buf()));
    }
    Ok((articles, warnings))
}

/// [`load_corpus_with_warnings`], logging each warning.
pub fn load_corpus(dir: &Path) -> Result<Vec<Article>> {
    let (articles, warnings) = load_corpus_with_warnings(dir)?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(articles)
}

/// Reads a `path,date` manifest (header row required) and sets article
/// dates. Entries naming unknown articles are ignored with a warning.
pub fn apply_manifest(articles: &mut [Article], manifest: &Path) -> Result<()> {
    let name = manifest.display().to_string();
    let mut reader = csv::Reader::from_path(manifest).map_err(|e| CorpusError::Manifest {
        path: name.clone(),
        line: 0,
        message: e.to_string(),
    })?;
    let mut dates = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| CorpusError::Manifest {
            path: name.clone(),
            line,
            message: e.to_string(),
        })?;
        let (Some(path), Some(date)) = (record.get(0), record.get(1)) else {
            return Err(CorpusError::Manifest {
                path: name.clone(),
                line,
                message: "expected path,date".into(),
            });
        };
        let date = NaiveDate::parse_from_str(date.trim(), "%Y-%m-%d").map_err(|e| CorpusError::Manifest {
            path: name.clone(),
            line,
            message: format!("bad date {date:?}: {e}"),
        })?;
        dates.insert(path.trim().replace('\\', "/"), date);
    }
    for a in articles.iter_mut() {
        if let Some(d) = dates.remove(&a.source_id) {
            a.date = Some(d);
        }
    }
    let mut unknown: Vec<_> = dates.into_keys().collect();
    unknown.sort();
    for u in unknown {
        log::warn!("manifest names {u}, which is not in the corpus");
    }
    Ok(())
}

/// Concatenated token stream: every article followed by one end-of-sequence
/// token.
pub fn token_stream(articles: &[Article], tokenizer: &ByteTokenizer) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(articles.iter().map(|a| a.text.len() + 1).sum());
    for a in articles {
        out.extend(tokenizer.encode(&a.text));
        out.push(EOS_ID);
    }
    out
}

/// Cuts the concatenated stream into consecutive `chunk_len` windows,
/// dropping the final partial one.
pub fn build_chunks(
    articles: &[Article],
    tokenizer: &ByteTokenizer,
    chunk_len: usize,
) -> Result<Vec<TokenChunk>> {
    if chunk_len < 2 {
        return Err(CorpusError::ChunkLength(chunk_len));
    }
    // (end offset in stream, article index) for provenance lookup.
    let mut ends = Vec::with_capacity(articles.len());
    let mut stream = Vec::new();
    for a in articles {
        stream.extend(tokenizer.encode(&a.text));
        stream.push(EOS_ID);
        ends.push(stream.len());
    }
    if stream.len() < chunk_len {
        return Err(CorpusError::TooSmall {
            found: stream.len(),
            required: chunk_len,
        });
    }
    let mut chunks = Vec::with_capacity(stream.len() / chunk_len);
    let mut article = 0;
    for (c, ids) in stream.chunks_exact(chunk_len).enumerate() {
        let (start, end) = (c * chunk_len, (c + 1) * chunk_len);
        while ends[article] <= start {
            article += 1;
        }
        let mut sources = Vec::new();
        let mut j = article;
        loop {
            sources.push(articles[j].source_id.clone());
            if ends[j] >= end {
                break;
            }
            j += 1;
        }
        chunks.push(TokenChunk {
            ids: ids.to_vec(),
            sources,
        });
    }
    Ok(chunks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitMode {
    /// Deterministic split by hash of the source id.
    Fraction(f64),
    /// Articles dated on or after the cutoff form the test set.
    Cutoff(NaiveDate),
}

fn id_hash(id: &str) -> [u8; 32] {
    Sha256::digest(id.as_bytes()).into()
}

/// Splits articles into `(train, test)`, each in original order.
pub fn split_corpus(articles: &[Article], mode: SplitMode) -> Result<(Vec<Article>, Vec<Article>)> {
    let test: HashSet<usize> = match mode {
        SplitMode::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(CorpusError::Fraction(f));
            }
            let n = articles.len();
            if n < 2 {
                return Err(CorpusError::TooFewArticles(n));
            }
            let n_test = ((f * n as f64).round() as usize).clamp(1, n - 1);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| (id_hash(&articles[i].source_id), i));
            order.into_iter().take(n_test).collect()
        }
        SplitMode::Cutoff(cutoff) => {
            let undated: Vec<String> = articles
                .iter()
                .filter(|a| a.date.is_none())
                .map(|a| a.source_id.clone())
                .collect();
            if !undated.is_empty() {
                return Err(CorpusError::Undated(undated));
            }
            (0..articles.len())
                .filter(|&i| articles[i].date.is_some_and(|d| d >= cutoff))
                .collect()
        }
    };
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, a) in articles.iter().enumerate() {
        if test.contains(&i) {
            held.push(a.clone());
        } else {
            train.push(a.clone());
        }
    }
    if train.is_empty() {
        return Err(CorpusError::EmptyTrain);
    }
    Ok((train, held))
}

/// Writes chunks as JSON lines `{"ids":[..],"sources":[..]}`.
pub fn write_chunks(path: &Path, chunks: &[TokenChunk]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for c in chunks {
        let line = serde_json::to_string(c).expect("chunk serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_chunks(path: &Path) -> Result<Vec<TokenChunk>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut chunks: Vec<TokenChunk> = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let chunk: TokenChunk = serde_json::from_str(&line).map_err(|e| CorpusError::ChunkFile {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(first) = chunks.first() {
            if first.ids.len() != chunk.ids.len() {
                return Err(CorpusError::ChunkFile {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: format!("chunk length {} differs from {}", chunk.ids.len(), first.ids.len()),
                });
            }
        }
        chunks.push(chunk);
    }
    Ok(chunks)
}
