//! Instruction sets (Q&A pairs) to chat-format JSON lines, and a validator
//! for such files.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_SYSTEM_PROMPT: &str =
    "investment research analyst chatbot that provides fundamental analysis of macro, market, sector, and equity";

/// Most chat fine-tune services refuse fewer examples than this.
pub const MIN_EXAMPLES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Philosophy,
    Methodology,
    Facts,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Philosophy, Category::Methodology, Category::Facts];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Philosophy => "philosophy",
            Category::Methodology => "methodology",
            Category::Facts => "facts",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "philosophy" => Ok(Category::Philosophy),
            "methodology" => Ok(Category::Methodology),
            "facts" | "fact" => Ok(Category::Facts),
            other => Err(format!("unknown category {other:?} (philosophy, methodology, facts)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionItem {
    pub category: Category,
    pub question: String,
    pub answer: String,
    /// Overrides the default system prompt for this item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Line in the source file, used in error messages.
    #[serde(skip)]
    pub source_line: Option<usize>,
}

impl InstructionItem {
    pub fn new(category: Category, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            category,
            question: question.into(),
            answer: answer.into(),
            system: None,
            source_line: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatExample {
    pub messages: Vec<ChatMessage>,
}

impl ChatExample {
    pub fn from_item(item: &InstructionItem, default_system: &str) -> Self {
        let system = item.system.as_deref().filter(|s| !s.trim().is_empty()).unwrap_or(default_system);
        let msg = |role, content: &str| ChatMessage {
            role,
            content: content.to_string(),
        };
        Self {
            messages: vec![
                msg(Role::System, system),
                msg(Role::User, &item.question),
                msg(Role::Assistant, &item.answer),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Encoding,
    LineEnding,
    Blank,
    Json,
    Structure,
    RoleOrder,
    EmptyContent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// 1-based.
    pub line: usize,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum InstructionError {
    #[error("no instruction items")]
    Empty,
    #[error("{} invalid item(s):\n  {}", .0.len(), .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n  "))]
    Validation(Vec<Violation>),
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> InstructionError + '_ {
    move |source| InstructionError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub counts: BTreeMap<Category, usize>,
    pub total: usize,
    pub warning: Option<String>,
}

/// One compact JSON object per line, LF-terminated.
pub fn render_jsonl(items: &[InstructionItem], default_system: &str) -> Result<String, InstructionError> {
    if items.is_empty() {
        return Err(InstructionError::Empty);
    }
    let mut bad = Vec::new();
    for (i, item) in items.iter().enumerate() {
        let line = item.source_line.unwrap_or(i + 1);
        for (field, text) in [("question", &item.question), ("answer", &item.answer)] {
            if text.trim().is_empty() {
                bad.push(Violation {
                    line,
                    kind: ViolationKind::EmptyContent,
                    message: format!("empty {field}"),
                });
            }
        }
    }
    if default_system.trim().is_empty() && items.iter().any(|i| i.system.as_deref().is_none_or(|s| s.trim().is_empty())) {
        bad.push(Violation {
            line: 0,
            kind: ViolationKind::EmptyContent,
            message: "empty default system prompt".into(),
        });
    }
    if !bad.is_empty() {
        return Err(InstructionError::Validation(bad));
    }
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&ChatExample::from_item(item, default_system)).expect("serializable"));
        out.push('\n');
    }
    Ok(out)
}

pub fn summarize(items: &[InstructionItem]) -> BuildSummary {
    let mut counts: BTreeMap<Category, usize> = Category::ALL.iter().map(|&c| (c, 0)).collect();
    for item in items {
        *counts.entry(item.category).or_insert(0) += 1;
    }
    let total = items.len();
    let warning = (total < MIN_EXAMPLES).then(|| {
        format!("only {total} example(s); most fine-tune services require at least {MIN_EXAMPLES}")
    });
    BuildSummary { counts, total, warning }
}

/// Writes the chat file. Any invalid item fails the whole build (nothing is
/// written) so no item is ever silently dropped.
pub fn build_jsonl(items: &[InstructionItem], default_system: &str, out: &Path) -> Result<BuildSummary, InstructionError> {
    let text = render_jsonl(items, default_system)?;
    let mut file = std::fs::File::create(out).map_err(io_err(out))?;
    file.write_all(text.as_bytes()).map_err(io_err(out))?;
    let summary = summarize(items);
    if let Some(w) = &summary.warning {
        log::warn!("{w}");
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub examples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_example(value: &serde_json::Value) -> Vec<(ViolationKind, String)> {
    let mut out = Vec::new();
    let Some(messages) = value.get("messages").and_then(|m| m.as_array()) else {
        return vec![(ViolationKind::Structure, "expected an object with a \"messages\" array".into())];
    };
    let mut roles = Vec::with_capacity(messages.len());
    for (i, m) in messages.iter().enumerate() {
        let role = m.get("role").and_then(|r| r.as_str());
        let content = m.get("content").and_then(|c| c.as_str());
        match (role, content) {
            (Some(r), Some(c)) => {
                match r {
                    "system" | "user" | "assistant" => roles.push(r),
                    _ => out.push((ViolationKind::Structure, format!("message {}: unknown role {r:?}", i + 1))),
                }
                if c.trim().is_empty() {
                    out.push((ViolationKind::EmptyContent, format!("message {}: empty content", i + 1)));
                }
            }
            _ => out.push((
                ViolationKind::Structure,
                format!("message {}: needs string \"role\" and \"content\"", i + 1),
            )),
        }
    }
    if roles.len() == messages.len() {
        let ok = roles.len() >= 3
            && roles.len() % 2 == 1
            && roles[0] == "system"
            && roles[1..]
                .iter()
                .enumerate()
                .all(|(i, &r)| r == if i % 2 == 0 { "user" } else { "assistant" });
        if !ok {
            out.push((
                ViolationKind::RoleOrder,
                format!("role order [{}]; expected system, then user/assistant pairs", roles.join(", ")),
            ));
        }
    }
    out
}

/// Checks each line independently. Only depends on the bytes given.
pub fn validate_bytes(bytes: &[u8]) -> ValidationReport {
    let mut violations = Vec::new();
    let mut examples = 0;
    let mut push = |line, kind, message: String| violations.push(Violation { line, kind, message });
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    if body.is_empty() {
        push(1, ViolationKind::Blank, "file is empty".into());
    } else {
        for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
            let line = i + 1;
            let raw = match raw.strip_suffix(b"\r") {
                Some(r) => {
                    push(line, ViolationKind::LineEnding, "CRLF line ending".into());
                    r
                }
                None => raw,
            };
            let Ok(text) = std::str::from_utf8(raw) else {
                push(line, ViolationKind::Encoding, "invalid UTF-8".into());
                continue;
            };
            if text.trim().is_empty() {
                push(line, ViolationKind::Blank, "blank line".into());
                continue;
            }
            let value: serde_json::Value = match serde_json::from_str(text) {
                Ok(v) => v,
                Err(e) => {
                    push(line, ViolationKind::Json, format!("malformed JSON: {e}"));
                    continue;
                }
            };
            examples += 1;
            for (kind, message) in check_example(&value) {
                push(line, kind, message);
            }
        }
    }
    ValidationReport { examples, violations }
}

pub fn validate_jsonl(path: &Path) -> Result<ValidationReport, InstructionError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(validate_bytes(&bytes))
}

#[derive(Deserialize)]
struct RawItem {
    category: String,
    question: String,
    answer: String,
    #[serde(default)]
    system: Option<String>,
}

impl RawItem {
    fn into_item(self, line: usize) -> Result<InstructionItem, String> {
        Ok(InstructionItem {
            category: self.category.parse()?,
            question: self.question,
            answer: self.answer,
            system: self.system.filter(|s| !s.trim().is_empty()),
            source_line: Some(line),
        })
    }
}

/// Reads `category,question,answer[,system]` from a CSV file (with header)
/// or JSON lines (any other extension).
pub fn load_instruction_items(path: &Path) -> Result<Vec<InstructionItem>, InstructionError> {
    let parse_err = |line: usize, message: String| InstructionError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let mut items = Vec::new();
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(0, e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        for rec in reader.records() {
            let line_of = |e: &csv::Error| e.position().map_or(0, |p| p.line() as usize);
            let rec = rec.map_err(|e| parse_err(line_of(&e), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let raw: RawItem = rec.deserialize(Some(&headers)).map_err(|e| parse_err(line, e.to_string()))?;
            items.push(raw.into_item(line).map_err(|m| parse_err(line, m))?);
        }
    } else {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        for (i, l) in text.lines().enumerate() {
            if l.trim().is_empty() {
                continue;
            }
            let raw: RawItem = serde_json::from_str(l).map_err(|e| parse_err(i + 1, e.to_string()))?;
            items.push(raw.into_item(i + 1).map_err(|m| parse_err(i + 1, m))?);
        }
    }
    Ok(items)
}
