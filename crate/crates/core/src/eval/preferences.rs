use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceVote {
    pub evaluator: String,
    pub question: String,
    /// `None`: every answer was unhelpful.
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    /// Total per model, in the order the models were given.
    pub scores: Vec<(String, usize)>,
    /// question → model → votes
    pub per_question: BTreeMap<String, BTreeMap<String, usize>>,
    pub abstentions: usize,
    pub total_votes: usize,
}

/// Counts votes per model. Unknown ids and duplicate (evaluator, question)
/// pairs are rejected together, each named by its 1-based row.
pub fn aggregate_preferences(
    votes: &[PreferenceVote],
    models: &[String],
    questions: Option<&[String]>,
) -> Result<PreferenceSummary> {
    let known_models: HashSet<&str> = models.iter().map(String::as_str).collect();
    let known_questions: Option<HashSet<&str>> = questions.map(|q| q.iter().map(String::as_str).collect());
    let mut problems = Vec::new();
    let mut first_row: HashMap<(&str, &str), usize> = HashMap::new();
    for (i, v) in votes.iter().enumerate() {
        let row = i + 1;
        if let Some(m) = &v.model {
            if !known_models.contains(m.as_str()) {
                problems.push(format!("row {row}: unknown model {m:?}"));
            }
        }
        if let Some(q) = &known_questions {
            if !q.contains(v.question.as_str()) {
                problems.push(format!("row {row}: unknown question {:?}", v.question));
            }
        }
        if let Some(first) = first_row.insert((&v.evaluator, &v.question), row) {
            first_row.insert((&v.evaluator, &v.question), first);
            problems.push(format!(
                "row {row}: duplicate vote by {:?} on {:?} (first at row {first})",
                v.evaluator, v.question
            ));
        }
    }
    if !problems.is_empty() {
        return Err(EvalError::Validation(problems));
    }

    let mut totals: HashMap<&str, usize> = HashMap::new();
    let mut per_question: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut abstentions = 0;
    for v in votes {
        let cell = per_question.entry(v.question.clone()).or_insert_with(|| {
            models.iter().map(|m| (m.clone(), 0)).collect()
        });
        match &v.model {
            Some(m) => {
                *totals.entry(m).or_insert(0) += 1;
                *cell.get_mut(m).expect("validated") += 1;
            }
            None => abstentions += 1,
        }
    }
    Ok(PreferenceSummary {
        scores: models
            .iter()
            .map(|m| (m.clone(), totals.get(m.as_str()).copied().unwrap_or(0)))
            .collect(),
        per_question,
        abstentions,
        total_votes: votes.len(),
    })
}

/// Reads `evaluator_id,question_id,model_id` rows; an empty model id is a
/// "none helpful" vote. A header row is optional.
pub fn load_votes_csv(path: &Path) -> Result<Vec<PreferenceVote>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let err = |message: String| EvalError::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let rec = rec.map_err(|e| err(e.to_string()))?;
        if i == 0 && rec.get(0).is_some_and(|c| c.trim() == "evaluator_id") {
            continue;
        }
        if rec.len() == 1 && rec.get(0).is_some_and(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() < 2 || rec.len() > 3 {
            return Err(err(format!("expected 3 fields, found {}", rec.len())));
        }
        let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        let (evaluator, question, model) = (field(0), field(1), field(2));
        if evaluator.is_empty() || question.is_empty() {
            return Err(err("evaluator and question ids must be non-empty".into()));
        }
        out.push(PreferenceVote {
            evaluator,
            question,
            model: (!model.is_empty()).then_some(model),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vote(e: &str, q: &str, m: Option<&str>) -> PreferenceVote {
        PreferenceVote {
            evaluator: e.into(),
            question: q.into(),
            model: m.map(str::to_string),
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn all_none_scores_zero() {
        let votes: Vec<_> = (0..8)
            .flat_map(|e| (0..7).map(move |q| vote(&format!("e{e}"), &format!("q{q}"), None)))
            .collect();
        let s = aggregate_preferences(&votes, &names(&["a", "b"]), None).unwrap();
        assert_eq!(s.scores, vec![("a".into(), 0), ("b".into(), 0)]);
        assert_eq!(s.abstentions, 56);
    }

    #[test]
    fn unanimous_upper_bound() {
        let votes: Vec<_> = (0..8)
            .flat_map(|e| (0..7).map(move |q| vote(&format!("e{e}"), &format!("q{q}"), Some("a"))))
            .collect();
        let s = aggregate_preferences(&votes, &names(&["a", "b", "c"]), None).unwrap();
        assert_eq!(s.scores[0].1, 56);
        assert_eq!(s.scores[1].1 + s.scores[2].1, 0);
        assert_eq!(s.per_question["q3"]["a"], 8);
    }

    #[test]
    fn validation_lists_rows() {
        let votes = vec![
            vote("e1", "q1", Some("a")),
            vote("e1", "q1", Some("b")),
            vote("e2", "q1", Some("zzz")),
            vote("e2", "q9", None),
        ];
        let qs = names(&["q1"]);
        match aggregate_preferences(&votes, &names(&["a", "b"]), Some(&qs)) {
            Err(EvalError::Validation(rows)) => {
                assert_eq!(rows.len(), 3);
                assert!(rows[0].starts_with("row 2: duplicate"));
                assert!(rows[1].starts_with("row 3: unknown model"));
                assert!(rows[2].starts_with("row 4: unknown question"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        std::fs::write(&p, "evaluator_id,question_id,model_id\ne1,q1,a\ne2,q1,\n").unwrap();
        let v = load_votes_csv(&p).unwrap();
        assert_eq!(v, vec![vote("e1", "q1", Some("a")), vote("e2", "q1", None)]);
        std::fs::write(&p, "e1,q1,a\n").unwrap();
        assert_eq!(load_votes_csv(&p).unwrap().len(), 1);
        std::fs::write(&p, "e1\n").unwrap();
        assert!(load_votes_csv(&p).is_err());
    }
}
