//! JSON-lines benchmark task files.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Completion,
    Numeric,
    Choice,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Completion => "completion",
            TaskKind::Numeric => "numeric",
            TaskKind::Choice => "choice",
        }
    }

    fn keys(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            TaskKind::Completion => (&["context", "truth"], &["prediction"]),
            TaskKind::Numeric => (&["question", "truth"], &["prediction_text"]),
            TaskKind::Choice => (
                &["question", "choices", "truth_index"],
                &["prediction_index"],
            ),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "completion" => Ok(TaskKind::Completion),
            "numeric" => Ok(TaskKind::Numeric),
            "choice" => Ok(TaskKind::Choice),
            other => Err(Error::Usage(format!(
                "unknown task kind {other:?} (expected completion, numeric or choice)"
            ))),
        }
    }
}

/// A missing prediction means the record is to be answered by a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionItem {
    pub context: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<String>,
    pub truth: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericItem {
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_text: Option<String>,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub question: String,
    pub choices: Vec<String>,
    pub truth_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_index: Option<usize>,
}

/// Records of one kind, in file order.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSet {
    Completion(Vec<CompletionItem>),
    Numeric(Vec<NumericItem>),
    Choice(Vec<ChoiceItem>),
}

impl TaskSet {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSet::Completion(_) => TaskKind::Completion,
            TaskSet::Numeric(_) => TaskKind::Numeric,
            TaskSet::Choice(_) => TaskKind::Choice,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskSet::Completion(v) => v.len(),
            TaskSet::Numeric(v) => v.len(),
            TaskSet::Choice(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_all_predictions(&self) -> bool {
        match self {
            TaskSet::Completion(v) => v.iter().all(|r| r.prediction.is_some()),
            TaskSet::Numeric(v) => v.iter().all(|r| r.prediction_text.is_some()),
            TaskSet::Choice(v) => v.iter().all(|r| r.prediction_index.is_some()),
        }
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        fn lines<T: Serialize>(items: &[T]) -> String {
            items
                .iter()
                .map(|r| serde_json::to_string(r).expect("task records serialize") + "\n")
                .collect()
        }
        match self {
            TaskSet::Completion(v) => lines(v),
            TaskSet::Numeric(v) => lines(v),
            TaskSet::Choice(v) => lines(v),
        }
    }
}

fn check_keys(obj: &Map<String, Value>, kind: TaskKind, line: usize) -> Result<()> {
    let (required, optional) = kind.keys();
    for key in required {
        if !obj.contains_key(*key) {
            return Err(Error::parse(
                format!("line {line}"),
                format!("missing key {key:?} for {kind} task"),
            ));
        }
    }
    for key in obj.keys() {
        if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
            return Err(Error::parse(
                format!("line {line}"),
                format!("unexpected key {key:?} for {kind} task"),
            ));
        }
    }
    Ok(())
}

fn parse_item<T: for<'de> Deserialize<'de>>(value: Value, line: usize) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::parse(format!("line {line}"), e.to_string()))
}

/// Parses a JSON-lines task file of the given kind. Blank lines are skipped;
/// keys outside the kind's schema are rejected by name.
pub fn parse_task_file(text: &str, kind: TaskKind) -> Result<TaskSet> {
    let mut set = match kind {
        TaskKind::Completion => TaskSet::Completion(Vec::new()),
        TaskKind::Numeric => TaskSet::Numeric(Vec::new()),
        TaskKind::Choice => TaskSet::Choice(Vec::new()),
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(raw)
            .map_err(|e| Error::parse(format!("line {line}"), e.to_string()))?;
        let Value::Object(obj) = &value else {
            return Err(Error::parse(
                format!("line {line}"),
                "expected a JSON object",
            ));
        };
        check_keys(obj, kind, line)?;
        match &mut set {
            TaskSet::Completion(v) => v.push(parse_item(value, line)?),
            TaskSet::Numeric(v) => {
                let item: NumericItem = parse_item(value, line)?;
                if !item.truth.is_finite() {
                    return Err(Error::parse(format!("line {line}"), "truth must be finite"));
                }
                v.push(item);
            }
            TaskSet::Choice(v) => {
                let item: ChoiceItem = parse_item(value, line)?;
                validate_choice(&item, line)?;
                v.push(item);
            }
        }
    }
    if set.is_empty() {
        return Err(Error::Usage("task file holds no records".into()));
    }
    Ok(set)
}

fn validate_choice(item: &ChoiceItem, line: usize) -> Result<()> {
    let n = item.choices.len();
    let loc = || format!("line {line}");
    if n < 2 {
        return Err(Error::parse(loc(), "at least two choices are required"));
    }
    if item.choices.iter().any(String::is_empty) {
        return Err(Error::parse(loc(), "choice text must be non-empty"));
    }
    if item.truth_index >= n {
        return Err(Error::parse(
            loc(),
            format!("truth_index {} out of range", item.truth_index),
        ));
    }
    if item.prediction_index.is_some_and(|p| p >= n) {
        return Err(Error::parse(loc(), "prediction_index out of range"));
    }
    Ok(())
}

pub fn load_task_file(path: &Path, kind: TaskKind) -> Result<TaskSet> {
    let text = std::fs::read_to_string(path)?;
    parse_task_file(&text, kind)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_each_kind() {
        let c = parse_task_file(
            "{\"context\":\"a\",\"prediction\":\"b\",\"truth\":\"b\"}\n\n{\"context\":\"c\",\"truth\":\"d\"}\n",
            TaskKind::Completion,
        )
        .unwrap();
        assert_eq!(c.len(), 2);
        assert!(!c.has_all_predictions());

        let n = parse_task_file(
            "{\"question\":\"1+1\",\"prediction_text\":\"2\",\"truth\":2}",
            TaskKind::Numeric,
        )
        .unwrap();
        assert!(n.has_all_predictions());

        let ch = parse_task_file(
            "{\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"truth_index\":1}",
            TaskKind::Choice,
        )
        .unwrap();
        assert_eq!(ch.kind(), TaskKind::Choice);
    }

    #[test]
    fn kind_mismatch_names_key() {
        let err = parse_task_file(
            "{\"context\":\"a\",\"prediction\":\"b\",\"truth\":\"b\"}",
            TaskKind::Numeric,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("line 1") && msg.contains("\"question\""),
            "{msg}"
        );

        let err = parse_task_file(
            "{\"question\":\"q\",\"prediction_text\":\"1\",\"truth\":1,\"choices\":[]}",
            TaskKind::Numeric,
        )
        .unwrap_err();
        assert!(err.to_string().contains("\"choices\""));
    }

    #[test]
    fn rejects_bad_choice_records() {
        let bad = [
            "{\"question\":\"q\",\"choices\":[\"a\"],\"truth_index\":0}",
            "{\"question\":\"q\",\"choices\":[\"a\",\"\"],\"truth_index\":0}",
            "{\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"truth_index\":2}",
            "{\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"truth_index\":0,\"prediction_index\":5}",
        ];
        for line in bad {
            assert!(
                matches!(
                    parse_task_file(line, TaskKind::Choice),
                    Err(Error::Parse { .. })
                ),
                "{line}"
            );
        }
        assert!(matches!(
            parse_task_file("\n", TaskKind::Choice),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn jsonl_round_trip() {
        let text = "{\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"truth_index\":1,\"prediction_index\":0}\n";
        let set = parse_task_file(text, TaskKind::Choice).unwrap();
        assert_eq!(set.to_jsonl(), text);
        assert_eq!("numeric".parse::<TaskKind>().unwrap(), TaskKind::Numeric);
        assert!("mcq".parse::<TaskKind>().is_err());
    }
}
