use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One multiple-choice item: score each choice as a continuation of
/// `context`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub context: String,
    pub choices: Vec<String>,
    pub answer: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalTask {
    pub name: String,
    pub items: Vec<EvalItem>,
}

impl EvalTask {
    pub fn new(name: impl Into<String>, items: Vec<EvalItem>) -> Result<Self> {
        let name = name.into();
        if items.is_empty() {
            return Err(Error::Data(format!("task `{name}` has no items")));
        }
        for (i, item) in items.iter().enumerate() {
            validate_item(item).map_err(|msg| Error::Data(format!("task `{name}` item {}: {msg}", i + 1)))?;
        }
        Ok(Self { name, items })
    }

    /// JSONL, one `{"context", "choices", "answer"}` object per line.
    pub fn parse(name: impl Into<String>, text: &str, origin: &Path) -> Result<Self> {
        let mut items = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let item: EvalItem = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            validate_item(&item).map_err(parse_err)?;
            items.push(item);
        }
        Self::new(name, items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

fn validate_item(item: &EvalItem) -> std::result::Result<(), String> {
    if item.choices.len() < 2 {
        return Err(format!("needs at least 2 choices, has {}", item.choices.len()));
    }
    if item.answer >= item.choices.len() {
        return Err(format!(
            "answer index {} out of range for {} choices",
            item.answer,
            item.choices.len()
        ));
    }
    Ok(())
}

pub fn load_eval_task(path: &Path) -> Result<EvalTask> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "task".into());
    EvalTask::parse(name, &text, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<EvalTask> {
        EvalTask::parse("t", text, Path::new("t.jsonl"))
    }

    #[test]
    fn four_choice_last_index_ok() {
        let t = parse(r#"{"context":"c","choices":["a","b","c","d"],"answer":3}"#).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn answer_out_of_range() {
        let e = parse(r#"{"context":"c","choices":["a","b","c","d"],"answer":5}"#).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn too_few_choices() {
        assert!(parse(r#"{"context":"c","choices":["a"],"answer":0}"#).is_err());
    }
}
