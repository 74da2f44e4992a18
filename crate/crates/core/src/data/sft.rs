use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::tokenizer::{BOS, EOS};
use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::hex16;

/// Record layout of an instruction-tuning file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SftFormat {
    /// `{"instruction", "input", "output"}`
    Alpaca,
    /// `{"instruction", "context", "response"}`
    Dolly,
}

impl SftFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "alpaca" | "alpaca-style" => Ok(SftFormat::Alpaca),
            "dolly" | "dolly-style" => Ok(SftFormat::Dolly),
            other => Err(Error::Data(format!("unknown SFT format `{other}`"))),
        }
    }

    fn fields(self) -> (&'static str, &'static str, &'static str) {
        match self {
            SftFormat::Alpaca => ("instruction", "input", "output"),
            SftFormat::Dolly => ("instruction", "context", "response"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftRecord {
    pub instruction: String,
    pub input: String,
    pub response: String,
}

impl SftRecord {
    /// Prompt half of the instruction template; the input block is omitted
    /// when empty.
    pub fn prompt(&self) -> String {
        if self.input.is_empty() {
            format!("### Instruction:\n{}\n### Response:\n", self.instruction)
        } else {
            format!(
                "### Instruction:\n{}\n### Input:\n{}\n### Response:\n",
                self.instruction, self.input
            )
        }
    }
}

/// A token sequence with a per-position flag saying whether the position's
/// token is a training target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub tokens: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    /// Every token after the first is a target.
    pub fn language_modeling(tokens: Vec<u32>) -> Self {
        let loss_mask = (0..tokens.len()).map(|i| i > 0).collect();
        Self { tokens, loss_mask }
    }

    pub fn target_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SftDataset {
    pub name: String,
    pub max_seq_len: usize,
    pub records: Vec<SftRecord>,
}

impl SftDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Parses JSONL (one object per line) or a single JSON array.
    pub fn parse(text: &str, format: SftFormat, max_seq_len: usize, origin: &Path) -> Result<Self> {
        let name = origin
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sft".into());
        let mut records = Vec::new();
        if text.trim_start().starts_with('[') {
            let items: Vec<Value> = serde_json::from_str(text).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: e.line(),
                msg: e.to_string(),
            })?;
            for (i, v) in items.iter().enumerate() {
                records.push(record_from(v, format, origin, i + 1)?);
            }
        } else {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let v: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    msg: e.to_string(),
                })?;
                records.push(record_from(&v, format, origin, i + 1)?);
            }
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{}: no records", origin.display())));
        }
        Ok(Self {
            name,
            max_seq_len,
            records,
        })
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            for s in [&r.instruction, &r.input, &r.response] {
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
        }
        hex16(&h.finalize())
    }

    /// `<bos> prompt response <eos>`, truncated to `max_seq_len`; only the
    /// response tokens and the closing `<eos>` are targets.
    pub fn examples(&self, tok: &Tokenizer) -> Result<Vec<TrainExample>> {
        self.records
            .iter()
            .map(|r| {
                let prompt = tok.encode(&r.prompt())?;
                let mut response = tok.encode(&r.response)?;
                response.push(EOS);
                let mut tokens = Vec::with_capacity(1 + prompt.len() + response.len());
                tokens.push(BOS);
                tokens.extend(&prompt);
                let mut loss_mask = vec![false; tokens.len()];
                tokens.extend(&response);
                loss_mask.resize(tokens.len(), true);
                tokens.truncate(self.max_seq_len);
                loss_mask.truncate(self.max_seq_len);
                Ok(TrainExample { tokens, loss_mask })
            })
            .collect()
    }
}

fn record_from(v: &Value, format: SftFormat, path: &Path, line: usize) -> Result<SftRecord> {
    let err = |msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let obj = v.as_object().ok_or_else(|| err("record is not a JSON object".into()))?;
    let (fi, fx, fr) = format.fields();
    let get = |f: &str, required: bool| -> Result<String> {
        match obj.get(f) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Null) | None if !required => Ok(String::new()),
            Some(_) => Err(err(format!("field `{f}` must be a string"))),
            None => Err(err(format!("missing required field `{f}`"))),
        }
    };
    let instruction = get(fi, true)?;
    let input = get(fx, false)?;
    let response = get(fr, true)?;
    if instruction.trim().is_empty() {
        return Err(err(format!("empty `{fi}`")));
    }
    if response.trim().is_empty() {
        return Err(err(format!("empty `{fr}`")));
    }
    Ok(SftRecord {
        instruction,
        input,
        response,
    })
}

pub fn load_sft(path: &Path, format: SftFormat, max_seq_len: usize) -> Result<SftDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SftDataset::parse(&text, format, max_seq_len, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, format: SftFormat, max: usize) -> Result<SftDataset> {
        SftDataset::parse(text, format, max, Path::new("mem.jsonl"))
    }

    #[test]
    fn empty_response_rejected_with_line() {
        let text = "{\"instruction\":\"a\",\"input\":\"\",\"output\":\"b\"}\n{\"instruction\":\"a\",\"input\":\"\",\"output\":\"\"}\n";
        match parse(text, SftFormat::Alpaca, 64) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("output"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_missing_fields() {
        assert!(matches!(
            parse("{\"instruction\":\"a\"", SftFormat::Alpaca, 64),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse("{\"instruction\":\"a\",\"output\":\"b\"}", SftFormat::Dolly, 64),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn mask_covers_response_only() {
        let text = r#"[{"instruction":"say hi","context":"","response":"hi"},
                       {"instruction":"echo","context":"x y","response":"x y"},
                       {"instruction":"q","response":"a"}]"#;
        let ds = parse(text, SftFormat::Dolly, 1024).unwrap();
        assert_eq!(ds.len(), 3);
        let tok = Tokenizer::byte_level();
        let ex = ds.examples(&tok).unwrap();
        for (r, e) in ds.records.iter().zip(&ex) {
            let response_tokens = tok.encode(&r.response).unwrap().len() + 1;
            assert_eq!(e.target_count(), response_tokens);
            let prompt_len = 1 + tok.encode(&r.prompt()).unwrap().len();
            assert!(e.loss_mask[..prompt_len].iter().all(|&m| !m));
            assert_eq!(*e.tokens.last().unwrap(), EOS);
        }
        assert!(ds.records[1].prompt().contains("### Input:\nx y\n"));
        assert!(!ds.records[0].prompt().contains("### Input"));
    }

    #[test]
    fn truncates_to_max_len() {
        let long = "z".repeat(2000);
        let text = format!("{{\"instruction\":\"i\",\"input\":\"\",\"output\":\"{long}\"}}");
        let ds = parse(&text, SftFormat::Alpaca, 512).unwrap();
        let ex = ds.examples(&Tokenizer::byte_level()).unwrap();
        assert_eq!(ex[0].tokens.len(), 512);
        assert_eq!(ex[0].loss_mask.len(), 512);
    }
}
