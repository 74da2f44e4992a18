use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::hex16;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];
const HEADER: &str = "# prunelab-vocab";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    /// One id per distinct character seen in the training corpus.
    Char,
    /// One id per byte; encodes any text.
    Byte,
}

/// Character- or byte-level tokenizer with three leading special ids
/// (`<pad>`, `<bos>`, `<eos>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    kind: TokenizerKind,
    chars: Vec<char>,
    index: HashMap<char, u32>,
}

impl Tokenizer {
    /// Vocabulary is the sorted set of characters in `corpus`.
    pub fn build_char(corpus: &str) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let set: BTreeSet<char> = corpus.chars().collect();
        Ok(Self::from_chars(set.into_iter().collect()))
    }

    /// Fixed character vocabulary: printable ASCII plus tab and newline.
    pub fn printable_ascii() -> Self {
        let mut chars = vec!['\t', '\n'];
        chars.extend((0x20u8..0x7f).map(char::from));
        Self::from_chars(chars)
    }

    pub fn byte_level() -> Self {
        Self {
            kind: TokenizerKind::Byte,
            chars: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + SPECIALS.len()) as u32))
            .collect();
        Self {
            kind: TokenizerKind::Char,
            chars,
            index,
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS.len()
            + match self.kind {
                TokenizerKind::Char => self.chars.len(),
                TokenizerKind::Byte => 256,
            }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self.kind {
            TokenizerKind::Byte => Ok(text.bytes().map(|b| b as u32 + SPECIALS.len() as u32).collect()),
            TokenizerKind::Char => text
                .chars()
                .map(|c| {
                    self.index
                        .get(&c)
                        .copied()
                        .ok_or_else(|| Error::Data(format!("character {c:?} is not in the vocabulary")))
                })
                .collect(),
        }
    }

    /// Inverse of [`encode`](Self::encode); special ids decode to nothing.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let n = SPECIALS.len() as u32;
        let vocab = self.vocab_size();
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let body = ids.iter().filter(|&&id| id >= n).map(|&id| id - n);
        match self.kind {
            TokenizerKind::Char => Ok(body.map(|i| self.chars[i as usize]).collect()),
            TokenizerKind::Byte => {
                String::from_utf8(body.map(|i| i as u8).collect()).map_err(|e| Error::Data(format!("invalid utf-8: {e}")))
            }
        }
    }

    /// Vocabulary file: a header naming the kind, then one entry per line in
    /// id order. Newline, tab, carriage return and backslash are escaped.
    pub fn to_vocab_text(&self) -> String {
        let kind = match self.kind {
            TokenizerKind::Char => "char",
            TokenizerKind::Byte => "byte",
        };
        let mut out = format!("{HEADER} {kind}\n");
        for s in SPECIALS {
            out.push_str(s);
            out.push('\n');
        }
        match self.kind {
            TokenizerKind::Char => {
                for &c in &self.chars {
                    out.push_str(&escape(c));
                    out.push('\n');
                }
            }
            TokenizerKind::Byte => {
                for b in 0..=255u8 {
                    out.push_str(&format!("\\x{b:02x}\n"));
                }
            }
        }
        out
    }

    pub fn from_vocab_text(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or_default();
        let kind = header
            .strip_prefix(HEADER)
            .map(str::trim)
            .ok_or_else(|| Error::Data("vocabulary file lacks header".into()))?;
        let entries: Vec<&str> = lines.collect();
        let entries = match entries.split_last() {
            Some((last, rest)) if last.is_empty() => rest,
            _ => &entries[..],
        };
        if entries.len() < SPECIALS.len() || entries[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data("vocabulary file must start with the special tokens".into()));
        }
        match kind {
            "byte" => Ok(Self::byte_level()),
            "char" => {
                let chars = entries[SPECIALS.len()..]
                    .iter()
                    .map(|e| unescape(e))
                    .collect::<Result<Vec<char>>>()?;
                Ok(Self::from_chars(chars))
            }
            other => Err(Error::Data(format!("unknown tokenizer kind `{other}`"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_vocab_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_vocab_text(&text)
    }

    pub fn fingerprint(&self) -> String {
        hex16(&Sha256::digest(self.to_vocab_text().as_bytes()))
    }
}

fn escape(c: char) -> String {
    match c {
        '\n' => "\\n".into(),
        '\t' => "\\t".into(),
        '\r' => "\\r".into(),
        '\\' => "\\\\".into(),
        c => c.to_string(),
    }
}

fn unescape(s: &str) -> Result<char> {
    let c = match s {
        "\\n" => '\n',
        "\\t" => '\t',
        "\\r" => '\r',
        "\\\\" => '\\',
        _ => {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => c,
                _ => return Err(Error::Data(format!("bad vocabulary entry {s:?}"))),
            }
        }
    };
    Ok(c)
}
