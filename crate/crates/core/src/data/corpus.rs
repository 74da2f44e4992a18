use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Tokenizer;
use crate::error::{Error, Result};
use crate::model::{hex16, TokenBatch};
use crate::numeric::SeededRng;

/// Plain-text corpus split into documents at blank lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<String>,
}

impl Corpus {
    pub fn from_text(name: impl Into<String>, text: &str) -> Self {
        let documents = text
            .split("\n\n")
            .map(str::trim)
            .filter(|d| !d.is_empty())
            .map(String::from)
            .collect();
        Self {
            name: name.into(),
            documents,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into());
        Ok(Self::from_text(name, &text))
    }

    pub fn text(&self) -> String {
        self.documents.join("\n\n")
    }

    pub fn tokenize(&self, tok: &Tokenizer) -> Result<TokenizedCorpus> {
        let documents = self
            .documents
            .iter()
            .map(|d| tok.encode(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenizedCorpus {
            name: self.name.clone(),
            documents,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub name: String,
    pub documents: Vec<Vec<u32>>,
}

impl TokenizedCorpus {
    pub fn total_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.documents {
            h.update((d.len() as u64).to_le_bytes());
            for &t in d {
                h.update(t.to_le_bytes());
            }
        }
        hex16(&h.finalize())
    }

    /// Non-overlapping chunks of at most `len` tokens within each document;
    /// chunks shorter than two tokens are dropped.
    pub fn chunks(&self, len: usize) -> Vec<Vec<u32>> {
        self.documents
            .iter()
            .flat_map(|d| d.chunks(len.max(2)))
            .filter(|c| c.len() >= 2)
            .map(<[u32]>::to_vec)
            .collect()
    }
}

/// Identifies the calibration data a score was computed on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationFingerprint {
    pub source: String,
    pub count: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub hash: String,
}

/// Calibration samples: contiguous token windows drawn from random document
/// offsets, each at most `seq_len` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u32>>,
    pub seq_len: usize,
    pub source: String,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>, seq_len: usize, source: impl Into<String>, seed: u64) -> Result<Self> {
        if sequences.is_empty() || sequences.iter().any(|s| s.len() < 2 || s.len() > seq_len) {
            return Err(Error::Data(format!(
                "calibration sequences must be non-empty, 2..={seq_len} tokens long"
            )));
        }
        Ok(Self {
            sequences,
            seq_len,
            source: source.into(),
            seed,
        })
    }

    pub fn count(&self) -> usize {
        self.sequences.len()
    }

    pub fn fingerprint(&self) -> CalibrationFingerprint {
        let mut h = Sha256::new();
        for s in &self.sequences {
            h.update((s.len() as u64).to_le_bytes());
            for &t in s {
                h.update(t.to_le_bytes());
            }
        }
        CalibrationFingerprint {
            source: self.source.clone(),
            count: self.count(),
            seq_len: self.seq_len,
            seed: self.seed,
            hash: hex16(&h.finalize()),
        }
    }

    /// Sequences grouped by length (ascending) into rectangular batches.
    pub fn batches(&self) -> Vec<TokenBatch> {
        group_by_length(&self.sequences)
    }

    pub fn total_positions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

pub(crate) fn group_by_length(seqs: &[Vec<u32>]) -> Vec<TokenBatch> {
    let mut groups: BTreeMap<usize, Vec<&[u32]>> = BTreeMap::new();
    for s in seqs {
        groups.entry(s.len()).or_default().push(s);
    }
    groups
        .into_values()
        .map(|rows| TokenBatch::from_rows(&rows).expect("equal lengths"))
        .collect()
}

/// Draws `count` distinct windows of up to `seq_len` tokens. Every start
/// offset of every document is a candidate; documents no longer than
/// `seq_len` contribute a single whole-document window.
pub fn sample_calibration(corpus: &TokenizedCorpus, count: usize, seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    if count == 0 || seq_len < 2 {
        return Err(Error::Data("calibration needs count ≥ 1 and seq_len ≥ 2".into()));
    }
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut total = 0usize;
    for (d, doc) in corpus.documents.iter().enumerate() {
        if doc.len() < 2 {
            continue;
        }
        let windows = doc.len().saturating_sub(seq_len) + 1;
        spans.push((d, total));
        total += windows;
    }
    if total < count {
        return Err(Error::Data(format!(
            "corpus `{}` has {total} candidate windows, {count} requested",
            corpus.name
        )));
    }
    let mut rng = SeededRng::new(seed);
    let mut picks = rng.sample_indices(total, count);
    picks.sort_unstable();
    let sequences = picks
        .into_iter()
        .map(|p| {
            let k = spans.partition_point(|&(_, start)| start <= p) - 1;
            let (d, start) = spans[k];
            let offset = p - start;
            let doc = &corpus.documents[d];
            doc[offset..(offset + seq_len).min(doc.len())].to_vec()
        })
        .collect();
    CalibrationSet::new(sequences, seq_len, corpus.name.clone(), seed)
}
