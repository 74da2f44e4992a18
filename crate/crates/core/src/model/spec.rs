use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Positional {
    /// Rotary embeddings on queries and keys; no parameters.
    Rope,
    /// Learned absolute position table added to token embeddings.
    Learned,
}

/// Architecture of a pre-norm decoder-only transformer with grouped-query
/// attention and a gated feed-forward block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerSpec {
    #[serde(default)]
    pub name: String,
    pub vocab_size: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_positional")]
    pub positional: Positional,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

fn default_positional() -> Positional {
    Positional::Rope
}
fn default_rope_base() -> f64 {
    10000.0
}
fn default_norm_eps() -> f64 {
    1e-5
}

const PRESETS: &[(&str, &str)] = &[
    ("llama-3.1-8b-like", include_str!("../../presets/llama-3.1-8b-like.toml")),
    ("toy-8x64", include_str!("../../presets/toy-8x64.toml")),
];

/// Parameter totals for a spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// Distinct trainable scalars; a tied embedding/head is counted once.
    pub unique: u64,
    /// Same total with a tied head counted a second time.
    pub with_tied_duplicate: u64,
}

impl TransformerSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::InvalidSpec(format!("unknown preset `{name}` (known: {})", preset_names().join(", "))))?;
        Self::from_toml(text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("max_seq_len", self.max_seq_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::InvalidSpec(format!("{field} must be positive")));
            }
        }
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::InvalidSpec(format!(
                "hidden {} != heads {} x head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.heads % self.kv_heads != 0 {
            return Err(Error::InvalidSpec(format!(
                "kv_heads {} must divide heads {}",
                self.kv_heads, self.heads
            )));
        }
        if self.positional == Positional::Rope && self.head_dim % 2 != 0 {
            return Err(Error::InvalidSpec("rotary embeddings need an even head_dim".into()));
        }
        Ok(())
    }

    pub fn with_layers(&self, layers: usize) -> Self {
        Self {
            layers,
            ..self.clone()
        }
    }

    pub fn with_vocab(&self, vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..self.clone()
        }
    }

    pub fn q_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    /// Scalars in the seven projection matrices of one block.
    pub fn block_matrix_params(&self) -> u64 {
        let h = self.hidden as u64;
        let attn = h * self.q_dim() as u64 * 2 + h * self.kv_dim() as u64 * 2;
        let ffn = 3 * h * self.ffn_hidden as u64;
        attn + ffn
    }

    /// All scalars of one block, including its two norm scales.
    pub fn block_params(&self) -> u64 {
        self.block_matrix_params() + 2 * self.hidden as u64
    }

    pub fn embedding_params(&self) -> u64 {
        (self.vocab_size * self.hidden) as u64
    }

    /// Closed-form parameter count of the model built from this spec.
    pub fn count_params(&self) -> ParamCount {
        let h = self.hidden as u64;
        let pos = match self.positional {
            Positional::Learned => (self.max_seq_len * self.hidden) as u64,
            Positional::Rope => 0,
        };
        let head = self.embedding_params();
        let body = self.embedding_params() + pos + self.layers as u64 * self.block_params() + h;
        let unique = if self.tie_embeddings { body } else { body + head };
        ParamCount {
            unique,
            with_tied_duplicate: body + head,
        }
    }

    /// Parameter count after removing `removed` blocks.
    pub fn count_params_pruned(&self, removed: usize) -> ParamCount {
        self.with_layers(self.layers.saturating_sub(removed)).count_params()
    }

    /// Multiply-accumulates of one forward pass over `seq` tokens: the
    /// projections, full (unmasked) attention score and value products, the
    /// feed-forward block and the output head. Norms and activations are not
    /// counted.
    pub fn count_macs(&self, seq: usize) -> u64 {
        let s = seq as u64;
        let per_layer = s * self.block_matrix_params() + 2 * (self.heads * self.head_dim) as u64 * s * s;
        self.layers as u64 * per_layer + s * self.embedding_params()
    }
}

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}
