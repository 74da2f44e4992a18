use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{TransformerModel, TransformerSpec};
use crate::numeric::Real;

/// Which base parameters a fine-tuning run may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "k")]
pub enum FreezePolicy {
    /// Whole base frozen; only attached adapters train.
    Adapter,
    LmHeadOnly,
    /// Head, final norm and the last `k ∈ {1,2,3}` blocks.
    LmHeadPlusLast(usize),
    Full,
}

impl FreezePolicy {
    /// `adapter`, `lm-head`, `partial:k` / `lm-head+last-k`, `full`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let p = match s.as_str() {
            "adapter" | "lora" => FreezePolicy::Adapter,
            "lm-head" | "lm-head-only" | "partial:0" => FreezePolicy::LmHeadOnly,
            "full" => FreezePolicy::Full,
            other => {
                let k = other
                    .strip_prefix("partial:")
                    .or_else(|| other.strip_prefix("lm-head+last-"))
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| Error::Policy(format!("unknown freeze policy `{other}`")))?;
                FreezePolicy::LmHeadPlusLast(k)
            }
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FreezePolicy::LmHeadPlusLast(k) if !(1..=3).contains(k) => {
                Err(Error::Policy(format!("last-k must be 1, 2 or 3, got {k}")))
            }
            _ => Ok(()),
        }
    }

    pub fn trains_head(&self) -> bool {
        !matches!(self, FreezePolicy::Adapter)
    }

    /// Number of trailing blocks the policy trains.
    pub fn last_blocks(&self, layers: usize) -> usize {
        match self {
            FreezePolicy::Adapter | FreezePolicy::LmHeadOnly => 0,
            FreezePolicy::LmHeadPlusLast(k) => (*k).min(layers),
            FreezePolicy::Full => layers,
        }
    }

    /// Names of the parameters the policy leaves trainable.
    pub fn trainable_names(&self, spec: &TransformerSpec) -> Vec<String> {
        let mut names = Vec::new();
        match self {
            FreezePolicy::Adapter => {}
            FreezePolicy::Full => {
                names.push("embed".to_string());
                if spec.positional == crate::model::Positional::Learned {
                    names.push("pos".into());
                }
                for i in 0..spec.layers {
                    names.extend(block_names(i));
                }
                names.push("final_norm".into());
                if !spec.tie_embeddings {
                    names.push("lm_head".into());
                }
            }
            FreezePolicy::LmHeadOnly | FreezePolicy::LmHeadPlusLast(_) => {
                let k = self.last_blocks(spec.layers);
                for i in spec.layers - k..spec.layers {
                    names.extend(block_names(i));
                }
                if k > 0 {
                    names.push("final_norm".into());
                }
                names.push(if spec.tie_embeddings { "embed" } else { "lm_head" }.into());
            }
        }
        names
    }

    /// Closed-form trainable scalar count; a tied head is counted once.
    pub fn trainable_count(&self, spec: &TransformerSpec) -> u64 {
        match self {
            FreezePolicy::Adapter => 0,
            FreezePolicy::Full => spec.count_params().unique,
            _ => {
                let k = self.last_blocks(spec.layers) as u64;
                let norm = if k > 0 { spec.hidden as u64 } else { 0 };
                spec.embedding_params() + norm + k * spec.block_params()
            }
        }
    }
}

impl fmt::Display for FreezePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FreezePolicy::Adapter => f.write_str("adapter"),
            FreezePolicy::LmHeadOnly => f.write_str("lm-head"),
            FreezePolicy::LmHeadPlusLast(k) => write!(f, "lm-head+last-{k}"),
            FreezePolicy::Full => f.write_str("full"),
        }
    }
}

fn block_names(i: usize) -> Vec<String> {
    ["attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w_gate", "w_up", "w_down"]
        .iter()
        .map(|f| format!("layers.{i}.{f}"))
        .collect()
}

/// Sets every parameter's trainable flag according to `policy` and returns
/// the trainable scalar count. Under weight tying the lm-head modes would
/// also train the embedding table, which needs `allow_tied`.
pub fn apply_freeze<T: Real>(model: &mut TransformerModel<T>, policy: FreezePolicy, allow_tied: bool) -> Result<u64> {
    policy.validate()?;
    let spec = model.spec().clone();
    if spec.tie_embeddings
        && matches!(policy, FreezePolicy::LmHeadOnly | FreezePolicy::LmHeadPlusLast(_))
        && !allow_tied
    {
        return Err(Error::Policy(format!(
            "`{policy}` on a model with tied embeddings would also train the embedding table; \
             pass the tied-weights override to accept this"
        )));
    }
    let names = policy.trainable_names(&spec);
    model.set_all_trainable(false);
    for n in &names {
        model
            .param_mut(n)
            .ok_or_else(|| Error::Policy(format!("parameter `{n}` does not exist")))?
            .set_requires_grad(true);
    }
    Ok(model.trainable_params() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(tied: bool) -> TransformerModel<f32> {
        let mut spec = TransformerSpec::preset("toy-8x64").unwrap().with_vocab(40);
        spec.tie_embeddings = tied;
        TransformerModel::new(spec, 0).unwrap()
    }

    #[test]
    fn head_only_is_vocab_times_hidden() {
        let mut m = toy(false);
        let n = apply_freeze(&mut m, FreezePolicy::LmHeadOnly, false).unwrap();
        assert_eq!(n, 40 * 64);
    }

    #[test]
    fn counts_match_closed_form() {
        for policy in [
            FreezePolicy::LmHeadOnly,
            FreezePolicy::LmHeadPlusLast(1),
            FreezePolicy::LmHeadPlusLast(3),
            FreezePolicy::Full,
            FreezePolicy::Adapter,
        ] {
            let mut m = toy(false);
            let n = apply_freeze(&mut m, policy, false).unwrap();
            assert_eq!(n, policy.trainable_count(m.spec()), "{policy}");
        }
    }

    #[test]
    fn tied_head_needs_override() {
        let mut m = toy(true);
        let e = apply_freeze(&mut m, FreezePolicy::LmHeadOnly, false).unwrap_err();
        assert!(e.to_string().contains("tied"));
        let n = apply_freeze(&mut m, FreezePolicy::LmHeadPlusLast(2), true).unwrap();
        assert_eq!(n, FreezePolicy::LmHeadPlusLast(2).trainable_count(m.spec()));
        assert!(m.embedding().requires_grad());
    }

    #[test]
    fn parse_forms() {
        assert_eq!(FreezePolicy::parse("partial:3").unwrap(), FreezePolicy::LmHeadPlusLast(3));
        assert_eq!(FreezePolicy::parse("lm-head").unwrap(), FreezePolicy::LmHeadOnly);
        assert!(FreezePolicy::parse("partial:4").is_err());
        assert!(FreezePolicy::parse("frozen").is_err());
    }
}
