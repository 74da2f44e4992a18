use crate::error::{Error, Result};
use crate::model::{LanguageModel, MatrixRole, TokenBatch, TransformerModel, TransformerSpec};
use crate::numeric::{Real, SeededRng, Tensor};

/// Std of the Gaussian used for `A`.
pub const ADAPTER_INIT_STD: f64 = 0.02;
/// Default `alpha`; the delta is scaled by `alpha / rank`.
pub const DEFAULT_ALPHA: f64 = 16.0;
/// Default adapter targets: every weight matrix of every block.
pub const DEFAULT_TARGETS: [MatrixRole; 7] = MatrixRole::ALL;

/// Low-rank delta `scaling · B·A` beside one block matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<T: Real = f32> {
    pub layer: usize,
    pub role: MatrixRole,
    /// `[rank, in]`
    pub a: Tensor<T>,
    /// `[out, rank]`
    pub b: Tensor<T>,
    pub scaling: f64,
}

impl<T: Real> AdapterPair<T> {
    pub fn a_name(&self) -> String {
        format!("adapters.{}.{}.a", self.layer, self.role)
    }

    pub fn b_name(&self) -> String {
        format!("adapters.{}.{}.b", self.layer, self.role)
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    /// `scaling · B·A`, shaped like the target matrix.
    pub fn delta(&self) -> Result<Tensor<T>> {
        self.b.matmul(&self.a)?.scale(T::of(self.scaling))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Real = f32> {
    pub rank: usize,
    pub alpha: f64,
    pairs: Vec<AdapterPair<T>>,
}

impl<T: Real> AdapterSet<T> {
    pub fn pairs(&self) -> &[AdapterPair<T>] {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut [AdapterPair<T>] {
        &mut self.pairs
    }

    pub fn num_params(&self) -> usize {
        self.pairs.iter().map(|p| p.a.numel() + p.b.numel()).sum()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::with_capacity(2 * self.pairs.len());
        for p in &mut self.pairs {
            let (an, bn) = (p.a_name(), p.b_name());
            out.push((an, &mut p.a));
            out.push((bn, &mut p.b));
        }
        out
    }
}

/// A frozen base model viewed through its adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel<T: Real = f32> {
    pub base: TransformerModel<T>,
    pub adapters: AdapterSet<T>,
}

impl<T: Real> LanguageModel<T> for AdaptedModel<T> {
    fn vocab_size(&self) -> usize {
        self.base.spec().vocab_size
    }
    fn max_seq_len(&self) -> usize {
        self.base.spec().max_seq_len
    }
    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        self.base.forward_with(batch, Some(&self.adapters))
    }
}

/// Attaches rank-`rank` adapters to `targets` in every block and freezes the
/// base. `A ~ N(0, 0.02²)`, `B = 0`, so outputs are unchanged.
pub fn attach_adapters<T: Real>(
    mut model: TransformerModel<T>,
    targets: &[MatrixRole],
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<AdaptedModel<T>> {
    if targets.is_empty() {
        return Err(Error::Adapter("no target matrices".into()));
    }
    let mut seen = Vec::new();
    for &r in targets {
        if seen.contains(&r) {
            return Err(Error::Adapter(format!("target `{r}` listed twice")));
        }
        seen.push(r);
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Adapter(format!("alpha must be positive, got {alpha}")));
    }
    let spec = model.spec().clone();
    for &r in targets {
        let (out, inp) = r.dims(&spec);
        if rank == 0 || rank > out.min(inp) {
            return Err(Error::Adapter(format!(
                "rank {rank} invalid for `{r}` ({out}×{inp})"
            )));
        }
    }
    model.set_all_trainable(false);
    let mut rng = SeededRng::new(seed);
    let scaling = alpha / rank as f64;
    let mut pairs = Vec::with_capacity(spec.layers * targets.len());
    for layer in 0..spec.layers {
        for &role in targets {
            let (out, inp) = role.dims(&spec);
            pairs.push(AdapterPair {
                layer,
                role,
                a: Tensor::randn([rank, inp], ADAPTER_INIT_STD, &mut rng).with_requires_grad(true),
                b: Tensor::zeros([out, rank]).with_requires_grad(true),
                scaling,
            });
        }
    }
    Ok(AdaptedModel {
        base: model,
        adapters: AdapterSet { rank, alpha, pairs },
    })
}

/// Folds every delta into its base matrix and drops the adapters. The
/// merged model has every parameter trainable again.
pub fn merge_adapters<T: Real>(adapted: AdaptedModel<T>) -> Result<TransformerModel<T>> {
    let AdaptedModel { mut base, adapters } = adapted;
    for p in adapters.pairs() {
        if p.layer >= base.num_layers() {
            return Err(Error::Adapter(format!("adapter for missing layer {}", p.layer)));
        }
        let delta = p.delta()?;
        let w = base.layer_mut(p.layer).matrix_mut(p.role);
        let merged = w.add(&delta)?;
        *w = merged;
    }
    base.set_all_trainable(true);
    Ok(base)
}

/// Trainable scalars added by adapters: `layers · Σ rank·(in + out)`.
pub fn adapter_trainable_count(spec: &TransformerSpec, targets: &[MatrixRole], rank: usize) -> u64 {
    let per_layer: u64 = targets
        .iter()
        .map(|r| {
            let (out, inp) = r.dims(spec);
            (rank * (out + inp)) as u64
        })
        .sum();
    spec.layers as u64 * per_layer
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenBatch;
    use crate::numeric::max_abs_diff;

    fn toy() -> TransformerModel<f64> {
        let spec = TransformerSpec::preset("toy-8x64").unwrap().with_vocab(20).with_layers(2);
        TransformerModel::new(spec, 3).unwrap()
    }

    #[test]
    fn zero_init_is_exact() {
        let m = toy();
        let batch = TokenBatch::from_rows(&[vec![1u32, 5, 7, 9], vec![2, 3, 4, 19]]).unwrap();
        let base = m.forward(&batch).unwrap();
        let adapted = attach_adapters(m, &DEFAULT_TARGETS, 4, DEFAULT_ALPHA, 0).unwrap();
        assert_eq!(adapted.logits(&batch).unwrap().data(), base.data());
        assert_eq!(adapted.base.trainable_params(), 0);
    }

    #[test]
    fn merge_with_zero_b_is_bit_identical() {
        let m = toy();
        let adapted = attach_adapters(m.clone(), &[MatrixRole::Q, MatrixRole::V], 2, 16.0, 0).unwrap();
        let merged = merge_adapters(adapted).unwrap();
        for (a, b) in m.layers().iter().zip(merged.layers()) {
            for ((_, x), (_, y)) in a.matrices().zip(b.matrices()) {
                assert_eq!(x.data(), y.data());
            }
        }
    }

    #[test]
    fn merged_matches_adapted() {
        let mut adapted = attach_adapters(toy(), &DEFAULT_TARGETS, 3, 16.0, 1).unwrap();
        let mut rng = SeededRng::new(9);
        for p in adapted.adapters.pairs_mut() {
            p.b = Tensor::randn(p.b.shape().to_vec(), 0.02, &mut rng);
        }
        let batch = TokenBatch::from_rows(&[vec![1u32, 5, 7, 9, 11]]).unwrap();
        let want = adapted.logits(&batch).unwrap();
        let merged = merge_adapters(adapted).unwrap();
        assert!(max_abs_diff(&merged.forward(&batch).unwrap(), &want) < 1e-10);
    }

    #[test]
    fn count_matches_tensors() {
        let m = toy();
        let spec = m.spec().clone();
        let adapted = attach_adapters(m, &[MatrixRole::K, MatrixRole::Down], 5, 16.0, 0).unwrap();
        assert_eq!(
            adapted.adapters.num_params() as u64,
            adapter_trainable_count(&spec, &[MatrixRole::K, MatrixRole::Down], 5)
        );
    }

    #[test]
    fn rank_and_target_errors() {
        assert!(attach_adapters(toy(), &[MatrixRole::K], 33, 16.0, 0).is_err());
        assert!(attach_adapters(toy(), &[MatrixRole::K], 0, 16.0, 0).is_err());
        assert!(attach_adapters(toy(), &[], 2, 16.0, 0).is_err());
        assert!(attach_adapters(toy(), &[MatrixRole::Q, MatrixRole::Q], 2, 16.0, 0).is_err());
    }
}
