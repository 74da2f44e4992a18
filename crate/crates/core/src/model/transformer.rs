use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::finetune::AdapterSet;
use crate::model::spec::{Positional, TransformerSpec};
use crate::numeric::{AttnDims, Graph, Real, SeededRng, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Row-major `[batch × seq]` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    batch: usize,
    seq: usize,
    ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::shape("token batch", format!("{batch}x{seq} with {} ids", ids.len())));
        }
        Ok(Self { batch, seq, ids })
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Result<Self> {
        let seq = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != seq) {
            return Err(Error::shape("token batch", "rows have different lengths"));
        }
        let ids = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), seq, ids)
    }

    pub fn single(tokens: &[u32]) -> Result<Self> {
        Self::new(1, tokens.len(), tokens.to_vec())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn seq(&self) -> usize {
        self.seq
    }
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }
}

/// Anything that maps token batches to next-token logits `[batch, seq, vocab]`.
pub trait LanguageModel<T: Real>: Sync {
    fn vocab_size(&self) -> usize;
    fn max_seq_len(&self) -> usize;
    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>>;
}

/// The seven projection matrices of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixRole {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl MatrixRole {
    pub const ALL: [MatrixRole; 7] = [
        MatrixRole::Q,
        MatrixRole::K,
        MatrixRole::V,
        MatrixRole::O,
        MatrixRole::Gate,
        MatrixRole::Up,
        MatrixRole::Down,
    ];

    pub fn field(self) -> &'static str {
        match self {
            MatrixRole::Q => "wq",
            MatrixRole::K => "wk",
            MatrixRole::V => "wv",
            MatrixRole::O => "wo",
            MatrixRole::Gate => "w_gate",
            MatrixRole::Up => "w_up",
            MatrixRole::Down => "w_down",
        }
    }

    /// `(out, in)` dimensions for a spec.
    pub fn dims(self, spec: &TransformerSpec) -> (usize, usize) {
        let h = spec.hidden;
        match self {
            MatrixRole::Q => (spec.q_dim(), h),
            MatrixRole::K | MatrixRole::V => (spec.kv_dim(), h),
            MatrixRole::O => (h, spec.q_dim()),
            MatrixRole::Gate | MatrixRole::Up => (spec.ffn_hidden, h),
            MatrixRole::Down => (h, spec.ffn_hidden),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "q" | "wq" => MatrixRole::Q,
            "k" | "wk" => MatrixRole::K,
            "v" | "wv" => MatrixRole::V,
            "o" | "wo" => MatrixRole::O,
            "gate" | "w_gate" => MatrixRole::Gate,
            "up" | "w_up" => MatrixRole::Up,
            "down" | "w_down" => MatrixRole::Down,
            other => return Err(Error::Adapter(format!("unknown matrix role `{other}`"))),
        })
    }
}

impl fmt::Display for MatrixRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixRole::Q => "q",
            MatrixRole::K => "k",
            MatrixRole::V => "v",
            MatrixRole::O => "o",
            MatrixRole::Gate => "gate",
            MatrixRole::Up => "up",
            MatrixRole::Down => "down",
        })
    }
}

/// Weights of one transformer block. Linear weights are `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T: Real = f32> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Real> LayerWeights<T> {
    fn init(spec: &TransformerSpec, rng: &mut SeededRng) -> Self {
        let out_std = INIT_STD / (2.0 * spec.layers as f64).sqrt();
        let mat = |role: MatrixRole, std: f64, rng: &mut SeededRng| {
            let (o, i) = role.dims(spec);
            Tensor::randn([o, i], std, rng).with_requires_grad(true)
        };
        Self {
            attn_norm: Tensor::ones([spec.hidden]).with_requires_grad(true),
            wq: mat(MatrixRole::Q, INIT_STD, rng),
            wk: mat(MatrixRole::K, INIT_STD, rng),
            wv: mat(MatrixRole::V, INIT_STD, rng),
            wo: mat(MatrixRole::O, out_std, rng),
            ffn_norm: Tensor::ones([spec.hidden]).with_requires_grad(true),
            w_gate: mat(MatrixRole::Gate, INIT_STD, rng),
            w_up: mat(MatrixRole::Up, INIT_STD, rng),
            w_down: mat(MatrixRole::Down, out_std, rng),
        }
    }

    pub fn matrix(&self, role: MatrixRole) -> &Tensor<T> {
        match role {
            MatrixRole::Q => &self.wq,
            MatrixRole::K => &self.wk,
            MatrixRole::V => &self.wv,
            MatrixRole::O => &self.wo,
            MatrixRole::Gate => &self.w_gate,
            MatrixRole::Up => &self.w_up,
            MatrixRole::Down => &self.w_down,
        }
    }

    pub fn matrix_mut(&mut self, role: MatrixRole) -> &mut Tensor<T> {
        match role {
            MatrixRole::Q => &mut self.wq,
            MatrixRole::K => &mut self.wk,
            MatrixRole::V => &mut self.wv,
            MatrixRole::O => &mut self.wo,
            MatrixRole::Gate => &mut self.w_gate,
            MatrixRole::Up => &mut self.w_up,
            MatrixRole::Down => &mut self.w_down,
        }
    }

    /// The weight matrices that importance metrics sum over; norm scales are
    /// vectors and are left out.
    pub fn matrices(&self) -> impl Iterator<Item = (MatrixRole, &Tensor<T>)> {
        MatrixRole::ALL.into_iter().map(move |r| (r, self.matrix(r)))
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ffn_norm", &self.ffn_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 9] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("ffn_norm", &mut self.ffn_norm),
            ("w_gate", &mut self.w_gate),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }

    pub fn numel(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Concrete parameter state of a [`TransformerSpec`].
///
/// With `tie_embeddings` set there is no separate head tensor: the head reads
/// and writes the embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel<T: Real = f32> {
    spec: TransformerSpec,
    embedding: Tensor<T>,
    position: Option<Tensor<T>>,
    layers: Vec<LayerWeights<T>>,
    final_norm: Tensor<T>,
    lm_head: Option<Tensor<T>>,
}

/// Graph handles for one block.
pub(crate) struct LayerVars {
    attn_norm: Var,
    ffn_norm: Var,
    mats: [Var; 7],
    adapters: Vec<(MatrixRole, Var, Var, f64)>,
}

/// How parameters enter a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Binding {
    /// Constants; nothing is tracked.
    Inference,
    /// Named leaves; tracked according to each tensor's `requires_grad`.
    Training,
}

pub(crate) struct Traced {
    pub logits: Var,
    pub hidden: Vec<Var>,
}

/// Logits plus the residual stream entering every block and leaving the last.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T: Real> {
    /// `[batch, seq, vocab]`
    pub logits: Tensor<T>,
    /// `layers + 1` tensors of shape `[batch*seq, hidden]`.
    pub hidden: Vec<Tensor<T>>,
}

impl<T: Real> TransformerModel<T> {
    /// Random initialisation; every parameter starts trainable.
    pub fn new(spec: TransformerSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let embedding = Tensor::randn([spec.vocab_size, spec.hidden], INIT_STD, &mut rng).with_requires_grad(true);
        let position = match spec.positional {
            Positional::Learned => {
                Some(Tensor::randn([spec.max_seq_len, spec.hidden], INIT_STD, &mut rng).with_requires_grad(true))
            }
            Positional::Rope => None,
        };
        let layers = (0..spec.layers).map(|_| LayerWeights::init(&spec, &mut rng)).collect();
        let final_norm = Tensor::ones([spec.hidden]).with_requires_grad(true);
        let lm_head = (!spec.tie_embeddings)
            .then(|| Tensor::randn([spec.vocab_size, spec.hidden], INIT_STD, &mut rng).with_requires_grad(true));
        Ok(Self {
            spec,
            embedding,
            position,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn spec(&self) -> &TransformerSpec {
        &self.spec
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerWeights<T>] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerWeights<T> {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerWeights<T> {
        &mut self.layers[i]
    }

    pub fn embedding(&self) -> &Tensor<T> {
        &self.embedding
    }

    pub fn embedding_mut(&mut self) -> &mut Tensor<T> {
        &mut self.embedding
    }

    pub fn final_norm(&self) -> &Tensor<T> {
        &self.final_norm
    }

    pub fn is_tied(&self) -> bool {
        self.lm_head.is_none()
    }

    /// Output head; the embedding table when tied.
    pub fn lm_head(&self) -> &Tensor<T> {
        self.lm_head.as_ref().unwrap_or(&self.embedding)
    }

    pub fn lm_head_mut(&mut self) -> &mut Tensor<T> {
        self.lm_head.as_mut().unwrap_or(&mut self.embedding)
    }

    /// Every distinct parameter tensor with its name. A tied head does not
    /// appear separately.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![("embed".into(), &self.embedding)];
        if let Some(p) = &self.position {
            out.push(("pos".into(), p));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            for (n, t) in layer.tensors() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("embed".into(), &mut self.embedding)];
        if let Some(p) = &mut self.position {
            out.push(("pos".into(), p));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (n, t) in layer.tensors_mut() {
                out.push((format!("layers.{i}.{n}"), t));
            }
        }
        out.push(("final_norm".into(), &mut self.final_norm));
        if let Some(h) = &mut self.lm_head {
            out.push(("lm_head".into(), h));
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.named_params_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Scalars reachable from the model (tied head counted once).
    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn trainable_params(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for (_, t) in self.named_params_mut() {
            t.set_requires_grad(flag);
        }
    }

    /// Assembles a model from parts; used by checkpoint loading.
    pub(crate) fn from_parts(
        spec: TransformerSpec,
        embedding: Tensor<T>,
        position: Option<Tensor<T>>,
        layers: Vec<LayerWeights<T>>,
        final_norm: Tensor<T>,
        lm_head: Option<Tensor<T>>,
    ) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.layers || lm_head.is_none() != spec.tie_embeddings {
            return Err(Error::InvalidSpec("parts do not match spec".into()));
        }
        Ok(Self {
            spec,
            embedding,
            position,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Short content hash over spec and parameter values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        let mut buf = Vec::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            buf.clear();
            for &v in t.data() {
                v.write_le(&mut buf);
            }
            h.update(&buf);
        }
        hex16(&h.finalize())
    }

    pub fn cast<U: Real>(&self) -> TransformerModel<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerWeights {
                attn_norm: l.attn_norm.cast(),
                wq: l.wq.cast(),
                wk: l.wk.cast(),
                wv: l.wv.cast(),
                wo: l.wo.cast(),
                ffn_norm: l.ffn_norm.cast(),
                w_gate: l.w_gate.cast(),
                w_up: l.w_up.cast(),
                w_down: l.w_down.cast(),
            })
            .collect();
        TransformerModel {
            spec: self.spec.clone(),
            embedding: self.embedding.cast(),
            position: self.position.as_ref().map(|p| p.cast()),
            layers,
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.as_ref().map(|h| h.cast()),
        }
    }

    /// Copy without the blocks at `indices`; surviving blocks keep their order
    /// and values.
    pub fn remove_layers(&self, indices: &[usize]) -> Result<Self> {
        let n = self.layers.len();
        let mut set = BTreeSet::new();
        for &i in indices {
            if i >= n {
                return Err(Error::InvalidLayers(format!("index {i} out of range for {n} layers")));
            }
            if !set.insert(i) {
                return Err(Error::InvalidLayers(format!("index {i} listed twice")));
            }
        }
        if set.len() >= n {
            return Err(Error::InvalidLayers(format!("cannot remove all {n} layers")));
        }
        let layers: Vec<_> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(i, _)| !set.contains(i))
            .map(|(_, l)| l.clone())
            .collect();
        Ok(Self {
            spec: self.spec.with_layers(layers.len()),
            layers,
            ..self.clone()
        })
    }

    fn check_batch(&self, batch: &TokenBatch) -> Result<()> {
        if batch.seq() > self.spec.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: batch.seq(),
                max: self.spec.max_seq_len,
            });
        }
        if let Some(&id) = batch.ids().iter().find(|&&id| id as usize >= self.spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    fn bind(&self, g: &mut Graph<T>, name: &str, t: &Tensor<T>, binding: Binding) -> Var {
        match binding {
            Binding::Inference => g.constant(t.clone()),
            Binding::Training => g.param(name, t),
        }
    }

    fn bind_layer(
        &self,
        g: &mut Graph<T>,
        i: usize,
        adapters: Option<&AdapterSet<T>>,
        binding: Binding,
    ) -> LayerVars {
        let l = &self.layers[i];
        let attn_norm = self.bind(g, &format!("layers.{i}.attn_norm"), &l.attn_norm, binding);
        let ffn_norm = self.bind(g, &format!("layers.{i}.ffn_norm"), &l.ffn_norm, binding);
        let mats = MatrixRole::ALL.map(|r| self.bind(g, &format!("layers.{i}.{}", r.field()), l.matrix(r), binding));
        let mut bound = Vec::new();
        if let Some(set) = adapters {
            for pair in set.pairs().iter().filter(|p| p.layer == i) {
                let (a, b) = match binding {
                    Binding::Inference => (g.constant(pair.a.clone()), g.constant(pair.b.clone())),
                    Binding::Training => (g.param(pair.a_name(), &pair.a), g.param(pair.b_name(), &pair.b)),
                };
                bound.push((pair.role, a, b, pair.scaling));
            }
        }
        LayerVars {
            attn_norm,
            ffn_norm,
            mats,
            adapters: bound,
        }
    }

    fn project(g: &mut Graph<T>, x: Var, lv: &LayerVars, role: MatrixRole) -> Result<Var> {
        let mut y = g.linear(x, lv.mats[role as usize])?;
        for &(r, a, b, scaling) in &lv.adapters {
            if r == role {
                let down = g.linear(x, a)?;
                let up = g.linear(down, b)?;
                let up = g.scale(up, scaling)?;
                y = g.add(y, up)?;
            }
        }
        Ok(y)
    }

    fn block(&self, g: &mut Graph<T>, x: Var, lv: &LayerVars, batch: usize, seq: usize) -> Result<Var> {
        let s = &self.spec;
        let xn = g.rms_norm(x, lv.attn_norm, s.norm_eps)?;
        let mut q = Self::project(g, xn, lv, MatrixRole::Q)?;
        let mut k = Self::project(g, xn, lv, MatrixRole::K)?;
        let v = Self::project(g, xn, lv, MatrixRole::V)?;
        if s.positional == Positional::Rope {
            q = g.rope(q, seq, s.head_dim, s.rope_base)?;
            k = g.rope(k, seq, s.head_dim, s.rope_base)?;
        }
        let dims = AttnDims {
            batch,
            seq,
            heads: s.heads,
            kv_heads: s.kv_heads,
            head_dim: s.head_dim,
        };
        let attn = g.causal_attention(q, k, v, dims)?;
        let o = Self::project(g, attn, lv, MatrixRole::O)?;
        let h = g.add(x, o)?;
        let hn = g.rms_norm(h, lv.ffn_norm, s.norm_eps)?;
        let gate = Self::project(g, hn, lv, MatrixRole::Gate)?;
        let up = Self::project(g, hn, lv, MatrixRole::Up)?;
        let act = g.silu(gate)?;
        let act = g.mul(act, up)?;
        let down = Self::project(g, act, lv, MatrixRole::Down)?;
        g.add(h, down)
    }

    /// Records embedding, the blocks listed in `order` (all blocks in index
    /// order when `None`), final norm and head onto `g`.
    pub(crate) fn trace(
        &self,
        g: &mut Graph<T>,
        batch: &TokenBatch,
        adapters: Option<&AdapterSet<T>>,
        order: Option<&[usize]>,
        binding: Binding,
        capture: bool,
    ) -> Result<Traced> {
        self.check_batch(batch)?;
        let (b, s) = (batch.batch(), batch.seq());
        let embed = self.bind(g, "embed", &self.embedding, binding);
        let mut x = g.embedding(embed, batch.ids())?;
        if let Some(pos) = &self.position {
            let pv = self.bind(g, "pos", pos, binding);
            let positions: Vec<u32> = (0..b).flat_map(|_| 0..s as u32).collect();
            let p = g.embedding(pv, &positions)?;
            x = g.add(x, p)?;
        }
        let all: Vec<usize> = (0..self.layers.len()).collect();
        let order = order.unwrap_or(&all);
        let mut hidden = Vec::new();
        for &i in order {
            if i >= self.layers.len() {
                return Err(Error::InvalidLayers(format!("layer {i} does not exist")));
            }
            if capture {
                hidden.push(x);
            }
            let lv = self.bind_layer(g, i, adapters, binding);
            x = self.block(g, x, &lv, b, s)?;
        }
        if capture {
            hidden.push(x);
        }
        let norm = self.bind(g, "final_norm", &self.final_norm, binding);
        let head = match &self.lm_head {
            Some(h) => self.bind(g, "lm_head", h, binding),
            None => embed,
        };
        let xn = g.rms_norm(x, norm, self.spec.norm_eps)?;
        let logits = g.linear(xn, head)?;
        Ok(Traced { logits, hidden })
    }

    pub(crate) fn logits_3d(&self, t: &Tensor<T>, batch: &TokenBatch) -> Result<Tensor<T>> {
        t.clone().reshape([batch.batch(), batch.seq(), self.spec.vocab_size])
    }

    /// Logits `[batch, seq, vocab]` under causal masking.
    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        self.forward_with(batch, None)
    }

    pub(crate) fn forward_with(&self, batch: &TokenBatch, adapters: Option<&AdapterSet<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, batch, adapters, None, Binding::Inference, false)?;
        self.logits_3d(g.value(tr.logits), batch)
    }

    /// Forward that also returns the residual stream at every block boundary.
    pub fn forward_hidden(&self, batch: &TokenBatch) -> Result<ForwardOutput<T>> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, batch, None, None, Binding::Inference, true)?;
        Ok(ForwardOutput {
            logits: self.logits_3d(g.value(tr.logits), batch)?,
            hidden: tr.hidden.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Forward through an explicit sequence of blocks (possibly empty).
    pub fn forward_layers(&self, batch: &TokenBatch, order: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, batch, None, Some(order), Binding::Inference, false)?;
        self.logits_3d(g.value(tr.logits), batch)
    }

    /// Embedding (plus learned positions) for a batch: the input to block 0.
    pub fn embed(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        Ok(self.forward_hidden_prefix(batch, &[])?.remove(0))
    }

    /// Applies block `i` alone to a residual stream `[batch*seq, hidden]`.
    pub fn block_forward(&self, i: usize, x: &Tensor<T>, batch: usize, seq: usize) -> Result<Tensor<T>> {
        if i >= self.layers.len() {
            return Err(Error::InvalidLayers(format!("layer {i} does not exist")));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let lv = self.bind_layer(&mut g, i, None, Binding::Inference);
        let out = self.block(&mut g, xv, &lv, batch, seq)?;
        Ok(g.value(out).clone())
    }

    /// Final norm and head applied to a residual stream; returns `[rows, vocab]`.
    pub fn head_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let norm = g.constant(self.final_norm.clone());
        let head = g.constant(self.lm_head().clone());
        let xn = g.rms_norm(xv, norm, self.spec.norm_eps)?;
        let out = g.linear(xn, head)?;
        Ok(g.value(out).clone())
    }

    fn forward_hidden_prefix(&self, batch: &TokenBatch, order: &[usize]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let tr = self.trace(&mut g, batch, None, Some(order), Binding::Inference, true)?;
        Ok(tr.hidden.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// MACs recorded by the tape during one forward pass.
    pub fn traced_macs(&self, batch: &TokenBatch) -> Result<u64> {
        let mut g = Graph::new();
        self.trace(&mut g, batch, None, None, Binding::Inference, false)?;
        Ok(g.mac_count())
    }

    /// Deterministic argmax continuation; ties go to the lowest token id.
    pub fn greedy_generate(&self, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Data("prompt must not be empty".into()));
        }
        let total = prompt.len() + max_new_tokens;
        if total > self.spec.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: total,
                max: self.spec.max_seq_len,
            });
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..max_new_tokens {
            let logits = self.forward(&TokenBatch::single(&tokens)?)?;
            let v = self.spec.vocab_size;
            let last = &logits.data()[(tokens.len() - 1) * v..tokens.len() * v];
            tokens.push(argmax(last) as u32);
        }
        Ok(tokens)
    }
}

impl<T: Real> LanguageModel<T> for TransformerModel<T> {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }
    fn max_seq_len(&self) -> usize {
        self.spec.max_seq_len
    }
    fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        self.forward(batch)
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn hex16(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::max_abs_diff;

    pub(crate) fn tiny_spec() -> TransformerSpec {
        TransformerSpec {
            name: "tiny".into(),
            vocab_size: 11,
            hidden: 8,
            layers: 4,
            heads: 2,
            kv_heads: 1,
            head_dim: 4,
            ffn_hidden: 12,
            max_seq_len: 16,
            tie_embeddings: false,
            positional: Positional::Rope,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    fn batch(b: usize, s: usize, seed: u64) -> TokenBatch {
        let mut rng = SeededRng::new(seed);
        TokenBatch::new(b, s, (0..b * s).map(|_| rng.below(11) as u32).collect()).unwrap()
    }

    #[test]
    fn param_count_matches_formula() {
        for tie in [false, true] {
            for pos in [Positional::Rope, Positional::Learned] {
                let spec = TransformerSpec {
                    tie_embeddings: tie,
                    positional: pos,
                    ..tiny_spec()
                };
                let m = TransformerModel::<f32>::new(spec.clone(), 0).unwrap();
                assert_eq!(m.num_params() as u64, spec.count_params().unique);
            }
        }
    }

    #[test]
    fn out_of_range_and_overlong_inputs() {
        let m = TransformerModel::<f32>::new(tiny_spec(), 0).unwrap();
        let bad = TokenBatch::single(&[1, 11]).unwrap();
        assert!(matches!(m.forward(&bad), Err(Error::TokenOutOfRange { id: 11, .. })));
        let long = TokenBatch::single(&[1; 17]).unwrap();
        assert!(matches!(m.forward(&long), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn batch_order_permutes_logits() {
        let m = TransformerModel::<f64>::new(tiny_spec(), 1).unwrap();
        let b = batch(3, 5, 2);
        let rows: Vec<Vec<u32>> = (0..3).map(|i| b.row(i).to_vec()).collect();
        let perm = TokenBatch::from_rows(&[rows[2].clone(), rows[0].clone(), rows[1].clone()]).unwrap();
        let a = m.forward(&b).unwrap();
        let p = m.forward(&perm).unwrap();
        let chunk = 5 * 11;
        assert_eq!(&p.data()[..chunk], &a.data()[2 * chunk..3 * chunk]);
        assert_eq!(&p.data()[chunk..2 * chunk], &a.data()[..chunk]);
    }

    #[test]
    fn remove_nothing_is_identity() {
        let m = TransformerModel::<f32>::new(tiny_spec(), 3).unwrap();
        let r = m.remove_layers(&[]).unwrap();
        assert_eq!(r, m);
    }

    #[test]
    fn remove_layers_errors() {
        let m = TransformerModel::<f32>::new(tiny_spec(), 3).unwrap();
        assert!(m.remove_layers(&[0, 1, 2, 3]).is_err());
        assert!(m.remove_layers(&[1, 1]).is_err());
        assert!(m.remove_layers(&[4]).is_err());
    }

    #[test]
    fn remove_layers_keeps_survivors_bitwise() {
        let m = TransformerModel::<f32>::new(tiny_spec(), 3).unwrap();
        let r = m.remove_layers(&[1, 3]).unwrap();
        assert_eq!(r.num_layers(), 2);
        assert_eq!(r.spec().layers, 2);
        assert_eq!(r.layer(0), m.layer(0));
        assert_eq!(r.layer(1), m.layer(2));
        assert_eq!(r.embedding(), m.embedding());
        assert_eq!(m.num_layers(), 4);
    }

    #[test]
    fn tied_head_shares_storage() {
        let spec = TransformerSpec {
            tie_embeddings: true,
            ..tiny_spec()
        };
        let mut m = TransformerModel::<f32>::new(spec, 0).unwrap();
        m.lm_head_mut().data_mut()[5] = 42.0;
        assert_eq!(m.embedding().data()[5], 42.0);
        assert!(m.param("lm_head").is_none());
    }

    #[test]
    fn zero_layer_composition_is_norm_head_of_embedding() {
        let m = TransformerModel::<f64>::new(tiny_spec(), 4).unwrap();
        let b = batch(2, 3, 9);
        let direct = m.forward_layers(&b, &[]).unwrap();
        let x = m.embed(&b).unwrap();
        let manual = m.head_forward(&x).unwrap().reshape([2, 3, 11]).unwrap();
        assert!(max_abs_diff(&direct, &manual) == 0.0);
    }

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn generate_zero_new_tokens() {
        let m = TransformerModel::<f32>::new(tiny_spec(), 0).unwrap();
        assert_eq!(m.greedy_generate(&[1, 2, 3], 0).unwrap(), vec![1, 2, 3]);
        assert!(m.greedy_generate(&[], 2).is_err());
        assert!(m.greedy_generate(&[1; 10], 7).is_err());
        let a = m.greedy_generate(&[4, 5], 6).unwrap();
        let b = m.greedy_generate(&[4, 5], 6).unwrap();
        assert_eq!(a, b);
    }
}
