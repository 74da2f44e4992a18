//! Decoder-only transformer, its spec, parameter/MAC arithmetic and
//! checkpoint persistence.

mod checkpoint;
mod spec;
mod transformer;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, TrainingMetadata,
    FORMAT_VERSION,
};
pub use spec::{preset_names, ParamCount, Positional, TransformerSpec};
pub use transformer::{
    argmax, ForwardOutput, LanguageModel, LayerWeights, MatrixRole, TokenBatch, TransformerModel,
};
pub(crate) use transformer::{hex16, Binding};
