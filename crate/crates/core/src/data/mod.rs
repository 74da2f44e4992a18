//! Corpora, tokenization, calibration sampling, instruction datasets and
//! multiple-choice evaluation tasks.

mod corpus;
mod sft;
mod tasks;
mod tokenizer;

pub use corpus::{sample_calibration, CalibrationFingerprint, CalibrationSet, Corpus, TokenizedCorpus};
pub use sft::{load_sft, SftDataset, SftFormat, SftRecord, TrainExample};
pub use tasks::{load_eval_task, EvalItem, EvalTask};
pub use tokenizer::{Tokenizer, TokenizerKind, BOS, EOS, PAD};
