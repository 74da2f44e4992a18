//! Layer-importance metrics and the layer-similarity matrix.
//!
//! Every score set orders layers the same way: the smallest score is pruned
//! first and ties go to the lower index.

mod importance;
mod scores;

pub use importance::{
    bi_scores, block_influence, layer_similarity, magnitude_scores, ppl_scores, random_scores,
    reverse_order_scores, score_layers, similarity_from_hidden, taylor_scores, SimilarityMatrix,
};
pub use scores::{LayerScoreSet, Metric, Orientation};
