//! Evaluation: closed-set rank retrieval and open-set TAR@FAR over
//! gallery/probe splits, plus the style-subspace distribution similarity
//! between trained synthesis models.

pub mod error;
pub mod metrics;
pub mod report;
pub mod similarity;

pub use error::{EvalError, Result};
pub use metrics::{rank_k, tar_at_far, verification_scores, TarAtFar};
pub use report::{evaluate, EvalCounts, EvalReport};
pub use similarity::{
    similarity, similarity_matrix, similarity_max_permutation, BasisPairing, SimilarityMatrix,
    StyleBasis,
};
