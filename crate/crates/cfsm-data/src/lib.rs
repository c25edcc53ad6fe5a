//! Dataset tooling: a procedurally generated labeled face-glyph source set,
//! an unlabeled degraded target pool, and normalized batch loading.

pub mod batch;
pub mod degrade;
pub mod error;
pub mod glyph;
pub mod imageio;
pub mod manifest;

pub use batch::{load_batch, Batch, Prefetcher};
pub use degrade::{apply_degradation, ApplyProbabilities, DegradationSpec};
pub use error::{DataError, Result};
pub use manifest::{build_target_set, generate_toy_dataset, IdentityRecord, Manifest, Split};
