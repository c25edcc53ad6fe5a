//! Training loops: stage-1 synthesis (GAN + subspace + identity-magnitude
//! objectives under a frozen extractor) and stage-2 recognition with
//! baseline / random-style / FGSM-guided batch composition.

pub mod classifier;
pub mod error;
pub mod guided;
pub mod metrics;
pub mod sampling;
pub mod stage1;
pub mod stage2;

pub use error::{Result, TrainError};
pub use guided::{
    analyze_perturbations, compose_batch, fgsm_from_gradient, fgsm_style_perturbation,
    PerturbationRecord, PerturbationSummary,
};
pub use stage1::{train_synthesis, Stage1Artifacts, Stage1Config};
pub use stage2::{load_perturbation_records, train_fr, Mode, Stage2Artifacts, Stage2Config};
