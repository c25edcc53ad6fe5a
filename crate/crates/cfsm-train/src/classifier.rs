//! Shared recognition-classifier machinery: label mapping, the single
//! margin-loss optimizer step, and the fixed-budget pre-training that
//! produces the frozen extractor used by stage-1's identity loss.

use std::collections::BTreeMap;

use ndarray::Array4;

use cfsm_core::fr::{FrConfig, FrModel, MarginHead, PARAM_HEAD_W};
use cfsm_core::nn::{bind_params, collect_grads, derive_rng, Adam, ParamSet};
use cfsm_core::objectives::margin_classification_loss;
use cfsm_core::Tape;
use cfsm_data::manifest::Split;
use cfsm_data::{load_batch, Manifest};

use crate::error::{Result, TrainError};
use crate::sampling::draw_indices;

/// Maps manifest identity ids (arbitrary non-negative integers) to contiguous
/// class indices for the margin head.
pub fn build_label_map(manifest: &Manifest) -> BTreeMap<i64, usize> {
    manifest
        .identities()
        .into_iter()
        .enumerate()
        .map(|(class, id)| (id, class))
        .collect()
}

pub fn map_labels(map: &BTreeMap<i64, usize>, labels: &[i64]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            map.get(l).copied().ok_or_else(|| {
                TrainError::InvalidConfig(format!("label {l} missing from identity map"))
            })
        })
        .collect()
}

/// One Adam step on the margin classification loss; returns the loss value.
pub fn margin_step(
    fr: &FrModel,
    head: &MarginHead,
    params: &mut ParamSet,
    adam: &mut Adam,
    images: &Array4<f32>,
    labels: &[usize],
) -> Result<f32> {
    let mut tape = Tape::new();
    let bind = bind_params(&mut tape, params, true);
    let x = tape.constant(images.clone().into_dyn());
    let e = fr.embed_var(&mut tape, &bind, "", x)?;
    let w = bind.var(PARAM_HEAD_W);
    let (loss, _per_sample) = margin_classification_loss(&mut tape, e, head, w, labels)?;
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss);
    let g = collect_grads(&mut grads, &bind);
    adam.step(params, &g)?;
    Ok(value)
}

/// Recognition-head hyperparameters shared by stage 1 (frozen extractor
/// pre-training) and stage 2.
#[derive(Clone, Copy, Debug)]
pub struct RecognizerSpec {
    pub embedding_dim: usize,
    pub arcface_s: f32,
    pub arcface_m: f32,
}

pub struct Recognizer {
    pub model: FrModel,
    pub head: MarginHead,
    pub params: ParamSet,
    pub label_map: BTreeMap<i64, usize>,
}

impl Recognizer {
    pub fn init(spec: &RecognizerSpec, manifest: &Manifest, seed: u64, stream: &str) -> Result<Self> {
        if manifest.num_identities < 2 {
            return Err(TrainError::InvalidConfig(format!(
                "recognition training needs ≥ 2 identities, got {}",
                manifest.num_identities
            )));
        }
        let model = FrModel::new(FrConfig {
            embedding_dim: spec.embedding_dim,
        })?;
        let head = MarginHead::new(
            manifest.num_identities,
            spec.embedding_dim,
            spec.arcface_s,
            spec.arcface_m,
        )?;
        let mut rng = derive_rng(seed, stream);
        let mut params = model.init_params(&mut rng);
        params.absorb_prefixed("", head.init_params(&mut rng));
        Ok(Recognizer {
            model,
            head,
            params,
            label_map: build_label_map(manifest),
        })
    }
}

/// Trains a fresh recognizer on the source train split for a fixed budget and
/// returns its parameters (feature net plus head, canonical names). Stage 1
/// freezes the result as the identity-loss extractor f.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_recognizer(
    source: &Manifest,
    spec: &RecognizerSpec,
    steps: u64,
    batch_size: usize,
    lr: f32,
    betas: (f32, f32),
    seed: u64,
) -> Result<ParamSet> {
    let mut rec = Recognizer::init(spec, source, seed, "fr-pretrain/init")?;
    let pool = source.indices_for_split(Split::Train);
    if pool.is_empty() {
        return Err(TrainError::InvalidConfig(
            "source manifest has no train records".into(),
        ));
    }
    let mut adam = Adam::new(lr, betas.0, betas.1);
    let mut rng = derive_rng(seed, "fr-pretrain/loop");
    for step in 1..=steps {
        let idx = draw_indices(&mut rng, &pool, batch_size);
        let batch = load_batch(source, &idx)?;
        let labels = map_labels(&rec.label_map, &batch.labels)?;
        let loss = margin_step(
            &rec.model,
            &rec.head,
            &mut rec.params,
            &mut adam,
            &batch.images,
            &labels,
        )?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                term: "pretrain l_cla".into(),
            });
        }
    }
    Ok(rec.params)
}
