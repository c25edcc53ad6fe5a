//! End-to-end gallery/probe evaluation of a recognizer checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use cfsm_core::checkpoint::{load_checkpoint, KIND_FR};
use cfsm_core::fr::{FrConfig, FrModel};
use cfsm_core::nn::{derive_rng, ParamSet};
use cfsm_data::imageio::load_png;
use cfsm_data::manifest::Split;
use cfsm_data::{apply_degradation, load_batch, DegradationSpec, Manifest};

use crate::error::{EvalError, Result};
use crate::metrics::{rank_k, tar_at_far, verification_scores, TarAtFar};

/// Rank grid of the report.
pub const EVAL_RANKS: [usize; 2] = [1, 5];
/// FAR grid of the report; the toy pair counts cannot resolve lower rates.
pub const EVAL_FARS: [f64; 2] = [1e-1, 1e-2];
/// Images embedded per forward pass.
pub const EMBED_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct EvalCounts {
    pub gallery: usize,
    pub probe: usize,
    pub genuine_pairs: usize,
    pub impostor_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank_k: BTreeMap<usize, f64>,
    pub tar_at_far: Vec<TarAtFar>,
    pub counts: EvalCounts,
}

/// Record indices used for an evaluation role: the matching test split when
/// the manifest has one, otherwise every labeled record.
fn eval_indices(manifest: &Manifest, split: Split) -> Result<Vec<usize>> {
    let from_split = manifest.indices_for_split(split);
    if !from_split.is_empty() {
        return Ok(from_split);
    }
    let labeled: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.identity_id >= 0)
        .map(|(i, _)| i)
        .collect();
    if labeled.is_empty() {
        return Err(EvalError::InvalidArgument(format!(
            "manifest under {} has no labeled records",
            manifest.root.display()
        )));
    }
    Ok(labeled)
}

/// Loads one batch, degrading each image with a per-position seeded rng
/// before the [0,1] → [−1,1] mapping.
fn load_degraded_batch(
    manifest: &Manifest,
    indices: &[usize],
    positions: &[usize],
    spec: &DegradationSpec,
    seed: u64,
) -> Result<(Array4<f32>, Vec<i64>)> {
    let size = manifest.image_size;
    let mut images = Array4::<f32>::zeros((indices.len(), 3, size, size));
    let mut labels = Vec::with_capacity(indices.len());
    for (b, (&idx, &pos)) in indices.iter().zip(positions).enumerate() {
        let record = manifest.records.get(idx).ok_or_else(|| {
            EvalError::InvalidArgument(format!("record index {idx} out of range"))
        })?;
        let img = load_png(&manifest.resolve(record))?;
        let mut rng = derive_rng(seed, &format!("eval/degrade/{pos}"));
        let degraded = apply_degradation(&img, spec, &mut rng)?;
        let (h, w, _) = degraded.dim();
        if h != size || w != size {
            return Err(EvalError::InvalidArgument(format!(
                "degraded image is {h}×{w}, manifest says {size}×{size}"
            )));
        }
        for c in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    images[[b, c, y, x]] = degraded[[y, x, c]] * 2.0 - 1.0;
                }
            }
        }
        labels.push(record.identity_id);
    }
    Ok((images, labels))
}

fn embed_records(
    model: &FrModel,
    params: &ParamSet,
    manifest: &Manifest,
    indices: &[usize],
    degradation: Option<&DegradationSpec>,
    seed: u64,
) -> Result<(Array2<f32>, Vec<i64>)> {
    let mut embeddings = Array2::<f32>::zeros((indices.len(), model.cfg.embedding_dim));
    let mut labels = Vec::with_capacity(indices.len());
    let mut row = 0;
    for (chunk_no, chunk) in indices.chunks(EMBED_BATCH).enumerate() {
        let (images, batch_labels) = match degradation {
            None => {
                let batch = load_batch(manifest, chunk)?;
                (batch.images, batch.labels)
            }
            Some(spec) => {
                let positions: Vec<usize> =
                    (0..chunk.len()).map(|i| chunk_no * EMBED_BATCH + i).collect();
                load_degraded_batch(manifest, chunk, &positions, spec, seed)?
            }
        };
        let e = model.embed(params, "", &images)?;
        embeddings
            .slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(&e.view());
        labels.extend(batch_labels);
        row += chunk.len();
    }
    debug_assert_eq!(row, indices.len());
    Ok((embeddings, labels))
}

/// Embeds the gallery and (optionally degraded) probe records with the
/// checkpointed recognizer and reports rank-{1,5} plus TAR@FAR {1e−1, 1e−2}.
/// `seed` drives only the probe degradation draws.
pub fn evaluate(
    fr_checkpoint: &Path,
    gallery: &Manifest,
    probe: &Manifest,
    degradation: Option<&DegradationSpec>,
    seed: u64,
) -> Result<EvalReport> {
    let (meta, params) = load_checkpoint(fr_checkpoint)?;
    if meta.kind != KIND_FR {
        return Err(EvalError::Checkpoint {
            path: fr_checkpoint.to_path_buf(),
            detail: format!("kind `{}`, expected `{KIND_FR}`", meta.kind),
        });
    }
    let fc = params.get("fc.w").map_err(|_| EvalError::Checkpoint {
        path: fr_checkpoint.to_path_buf(),
        detail: "missing fc.w — not a recognizer checkpoint".into(),
    })?;
    let embedding_dim = fc.shape()[0];
    let model = FrModel::new(FrConfig { embedding_dim })?;

    let gallery_idx = eval_indices(gallery, Split::TestGallery)?;
    let probe_idx = eval_indices(probe, Split::TestProbe)?;
    let (g_emb, g_labels) = embed_records(&model, &params, gallery, &gallery_idx, None, seed)?;
    let (p_emb, p_labels) =
        embed_records(&model, &params, probe, &probe_idx, degradation, seed)?;

    let ranks = rank_k(&g_emb, &g_labels, &p_emb, &p_labels, &EVAL_RANKS)?;
    let (genuine, impostor) = verification_scores(&g_emb, &g_labels, &p_emb, &p_labels)?;
    let points = tar_at_far(&genuine, &impostor, &EVAL_FARS)?;

    Ok(EvalReport {
        rank_k: ranks,
        tar_at_far: points,
        counts: EvalCounts {
            gallery: gallery_idx.len(),
            probe: probe_idx.len(),
            genuine_pairs: genuine.len(),
            impostor_pairs: impostor.len(),
        },
    })
}
