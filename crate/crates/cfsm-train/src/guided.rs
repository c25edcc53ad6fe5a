//! Style-space FGSM guidance: the one-step sign perturbation of style
//! coefficients that maximally increases the classification loss, mini-batch
//! composition of real and perturbed-synthetic images, and perturbation
//! analytics.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4, ArrayView1};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use cfsm_core::fr::{FrModel, MarginHead, PARAM_HEAD_W};
use cfsm_core::nn::{bind_params, sample_distinct, ParamSet};
use cfsm_core::objectives::margin_classification_loss;
use cfsm_core::subspace::{PARAM_MU, PARAM_U};
use cfsm_core::synthesis::SynthesisModel;
use cfsm_core::Tape;
use cfsm_data::Batch;

use crate::error::{Result, TrainError};

/// δ* = ε · sign(∇_o L_cla), computed at δ = 0 through the frozen synthesis
/// pipeline X* = G(E(X), MLP(U·o + μ)) and the frozen recognizer; sign(0) = 0.
///
/// Returns one `[B, q]` perturbation row per sample.
#[allow(clippy::too_many_arguments)]
pub fn fgsm_style_perturbation(
    fr: &FrModel,
    head: &MarginHead,
    fr_params: &ParamSet,
    synth: &SynthesisModel,
    gen_params: &ParamSet,
    images: &Array4<f32>,
    labels: &[usize],
    o: &Array2<f32>,
    epsilon: f32,
) -> Result<Array2<f32>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(TrainError::InvalidConfig(format!(
            "fgsm epsilon must be positive, got {epsilon}"
        )));
    }
    let batch = images.dim().0;
    if o.nrows() != batch || labels.len() != batch {
        return Err(TrainError::InvalidConfig(format!(
            "fgsm batch mismatch: {batch} images, {} coefficients, {} labels",
            o.nrows(),
            labels.len()
        )));
    }

    let mut tape = Tape::new();
    let gen_bind = bind_params(&mut tape, gen_params, false);
    let fr_bind = bind_params(&mut tape, fr_params, false);
    // o is the only trainable leaf; everything else stays frozen.
    let o_var = tape.param(o.clone().into_dyn());
    let subspace = synth.cfg.subspace();
    let u = gen_bind.var(PARAM_U);
    let mu = gen_bind.var(PARAM_MU);
    let z = subspace.style_codes_var(&mut tape, u, mu, o_var);
    let x = tape.constant(images.clone().into_dyn());
    let x_star = synth.synthesize_with_codes(&mut tape, &gen_bind, x, z)?;
    let e = fr.embed_var(&mut tape, &fr_bind, "", x_star)?;
    let w = fr_bind.var(PARAM_HEAD_W);
    let (loss, _per_sample) = margin_classification_loss(&mut tape, e, head, w, labels)?;

    let mut grads = tape.backward(loss);
    let grad = grads
        .take(o_var)
        .expect("loss depends on o")
        .into_dimensionality::<ndarray::Ix2>()
        .expect("coefficient gradient is rank-2");
    fgsm_from_gradient(&grad, epsilon)
}

/// The sign rule itself: δ* = ε · sign(g) per entry, sign(0) = 0. Rejects
/// non-finite gradients naming the offending sample row.
pub fn fgsm_from_gradient(grad: &Array2<f32>, epsilon: f32) -> Result<Array2<f32>> {
    let mut delta = Array2::<f32>::zeros(grad.raw_dim());
    for (i, row) in grad.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                step: i as u64,
                term: format!("fgsm gradient for sample {i}"),
            });
        }
        for (j, &g) in row.iter().enumerate() {
            delta[[i, j]] = if g > 0.0 {
                epsilon
            } else if g < 0.0 {
                -epsilon
            } else {
                0.0
            };
        }
    }
    Ok(delta)
}

/// Composes a training batch of `round(B · synth_ratio)` perturbed-synthetic
/// images and the complementary real images, positions chosen uniformly
/// without replacement; labels ride along unchanged.
pub fn compose_batch(
    real: &Array4<f32>,
    synthetic: &Array4<f32>,
    labels: &[i64],
    synth_ratio: f32,
    rng: &mut ChaCha12Rng,
) -> Result<Batch> {
    if real.dim() != synthetic.dim() {
        return Err(TrainError::InvalidConfig(format!(
            "compose_batch shape mismatch: {:?} vs {:?}",
            real.dim(),
            synthetic.dim()
        )));
    }
    let batch = real.dim().0;
    if labels.len() != batch {
        return Err(TrainError::InvalidConfig(format!(
            "compose_batch: {} labels for {batch} images",
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&synth_ratio) {
        return Err(TrainError::InvalidConfig(format!(
            "synth_ratio must lie in [0,1], got {synth_ratio}"
        )));
    }
    let take = (batch as f32 * synth_ratio).round() as usize;
    let mut images = real.clone();
    for pos in sample_distinct(rng, batch, take) {
        images
            .index_axis_mut(ndarray::Axis(0), pos)
            .assign(&synthetic.index_axis(ndarray::Axis(0), pos));
    }
    Ok(Batch {
        images,
        labels: labels.to_vec(),
    })
}

/// One (o, o*) pair with its derived diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub o: Vec<f32>,
    pub o_star: Vec<f32>,
    /// cos(o, o*); 1 when both are zero vectors, 0 when exactly one is.
    pub cos_sim: f32,
    /// ‖o*‖ − ‖o‖.
    pub magnitude_delta: f32,
}

impl PerturbationRecord {
    pub fn new(o: ArrayView1<f32>, o_star: ArrayView1<f32>) -> Self {
        let norm = |v: &ArrayView1<f32>| v.dot(v).sqrt();
        let (na, nb) = (norm(&o), norm(&o_star));
        let cos_sim = if na == 0.0 && nb == 0.0 {
            1.0
        } else if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            (o.dot(&o_star) / (na * nb)).clamp(-1.0, 1.0)
        };
        PerturbationRecord {
            o: o.to_vec(),
            o_star: o_star.to_vec(),
            cos_sim,
            magnitude_delta: nb - na,
        }
    }
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges, ascending.
    pub edges: Vec<f32>,
    pub counts: Vec<u64>,
}

fn histogram(values: impl Iterator<Item = f32> + Clone, lo: f32, hi: f32) -> Histogram {
    let hi = if hi > lo { hi } else { lo + 1e-6 };
    let width = (hi - lo) / HISTOGRAM_BINS as f32;
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| lo + width * i as f32)
        .collect();
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for v in values {
        let bin = (((v - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[bin] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerturbationSummary {
    pub cos_sim: Histogram,
    pub magnitude_delta: Histogram,
    /// (cos_sim, magnitude_delta) per record, input order.
    pub scatter: Vec<(f32, f32)>,
}

impl PerturbationSummary {
    /// CSV scatter: header `cos_sim,magnitude_delta`, one row per record.
    pub fn write_scatter_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("cos_sim,magnitude_delta\n");
        for (c, d) in &self.scatter {
            out.push_str(&format!("{c},{d}\n"));
        }
        let mut f = std::fs::File::create(path).map_err(|e| TrainError::io(path, e))?;
        f.write_all(out.as_bytes())
            .map_err(|e| TrainError::io(path, e))
    }
}

/// Bins the records into 50-bin histograms (cosine over the fixed [−1,1]
/// range, magnitude delta over its data range) plus the raw scatter table.
pub fn analyze_perturbations(records: &[PerturbationRecord]) -> Result<PerturbationSummary> {
    if records.is_empty() {
        return Err(TrainError::InvalidConfig(
            "analyze_perturbations needs at least one record".into(),
        ));
    }
    let cos = histogram(records.iter().map(|r| r.cos_sim), -1.0, 1.0);
    let (lo, hi) = records.iter().fold((f32::MAX, f32::MIN), |(lo, hi), r| {
        (lo.min(r.magnitude_delta), hi.max(r.magnitude_delta))
    });
    let delta = histogram(records.iter().map(|r| r.magnitude_delta), lo, hi);
    Ok(PerturbationSummary {
        cos_sim: cos,
        magnitude_delta: delta,
        scatter: records
            .iter()
            .map(|r| (r.cos_sim, r.magnitude_delta))
            .collect(),
    })
}
