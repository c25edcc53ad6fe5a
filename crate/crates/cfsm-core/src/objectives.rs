//! Training losses: the GAN pair, the identity-magnitude loss, the weighted
//! generator total, and the angular-margin classification loss.

use ndarray::Array1;

use crate::error::{CoreError, Result};
use crate::fr::{FrModel, MarginHead};
use crate::graph::{Tape, Var};
use crate::nn::TapeBinding;
use crate::subspace::MagnitudeSchedule;

/// Weights of the generator objective. Defaults: λ_adv = 1, λ_ort = 1,
/// λ_id = 8.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f32,
    pub lambda_ort: f32,
    pub lambda_id: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_adv: 1.0,
            lambda_ort: 1.0,
            lambda_id: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_ort", self.lambda_ort),
            ("lambda_id", self.lambda_id),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CoreError::InvalidArgument(format!(
                    "loss weight {name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_scales(name: &str, real: usize, fake: usize) -> Result<()> {
    if real == 0 || real != fake {
        return Err(CoreError::InvalidArgument(format!(
            "{name}: need matching non-empty logit lists, got {real} real / {fake} fake"
        )));
    }
    Ok(())
}

/// Sigmoid cross-entropy of the discriminator against targets 1 (real) and
/// 0 (fake), in logit space, averaged over scales:
/// mean_k [ mean softplus(−real_k) + mean softplus(fake_k) ].
///
/// Fake logits are expected to come from a detached generator output.
pub fn discriminator_loss(tape: &mut Tape, real: &[Var], fake: &[Var]) -> Result<Var> {
    check_scales("discriminator_loss", real.len(), fake.len())?;
    let mut total: Option<Var> = None;
    for (&r, &f) in real.iter().zip(fake) {
        let nr = tape.neg(r);
        let sr = tape.softplus(nr);
        let mr = tape.mean_all(sr);
        let sf = tape.softplus(f);
        let mf = tape.mean_all(sf);
        let term = tape.add(mr, mf);
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(tape.mul_scalar(total.unwrap(), 1.0 / real.len() as f32))
}

/// Non-saturating generator loss: mean over scales of mean softplus(−fake).
pub fn generator_adv_loss(tape: &mut Tape, fake: &[Var]) -> Result<Var> {
    check_scales("generator_adv_loss", fake.len(), fake.len())?;
    let mut total: Option<Var> = None;
    for &f in fake {
        let nf = tape.neg(f);
        let sf = tape.softplus(nf);
        let m = tape.mean_all(sf);
        total = Some(match total {
            Some(t) => tape.add(t, m),
            None => m,
        });
    }
    Ok(tape.mul_scalar(total.unwrap(), 1.0 / fake.len() as f32))
}

/// Core of the identity loss on pre-computed, L2-normalized embeddings:
/// mean_i [ (1 − cos(e_x[i], e_xh[i])) − g(a_i) ]².
pub fn identity_loss_from_embeddings(
    tape: &mut Tape,
    e_x: Var,
    e_xh: Var,
    magnitudes: &Array1<f32>,
    schedule: &MagnitudeSchedule,
) -> Result<Var> {
    schedule.validate()?;
    let sx = tape.shape(e_x).to_vec();
    let sh = tape.shape(e_xh).to_vec();
    if sx.len() != 2 || sx != sh {
        return Err(CoreError::ShapeMismatch {
            op: "identity_loss",
            detail: format!("embedding shapes {sx:?} vs {sh:?}"),
        });
    }
    if magnitudes.len() != sx[0] {
        return Err(CoreError::InvalidArgument(format!(
            "identity_loss: {} magnitudes for batch of {}",
            magnitudes.len(),
            sx[0]
        )));
    }
    let targets = magnitudes.mapv(|a| schedule.target(a));
    let prod = tape.mul(e_x, e_xh);
    let cos = tape.sum_rows(prod);
    let ncos = tape.neg(cos);
    let dissim = tape.add_scalar(ncos, 1.0);
    let tv = tape.constant(targets.into_dyn());
    let diff = tape.sub(dissim, tv);
    let sq = tape.mul(diff, diff);
    Ok(tape.mean_all(sq))
}

/// Identity-magnitude loss between a source batch and its synthesized
/// counterpart. The extractor runs under `prefix` in `bind`; freeze it by
/// binding its parameters as constants — no gradient should reach f.
pub fn identity_loss(
    tape: &mut Tape,
    f: &FrModel,
    bind: &TapeBinding,
    prefix: &str,
    x: Var,
    x_hat: Var,
    magnitudes: &Array1<f32>,
    schedule: &MagnitudeSchedule,
) -> Result<Var> {
    let e_x = f.embed_var(tape, bind, prefix, x)?;
    let e_xh = f.embed_var(tape, bind, prefix, x_hat)?;
    identity_loss_from_embeddings(tape, e_x, e_xh, magnitudes, schedule)
}

/// λ_adv·adv + λ_ort·ort + λ_id·id.
pub fn total_generator_loss(tape: &mut Tape, adv: Var, ort: Var, id: Var, w: &LossWeights) -> Var {
    let a = tape.mul_scalar(adv, w.lambda_adv);
    let o = tape.mul_scalar(ort, w.lambda_ort);
    let i = tape.mul_scalar(id, w.lambda_id);
    let ao = tape.add(a, o);
    tape.add(ao, i)
}

/// Angular-margin softmax loss. Embeddings and the class weight rows are both
/// L2-normalized on the tape; the target-class cosine cos θ_y is replaced by
/// cos(θ_y + m) and everything is scaled by s before cross-entropy.
///
/// Returns the batch-mean loss variable plus per-sample loss values.
pub fn margin_classification_loss(
    tape: &mut Tape,
    embeddings: Var,
    head: &MarginHead,
    w: Var,
    labels: &[usize],
) -> Result<(Var, Array1<f32>)> {
    let es = tape.shape(embeddings).to_vec();
    let ws = tape.shape(w).to_vec();
    if es.len() != 2 || es[1] != head.embedding_dim {
        return Err(CoreError::ShapeMismatch {
            op: "margin_classification_loss",
            detail: format!("embeddings {es:?}, expected [B,{}]", head.embedding_dim),
        });
    }
    if ws != [head.num_classes, head.embedding_dim] {
        return Err(CoreError::ShapeMismatch {
            op: "margin_classification_loss",
            detail: format!(
                "weights {ws:?}, expected [{},{}]",
                head.num_classes, head.embedding_dim
            ),
        });
    }
    if labels.len() != es[0] {
        return Err(CoreError::InvalidArgument(format!(
            "margin loss: {} labels for batch of {}",
            labels.len(),
            es[0]
        )));
    }
    for &l in labels {
        if l >= head.num_classes {
            return Err(CoreError::InvalidArgument(format!(
                "label {l} out of range for {} classes",
                head.num_classes
            )));
        }
    }
    let (batch, classes) = (es[0], head.num_classes);
    let mut one_hot = ndarray::Array2::<f32>::zeros((batch, classes));
    for (i, &l) in labels.iter().enumerate() {
        one_hot[[i, l]] = 1.0;
    }
    let y = tape.constant(one_hot.into_dyn());

    let e_n = crate::nn::row_l2_normalize(tape, embeddings)?;
    let w_n = crate::nn::row_l2_normalize(tape, w)?;
    let cos = tape.matmul_ex(e_n, false, w_n, true);

    // cos(θ+m) = cosθ·cos m − sinθ·sin m, with sinθ from 1−cos² (guarded).
    let cos2 = tape.mul(cos, cos);
    let ncos2 = tape.neg(cos2);
    let one_m = tape.add_scalar(ncos2, 1.0);
    let clamped = tape.clamp_min(one_m, 1e-12);
    let sin = tape.sqrt(clamped);
    let (cm, sm) = (head.margin.cos(), head.margin.sin());
    let ct = tape.mul_scalar(cos, cm - 1.0);
    let st = tape.mul_scalar(sin, sm);
    let shift = tape.sub(ct, st);
    let masked = tape.mul(y, shift);
    let adjusted = tape.add(cos, masked);
    let logits = tape.mul_scalar(adjusted, head.scale);

    // Row-wise stable log-sum-exp: the row max enters as a constant shift.
    let logit_vals = tape.value(logits).clone();
    let m2 = logit_vals
        .into_dimensionality::<ndarray::Ix2>()
        .expect("logits are rank-2");
    let row_max = Array1::from_iter(
        m2.rows()
            .into_iter()
            .map(|r| r.iter().cloned().fold(f32::NEG_INFINITY, f32::max)),
    );
    let neg_max = tape.constant(row_max.mapv(|v| -v).into_dyn());
    let max_c = tape.constant(row_max.into_dyn());
    let shifted = tape.add_col_vec(logits, neg_max);
    let ex = tape.exp(shifted);
    let sums = tape.sum_rows(ex);
    let lns = tape.ln(sums);
    let lse = tape.add(lns, max_c);
    let picked = tape.mul(logits, y);
    let target = tape.sum_rows(picked);
    let per_sample = tape.sub(lse, target);
    let mean = tape.mean_all(per_sample);

    let per_vals = tape
        .value(per_sample)
        .clone()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("per-sample losses are rank-1");
    Ok((mean, per_vals))
}
