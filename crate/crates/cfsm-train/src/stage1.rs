//! Stage-1 training: the synthesis model (encoder, decoder, style MLP),
//! subspace (U, μ), and multi-scale discriminator, optimized with the
//! adversarial, orthogonality, and identity-magnitude losses under a frozen
//! recognition extractor.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::json;

use cfsm_core::checkpoint::{save_checkpoint, CheckpointMeta, RngState, SCHEMA_VERSION};
use cfsm_core::fr::{FrConfig, FrModel};
use cfsm_core::nn::{bind_params, collect_grads, derive_rng, Adam, ParamSet};
use cfsm_core::objectives::{
    discriminator_loss, generator_adv_loss, identity_loss, total_generator_loss, LossWeights,
};
use cfsm_core::subspace::{MagnitudeSchedule, PARAM_MU, PARAM_U};
use cfsm_core::synthesis::{Discriminator, SynthesisConfig, SynthesisModel};
use cfsm_core::Tape;
use cfsm_data::manifest::Split;
use cfsm_data::{load_batch, Manifest};

use crate::classifier::{pretrain_recognizer, RecognizerSpec};
use crate::error::{Result, TrainError};
use crate::metrics::MetricsLogger;
use crate::sampling::draw_indices;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage1Config {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub weights: LossWeights,
    pub schedule: MagnitudeSchedule,
    /// Subspace dimensions: q coefficients in a d-dimensional style space.
    pub q: usize,
    pub d: usize,
    pub image_size: usize,
    /// Unused by stage 1 itself; carried so one config describes both stages.
    pub epsilon: f32,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Fixed pre-training budget for the frozen extractor f.
    pub fr_pretrain_steps: u64,
    pub embedding_dim: usize,
    pub arcface_s: f32,
    pub arcface_m: f32,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 3000,
            batch_size: 16,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            weights: LossWeights::default(),
            schedule: MagnitudeSchedule::default(),
            q: 10,
            d: 128,
            image_size: 32,
            epsilon: 0.314,
            seed: 0,
            checkpoint_every: 1000,
            fr_pretrain_steps: 2000,
            embedding_dim: 128,
            arcface_s: 16.0,
            arcface_m: 0.3,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(TrainError::InvalidConfig("steps must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be ≥ 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("bad lr {}", self.lr)));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(TrainError::InvalidConfig(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if self.checkpoint_every == 0 {
            return Err(TrainError::InvalidConfig("checkpoint_every must be ≥ 1".into()));
        }
        self.weights.validate()?;
        self.schedule.validate()?;
        self.synthesis_config().validate()?;
        Ok(())
    }

    pub fn synthesis_config(&self) -> SynthesisConfig {
        SynthesisConfig {
            image_size: self.image_size,
            coeff_dim: self.q,
            style_dim: self.d,
        }
    }
}

#[derive(Debug)]
pub struct Stage1Artifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub const STAGE1_KIND: &str = cfsm_core::checkpoint::KIND_STAGE1;
/// Prefix under which the frozen extractor is stored inside the checkpoint.
pub const FROZEN_FR_PREFIX: &str = "fr.";

fn checkpoint_state(gen: &ParamSet, disc: &ParamSet, fr: &ParamSet) -> ParamSet {
    let mut all = gen.clone();
    all.absorb_prefixed("", disc.clone());
    all.absorb_prefixed(FROZEN_FR_PREFIX, fr.clone());
    all
}

fn config_meta(cfg: &Stage1Config, step: u64, rng: &rand_chacha::ChaCha12Rng) -> CheckpointMeta {
    let cfg_json = serde_json::to_value(cfg).expect("config serializes");
    let hash = {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(cfg_json.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        kind: STAGE1_KIND.into(),
        step,
        config: json!({ "config": cfg_json, "config_sha256": hash }),
        rng: RngState::capture(rng),
    }
}

/// Pulls a scalar off the tape and aborts with the step and term name if it
/// is not finite.
fn finite(tape: &Tape, v: cfsm_core::Var, step: u64, term: &str) -> Result<f32> {
    let value = tape.scalar(v);
    if !value.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            term: term.into(),
        });
    }
    Ok(value)
}

/// Runs stage-1 training and returns the final checkpoint and metrics paths.
///
/// Per step: draws a labeled source batch X and an unlabeled target batch Y,
/// samples one style coefficient per image, synthesizes X̂, updates the
/// discriminator on (Y real, X̂ fake), then updates the generator side
/// (encoder, decoder, MLP, U, μ) on the weighted adversarial + orthogonality
/// + identity objective, logging every term.
pub fn train_synthesis(
    cfg: &Stage1Config,
    source: &Manifest,
    target: &Manifest,
    out_dir: &Path,
) -> Result<Stage1Artifacts> {
    cfg.validate()?;
    if source.num_identities < 2 {
        return Err(TrainError::InvalidConfig(
            "source manifest must carry ≥ 2 identities".into(),
        ));
    }
    if target.records.iter().any(|r| r.identity_id != -1) {
        return Err(TrainError::InvalidConfig(
            "target manifest must be unlabeled (identity −1 everywhere)".into(),
        ));
    }
    for (name, m) in [("source", source), ("target", target)] {
        if m.image_size != cfg.image_size {
            return Err(TrainError::InvalidConfig(format!(
                "{name} manifest is {}px but config wants {}px",
                m.image_size, cfg.image_size
            )));
        }
        if m.records.is_empty() {
            return Err(TrainError::InvalidConfig(format!("{name} manifest is empty")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;

    // Frozen extractor f: pre-trained for a fixed budget, then never updated.
    let spec = RecognizerSpec {
        embedding_dim: cfg.embedding_dim,
        arcface_s: cfg.arcface_s,
        arcface_m: cfg.arcface_m,
    };
    let fr_params = pretrain_recognizer(
        source,
        &spec,
        cfg.fr_pretrain_steps,
        cfg.batch_size,
        cfg.lr,
        (cfg.adam_beta1, cfg.adam_beta2),
        cfg.seed,
    )?;
    let fr = FrModel::new(FrConfig {
        embedding_dim: cfg.embedding_dim,
    })?;
    let frozen_hash = fr_params.content_hash();

    let synth = SynthesisModel::new(cfg.synthesis_config())?;
    let subspace = cfg.synthesis_config().subspace();
    let mut gen_params = synth.init_params(&mut derive_rng(cfg.seed, "stage1/init-gen"));
    gen_params.absorb_prefixed(
        "",
        subspace.init_params(&mut derive_rng(cfg.seed, "stage1/init-style")),
    );
    let disc = Discriminator::new(cfg.image_size)?;
    let mut disc_params = disc.init_params(&mut derive_rng(cfg.seed, "stage1/init-disc"));

    let mut adam_g = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    let mut adam_d = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    let mut rng = derive_rng(cfg.seed, "stage1/loop");

    let source_pool = source.indices_for_split(Split::Train);
    if source_pool.is_empty() {
        return Err(TrainError::InvalidConfig(
            "source manifest has no train records".into(),
        ));
    }
    let target_pool: Vec<usize> = (0..target.records.len()).collect();

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsLogger::create(&metrics_path)?;
    let final_path = out_dir.join("cfsm.ckpt");

    for step in 1..=cfg.steps {
        let src_idx = draw_indices(&mut rng, &source_pool, cfg.batch_size);
        let tgt_idx = draw_indices(&mut rng, &target_pool, cfg.batch_size);
        let x = load_batch(source, &src_idx)?.images;
        let y = load_batch(target, &tgt_idx)?.images;
        let o: Array2<f32> = subspace.sample_coefficients(&mut rng, cfg.batch_size);
        let magnitudes: Array1<f32> =
            Array1::from_iter(o.rows().into_iter().map(|r| r.dot(&r).sqrt()));

        // Generator tape: X̂ = G(E(X), MLP(U·o + μ)), built once and reused
        // for both the discriminator's fake input and the generator update.
        let mut tape = Tape::new();
        let gen_bind = bind_params(&mut tape, &gen_params, true);
        let x_var = tape.constant(x.clone().into_dyn());
        let o_var = tape.constant(o.into_dyn());
        let u_var = gen_bind.var(PARAM_U);
        let mu_var = gen_bind.var(PARAM_MU);
        let z = subspace.style_codes_var(&mut tape, u_var, mu_var, o_var);
        let x_hat = synth.synthesize_with_codes(&mut tape, &gen_bind, x_var, z)?;
        let x_hat_value = tape.value(x_hat).clone();

        // Discriminator update on (Y real, X̂ fake), X̂ detached.
        let l_d = {
            let mut tape_d = Tape::new();
            let disc_bind = bind_params(&mut tape_d, &disc_params, true);
            let y_var = tape_d.constant(y.into_dyn());
            let fake_var = tape_d.constant(x_hat_value);
            let real_scores = disc.forward(&mut tape_d, &disc_bind, y_var);
            let fake_scores = disc.forward(&mut tape_d, &disc_bind, fake_var);
            let l_d = discriminator_loss(&mut tape_d, &real_scores, &fake_scores)?;
            let value = finite(&tape_d, l_d, step, "l_d")?;
            let mut grads = tape_d.backward(l_d);
            let g = collect_grads(&mut grads, &disc_bind);
            adam_d.step(&mut disc_params, &g)?;
            value
        };

        // Generator update against the *updated* discriminator (bound as
        // constants so no gradient reaches D's parameters).
        let disc_bind = bind_params(&mut tape, &disc_params, false);
        let fake_scores = disc.forward(&mut tape, &disc_bind, x_hat);
        let l_adv = generator_adv_loss(&mut tape, &fake_scores)?;
        let l_ort = subspace.orthogonality_loss_var(&mut tape, u_var);
        let fr_bind = bind_params(&mut tape, &fr_params, false);
        let l_id = identity_loss(
            &mut tape,
            &fr,
            &fr_bind,
            "",
            x_var,
            x_hat,
            &magnitudes,
            &cfg.schedule,
        )?;
        let l_g = total_generator_loss(&mut tape, l_adv, l_ort, l_id, &cfg.weights);

        let v_adv = finite(&tape, l_adv, step, "l_adv")?;
        let v_ort = finite(&tape, l_ort, step, "l_ort")?;
        let v_id = finite(&tape, l_id, step, "l_id")?;
        let v_g = finite(&tape, l_g, step, "l_g")?;

        let mut grads = tape.backward(l_g);
        let g = collect_grads(&mut grads, &gen_bind);
        adam_g.step(&mut gen_params, &g)?;

        metrics.log(&json!({
            "step": step,
            "l_d": l_d,
            "l_adv": v_adv,
            "l_ort": v_ort,
            "l_id": v_id,
            "l_g": v_g,
        }))?;

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let state = checkpoint_state(&gen_params, &disc_params, &fr_params);
            let meta = config_meta(cfg, step, &rng);
            let path = if step == cfg.steps {
                final_path.clone()
            } else {
                out_dir.join(format!("cfsm_{step:06}.ckpt"))
            };
            save_checkpoint(&path, &meta, &state)?;
        }
    }

    assert_eq!(
        frozen_hash,
        fr_params.content_hash(),
        "frozen extractor must not change during stage 1"
    );

    Ok(Stage1Artifacts {
        checkpoint: final_path,
        metrics: metrics_path,
    })
}

/// Splits a stage-1 checkpoint state back into (generator+style,
/// discriminator, frozen extractor) parameter sets.
pub fn split_stage1_state(state: &ParamSet) -> (ParamSet, ParamSet, ParamSet) {
    let fr = state.extract_prefixed(FROZEN_FR_PREFIX);
    let mut gen = ParamSet::new();
    let mut disc = ParamSet::new();
    for (name, value) in state.iter() {
        if name.starts_with(FROZEN_FR_PREFIX) {
            continue;
        }
        if name.starts_with("disc.") {
            disc.insert(name.clone(), value.clone());
        } else {
            gen.insert(name.clone(), value.clone());
        }
    }
    (gen, disc, fr)
}
