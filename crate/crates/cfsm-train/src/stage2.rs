//! Stage-2 recognition training: optimize the embedding network with the
//! margin classification loss on batches that are real (baseline), mixed with
//! random-style synthetics, or mixed with FGSM-guided synthetics; the
//! synthesis model and subspace stay frozen throughout.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use cfsm_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, RngState, SCHEMA_VERSION};
use cfsm_core::nn::{derive_rng, Adam};
use cfsm_core::synthesis::{SynthesisConfig, SynthesisModel};
use cfsm_data::manifest::Split;
use cfsm_data::{load_batch, Manifest};

use crate::classifier::{map_labels, margin_step, Recognizer, RecognizerSpec};
use crate::error::{Result, TrainError};
use crate::guided::{compose_batch, fgsm_style_perturbation, PerturbationRecord};
use crate::metrics::MetricsLogger;
use crate::sampling::draw_indices;
use crate::stage1::{split_stage1_state, STAGE1_KIND};

pub const DEFAULT_EPSILON: f32 = 0.314;
pub const DEFAULT_SYNTH_RATIO: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    RandomStyle,
    Guided,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::RandomStyle => "random_style",
            Mode::Guided => "guided",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "random_style" | "random" => Ok(Mode::RandomStyle),
            "guided" => Ok(Mode::Guided),
            other => Err(TrainError::InvalidConfig(format!(
                "unknown mode `{other}` (expected baseline|random_style|guided)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Stage2Config {
    pub mode: Mode,
    /// FGSM budget; only read in guided mode (default 0.314 when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f32>,
    /// Synthetic share of each batch; only read in non-baseline modes
    /// (default 0.5 when absent).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth_ratio: Option<f32>,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub arcface_s: f32,
    pub arcface_m: f32,
    pub embedding_dim: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Store (o, o*) analytics records in guided mode.
    pub record_perturbations: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            mode: Mode::Baseline,
            epsilon: None,
            synth_ratio: None,
            steps: 3000,
            batch_size: 32,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            arcface_s: 16.0,
            arcface_m: 0.3,
            embedding_dim: 128,
            seed: 0,
            checkpoint_every: 1000,
            record_perturbations: false,
        }
    }
}

impl Stage2Config {
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
        if self.checkpoint_every == 0 {
            return Err(TrainError::InvalidConfig("checkpoint_every must be ≥ 1".into()));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(TrainError::InvalidConfig(format!("epsilon must be positive, got {e}")));
            }
        }
        if let Some(r) = self.synth_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(TrainError::InvalidConfig(format!(
                    "synth_ratio must lie in [0,1], got {r}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct Stage2Artifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Written only in guided mode with `record_perturbations`.
    pub perturbations: Option<PathBuf>,
}

pub const STAGE2_KIND: &str = cfsm_core::checkpoint::KIND_FR;

/// Trains the recognizer per the configured mode. Non-baseline modes need a
/// stage-1 checkpoint whose synthesis/subspace parameters stay frozen — their
/// content hash is asserted unchanged after the run.
pub fn train_fr(
    cfg: &Stage2Config,
    labeled: &Manifest,
    synthesis_checkpoint: Option<&Path>,
    out_dir: &Path,
) -> Result<Stage2Artifacts> {
    cfg.validate()?;
    if labeled.num_identities < 2 {
        return Err(TrainError::InvalidConfig(
            "labeled manifest must carry ≥ 2 identities".into(),
        ));
    }

    // Resolve the synthesis side (absent exactly in baseline mode).
    let synthesis = match (cfg.mode, synthesis_checkpoint) {
        (Mode::Baseline, _) => None,
        (_, None) => {
            return Err(TrainError::InvalidConfig(format!(
                "mode {} requires a stage-1 synthesis checkpoint",
                cfg.mode.as_str()
            )))
        }
        (_, Some(path)) => {
            let (meta, state) = load_checkpoint(path)?;
            if meta.kind != STAGE1_KIND {
                return Err(TrainError::InvalidConfig(format!(
                    "{} is a `{}` checkpoint, expected `{STAGE1_KIND}`",
                    path.display(),
                    meta.kind
                )));
            }
            let (gen_params, _disc, _fr) = split_stage1_state(&state);
            let u_shape = gen_params.get("style.U")?.shape().to_vec();
            let model = SynthesisModel::new(SynthesisConfig {
                image_size: labeled.image_size,
                coeff_dim: u_shape[1],
                style_dim: u_shape[0],
            })?;
            Some((model, gen_params))
        }
    };

    let epsilon = cfg.epsilon.unwrap_or(DEFAULT_EPSILON);
    let synth_ratio = cfg.synth_ratio.unwrap_or(DEFAULT_SYNTH_RATIO);

    fs::create_dir_all(out_dir).map_err(|e| TrainError::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics = MetricsLogger::create(&metrics_path)?;

    // Run header: mode always; ε and ratio only when the mode reads them.
    let mut header = json!({
        "event": "header",
        "mode": cfg.mode.as_str(),
        "config": serde_json::to_value(cfg).expect("config serializes"),
    });
    if cfg.mode != Mode::Baseline {
        header["synth_ratio"] = json!(synth_ratio);
    }
    if cfg.mode == Mode::Guided {
        header["epsilon"] = json!(epsilon);
    }
    metrics.log(&header)?;

    let spec = RecognizerSpec {
        embedding_dim: cfg.embedding_dim,
        arcface_s: cfg.arcface_s,
        arcface_m: cfg.arcface_m,
    };
    let mut rec = Recognizer::init(&spec, labeled, cfg.seed, "stage2/init-fr")?;
    let mut adam = Adam::new(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
    let mut rng = derive_rng(cfg.seed, "stage2/loop");

    let pool = labeled.indices_for_split(Split::Train);
    if pool.is_empty() {
        return Err(TrainError::InvalidConfig(
            "labeled manifest has no train records".into(),
        ));
    }

    let frozen_hash = synthesis.as_ref().map(|(_, p)| p.content_hash());
    let subspace = synthesis.as_ref().map(|(m, _)| m.cfg.subspace());
    let mut records: Vec<PerturbationRecord> = Vec::new();
    let final_path = out_dir.join("fr.ckpt");

    for step in 1..=cfg.steps {
        let idx = draw_indices(&mut rng, &pool, cfg.batch_size);
        let real = load_batch(labeled, &idx)?;
        let labels_mapped = map_labels(&rec.label_map, &real.labels)?;

        let batch = match (&synthesis, cfg.mode) {
            (None, _) => real,
            (Some((model, gen_params)), mode) => {
                let subspace = subspace.as_ref().expect("subspace present with synthesis");
                let o = subspace.sample_coefficients(&mut rng, cfg.batch_size);
                let o_final = if mode == Mode::Guided {
                    let delta = fgsm_style_perturbation(
                        &rec.model,
                        &rec.head,
                        &rec.params,
                        model,
                        gen_params,
                        &real.images,
                        &labels_mapped,
                        &o,
                        epsilon,
                    )?;
                    let o_star = &o + &delta;
                    if cfg.record_perturbations {
                        for (a, b) in o.rows().into_iter().zip(o_star.rows()) {
                            records.push(PerturbationRecord::new(a, b));
                        }
                    }
                    o_star
                } else {
                    o
                };
                let x_star = model.synthesize(gen_params, &o_final, &real.images)?;
                compose_batch(&real.images, &x_star, &real.labels, synth_ratio, &mut rng)?
            }
        };

        let l_cla = margin_step(
            &rec.model,
            &rec.head,
            &mut rec.params,
            &mut adam,
            &batch.images,
            &labels_mapped,
        )?;
        if !l_cla.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                term: "l_cla".into(),
            });
        }
        metrics.log(&json!({ "step": step, "l_cla": l_cla }))?;

        if step % cfg.checkpoint_every == 0 || step == cfg.steps {
            let meta = CheckpointMeta {
                schema_version: SCHEMA_VERSION,
                kind: STAGE2_KIND.into(),
                step,
                config: serde_json::to_value(cfg).expect("config serializes"),
                rng: RngState::capture(&rng),
            };
            let path = if step == cfg.steps {
                final_path.clone()
            } else {
                out_dir.join(format!("fr_{step:06}.ckpt"))
            };
            save_checkpoint(&path, &meta, &rec.params)?;
        }
    }

    if let (Some(before), Some((_, gen_params))) = (frozen_hash, &synthesis) {
        assert_eq!(
            before,
            gen_params.content_hash(),
            "synthesis/subspace parameters must stay frozen during stage 2"
        );
    }

    let perturbations = if cfg.mode == Mode::Guided && cfg.record_perturbations {
        let path = out_dir.join("perturbations.jsonl");
        let mut logger = MetricsLogger::create(&path)?;
        for r in &records {
            logger.log(&serde_json::to_value(r).expect("record serializes"))?;
        }
        Some(path)
    } else {
        None
    };

    Ok(Stage2Artifacts {
        checkpoint: final_path,
        metrics: metrics_path,
        perturbations,
    })
}

/// Reads back a `perturbations.jsonl` file written by [`train_fr`].
pub fn load_perturbation_records(path: &Path) -> Result<Vec<PerturbationRecord>> {
    crate::metrics::read_jsonl(path)?
        .into_iter()
        .map(|v| {
            serde_json::from_value(v)
                .map_err(|e| TrainError::InvalidConfig(format!("bad perturbation record: {e}")))
        })
        .collect()
}
