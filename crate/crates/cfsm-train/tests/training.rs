use std::path::{Path, PathBuf};

use ndarray::array;

use cfsm_core::checkpoint::load_checkpoint;
use cfsm_core::fr::{FrConfig, FrModel};
use cfsm_core::nn::derive_rng;
use cfsm_core::subspace::MagnitudeSchedule;
use cfsm_core::synthesis::{SynthesisConfig, SynthesisModel};
use cfsm_core::objectives::LossWeights;
use cfsm_core::Tape;
use cfsm_data::manifest::Split;
use cfsm_data::{build_target_set, generate_toy_dataset, load_batch, DegradationSpec, Manifest};
use cfsm_train::classifier::{pretrain_recognizer, Recognizer, RecognizerSpec};
use cfsm_train::metrics::read_jsonl;
use cfsm_train::stage1::{split_stage1_state, train_synthesis, Stage1Config, STAGE1_KIND};
use cfsm_train::stage2::{train_fr, Mode, Stage2Config, STAGE2_KIND};
use cfsm_train::{fgsm_from_gradient, fgsm_style_perturbation, load_perturbation_records};

fn tiny_dataset(dir: &Path) -> (Manifest, Manifest) {
    let source = generate_toy_dataset(4, 4, 32, 7, &dir.join("src")).unwrap();
    let target = build_target_set(
        &source,
        &DegradationSpec::mixed(),
        1.0,
        3,
        &dir.join("tgt"),
    )
    .unwrap();
    (source, target)
}

fn tiny_stage1_config() -> Stage1Config {
    Stage1Config {
        steps: 3,
        batch_size: 2,
        q: 3,
        d: 16,
        image_size: 32,
        checkpoint_every: 2,
        fr_pretrain_steps: 2,
        embedding_dim: 32,
        ..Stage1Config::default()
    }
}

fn run_tiny_stage1(dir: &Path) -> (Manifest, PathBuf) {
    let (source, target) = tiny_dataset(dir);
    let out = train_synthesis(&tiny_stage1_config(), &source, &target, &dir.join("run")).unwrap();
    (source, out.checkpoint)
}

#[test]
fn stage1_short_run_logs_checkpoints_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target) = tiny_dataset(dir.path());
    let cfg = tiny_stage1_config();

    let a = train_synthesis(&cfg, &source, &target, &dir.path().join("a")).unwrap();
    let rows = read_jsonl(&a.metrics).unwrap();
    assert_eq!(rows.len(), 3, "one metrics object per step");
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row["step"], i as u64 + 1);
        for key in ["l_d", "l_adv", "l_ort", "l_id", "l_g"] {
            assert!(row[key].is_number(), "step {} missing {key}", i + 1);
        }
    }
    // Intermediate checkpoint at step 2 plus the final archive.
    assert!(dir.path().join("a/cfsm_000002.ckpt").exists());
    let (meta, state) = load_checkpoint(&a.checkpoint).unwrap();
    assert_eq!(meta.kind, STAGE1_KIND);
    assert_eq!(meta.step, 3);
    assert_eq!(meta.config["config"]["batch_size"], 2);
    assert_eq!(meta.config["config"]["lr"], 1e-4f32 as f64);
    let (gen, disc, fr) = split_stage1_state(&state);
    assert!(gen.contains("style.U") && gen.contains("enc.conv1.w") && gen.contains("mlp.fc3.w"));
    assert!(disc.contains("disc.k0.conv1.w") && disc.names().count() == 24);
    assert!(fr.contains("conv1.w") && fr.contains("fc.w") && fr.contains("head.W"));

    // Same seed, fresh directory: bit-identical logs and checkpoint.
    let b = train_synthesis(&cfg, &source, &target, &dir.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(&a.metrics).unwrap(),
        std::fs::read(&b.metrics).unwrap()
    );
    assert_eq!(
        std::fs::read(&a.checkpoint).unwrap(),
        std::fs::read(&b.checkpoint).unwrap()
    );

    // Different seed diverges.
    let cfg2 = Stage1Config { seed: 1, ..cfg };
    let c = train_synthesis(&cfg2, &source, &target, &dir.path().join("c")).unwrap();
    assert_ne!(
        std::fs::read(&a.metrics).unwrap(),
        std::fs::read(&c.metrics).unwrap()
    );
}

#[test]
fn stage1_rejects_labeled_targets_and_size_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target) = tiny_dataset(dir.path());
    let cfg = tiny_stage1_config();
    // Source offered as target: labeled records must be refused.
    let err = train_synthesis(&cfg, &source, &source, &dir.path().join("x")).unwrap_err();
    assert!(err.to_string().contains("unlabeled"));
    let bad_cfg = Stage1Config {
        image_size: 64,
        ..cfg
    };
    assert!(train_synthesis(&bad_cfg, &source, &target, &dir.path().join("y")).is_err());
}

#[test]
fn linear_surrogate_matches_analytic_sign_rule() {
    // L = w·o is linear, so ∇_o L = w and δ* must equal ε·sign(w) exactly,
    // with the zero component mapped to zero.
    let w = array![[0.5f32, -2.0, 0.0, 3.0]];
    let o0 = array![[0.3f32, -1.2, 0.7, 0.1]];
    let mut tape = Tape::new();
    let o = tape.param(o0.into_dyn());
    let wc = tape.constant(w.clone().into_dyn());
    let prod = tape.mul(o, wc);
    let loss = tape.sum_all(prod);
    let mut grads = tape.backward(loss);
    let grad = grads
        .take(o)
        .unwrap()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    assert_eq!(grad, w);
    let eps = 0.314f32;
    let delta = fgsm_from_gradient(&grad, eps).unwrap();
    assert_eq!(delta, array![[eps, -eps, 0.0, eps]]);
}

#[test]
fn fgsm_rejects_non_finite_gradients_naming_the_sample() {
    let grad = array![[0.1f32, 0.2], [f32::NAN, 0.0]];
    let err = fgsm_from_gradient(&grad, 0.1).unwrap_err();
    assert!(err.to_string().contains("sample 1"), "{err}");
}

#[test]
fn fgsm_through_pipeline_respects_budget_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let source = generate_toy_dataset(4, 4, 32, 7, &dir.path().join("src")).unwrap();

    let synth = SynthesisModel::new(SynthesisConfig {
        image_size: 32,
        coeff_dim: 3,
        style_dim: 16,
    })
    .unwrap();
    let subspace = synth.cfg.subspace();
    let mut gen_params = synth.init_params(&mut derive_rng(0, "fgsm/gen"));
    gen_params.absorb_prefixed("", subspace.init_params(&mut derive_rng(0, "fgsm/style")));

    let spec = RecognizerSpec {
        embedding_dim: 32,
        arcface_s: 16.0,
        arcface_m: 0.3,
    };
    let rec = Recognizer::init(&spec, &source, 0, "fgsm/fr").unwrap();

    let train = source.indices_for_split(Split::Train);
    let batch = load_batch(&source, &train[..2]).unwrap();
    let labels = vec![0usize, 0];
    let o = subspace.sample_coefficients(&mut derive_rng(0, "fgsm/o"), 2);

    let eps = 0.25f32;
    let delta = fgsm_style_perturbation(
        &rec.model,
        &rec.head,
        &rec.params,
        &synth,
        &gen_params,
        &batch.images,
        &labels,
        &o,
        eps,
    )
    .unwrap();
    assert_eq!(delta.dim(), (2, 3));
    let mut nonzero = 0;
    for &v in delta.iter() {
        assert!(
            v == 0.0 || v == eps || v == -eps,
            "components live in {{−ε, 0, ε}}, got {v}"
        );
        if v != 0.0 {
            nonzero += 1;
        }
    }
    assert!(nonzero > 0, "a live pipeline should have nonzero gradients");

    let again = fgsm_style_perturbation(
        &rec.model,
        &rec.head,
        &rec.params,
        &synth,
        &gen_params,
        &batch.images,
        &labels,
        &o,
        eps,
    )
    .unwrap();
    assert_eq!(delta, again);

    assert!(fgsm_style_perturbation(
        &rec.model,
        &rec.head,
        &rec.params,
        &synth,
        &gen_params,
        &batch.images,
        &labels,
        &o,
        -1.0,
    )
    .is_err());
}

#[test]
fn stage2_baseline_runs_without_synthesis_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let source = generate_toy_dataset(4, 4, 32, 7, &dir.path().join("src")).unwrap();
    let cfg = Stage2Config {
        mode: Mode::Baseline,
        steps: 2,
        batch_size: 4,
        embedding_dim: 32,
        ..Stage2Config::default()
    };
    let out = train_fr(&cfg, &source, None, &dir.path().join("run")).unwrap();
    let rows = read_jsonl(&out.metrics).unwrap();
    assert_eq!(rows.len(), 3, "header plus one line per step");
    assert_eq!(rows[0]["event"], "header");
    assert_eq!(rows[0]["mode"], "baseline");
    assert!(
        rows[0].get("epsilon").is_none() && rows[0].get("synth_ratio").is_none(),
        "baseline ignores ε and ratio"
    );
    assert!(rows[1]["l_cla"].is_number());
    let (meta, params) = load_checkpoint(&out.checkpoint).unwrap();
    assert_eq!(meta.kind, STAGE2_KIND);
    assert!(params.contains("conv1.w") && params.contains("head.W"));
    assert!(out.perturbations.is_none());
}

#[test]
fn stage2_synthetic_modes_require_checkpoint_and_guided_records() {
    let dir = tempfile::tempdir().unwrap();
    let (source, ckpt) = run_tiny_stage1(dir.path());

    let guided_cfg = Stage2Config {
        mode: Mode::Guided,
        steps: 2,
        batch_size: 2,
        embedding_dim: 32,
        record_perturbations: true,
        ..Stage2Config::default()
    };
    let err = train_fr(&guided_cfg, &source, None, &dir.path().join("no-ckpt")).unwrap_err();
    assert!(err.to_string().contains("checkpoint"), "{err}");

    let out = train_fr(&guided_cfg, &source, Some(&ckpt), &dir.path().join("guided")).unwrap();
    let rows = read_jsonl(&out.metrics).unwrap();
    assert_eq!(rows[0]["mode"], "guided");
    assert_eq!(rows[0]["epsilon"], 0.314f32 as f64);
    assert_eq!(rows[0]["synth_ratio"], 0.5);
    let pert_path = out.perturbations.expect("guided mode stores records");
    let records = load_perturbation_records(&pert_path).unwrap();
    assert_eq!(records.len(), 2 * 2, "batch_size records per step");
    for r in &records {
        let inf: f32 = r
            .o
            .iter()
            .zip(&r.o_star)
            .map(|(a, b)| (b - a).abs())
            .fold(0.0, f32::max);
        assert!(inf <= 0.314 + 1e-6, "budget law violated: {inf}");
        assert!((-1.0..=1.0).contains(&r.cos_sim));
    }

    let random_cfg = Stage2Config {
        mode: Mode::RandomStyle,
        record_perturbations: false,
        ..guided_cfg
    };
    let out2 = train_fr(&random_cfg, &source, Some(&ckpt), &dir.path().join("rand")).unwrap();
    assert!(out2.perturbations.is_none());
    let rows2 = read_jsonl(&out2.metrics).unwrap();
    assert_eq!(rows2[0]["mode"], "random_style");
    assert!(rows2[0].get("epsilon").is_none());
    assert_eq!(rows2[0]["synth_ratio"], 0.5);
}

#[test]
fn pretrained_recognizer_separates_toy_identities() {
    let dir = tempfile::tempdir().unwrap();
    let source = generate_toy_dataset(4, 4, 32, 11, &dir.path().join("src")).unwrap();
    let spec = RecognizerSpec {
        embedding_dim: 32,
        arcface_s: 16.0,
        arcface_m: 0.3,
    };
    let params = pretrain_recognizer(&source, &spec, 120, 8, 5e-3, (0.5, 0.99), 0).unwrap();

    let fr = FrModel::new(FrConfig { embedding_dim: 32 }).unwrap();
    let train = source.indices_for_split(Split::Train);
    let batch = load_batch(&source, &train).unwrap();
    let emb = fr.embed(&params, "", &batch.images).unwrap();
    let mut within = Vec::new();
    let mut cross = Vec::new();
    for i in 0..emb.nrows() {
        for j in (i + 1)..emb.nrows() {
            let cos = emb.row(i).dot(&emb.row(j));
            if batch.labels[i] == batch.labels[j] {
                within.push(cos);
            } else {
                cross.push(cos);
            }
        }
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    assert!(
        mean(&within) > mean(&cross),
        "within {} vs cross {}",
        mean(&within),
        mean(&cross)
    );
}

#[test]
fn schedule_and_weights_defaults_follow_training_recipe() {
    let cfg = Stage1Config::default();
    assert_eq!(cfg.lr, 1e-4);
    assert_eq!((cfg.adam_beta1, cfg.adam_beta2), (0.5, 0.99));
    assert_eq!(cfg.weights, LossWeights::default());
    assert_eq!(cfg.schedule, MagnitudeSchedule::default());
    assert_eq!((cfg.q, cfg.d), (10, 128));
    assert_eq!(cfg.fr_pretrain_steps, 2000);
    let s2 = Stage2Config::default();
    assert_eq!((s2.arcface_s, s2.arcface_m), (16.0, 0.3));
    assert_eq!(s2.batch_size, 32);
}

#[test]
fn stage1_requires_nonempty_train_split() {
    // samples_per_id = 2 leaves zero train records (both samples are held
    // out), which stage 1 must reject up front.
    let dir = tempfile::tempdir().unwrap();
    let source = generate_toy_dataset(4, 2, 32, 7, &dir.path().join("src")).unwrap();
    let target = build_target_set(
        &source,
        &DegradationSpec::mixed(),
        1.0,
        3,
        &dir.path().join("tgt"),
    )
    .unwrap();
    let err =
        train_synthesis(&tiny_stage1_config(), &source, &target, &dir.path().join("run"))
            .unwrap_err();
    assert!(err.to_string().contains("train records"), "{err}");
}
