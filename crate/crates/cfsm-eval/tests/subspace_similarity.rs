//! Similarity over real checkpoint files: matrix properties, artifact
//! emission, and the Monte-Carlo near-zero baseline for unrelated subspaces.

use std::path::PathBuf;

use ndarray::{Array2, Ix2};

use cfsm_core::checkpoint::{save_checkpoint, CheckpointMeta, KIND_FR, KIND_STAGE1, RngState, SCHEMA_VERSION};
use cfsm_core::nn::{derive_rng, normal, zeros, ParamSet};
use cfsm_core::subspace::{PARAM_MU, PARAM_U};
use cfsm_eval::{similarity, similarity_matrix, BasisPairing, StyleBasis};

fn subspace_params(seed: u64, d: usize, q: usize) -> ParamSet {
    let mut rng = derive_rng(seed, "test-subspace");
    let mut p = ParamSet::new();
    p.insert(PARAM_U, normal(&mut rng, &[d, q], (1.0 / d as f64).sqrt() as f32));
    p.insert(PARAM_MU, normal(&mut rng, &[d], 0.05));
    p
}

fn write_ckpt(dir: &std::path::Path, name: &str, kind: &str, params: &ParamSet) -> PathBuf {
    let meta = CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        kind: kind.into(),
        step: 0,
        config: serde_json::json!({}),
        rng: RngState::capture(&derive_rng(0, "ckpt")),
    };
    let path = dir.join(name);
    save_checkpoint(&path, &meta, params).unwrap();
    path
}

#[test]
fn identical_checkpoints_give_the_all_ones_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let params = subspace_params(5, 16, 4);
    let a = write_ckpt(dir.path(), "a.ckpt", KIND_STAGE1, &params);
    let b = write_ckpt(dir.path(), "b.ckpt", KIND_STAGE1, &params);
    let m = similarity_matrix(
        &[a, b],
        &["a".into(), "b".into()],
        BasisPairing::ByIndex,
    )
    .unwrap();
    for i in 0..2 {
        for j in 0..2 {
            assert!((m.values[[i, j]] - 1.0).abs() < 1e-6, "[{i},{j}] = {}", m.values[[i, j]]);
        }
    }
}

#[test]
fn matrix_is_exactly_symmetric_with_unit_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<PathBuf> = (0..3)
        .map(|i| write_ckpt(dir.path(), &format!("{i}.ckpt"), KIND_STAGE1, &subspace_params(i, 24, 5)))
        .collect();
    let names: Vec<String> = (0..3).map(|i| format!("set-{i}")).collect();
    let m = similarity_matrix(&paths, &names, BasisPairing::ByIndex).unwrap();
    for i in 0..3 {
        assert!((m.values[[i, i]] - 1.0).abs() < 1e-6);
        for j in 0..3 {
            assert_eq!(m.values[[i, j]], m.values[[j, i]]);
            assert!(m.values[[i, j]].abs() <= 1.0 + 1e-12);
        }
    }
}

#[test]
fn dimension_mismatch_names_the_offending_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_ckpt(dir.path(), "a.ckpt", KIND_STAGE1, &subspace_params(1, 16, 4));
    let b = write_ckpt(dir.path(), "odd.ckpt", KIND_STAGE1, &subspace_params(2, 12, 4));
    let err = similarity_matrix(
        &[a, b],
        &["a".into(), "odd".into()],
        BasisPairing::ByIndex,
    )
    .unwrap_err();
    assert!(err.to_string().contains("odd.ckpt"), "{err}");
}

#[test]
fn wrong_checkpoint_kind_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_ckpt(dir.path(), "fr.ckpt", KIND_FR, &subspace_params(1, 16, 4));
    let err = StyleBasis::from_checkpoint(&path).unwrap_err();
    assert!(err.to_string().contains("kind"), "{err}");
}

#[test]
fn csv_and_png_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_ckpt(dir.path(), "a.ckpt", KIND_STAGE1, &subspace_params(3, 16, 4));
    let b = write_ckpt(dir.path(), "b.ckpt", KIND_STAGE1, &subspace_params(4, 16, 4));
    let m = similarity_matrix(
        &[a, b],
        &["alpha".into(), "beta".into()],
        BasisPairing::ByIndex,
    )
    .unwrap();

    let csv_path = dir.path().join("matrix.csv");
    m.write_csv(&csv_path).unwrap();
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], ",alpha,beta");
    assert!(lines[1].starts_with("alpha,"));
    let diag: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((diag - 1.0).abs() < 1e-5);

    let png_path = dir.path().join("matrix.png");
    m.write_png(&png_path, 8).unwrap();
    let img = image::open(&png_path).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (16, 16));
    // Diagonal cell: similarity 1 → intensity 255.
    assert_eq!(img.get_pixel(0, 0).0[0], 255);
}

#[test]
fn independent_random_subspaces_score_near_zero() {
    let mut total = 0.0f64;
    let trials = 100;
    for t in 0..trials {
        let a = StyleBasis::from_params(&subspace_params(1000 + t, 128, 10)).unwrap();
        let b = StyleBasis::from_params(&subspace_params(5000 + t, 128, 10)).unwrap();
        total += similarity(&a, &b).unwrap().abs();
    }
    let mean = total / trials as f64;
    assert!(mean < 0.1, "mean |S| = {mean}");
}

#[test]
fn basis_rows_are_u_plus_mu() {
    let mut rng = derive_rng(11, "check");
    let d = 6;
    let q = 2;
    let mut p = ParamSet::new();
    p.insert(PARAM_U, normal(&mut rng, &[d, q], 0.3));
    p.insert(PARAM_MU, normal(&mut rng, &[d], 0.3));
    let basis = StyleBasis::from_params(&p).unwrap();
    let u = p.get(PARAM_U).unwrap().view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mu = p.get(PARAM_MU).unwrap();
    let mut expect = Array2::<f32>::zeros((q, d));
    for i in 0..q {
        for j in 0..d {
            expect[[i, j]] = u[[j, i]] + mu[[j]];
        }
    }
    assert_eq!(basis.vectors(), &expect);
}

#[test]
fn zeroed_subspace_fails_the_numeric_guard() {
    let mut p = ParamSet::new();
    p.insert(PARAM_U, zeros(&[8, 3]));
    p.insert(PARAM_MU, zeros(&[8]));
    assert!(StyleBasis::from_params(&p).is_err());
}
