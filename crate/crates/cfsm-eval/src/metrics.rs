//! Closed-set identification (rank-k) and open-set verification (TAR@FAR)
//! on cosine scores.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{EvalError, Result};

fn check_embeddings(
    gallery: &Array2<f32>,
    gallery_labels: &[i64],
    probe: &Array2<f32>,
    probe_labels: &[i64],
) -> Result<()> {
    if gallery.nrows() == 0 || probe.nrows() == 0 {
        return Err(EvalError::InvalidArgument(
            "gallery and probe sets must be non-empty".into(),
        ));
    }
    if gallery.nrows() != gallery_labels.len() || probe.nrows() != probe_labels.len() {
        return Err(EvalError::InvalidArgument(format!(
            "label counts ({}, {}) do not match embedding rows ({}, {})",
            gallery_labels.len(),
            probe_labels.len(),
            gallery.nrows(),
            probe.nrows()
        )));
    }
    if gallery.ncols() != probe.ncols() {
        return Err(EvalError::InvalidArgument(format!(
            "embedding dims differ: gallery {} vs probe {}",
            gallery.ncols(),
            probe.ncols()
        )));
    }
    if let Some(l) = gallery_labels.iter().chain(probe_labels).find(|&&l| l < 0) {
        return Err(EvalError::InvalidArgument(format!(
            "unlabeled record (identity {l}) cannot be scored"
        )));
    }
    Ok(())
}

/// Cosine of two unit-norm rows (plain dot product, f64 accumulation).
fn cosine(a: ndarray::ArrayView1<f32>, b: ndarray::ArrayView1<f32>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

/// Closed-set rank-k identification accuracy.
///
/// Embeddings are expected row-unit-norm, so cosine reduces to a dot product.
/// For each probe the gallery is ordered by score descending with ties broken
/// by gallery index; a probe is a hit at `k` when any of the top-k entries
/// shares its label. Every probe identity must appear in the gallery.
pub fn rank_k(
    gallery: &Array2<f32>,
    gallery_labels: &[i64],
    probe: &Array2<f32>,
    probe_labels: &[i64],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    check_embeddings(gallery, gallery_labels, probe, probe_labels)?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::InvalidArgument(
            "rank list must be non-empty positive integers".into(),
        ));
    }
    let gallery_ids: BTreeSet<i64> = gallery_labels.iter().copied().collect();
    let missing: Vec<i64> = probe_labels
        .iter()
        .copied()
        .filter(|l| !gallery_ids.contains(l))
        .collect::<BTreeSet<i64>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingIdentities(missing));
    }

    // Rank of the first same-label gallery entry under (score desc, index asc),
    // computed by counting rather than sorting.
    let mut ranks = Vec::with_capacity(probe.nrows());
    for (p, &label) in probe.rows().into_iter().zip(probe_labels) {
        let scores: Vec<f64> = gallery.rows().into_iter().map(|g| cosine(g, p)).collect();
        let (best_idx, best_score) = scores
            .iter()
            .enumerate()
            .filter(|&(j, _)| gallery_labels[j] == label)
            .map(|(j, &s)| (j, s))
            .reduce(|a, b| if b.1 > a.1 { b } else { a })
            .expect("missing identities were rejected above");
        let rank = 1 + scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > best_score || (s == best_score && j < best_idx))
            .count();
        ranks.push(rank);
    }

    let n = ranks.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect())
}

/// One verification operating point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub tar: f64,
    /// Accept scores `>= threshold`; +inf when no score meets the target.
    pub threshold: f32,
    /// The requested FAR lies below 1/|impostor| — the impostor set cannot
    /// resolve it, so the reported point is the coarsest achievable (FAR 0).
    pub insufficient_impostors: bool,
}

fn count_ge(sorted_asc: &[f32], t: f32) -> usize {
    sorted_asc.len() - sorted_asc.partition_point(|s| s.total_cmp(&t).is_lt())
}

/// TAR at the given FAR targets.
///
/// The threshold for a target is the smallest observed score `t` such that
/// `fraction(impostor >= t) <= FAR`; TAR is then `fraction(genuine >= t)`.
pub fn tar_at_far(genuine: &[f32], impostor: &[f32], far_targets: &[f64]) -> Result<Vec<TarAtFar>> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(EvalError::InvalidArgument(
            "tar_at_far needs non-empty genuine and impostor score lists".into(),
        ));
    }
    if let Some(&far) = far_targets.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(EvalError::InvalidArgument(format!(
            "FAR target {far} outside [0, 1]"
        )));
    }
    let mut candidates: Vec<f32> = genuine.iter().chain(impostor).copied().collect();
    candidates.sort_by(f32::total_cmp);
    let mut imp = impostor.to_vec();
    imp.sort_by(f32::total_cmp);
    let mut gen = genuine.to_vec();
    gen.sort_by(f32::total_cmp);
    let n_imp = imp.len() as f64;
    let n_gen = gen.len() as f64;

    let mut points = Vec::with_capacity(far_targets.len());
    for &far in far_targets {
        // fraction(impostor >= t) is non-increasing in t, so the admissible
        // thresholds form a suffix of the sorted candidate list.
        let pos = candidates.partition_point(|&t| count_ge(&imp, t) as f64 / n_imp > far);
        let (threshold, tar) = match candidates.get(pos) {
            Some(&t) => (t, count_ge(&gen, t) as f64 / n_gen),
            None => (f32::INFINITY, 0.0),
        };
        points.push(TarAtFar {
            far,
            tar,
            threshold,
            insufficient_impostors: far < 1.0 / n_imp,
        });
    }
    Ok(points)
}

/// Exhaustive gallery×probe pair scores split by label agreement:
/// `(genuine, impostor)`, probe-major order.
pub fn verification_scores(
    gallery: &Array2<f32>,
    gallery_labels: &[i64],
    probe: &Array2<f32>,
    probe_labels: &[i64],
) -> Result<(Vec<f32>, Vec<f32>)> {
    check_embeddings(gallery, gallery_labels, probe, probe_labels)?;
    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for (p, &pl) in probe.rows().into_iter().zip(probe_labels) {
        for (g, &gl) in gallery.rows().into_iter().zip(gallery_labels) {
            let s = cosine(g, p) as f32;
            if pl == gl {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    Ok((genuine, impostor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rank1_hit_when_probe_equals_gallery_mate() {
        let gallery = array![[1.0f32, 0.0], [0.0, 1.0]];
        let probe = array![[0.0f32, 1.0]];
        let acc = rank_k(&gallery, &[7, 9], &probe, &[9], &[1]).unwrap();
        assert_eq!(acc[&1], 1.0);
    }

    #[test]
    fn ties_resolve_to_the_lower_gallery_index() {
        // Two identical gallery rows with different labels: the probe scores
        // both 1.0, so the top-1 must be index 0.
        let gallery = array![[1.0f32, 0.0], [1.0, 0.0]];
        let probe = array![[1.0f32, 0.0]];
        let acc = rank_k(&gallery, &[5, 6], &probe, &[6], &[1, 2]).unwrap();
        assert_eq!(acc[&1], 0.0);
        assert_eq!(acc[&2], 1.0);
        let acc = rank_k(&gallery, &[5, 6], &probe, &[5], &[1]).unwrap();
        assert_eq!(acc[&1], 1.0);
    }

    #[test]
    fn missing_probe_identity_is_an_error_listing_ids() {
        let gallery = array![[1.0f32, 0.0]];
        let probe = array![[1.0f32, 0.0], [0.0, 1.0]];
        let err = rank_k(&gallery, &[1], &probe, &[2, 3], &[1]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('2') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn hand_enumerated_roc_point() {
        let impostor: Vec<f32> = (0..10).map(|i| i as f32 / 10.0).collect();
        let genuine: Vec<f32> = (5..15).map(|i| i as f32 / 10.0).collect();
        let pts = tar_at_far(&genuine, &impostor, &[0.1]).unwrap();
        assert_eq!(pts[0].threshold, 0.9);
        assert_eq!(pts[0].tar, 0.6);
        assert!(!pts[0].insufficient_impostors);
    }

    #[test]
    fn separated_scores_give_tar_one_at_achievable_fars() {
        let impostor: Vec<f32> = (0..10).map(|i| i as f32 / 100.0).collect();
        let genuine = vec![0.9f32; 6];
        for pt in tar_at_far(&genuine, &impostor, &[0.1, 0.5, 1.0]).unwrap() {
            assert_eq!(pt.tar, 1.0, "far {}", pt.far);
        }
    }

    #[test]
    fn insufficient_impostors_are_flagged_not_silent() {
        let scores: Vec<f32> = (0..10).map(|i| i as f32).collect();
        let pts = tar_at_far(&scores, &scores, &[0.05]).unwrap();
        assert!(pts[0].insufficient_impostors);
    }

    #[test]
    fn empty_score_lists_are_rejected() {
        assert!(tar_at_far(&[], &[0.5], &[0.1]).is_err());
        assert!(tar_at_far(&[0.5], &[], &[0.1]).is_err());
    }
}
