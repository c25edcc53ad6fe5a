//! Style-basis distribution similarity between trained subspaces: the mean
//! index-paired cosine between the `uᵢ + μ` vectors of two models.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1, Ix1, Ix2};

use cfsm_core::checkpoint::{load_checkpoint, CheckpointMeta, KIND_STAGE1};
use cfsm_core::nn::ParamSet;
use cfsm_core::subspace::{PARAM_MU, PARAM_U};

use crate::error::{EvalError, Result};

/// The style directions a trained model actually uses: one row per basis
/// index holding `uᵢ + μ`, shape `[q, d]`.
#[derive(Clone, Debug)]
pub struct StyleBasis {
    vectors: Array2<f32>,
}

impl StyleBasis {
    pub fn new(vectors: Array2<f32>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(EvalError::InvalidArgument(
                "style basis must have at least one row and column".into(),
            ));
        }
        for (i, row) in vectors.rows().into_iter().enumerate() {
            if row_norm(row) <= 0.0 {
                return Err(EvalError::InvalidArgument(format!(
                    "basis vector {i} has zero norm"
                )));
            }
        }
        Ok(StyleBasis { vectors })
    }

    /// Extracts `uᵢ + μ` rows from subspace parameters (`style.U` `[d,q]`,
    /// `style.mu` `[d]`).
    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let u = params
            .get(PARAM_U)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|_| EvalError::InvalidArgument(format!("{PARAM_U} must be rank-2")))?
            .to_owned();
        let mu = params
            .get(PARAM_MU)?
            .view()
            .into_dimensionality::<Ix1>()
            .map_err(|_| EvalError::InvalidArgument(format!("{PARAM_MU} must be rank-1")))?
            .to_owned();
        let (d, q) = u.dim();
        if mu.len() != d {
            return Err(EvalError::InvalidArgument(format!(
                "{PARAM_MU} has length {}, expected {d}",
                mu.len()
            )));
        }
        let mut vectors = Array2::<f32>::zeros((q, d));
        for i in 0..q {
            for j in 0..d {
                vectors[[i, j]] = u[[j, i]] + mu[j];
            }
        }
        StyleBasis::new(vectors)
    }

    /// Loads a stage-1 synthesis checkpoint and extracts its basis.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (meta, params) = load_checkpoint(path)?;
        if meta.kind != KIND_STAGE1 {
            return Err(EvalError::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("kind `{}`, expected `{KIND_STAGE1}`", meta.kind),
            });
        }
        let basis = StyleBasis::from_params(&params).map_err(|e| EvalError::Checkpoint {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        Ok((basis, meta))
    }

    /// Basis count q.
    pub fn coeff_dim(&self) -> usize {
        self.vectors.nrows()
    }

    /// Style-code dimension d.
    pub fn style_dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }
}

fn row_norm(v: ArrayView1<f32>) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn row_cosine(a: ArrayView1<f32>, b: ArrayView1<f32>) -> f64 {
    let dot: f64 = a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum();
    dot / (row_norm(a) * row_norm(b))
}

fn check_dims(a: &StyleBasis, b: &StyleBasis) -> Result<()> {
    if a.coeff_dim() != b.coeff_dim() || a.style_dim() != b.style_dim() {
        return Err(EvalError::InvalidArgument(format!(
            "subspace dims differ: (q={}, d={}) vs (q={}, d={})",
            a.coeff_dim(),
            a.style_dim(),
            b.coeff_dim(),
            b.style_dim()
        )));
    }
    Ok(())
}

/// Distribution similarity: mean over basis index i of the cosine between
/// `a`'s and `b`'s i-th style direction. Strictly index-paired; no reordering
/// or sign alignment is applied.
pub fn similarity(a: &StyleBasis, b: &StyleBasis) -> Result<f64> {
    check_dims(a, b)?;
    let q = a.coeff_dim();
    let total: f64 = (0..q)
        .map(|i| row_cosine(a.vectors.row(i), b.vectors.row(i)))
        .sum();
    Ok(total / q as f64)
}

/// Diagnostic upper bound: the best mean cosine over all pairings of `a`'s
/// basis rows with `b`'s. Insensitive to basis reordering, unlike the
/// canonical index-paired score; exact assignment via subset DP, so q ≤ 20.
pub fn similarity_max_permutation(a: &StyleBasis, b: &StyleBasis) -> Result<f64> {
    check_dims(a, b)?;
    let q = a.coeff_dim();
    if q > 20 {
        return Err(EvalError::InvalidArgument(format!(
            "max-permutation diagnostic supports q ≤ 20, got {q}"
        )));
    }
    let mut cos = vec![0f64; q * q];
    for i in 0..q {
        for j in 0..q {
            cos[i * q + j] = row_cosine(a.vectors.row(i), b.vectors.row(j));
        }
    }
    // dp[mask]: best total pairing rows 0..popcount(mask) of `a` with the
    // `b` rows in `mask`.
    let full = 1usize << q;
    let mut dp = vec![f64::NEG_INFINITY; full];
    dp[0] = 0.0;
    for mask in 0..full - 1 {
        if dp[mask] == f64::NEG_INFINITY {
            continue;
        }
        let i = mask.count_ones() as usize;
        for j in 0..q {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let cand = dp[mask] + cos[i * q + j];
                if cand > dp[next] {
                    dp[next] = cand;
                }
            }
        }
    }
    Ok(dp[full - 1] / q as f64)
}

/// How basis rows are matched across models when building a matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisPairing {
    /// The canonical metric: row i against row i.
    ByIndex,
    /// Diagnostic only — reports the reordering-invariant upper bound.
    MaxPermutation,
}

/// Pairwise similarity over ≥ 2 named checkpoints.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    pub names: Vec<String>,
    pub values: Array2<f64>,
}

pub fn similarity_matrix(
    checkpoints: &[PathBuf],
    names: &[String],
    pairing: BasisPairing,
) -> Result<SimilarityMatrix> {
    if checkpoints.len() < 2 {
        return Err(EvalError::InvalidArgument(format!(
            "similarity matrix needs ≥ 2 checkpoints, got {}",
            checkpoints.len()
        )));
    }
    if names.len() != checkpoints.len() {
        return Err(EvalError::InvalidArgument(format!(
            "{} names for {} checkpoints",
            names.len(),
            checkpoints.len()
        )));
    }
    let mut bases = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        let (basis, _) = StyleBasis::from_checkpoint(path)?;
        if let Some(first) = bases.first() {
            check_dims(first, &basis).map_err(|e| EvalError::Checkpoint {
                path: path.clone(),
                detail: e.to_string(),
            })?;
        }
        bases.push(basis);
    }
    let k = bases.len();
    let mut values = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            let s = match pairing {
                BasisPairing::ByIndex => similarity(&bases[i], &bases[j])?,
                BasisPairing::MaxPermutation => {
                    similarity_max_permutation(&bases[i], &bases[j])?
                }
            };
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    Ok(SimilarityMatrix {
        names: names.to_vec(),
        values,
    })
}

fn csv_field(name: &str) -> String {
    if name.contains([',', '"', '\n']) {
        format!("\"{}\"", name.replace('"', "\"\""))
    } else {
        name.to_string()
    }
}

impl SimilarityMatrix {
    /// Square CSV with the names as both header row and leading column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for name in &self.names {
            write!(out, ",{}", csv_field(name)).unwrap();
        }
        out.push('\n');
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(&csv_field(name));
            for j in 0..self.names.len() {
                write!(out, ",{:.6}", self.values[[i, j]]).unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| EvalError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Grayscale grid, one `cell`×`cell` block per entry, [−1,1] → [0,255].
    pub fn write_png(&self, path: &Path, cell: usize) -> Result<()> {
        if cell == 0 {
            return Err(EvalError::InvalidArgument("cell size must be ≥ 1".into()));
        }
        let k = self.names.len();
        let side = (k * cell) as u32;
        let img = image::GrayImage::from_fn(side, side, |x, y| {
            let v = self.values[[y as usize / cell, x as usize / cell]];
            image::Luma([(((v + 1.0) / 2.0 * 255.0).round()).clamp(0.0, 255.0) as u8])
        });
        img.save(path).map_err(|e| EvalError::Image {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn basis(rows: Array2<f32>) -> StyleBasis {
        StyleBasis::new(rows).unwrap()
    }

    #[test]
    fn identical_bases_score_one() {
        let a = basis(array![[1.0f32, 2.0, 0.0], [0.0, -1.0, 3.0]]);
        let s = similarity(&a, &a.clone()).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn antipodal_bases_score_minus_one() {
        let a = basis(array![[1.0f32, 2.0, 0.0], [0.0, -1.0, 3.0]]);
        let b = basis(a.vectors().mapv(|v| -v));
        let s = similarity(&a, &b).unwrap();
        assert!((s + 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn scale_invariance() {
        let a = basis(array![[0.3f32, -0.7, 0.1], [2.0, 0.5, -0.4]]);
        let b = basis(array![[1.0f32, 0.2, 0.0], [-0.6, 0.9, 0.8]]);
        let a2 = basis(a.vectors().mapv(|v| v * 2.5));
        let b2 = basis(b.vectors().mapv(|v| v * 2.5));
        let s = similarity(&a, &b).unwrap();
        let s2 = similarity(&a2, &b2).unwrap();
        // Exact in reals; the f32 storage of the scaled vectors rounds.
        assert!((s - s2).abs() < 1e-6, "{s} vs {s2}");
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let a = basis(array![[1.0f32, 0.0], [0.0, 1.0]]);
        let b = basis(array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(similarity(&a, &b).is_err());
    }

    #[test]
    fn zero_norm_row_is_rejected() {
        assert!(StyleBasis::new(array![[0.0f32, 0.0], [1.0, 0.0]]).is_err());
    }

    #[test]
    fn max_permutation_recovers_reordered_bases() {
        let a = basis(array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let swapped = basis(array![[0.0f32, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let paired = similarity(&a, &swapped).unwrap();
        let best = similarity_max_permutation(&a, &swapped).unwrap();
        assert!(paired < 0.5, "{paired}");
        assert!((best - 1.0).abs() < 1e-12, "{best}");
    }

    #[test]
    fn max_permutation_never_below_paired() {
        let a = basis(array![[0.4f32, -0.9, 0.3], [1.1, 0.2, -0.5], [-0.3, 0.8, 0.6]]);
        let b = basis(array![[-0.2f32, 0.7, 0.5], [0.9, -0.1, 0.4], [0.3, 0.3, -0.8]]);
        assert!(
            similarity_max_permutation(&a, &b).unwrap() >= similarity(&a, &b).unwrap() - 1e-12
        );
    }
}
