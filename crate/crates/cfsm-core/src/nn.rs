//! Named parameter sets, tape binding, initializers, composed layers, Adam.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::graph::{Arr, Gradients, Tape, Var};

/// Ordered name → tensor map; ordering is part of the serialization contract.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Arr>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Arr> {
        self.tensors
            .get(name)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Arr> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| CoreError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Arr)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Absorbs `other`, prefixing every name (used to assemble checkpoints).
    pub fn absorb_prefixed(&mut self, prefix: &str, other: ParamSet) {
        for (name, value) in other.tensors {
            self.tensors.insert(format!("{prefix}{name}"), value);
        }
    }

    /// Extracts the sub-set under `prefix`, stripping it.
    pub fn extract_prefixed(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, value) in &self.tensors {
            if let Some(stripped) = name.strip_prefix(prefix) {
                out.insert(stripped, value.clone());
            }
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian payloads; order is the
    /// BTreeMap name order, so equal sets hash equally.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, value) in &self.tensors {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            h.update((value.ndim() as u64).to_le_bytes());
            for d in value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

impl FromIterator<(String, Arr)> for ParamSet {
    fn from_iter<T: IntoIterator<Item = (String, Arr)>>(iter: T) -> Self {
        ParamSet {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Tape variables for a bound [`ParamSet`].
pub struct TapeBinding {
    vars: BTreeMap<String, Var>,
}

impl TapeBinding {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Copies every tensor onto the tape; `trainable` decides leaf kind.
pub fn bind_params(tape: &mut Tape, params: &ParamSet, trainable: bool) -> TapeBinding {
    let mut vars = BTreeMap::new();
    for (name, value) in params.iter() {
        let v = if trainable {
            tape.param(value.clone())
        } else {
            tape.constant(value.clone())
        };
        vars.insert(name.clone(), v);
    }
    TapeBinding { vars }
}

/// Pulls gradients for every bound parameter that received one.
pub fn collect_grads(grads: &mut Gradients, binding: &TapeBinding) -> BTreeMap<String, Arr> {
    let mut out = BTreeMap::new();
    for (name, var) in binding.iter() {
        if let Some(g) = grads.take(*var) {
            out.insert(name.clone(), g);
        }
    }
    out
}

// ---- initializers ----

pub fn zeros(shape: &[usize]) -> Arr {
    ArrayD::zeros(IxDyn(shape))
}

/// He-normal: std = sqrt(2 / fan_in); fan_in = product of dims after the first.
pub fn he_normal(rng: &mut ChaCha12Rng, shape: &[usize]) -> Arr {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, shape, std as f32)
}

pub fn normal(rng: &mut ChaCha12Rng, shape: &[usize], std: f32) -> Arr {
    let dist = Normal::new(0.0f32, std).expect("normal: std must be finite positive");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || dist.sample(rng))
}

/// Standard-normal matrix sample as a flat helper for coefficients.
pub fn standard_normal(rng: &mut ChaCha12Rng, shape: &[usize]) -> Arr {
    normal(rng, shape, 1.0)
}

// ---- composed layers (tape level) ----

/// `x [B,in] @ w^T [in,out] + b`; weights stored `[out, in]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul_ex(x, false, w, true);
    tape.add_row_vec(y, b)
}

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

/// Per-sample, per-channel spatial normalization (no affine part).
pub fn instance_norm(tape: &mut Tape, x: Var, eps: f32) -> Var {
    tape.instance_norm(x, eps)
}

/// AdaIN with per-sample modulation: `(1 + gamma_hat) * IN(x) + beta`,
/// `gamma_hat`/`beta` are `[B, C]`.
pub fn adain_batch(tape: &mut Tape, x: Var, gamma_hat: Var, beta: Var) -> Var {
    let normed = instance_norm(tape, x, INSTANCE_NORM_EPS);
    let gamma = tape.add_scalar(gamma_hat, 1.0);
    let scaled = tape.chan_scale(normed, gamma);
    tape.chan_shift(scaled, beta)
}

/// Rows of `x [m,n]` scaled to unit L2 norm. Errors on a zero-norm row.
pub fn row_l2_normalize(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x);
    let norms_sq = tape.sum_rows(sq);
    for (i, &n2) in tape.value(norms_sq).iter().enumerate() {
        if !(n2 > 1e-24) {
            return Err(CoreError::InvalidArgument(format!(
                "zero-norm embedding at row {i} (squared norm {n2:e})"
            )));
        }
    }
    let inv = tape.rsqrt(norms_sq, 0.0);
    Ok(tape.mul_col_vec(x, inv))
}

// ---- optimizer ----

/// Adam with bias correction; state keyed by parameter name.
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: BTreeMap<String, Arr>,
    v: BTreeMap<String, Arr>,
}

impl Adam {
    pub fn new(lr: f32, beta1: f32, beta2: f32) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over every (name, grad) pair; grads must match param shapes.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Arr>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(CoreError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!("param `{name}`: {:?} vs grad {:?}", p.shape(), g.shape()),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

/// Derives an independent, reproducible RNG stream from a seed and a label.
pub fn derive_rng(seed: u64, stream: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    use rand::SeedableRng;
    ChaCha12Rng::from_seed(digest)
}

/// Draws `k` distinct indices from `0..n` (order of first appearance).
pub fn sample_distinct(rng: &mut ChaCha12Rng, n: usize, k: usize) -> Vec<usize> {
    assert!(k <= n, "sample_distinct: k > n");
    // Partial Fisher-Yates over an index table.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_against_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", ArrayD::from_elem(IxDyn(&[3]), 1.0f32));
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ArrayD::from_elem(IxDyn(&[3]), 2.0f32));
        opt.step(&mut params, &grads).unwrap();
        for &v in params.get("w").unwrap().iter() {
            assert!(v < 1.0, "param should decrease, got {v}");
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (w - 3)^2 elementwise
        let mut params = ParamSet::new();
        params.insert("w", ArrayD::from_elem(IxDyn(&[4]), 0.0f32));
        let mut opt = Adam::new(0.05, 0.5, 0.99);
        for _ in 0..2000 {
            let g = params.get("w").unwrap().mapv(|w| 2.0 * (w - 3.0));
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), g);
            opt.step(&mut params, &grads).unwrap();
        }
        for &v in params.get("w").unwrap().iter() {
            assert!((v - 3.0).abs() < 1e-2, "should converge to 3, got {v}");
        }
    }

    #[test]
    fn instance_norm_statistics() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let x = standard_normal(&mut rng, &[2, 3, 8, 8]);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = instance_norm(&mut tape, xv, 1e-5);
        let yv = tape.value(y);
        let y4 = yv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let ch = y4.index_axis(ndarray::Axis(0), b);
                let ch = ch.index_axis(ndarray::Axis(0), c);
                let mean: f32 = ch.iter().sum::<f32>() / 64.0;
                let var: f32 = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 64.0;
                assert!(mean.abs() < 1e-5, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-2, "var {var}");
            }
        }
    }

    #[test]
    fn row_normalize_rejects_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[2, 4])));
        assert!(row_l2_normalize(&mut tape, x).is_err());
    }

    #[test]
    fn content_hash_is_order_insensitive_and_value_sensitive() {
        let mut a = ParamSet::new();
        a.insert("x", ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        a.insert("y", ArrayD::from_elem(IxDyn(&[2]), 2.0f32));
        let mut b = ParamSet::new();
        b.insert("y", ArrayD::from_elem(IxDyn(&[2]), 2.0f32));
        b.insert("x", ArrayD::from_elem(IxDyn(&[2]), 1.0f32));
        assert_eq!(a.content_hash(), b.content_hash());
        b.get_mut("x").unwrap()[0] = 1.5;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn sample_distinct_is_unbiased_enough_and_distinct() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let picks = sample_distinct(&mut rng, 10, 5);
        let mut sorted = picks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 5);
        assert!(picks.iter().all(|&i| i < 10));
    }
}
