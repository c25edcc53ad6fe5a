//! Learnable style subspace: coefficients, style codes, orthogonality
//! penalty and the magnitude→dissimilarity schedule.

use ndarray::{Array1, Array2, ArrayView1, Ix1, Ix2, IxDyn};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Arr, Tape, Var};
use crate::nn::{self, ParamSet};

/// Linear schedule g(a) mapping coefficient magnitude to a target cosine
/// dissimilarity; `a` is clamped into `[l_a, u_a]` before evaluation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct MagnitudeSchedule {
    pub l_a: f32,
    pub u_a: f32,
    pub l_m: f32,
    pub u_m: f32,
}

impl Default for MagnitudeSchedule {
    fn default() -> Self {
        MagnitudeSchedule {
            l_a: 0.0,
            u_a: 6.0,
            l_m: 0.05,
            u_m: 0.65,
        }
    }
}

impl MagnitudeSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_a < self.u_a) {
            return Err(CoreError::InvalidArgument(format!(
                "magnitude schedule requires l_a < u_a (got {} vs {})",
                self.l_a, self.u_a
            )));
        }
        if !(self.l_m < self.u_m) {
            return Err(CoreError::InvalidArgument(format!(
                "magnitude schedule requires l_m < u_m (got {} vs {})",
                self.l_m, self.u_m
            )));
        }
        if !(0.0..=2.0).contains(&self.l_m) || !(0.0..=2.0).contains(&self.u_m) {
            return Err(CoreError::InvalidArgument(
                "dissimilarity bounds must lie in [0, 2]".into(),
            ));
        }
        Ok(())
    }

    /// g(a) = (clamp(a) − l_a)·(u_m − l_m)/(u_a − l_a) + l_m.
    pub fn target(&self, a: f32) -> f32 {
        let a = a.clamp(self.l_a, self.u_a);
        (a - self.l_a) * (self.u_m - self.l_m) / (self.u_a - self.l_a) + self.l_m
    }
}

/// Dimensions of the learnable subspace; the tensors live in a [`ParamSet`]
/// under the canonical names below.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct StyleSubspace {
    /// Coefficient dimension q.
    pub coeff_dim: usize,
    /// Style-code dimension d.
    pub style_dim: usize,
}

pub const PARAM_U: &str = "style.U";
pub const PARAM_MU: &str = "style.mu";

impl StyleSubspace {
    pub fn new(coeff_dim: usize, style_dim: usize) -> Result<Self> {
        if coeff_dim == 0 || style_dim == 0 || coeff_dim >= style_dim {
            return Err(CoreError::InvalidArgument(format!(
                "style subspace requires 0 < q < d (got q={coeff_dim}, d={style_dim})"
            )));
        }
        Ok(StyleSubspace {
            coeff_dim,
            style_dim,
        })
    }

    /// U ~ N(0, 1/d) entrywise (variance 1/d), μ = 0.
    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ParamSet {
        let std = (1.0 / self.style_dim as f64).sqrt() as f32;
        let mut params = ParamSet::new();
        params.insert(
            PARAM_U,
            nn::normal(rng, &[self.style_dim, self.coeff_dim], std),
        );
        params.insert(PARAM_MU, nn::zeros(&[self.style_dim]));
        params
    }

    /// Draws a batch of style coefficients, one row per image: o ~ N(0, I_q).
    pub fn sample_coefficients(&self, rng: &mut ChaCha12Rng, batch: usize) -> Array2<f32> {
        nn::standard_normal(rng, &[batch, self.coeff_dim])
            .into_dimensionality::<Ix2>()
            .unwrap()
    }

    /// z = U·o + μ for a batch of coefficients `[B, q]` → codes `[B, d]`.
    pub fn style_codes(&self, params: &ParamSet, o: &Array2<f32>) -> Result<Array2<f32>> {
        let u = self.u_matrix(params)?;
        let mu = self.mu_vector(params)?;
        if o.ncols() != self.coeff_dim {
            return Err(CoreError::InvalidArgument(format!(
                "coefficient dim {} does not match subspace q={}",
                o.ncols(),
                self.coeff_dim
            )));
        }
        // [B,q]·[q,d] = o·Uᵀ, then + μ per row.
        let base = crate::blas::matmul(false, true, &o.view(), &u.view());
        Ok(base + &mu)
    }

    /// Tape version of [`Self::style_codes`]: z = o·Uᵀ + μ.
    pub fn style_codes_var(&self, tape: &mut Tape, u: Var, mu: Var, o: Var) -> Var {
        let base = tape.matmul_ex(o, false, u, true);
        tape.add_row_vec(base, mu)
    }

    /// L_ort = Σ|UᵀU − I| built on the tape (trainable path).
    pub fn orthogonality_loss_var(&self, tape: &mut Tape, u: Var) -> Var {
        let gram = tape.matmul_ex(u, true, u, false);
        let eye = tape.constant(eye_dyn(self.coeff_dim));
        let diff = tape.sub(gram, eye);
        let abs = tape.abs(diff);
        tape.sum_all(abs)
    }

    pub fn u_matrix<'p>(&self, params: &'p ParamSet) -> Result<ndarray::ArrayView2<'p, f32>> {
        let u = params.get(PARAM_U)?;
        let v = u.view().into_dimensionality::<Ix2>().map_err(|_| {
            CoreError::ShapeMismatch {
                op: "style_subspace",
                detail: format!("{PARAM_U} must be rank-2, got {:?}", u.shape()),
            }
        })?;
        if v.dim() != (self.style_dim, self.coeff_dim) {
            return Err(CoreError::ShapeMismatch {
                op: "style_subspace",
                detail: format!(
                    "{PARAM_U} is {:?}, expected [{}, {}]",
                    v.dim(),
                    self.style_dim,
                    self.coeff_dim
                ),
            });
        }
        Ok(v)
    }

    pub fn mu_vector<'p>(&self, params: &'p ParamSet) -> Result<ndarray::ArrayView1<'p, f32>> {
        let mu = params.get(PARAM_MU)?;
        let v = mu.view().into_dimensionality::<Ix1>().map_err(|_| {
            CoreError::ShapeMismatch {
                op: "style_subspace",
                detail: format!("{PARAM_MU} must be rank-1, got {:?}", mu.shape()),
            }
        })?;
        if v.len() != self.style_dim {
            return Err(CoreError::ShapeMismatch {
                op: "style_subspace",
                detail: format!("{PARAM_MU} has length {}, expected {}", v.len(), self.style_dim),
            });
        }
        Ok(v)
    }
}

/// ‖o‖₂ of one coefficient row.
pub fn coefficient_magnitude(o: &ArrayView1<f32>) -> f32 {
    o.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32
}

/// Direct (non-tape) orthogonality penalty Σ|UᵀU − I|.
pub fn orthogonality_loss(u: &ndarray::ArrayView2<f32>) -> f32 {
    let gram = crate::blas::matmul(true, false, u, u);
    let q = gram.nrows();
    let mut acc = 0f64;
    for i in 0..q {
        for j in 0..q {
            let target = if i == j { 1.0 } else { 0.0 };
            acc += (gram[[i, j]] - target).abs() as f64;
        }
    }
    acc as f32
}

fn eye_dyn(n: usize) -> Arr {
    let mut m = Arr::zeros(IxDyn(&[n, n]));
    for i in 0..n {
        m[[i, i]] = 1.0;
    }
    m
}

/// Elementwise sign with sign(0) = 0 (the FGSM convention).
pub fn sign(x: &Array1<f32>) -> Array1<f32> {
    x.mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn schedule_matches_published_constants() {
        let s = MagnitudeSchedule::default();
        assert!((s.target(0.0) - 0.05).abs() < 1e-6);
        assert!((s.target(6.0) - 0.65).abs() < 1e-6);
        assert!((s.target(3.0) - 0.35).abs() < 1e-6);
        // clamped outside the bounds
        assert!((s.target(-1.0) - 0.05).abs() < 1e-6);
        assert!((s.target(9.0) - 0.65).abs() < 1e-6);
    }

    #[test]
    fn schedule_is_monotone() {
        let s = MagnitudeSchedule::default();
        let mut prev = f32::MIN;
        for i in 0..100 {
            let a = i as f32 * 0.08;
            let g = s.target(a);
            assert!(g >= prev);
            prev = g;
        }
    }

    #[test]
    fn style_code_zero_coefficient_returns_mu() {
        let ss = StyleSubspace::new(3, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut params = ss.init_params(&mut rng);
        params.insert(PARAM_MU, nn::normal(&mut rng, &[8], 1.0));
        let o = Array2::<f32>::zeros((2, 3));
        let z = ss.style_codes(&params, &o).unwrap();
        let mu = params.get(PARAM_MU).unwrap();
        for row in z.rows() {
            for (a, b) in row.iter().zip(mu.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn style_code_identity_basis_example() {
        // d=2, q=1, U = [1,0]^T, mu = 0, o = [2] -> z = [2, 0]
        let ss = StyleSubspace::new(1, 2).unwrap();
        let mut params = ParamSet::new();
        params.insert(PARAM_U, array![[1.0f32], [0.0]].into_dyn());
        params.insert(PARAM_MU, Arr::zeros(IxDyn(&[2])));
        let o = array![[2.0f32]];
        let z = ss.style_codes(&params, &o).unwrap();
        assert_eq!(z, array![[2.0f32, 0.0]]);
    }

    #[test]
    fn style_code_is_affine_in_o() {
        let ss = StyleSubspace::new(4, 16).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut params = ss.init_params(&mut rng);
        params.insert(PARAM_MU, nn::normal(&mut rng, &[16], 0.5));
        for _ in 0..100 {
            let o1 = ss.sample_coefficients(&mut rng, 1);
            let o2 = ss.sample_coefficients(&mut rng, 1);
            let z1 = ss.style_codes(&params, &o1).unwrap();
            let z2 = ss.style_codes(&params, &o2).unwrap();
            let z12 = ss.style_codes(&params, &(&o1 + &o2)).unwrap();
            let mu = params.get(PARAM_MU).unwrap();
            for j in 0..16 {
                let lhs = z12[[0, j]] - mu[j];
                let rhs = (z1[[0, j]] - mu[j]) + (z2[[0, j]] - mu[j]);
                assert!((lhs - rhs).abs() < 1e-4, "affine law violated: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn orthogonality_loss_examples() {
        // first q columns of identity -> 0
        let mut u = Array2::<f32>::zeros((5, 3));
        for i in 0..3 {
            u[[i, i]] = 1.0;
        }
        assert!(orthogonality_loss(&u.view()).abs() < 1e-6);
        // [[1,1],[0,0]] -> gram [[1,1],[1,1]] -> |0|+|1|+|1|+|0| = 2
        let u2 = array![[1.0f32, 1.0], [0.0, 0.0]];
        assert!((orthogonality_loss(&u2.view()) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonality_tape_matches_direct() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let ss = StyleSubspace::new(4, 12).unwrap();
        let params = ss.init_params(&mut rng);
        let direct = orthogonality_loss(&ss.u_matrix(&params).unwrap());
        let mut tape = Tape::new();
        let u = tape.param(params.get(PARAM_U).unwrap().clone());
        let loss = ss.orthogonality_loss_var(&mut tape, u);
        assert!((tape.scalar(loss) - direct).abs() < 1e-5);
    }

    #[test]
    fn orthogonality_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let ss = StyleSubspace::new(3, 7).unwrap();
        let mut checked = 0;
        for _ in 0..12 {
            let u0 = nn::normal(&mut rng, &[7, 3], 0.6);
            // Keep clear of the |.|-kink: skip instances where any UᵀU−I
            // entry sits near zero, where the subgradient is ambiguous.
            let uv = u0.view().into_dimensionality::<Ix2>().unwrap();
            let gram = uv.t().dot(&uv);
            let near_kink = gram
                .indexed_iter()
                .any(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-3);
            if near_kink {
                continue;
            }
            checked += 1;
            let mut tape = Tape::new();
            let u = tape.param(u0.clone());
            let loss = ss.orthogonality_loss_var(&mut tape, u);
            let mut grads = tape.backward(loss);
            let g = grads.take(u).unwrap();

            // f64 oracle so the FD quotient isn't swamped by f32 rounding.
            let f = |u: &ndarray::Array2<f64>| -> f64 {
                let gram = u.t().dot(u);
                gram.indexed_iter()
                    .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
                    .sum()
            };
            let u64d = uv.mapv(|v| v as f64);
            let mut num = 0.0f64;
            let mut den = 0.0f64;
            for _ in 0..12 {
                let idx = [rng.random_range(0..7), rng.random_range(0..3)];
                let eps = 1e-5f64;
                let mut up = u64d.clone();
                up[idx] += eps;
                let mut um = u64d.clone();
                um[idx] -= eps;
                let fd = (f(&up) - f(&um)) / (2.0 * eps);
                let an = g[IxDyn(&idx)] as f64;
                num += (an - fd) * (an - fd);
                den += fd * fd;
            }
            let rel = (num / den.max(1e-30)).sqrt();
            assert!(rel < 1e-4, "relative FD error {rel}");
        }
        assert!(checked >= 4, "too few kink-free instances ({checked})");
    }

    #[test]
    fn sample_coefficient_moments() {
        let ss = StyleSubspace::new(10, 128).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let draws = ss.sample_coefficients(&mut rng, 100_000);
        for j in 0..10 {
            let col = draws.column(j);
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / col.len() as f64;
            let var = col
                .iter()
                .map(|&v| (v as f64 - mean) * (v as f64 - mean))
                .sum::<f64>()
                / col.len() as f64;
            assert!(mean.abs() < 0.02, "component {j} mean {mean}");
            assert!((var - 1.0).abs() < 0.03, "component {j} var {var}");
        }
    }

    #[test]
    fn sign_convention() {
        let x = array![1.5f32, -0.2, 0.0, 7.0];
        assert_eq!(sign(&x), array![1.0f32, -1.0, 0.0, 1.0]);
    }
}
