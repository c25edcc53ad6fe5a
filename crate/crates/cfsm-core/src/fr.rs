//! Small face-recognition embedding network and its margin head.
//!
//! Four stride-2 conv blocks (IN + ReLU) → global average pool → linear
//! projection to the embedding. The same network serves as the frozen
//! identity extractor `f` in stage 1 (parameter prefix "fid.") and as the
//! trainee `F` in stage 2 (prefix "fr.").

use ndarray::{Array2, Array4, Ix2};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Tape, Var};
use crate::nn::{self, bind_params, row_l2_normalize, ParamSet, TapeBinding};

const CHANNELS: [usize; 4] = [32, 64, 128, 256];

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct FrConfig {
    pub embedding_dim: usize,
}

impl Default for FrConfig {
    fn default() -> Self {
        FrConfig { embedding_dim: 128 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FrModel {
    pub cfg: FrConfig,
}

impl FrModel {
    pub fn new(cfg: FrConfig) -> Result<Self> {
        if cfg.embedding_dim == 0 {
            return Err(CoreError::InvalidArgument(
                "embedding_dim must be positive".into(),
            ));
        }
        Ok(FrModel { cfg })
    }

    /// Fresh parameters under canonical (unprefixed) names: conv{1..4}.{w,b},
    /// fc.{w,b}.
    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let mut cin = 3;
        for (i, &cout) in CHANNELS.iter().enumerate() {
            p.insert(format!("conv{}.w", i + 1), nn::he_normal(rng, &[cout, cin, 3, 3]));
            p.insert(format!("conv{}.b", i + 1), nn::zeros(&[cout]));
            cin = cout;
        }
        let e = self.cfg.embedding_dim;
        let std = (1.0 / CHANNELS[3] as f64).sqrt() as f32;
        p.insert("fc.w", nn::normal(rng, &[e, CHANNELS[3]], std));
        p.insert("fc.b", nn::zeros(&[e]));
        p
    }

    /// Unnormalized embedding `[B, e]`; parameter names are looked up under
    /// `prefix` (e.g. "fr." or "fid.").
    pub fn features(&self, tape: &mut Tape, bind: &TapeBinding, prefix: &str, x: Var) -> Var {
        let mut h = x;
        for i in 1..=4 {
            let w = bind.var(&format!("{prefix}conv{i}.w"));
            let b = bind.var(&format!("{prefix}conv{i}.b"));
            h = tape.conv2d(h, w, b, 2, 1);
            h = nn::instance_norm(tape, h, nn::INSTANCE_NORM_EPS);
            h = tape.relu(h);
        }
        // Global average pool -> [B, C]
        let pooled = tape.spatial_mean(h);
        let w = bind.var(&format!("{prefix}fc.w"));
        let b = bind.var(&format!("{prefix}fc.b"));
        nn::linear(tape, pooled, w, b)
    }

    /// L2-normalized embedding rows.
    pub fn embed_var(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let feats = self.features(tape, bind, prefix, x);
        row_l2_normalize(tape, feats)
    }

    /// Off-tape convenience: embeds a batch of images with frozen weights.
    pub fn embed(&self, params: &ParamSet, prefix: &str, images: &Array4<f32>) -> Result<Array2<f32>> {
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, params, false);
        let x = tape.constant(images.clone().into_dyn());
        let e = self.embed_var(&mut tape, &bind, prefix, x)?;
        Ok(tape
            .value(e)
            .clone()
            .into_dimensionality::<Ix2>()
            .expect("embedding is rank-2"))
    }
}

/// ArcFace-style classification head: class weight matrix `[num_classes, e]`
/// under the name "head.W"; rows are L2-normalized at logit time.
#[derive(Clone, Copy, Debug)]
pub struct MarginHead {
    pub num_classes: usize,
    pub embedding_dim: usize,
    pub scale: f32,
    pub margin: f32,
}

pub const PARAM_HEAD_W: &str = "head.W";

impl MarginHead {
    pub fn new(num_classes: usize, embedding_dim: usize, scale: f32, margin: f32) -> Result<Self> {
        if num_classes < 2 {
            return Err(CoreError::InvalidArgument(
                "margin head needs ≥ 2 classes".into(),
            ));
        }
        if !(scale > 0.0) {
            return Err(CoreError::InvalidArgument("margin scale must be > 0".into()));
        }
        if !(0.0..std::f32::consts::FRAC_PI_2).contains(&margin) {
            return Err(CoreError::InvalidArgument(format!(
                "margin must lie in [0, π/2), got {margin}"
            )));
        }
        Ok(MarginHead {
            num_classes,
            embedding_dim,
            scale,
            margin,
        })
    }

    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            PARAM_HEAD_W,
            nn::normal(rng, &[self.num_classes, self.embedding_dim], 0.01),
        );
        p
    }
}
