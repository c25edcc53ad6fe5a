//! The synthesis pipeline: encoder E, AdaIN decoder G, style MLP, and the
//! 3-scale patch discriminator.
//!
//! Channel plan (encoder): CONV(64,k7,s1)-IN-ReLU → CONV(128,k4,s2)-IN-ReLU →
//! CONV(256,k4,s2)-IN-ReLU → 4 residual blocks (IN). Decoder: 4 residual
//! blocks with AdaIN, then two nearest-neighbour ×2 upsamples each followed by
//! a k5 conv (128, 64 channels, ReLU), and a final CONV(3,k7)-tanh.

use ndarray::{Array2, Array4, Ix4};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{Tape, Var};
use crate::nn::{self, adain_batch, bind_params, instance_norm, ParamSet, TapeBinding};
use crate::subspace::StyleSubspace;

/// Content channels at the encoder output.
pub const CONTENT_CHANNELS: usize = 256;
/// Number of AdaIN layers in the decoder (4 residual blocks × 2 norms).
pub const ADAIN_LAYERS: usize = 4 * 2;
/// Per-layer modulation width: gamma_hat + beta over 256 channels.
pub const ADAIN_PARAMS_PER_LAYER: usize = 2 * CONTENT_CHANNELS;
/// Total MLP output width: 8 × 512 = 4096.
pub const ADAIN_PARAMS_TOTAL: usize = ADAIN_LAYERS * ADAIN_PARAMS_PER_LAYER;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SynthesisConfig {
    pub image_size: usize,
    /// Coefficient dimension q.
    pub coeff_dim: usize,
    /// Style-code dimension d.
    pub style_dim: usize,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 4 != 0 || self.image_size < 8 {
            return Err(CoreError::InvalidArgument(format!(
                "image_size must be a multiple of 4 and ≥ 8, got {}",
                self.image_size
            )));
        }
        StyleSubspace::new(self.coeff_dim, self.style_dim)?;
        Ok(())
    }

    pub fn subspace(&self) -> StyleSubspace {
        StyleSubspace {
            coeff_dim: self.coeff_dim,
            style_dim: self.style_dim,
        }
    }
}

/// Encoder + decoder + style MLP. Parameters live under "enc.", "dec.",
/// "mlp." in the owning [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct SynthesisModel {
    pub cfg: SynthesisConfig,
}

impl SynthesisModel {
    pub fn new(cfg: SynthesisConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SynthesisModel { cfg })
    }

    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ParamSet {
        let mut p = ParamSet::new();
        // encoder
        p.insert("enc.conv1.w", nn::he_normal(rng, &[64, 3, 7, 7]));
        p.insert("enc.conv1.b", nn::zeros(&[64]));
        p.insert("enc.conv2.w", nn::he_normal(rng, &[128, 64, 4, 4]));
        p.insert("enc.conv2.b", nn::zeros(&[128]));
        p.insert("enc.conv3.w", nn::he_normal(rng, &[256, 128, 4, 4]));
        p.insert("enc.conv3.b", nn::zeros(&[256]));
        for i in 1..=4 {
            for j in 1..=2 {
                p.insert(
                    format!("enc.res{i}.conv{j}.w"),
                    nn::he_normal(rng, &[256, 256, 3, 3]),
                );
                p.insert(format!("enc.res{i}.conv{j}.b"), nn::zeros(&[256]));
            }
        }
        // decoder
        for i in 1..=4 {
            for j in 1..=2 {
                p.insert(
                    format!("dec.res{i}.conv{j}.w"),
                    nn::he_normal(rng, &[256, 256, 3, 3]),
                );
                p.insert(format!("dec.res{i}.conv{j}.b"), nn::zeros(&[256]));
            }
        }
        p.insert("dec.conv1.w", nn::he_normal(rng, &[128, 256, 5, 5]));
        p.insert("dec.conv1.b", nn::zeros(&[128]));
        p.insert("dec.conv2.w", nn::he_normal(rng, &[64, 128, 5, 5]));
        p.insert("dec.conv2.b", nn::zeros(&[64]));
        p.insert("dec.conv3.w", nn::he_normal(rng, &[3, 64, 7, 7]));
        p.insert("dec.conv3.b", nn::zeros(&[3]));
        // style MLP: d -> 256 -> 256 -> 4096. The head starts near zero so the
        // initial decoder behaves like plain instance norm (gamma≈1, beta≈0).
        let d = self.cfg.style_dim;
        p.insert("mlp.fc1.w", nn::he_normal(rng, &[256, d]));
        p.insert("mlp.fc1.b", nn::zeros(&[256]));
        p.insert("mlp.fc2.w", nn::he_normal(rng, &[256, 256]));
        p.insert("mlp.fc2.b", nn::zeros(&[256]));
        p.insert(
            "mlp.fc3.w",
            nn::normal(rng, &[ADAIN_PARAMS_TOTAL, 256], 0.02),
        );
        p.insert("mlp.fc3.b", nn::zeros(&[ADAIN_PARAMS_TOTAL]));
        p
    }

    /// E(X): `[B,3,H,W] → [B,256,H/4,W/4]`.
    pub fn encode(&self, tape: &mut Tape, bind: &TapeBinding, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "encode: spatial dims must be divisible by 4, got {shape:?}"
            )));
        }
        let mut h = tape.conv2d(x, bind.var("enc.conv1.w"), bind.var("enc.conv1.b"), 1, 3);
        h = instance_norm(tape, h, nn::INSTANCE_NORM_EPS);
        h = tape.relu(h);
        h = tape.conv2d(h, bind.var("enc.conv2.w"), bind.var("enc.conv2.b"), 2, 1);
        h = instance_norm(tape, h, nn::INSTANCE_NORM_EPS);
        h = tape.relu(h);
        h = tape.conv2d(h, bind.var("enc.conv3.w"), bind.var("enc.conv3.b"), 2, 1);
        h = instance_norm(tape, h, nn::INSTANCE_NORM_EPS);
        h = tape.relu(h);
        for i in 1..=4 {
            h = self.res_block_in(tape, bind, &format!("enc.res{i}"), h);
        }
        Ok(h)
    }

    /// Residual block with plain instance norm (encoder side).
    fn res_block_in(&self, tape: &mut Tape, bind: &TapeBinding, prefix: &str, x: Var) -> Var {
        let mut h = tape.conv2d(
            x,
            bind.var(&format!("{prefix}.conv1.w")),
            bind.var(&format!("{prefix}.conv1.b")),
            1,
            1,
        );
        h = instance_norm(tape, h, nn::INSTANCE_NORM_EPS);
        h = tape.relu(h);
        h = tape.conv2d(
            h,
            bind.var(&format!("{prefix}.conv2.w")),
            bind.var(&format!("{prefix}.conv2.b")),
            1,
            1,
        );
        h = instance_norm(tape, h, nn::INSTANCE_NORM_EPS);
        h = tape.relu(h);
        tape.add(x, h)
    }

    /// MLP(z): `[B,d] → [B,4096]` of concatenated per-layer (gamma_hat, beta).
    pub fn map_style(&self, tape: &mut Tape, bind: &TapeBinding, z: Var) -> Var {
        let mut h = nn::linear(tape, z, bind.var("mlp.fc1.w"), bind.var("mlp.fc1.b"));
        h = tape.relu(h);
        h = nn::linear(tape, h, bind.var("mlp.fc2.w"), bind.var("mlp.fc2.b"));
        h = tape.relu(h);
        nn::linear(tape, h, bind.var("mlp.fc3.w"), bind.var("mlp.fc3.b"))
    }

    /// G(C, adain): `[B,256,h,w] → [B,3,4h,4w]` in (−1,1).
    pub fn decode(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        content: Var,
        adain_params: Var,
    ) -> Result<Var> {
        let cshape = tape.shape(content).to_vec();
        if cshape.len() != 4 || cshape[1] != CONTENT_CHANNELS {
            return Err(CoreError::InvalidArgument(format!(
                "decode: content must be [B,{CONTENT_CHANNELS},h,w], got {cshape:?}"
            )));
        }
        let ashape = tape.shape(adain_params).to_vec();
        if ashape != [cshape[0], ADAIN_PARAMS_TOTAL] {
            return Err(CoreError::InvalidArgument(format!(
                "decode: adain params must be [{}, {ADAIN_PARAMS_TOTAL}], got {ashape:?}",
                cshape[0]
            )));
        }
        for v in tape.value(adain_params).iter() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite("adain parameters".into()));
            }
        }
        let mut h = content;
        for i in 1..=4 {
            h = self.res_block_adain(tape, bind, i, h, adain_params);
        }
        h = tape.upsample2(h);
        h = tape.conv2d(h, bind.var("dec.conv1.w"), bind.var("dec.conv1.b"), 1, 2);
        h = tape.relu(h);
        h = tape.upsample2(h);
        h = tape.conv2d(h, bind.var("dec.conv2.w"), bind.var("dec.conv2.b"), 1, 2);
        h = tape.relu(h);
        h = tape.conv2d(h, bind.var("dec.conv3.w"), bind.var("dec.conv3.b"), 1, 3);
        Ok(tape.tanh(h))
    }

    /// Decoder residual block; AdaIN layer indices are `(block−1)*2` and
    /// `(block−1)*2 + 1` in the concatenated parameter vector.
    fn res_block_adain(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        block: usize,
        x: Var,
        adain_params: Var,
    ) -> Var {
        let slice = |tape: &mut Tape, layer: usize| -> (Var, Var) {
            let base = layer * ADAIN_PARAMS_PER_LAYER;
            let gamma_hat = tape.slice_cols(adain_params, base, CONTENT_CHANNELS);
            let beta = tape.slice_cols(adain_params, base + CONTENT_CHANNELS, CONTENT_CHANNELS);
            (gamma_hat, beta)
        };
        let l0 = (block - 1) * 2;
        let mut h = tape.conv2d(
            x,
            bind.var(&format!("dec.res{block}.conv1.w")),
            bind.var(&format!("dec.res{block}.conv1.b")),
            1,
            1,
        );
        let (g0, b0) = slice(tape, l0);
        h = adain_batch(tape, h, g0, b0);
        h = tape.relu(h);
        h = tape.conv2d(
            h,
            bind.var(&format!("dec.res{block}.conv2.w")),
            bind.var(&format!("dec.res{block}.conv2.b")),
            1,
            1,
        );
        let (g1, b1) = slice(tape, l0 + 1);
        h = adain_batch(tape, h, g1, b1);
        h = tape.relu(h);
        tape.add(x, h)
    }

    /// Full pipeline on style codes: X̂ = G(E(X), MLP(z)).
    pub fn synthesize_with_codes(
        &self,
        tape: &mut Tape,
        bind: &TapeBinding,
        x: Var,
        z: Var,
    ) -> Result<Var> {
        let content = self.encode(tape, bind, x)?;
        let adain = self.map_style(tape, bind, z);
        self.decode(tape, bind, content, adain)
    }

    /// Off-tape convenience: synthesize a batch with frozen parameters.
    /// `params` must contain generator and style tensors; `o` is `[B, q]`.
    pub fn synthesize(
        &self,
        params: &ParamSet,
        o: &Array2<f32>,
        images: &Array4<f32>,
    ) -> Result<Array4<f32>> {
        let subspace = self.cfg.subspace();
        let z = subspace.style_codes(params, o)?;
        let mut tape = Tape::new();
        let bind = bind_params(&mut tape, params, false);
        let xv = tape.constant(images.clone().into_dyn());
        let zv = tape.constant(z.into_dyn());
        let out = self.synthesize_with_codes(&mut tape, &bind, xv, zv)?;
        Ok(tape
            .value(out)
            .clone()
            .into_dimensionality::<Ix4>()
            .expect("synthesis output is rank-4"))
    }
}

/// Public single-style AdaIN op: per-channel gamma/beta applied to the whole
/// batch. `out = IN(x)·gamma + beta` with eps = 1e−5.
pub fn adain(
    tape: &mut Tape,
    feature: Var,
    gamma: &ndarray::Array1<f32>,
    beta: &ndarray::Array1<f32>,
) -> Result<Var> {
    let shape = tape.shape(feature).to_vec();
    if shape.len() != 4 {
        return Err(CoreError::InvalidArgument(
            "adain: feature must be rank-4 NCHW".into(),
        ));
    }
    if shape[2] * shape[3] < 2 {
        return Err(CoreError::InvalidArgument(
            "adain: needs at least 2 spatial positions".into(),
        ));
    }
    if gamma.len() != shape[1] || beta.len() != shape[1] {
        return Err(CoreError::InvalidArgument(format!(
            "adain: gamma/beta must have length {}, got {}/{}",
            shape[1],
            gamma.len(),
            beta.len()
        )));
    }
    let b = shape[0];
    let tile = |v: &ndarray::Array1<f32>| {
        let mut m = Array2::<f32>::zeros((b, v.len()));
        for mut row in m.rows_mut() {
            row.assign(v);
        }
        m
    };
    // Reuse the batch path with (gamma−1) since it applies (1 + gamma_hat).
    let gamma_hat = tile(&gamma.mapv(|g| g - 1.0));
    let beta_m = tile(beta);
    let gv = tape.constant(gamma_hat.into_dyn());
    let bv = tape.constant(beta_m.into_dyn());
    Ok(adain_batch(tape, feature, gv, bv))
}

/// 3-scale patch discriminator; parameters under "disc.k{0,1,2}.".
#[derive(Clone, Copy, Debug)]
pub struct Discriminator {
    pub image_size: usize,
}

pub const DISC_SCALES: usize = 3;

impl Discriminator {
    pub fn new(image_size: usize) -> Result<Self> {
        // Scale 2 sees image_size/4 and halves three times inside the head.
        if image_size < 32 {
            return Err(CoreError::InvalidArgument(format!(
                "discriminator requires image_size ≥ 32, got {image_size}"
            )));
        }
        Ok(Discriminator { image_size })
    }

    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ParamSet {
        let mut p = ParamSet::new();
        for k in 0..DISC_SCALES {
            p.insert(format!("disc.k{k}.conv1.w"), nn::he_normal(rng, &[64, 3, 4, 4]));
            p.insert(format!("disc.k{k}.conv1.b"), nn::zeros(&[64]));
            p.insert(format!("disc.k{k}.conv2.w"), nn::he_normal(rng, &[128, 64, 4, 4]));
            p.insert(format!("disc.k{k}.conv2.b"), nn::zeros(&[128]));
            p.insert(format!("disc.k{k}.conv3.w"), nn::he_normal(rng, &[256, 128, 4, 4]));
            p.insert(format!("disc.k{k}.conv3.b"), nn::zeros(&[256]));
            p.insert(format!("disc.k{k}.head.w"), nn::he_normal(rng, &[1, 256, 3, 3]));
            p.insert(format!("disc.k{k}.head.b"), nn::zeros(&[1]));
        }
        p
    }

    /// Raw logit maps, one per scale; scale k sees the input average-pooled
    /// k times by 2.
    pub fn forward(&self, tape: &mut Tape, bind: &TapeBinding, image: Var) -> Vec<Var> {
        let mut scales = Vec::with_capacity(DISC_SCALES);
        let mut x = image;
        for k in 0..DISC_SCALES {
            if k > 0 {
                x = tape.avg_pool2(x);
            }
            let mut h = tape.conv2d(
                x,
                bind.var(&format!("disc.k{k}.conv1.w")),
                bind.var(&format!("disc.k{k}.conv1.b")),
                2,
                1,
            );
            h = tape.leaky_relu(h, 0.2);
            h = tape.conv2d(
                h,
                bind.var(&format!("disc.k{k}.conv2.w")),
                bind.var(&format!("disc.k{k}.conv2.b")),
                2,
                1,
            );
            h = tape.leaky_relu(h, 0.2);
            h = tape.conv2d(
                h,
                bind.var(&format!("disc.k{k}.conv3.w")),
                bind.var(&format!("disc.k{k}.conv3.b")),
                2,
                1,
            );
            h = tape.leaky_relu(h, 0.2);
            let logits = tape.conv2d(
                h,
                bind.var(&format!("disc.k{k}.head.w")),
                bind.var(&format!("disc.k{k}.head.b")),
                1,
                1,
            );
            scales.push(logits);
        }
        scales
    }
}
