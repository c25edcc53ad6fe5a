//! Image degradations for the unlabeled target pool: Gaussian blur, nearest
//! downsample + bilinear upsample, directional motion blur, and additive
//! Gaussian noise, applied in that fixed order, each with its own
//! probability. All math in [0,1] H×W×C.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

/// Per-op application probabilities.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct ApplyProbabilities {
    pub blur: f32,
    pub resolution: f32,
    pub motion: f32,
    pub noise: f32,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DegradationSpec {
    /// Gaussian blur sigma range in pixels.
    pub blur_sigma_range: [f32; 2],
    pub downsample_factors: Vec<u32>,
    /// Additive noise std range in [0,1] intensity units.
    pub noise_std_range: [f32; 2],
    /// Motion blur kernel lengths in pixels.
    pub motion_blur_lengths: Vec<u32>,
    pub apply_probabilities: ApplyProbabilities,
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [f32; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !range_ok(self.blur_sigma_range) || self.blur_sigma_range[0] < 0.0 {
            return Err(DataError::InvalidArgument(format!(
                "bad blur_sigma_range {:?}",
                self.blur_sigma_range
            )));
        }
        if !range_ok(self.noise_std_range) || self.noise_std_range[0] < 0.0 {
            return Err(DataError::InvalidArgument(format!(
                "bad noise_std_range {:?}",
                self.noise_std_range
            )));
        }
        if self.downsample_factors.is_empty() || self.downsample_factors.iter().any(|&f| f == 0) {
            return Err(DataError::InvalidArgument(
                "downsample_factors must be non-empty positive integers".into(),
            ));
        }
        if self.motion_blur_lengths.is_empty() || self.motion_blur_lengths.iter().any(|&l| l == 0)
        {
            return Err(DataError::InvalidArgument(
                "motion_blur_lengths must be non-empty positive integers".into(),
            ));
        }
        for (name, p) in [
            ("blur", self.apply_probabilities.blur),
            ("resolution", self.apply_probabilities.resolution),
            ("motion", self.apply_probabilities.motion),
            ("noise", self.apply_probabilities.noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::InvalidArgument(format!(
                    "probability for {name} must lie in [0,1], got {p}"
                )));
            }
        }
        Ok(())
    }

    /// A bit of everything; the default target-pool style.
    pub fn mixed() -> Self {
        DegradationSpec {
            blur_sigma_range: [0.5, 1.5],
            downsample_factors: vec![2, 4],
            noise_std_range: [0.02, 0.10],
            motion_blur_lengths: vec![3, 5],
            apply_probabilities: ApplyProbabilities {
                blur: 0.5,
                resolution: 0.5,
                motion: 0.3,
                noise: 0.8,
            },
        }
    }

    /// Resolution/blur-dominated style.
    pub fn blur_heavy() -> Self {
        DegradationSpec {
            blur_sigma_range: [1.0, 2.0],
            downsample_factors: vec![2, 4],
            noise_std_range: [0.0, 0.0],
            motion_blur_lengths: vec![3, 5],
            apply_probabilities: ApplyProbabilities {
                blur: 1.0,
                resolution: 1.0,
                motion: 0.4,
                noise: 0.0,
            },
        }
    }

    /// Sensor-noise-dominated style.
    pub fn noise_heavy() -> Self {
        DegradationSpec {
            blur_sigma_range: [0.0, 0.0],
            downsample_factors: vec![1],
            noise_std_range: [0.10, 0.20],
            motion_blur_lengths: vec![1],
            apply_probabilities: ApplyProbabilities {
                blur: 0.0,
                resolution: 0.0,
                motion: 0.0,
                noise: 1.0,
            },
        }
    }

    /// No-op spec; output equals input.
    pub fn identity() -> Self {
        DegradationSpec {
            blur_sigma_range: [0.0, 0.0],
            downsample_factors: vec![1],
            noise_std_range: [0.0, 0.0],
            motion_blur_lengths: vec![1],
            apply_probabilities: ApplyProbabilities {
                blur: 0.0,
                resolution: 0.0,
                motion: 0.0,
                noise: 0.0,
            },
        }
    }
}

fn clamp_idx(v: isize, n: usize) -> usize {
    v.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian blur with edge clamping; sigma 0 is a no-op.
pub fn gaussian_blur(image: &Array3<f32>, sigma: f32) -> Array3<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut total = 0.0f32;
    for i in -radius..=radius {
        let v = (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        total += v;
    }
    for v in kernel.iter_mut() {
        *v /= total;
    }

    let (h, w, c) = image.dim();
    let mut horiz = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = clamp_idx(x as isize + ki as isize - radius, w);
                    acc += kv * image[[y, sx, ch]];
                }
                horiz[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = clamp_idx(y as isize + ki as isize - radius, h);
                    acc += kv * horiz[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Nearest-neighbour downsample by an integer factor (top-left sample).
pub fn downsample_nearest(image: &Array3<f32>, factor: u32) -> Array3<f32> {
    let k = factor.max(1) as usize;
    let (h, w, c) = image.dim();
    let (oh, ow) = ((h / k).max(1), (w / k).max(1));
    Array3::from_shape_fn((oh, ow, c), |(y, x, ch)| {
        image[[(y * k).min(h - 1), (x * k).min(w - 1), ch]]
    })
}

/// Bilinear resize to an explicit size (used to restore resolution).
pub fn upsample_bilinear(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (h, w, c) = image.dim();
    Array3::from_shape_fn((out_h, out_w, c), |(y, x, ch)| {
        let fy = ((y as f32 + 0.5) * h as f32 / out_h as f32 - 0.5).max(0.0);
        let fx = ((x as f32 + 0.5) * w as f32 / out_w as f32 - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(h - 1);
        let x0 = (fx.floor() as usize).min(w - 1);
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = fy - y0 as f32;
        let wx = fx - x0 as f32;
        let top = image[[y0, x0, ch]] * (1.0 - wx) + image[[y0, x1, ch]] * wx;
        let bot = image[[y1, x0, ch]] * (1.0 - wx) + image[[y1, x1, ch]] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Directional uniform motion blur: a line kernel of `length` pixels at
/// `angle` radians, splatted bilinearly and normalized.
pub fn motion_blur(image: &Array3<f32>, length: u32, angle: f32) -> Array3<f32> {
    let l = length as usize;
    if l <= 1 {
        return image.clone();
    }
    let side = l | 1; // odd kernel grid
    let mut kernel = vec![0.0f32; side * side];
    let center = (side / 2) as f32;
    let (s, cth) = angle.sin_cos();
    let steps = 4 * l;
    for i in 0..=steps {
        let t = (i as f32 / steps as f32 - 0.5) * (l as f32 - 1.0);
        let ky = center + t * s;
        let kx = center + t * cth;
        let y0 = ky.floor();
        let x0 = kx.floor();
        let wy = ky - y0;
        let wx = kx - x0;
        for (dy, dx, wgt) in [
            (0usize, 0usize, (1.0 - wy) * (1.0 - wx)),
            (0, 1, (1.0 - wy) * wx),
            (1, 0, wy * (1.0 - wx)),
            (1, 1, wy * wx),
        ] {
            let yy = y0 as isize + dy as isize;
            let xx = x0 as isize + dx as isize;
            if yy >= 0 && (yy as usize) < side && xx >= 0 && (xx as usize) < side {
                kernel[yy as usize * side + xx as usize] += wgt;
            }
        }
    }
    let total: f32 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v /= total;
    }

    let (h, w, c) = image.dim();
    let r = (side / 2) as isize;
    let mut out = Array3::<f32>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for ky in 0..side {
                    for kx in 0..side {
                        let kv = kernel[ky * side + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        let sy = clamp_idx(y as isize + ky as isize - r, h);
                        let sx = clamp_idx(x as isize + kx as isize - r, w);
                        acc += kv * image[[sy, sx, ch]];
                    }
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

/// Additive Gaussian noise clipped to [0,1].
pub fn add_noise(image: &Array3<f32>, std: f32, rng: &mut ChaCha12Rng) -> Array3<f32> {
    if std <= 0.0 {
        return image.clone();
    }
    let normal = Normal::new(0.0f32, std).expect("valid std");
    image.mapv(|v| (v + normal.sample(rng)).clamp(0.0, 1.0))
}

/// The full degradation chain, in fixed order blur → resolution → motion →
/// noise; each op fires with its configured probability.
pub fn apply_degradation(
    image: &Array3<f32>,
    spec: &DegradationSpec,
    rng: &mut ChaCha12Rng,
) -> Result<Array3<f32>> {
    spec.validate()?;
    let (h, w, _) = image.dim();
    let mut out = image.clone();

    if rng.random_range(0.0..1.0) < spec.apply_probabilities.blur {
        let [lo, hi] = spec.blur_sigma_range;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        out = gaussian_blur(&out, sigma);
    }
    if rng.random_range(0.0..1.0) < spec.apply_probabilities.resolution {
        let factor = spec.downsample_factors
            [rng.random_range(0..spec.downsample_factors.len())];
        if factor > 1 {
            let small = downsample_nearest(&out, factor);
            out = upsample_bilinear(&small, h, w);
        }
    }
    if rng.random_range(0.0..1.0) < spec.apply_probabilities.motion {
        let length =
            spec.motion_blur_lengths[rng.random_range(0..spec.motion_blur_lengths.len())];
        let angle = rng.random_range(0.0..std::f32::consts::PI);
        out = motion_blur(&out, length, angle);
    }
    if rng.random_range(0.0..1.0) < spec.apply_probabilities.noise {
        let [lo, hi] = spec.noise_std_range;
        let std = if hi > lo { rng.random_range(lo..hi) } else { lo };
        out = add_noise(&out, std, rng);
    }
    Ok(out)
}
