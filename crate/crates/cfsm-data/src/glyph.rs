//! Procedural identity glyphs: each identity is a parametric cartoon face
//! (ellipse, eyes, mouth, hue) drawn from a seeded hash of its id, rendered
//! with per-sample nuisance jitter.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use cfsm_core::nn::derive_rng;

/// Stable per-identity appearance parameters, in unit image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityParams {
    pub hue: f32,
    pub face_rx: f32,
    pub face_ry: f32,
    pub eye_dx: f32,
    pub eye_y: f32,
    pub eye_r: f32,
    pub mouth_y: f32,
    pub mouth_half_width: f32,
    pub mouth_curvature: f32,
    pub brow_tilt: f32,
}

impl IdentityParams {
    /// Deterministic parameters for one identity under a dataset seed.
    pub fn from_seed(dataset_seed: u64, identity_id: u32) -> Self {
        let mut rng = derive_rng(dataset_seed, &format!("identity/{identity_id}"));
        IdentityParams {
            hue: rng.random_range(0.0..1.0),
            face_rx: rng.random_range(0.26..0.38),
            face_ry: rng.random_range(0.30..0.42),
            eye_dx: rng.random_range(0.09..0.17),
            eye_y: rng.random_range(0.36..0.46),
            eye_r: rng.random_range(0.030..0.060),
            mouth_y: rng.random_range(0.60..0.72),
            mouth_half_width: rng.random_range(0.10..0.20),
            mouth_curvature: rng.random_range(-0.8..0.8),
            brow_tilt: rng.random_range(-0.3..0.3),
        }
    }
}

/// Per-sample nuisance transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleJitter {
    /// Rotation in radians (≤ ±10°).
    pub rotation: f32,
    /// Translation as a fraction of width (≤ ±0.1 each axis).
    pub shift_x: f32,
    pub shift_y: f32,
    /// Multiplicative brightness (1 ± 0.15).
    pub brightness: f32,
}

impl SampleJitter {
    pub const NONE: SampleJitter = SampleJitter {
        rotation: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
        brightness: 1.0,
    };

    pub fn sample(rng: &mut ChaCha12Rng) -> Self {
        let max_rot = 10.0f32.to_radians();
        SampleJitter {
            rotation: rng.random_range(-max_rot..max_rot),
            shift_x: rng.random_range(-0.10..0.10),
            shift_y: rng.random_range(-0.10..0.10),
            brightness: rng.random_range(0.85..1.15),
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Smooth 0→1 coverage ramp over `aa` units of signed distance.
fn coverage(signed_dist: f32, aa: f32) -> f32 {
    let t = ((aa - signed_dist) / (2.0 * aa)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f32; 3], b: [f32; 3], w: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * w,
        a[1] + (b[1] - a[1]) * w,
        a[2] + (b[2] - a[2]) * w,
    ]
}

/// Render one glyph sample as H×W×3 in [0,1].
pub fn render(params: &IdentityParams, jitter: &SampleJitter, size: usize) -> Array3<f32> {
    let mut out = Array3::<f32>::zeros((size, size, 3));
    let aa = 0.75 / size as f32;

    let bg = hsv_to_rgb(params.hue + 0.5, 0.30, 0.30);
    let skin = hsv_to_rgb(params.hue, 0.40, 0.88);
    let eye = hsv_to_rgb(params.hue + 0.37, 0.55, 0.16);
    let mouth = hsv_to_rgb(params.hue + 0.83, 0.65, 0.52);

    let (sin_r, cos_r) = jitter.rotation.sin_cos();
    for py in 0..size {
        for px in 0..size {
            // Pixel center in unit coordinates, then the inverse sample
            // transform: undo translation, then rotation about the center.
            let ux = (px as f32 + 0.5) / size as f32 - 0.5 - jitter.shift_x;
            let uy = (py as f32 + 0.5) / size as f32 - 0.5 - jitter.shift_y;
            let x = ux * cos_r + uy * sin_r + 0.5;
            let y = -ux * sin_r + uy * cos_r + 0.5;

            let mut color = bg;

            // Face ellipse around (0.5, 0.5).
            let ex = (x - 0.5) / params.face_rx;
            let ey = (y - 0.5) / params.face_ry;
            let face_d = (ex * ex + ey * ey).sqrt() - 1.0;
            let face_scale = params.face_rx.min(params.face_ry);
            color = mix(color, skin, coverage(face_d * face_scale, aa));

            // Eyes: two discs, with a brow tilt shifting their heights.
            for side in [-1.0f32, 1.0] {
                let cx = 0.5 + side * params.eye_dx;
                let cy = params.eye_y + side * params.brow_tilt * params.eye_dx;
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - params.eye_r;
                color = mix(color, eye, coverage(d, aa));
            }

            // Mouth: a curved band y = mouth_y + curvature·t² across the face.
            let t = (x - 0.5) / params.mouth_half_width;
            if t.abs() <= 1.0 {
                let cy = params.mouth_y + params.mouth_curvature * 0.05 * (t * t - 0.5);
                let half_thick = 0.018 * (1.0 - 0.55 * t * t);
                let d = (y - cy).abs() - half_thick;
                color = mix(color, mouth, coverage(d, aa));
            }

            for (c, &v) in color.iter().enumerate() {
                out[[py, px, c]] = (v * jitter.brightness).clamp(0.0, 1.0);
            }
        }
    }
    out
}
