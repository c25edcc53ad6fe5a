//! Slow f64 reference implementations of the forward pipeline.
//!
//! These exist for the test suites: central finite differences against the
//! f32 graph drown in rounding noise once gradients drop below ~1e−4, so the
//! gradient checks difference *these* functions instead. They share no code
//! with the f32 path (separate layout, separate accumulation) and are kept
//! deliberately plain.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayD, Ix1, Ix2};

use crate::error::Result;
use crate::nn::ParamSet;
use crate::subspace::MagnitudeSchedule;
use crate::synthesis::{ADAIN_PARAMS_PER_LAYER, CONTENT_CHANNELS};

pub fn param64(params: &ParamSet, name: &str) -> Result<ArrayD<f64>> {
    Ok(params.get(name)?.mapv(|v| v as f64))
}

fn p2(params: &ParamSet, name: &str) -> Array2<f64> {
    param64(params, name)
        .unwrap()
        .into_dimensionality::<Ix2>()
        .unwrap()
}

fn p1(params: &ParamSet, name: &str) -> Array1<f64> {
    param64(params, name)
        .unwrap()
        .into_dimensionality::<Ix1>()
        .unwrap()
}

fn p4(params: &ParamSet, name: &str) -> Array4<f64> {
    param64(params, name)
        .unwrap()
        .into_dimensionality::<ndarray::Ix4>()
        .unwrap()
}

pub fn conv2d(
    x: &Array4<f64>,
    w: &Array4<f64>,
    bias: &Array1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, cin, h, wd) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let k = cin * kh * kw;
    let mut cols = Array2::<f64>::zeros((k, b * ho * wo));
    for bi in 0..b {
        for c in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            cols[[row, (bi * ho + oy) * wo + ox]] =
                                x[[bi, c, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    let w2 = w
        .view()
        .into_shape_with_order((cout, k))
        .unwrap()
        .to_owned();
    let mut out2 = Array2::<f64>::zeros((cout, b * ho * wo));
    general_mat_mul(1.0, &w2, &cols, 0.0, &mut out2);
    let mut out = Array4::<f64>::zeros((b, cout, ho, wo));
    for bi in 0..b {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[[bi, co, oy, ox]] = out2[[co, (bi * ho + oy) * wo + ox]] + bias[co];
                }
            }
        }
    }
    out
}

pub fn instance_norm(x: &Array4<f64>, eps: f64) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let mut plane = out.slice_mut(ndarray::s![bi, ci, .., ..]);
            let mean = plane.sum() / n;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            plane.mapv_inplace(|v| (v - mean) * inv);
        }
    }
    out
}

pub fn relu4(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn upsample2(x: &Array4<f64>) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<f64>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[[bi, ci, y, xx]] = x[[bi, ci, y / 2, xx / 2]];
                }
            }
        }
    }
    out
}

pub fn spatial_mean(x: &Array4<f64>) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f64;
    let mut out = Array2::<f64>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            out[[bi, ci]] = x.slice(ndarray::s![bi, ci, .., ..]).sum() / n;
        }
    }
    out
}

pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

pub fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        row.mapv_inplace(|v| v / n);
    }
    out
}

const IN_EPS: f64 = crate::nn::INSTANCE_NORM_EPS as f64;

pub fn encode(params: &ParamSet, x: &Array4<f64>) -> Array4<f64> {
    let mut h = conv2d(x, &p4(params, "enc.conv1.w"), &p1(params, "enc.conv1.b"), 1, 3);
    h = relu4(&instance_norm(&h, IN_EPS));
    h = conv2d(&h, &p4(params, "enc.conv2.w"), &p1(params, "enc.conv2.b"), 2, 1);
    h = relu4(&instance_norm(&h, IN_EPS));
    h = conv2d(&h, &p4(params, "enc.conv3.w"), &p1(params, "enc.conv3.b"), 2, 1);
    h = relu4(&instance_norm(&h, IN_EPS));
    for i in 1..=4 {
        let mut r = conv2d(
            &h,
            &p4(params, &format!("enc.res{i}.conv1.w")),
            &p1(params, &format!("enc.res{i}.conv1.b")),
            1,
            1,
        );
        r = relu4(&instance_norm(&r, IN_EPS));
        r = conv2d(
            &r,
            &p4(params, &format!("enc.res{i}.conv2.w")),
            &p1(params, &format!("enc.res{i}.conv2.b")),
            1,
            1,
        );
        r = relu4(&instance_norm(&r, IN_EPS));
        h = h + r;
    }
    h
}

pub fn map_style(params: &ParamSet, z: &Array2<f64>) -> Array2<f64> {
    let mut h = linear(z, &p2(params, "mlp.fc1.w"), &p1(params, "mlp.fc1.b"));
    h.mapv_inplace(|v| v.max(0.0));
    h = linear(&h, &p2(params, "mlp.fc2.w"), &p1(params, "mlp.fc2.b"));
    h.mapv_inplace(|v| v.max(0.0));
    linear(&h, &p2(params, "mlp.fc3.w"), &p1(params, "mlp.fc3.b"))
}

fn adain_apply(x: &Array4<f64>, adain: &Array2<f64>, layer: usize) -> Array4<f64> {
    let (b, c, _, _) = x.dim();
    assert_eq!(c, CONTENT_CHANNELS);
    let base = layer * ADAIN_PARAMS_PER_LAYER;
    let normed = instance_norm(x, IN_EPS);
    let mut out = normed;
    for bi in 0..b {
        for ci in 0..c {
            let gamma = 1.0 + adain[[bi, base + ci]];
            let beta = adain[[bi, base + CONTENT_CHANNELS + ci]];
            out.slice_mut(ndarray::s![bi, ci, .., ..])
                .mapv_inplace(|v| v * gamma + beta);
        }
    }
    out
}

pub fn decode(params: &ParamSet, content: &Array4<f64>, adain: &Array2<f64>) -> Array4<f64> {
    let mut h = content.clone();
    for i in 1..=4 {
        let l0 = (i - 1) * 2;
        let mut r = conv2d(
            &h,
            &p4(params, &format!("dec.res{i}.conv1.w")),
            &p1(params, &format!("dec.res{i}.conv1.b")),
            1,
            1,
        );
        r = relu4(&adain_apply(&r, adain, l0));
        r = conv2d(
            &r,
            &p4(params, &format!("dec.res{i}.conv2.w")),
            &p1(params, &format!("dec.res{i}.conv2.b")),
            1,
            1,
        );
        r = relu4(&adain_apply(&r, adain, l0 + 1));
        h = h + r;
    }
    h = upsample2(&h);
    h = conv2d(&h, &p4(params, "dec.conv1.w"), &p1(params, "dec.conv1.b"), 1, 2);
    h = relu4(&h);
    h = upsample2(&h);
    h = conv2d(&h, &p4(params, "dec.conv2.w"), &p1(params, "dec.conv2.b"), 1, 2);
    h = relu4(&h);
    h = conv2d(&h, &p4(params, "dec.conv3.w"), &p1(params, "dec.conv3.b"), 1, 3);
    h.mapv(|v| v.tanh())
}

/// Full pipeline X̂ = G(E(X), MLP(Uo+μ)) in f64.
pub fn synthesize(params: &ParamSet, o: &Array2<f64>, x: &Array4<f64>) -> Array4<f64> {
    let u = p2(params, crate::subspace::PARAM_U);
    let mu = p1(params, crate::subspace::PARAM_MU);
    let z = o.dot(&u.t()) + &mu;
    let content = encode(params, x);
    let adain = map_style(params, &z);
    decode(params, &content, &adain)
}

/// Normalized recognition embedding under `prefix` (e.g. "fr.").
pub fn fr_embed(params: &ParamSet, prefix: &str, x: &Array4<f64>) -> Array2<f64> {
    let mut h = x.clone();
    for i in 1..=4 {
        h = conv2d(
            &h,
            &p4(params, &format!("{prefix}conv{i}.w")),
            &p1(params, &format!("{prefix}conv{i}.b")),
            2,
            1,
        );
        h = relu4(&instance_norm(&h, IN_EPS));
    }
    let pooled = spatial_mean(&h);
    let e = linear(
        &pooled,
        &p2(params, &format!("{prefix}fc.w")),
        &p1(params, &format!("{prefix}fc.b")),
    );
    l2_normalize_rows(&e)
}

pub fn identity_loss(
    params: &ParamSet,
    prefix: &str,
    x: &Array4<f64>,
    x_hat: &Array4<f64>,
    magnitudes: &Array1<f64>,
    schedule: &MagnitudeSchedule,
) -> f64 {
    let ex = fr_embed(params, prefix, x);
    let exh = fr_embed(params, prefix, x_hat);
    let b = ex.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let cos: f64 = ex.row(i).iter().zip(exh.row(i)).map(|(a, c)| a * c).sum();
        let target = schedule.target(magnitudes[i] as f32) as f64;
        let diff = (1.0 - cos) - target;
        total += diff * diff;
    }
    total / b as f64
}

pub fn orthogonality(u: &Array2<f64>) -> f64 {
    let gram = u.t().dot(u);
    gram.indexed_iter()
        .map(|((i, j), &v)| (v - if i == j { 1.0 } else { 0.0 }).abs())
        .sum()
}

pub fn margin_loss(
    e: &Array2<f64>,
    w: &Array2<f64>,
    scale: f64,
    margin: f64,
    labels: &[usize],
) -> f64 {
    let en = l2_normalize_rows(e);
    let wn = l2_normalize_rows(w);
    let cos = en.dot(&wn.t());
    let mut total = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        let logits: Vec<f64> = cos
            .row(i)
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                if j == l {
                    let sin = (1.0 - c * c).max(1e-12).sqrt();
                    scale * (c * margin.cos() - sin * margin.sin())
                } else {
                    scale * c
                }
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + logits.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - logits[l];
    }
    total / labels.len() as f64
}
