//! 2-D convolution, pooling and upsampling kernels (NCHW, f32).
//!
//! Convolution is im2col + one SGEMM per batch chunk. Chunk size is a fixed
//! function of the layer shapes (bounded column-buffer memory), so the chunk
//! partition — and therefore the floating-point result — is identical whether
//! chunks run sequentially or on the rayon pool.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView4, ArrayViewMut4, Axis};

use crate::{blas, parallel};

/// Upper bound on one chunk's im2col buffer.
const COLS_BUDGET_BYTES: usize = 32 << 20;

/// Stride-1 convolutions with at most this many output channels skip im2col:
/// a [3, cin*k*k] GEMM is memory-bound on the column buffer, so tap-wise
/// accumulation straight from the input is faster.
const DIRECT_COUT_MAX: usize = 4;

/// Output spatial size for one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn batch_chunk(cin: usize, kh: usize, kw: usize, ho: usize, wo: usize, batch: usize) -> usize {
    let per_sample = cin * kh * kw * ho * wo * std::mem::size_of::<f32>();
    (COLS_BUDGET_BYTES / per_sample.max(1)).clamp(1, batch.max(1))
}

/// Writes the im2col expansion of `x` (one batch chunk) into `cols`.
///
/// `cols` is `[cin*kh*kw, chunk_b*ho*wo]`; column index is `b*ho*wo + oy*wo + ox`,
/// row index is `(c*kh + ky)*kw + kx`.
fn im2col(
    x: &ArrayView4<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<f32>,
) {
    let (cb, cin, h, w) = x.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let hw = ho * wo;
    debug_assert_eq!(cols.dim(), (cin * kh * kw, cb * hw));
    let cols_w = cols.ncols();
    let cols_s = cols.as_slice_mut().expect("im2col: cols contiguous");

    for b in 0..cb {
        let xb = x.index_axis(Axis(0), b);
        for c in 0..cin {
            let xc = xb.index_axis(Axis(0), c);
            let xc_s = xc.as_slice().expect("im2col: input contiguous");
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let row_base = row * cols_w + b * hw;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let dst = &mut cols_s[row_base + oy * wo..row_base + (oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src_row = &xc_s[iy as usize * w..(iy as usize + 1) * w];
                        if stride == 1 {
                            // Contiguous copy with zero fill at the borders.
                            let off = kx as isize - pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = (w as isize - off).clamp(0, wo as isize) as usize;
                            dst[..lo.min(wo)].fill(0.0);
                            if hi > lo {
                                dst[lo..hi]
                                    .copy_from_slice(&src_row[(lo as isize + off) as usize..][..hi - lo]);
                            }
                            dst[hi.max(lo)..].fill(0.0);
                        } else {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                *d = if ix >= 0 && ix < w as isize {
                                    src_row[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-accumulate of im2col columns back to input layout (adjoint of `im2col`).
fn col2im(
    cols: &Array2<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gx: &mut ArrayViewMut4<f32>,
) {
    let (cb, cin, h, w) = gx.dim();
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(w, kw, stride, pad);
    let hw = ho * wo;
    let cols_w = cols.ncols();
    let cols_s = cols.as_slice().expect("col2im: cols contiguous");

    for b in 0..cb {
        let mut gb = gx.index_axis_mut(Axis(0), b);
        for c in 0..cin {
            let mut gc = gb.index_axis_mut(Axis(0), c);
            let gc_s = gc.as_slice_mut().expect("col2im: grad contiguous");
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let row_base = row * cols_w + b * hw;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols_s[row_base + oy * wo..row_base + (oy + 1) * wo];
                        let dst_row = iy as usize * w;
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            let lo = (-off).max(0) as usize;
                            let hi = (w as isize - off).clamp(0, wo as isize) as usize;
                            if hi > lo {
                                let dst = &mut gc_s
                                    [dst_row + (lo as isize + off) as usize..][..hi - lo];
                                for (d, s) in dst.iter_mut().zip(&src[lo..hi]) {
                                    *d += s;
                                }
                            }
                        } else {
                            for (ox, &v) in src.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    gc_s[dst_row + ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Valid output-column window `[lo, hi)` for a stride-1 tap at offset
/// `kx - pad`, i.e. the `ox` for which `ox + kx - pad` lands inside `[0, w)`.
fn tap_window(kx: usize, pad: usize, w: usize, wo: usize) -> (usize, usize, isize) {
    let off = kx as isize - pad as isize;
    let lo = (-off).max(0) as usize;
    let hi = (w as isize - off).clamp(0, wo as isize) as usize;
    (lo, hi.max(lo), off)
}

/// Tap-accumulation forward for stride-1, few-output-channel convolutions.
fn conv2d_forward_direct(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    bias: &ArrayView1<f32>,
    pad: usize,
    out: &mut ArrayViewMut4<f32>,
) {
    let (cb, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = out.dim();
    for b in 0..cb {
        let xb = x.index_axis(Axis(0), b);
        for co in 0..cout {
            let mut op = out.slice_mut(s![b, co, .., ..]);
            let op_s = op.as_slice_mut().expect("conv direct: out contiguous");
            for ci in 0..cin {
                let xc = xb.index_axis(Axis(0), ci);
                let xc_s = xc.as_slice().expect("conv direct: input contiguous");
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[[co, ci, ky, kx]];
                        let (lo, hi, off) = tap_window(kx, pad, wd, wo);
                        if hi == lo {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src =
                                &xc_s[iy as usize * wd + (lo as isize + off) as usize..][..hi - lo];
                            let dst = &mut op_s[oy * wo + lo..oy * wo + hi];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
            let bv = bias[co];
            for d in op_s.iter_mut() {
                *d += bv;
            }
        }
    }
}

/// Tap-accumulation input gradient, the adjoint of `conv2d_forward_direct`.
fn conv2d_dx_direct(
    w: &ArrayView4<f32>,
    gout: &ArrayView4<f32>,
    pad: usize,
    gx: &mut ArrayViewMut4<f32>,
) {
    let (cb, cin, h, wd) = gx.dim();
    let (cout, _, kh, kw) = w.dim();
    let (_, _, ho, wo) = gout.dim();
    for b in 0..cb {
        let gb = gout.index_axis(Axis(0), b);
        for ci in 0..cin {
            let mut gp = gx.slice_mut(s![b, ci, .., ..]);
            let gp_s = gp.as_slice_mut().expect("conv direct: gx contiguous");
            for co in 0..cout {
                let gc = gb.index_axis(Axis(0), co);
                let gc_s = gc.as_slice().expect("conv direct: gout contiguous");
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w[[co, ci, ky, kx]];
                        let (lo, hi, off) = tap_window(kx, pad, wd, wo);
                        if hi == lo {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &gc_s[oy * wo + lo..oy * wo + hi];
                            let dst = &mut gp_s
                                [iy as usize * wd + (lo as isize + off) as usize..][..hi - lo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Weight gradient for the direct path: per-tap dot products of `gout` rows
/// against shifted input rows, accumulated in a fixed (batch, row) order.
fn conv2d_dw_direct(
    x: &ArrayView4<f32>,
    gout: &ArrayView4<f32>,
    kh: usize,
    kw: usize,
    pad: usize,
    gw: &mut Array4<f32>,
) {
    let (cb, cin, h, wd) = x.dim();
    let (_, cout, ho, wo) = gout.dim();
    for co in 0..cout {
        for ci in 0..cin {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (lo, hi, off) = tap_window(kx, pad, wd, wo);
                    if hi == lo {
                        continue;
                    }
                    // Eight independent lanes so the reduction vectorizes;
                    // lane assignment is positional, hence deterministic.
                    let mut lanes = [0f32; 8];
                    for b in 0..cb {
                        let gc = gout.slice(s![b, co, .., ..]);
                        let gc_s = gc.to_slice().expect("conv direct: gout contiguous");
                        let xc = x.slice(s![b, ci, .., ..]);
                        let xc_s = xc.to_slice().expect("conv direct: input contiguous");
                        for oy in 0..ho {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let g = &gc_s[oy * wo + lo..oy * wo + hi];
                            let xrow =
                                &xc_s[iy as usize * wd + (lo as isize + off) as usize..][..hi - lo];
                            let mut chunks = g.chunks_exact(8).zip(xrow.chunks_exact(8));
                            for (gc8, xc8) in &mut chunks {
                                for j in 0..8 {
                                    lanes[j] += gc8[j] * xc8[j];
                                }
                            }
                            let tail = g.len() - g.len() % 8;
                            for (j, (gv, xv)) in g[tail..].iter().zip(&xrow[tail..]).enumerate() {
                                lanes[j] += gv * xv;
                            }
                        }
                    }
                    let acc = lanes.iter().copied().fold(0f32, |a, v| a + v);
                    gw[[co, ci, ky, kx]] += acc;
                }
            }
        }
    }
}

/// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
pub fn conv2d_forward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    bias: &ArrayView1<f32>,
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (batch, cin, h, wd) = x.dim();
    let (cout, wcin, kh, kw) = w.dim();
    assert_eq!(cin, wcin, "conv2d: channel mismatch");
    assert_eq!(bias.len(), cout, "conv2d: bias length");
    let ho = conv_out_len(h, kh, stride, pad);
    let wo = conv_out_len(wd, kw, stride, pad);
    let hw = ho * wo;

    let mut out = Array4::<f32>::zeros((batch, cout, ho, wo));

    if stride == 1 && cout <= DIRECT_COUT_MAX {
        let jobs: Vec<(ArrayView4<f32>, ArrayViewMut4<f32>)> = x
            .axis_chunks_iter(Axis(0), 1)
            .zip(out.axis_chunks_iter_mut(Axis(0), 1))
            .collect();
        parallel::for_each_vec(jobs, |(xc, mut oc)| {
            conv2d_forward_direct(&xc, w, bias, pad, &mut oc);
        });
        return out;
    }

    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv2d: weight reshape")
        .to_owned();
    let chunk = batch_chunk(cin, kh, kw, ho, wo, batch);

    let jobs: Vec<(ArrayView4<f32>, ArrayViewMut4<f32>)> = x
        .axis_chunks_iter(Axis(0), chunk)
        .zip(out.axis_chunks_iter_mut(Axis(0), chunk))
        .collect();
    parallel::for_each_vec(jobs, |(xc, mut oc)| {
        let cb = xc.dim().0;
        let mut cols = Array2::<f32>::zeros((cin * kh * kw, cb * hw));
        im2col(&xc, kh, kw, stride, pad, &mut cols);
        let mut out2 = Array2::<f32>::zeros((cout, cb * hw));
        blas::sgemm(false, false, 1.0, &w2.view(), &cols.view(), 0.0, &mut out2.view_mut());
        let out2_s = out2.as_slice().unwrap();
        for b in 0..cb {
            for c in 0..cout {
                let dst = oc.slice_mut(s![b, c, .., ..]);
                let dsts = dst.into_slice_memory_order().unwrap();
                let src = &out2_s[c * (cb * hw) + b * hw..][..hw];
                let bv = bias[c];
                for (d, &v) in dsts.iter_mut().zip(src) {
                    *d = v + bv;
                }
            }
        }
    });
    out
}

/// Gradients of `conv2d_forward`. Returns `(gx, gw, gb)`; `gx`/`gw` are
/// computed only when requested.
pub fn conv2d_backward(
    x: &ArrayView4<f32>,
    w: &ArrayView4<f32>,
    stride: usize,
    pad: usize,
    gout: &ArrayView4<f32>,
    need_gx: bool,
    need_gw: bool,
) -> (Option<Array4<f32>>, Option<Array4<f32>>, Array1<f32>) {
    let (batch, cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let (gb_, gc_, ho, wo) = gout.dim();
    assert_eq!((gb_, gc_), (batch, cout), "conv2d_backward: grad shape");
    let hw = ho * wo;

    let mut gbias = Array1::<f32>::zeros(cout);
    for c in 0..cout {
        let mut acc = 0f64;
        for v in gout.slice(s![.., c, .., ..]).iter() {
            acc += *v as f64;
        }
        gbias[c] = acc as f32;
    }
    if !need_gx && !need_gw {
        return (None, None, gbias);
    }

    if stride == 1 && cout <= DIRECT_COUT_MAX {
        let gx = need_gx.then(|| {
            let mut gx = Array4::<f32>::zeros((batch, cin, h, wd));
            let jobs: Vec<(ArrayView4<f32>, ArrayViewMut4<f32>)> = gout
                .axis_chunks_iter(Axis(0), 1)
                .zip(gx.axis_chunks_iter_mut(Axis(0), 1))
                .collect();
            parallel::for_each_vec(jobs, |(gc, mut gxc)| {
                conv2d_dx_direct(w, &gc, pad, &mut gxc);
            });
            gx
        });
        let gw = need_gw.then(|| {
            let jobs: Vec<(ArrayView4<f32>, ArrayView4<f32>)> = x
                .axis_chunks_iter(Axis(0), 1)
                .zip(gout.axis_chunks_iter(Axis(0), 1))
                .collect();
            let partials = parallel::map_vec(jobs, |(xc, gc)| {
                let mut part = Array4::<f32>::zeros((cout, cin, kh, kw));
                conv2d_dw_direct(&xc, &gc, kh, kw, pad, &mut part);
                part
            });
            let mut acc = Array4::<f32>::zeros((cout, cin, kh, kw));
            for p in partials {
                acc += &p;
            }
            acc
        });
        return (gx, gw, gbias);
    }

    let w2 = w
        .to_shape((cout, cin * kh * kw))
        .expect("conv2d: weight reshape")
        .to_owned();
    let chunk = batch_chunk(cin, kh, kw, ho, wo, batch);
    let mut gx = need_gx.then(|| Array4::<f32>::zeros((batch, cin, h, wd)));

    // Each chunk returns its weight-gradient partial; partials are summed in
    // chunk order to keep the result independent of scheduling.
    let gx_chunks: Vec<Option<ArrayViewMut4<f32>>> = match gx.as_mut() {
        Some(g) => g.axis_chunks_iter_mut(Axis(0), chunk).map(Some).collect(),
        None => (0..batch.div_ceil(chunk)).map(|_| None).collect(),
    };
    let jobs: Vec<((ArrayView4<f32>, ArrayView4<f32>), Option<ArrayViewMut4<f32>>)> = x
        .axis_chunks_iter(Axis(0), chunk)
        .zip(gout.axis_chunks_iter(Axis(0), chunk))
        .zip(gx_chunks)
        .collect();

    let partials: Vec<Option<Array2<f32>>> =
        parallel::map_vec(jobs, |((xc, gc), gxc)| {
            let cb = xc.dim().0;
            let mut cols = Array2::<f32>::zeros((cin * kh * kw, cb * hw));
            im2col(&xc, kh, kw, stride, pad, &mut cols);

            // Gather gout chunk into [Cout, cb*hw] with the im2col column order.
            let mut g2 = Array2::<f32>::zeros((cout, cb * hw));
            {
                let g2_s = g2.as_slice_mut().unwrap();
                for b in 0..cb {
                    for c in 0..cout {
                        let src = gc.slice(s![b, c, .., ..]);
                        let srcs = src.to_slice().unwrap();
                        g2_s[c * (cb * hw) + b * hw..][..hw].copy_from_slice(srcs);
                    }
                }
            }

            let gw_part = need_gw.then(|| {
                let mut gw2 = Array2::<f32>::zeros((cout, cin * kh * kw));
                blas::sgemm(false, true, 1.0, &g2.view(), &cols.view(), 0.0, &mut gw2.view_mut());
                gw2
            });
            if let Some(mut gxc) = gxc {
                let mut dcols = Array2::<f32>::zeros((cin * kh * kw, cb * hw));
                blas::sgemm(true, false, 1.0, &w2.view(), &g2.view(), 0.0, &mut dcols.view_mut());
                col2im(&dcols, kh, kw, stride, pad, &mut gxc);
            }
            gw_part
        });

    let gw = need_gw.then(|| {
        let mut acc = Array2::<f32>::zeros((cout, cin * kh * kw));
        for p in partials.into_iter().flatten() {
            acc += &p;
        }
        acc.into_shape_with_order((cout, cin, kh, kw)).unwrap()
    });

    (gx, gw, gbias)
}

/// 2x2 average pooling, stride 2 (both input dims must be even).
pub fn avg_pool2_forward(x: &ArrayView4<f32>) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd input {h}x{w}");
    let mut out = Array4::<f32>::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            let xs = x.slice(s![bi, ci, .., ..]);
            let xs_s = xs.to_slice().expect("avg_pool2: input contiguous");
            let mut os = out.slice_mut(s![bi, ci, .., ..]);
            let os_s = os.as_slice_mut().expect("avg_pool2: out contiguous");
            for oy in 0..h / 2 {
                let r0 = &xs_s[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &xs_s[(2 * oy + 1) * w..(2 * oy + 2) * w];
                let dst = &mut os_s[oy * (w / 2)..(oy + 1) * (w / 2)];
                for (ox, d) in dst.iter_mut().enumerate() {
                    *d = 0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]);
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward(gout: &ArrayView4<f32>, in_h: usize, in_w: usize) -> Array4<f32> {
    let (b, c, ho, wo) = gout.dim();
    let mut gx = Array4::<f32>::zeros((b, c, in_h, in_w));
    for bi in 0..b {
        for ci in 0..c {
            let gs = gout.slice(s![bi, ci, .., ..]);
            let gs_s = gs.to_slice().expect("avg_pool2: grad contiguous");
            let mut xs = gx.slice_mut(s![bi, ci, .., ..]);
            let xs_s = xs.as_slice_mut().expect("avg_pool2: gx contiguous");
            for oy in 0..ho {
                let src = &gs_s[oy * wo..(oy + 1) * wo];
                let (r0, r1) = xs_s[2 * oy * in_w..(2 * oy + 2) * in_w].split_at_mut(in_w);
                for (ox, &gv) in src.iter().enumerate() {
                    let g = gv * 0.25;
                    r0[2 * ox] += g;
                    r0[2 * ox + 1] += g;
                    r1[2 * ox] += g;
                    r1[2 * ox + 1] += g;
                }
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2_forward(x: &ArrayView4<f32>) -> Array4<f32> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            let xs = x.slice(s![bi, ci, .., ..]);
            let xs_s = xs.to_slice().expect("upsample2: input contiguous");
            let mut os = out.slice_mut(s![bi, ci, .., ..]);
            let os_s = os.as_slice_mut().expect("upsample2: out contiguous");
            for y in 0..h {
                let src = &xs_s[y * w..(y + 1) * w];
                let (r0, r1) = os_s[2 * y * 2 * w..(2 * y + 2) * 2 * w].split_at_mut(2 * w);
                for (i, &v) in src.iter().enumerate() {
                    r0[2 * i] = v;
                    r0[2 * i + 1] = v;
                }
                r1.copy_from_slice(r0);
            }
        }
    }
    out
}

pub fn upsample2_backward(gout: &ArrayView4<f32>) -> Array4<f32> {
    let (b, c, h2, w2) = gout.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f32>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let gs = gout.slice(s![bi, ci, .., ..]);
            let gs_s = gs.to_slice().expect("upsample2: grad contiguous");
            let mut xs = gx.slice_mut(s![bi, ci, .., ..]);
            let xs_s = xs.as_slice_mut().expect("upsample2: gx contiguous");
            for y in 0..h {
                let g0 = &gs_s[2 * y * w2..(2 * y + 1) * w2];
                let g1 = &gs_s[(2 * y + 1) * w2..(2 * y + 2) * w2];
                let dst = &mut xs_s[y * w..(y + 1) * w];
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = ((g0[2 * i] + g0[2 * i + 1]) + g1[2 * i]) + g1[2 * i + 1];
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn rand_arr4(rng: &mut ChaCha12Rng, dims: (usize, usize, usize, usize)) -> Array4<f32> {
        Array::from_shape_fn(dims, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Direct (naive) convolution reference.
    fn conv_ref(
        x: &Array4<f32>,
        w: &Array4<f32>,
        b: &Array1<f32>,
        stride: usize,
        pad: usize,
    ) -> Array4<f32> {
        let (bs, cin, h, wd) = x.dim();
        let (cout, _, kh, kw) = w.dim();
        let ho = conv_out_len(h, kh, stride, pad);
        let wo = conv_out_len(wd, kw, stride, pad);
        let mut out = Array4::<f32>::zeros((bs, cout, ho, wo));
        for bi in 0..bs {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive_reference() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for &(cin, cout, k, stride, pad, h) in &[
            (3usize, 4usize, 3usize, 1usize, 1usize, 8usize),
            (2, 5, 4, 2, 1, 8),
            (3, 2, 7, 1, 3, 9),
            (4, 3, 3, 2, 1, 7),
            (1, 1, 1, 1, 0, 5),
            (3, 8, 3, 1, 1, 8),
            (2, 6, 5, 1, 0, 9),
        ] {
            let x = rand_arr4(&mut rng, (3, cin, h, h));
            let w = rand_arr4(&mut rng, (cout, cin, k, k));
            let b = Array::from_shape_fn(cout, |_| rng.random_range(-0.5f32..0.5));
            let got = conv2d_forward(&x.view(), &w.view(), &b.view(), stride, pad);
            let expect = conv_ref(&x, &w, &b, stride, pad);
            let max_err = got
                .iter()
                .zip(expect.iter())
                .map(|(a, e)| (a - e).abs())
                .fold(0f32, f32::max);
            assert!(max_err < 1e-4, "k={k} s={stride} p={pad}: max err {max_err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        // Covers the im2col path (stride 2), the direct few-channel path
        // (stride 1, cout ≤ 4), and the stride-1 im2col path (cout > 4).
        for &(cout, k, stride, pad) in &[(3usize, 4usize, 2usize, 1usize), (3, 3, 1, 1), (6, 5, 1, 2)] {
            let x = rand_arr4(&mut rng, (2, 2, 6, 6));
            let w = rand_arr4(&mut rng, (cout, 2, k, k));
            let b = Array::from_shape_fn(cout, |_| rng.random_range(-0.5f32..0.5));
            // Scalar head: weighted sum of outputs.
            let out0 = conv2d_forward(&x.view(), &w.view(), &b.view(), stride, pad);
            let head = rand_arr4(&mut rng, out0.dim());
            let gout = head.clone();
            let (gx, gw, gb) =
                conv2d_backward(&x.view(), &w.view(), stride, pad, &gout.view(), true, true);
            let (gx, gw) = (gx.unwrap(), gw.unwrap());

            let loss = |x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>| -> f64 {
                let out = conv2d_forward(&x.view(), &w.view(), &b.view(), stride, pad);
                out.iter()
                    .zip(head.iter())
                    .map(|(o, h)| *o as f64 * *h as f64)
                    .sum()
            };

            let eps = 1e-2f32;
            let check = |analytic: f32, plus: f64, minus: f64| {
                let fd = ((plus - minus) / (2.0 * eps as f64)) as f32;
                assert!(
                    (analytic - fd).abs() <= 1e-3 * fd.abs().max(1.0),
                    "cout={cout} k={k} s={stride} p={pad}: analytic {analytic} vs fd {fd}"
                );
            };
            for _ in 0..10 {
                let idx = (
                    rng.random_range(0..2),
                    rng.random_range(0..2),
                    rng.random_range(0..6),
                    rng.random_range(0..6),
                );
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                check(gx[idx], loss(&xp, &w, &b), loss(&xm, &w, &b));
            }
            for _ in 0..10 {
                let idx = (
                    rng.random_range(0..cout),
                    rng.random_range(0..2),
                    rng.random_range(0..k),
                    rng.random_range(0..k),
                );
                let mut wp = w.clone();
                wp[idx] += eps;
                let mut wm = w.clone();
                wm[idx] -= eps;
                check(gw[idx], loss(&x, &wp, &b), loss(&x, &wm, &b));
            }
            for c in 0..cout {
                let mut bp = b.clone();
                bp[c] += eps;
                let mut bm = b.clone();
                bm[c] -= eps;
                check(gb[c], loss(&x, &w, &bp), loss(&x, &w, &bm));
            }
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint_consistent() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let x = rand_arr4(&mut rng, (2, 3, 6, 6));
        let pooled = avg_pool2_forward(&x.view());
        assert_eq!(pooled.dim(), (2, 3, 3, 3));
        // <pool(x), y> == <x, pool^T(y)>
        let y = rand_arr4(&mut rng, (2, 3, 3, 3));
        let lhs: f64 = pooled
            .iter()
            .zip(y.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let yt = avg_pool2_backward(&y.view(), 6, 6);
        let rhs: f64 = x
            .iter()
            .zip(yt.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);

        let up = upsample2_forward(&y.view());
        assert_eq!(up.dim(), (2, 3, 6, 6));
        let lhs2: f64 = up
            .iter()
            .zip(x.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        let xt = upsample2_backward(&x.view());
        let rhs2: f64 = y
            .iter()
            .zip(xt.iter())
            .map(|(a, b)| *a as f64 * *b as f64)
            .sum();
        assert!((lhs2 - rhs2).abs() < 1e-4);
    }

    #[test]
    fn parallel_and_sequential_chunks_agree_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for &cout in &[8usize, 3] {
            let x = rand_arr4(&mut rng, (7, 3, 16, 16));
            let w = rand_arr4(&mut rng, (cout, 3, 3, 3));
            let b = Array1::<f32>::zeros(cout);
            let g = rand_arr4(&mut rng, (7, cout, 16, 16));
            crate::parallel::set_parallel_enabled(true);
            let a = conv2d_forward(&x.view(), &w.view(), &b.view(), 1, 1);
            let (agx, agw, _) =
                conv2d_backward(&x.view(), &w.view(), 1, 1, &g.view(), true, true);
            crate::parallel::set_parallel_enabled(false);
            let s = conv2d_forward(&x.view(), &w.view(), &b.view(), 1, 1);
            let (sgx, sgw, _) =
                conv2d_backward(&x.view(), &w.view(), 1, 1, &g.view(), true, true);
            crate::parallel::set_parallel_enabled(true);
            assert_eq!(a, s);
            assert_eq!(agx.unwrap(), sgx.unwrap());
            assert_eq!(agw.unwrap(), sgw.unwrap());
        }
    }
}
