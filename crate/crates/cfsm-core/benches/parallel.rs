//! Parallel vs. sequential lane timings for the convolution kernels and a
//! generator-sized forward pass. The lanes compute bitwise-identical results;
//! this suite measures what the rayon fan-out buys on the current host.

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array4;

use cfsm_core::conv::{conv2d_backward, conv2d_forward};
use cfsm_core::nn::{bind_params, derive_rng};
use cfsm_core::parallel::set_parallel_enabled;
use cfsm_core::synthesis::{SynthesisConfig, SynthesisModel};
use cfsm_core::Tape;

fn rand4(seed: u64, label: &str, shape: (usize, usize, usize, usize)) -> Array4<f32> {
    use rand::Rng;
    let mut rng = derive_rng(seed, label);
    Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
}

fn bench_conv(c: &mut Criterion) {
    let x = rand4(1, "bench-x", (8, 64, 16, 16));
    let w = rand4(1, "bench-w", (64, 64, 3, 3));
    let b = ndarray::Array1::<f32>::zeros(64);
    let gout = rand4(1, "bench-g", (8, 64, 16, 16));

    let mut group = c.benchmark_group("conv2d_forward_8x64x16");
    for (lane, enabled) in [("parallel", true), ("sequential", false)] {
        group.bench_function(lane, |bench| {
            set_parallel_enabled(enabled);
            bench.iter(|| conv2d_forward(&x.view(), &w.view(), &b.view(), 1, 1));
        });
    }
    group.finish();
    set_parallel_enabled(true);

    let mut group = c.benchmark_group("conv2d_backward_8x64x16");
    for (lane, enabled) in [("parallel", true), ("sequential", false)] {
        group.bench_function(lane, |bench| {
            set_parallel_enabled(enabled);
            bench.iter(|| {
                conv2d_backward(&x.view(), &w.view(), 1, 1, &gout.view(), true, true)
            });
        });
    }
    group.finish();
    set_parallel_enabled(true);
}

fn bench_synthesize(c: &mut Criterion) {
    let cfg = SynthesisConfig {
        image_size: 32,
        coeff_dim: 10,
        style_dim: 128,
    };
    let model = SynthesisModel::new(cfg).unwrap();
    let subspace = cfg.subspace();
    let mut rng = derive_rng(2, "bench-synth");
    let mut params = model.init_params(&mut rng);
    params.absorb_prefixed("", subspace.init_params(&mut rng));
    let x = rand4(2, "bench-img", (4, 3, 32, 32));
    let o = {
        let mut r = derive_rng(2, "bench-o");
        subspace.sample_coefficients(&mut r, 4)
    };

    let mut group = c.benchmark_group("synthesize_b4_32px");
    group.sample_size(10);
    for (lane, enabled) in [("parallel", true), ("sequential", false)] {
        group.bench_function(lane, |bench| {
            set_parallel_enabled(enabled);
            bench.iter(|| model.synthesize(&params, &o, &x).unwrap());
        });
    }
    group.finish();
    set_parallel_enabled(true);
}

fn bench_generator_step_graph(c: &mut Criterion) {
    // Forward + backward through encode/map/decode at training shapes.
    let cfg = SynthesisConfig {
        image_size: 32,
        coeff_dim: 10,
        style_dim: 128,
    };
    let model = SynthesisModel::new(cfg).unwrap();
    let subspace = cfg.subspace();
    let mut rng = derive_rng(3, "bench-step");
    let mut params = model.init_params(&mut rng);
    params.absorb_prefixed("", subspace.init_params(&mut rng));
    let x = rand4(3, "bench-img", (4, 3, 32, 32));
    let o = {
        let mut r = derive_rng(3, "bench-o");
        subspace.sample_coefficients(&mut r, 4)
    };
    let z = subspace.style_codes(&params, &o).unwrap();

    let mut group = c.benchmark_group("generator_fwd_bwd_b4_32px");
    group.sample_size(10);
    for (lane, enabled) in [("parallel", true), ("sequential", false)] {
        group.bench_function(lane, |bench| {
            set_parallel_enabled(enabled);
            bench.iter(|| {
                let mut tape = Tape::new();
                let bind = bind_params(&mut tape, &params, true);
                let xv = tape.constant(x.clone().into_dyn());
                let zv = tape.constant(z.clone().into_dyn());
                let out = model.synthesize_with_codes(&mut tape, &bind, xv, zv).unwrap();
                let sq = tape.mul(out, out);
                let loss = tape.mean_all(sq);
                tape.backward(loss)
            });
        });
    }
    group.finish();
    set_parallel_enabled(true);
}

criterion_group!(
    benches,
    bench_conv,
    bench_synthesize,
    bench_generator_step_graph
);
criterion_main!(benches);
