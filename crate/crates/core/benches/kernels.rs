//! Sequential vs data-parallel timings of the hot kernels. With the
//! `parallel` feature off both rows run the sequential path.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use sehr_core::autodiff::{Tape, Tensor};
use sehr_core::camera::RigConfig;
use sehr_core::gradcheck::random_scene;
use sehr_core::par;
use sehr_core::render::{render, RenderSettings};

fn modes() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("sequential", 1), ("parallel", all)]
}

fn bench_render(c: &mut Criterion) {
    let set = random_scene(7, 4000, 0.6);
    let cam = RigConfig::default().camera(30.0, 10.0, 128).unwrap();
    let settings = RenderSettings::default();
    let mut group = c.benchmark_group("render_128");
    for (name, threads) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::with_threads(threads, || b.iter(|| black_box(render(&set, &cam, [1.0; 3], &settings))))
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = Tensor::<f32>::full(&[4, 32, 32, 32], 0.1);
    let w = Tensor::<f32>::full(&[32, 32, 3, 3], 0.01);
    let b = Tensor::<f32>::zeros(&[32]);
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    for (name, threads) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::with_threads(threads, || {
                bench.iter(|| {
                    let mut tape = Tape::new();
                    let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
                    let y = tape.conv2d(xv, wv, bv, 1, 1).unwrap();
                    let zero = tape.constant(Tensor::zeros(&[4, 32, 32, 32]));
                    let l = tape.mean_square(y, zero).unwrap();
                    black_box(tape.backward(l).unwrap())
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render, bench_conv);
criterion_main!(benches);
