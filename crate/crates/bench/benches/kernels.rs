use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use vda_bench::{image, rng, tensor};
use vda_core::degrade::{self, Compression, DegradationSpec, MotionBlur, ScaleVariation};
use vda_core::{Graph, Padding};

fn conv(c: &mut Criterion) {
    let mut r = rng(0);
    // the toy network's widest layer
    let x = tensor(&mut r, &[16, 8, 32, 32]);
    let w = tensor(&mut r, &[16, 8, 3, 3]);
    let b = tensor(&mut r, &[16]);
    let mut group = c.benchmark_group("conv2d");
    group.bench_function("forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.param("w", &w, true);
            let bv = g.param("b", &b, true);
            black_box(g.conv2d(xv, wv, Some(bv), 1, Padding::Same).unwrap());
        })
    });
    group.bench_function("forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.param("w", &w, true);
            let bv = g.param("b", &b, true);
            let y = g.conv2d(xv, wv, Some(bv), 1, Padding::Same).unwrap();
            let loss = g.mean(y);
            black_box(g.backward(loss).unwrap());
        })
    });
    group.finish();
}

fn degradation(c: &mut Criterion) {
    let mut group = c.benchmark_group("degrade");
    for size in [32, 100] {
        let img = image(&mut rng(1), size);
        let specs = [
            (
                "blur",
                DegradationSpec {
                    blur: Some(MotionBlur {
                        length: 9,
                        angle: 20.0,
                    }),
                    ..DegradationSpec::identity()
                },
            ),
            (
                "scale",
                DegradationSpec {
                    scale: Some(ScaleVariation { factor: 0.4 }),
                    ..DegradationSpec::identity()
                },
            ),
            (
                "compress",
                DegradationSpec {
                    compression: Some(Compression { quality: 40 }),
                    ..DegradationSpec::identity()
                },
            ),
        ];
        for (name, spec) in specs {
            group.bench_with_input(BenchmarkId::new(name, size), &img, |bench, img| {
                bench.iter(|| black_box(degrade::apply(&spec, img).unwrap()))
            });
        }
        group.bench_with_input(BenchmarkId::new("sampled", size), &img, |bench, img| {
            let mut r = rng(2);
            bench.iter(|| {
                let spec = degrade::sample_spec(&mut r);
                black_box(degrade::apply(&spec, img).unwrap())
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv, degradation);
criterion_main!(benches);
