//! Rayon-vs-sequential comparison of the data-parallel hot loops: batched
//! convolution, full eval-mode forward, scene generation, and split
//! evaluation. The same code runs in both modes; only the dispatch differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array1, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srwseg::autodiff::{conv2d, Conv2dSpec, Graph};
use srwseg::evaluation::predict_all;
use srwseg::exec;
use srwseg::network::{build_model, NetworkConfig};
use srwseg::synthdata::{apply_modality, generate_scene, Modality, SamplePair, Split};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array4::<f32>::from_shape_fn((8, 32, 32, 32), |_| rng.random::<f32>());
    let w = Array4::<f32>::from_shape_fn((32, 32, 3, 3), |_| rng.random::<f32>() * 0.1);
    let b = Array1::<f32>::zeros(32);

    let mut group = c.benchmark_group("conv2d_8x32x32x32");
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            exec::set_parallel(par);
            bench.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.constant(black_box(x.clone()).into_dyn());
                let wv = g.leaf(w.clone().into_dyn());
                let bv = g.leaf(b.clone().into_dyn());
                let y = conv2d(&mut g, xv, wv, bv, Conv2dSpec::same3x3()).unwrap();
                black_box(g.value(y).len())
            });
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn bench_model_forward(c: &mut Criterion) {
    let cfg = NetworkConfig::default();
    let model = build_model::<f32>(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array4::<f32>::from_shape_fn((8, 3, 64, 64), |_| rng.random::<f32>());

    let mut group = c.benchmark_group("eval_forward_8x3x64x64");
    group.sample_size(10);
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            exec::set_parallel(par);
            bench.iter(|| black_box(model.predict_mask(&x).unwrap()));
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn bench_scene_generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("scene_batch_16x64px");
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            exec::set_parallel(par);
            bench.iter(|| {
                let scenes = exec::map_indexed(16, |i| {
                    let (img, mask) = generate_scene(i as u64, 64).unwrap();
                    let framed = apply_modality(&img, Modality::SourceLike).unwrap();
                    (framed, mask)
                });
                black_box(scenes.len())
            });
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn bench_split_prediction(c: &mut Criterion) {
    let cfg = NetworkConfig {
        stage_channels: [16, 24, 32, 48],
        ..NetworkConfig::default()
    };
    let model = build_model::<f32>(&cfg, 4).unwrap();
    let samples: Vec<SamplePair> = (0..16)
        .map(|i| {
            let (img, mask) = generate_scene(100 + i as u64, 64).unwrap();
            let framed = apply_modality(&img, Split::Val.modality()).unwrap();
            SamplePair {
                id: format!("bench_{i:02}"),
                image: framed,
                image_aug: None,
                mask,
                modality: Split::Val.modality(),
            }
        })
        .collect();

    let mut group = c.benchmark_group("predict_split_16x64px");
    group.sample_size(10);
    for (label, par) in modes() {
        group.bench_function(label, |bench| {
            exec::set_parallel(par);
            bench.iter(|| black_box(predict_all(&model, &samples, 8).unwrap().len()));
        });
    }
    exec::set_parallel(true);
    group.finish();
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_model_forward,
    bench_scene_generation,
    bench_split_prediction
);
criterion_main!(benches);
