use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use quadshade::proposals::{infer_image, NoiseModel, SolverSettings};
use quadshade::reconstruct::{update_labels, PatchSets};
use quadshade::synth::{random_surface, render_scene, RenderSpec, SurfaceSpec};
use quadshade::{Exec, Grid2};

fn executors() -> Vec<(&'static str, Exec)> {
    vec![("sequential", Exec::sequential()), ("parallel", Exec::with_workers(0))]
}

fn scene(n: usize) -> (Grid2<f64>, Grid2<bool>, RenderSpec) {
    let z = random_surface(&SurfaceSpec::new(7, n, n)).unwrap();
    let rs = RenderSpec::default();
    let s = render_scene(&z, &rs, 7).unwrap();
    (s.image, s.mask, rs)
}

fn bench_infer(c: &mut Criterion) {
    let (img, mask, rs) = scene(24);
    let mut g = c.benchmark_group("infer_image");
    g.sample_size(10);
    for (name, exec) in executors() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| {
                infer_image(
                    black_box(&img),
                    &mask,
                    &rs.light,
                    &[5],
                    &NoiseModel::default(),
                    9,
                    &SolverSettings::default(),
                    exec,
                )
                .unwrap()
            })
        });
    }
    g.finish();
}

fn bench_labels(c: &mut Criterion) {
    let (img, mask, rs) = scene(48);
    let dist = infer_image(
        &img,
        &mask,
        &rs.light,
        &[5, 9],
        &NoiseModel::default(),
        21,
        &SolverSettings::default(),
        &Exec::default(),
    )
    .unwrap();
    let sets = PatchSets::all(&dist);
    let z = random_surface(&SurfaceSpec::new(8, 48, 48)).unwrap();
    let mut g = c.benchmark_group("update_labels");
    for (name, exec) in executors() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, exec| {
            b.iter(|| update_labels(black_box(&z), &sets, 0.5, false, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_infer, bench_labels);
criterion_main!(benches);
