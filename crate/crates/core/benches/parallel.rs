//! Sequential against data-parallel execution for the hot loops: the EM
//! E-step over a batch and one render iteration over image tiles.

use std::path::Path;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sdmm::em::{e_step, WeightedSample};
use sdmm::gaussian::{Layout, Point, TangentGaussian};
use sdmm::geometry::UnitVec3;
use sdmm::integrator::{GuidingMode, RenderConfig, Renderer};
use sdmm::linalg::MatD;
use sdmm::mixture::Sdmm;
use sdmm::par::Execution;
use sdmm::scene::Scene;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn random_dir(rng: &mut impl Rng) -> UnitVec3 {
    let z: f64 = rng.random_range(-1.0..1.0);
    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    UnitVec3::from_xyz(r * phi.cos(), r * phi.sin(), z).unwrap()
}

fn leaf_mixture(rng: &mut impl Rng) -> Sdmm {
    let mut cov = MatD::identity() * 1e-2;
    cov[(0, 0)] = 0.1;
    cov[(1, 1)] = 0.1;
    let comps = (0..16)
        .map(|_| {
            let p: Vec<f64> = (0..3).map(|_| rng.random()).collect();
            TangentGaussian::new(Layout::RADIANCE, &[random_dir(rng)], &p, &cov).unwrap()
        })
        .collect();
    Sdmm::normalized(comps, vec![1.0; 16]).unwrap()
}

fn bench_e_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = leaf_mixture(&mut rng);
    let batch: Vec<WeightedSample> = (0..8192)
        .map(|_| WeightedSample {
            point: Point::radiance(random_dir(&mut rng), [rng.random(), rng.random(), rng.random()]),
            weight: rng.random(),
        })
        .collect();
    let mut group = c.benchmark_group("e_step_8192x16");
    for (name, exec) in MODES {
        group
            .bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| b.iter(|| e_step(&m, &batch, exec)));
    }
    group.finish();
}

fn bench_render(c: &mut Criterion) {
    let mut scene = Scene::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes/cornell.toml")).unwrap();
    scene.camera.width = 32;
    scene.camera.height = 32;
    let mut group = c.benchmark_group("render_iteration_32x32");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let mut cfg = RenderConfig::new(4, GuidingMode::Off, 3);
                cfg.exec = exec;
                Renderer::new(&scene, cfg).render().unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_e_step, bench_render);
criterion_main!(benches);
