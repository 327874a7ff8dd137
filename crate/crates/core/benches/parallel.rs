//! Sequential against data-parallel execution of the crate's hot loops.
//!
//! Build with `--no-default-features` to check the sequential-only fallback;
//! both modes then run on one thread.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mipose::bop::GtImage;
use mipose::eval::evaluate;
use mipose::geometry::Point3;
use mipose::harness::{
    default_camera, default_models, estimates_to_results, generate_scene, mock_predict,
    scene_gt_image, top_n_experiment, ExperimentConfig, NoiseSpec, SceneConfig,
};
use mipose::mesh::diameter_brute_force;
use mipose::metrics::{EvalModel, MetricConfig};
use mipose::postprocess::{postprocess_image, PostprocessConfig};
use mipose::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn diameter(c: &mut Criterion) {
    let mut group = c.benchmark_group("diameter_brute_force");
    for n in [2_000usize, 8_000] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let pts: Vec<Point3> = (0..n)
            .map(|_| Point3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        for (name, exec) in MODES {
            group.bench_with_input(BenchmarkId::new(name, n), &pts, |b, pts| {
                b.iter(|| diameter_brute_force(black_box(pts), exec))
            });
        }
    }
    group.finish();
}

fn evaluate_dataset(c: &mut Criterion) {
    let models = default_models();
    let cam = default_camera();
    let scene_cfg = SceneConfig {
        count_range: [10, 30],
        ..SceneConfig::default()
    };
    let noise = NoiseSpec {
        corner_sigma_px: 1.0,
        rotation_sigma_rad: 0.03,
        translation_sigma_m: 0.003,
        background_score_max: None,
        ..NoiseSpec::default()
    };
    let mut gt: Vec<GtImage> = Vec::new();
    let mut results = Vec::new();
    for im in 0..16u32 {
        let scene = generate_scene(&models, &cam, &scene_cfg, im as u64).unwrap();
        let out = mock_predict(
            &scene,
            &models,
            &scene_cfg.pyramid,
            &NoiseSpec {
                rng_seed: im as u64,
                ..noise.clone()
            },
        )
        .unwrap();
        let est = postprocess_image(&out.hypotheses, &PostprocessConfig::default());
        results.extend(estimates_to_results(&est, &models, 1, im, -1.0));
        gt.push(scene_gt_image(&scene, &models, 1, im));
    }
    let metric = MetricConfig::default();
    let eval_models: Vec<EvalModel> = models
        .iter()
        .map(|m| EvalModel::new(m.clone(), &metric))
        .collect();

    let mut group = c.benchmark_group("evaluate_16_images");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| evaluate(black_box(&gt), &results, &eval_models, &metric, exec).unwrap())
        });
    }
    group.finish();
}

fn top_n(c: &mut Criterion) {
    let models = default_models();
    let cam = default_camera();
    let cfg = ExperimentConfig {
        scenes: 16,
        ..ExperimentConfig::default()
    };
    let mut group = c.benchmark_group("top_n_experiment_16_scenes");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| top_n_experiment(&models, &cam, &cfg, &[1, 10], exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, diameter, evaluate_dataset, top_n);
criterion_main!(benches);
