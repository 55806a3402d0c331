//! Kernel and pipeline-stage benchmarks. The acceptance suite pins the
//! corresponding wall-clock budgets; these exist to localize regressions.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use occsynth_bench::relabel;
use occsynth_core::oracle::{VeridicalOracle, WorldModel};
use occsynth_core::rfb::g_iou;
use occsynth_core::scene::{
    decompose, select_target, synthesize_future_grids, synthesize_trajectory, FailureMode,
    SynthParams,
};
use occsynth_core::{samples, Pose2D, RigidTransform, SemanticGrid, SemanticLabel};

fn resample_bench(c: &mut Criterion) {
    let mut grid = SemanticGrid::new(200, 200, 16, 0.4, [-40.0, -40.0, -1.0]);
    for i in (0..grid.len() as u32).step_by(3) {
        let [ix, iy, iz] = grid.coords(i);
        grid.set(ix, iy, iz, grid.get(ix, iy, iz).stamp(SemanticLabel::Building));
    }
    let t = RigidTransform::from_pose(&Pose2D::new(1.3, -0.7, 0.1));
    c.bench_function("resample_200x200x16", |b| {
        b.iter(|| black_box(&grid).resample(black_box(&t)))
    });
}

fn footprint_bench(c: &mut Criterion) {
    let grid = SemanticGrid::new(100, 100, 10, 0.4, [-8.0, -20.0, -1.0]);
    let pose = Pose2D::new(6.3, 1.7, 0.4);
    c.bench_function("rasterize_footprint", |b| {
        b.iter(|| black_box(&grid).rasterize_footprint(black_box(&pose), [4.4, 1.9, 1.6], -0.2))
    });
}

fn forecast_bench(c: &mut Criterion) {
    let scenario = samples::random_scene(3);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let target =
        select_target(&scenario, FailureMode::DynamicCollision, &mut rng).unwrap();
    let params = SynthParams { seed: 11, ..SynthParams::default() };
    let traj = synthesize_trajectory(&scenario.ego, target, &params).unwrap();
    c.bench_function("forecast_veridical", |b| {
        b.iter(|| VeridicalOracle.forecast(black_box(&scenario), black_box(&traj)).unwrap())
    });
}

fn counterfactual_bench(c: &mut Criterion) {
    let source = samples::random_scene(5);
    let labeled = relabel(&source);
    let boxes = source.agents.clone();
    let ego = source.ego.clone();
    c.bench_function("full_counterfactual", |b| {
        b.iter(|| {
            let scenario = decompose(black_box(&labeled), &boxes, &ego).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(17);
            let target =
                select_target(&scenario, FailureMode::DynamicCollision, &mut rng).unwrap();
            let params = SynthParams { seed: 17, ..SynthParams::default() };
            let traj = synthesize_trajectory(&scenario.ego, target, &params).unwrap();
            synthesize_future_grids(&scenario, &traj).unwrap()
        })
    });
}

fn g_iou_bench(c: &mut Criterion) {
    let scenario = samples::random_scene(9);
    let pred = scenario.original_futures.clone();
    let gt: Vec<SemanticGrid> = scenario
        .original_futures
        .iter()
        .map(|g| g.resample(&RigidTransform::from_pose(&Pose2D::new(0.4, 0.0, 0.0))))
        .collect();
    c.bench_function("g_iou_6_frames", |b| {
        b.iter(|| g_iou(black_box(&pred), black_box(&gt)).unwrap())
    });
}

criterion_group!(
    benches,
    resample_bench,
    footprint_bench,
    forecast_bench,
    counterfactual_bench,
    g_iou_bench
);
criterion_main!(benches);
