//! Bundled scene generators: seeded synthetic street scenes with the
//! structural guarantees the evaluation experiments lean on.
//!
//! Every random scene is a straight two-lane road in the ego frame with a
//! close, slow in-lane lead vehicle. Any full-speed counterfactual departs
//! along the inertial ray for its first steps and strikes that lead before
//! the blend bends away, so the optimistic forecaster always has something
//! to delete. Sidewalks flank the road for off-road departures, and the
//! only static-obstacle columns are taller than the ego box (hedge, wall,
//! building rows), so a penetration target always puts occupied voxels at
//! ego height.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geom::{Pose2D, Trajectory};
use crate::grid::{LabelMask, SemanticGrid, SemanticLabel};
use crate::reward::RewardConfig;
use crate::scene::{decompose, stamp_rollout, AgentBox, EgoState, Scenario};

/// One strip of buildings running along x behind a road-side band.
struct BuildingRow {
    y0: f64,
    y1: f64,
    /// (x0, x1, top voxel level) per block.
    blocks: Vec<(f64, f64, usize)>,
}

impl BuildingRow {
    fn top_at(&self, x: f64, y: f64) -> Option<usize> {
        if y < self.y0 || y > self.y1 {
            return None;
        }
        self.blocks
            .iter()
            .find(|(x0, x1, _)| x >= *x0 && x <= *x1)
            .map(|&(_, _, top)| top)
    }
}

/// Blocks along x, the row spanning `depth` outward from `inner` (sign of
/// `outward` picks the side of the road).
fn building_row<R: Rng + ?Sized>(rng: &mut R, inner: f64, outward: f64, x0: f64, x1: f64) -> BuildingRow {
    let depth = rng.random_range(2.4..5.2);
    let (y0, y1) = if outward < 0.0 { (inner - depth, inner) } else { (inner, inner + depth) };
    let mut blocks = Vec::new();
    let mut x = x0 + rng.random_range(0.0..4.0);
    while x < x1 {
        let len = rng.random_range(6.0..14.0);
        blocks.push((x, (x + len).min(x1), rng.random_range(7..=9)));
        x += len + rng.random_range(2.0..8.0);
    }
    BuildingRow { y0, y1, blocks }
}

/// A randomized straight-road scene, decomposed and ready for synthesis.
///
/// Layout, in the ego frame (ego at the origin, heading +x, right lane
/// centered on y = 0): drivable road two levels deep, sidewalk bands on both
/// sides (flat or curb-raised), a continuous hedge behind the right walk and
/// a continuous wall behind the left walk — both taller than the ego box —
/// and building strips behind those. Ground beyond the built bands stays
/// free. One slow lead vehicle sits 5.5–7 m ahead in the ego lane; half the
/// scenes add an oncoming vehicle head-on in the same lane.
pub fn random_scene(seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = SemanticGrid::new(100, 100, 10, 0.4, [-8.0, -20.0, -1.0]);

    let lane_half = rng.random_range(2.4..3.2);
    let oncoming_w = rng.random_range(3.2..4.0);
    let walk_r = rng.random_range(2.0..3.2);
    let walk_l = rng.random_range(2.0..3.2);
    let raised_r = rng.random::<bool>();
    let raised_l = rng.random::<bool>();
    let hedge_t = rng.random_range(0.8..1.6);
    let hedge_top = rng.random_range(5..=7usize);
    let wall_t = rng.random_range(0.4..0.9);
    let wall_top = rng.random_range(5..=7usize);

    // y intervals, right (negative) to left (positive)
    let road = (-lane_half, lane_half + oncoming_w);
    let walk_rb = (road.0 - walk_r, road.0);
    let walk_lb = (road.1, road.1 + walk_l);
    let hedge_b = (walk_rb.0 - hedge_t, walk_rb.0);
    let wall_b = (walk_lb.1, walk_lb.1 + wall_t);

    let x_span = (-8.0, 32.0);
    let setback_r = rng.random_range(0.4..1.6);
    let setback_l = rng.random_range(0.4..1.6);
    let row_r = building_row(&mut rng, hedge_b.0 - setback_r, -1.0, x_span.0, x_span.1);
    let row_l = building_row(&mut rng, wall_b.1 + setback_l, 1.0, x_span.0, x_span.1);

    let [nx, ny, _] = g.dims();
    for iy in 0..ny {
        for ix in 0..nx {
            let [x, y, _] = g.voxel_center(ix, iy, 0);
            let (label, top) = if y > road.0 && y < road.1 {
                (SemanticLabel::Drivable, 1)
            } else if y > walk_rb.0 && y <= walk_rb.1 {
                (SemanticLabel::Sidewalk, if raised_r { 2 } else { 1 })
            } else if y >= walk_lb.0 && y < walk_lb.1 {
                (SemanticLabel::Sidewalk, if raised_l { 2 } else { 1 })
            } else if y > hedge_b.0 && y <= hedge_b.1 {
                (SemanticLabel::Vegetation, hedge_top)
            } else if y >= wall_b.0 && y < wall_b.1 {
                (SemanticLabel::Barrier, wall_top)
            } else if let Some(t) = row_r.top_at(x, y).or_else(|| row_l.top_at(x, y)) {
                (SemanticLabel::Building, t)
            } else {
                continue;
            };
            for iz in 0..=top {
                g.set(ix, iy, iz, LabelMask::from_label(label));
            }
        }
    }

    let mut agents = vec![AgentBox {
        id: 1,
        class: SemanticLabel::Vehicle,
        center: [rng.random_range(5.5..7.0), rng.random_range(-0.3..0.3), 0.6],
        extent: [4.4, 1.9, 1.6],
        yaw: rng.random_range(-0.05..0.05),
        velocity: [rng.random_range(0.0..1.0), 0.0],
    }];
    if rng.random::<bool>() {
        agents.push(AgentBox {
            id: 2,
            class: SemanticLabel::Vehicle,
            center: [rng.random_range(14.0..20.0), rng.random_range(-0.4..0.4), 0.6],
            extent: [4.4, 1.9, 1.6],
            yaw: PI,
            velocity: [rng.random_range(-5.0..-3.0), 0.0],
        });
    }
    let ego = EgoState::new(Pose2D::origin(), [4.0, 2.0, 1.6], rng.random_range(7.0..9.0));
    decompose(&g, &agents, &ego).expect("generated scene always has a drivable surface")
}

/// The hazard-ahead training scene: a stopped vehicle nine meters out,
/// nosed halfway into the lane from the left, and a recorded trajectory
/// that plows straight into it at constant speed. Built directly rather
/// than through [`decompose`] so the recorded behavior stays unsafe —
/// refinement has to learn the dodge.
///
/// The grid is deliberately small and forward-shifted so a training rollout
/// costs little. The encroachment leaves a ~0.75 m rightward dodge
/// sufficient to clear, well inside the initial exploration spread, and the
/// road is wide enough that several meters of dodge stay on asphalt.
/// Returns the scenario and a reward config with the matching straight
/// route and cruise speed.
pub fn hazard_ahead(seed: u64) -> (Scenario, RewardConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = SemanticGrid::new(96, 32, 5, 0.4, [-4.8, -6.4, -0.6]);

    let road_half = 5.2;
    let [nx, ny, _] = g.dims();
    for iy in 0..ny {
        for ix in 0..nx {
            let y = g.voxel_center(ix, iy, 0)[1];
            let label = if y.abs() < road_half {
                SemanticLabel::Drivable
            } else {
                SemanticLabel::Sidewalk
            };
            g.set(ix, iy, 0, LabelMask::from_label(label));
        }
    }

    let agents = vec![AgentBox {
        id: 1,
        class: SemanticLabel::Vehicle,
        center: [rng.random_range(8.5..9.5), rng.random_range(1.1..1.3), 0.6],
        extent: [4.4, 1.9, 1.6],
        yaw: 0.0,
        velocity: [0.0, 0.0],
    }];
    let speed = 7.0;
    let ego = EgoState::new(Pose2D::origin(), [4.0, 2.0, 1.6], speed);

    let dt = 0.5;
    let poses = (0..=6).map(|k| Pose2D::new(speed * dt * k as f64, 0.0, 0.0)).collect();
    let original_traj = Trajectory::new(0.0, dt, poses).expect("constant-speed line is valid");
    let original_futures = stamp_rollout(&g, &agents, &[], &ego, &original_traj).frames;

    let scenario = Scenario { static_grid: g, agents, ego, original_traj, original_futures };
    let reward_cfg = RewardConfig {
        route: vec![[-10.0, 0.0], [60.0, 0.0]],
        v_target: speed,
        ..RewardConfig::default()
    };
    (scenario, reward_cfg)
}
