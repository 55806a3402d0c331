//! Deterministic world models.
//!
//! `VeridicalOracle` forecasts exactly what the scene dynamics imply:
//! collisions and off-road excursions stay visible. `OptimisticOracle`
//! reproduces a wishful bias for benchmarking — agents on a collision course
//! vanish, and the ground under the ego is repaved as drivable. Both expose
//! the same `WorldModel` interface, plus `ego_fidelity` for measuring how
//! faithfully a forecast keeps the ego on its commanded path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::geom::{Pose2D, Trajectory};
use crate::grid::{voxelset, LabelMask, SemanticGrid, SemanticLabel, AGENT_BITS};
use crate::scene::{stamp_rollout, EgoState, Scenario};

const DRIVABLE_BIT: u16 = 1 << SemanticLabel::Drivable as u16;

/// Forecast over a scenario horizon. `frames[i]` is step `i + 1` in that
/// step's commanded ego frame (the ego sits at the frame origin).
/// `ego_masks[i]` lists exactly the Ego-bit voxels of `frames[i]`;
/// `agent_masks[i]` maps agent id to its owned voxels, pairwise disjoint
/// within a frame.
#[derive(Debug, Clone)]
pub struct ForecastResult {
    pub frames: Vec<SemanticGrid>,
    pub ego_masks: Vec<Vec<u32>>,
    pub agent_masks: Vec<BTreeMap<u32, Vec<u32>>>,
}

impl ForecastResult {
    pub fn horizon(&self) -> usize {
        self.frames.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("trajectory horizon {got} does not match the scenario horizon {want}")]
    HorizonMismatch { want: usize, got: usize },
    #[error("no ego voxels in frame {frame}: the forecast lost the ego")]
    EgoVanished { frame: usize },
    #[error("{got} fidelity weights for a horizon of {want}")]
    WeightCount { want: usize, got: usize },
}

/// A forecaster: scenario + commanded trajectory in, future frames out.
pub trait WorldModel: Sync {
    fn tag(&self) -> &'static str;
    fn forecast(
        &self,
        scenario: &Scenario,
        traj: &Trajectory,
    ) -> Result<ForecastResult, OracleError>;
}

fn check_horizon(scenario: &Scenario, traj: &Trajectory) -> Result<(), OracleError> {
    if traj.horizon() != scenario.horizon() {
        return Err(OracleError::HorizonMismatch {
            want: scenario.horizon(),
            got: traj.horizon(),
        });
    }
    Ok(())
}

/// Faithful dynamics: constant-velocity agents, ego where commanded,
/// overlaps stamped as multi-label voxels.
#[derive(Debug, Clone, Copy, Default)]
pub struct VeridicalOracle;

impl WorldModel for VeridicalOracle {
    fn tag(&self) -> &'static str {
        "veridical"
    }

    fn forecast(
        &self,
        scenario: &Scenario,
        traj: &Trajectory,
    ) -> Result<ForecastResult, OracleError> {
        check_horizon(scenario, traj)?;
        let r = stamp_rollout(
            &scenario.static_grid,
            &scenario.agents,
            &[],
            &scenario.ego,
            traj,
        );
        Ok(ForecastResult { frames: r.frames, ego_masks: r.ego_masks, agent_masks: r.agent_masks })
    }
}

/// The diagnosed failure mode being benchmarked: any agent the commanded
/// path would touch is deleted from every frame, and occupied ground under
/// the ego footprint is repaved — voxels at or below the drivable surface
/// top become drivable, anything occupied above it (hedges, walls, raised
/// curbs) is cleared outright.
#[derive(Debug, Clone, Copy, Default)]
pub struct OptimisticOracle;

impl OptimisticOracle {
    /// Agents whose constant-velocity rollout shares at least one voxel with
    /// the commanded ego box at some step.
    pub fn doomed_agents(scenario: &Scenario, traj: &Trajectory) -> Vec<u32> {
        let r = stamp_rollout(
            &scenario.static_grid,
            &scenario.agents,
            &[],
            &scenario.ego,
            traj,
        );
        let mut out = Vec::new();
        for (ego_mask, masks) in r.ego_masks.iter().zip(r.agent_masks.iter()) {
            for (id, mask) in masks {
                if !out.contains(id) && !voxelset::are_disjoint(ego_mask, mask) {
                    out.push(*id);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

impl WorldModel for OptimisticOracle {
    fn tag(&self) -> &'static str {
        "optimistic"
    }

    fn forecast(
        &self,
        scenario: &Scenario,
        traj: &Trajectory,
    ) -> Result<ForecastResult, OracleError> {
        check_horizon(scenario, traj)?;
        let doomed = Self::doomed_agents(scenario, traj);
        let mut r = stamp_rollout(
            &scenario.static_grid,
            &scenario.agents,
            &doomed,
            &scenario.ego,
            traj,
        );
        for frame in &mut r.frames {
            repave_under_ego(frame, &scenario.ego);
        }
        Ok(ForecastResult { frames: r.frames, ego_masks: r.ego_masks, agent_masks: r.agent_masks })
    }
}

/// Rewrite the static world under the ego footprint columns, up to the top
/// of the ego box: occupied voxels at or below the drivable surface top turn
/// into plain drivable ground, occupied voxels above it are freed. The Ego
/// bit rides through untouched; voxels carrying other agents are left alone.
fn repave_under_ego(frame: &mut SemanticGrid, ego: &EgoState) {
    let fp = frame.rasterize_footprint(&Pose2D::origin(), ego.extent, ego.z_base);
    if fp.is_empty() {
        return;
    }
    let road_top = match (0..frame.len() as u32)
        .filter(|&i| frame.get_linear(i).intersects(DRIVABLE_BIT))
        .map(|i| frame.coords(i)[2])
        .max()
    {
        Some(z) => z,
        None => return,
    };
    let ego_top = fp.iter().map(|&i| frame.coords(i)[2]).max().unwrap();
    let mut cols: Vec<[usize; 2]> = fp
        .iter()
        .map(|&i| {
            let [ix, iy, _] = frame.coords(i);
            [ix, iy]
        })
        .collect();
    cols.sort_unstable();
    cols.dedup();
    const EGO_BIT: u16 = 1 << SemanticLabel::Ego as u16;
    for [ix, iy] in cols {
        for iz in 0..=ego_top {
            let m = frame.get(ix, iy, iz);
            if !m.is_occupied() || m.intersects(AGENT_BITS) {
                continue;
            }
            let target = if iz <= road_top { DRIVABLE_BIT } else { 0 };
            if m.0 & !EGO_BIT == target {
                continue;
            }
            frame.set(ix, iy, iz, LabelMask(target | (m.0 & EGO_BIT)));
        }
    }
}

/// Weighted squared distance between each frame's ego-voxel centroid and the
/// commanded position — the frame origin, since frames are expressed in the
/// commanded ego frame. Weights default to 1.
pub fn ego_fidelity(
    result: &ForecastResult,
    commanded: &Trajectory,
    weights: Option<&[f64]>,
) -> Result<f64, OracleError> {
    let k_max = result.horizon();
    if commanded.horizon() != k_max {
        return Err(OracleError::HorizonMismatch { want: k_max, got: commanded.horizon() });
    }
    if let Some(w) = weights {
        if w.len() != k_max {
            return Err(OracleError::WeightCount { want: k_max, got: w.len() });
        }
    }
    let mut total = 0.0;
    for k in 1..=k_max {
        let mask = &result.ego_masks[k - 1];
        if mask.is_empty() {
            return Err(OracleError::EgoVanished { frame: k });
        }
        let frame = &result.frames[k - 1];
        let (mut cx, mut cy) = (0.0, 0.0);
        for &i in mask {
            let [ix, iy, iz] = frame.coords(i);
            let c = frame.voxel_center(ix, iy, iz);
            cx += c[0];
            cy += c[1];
        }
        let n = mask.len() as f64;
        cx /= n;
        cy /= n;
        let w = weights.map_or(1.0, |w| w[k - 1]);
        total += w * (cx * cx + cy * cy);
    }
    Ok(total)
}

/// Run-length form of a forecast's masks, for the JSON sidecar next to the
/// frame blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub ego: Vec<Vec<(u32, u32)>>,
    pub agents: Vec<BTreeMap<u32, Vec<(u32, u32)>>>,
}

impl MaskSidecar {
    pub fn from_masks(
        ego_masks: &[Vec<u32>],
        agent_masks: &[BTreeMap<u32, Vec<u32>>],
    ) -> Self {
        MaskSidecar {
            ego: ego_masks.iter().map(|m| voxelset::encode_rle(m)).collect(),
            agents: agent_masks
                .iter()
                .map(|f| {
                    f.iter().map(|(id, m)| (*id, voxelset::encode_rle(m))).collect()
                })
                .collect(),
        }
    }

    pub fn ego_masks(&self) -> Vec<Vec<u32>> {
        self.ego.iter().map(|r| voxelset::decode_rle(r)).collect()
    }

    pub fn agent_masks(&self) -> Vec<BTreeMap<u32, Vec<u32>>> {
        self.agents
            .iter()
            .map(|f| f.iter().map(|(id, r)| (*id, voxelset::decode_rle(r))).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AGENT_BITS;
    use crate::scene::{decompose, AgentBox};

    fn road_grid() -> SemanticGrid {
        let mut g = SemanticGrid::new(60, 60, 8, 0.4, [-12.0, -12.0, -1.0]);
        for iy in 0..60 {
            for ix in 0..60 {
                let y = g.voxel_center(ix, iy, 0)[1];
                let label = if y.abs() < 6.0 {
                    SemanticLabel::Drivable
                } else {
                    SemanticLabel::Sidewalk
                };
                for iz in 0..2 {
                    g.set(ix, iy, iz, LabelMask::from_label(label));
                }
            }
        }
        g
    }

    fn ego() -> EgoState {
        EgoState::new(Pose2D::origin(), [4.0, 2.0, 1.6], 8.0)
    }

    fn straight_traj(speed: f64, horizon: usize) -> Trajectory {
        let poses = (0..=horizon)
            .map(|k| Pose2D::new(speed * 0.5 * k as f64, 0.0, 0.0))
            .collect();
        Trajectory::new(0.0, 0.5, poses).unwrap()
    }

    fn scenario_with(agents: &[AgentBox]) -> Scenario {
        let mut g = road_grid();
        for a in agents {
            let idxs = g.rasterize_footprint(&a.pose_at(0.0), a.extent, a.z_base());
            g.stamp_indices(&idxs, a.class);
        }
        decompose(&g, agents, &ego()).unwrap()
    }

    fn lead(velocity: [f64; 2]) -> AgentBox {
        AgentBox {
            id: 1,
            class: SemanticLabel::Vehicle,
            center: [8.0, 0.0, 0.6],
            extent: [4.4, 1.9, 1.6],
            yaw: 0.0,
            velocity,
        }
    }

    #[test]
    fn veridical_empty_scene_is_static_plus_ego() {
        let sc = scenario_with(&[]);
        let traj = straight_traj(8.0, 6);
        let r = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let allowed = DRIVABLE_BIT
            | 1 << SemanticLabel::Sidewalk as u16
            | 1 << SemanticLabel::Ego as u16;
        for frame in &r.frames {
            assert!(frame.data().iter().all(|m| m.0 & !allowed == 0));
            assert_eq!(frame.count_with(AGENT_BITS), 0);
        }
        // straight constant-speed path: the ego stamp never moves in its own frame
        for m in &r.ego_masks[1..] {
            assert_eq!(m, &r.ego_masks[0]);
        }
        assert!(!r.ego_masks[0].is_empty());
    }

    #[test]
    fn veridical_keeps_the_collision_visible() {
        // stopped lead dead ahead, commanded path drives through it
        let sc = scenario_with(&[lead([0.0, 0.0])]);
        let traj = straight_traj(8.0, 6);
        let r = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let mut overlap = 0;
        for (ego_mask, masks) in r.ego_masks.iter().zip(r.agent_masks.iter()) {
            if let Some(m) = masks.get(&1) {
                overlap += voxelset::intersection_count(ego_mask, m);
            }
        }
        assert!(overlap > 0, "collision never materialized");
    }

    #[test]
    fn overlap_count_matches_the_box_oracle() {
        // ego at 8 m/s reaches x=8 at step 2, fully inside the stopped lead
        let sc = scenario_with(&[lead([0.0, 0.0])]);
        let traj = straight_traj(8.0, 6);
        let r = VeridicalOracle.forecast(&sc, &traj).unwrap();

        let frame = &r.frames[1];
        let ego_pose = traj.pose(2);
        // lead center relative to the step-2 ego frame
        let rel = [8.0 - ego_pose.x, 0.0];
        let brute: Vec<u32> = {
            let a = frame.rasterize_footprint(&Pose2D::origin(), sc.ego.extent, sc.ego.z_base);
            let b = frame.rasterize_footprint(
                &Pose2D::new(rel[0], rel[1], 0.0),
                sc.agents[0].extent,
                sc.agents[0].z_base(),
            );
            a.into_iter().filter(|i| b.binary_search(i).is_ok()).collect()
        };
        let got = voxelset::intersection_count(&r.ego_masks[1], &r.agent_masks[1][&1]);
        assert_eq!(got, brute.len());
        assert!(got > 0);
    }

    #[test]
    fn optimistic_deletes_doomed_agents_and_only_those() {
        let doomed = lead([0.0, 0.0]);
        let bystander = AgentBox {
            id: 2,
            class: SemanticLabel::Vehicle,
            center: [0.0, 4.0, 0.6],
            extent: [4.4, 1.9, 1.6],
            yaw: 0.0,
            velocity: [6.0, 0.0],
        };
        let sc = scenario_with(&[doomed, bystander]);
        let traj = straight_traj(8.0, 6);

        assert_eq!(OptimisticOracle::doomed_agents(&sc, &traj), vec![1]);
        let r = OptimisticOracle.forecast(&sc, &traj).unwrap();
        for masks in &r.agent_masks {
            assert!(!masks.contains_key(&1), "deleted agent reappeared");
        }
        // the bystander in the next lane survives with its usual stamp
        let v = VeridicalOracle.forecast(&sc, &traj).unwrap();
        for (o, vm) in r.agent_masks.iter().zip(v.agent_masks.iter()) {
            assert_eq!(o.get(&2), vm.get(&2));
        }
    }

    #[test]
    fn optimistic_matches_veridical_when_nothing_triggers() {
        // bystander only, path stays on the road: no deletion, and the
        // ground under the ego is already drivable so repaving is a no-op
        let bystander = AgentBox {
            id: 2,
            class: SemanticLabel::Vehicle,
            center: [0.0, 4.0, 0.6],
            extent: [4.4, 1.9, 1.6],
            yaw: 0.0,
            velocity: [6.0, 0.0],
        };
        let sc = scenario_with(&[bystander]);
        let traj = straight_traj(8.0, 6);
        let v = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let o = OptimisticOracle.forecast(&sc, &traj).unwrap();
        for (a, b) in v.frames.iter().zip(o.frames.iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(v.ego_masks, o.ego_masks);
        assert_eq!(v.agent_masks, o.agent_masks);
    }

    #[test]
    fn optimistic_repaves_ground_under_an_offroad_path() {
        // drive diagonally onto the sidewalk strip
        let sc = scenario_with(&[]);
        let poses = (0..=6)
            .map(|k| Pose2D::new(2.0 * k as f64, 1.4 * k as f64, 0.0))
            .collect();
        let traj = Trajectory::new(0.0, 0.5, poses).unwrap();

        let v = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let o = OptimisticOracle.forecast(&sc, &traj).unwrap();
        let sidewalk = 1 << SemanticLabel::Sidewalk as u16;

        // late frames sit over the strip: veridical shows sidewalk under the
        // ego columns, optimistic has repaved them
        let last_v = v.frames.last().unwrap();
        let last_o = o.frames.last().unwrap();
        let fp = last_v.rasterize_footprint(&Pose2D::origin(), sc.ego.extent, sc.ego.z_base);
        let cols: Vec<u32> = fp.iter().map(|&i| last_v.column_of(i)).collect();
        let under = |g: &SemanticGrid, bits: u16| {
            g.data()
                .iter()
                .enumerate()
                .filter(|(i, m)| cols.contains(&g.column_of(*i as u32)) && m.intersects(bits))
                .count()
        };
        assert!(under(last_v, sidewalk) > 0, "path never left the road");
        assert_eq!(under(last_o, sidewalk), 0);
        // repaving preserves ground occupancy: sidewalk became drivable
        assert!(under(last_o, DRIVABLE_BIT) >= under(last_v, sidewalk));
    }

    #[test]
    fn optimistic_frees_tall_structure_inside_the_ego_box() {
        let mut g = road_grid();
        // hedge block straddling the lane ahead, up to z = 2.2 m
        for iy in 27..33 {
            for ix in 50..54 {
                for iz in 0..8 {
                    g.set(ix, iy, iz, LabelMask::from_label(SemanticLabel::Vegetation));
                }
            }
        }
        let sc = decompose(&g, &[], &ego()).unwrap();
        let traj = straight_traj(8.0, 6);
        let v = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let o = OptimisticOracle.forecast(&sc, &traj).unwrap();
        // ego reaches x=8 by step 2 and drives through the hedge
        let veg = 1 << SemanticLabel::Vegetation as u16;
        let v_cnt: usize = v.frames.iter().map(|f| f.count_with(veg)).sum();
        let o_cnt: usize = o.frames.iter().map(|f| f.count_with(veg)).sum();
        assert!(v_cnt > o_cnt, "no vegetation was cleared ({v_cnt} vs {o_cnt})");

        // in the colliding frame the box interior holds nothing but the ego
        // stamp, while hedge above the box roof and outside the footprint
        // survives untouched
        let f = &o.frames[1];
        let ego_bit = 1 << SemanticLabel::Ego as u16;
        let fp = f.rasterize_footprint(&Pose2D::origin(), sc.ego.extent, sc.ego.z_base);
        for &i in &fp {
            assert_eq!(f.get_linear(i).0 & !ego_bit, 0, "static bits survived under the ego");
        }
        // hedge column at frame x = 0.2: repaved to road below, freed inside
        // the box, intact above it
        assert_eq!(f.get(30, 28, 0).0, DRIVABLE_BIT);
        assert_eq!(f.get(30, 28, 1).0, DRIVABLE_BIT);
        assert!(f.get(30, 28, 6).intersects(veg));
        assert!(f.get(30, 28, 7).intersects(veg));
    }

    /// Ego box 2.4 m wide: an exact six-column span on the 0.4 m grid, so
    /// the stamped footprint is symmetric about the origin in both axes.
    /// (A 2.0 m box puts its edges on voxel centers and the half-open
    /// rasterization skews the centroid by half a voxel.)
    fn symmetric_ego_scenario() -> Scenario {
        let e = EgoState::new(Pose2D::origin(), [4.0, 2.4, 1.6], 8.0);
        decompose(&road_grid(), &[], &e).unwrap()
    }

    #[test]
    fn fidelity_is_zero_when_centered_and_quadratic_when_displaced() {
        let sc = symmetric_ego_scenario();
        let traj = straight_traj(8.0, 6);
        let mut r = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let fid = ego_fidelity(&r, &traj, None).unwrap();
        // symmetric stamp about the origin: centroid drift is quantization
        // residue only (the f32 voxel size is not exactly 0.4)
        assert!(fid < 1e-9, "{fid}");

        // displace one frame's ego by 2 m and expect a 4 m^2 contribution
        let frame = &mut r.frames[3];
        frame.clear_label_everywhere(SemanticLabel::Ego);
        let fp = frame.rasterize_footprint(&Pose2D::new(2.0, 0.0, 0.0), sc.ego.extent, sc.ego.z_base);
        frame.stamp_indices(&fp, SemanticLabel::Ego);
        r.ego_masks[3] = fp;
        let fid = ego_fidelity(&r, &traj, None).unwrap();
        assert!((fid - 4.0).abs() < 1e-5, "{fid}");

        // per-step weights scale the contribution
        let w = [0.0, 0.0, 0.0, 0.5, 0.0, 0.0];
        let fid = ego_fidelity(&r, &traj, Some(&w)).unwrap();
        assert!((fid - 2.0).abs() < 1e-5, "{fid}");
    }

    #[test]
    fn fidelity_flags_a_vanished_ego() {
        let sc = symmetric_ego_scenario();
        let traj = straight_traj(8.0, 6);
        let mut r = VeridicalOracle.forecast(&sc, &traj).unwrap();
        r.ego_masks[2].clear();
        assert!(matches!(
            ego_fidelity(&r, &traj, None),
            Err(OracleError::EgoVanished { frame: 3 })
        ));
    }

    #[test]
    fn optimistic_fidelity_equals_veridical() {
        let sc = scenario_with(&[lead([0.0, 0.0])]);
        let traj = straight_traj(8.0, 6);
        let v = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let o = OptimisticOracle.forecast(&sc, &traj).unwrap();
        let fv = ego_fidelity(&v, &traj, None).unwrap();
        let fo = ego_fidelity(&o, &traj, None).unwrap();
        assert_eq!(fv, fo);
    }

    #[test]
    fn agent_masks_stay_disjoint_under_overlap() {
        let a = lead([0.0, 0.0]);
        let mut b = lead([0.0, 0.0]);
        b.id = 2;
        b.center = [9.0, 0.5, 0.6]; // overlaps agent 1
        let sc = scenario_with(&[a, b]);
        let traj = straight_traj(2.0, 6);
        let r = VeridicalOracle.forecast(&sc, &traj).unwrap();
        for masks in &r.agent_masks {
            if let (Some(m1), Some(m2)) = (masks.get(&1), masks.get(&2)) {
                assert!(voxelset::are_disjoint(m1, m2));
                assert!(!m1.is_empty() && !m2.is_empty());
            }
        }
    }

    #[test]
    fn sidecar_roundtrips_masks() {
        let sc = scenario_with(&[lead([0.5, 0.0])]);
        let traj = straight_traj(8.0, 6);
        let r = VeridicalOracle.forecast(&sc, &traj).unwrap();
        let side = MaskSidecar::from_masks(&r.ego_masks, &r.agent_masks);
        let json = serde_json::to_string(&side).unwrap();
        let back: MaskSidecar = serde_json::from_str(&json).unwrap();
        assert_eq!(back.ego_masks(), r.ego_masks);
        assert_eq!(back.agent_masks(), r.agent_masks);
    }

    #[test]
    fn horizon_mismatch_is_an_error() {
        let sc = scenario_with(&[]);
        let short = straight_traj(8.0, 3);
        assert!(matches!(
            VeridicalOracle.forecast(&sc, &short),
            Err(OracleError::HorizonMismatch { want: 6, got: 3 })
        ));
    }
}
