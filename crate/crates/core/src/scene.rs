//! Scene decomposition and counterfactual failure synthesis.
//!
//! A labeled grid is split into a static environment plus dynamic agents
//! (`decompose`), a failure target is chosen per mode (`select_target`), an
//! unsafe trajectory is generated by blending an inertial rollout with a
//! linear intercept (`synthesize_trajectory`), and ground-truth future grids
//! for the new trajectory are re-synthesized from the recorded ones
//! (`synthesize_future_grids`).

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{
    normalize_yaw, Pose2D, RigidTransform, Trajectory, DEFAULT_DT, DEFAULT_HORIZON, MAX_SPEED,
};
use crate::grid::{SemanticGrid, SemanticLabel, AGENT_BITS, DYNAMIC_BITS, STATIC_OBSTACLE_BITS};

const DRIVABLE_BIT: u16 = 1 << SemanticLabel::Drivable as u16;
const EGO_BIT: u16 = 1 << SemanticLabel::Ego as u16;

/// How far beyond the drivable boundary an off-road target lands, meters.
const OFFROAD_PUSH: f64 = 1.0;
/// Candidate window for target selection: everything within this distance of
/// the nearest candidate is an equally valid pick, meters.
const TARGET_WINDOW: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    OffRoad,
    StaticPenetration,
    DynamicCollision,
}

impl FailureMode {
    pub const ALL: [FailureMode; 3] = [
        FailureMode::OffRoad,
        FailureMode::StaticPenetration,
        FailureMode::DynamicCollision,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FailureMode::OffRoad => "off_road",
            FailureMode::StaticPenetration => "static_penetration",
            FailureMode::DynamicCollision => "dynamic_collision",
        }
    }
}

impl fmt::Display for FailureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ego vehicle state at the anchor step, in the grid frame.
///
/// `z_base` is the bottom of the ego box. It defaults slightly below zero so
/// the box overlaps the top of the road slab it drives on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub pose: Pose2D,
    /// (length, width, height) meters; length runs along the heading.
    pub extent: [f64; 3],
    pub speed: f64,
    #[serde(default = "default_z_base")]
    pub z_base: f64,
}

fn default_z_base() -> f64 {
    -0.2
}

impl EgoState {
    pub fn new(pose: Pose2D, extent: [f64; 3], speed: f64) -> Self {
        EgoState { pose, extent, speed, z_base: default_z_base() }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let finite = self.extent.iter().all(|v| v.is_finite())
            && self.speed.is_finite()
            && self.z_base.is_finite();
        if !finite || self.extent.iter().any(|&v| v <= 0.0) {
            return Err(SynthError::InvalidEgo("extent must be positive and finite".into()));
        }
        if !(0.0..=MAX_SPEED).contains(&self.speed) {
            return Err(SynthError::InvalidEgo(format!(
                "speed {} outside [0, {MAX_SPEED}] m/s",
                self.speed
            )));
        }
        Ok(())
    }
}

/// Oriented box for one dynamic agent, moving at constant velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBox {
    pub id: u32,
    /// `Vehicle` or `Pedestrian`.
    pub class: SemanticLabel,
    pub center: [f64; 3],
    /// (length, width, height) meters; length runs along `yaw`.
    pub extent: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl AgentBox {
    pub fn speed(&self) -> f64 {
        self.velocity[0].hypot(self.velocity[1])
    }

    pub fn center_at(&self, t: f64) -> [f64; 3] {
        [
            self.center[0] + self.velocity[0] * t,
            self.center[1] + self.velocity[1] * t,
            self.center[2],
        ]
    }

    pub fn pose_at(&self, t: f64) -> Pose2D {
        let c = self.center_at(t);
        Pose2D::new(c[0], c[1], self.yaw)
    }

    /// Bottom of the agent box.
    pub fn z_base(&self) -> f64 {
        self.center[2] - self.extent[2] * 0.5
    }

    fn validate(&self) -> Result<(), SynthError> {
        let bad = |reason: &str| {
            Err(SynthError::InvalidAgent { id: self.id, reason: reason.into() })
        };
        if !matches!(self.class, SemanticLabel::Vehicle | SemanticLabel::Pedestrian) {
            return bad("class must be vehicle or pedestrian");
        }
        let finite = self.center.iter().chain(self.extent.iter()).all(|v| v.is_finite())
            && self.yaw.is_finite()
            && self.velocity.iter().all(|v| v.is_finite());
        if !finite || self.extent.iter().any(|&v| v <= 0.0) {
            return bad("extent must be positive and all fields finite");
        }
        if self.speed() > MAX_SPEED {
            return bad("speed exceeds the plausibility ceiling");
        }
        Ok(())
    }
}

/// A decomposed scene: static world, dynamic agents, ego, and the recorded
/// future.
///
/// `static_grid` is the anchor-frame grid with every dynamic bit removed.
/// `original_futures[i]` is the world at step `i + 1`, expressed in the ego
/// frame of `original_traj.pose(i + 1)` with agents advanced at constant
/// velocity and the ego box stamped at the frame origin.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub static_grid: SemanticGrid,
    pub agents: Vec<AgentBox>,
    pub ego: EgoState,
    pub original_traj: Trajectory,
    pub original_futures: Vec<SemanticGrid>,
}

impl Scenario {
    /// Number of future steps.
    pub fn horizon(&self) -> usize {
        self.original_traj.horizon()
    }

    pub fn dt(&self) -> f64 {
        self.original_traj.dt()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.ego.validate()?;
        let mut ids = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            a.validate()?;
            if ids.contains(&a.id) {
                return Err(SynthError::InvalidScenario(format!("duplicate agent id {}", a.id)));
            }
            ids.push(a.id);
        }
        if self.static_grid.count_with(DYNAMIC_BITS) != 0 {
            return Err(SynthError::InvalidScenario(
                "static grid still carries dynamic bits".into(),
            ));
        }
        if self.original_futures.len() != self.horizon() {
            return Err(SynthError::InvalidScenario(format!(
                "{} future grids for a horizon of {}",
                self.original_futures.len(),
                self.horizon()
            )));
        }
        for f in &self.original_futures {
            if f.dims() != self.static_grid.dims() {
                return Err(SynthError::InvalidScenario("future grid shape mismatch".into()));
            }
        }
        Ok(())
    }
}

/// Knobs for `synthesize_trajectory`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub horizon: usize,
    pub dt: f64,
    /// Std-dev of the per-axis waypoint jitter, meters.
    pub noise_sigma: f64,
    /// Per-step travel distances along the inertial heading; `None` means a
    /// constant `ego.speed * dt` per step.
    pub step_distances: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            horizon: DEFAULT_HORIZON,
            dt: DEFAULT_DT,
            noise_sigma: 0.05,
            step_distances: None,
            seed: 0,
        }
    }
}

impl SynthParams {
    fn validate(&self) -> Result<(), SynthError> {
        if self.horizon == 0 {
            return Err(SynthError::InvalidParams("horizon must be at least 1".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(SynthError::InvalidParams("dt must be positive".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(SynthError::InvalidParams("noise sigma must be non-negative".into()));
        }
        if let Some(d) = &self.step_distances {
            if d.len() != self.horizon {
                return Err(SynthError::InvalidParams(format!(
                    "{} step distances for a horizon of {}",
                    d.len(),
                    self.horizon
                )));
            }
            if d.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(SynthError::InvalidParams(
                    "step distances must be non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("scene has no drivable voxels")]
    NoDrivableSurface,
    #[error("no agents present; dynamic-collision target infeasible")]
    NoAgents,
    #[error("no static obstacle voxels; static-penetration target infeasible")]
    NoStaticObstacle,
    #[error("no non-drivable boundary columns; off-road target infeasible")]
    NoBoundary,
    #[error("trajectory horizon {got} does not match the scenario horizon {want}")]
    HorizonMismatch { want: usize, got: usize },
    #[error("invalid agent {id}: {reason}")]
    InvalidAgent { id: u32, reason: String },
    #[error("invalid ego state: {0}")]
    InvalidEgo(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid synthesis params: {0}")]
    InvalidParams(String),
}

/// Split a labeled grid into static environment + agents, and record what
/// the ego actually did: a lane-keeping rollout that yields to slower
/// traffic ahead, plus the future grids that rollout produces.
///
/// All dynamic bits are cleared from the static grid, not only those inside
/// the supplied boxes — boxes may understate the stamped voxels. With no
/// boxes given, agents are recovered by 26-connected flood fill over
/// vehicle/pedestrian voxels.
pub fn decompose(
    labeled: &SemanticGrid,
    boxes: &[AgentBox],
    ego: &EgoState,
) -> Result<Scenario, SynthError> {
    ego.validate()?;
    if labeled.count_with(DRIVABLE_BIT) == 0 {
        return Err(SynthError::NoDrivableSurface);
    }
    let agents = if boxes.is_empty() {
        flood_fill_agents(labeled)
    } else {
        let mut ids = Vec::with_capacity(boxes.len());
        for b in boxes {
            b.validate()?;
            if ids.contains(&b.id) {
                return Err(SynthError::InvalidScenario(format!("duplicate agent id {}", b.id)));
            }
            ids.push(b.id);
        }
        boxes.to_vec()
    };
    let mut static_grid = labeled.clone();
    static_grid.clear_bits_everywhere(DYNAMIC_BITS);

    let original_traj = follow_profile(ego, &agents, DEFAULT_HORIZON, DEFAULT_DT);
    let original_futures =
        stamp_rollout(&static_grid, &agents, &[], ego, &original_traj).frames;
    Ok(Scenario { static_grid, agents, ego: ego.clone(), original_traj, original_futures })
}

/// Pick the failure target point for a mode.
///
/// Off-road: the center of the nearest non-drivable column that borders the
/// drivable surface, pushed `OFFROAD_PUSH` meters further out. Static
/// penetration: the center of the nearest column holding building, barrier,
/// or vegetation voxels. Dynamic collision: the nearest agent's predicted
/// position at half the horizon. Nearest-candidate ties within
/// `TARGET_WINDOW` meters are broken by `rng` for curriculum variety.
pub fn select_target<R: Rng + ?Sized>(
    scenario: &Scenario,
    mode: FailureMode,
    rng: &mut R,
) -> Result<[f64; 2], SynthError> {
    let g = &scenario.static_grid;
    let e = scenario.ego.pose.position();
    match mode {
        FailureMode::OffRoad => {
            let drivable = column_flags(g, DRIVABLE_BIT);
            let [nx, ny, _] = g.dims();
            let mut cands = Vec::new();
            for iy in 0..ny {
                for ix in 0..nx {
                    if drivable[iy * nx + ix] {
                        continue;
                    }
                    let near_road = (ix > 0 && drivable[iy * nx + ix - 1])
                        || (ix + 1 < nx && drivable[iy * nx + ix + 1])
                        || (iy > 0 && drivable[(iy - 1) * nx + ix])
                        || (iy + 1 < ny && drivable[(iy + 1) * nx + ix]);
                    if near_road {
                        cands.push(column_center(g, ix, iy));
                    }
                }
            }
            let c = pick_near(rng, &cands, e).ok_or(SynthError::NoBoundary)?;
            let d = [c[0] - e[0], c[1] - e[1]];
            let n = d[0].hypot(d[1]);
            let u = if n > 1e-9 {
                [d[0] / n, d[1] / n]
            } else {
                scenario.ego.pose.heading()
            };
            Ok([c[0] + u[0] * OFFROAD_PUSH, c[1] + u[1] * OFFROAD_PUSH])
        }
        FailureMode::StaticPenetration => {
            let hit = column_flags(g, STATIC_OBSTACLE_BITS);
            let [nx, ny, _] = g.dims();
            let mut cands = Vec::new();
            for iy in 0..ny {
                for ix in 0..nx {
                    if hit[iy * nx + ix] {
                        cands.push(column_center(g, ix, iy));
                    }
                }
            }
            pick_near(rng, &cands, e).ok_or(SynthError::NoStaticObstacle)
        }
        FailureMode::DynamicCollision => {
            let a = scenario
                .agents
                .iter()
                .min_by(|a, b| {
                    let da = dist2(a.center, e);
                    let db = dist2(b.center, e);
                    da.partial_cmp(&db).unwrap().then(a.id.cmp(&b.id))
                })
                .ok_or(SynthError::NoAgents)?;
            let th = scenario.horizon() as f64 * scenario.dt() * 0.5;
            Ok([a.center[0] + a.velocity[0] * th, a.center[1] + a.velocity[1] * th])
        }
    }
}

fn dist2(c: [f64; 3], e: [f64; 2]) -> f64 {
    let dx = c[0] - e[0];
    let dy = c[1] - e[1];
    dx * dx + dy * dy
}

/// Column centers within `TARGET_WINDOW` of the closest one, random pick.
fn pick_near<R: Rng + ?Sized>(rng: &mut R, cands: &[[f64; 2]], e: [f64; 2]) -> Option<[f64; 2]> {
    let d = |c: &[f64; 2]| (c[0] - e[0]).hypot(c[1] - e[1]);
    let dmin = cands.iter().map(d).fold(f64::INFINITY, f64::min);
    if !dmin.is_finite() {
        return None;
    }
    let near: Vec<&[f64; 2]> = cands.iter().filter(|c| d(c) <= dmin + TARGET_WINDOW).collect();
    Some(*near[rng.random_range(0..near.len())])
}

fn column_center(g: &SemanticGrid, ix: usize, iy: usize) -> [f64; 2] {
    let c = g.voxel_center(ix, iy, 0);
    [c[0], c[1]]
}

/// Per-column flag: any voxel in the column carries one of `bits`.
/// Indexed `iy * nx + ix`, same as the grid's column ids.
fn column_flags(g: &SemanticGrid, bits: u16) -> Vec<bool> {
    let plane = g.plane();
    let mut flags = vec![false; plane];
    for (i, m) in g.data().iter().enumerate() {
        if m.intersects(bits) {
            flags[i % plane] = true;
        }
    }
    flags
}

/// Generate the unsafe trajectory: a quadratic blend from the inertial
/// rollout onto the straight intercept line, plus i.i.d. Gaussian jitter.
///
/// Step k sits at `(1 - g)·p_inertial + g·p_intercept + noise` with
/// `g = (k/K)^2`, so the path leaves the inertial ray smoothly and lands on
/// the target exactly at step K when `noise_sigma` is zero. The anchor pose
/// is the ego pose, untouched. Yaw faces each step's displacement. A
/// stationary ego has no meaningful heading, so its inertial ray points at
/// the target.
pub fn synthesize_trajectory(
    ego: &EgoState,
    target: [f64; 2],
    params: &SynthParams,
) -> Result<Trajectory, SynthError> {
    params.validate()?;
    ego.validate()?;
    let p0 = ego.pose.position();
    let to_target = [target[0] - p0[0], target[1] - p0[1]];
    let dist = to_target[0].hypot(to_target[1]);
    if !dist.is_finite() || dist < 1e-9 {
        return Err(SynthError::InvalidParams("target coincides with the ego position".into()));
    }
    let h = if ego.speed <= 1e-9 {
        [to_target[0] / dist, to_target[1] / dist]
    } else {
        ego.pose.heading()
    };

    let k_max = params.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = if params.noise_sigma > 0.0 {
        Some(Normal::new(0.0, params.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut poses = Vec::with_capacity(k_max + 1);
    poses.push(ego.pose);
    let mut cum = 0.0;
    for k in 1..=k_max {
        cum += match &params.step_distances {
            Some(d) => d[k - 1],
            None => ego.speed * params.dt,
        };
        let f = k as f64 / k_max as f64;
        let gamma = f * f;
        let inert = [p0[0] + h[0] * cum, p0[1] + h[1] * cum];
        let icept = [p0[0] + to_target[0] * f, p0[1] + to_target[1] * f];
        let mut p = [
            (1.0 - gamma) * inert[0] + gamma * icept[0],
            (1.0 - gamma) * inert[1] + gamma * icept[1],
        ];
        if let Some(n) = &noise {
            p[0] += n.sample(&mut rng);
            p[1] += n.sample(&mut rng);
        }
        let prev = poses[k - 1];
        let step = [p[0] - prev.x, p[1] - prev.y];
        let yaw = if step[0].hypot(step[1]) > 1e-12 {
            step[1].atan2(step[0])
        } else {
            prev.yaw
        };
        poses.push(Pose2D::new(p[0], p[1], yaw));
    }
    // Counterfactuals are deliberately unsafe and may exceed the plausible
    // per-step displacement, so skip the plausibility check.
    Ok(Trajectory::unchecked(0.0, params.dt, poses))
}

/// Re-synthesize the future grids for a counterfactual trajectory.
///
/// Per step k the recorded future is resampled by the relative pose between
/// the original and counterfactual steps (a frame change, no dynamics are
/// re-run), then the ego footprint is restamped at the frame origin where
/// the counterfactual ego sits. Feeding back `scenario.original_traj` is the
/// identity and reproduces the recorded futures bit-exactly.
pub fn synthesize_future_grids(
    scenario: &Scenario,
    cf_traj: &Trajectory,
) -> Result<Vec<SemanticGrid>, SynthError> {
    let k_max = scenario.horizon();
    if cf_traj.horizon() != k_max {
        return Err(SynthError::HorizonMismatch { want: k_max, got: cf_traj.horizon() });
    }
    if scenario.original_futures.len() != k_max {
        return Err(SynthError::InvalidScenario(format!(
            "{} future grids for a horizon of {}",
            scenario.original_futures.len(),
            k_max
        )));
    }
    let mut out = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        // Maps counterfactual-frame coordinates into the original frame.
        let t = RigidTransform::relative(scenario.original_traj.pose(k), cf_traj.pose(k));
        let mut frame = scenario.original_futures[k - 1].resample(&t);
        frame.clear_bits_everywhere(EGO_BIT);
        let fp = frame.rasterize_footprint(
            &Pose2D::origin(),
            scenario.ego.extent,
            scenario.ego.z_base,
        );
        frame.stamp_indices(&fp, SemanticLabel::Ego);
        out.push(frame);
    }
    Ok(out)
}

pub(crate) struct RolloutFrames {
    pub frames: Vec<SemanticGrid>,
    /// Sorted voxel indices of the ego box, per frame.
    pub ego_masks: Vec<Vec<u32>>,
    /// Per frame, agent id → sorted owned voxel indices.
    pub agent_masks: Vec<BTreeMap<u32, Vec<u32>>>,
}

/// Stamp the world forward along `traj`: per future step k the static grid
/// is resampled into the step-k ego frame, every agent not in `skip`
/// advances at constant velocity and stamps its class, and the ego box lands
/// at the frame origin.
///
/// An agent that stamps zero voxels has left the window and stays dropped
/// for the remaining frames. Overlapping boxes produce multi-label voxels;
/// mask ownership of a shared voxel goes to the lowest agent id, which keeps
/// agent masks pairwise disjoint.
pub(crate) fn stamp_rollout(
    static_grid: &SemanticGrid,
    agents: &[AgentBox],
    skip: &[u32],
    ego: &EgoState,
    traj: &Trajectory,
) -> RolloutFrames {
    let k_max = traj.horizon();
    let mut order: Vec<&AgentBox> = agents.iter().collect();
    order.sort_by_key(|a| a.id);

    let mut gone: Vec<u32> = skip.to_vec();
    let mut frames = Vec::with_capacity(k_max);
    let mut ego_masks = Vec::with_capacity(k_max);
    let mut agent_masks = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        let frame_pose = traj.pose(k);
        let anchor_from_frame = RigidTransform::from_pose(frame_pose);
        let frame_from_anchor = anchor_from_frame.inverse();
        let mut frame = static_grid.resample(&anchor_from_frame);

        let t = k as f64 * traj.dt();
        let mut claimed: Vec<u32> = Vec::new();
        let mut masks = BTreeMap::new();
        for a in &order {
            if gone.contains(&a.id) {
                continue;
            }
            let world = a.pose_at(t);
            let p = frame_from_anchor.apply2(world.position());
            let local = Pose2D::new(p[0], p[1], normalize_yaw(world.yaw - frame_pose.yaw));
            let idxs = frame.rasterize_footprint(&local, a.extent, a.z_base());
            if idxs.is_empty() {
                gone.push(a.id);
                continue;
            }
            frame.stamp_indices(&idxs, a.class);
            let owned: Vec<u32> = idxs
                .iter()
                .copied()
                .filter(|i| claimed.binary_search(i).is_err())
                .collect();
            claimed = merge_sorted(&claimed, &idxs);
            masks.insert(a.id, owned);
        }

        let fp = frame.rasterize_footprint(&Pose2D::origin(), ego.extent, ego.z_base);
        frame.stamp_indices(&fp, SemanticLabel::Ego);
        frames.push(frame);
        ego_masks.push(fp);
        agent_masks.push(masks);
    }
    RolloutFrames { frames, ego_masks, agent_masks }
}

fn merge_sorted(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            std::cmp::Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// What the ego actually did: hold lane and speed, but never advance more
/// than half the remaining slack to a standoff gap behind the nearest
/// in-corridor agent ahead. For any constant-velocity lead this keeps the
/// gap strictly above the standoff at every step.
fn follow_profile(ego: &EgoState, agents: &[AgentBox], horizon: usize, dt: f64) -> Trajectory {
    let h = ego.pose.heading();
    let e = ego.pose.position();
    let mut lead: Option<(f64, &AgentBox)> = None;
    for a in agents {
        let d = [a.center[0] - e[0], a.center[1] - e[1]];
        let s = d[0] * h[0] + d[1] * h[1];
        let lateral = (d[0] * h[1] - d[1] * h[0]).abs();
        if s > 0.0 && lateral <= (ego.extent[1] + a.extent[1]) * 0.5 + 0.5 {
            if lead.map_or(true, |(s0, _)| s < s0) {
                lead = Some((s, a));
            }
        }
    }

    let mut poses = Vec::with_capacity(horizon + 1);
    poses.push(ego.pose);
    match lead {
        None => {
            for k in 1..=horizon {
                let s = ego.speed * dt * k as f64;
                poses.push(Pose2D::new(e[0] + h[0] * s, e[1] + h[1] * s, ego.pose.yaw));
            }
        }
        Some((s0, a)) => {
            let standoff = (ego.extent[0] + a.extent[0]) * 0.5 + 0.5;
            let v_lead = a.velocity[0] * h[0] + a.velocity[1] * h[1];
            let mut s_ego = 0.0;
            for k in 1..=horizon {
                let slack = s0 + v_lead * (k as f64 * dt) - s_ego - standoff;
                s_ego += (ego.speed * dt).min((slack * 0.5).max(0.0));
                poses.push(Pose2D::new(e[0] + h[0] * s_ego, e[1] + h[1] * s_ego, ego.pose.yaw));
            }
        }
    }
    Trajectory::new(0.0, dt, poses).expect("follow profile stays within the speed bound")
}

/// Recover agents from dynamic-class voxels: 26-connected components over
/// vehicle/pedestrian bits, each fitted with an axis-aligned box. Majority
/// class wins (vehicle on ties); velocity is unknown and set to zero.
fn flood_fill_agents(grid: &SemanticGrid) -> Vec<AgentBox> {
    let data = grid.data();
    let [nx, ny, nz] = grid.dims();
    let vs = grid.voxel_size() as f64;
    let mut seen = vec![false; data.len()];
    let mut out: Vec<AgentBox> = Vec::new();
    for start in 0..data.len() {
        if seen[start] || !data[start].intersects(AGENT_BITS) {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let (mut veh, mut ped) = (0usize, 0usize);
        while let Some(i) = stack.pop() {
            let [ix, iy, iz] = grid.coords(i as u32);
            for (a, &v) in lo.iter_mut().zip([ix, iy, iz].iter()) {
                *a = (*a).min(v);
            }
            for (a, &v) in hi.iter_mut().zip([ix, iy, iz].iter()) {
                *a = (*a).max(v);
            }
            if data[i].contains(SemanticLabel::Vehicle) {
                veh += 1;
            }
            if data[i].contains(SemanticLabel::Pedestrian) {
                ped += 1;
            }
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let (jx, jy, jz) =
                            (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                        if jx < 0
                            || jy < 0
                            || jz < 0
                            || jx >= nx as i64
                            || jy >= ny as i64
                            || jz >= nz as i64
                        {
                            continue;
                        }
                        let j = jx as usize + nx * (jy as usize + ny * jz as usize);
                        if !seen[j] && data[j].intersects(AGENT_BITS) {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        let c_lo = grid.voxel_center(lo[0], lo[1], lo[2]);
        let c_hi = grid.voxel_center(hi[0], hi[1], hi[2]);
        out.push(AgentBox {
            id: out.len() as u32 + 1,
            class: if veh >= ped { SemanticLabel::Vehicle } else { SemanticLabel::Pedestrian },
            center: [
                (c_lo[0] + c_hi[0]) * 0.5,
                (c_lo[1] + c_hi[1]) * 0.5,
                (c_lo[2] + c_hi[2]) * 0.5,
            ],
            extent: [
                (hi[0] - lo[0] + 1) as f64 * vs,
                (hi[1] - lo[1] + 1) as f64 * vs,
                (hi[2] - lo[2] + 1) as f64 * vs,
            ],
            yaw: 0.0,
            velocity: [0.0, 0.0],
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LabelMask;

    fn road_grid() -> SemanticGrid {
        // 24 m x 24 m x 3.2 m window around the origin; road along x for
        // |y| < 6, two-voxel slab, sidewalk fill everywhere else.
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

    fn with_building(mut g: SemanticGrid) -> SemanticGrid {
        let b = g.rasterize_footprint(&Pose2D::new(9.0, 0.0, 0.0), [2.0, 4.0, 2.4], -1.0);
        g.stamp_indices(&b, SemanticLabel::Building);
        g
    }

    fn ego() -> EgoState {
        EgoState::new(Pose2D::origin(), [4.0, 2.0, 1.6], 8.0)
    }

    fn lead_vehicle() -> AgentBox {
        AgentBox {
            id: 1,
            class: SemanticLabel::Vehicle,
            center: [6.0, 0.0, 0.6],
            extent: [4.4, 1.9, 1.6],
            yaw: 0.0,
            velocity: [0.5, 0.0],
        }
    }

    fn stamp_agent(g: &mut SemanticGrid, a: &AgentBox) -> usize {
        let idxs = g.rasterize_footprint(&a.pose_at(0.0), a.extent, a.z_base());
        g.stamp_indices(&idxs, a.class);
        idxs.len()
    }

    #[test]
    fn decompose_removes_boxed_agent_bits() {
        let mut g = road_grid();
        let lead = lead_vehicle();
        let stamped = stamp_agent(&mut g, &lead);
        assert!(stamped > 0);
        let veh_bit = 1 << SemanticLabel::Vehicle as u16;
        assert_eq!(g.count_with(veh_bit), stamped);

        let sc = decompose(&g, std::slice::from_ref(&lead), &ego()).unwrap();
        assert_eq!(sc.static_grid.count_with(veh_bit), 0);
        assert_eq!(g.count_with(veh_bit) - sc.static_grid.count_with(veh_bit), stamped);
        assert_eq!(sc.agents.len(), 1);
        assert_eq!(sc.agents[0].id, lead.id);
        sc.validate().unwrap();
    }

    #[test]
    fn decompose_without_dynamics_is_passthrough() {
        let g = road_grid();
        let sc = decompose(&g, &[], &ego()).unwrap();
        assert!(sc.agents.is_empty());
        assert_eq!(sc.static_grid.data(), g.data());
    }

    #[test]
    fn decompose_flood_fill_recovers_two_blobs() {
        let mut g = road_grid();
        let veh = lead_vehicle();
        stamp_agent(&mut g, &veh);
        let ped = AgentBox {
            id: 9,
            class: SemanticLabel::Pedestrian,
            center: [-4.0, 4.0, 0.9],
            extent: [0.6, 0.6, 1.8],
            yaw: 0.0,
            velocity: [0.0, 0.0],
        };
        stamp_agent(&mut g, &ped);

        let sc = decompose(&g, &[], &ego()).unwrap();
        assert_eq!(sc.agents.len(), 2);
        let classes: Vec<_> = sc.agents.iter().map(|a| a.class).collect();
        assert!(classes.contains(&SemanticLabel::Vehicle));
        assert!(classes.contains(&SemanticLabel::Pedestrian));
        for a in &sc.agents {
            let want = if a.class == SemanticLabel::Vehicle { &veh } else { &ped };
            // center recovered to within a voxel
            assert!((a.center[0] - want.center[0]).abs() <= 0.4, "{:?}", a);
            assert!((a.center[1] - want.center[1]).abs() <= 0.4, "{:?}", a);
            assert_eq!(a.velocity, [0.0, 0.0]);
        }
        assert_eq!(sc.static_grid.count_with(AGENT_BITS), 0);
    }

    #[test]
    fn decompose_needs_a_drivable_surface() {
        let g = SemanticGrid::new(10, 10, 4, 0.4, [-2.0, -2.0, -1.0]);
        assert!(matches!(decompose(&g, &[], &ego()), Err(SynthError::NoDrivableSurface)));
    }

    #[test]
    fn follow_profile_keeps_the_standoff_gap() {
        let mut g = road_grid();
        let lead = lead_vehicle();
        stamp_agent(&mut g, &lead);
        let sc = decompose(&g, std::slice::from_ref(&lead), &ego()).unwrap();

        let standoff = (sc.ego.extent[0] + lead.extent[0]) * 0.5 + 0.5;
        for k in 0..=sc.horizon() {
            let t = k as f64 * sc.dt();
            let gap = (lead.center[0] + lead.velocity[0] * t) - sc.original_traj.pose(k).x;
            assert!(gap > standoff - 1e-9, "step {k}: gap {gap} below standoff {standoff}");
        }
        // it still makes progress
        assert!(sc.original_traj.arc_length() > 0.5);
    }

    #[test]
    fn follow_profile_without_traffic_is_constant_speed() {
        let sc = decompose(&road_grid(), &[], &ego()).unwrap();
        let arc = sc.original_traj.arc_length();
        assert!((arc - 8.0 * 0.5 * 6.0).abs() < 1e-9);
    }

    #[test]
    fn dynamic_target_is_the_midpoint_prediction() {
        let mut g = road_grid();
        let agent = AgentBox {
            id: 3,
            class: SemanticLabel::Vehicle,
            center: [10.0, 0.0, 0.6],
            extent: [4.4, 1.9, 1.6],
            yaw: 0.0,
            velocity: [-2.0, 0.0],
        };
        stamp_agent(&mut g, &agent);
        let sc = decompose(&g, std::slice::from_ref(&agent), &ego()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = select_target(&sc, FailureMode::DynamicCollision, &mut rng).unwrap();
        // p + v * (6 * 0.5 / 2) = (10,0) + (-2,0) * 1.5
        assert_eq!(t, [7.0, 0.0]);
    }

    #[test]
    fn offroad_target_lands_beyond_the_boundary() {
        let sc = decompose(&road_grid(), &[], &ego()).unwrap();
        for seed in 0..8 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = select_target(&sc, FailureMode::OffRoad, &mut rng).unwrap();
            // boundary columns start at |y| = 6; centers at 6.2, push adds 1.0
            assert!(t[1].abs() > 6.0, "target {t:?} not past the boundary");
            assert!(t[1].abs() <= 7.45, "target {t:?} too far out");
        }
    }

    #[test]
    fn static_target_hits_the_nearest_obstacle_column() {
        let sc = decompose(&with_building(road_grid()), &[], &ego()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = select_target(&sc, FailureMode::StaticPenetration, &mut rng).unwrap();
        assert!((8.0..=10.0).contains(&t[0]), "{t:?}");
        assert!(t[1].abs() <= 2.2, "{t:?}");
    }

    #[test]
    fn infeasible_modes_are_distinct_errors() {
        let sc = decompose(&road_grid(), &[], &ego()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            select_target(&sc, FailureMode::StaticPenetration, &mut rng),
            Err(SynthError::NoStaticObstacle)
        ));
        assert!(matches!(
            select_target(&sc, FailureMode::DynamicCollision, &mut rng),
            Err(SynthError::NoAgents)
        ));
    }

    #[test]
    fn blend_matches_the_hand_example() {
        // speed 2 at dt 0.5 gives 1 m inertial steps; intercept to (6,4)
        // passes (3,2) at k=3, where gamma = 0.25.
        let e = EgoState::new(Pose2D::origin(), [4.0, 2.0, 1.6], 2.0);
        let params = SynthParams { noise_sigma: 0.0, ..SynthParams::default() };
        let traj = synthesize_trajectory(&e, [6.0, 4.0], &params).unwrap();
        assert_eq!(traj.pose(0), &Pose2D::origin());
        assert!((traj.pose(3).x - 3.0).abs() < 1e-12);
        assert!((traj.pose(3).y - 0.5).abs() < 1e-12);
        assert!((traj.pose(6).x - 6.0).abs() < 1e-9);
        assert!((traj.pose(6).y - 4.0).abs() < 1e-9);
        // yaw faces the displacement
        let d = [traj.pose(1).x, traj.pose(1).y];
        assert!((traj.pose(1).yaw - d[1].atan2(d[0])).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_trajectories_are_reproducible_and_noisy_ones_seeded() {
        let e = ego();
        let noisy = SynthParams { seed: 42, ..SynthParams::default() };
        let a = synthesize_trajectory(&e, [10.0, 5.0], &noisy).unwrap();
        let b = synthesize_trajectory(&e, [10.0, 5.0], &noisy).unwrap();
        assert_eq!(a.poses(), b.poses());
        let c = synthesize_trajectory(
            &e,
            [10.0, 5.0],
            &SynthParams { seed: 43, ..SynthParams::default() },
        )
        .unwrap();
        assert_ne!(a.poses(), c.poses());
        // anchor never gets noise
        assert_eq!(a.pose(0), &e.pose);
    }

    #[test]
    fn stationary_ego_heads_straight_for_the_target() {
        let e = EgoState::new(Pose2D::origin(), [4.0, 2.0, 1.6], 0.0);
        let params = SynthParams { noise_sigma: 0.0, ..SynthParams::default() };
        let traj = synthesize_trajectory(&e, [5.0, 5.0], &params).unwrap();
        assert!((traj.pose(6).x - 5.0).abs() < 1e-9);
        assert!((traj.pose(6).y - 5.0).abs() < 1e-9);
        for k in 1..=6 {
            let p = traj.pose(k);
            // on the ray toward the target
            assert!((p.x - p.y).abs() < 1e-9, "step {k} off the ray: {p:?}");
        }
    }

    #[test]
    fn target_on_the_ego_is_rejected() {
        let params = SynthParams::default();
        assert!(matches!(
            synthesize_trajectory(&ego(), [0.0, 0.0], &params),
            Err(SynthError::InvalidParams(_))
        ));
    }

    #[test]
    fn identity_synthesis_is_bit_exact() {
        let mut g = with_building(road_grid());
        let lead = lead_vehicle();
        stamp_agent(&mut g, &lead);
        let sc = decompose(&g, std::slice::from_ref(&lead), &ego()).unwrap();

        let again = synthesize_future_grids(&sc, &sc.original_traj).unwrap();
        assert_eq!(again.len(), sc.original_futures.len());
        for (a, b) in again.iter().zip(sc.original_futures.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn lateral_offset_shifts_static_structure_by_whole_voxels() {
        let g = with_building(road_grid());
        // slow ego: the building stays inside the window for every frame
        let slow = EgoState::new(Pose2D::origin(), [4.0, 2.0, 1.6], 2.0);
        let sc = decompose(&g, &[], &slow).unwrap();

        let shifted: Vec<Pose2D> = sc
            .original_traj
            .poses()
            .iter()
            .map(|p| Pose2D::new(p.x, p.y + 2.0, p.yaw))
            .collect();
        let cf = Trajectory::new(0.0, sc.dt(), shifted).unwrap();
        let frames = synthesize_future_grids(&sc, &cf).unwrap();

        // +2 m ego offset moves the world -2 m in the ego frame: 5 voxels.
        let b = 1 << SemanticLabel::Building as u16;
        let [nx, ny, nz] = sc.static_grid.dims();
        for (frame, orig) in frames.iter().zip(sc.original_futures.iter()) {
            let mut checked = 0;
            for iz in 0..nz {
                for iy in 0..ny.saturating_sub(5) {
                    for ix in 0..nx {
                        let got = frame.get(ix, iy, iz).intersects(b);
                        let want = orig.get(ix, iy + 5, iz).intersects(b);
                        assert_eq!(got, want, "({ix},{iy},{iz})");
                        checked += usize::from(want);
                    }
                }
            }
            assert!(checked > 0, "building absent from the compared region");
        }
    }

    #[test]
    fn horizon_mismatch_is_rejected() {
        let sc = decompose(&road_grid(), &[], &ego()).unwrap();
        let short = Trajectory::stationary(Pose2D::origin(), 3, sc.dt());
        assert!(matches!(
            synthesize_future_grids(&sc, &short),
            Err(SynthError::HorizonMismatch { want: 6, got: 3 })
        ));
    }

    #[test]
    fn intercept_synthesis_shows_the_collision() {
        let mut g = road_grid();
        let lead = lead_vehicle();
        stamp_agent(&mut g, &lead);
        let sc = decompose(&g, std::slice::from_ref(&lead), &ego()).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let target = select_target(&sc, FailureMode::DynamicCollision, &mut rng).unwrap();
        let params = SynthParams { seed: 5, ..SynthParams::default() };
        let cf = synthesize_trajectory(&sc.ego, target, &params).unwrap();
        let frames = synthesize_future_grids(&sc, &cf).unwrap();

        let both = EGO_BIT | 1 << SemanticLabel::Vehicle as u16;
        let hit = frames.iter().any(|f| {
            f.data().iter().any(|m| m.0 & both == both)
        });
        assert!(hit, "no frame shows ego and vehicle sharing a voxel");
    }

    #[test]
    fn rollout_drops_agents_that_leave_the_window() {
        let g = road_grid();
        let runaway = AgentBox {
            id: 2,
            class: SemanticLabel::Vehicle,
            center: [10.0, 0.0, 0.6],
            extent: [4.4, 1.9, 1.6],
            yaw: 0.0,
            velocity: [4.0, 0.0],
        };
        let e = ego();
        let traj = Trajectory::stationary(e.pose, 6, 0.5);
        let rolled = stamp_rollout(&g, &[runaway], &[], &e, &traj);
        assert!(rolled.agent_masks[0].contains_key(&2));
        assert!(!rolled.agent_masks[5].contains_key(&2));
        // ego mask matches the stamped ego bits everywhere
        for (frame, mask) in rolled.frames.iter().zip(rolled.ego_masks.iter()) {
            let bits: Vec<u32> = (0..frame.len() as u32)
                .filter(|&i| frame.get_linear(i).contains(SemanticLabel::Ego))
                .collect();
            assert_eq!(&bits, mask);
        }
    }
}
