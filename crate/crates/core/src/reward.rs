//! Per-component trajectory scoring over a forecast: volumetric collision,
//! off-road ground contact, overhead clearance, surface stability, route
//! progress, and speed tracking, combined into a weighted total.
//!
//! Components are returned as non-negative severities; the config's signed
//! weights are applied exactly once, in [`total_reward`]. Safety weights are
//! negative, so a larger severity always lowers the total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2D, Trajectory};
use crate::grid::{voxelset, SemanticGrid, SemanticLabel, OFFROAD_GROUND_BITS};
use crate::oracle::ForecastResult;

const BUILDING_BIT: u16 = 1 << SemanticLabel::Building as u16;
const DRIVABLE_BIT: u16 = 1 << SemanticLabel::Drivable as u16;

/// Weights and geometry constants for the reward terms.
///
/// All fields have working defaults except `route`, which stays empty until
/// the caller supplies the reference polyline; scoring without one is an
/// error rather than silently zero progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub w_coll: f64,
    pub w_off: f64,
    pub w_clr: f64,
    pub w_stab: f64,
    pub w_prog: f64,
    pub w_vel: f64,
    /// Flat penalty per colliding agent-frame.
    pub c_base: f64,
    /// Scale on the overlap ratio on top of the flat penalty.
    pub c_iou: f64,
    /// Vertical extent of the clearance volume above the ego roof, meters.
    pub bubble_height: f64,
    /// Desired cruise speed, m/s.
    pub v_target: f64,
    /// Reference route polyline in world coordinates.
    pub route: Vec<[f64; 2]>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_coll: -20.0,
            w_off: -10.0,
            w_clr: -15.0,
            w_stab: -2.0,
            w_prog: 1.0,
            w_vel: 0.5,
            c_base: 1.0,
            c_iou: 1.0,
            bubble_height: 1.0,
            v_target: 8.0,
            route: Vec::new(),
        }
    }
}

impl RewardConfig {
    /// Penalty weights must be negative and task weights positive, otherwise
    /// the dominance properties of the severities silently invert.
    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, w) in [
            ("w_coll", self.w_coll),
            ("w_off", self.w_off),
            ("w_clr", self.w_clr),
            ("w_stab", self.w_stab),
        ] {
            if !(w < 0.0) {
                return Err(RewardError::InvalidConfig(format!("{name} must be negative")));
            }
        }
        for (name, w) in [("w_prog", self.w_prog), ("w_vel", self.w_vel)] {
            if !(w > 0.0) {
                return Err(RewardError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("c_base", self.c_base),
            ("c_iou", self.c_iou),
            ("bubble_height", self.bubble_height),
            ("v_target", self.v_target),
        ] {
            if !(v >= 0.0) {
                return Err(RewardError::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("route polyline is empty")]
    EmptyRoute,
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

/// Component values plus their weighted sum.
///
/// `total` is always reproducible from the other fields and the config that
/// produced it via [`RewardBreakdown::recompute_total`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub coll: f64,
    pub offroad: f64,
    pub clearance: f64,
    pub stability: f64,
    pub progress: f64,
    pub velocity: f64,
    /// Some frame had no drivable surface under the footprint at all.
    pub surface_missing: bool,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn recompute_total(&self, cfg: &RewardConfig) -> f64 {
        cfg.w_coll * self.coll
            + cfg.w_off * self.offroad
            + cfg.w_clr * self.clearance
            + cfg.w_stab * self.stability
            + cfg.w_prog * self.progress
            + cfg.w_vel * self.velocity
    }
}

/// Volumetric collision IoU of two voxel index sets; 0 when both are empty.
pub fn vc_iou(ego_mask: &[u32], agent_mask: &[u32]) -> f64 {
    voxelset::iou(ego_mask, agent_mask)
}

/// Sum over frames and agents of `c_base·1(IoU>0) + c_iou·IoU`.
pub fn collision_severity(result: &ForecastResult, cfg: &RewardConfig) -> f64 {
    let mut total = 0.0;
    for (ego, agents) in result.ego_masks.iter().zip(&result.agent_masks) {
        for mask in agents.values() {
            let iou = vc_iou(ego, mask);
            if iou > 0.0 {
                total += cfg.c_base + cfg.c_iou * iou;
            }
        }
    }
    total
}

/// Count of sidewalk/vegetation ground voxels in the ego's footprint
/// columns, strictly below the lowest ego voxel, summed over frames.
pub fn offroad_severity(result: &ForecastResult, _cfg: &RewardConfig) -> f64 {
    let mut count = 0usize;
    for (frame, ego) in result.frames.iter().zip(&result.ego_masks) {
        if ego.is_empty() {
            continue;
        }
        let bottom = ego.iter().map(|&i| frame.coords(i)[2]).min().unwrap();
        for [ix, iy] in mask_columns(frame, ego) {
            for iz in 0..bottom {
                if frame.get(ix, iy, iz).intersects(OFFROAD_GROUND_BITS) {
                    count += 1;
                }
            }
        }
    }
    count as f64
}

/// Count of building voxels inside the clearance volume: the footprint
/// columns, from the level just above the ego roof up through
/// `bubble_height` meters, summed over frames.
pub fn clearance_severity(result: &ForecastResult, cfg: &RewardConfig) -> f64 {
    let mut count = 0usize;
    for (frame, ego) in result.frames.iter().zip(&result.ego_masks) {
        if ego.is_empty() {
            continue;
        }
        let top = ego.iter().map(|&i| frame.coords(i)[2]).max().unwrap();
        let nz = frame.dims()[2];
        let vs = frame.voxel_size() as f64;
        // level top+j has its center (j-0.5)·vs above the roof face
        let mut levels = Vec::new();
        let mut j = 1usize;
        while (j as f64 - 0.5) * vs < cfg.bubble_height {
            if top + j < nz {
                levels.push(top + j);
            }
            j += 1;
        }
        for [ix, iy] in mask_columns(frame, ego) {
            for &iz in &levels {
                if frame.get(ix, iy, iz).intersects(BUILDING_BIT) {
                    count += 1;
                }
            }
        }
    }
    count as f64
}

/// Per frame, the population variance of the highest drivable voxel center
/// z across footprint columns, summed over frames. Frames with fewer than
/// two drivable columns contribute 0; a frame with none also raises the
/// returned surface-missing flag.
pub fn stability_severity(result: &ForecastResult, _cfg: &RewardConfig) -> (f64, bool) {
    let mut total = 0.0;
    let mut missing = false;
    for (frame, ego) in result.frames.iter().zip(&result.ego_masks) {
        if ego.is_empty() {
            missing = true;
            continue;
        }
        let nz = frame.dims()[2];
        let mut tops = Vec::new();
        for [ix, iy] in mask_columns(frame, ego) {
            for iz in (0..nz).rev() {
                if frame.get(ix, iy, iz).intersects(DRIVABLE_BIT) {
                    tops.push(frame.voxel_center(ix, iy, iz)[2]);
                    break;
                }
            }
        }
        if tops.is_empty() {
            missing = true;
            continue;
        }
        if tops.len() < 2 {
            continue;
        }
        let n = tops.len() as f64;
        let mean = tops.iter().sum::<f64>() / n;
        total += tops.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
    }
    (total, missing)
}

/// Advance of the closest-point arc-length projection onto the route
/// polyline, from the trajectory's anchor to its last pose. Negative when
/// the trajectory regresses along the route.
pub fn progress_reward(traj: &Trajectory, cfg: &RewardConfig) -> Result<f64, RewardError> {
    if cfg.route.is_empty() {
        return Err(RewardError::EmptyRoute);
    }
    let s0 = route_param(&cfg.route, traj.pose(0));
    let s1 = route_param(&cfg.route, traj.pose(traj.horizon()));
    Ok(s1 - s0)
}

/// Arc-length parameter of the closest point on the polyline.
fn route_param(route: &[[f64; 2]], p: &Pose2D) -> f64 {
    if route.len() < 2 {
        return 0.0;
    }
    let mut best_d2 = f64::INFINITY;
    let mut best_s = 0.0;
    let mut cum = 0.0;
    for w in route.windows(2) {
        let [ax, ay] = w[0];
        let [bx, by] = w[1];
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p.x - ax) * dx + (p.y - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        let d2 = (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy);
        let len = len2.sqrt();
        if d2 < best_d2 {
            best_d2 = d2;
            best_s = cum + t * len;
        }
        cum += len;
    }
    best_s
}

/// Negated mean absolute deviation of per-step speed from `v_target`;
/// zero iff every step moves at exactly the target speed.
pub fn velocity_reward(traj: &Trajectory, cfg: &RewardConfig) -> f64 {
    let k_max = traj.horizon();
    if k_max == 0 {
        return 0.0;
    }
    let dt = traj.dt();
    let mut dev = 0.0;
    for k in 1..=k_max {
        let a = traj.pose(k - 1);
        let b = traj.pose(k);
        let v = ((b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y)).sqrt() / dt;
        dev += (v - cfg.v_target).abs();
    }
    -dev / k_max as f64
}

/// All components plus the weighted total for one forecast/trajectory pair.
pub fn total_reward(
    result: &ForecastResult,
    traj: &Trajectory,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let coll = collision_severity(result, cfg);
    let offroad = offroad_severity(result, cfg);
    let clearance = clearance_severity(result, cfg);
    let (stability, surface_missing) = stability_severity(result, cfg);
    let progress = progress_reward(traj, cfg)?;
    let velocity = velocity_reward(traj, cfg);
    let mut b = RewardBreakdown {
        coll,
        offroad,
        clearance,
        stability,
        progress,
        velocity,
        surface_missing,
        total: 0.0,
    };
    b.total = b.recompute_total(cfg);
    Ok(b)
}

/// Distinct (ix, iy) columns touched by a voxel index set.
fn mask_columns(frame: &SemanticGrid, mask: &[u32]) -> Vec<[usize; 2]> {
    let mut cols: Vec<[usize; 2]> = mask
        .iter()
        .map(|&i| {
            let [ix, iy, _] = frame.coords(i);
            [ix, iy]
        })
        .collect();
    cols.sort_unstable();
    cols.dedup();
    cols
}
