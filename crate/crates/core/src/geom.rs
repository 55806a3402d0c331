//! Planar poses, SE(2) transforms, and timestamped trajectories.
//!
//! The world is treated as planar for motion: z is carried by grids but never
//! changed by a transform. Yaw is normalized to (-pi, pi].

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Plausibility ceiling on per-step speed, m/s.
pub const MAX_SPEED: f64 = 30.0;

/// Default step between trajectory poses, seconds.
pub const DEFAULT_DT: f64 = 0.5;

/// Default number of future steps in a trajectory horizon.
pub const DEFAULT_HORIZON: usize = 6;

pub fn normalize_yaw(yaw: f64) -> f64 {
    let y = yaw.sin().atan2(yaw.cos());
    if y <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        y
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: normalize_yaw(yaw) }
    }

    pub fn origin() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn heading(&self) -> [f64; 2] {
        [self.yaw.cos(), self.yaw.sin()]
    }
}

/// Planar rigid transform: rotation by `yaw` about +z, then translation.
/// z passes through unchanged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub yaw: f64,
    pub tx: f64,
    pub ty: f64,
    cos: f64,
    sin: f64,
}

impl RigidTransform {
    pub fn new(yaw: f64, tx: f64, ty: f64) -> Self {
        let yaw = normalize_yaw(yaw);
        Self { yaw, tx, ty, cos: yaw.cos(), sin: yaw.sin() }
    }

    pub fn identity() -> Self {
        Self { yaw: 0.0, tx: 0.0, ty: 0.0, cos: 1.0, sin: 0.0 }
    }

    /// Maps coordinates in `pose`'s local frame to the frame `pose` lives in.
    pub fn from_pose(pose: &Pose2D) -> Self {
        Self::new(pose.yaw, pose.x, pose.y)
    }

    /// Maps coordinates in `b`'s frame to coordinates in `a`'s frame
    /// (a^-1 ∘ b), both poses expressed in a common parent frame.
    pub fn relative(a: &Pose2D, b: &Pose2D) -> Self {
        let dx = b.x - a.x;
        let dy = b.y - a.y;
        let (s, c) = a.yaw.sin_cos();
        Self::new(b.yaw - a.yaw, c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn inverse(&self) -> Self {
        Self::new(
            -self.yaw,
            -(self.cos * self.tx + self.sin * self.ty),
            self.sin * self.tx - self.cos * self.ty,
        )
    }

    /// self ∘ other: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let t = self.apply2([other.tx, other.ty]);
        Self::new(self.yaw + other.yaw, t[0], t[1])
    }

    pub fn rotate2(&self, v: [f64; 2]) -> [f64; 2] {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    pub fn apply2(&self, p: [f64; 2]) -> [f64; 2] {
        let r = self.rotate2(p);
        [r[0] + self.tx, r[1] + self.ty]
    }

    pub fn apply3(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.apply2([p[0], p[1]]);
        [r[0], r[1], p[2]]
    }

    pub fn is_identity(&self) -> bool {
        self.yaw == 0.0 && self.tx == 0.0 && self.ty == 0.0
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("trajectory needs at least one pose")]
    Empty,
    #[error("dt must be positive and finite, got {0}")]
    BadDt(f64),
    #[error("non-finite pose at step {0}")]
    NonFinite(usize),
    #[error("step {step} moves {dist:.2} m, above the {limit:.2} m plausibility bound")]
    Implausible { step: usize, dist: f64, limit: f64 },
}

/// Uniformly sampled pose sequence. The first pose is the anchor (the pose
/// the trajectory starts from, at `t0`); `horizon()` counts the future steps
/// after it. Consecutive poses may be at most `MAX_SPEED * dt` apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    t0: f64,
    dt: f64,
    poses: Vec<Pose2D>,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, poses: Vec<Pose2D>) -> Result<Self, TrajectoryError> {
        if poses.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(TrajectoryError::BadDt(dt));
        }
        for (i, p) in poses.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.yaw.is_finite()) {
                return Err(TrajectoryError::NonFinite(i));
            }
        }
        let limit = MAX_SPEED * dt;
        for i in 1..poses.len() {
            let dist = ((poses[i].x - poses[i - 1].x).powi(2)
                + (poses[i].y - poses[i - 1].y).powi(2))
            .sqrt();
            if dist > limit {
                return Err(TrajectoryError::Implausible { step: i, dist, limit });
            }
        }
        Ok(Self { t0, dt, poses })
    }

    /// Construction without the plausibility check, for internally generated
    /// rollouts (policy samples can step outside the bound and must still be
    /// scorable). Timestamp and finiteness rules still hold.
    pub(crate) fn unchecked(t0: f64, dt: f64, poses: Vec<Pose2D>) -> Self {
        debug_assert!(!poses.is_empty() && dt > 0.0);
        Self { t0, dt, poses }
    }

    /// Stationary trajectory: anchor repeated for `horizon` future steps.
    pub fn stationary(pose: Pose2D, horizon: usize, dt: f64) -> Self {
        Self { t0: 0.0, dt, poses: vec![pose; horizon + 1] }
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of future steps (poses after the anchor).
    pub fn horizon(&self) -> usize {
        self.poses.len() - 1
    }

    /// Pose at step k; k = 0 is the anchor.
    pub fn pose(&self, k: usize) -> &Pose2D {
        &self.poses[k]
    }

    pub fn poses(&self) -> &[Pose2D] {
        &self.poses
    }

    pub fn timestamp(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    /// Per-step speeds |p_k - p_{k-1}| / dt for k = 1..=horizon.
    pub fn speeds(&self) -> Vec<f64> {
        self.poses
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt() / self.dt)
            .collect()
    }

    /// Total polyline length, meters.
    pub fn arc_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt())
            .sum()
    }
}
