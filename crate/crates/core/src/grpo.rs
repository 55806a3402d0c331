//! Group-relative policy refinement: a diagonal-Gaussian distribution over
//! waypoint offsets from a reference trajectory, scored by a world model
//! plus the reward engine, updated by the score-function gradient of the
//! group-standardized advantage objective with a behavior-cloning anchor.
//!
//! The losses are deterministic functions of (parameters, sampled group,
//! anchor samples); gradients are analytic and match central finite
//! differences on that surface.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2D, Trajectory};
use crate::oracle::WorldModel;
use crate::reward::{total_reward, RewardBreakdown, RewardConfig};
use crate::scene::Scenario;

/// Per-axis standard-deviation bounds, meters. Outside the exp range the
/// clamp is flat, so gradients through sigma gate to zero there.
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8; // ln √(2π)

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("policy parameters invalid: {0}")]
    InvalidParams(String),
    #[error("behavior-cloning term needs at least one reference sample")]
    NoReferenceSamples,
    #[error("every rollout in the group was excluded (non-finite reward)")]
    AllExcluded,
    #[error("rollout failed: {0}")]
    Rollout(String),
    #[error(
        "training diverged at iteration {iter}: mean reward {mean_reward} \
         stayed below {floor} for 20 consecutive iterations"
    )]
    Diverged { iter: usize, mean_reward: f64, floor: f64 },
    #[error("parameters became non-finite at iteration {iter}")]
    NonFiniteParams { iter: usize },
}

/// Gaussian waypoint-offset policy: per future step, a mean offset and a
/// log standard deviation for each planar axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub mu: Vec<[f64; 2]>,
    pub log_sigma: Vec<[f64; 2]>,
}

impl PolicyParams {
    /// Zero-mean policy with uniform spread over `horizon` future steps.
    pub fn new(horizon: usize, sigma_init: f64) -> Self {
        let ls = sigma_init.ln();
        PolicyParams { mu: vec![[0.0; 2]; horizon], log_sigma: vec![[ls; 2]; horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.mu.len()
    }

    /// Clamped standard deviation for step `k` (0-based future step), axis `a`.
    pub fn sigma(&self, k: usize, a: usize) -> f64 {
        self.log_sigma[k][a].exp().clamp(SIGMA_MIN, SIGMA_MAX)
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.mu.len() != self.log_sigma.len() {
            return Err(GrpoError::InvalidParams(format!(
                "mu holds {} steps, log_sigma {}",
                self.mu.len(),
                self.log_sigma.len()
            )));
        }
        let finite = self
            .mu
            .iter()
            .chain(self.log_sigma.iter())
            .all(|v| v[0].is_finite() && v[1].is_finite());
        if !finite {
            return Err(GrpoError::InvalidParams("non-finite entry".into()));
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.mu
            .iter()
            .chain(self.log_sigma.iter())
            .all(|v| v[0].is_finite() && v[1].is_finite())
    }
}

/// σ and the pass-through factor of the clamp (dσ/dlogσ divided by σ):
/// 1 inside the exp range, 0 where the clamp is flat.
fn sigma_gate(ls: f64) -> (f64, f64) {
    let s = ls.exp();
    if s < SIGMA_MIN {
        (SIGMA_MIN, 0.0)
    } else if s > SIGMA_MAX {
        (SIGMA_MAX, 0.0)
    } else {
        (s, 1.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Rollouts per gradient estimate.
    #[serde(rename = "G")]
    pub group_size: usize,
    /// Weight of the behavior-cloning anchor.
    pub lambda_bc: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Below this reward spread the advantages collapse to zero.
    pub eps_std: f64,
    /// Initial (and anchor) per-axis standard deviation, meters.
    pub sigma_init: f64,
    /// Samples drawn from the frozen anchor policy per BC estimate.
    pub bc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            group_size: 64,
            lambda_bc: 0.1,
            learning_rate: 0.05,
            iterations: 200,
            seed: 0,
            eps_std: 1e-8,
            sigma_init: 0.5,
            bc_samples: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::InvalidConfig(m));
        if self.group_size < 2 {
            return bad(format!("group size {} below 2", self.group_size));
        }
        if !(self.lambda_bc >= 0.0 && self.lambda_bc.is_finite()) {
            return bad(format!("lambda_bc {} must be finite and >= 0", self.lambda_bc));
        }
        if !self.learning_rate.is_finite() {
            return bad("learning rate must be finite".into());
        }
        if !(self.eps_std > 0.0) {
            return bad(format!("eps_std {} must be positive", self.eps_std));
        }
        if !(self.sigma_init > 0.0 && self.sigma_init <= SIGMA_MAX) {
            return bad(format!("sigma_init {} outside (0, {SIGMA_MAX}]", self.sigma_init));
        }
        if self.lambda_bc > 0.0 && self.bc_samples == 0 {
            return bad("bc_samples must be positive when lambda_bc > 0".into());
        }
        Ok(())
    }
}

/// One group of policy samples with everything the update needs.
/// `rewards` keeps non-finite entries as drawn; their advantages are zeroed
/// and `excluded` counts them.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRollout {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub excluded: usize,
}

/// Waypoints at `reference + mu + sigma·z` with per-axis standard normals,
/// anchor pose untouched, yaw facing each step's displacement. Returns the
/// trajectories with their exact log-densities under `params`. Draws run in
/// sample order, x before y, so a seeded RNG reproduces the group.
pub fn sample_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    reference: &Trajectory,
    g: usize,
    rng: &mut R,
) -> (Vec<Trajectory>, Vec<f64>) {
    let k_max = params.horizon().min(reference.horizon());
    let mut trajs = Vec::with_capacity(g);
    let mut lps = Vec::with_capacity(g);
    for _ in 0..g {
        let mut offsets = Vec::with_capacity(k_max);
        let mut lp = 0.0;
        for k in 0..k_max {
            let mut wp = [0.0; 2];
            for a in 0..2 {
                let s = params.sigma(k, a);
                let z: f64 = rng.sample(StandardNormal);
                wp[a] = params.mu[k][a] + s * z;
                lp += -s.ln() - LOG_SQRT_2PI - 0.5 * z * z;
            }
            offsets.push(wp);
        }
        trajs.push(offset_trajectory(reference, &offsets));
        lps.push(lp);
    }
    (trajs, lps)
}

/// Reference trajectory with per-step planar offsets applied to the future
/// waypoints; yaw re-derived to face each displacement.
fn offset_trajectory(reference: &Trajectory, offsets: &[[f64; 2]]) -> Trajectory {
    let mut poses = Vec::with_capacity(reference.poses().len());
    poses.push(*reference.pose(0));
    for (k, off) in offsets.iter().enumerate() {
        let r = reference.pose(k + 1);
        let x = r.x + off[0];
        let y = r.y + off[1];
        let prev = poses[k];
        let step = [x - prev.x, y - prev.y];
        let yaw = if step[0].hypot(step[1]) > 1e-12 { step[1].atan2(step[0]) } else { prev.yaw };
        poses.push(Pose2D::new(x, y, yaw));
    }
    Trajectory::unchecked(reference.t0(), reference.dt(), poses)
}

/// The policy mean as a trajectory: reference waypoints shifted by `mu`.
pub fn mean_trajectory(params: &PolicyParams, reference: &Trajectory) -> Trajectory {
    offset_trajectory(reference, &params.mu)
}

/// Exact diagonal-Gaussian log-density of a trajectory's future waypoints
/// under `params` around `reference`.
pub fn log_prob(params: &PolicyParams, reference: &Trajectory, traj: &Trajectory) -> f64 {
    let k_max = params.horizon().min(reference.horizon()).min(traj.horizon());
    let mut lp = 0.0;
    for k in 0..k_max {
        let r = reference.pose(k + 1);
        let p = traj.pose(k + 1);
        let d = [p.x - r.x, p.y - r.y];
        for a in 0..2 {
            let s = params.sigma(k, a);
            let z = (d[a] - params.mu[k][a]) / s;
            lp += -s.ln() - LOG_SQRT_2PI - 0.5 * z * z;
        }
    }
    lp
}

/// Accumulate `scale · ∂log π(traj)/∂θ` into the gradient buffers.
fn accumulate_log_prob_grad(
    params: &PolicyParams,
    reference: &Trajectory,
    traj: &Trajectory,
    scale: f64,
    g_mu: &mut [[f64; 2]],
    g_ls: &mut [[f64; 2]],
) {
    let k_max = params.horizon().min(reference.horizon()).min(traj.horizon());
    for k in 0..k_max {
        let r = reference.pose(k + 1);
        let p = traj.pose(k + 1);
        let d = [p.x - r.x, p.y - r.y];
        for a in 0..2 {
            let (s, gate) = sigma_gate(params.log_sigma[k][a]);
            let z = (d[a] - params.mu[k][a]) / s;
            g_mu[k][a] += scale * z / s;
            g_ls[k][a] += scale * gate * (z * z - 1.0);
        }
    }
}

/// Group-standardized advantages: `(r − mean)/max(std, eps)` with the
/// population standard deviation, all zeros when the spread is below `eps`.
/// Non-finite rewards are left out of the moments and get advantage 0.
pub fn standardize_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    let finite: Vec<f64> = rewards.iter().copied().filter(|r| r.is_finite()).collect();
    if finite.is_empty() {
        return vec![0.0; rewards.len()];
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < eps_std {
        return vec![0.0; rewards.len()];
    }
    rewards
        .iter()
        .map(|r| if r.is_finite() { (r - mean) / std } else { 0.0 })
        .collect()
}

/// `−(1/G)·Σ log π(T_i)·Â_i`; the advantages are constants here.
pub fn loss_rl(log_probs: &[f64], advantages: &[f64]) -> f64 {
    if log_probs.is_empty() {
        return 0.0;
    }
    let s: f64 = log_probs.iter().zip(advantages).map(|(lp, a)| lp * a).sum();
    -s / log_probs.len() as f64
}

/// Mean negative log-density of trajectories drawn from the frozen anchor.
pub fn loss_bc(
    params: &PolicyParams,
    reference: &Trajectory,
    anchor_samples: &[Trajectory],
) -> Result<f64, GrpoError> {
    if anchor_samples.is_empty() {
        return Err(GrpoError::NoReferenceSamples);
    }
    let s: f64 = anchor_samples.iter().map(|t| -log_prob(params, reference, t)).sum();
    Ok(s / anchor_samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub mu: Vec<[f64; 2]>,
    pub log_sigma: Vec<[f64; 2]>,
}

impl Gradient {
    fn zeros(horizon: usize) -> Self {
        Gradient { mu: vec![[0.0; 2]; horizon], log_sigma: vec![[0.0; 2]; horizon] }
    }
}

/// Losses and their exact gradient on the fixed-sample surface: the group's
/// trajectories and advantages and the anchor samples are data, so central
/// finite differences over `loss_rl + λ·loss_bc` reproduce this gradient.
/// With `lambda = 0` the anchor term is skipped entirely.
pub fn loss_and_grad(
    params: &PolicyParams,
    reference: &Trajectory,
    group: &GroupRollout,
    anchor_samples: &[Trajectory],
    lambda: f64,
) -> Result<(f64, f64, Gradient), GrpoError> {
    params.validate()?;
    let k = params.horizon();
    let mut grad = Gradient::zeros(k);
    let g = group.trajectories.len() as f64;
    let mut rl = 0.0;
    for (traj, &adv) in group.trajectories.iter().zip(&group.advantages) {
        if adv == 0.0 {
            continue;
        }
        rl += -log_prob(params, reference, traj) * adv / g;
        accumulate_log_prob_grad(params, reference, traj, -adv / g, &mut grad.mu, &mut grad.log_sigma);
    }
    let mut bc = 0.0;
    if lambda != 0.0 {
        bc = loss_bc(params, reference, anchor_samples)?;
        let m = anchor_samples.len() as f64;
        for traj in anchor_samples {
            accumulate_log_prob_grad(
                params,
                reference,
                traj,
                -lambda / m,
                &mut grad.mu,
                &mut grad.log_sigma,
            );
        }
    }
    Ok((rl, bc, grad))
}

/// One full gradient estimate with diagnostics.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub gradient: Gradient,
    pub loss_rl: f64,
    pub loss_bc: f64,
    pub group: GroupRollout,
}

/// Sample a group under `params`, score every trajectory through the world
/// model and reward engine, standardize, and return the analytic gradient.
/// Rollouts run in parallel but are reduced in index order, so the result
/// depends only on (params, scenario, config, rng state). Failed or
/// non-finite rollouts are excluded from the estimate and counted.
pub fn grad<M>(
    params: &PolicyParams,
    scenario: &Scenario,
    model: &M,
    reward_cfg: &RewardConfig,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<GradReport, GrpoError>
where
    M: WorldModel + Sync + ?Sized,
{
    cfg.validate()?;
    params.validate()?;
    let reference = &scenario.original_traj;
    let (trajectories, log_probs) = sample_group(params, reference, cfg.group_size, rng);
    let rewards: Vec<f64> = trajectories
        .par_iter()
        .map(|t| match model.forecast(scenario, t) {
            Ok(r) => match total_reward(&r, t, reward_cfg) {
                Ok(b) => b.total,
                Err(_) => f64::NAN,
            },
            Err(_) => f64::NAN,
        })
        .collect();
    let excluded = rewards.iter().filter(|r| !r.is_finite()).count();
    if excluded == rewards.len() {
        return Err(GrpoError::AllExcluded);
    }
    let advantages = standardize_advantages(&rewards, cfg.eps_std);
    let anchor = if cfg.lambda_bc != 0.0 {
        let anchor_params = PolicyParams::new(params.horizon(), cfg.sigma_init);
        sample_group(&anchor_params, reference, cfg.bc_samples, rng).0
    } else {
        Vec::new()
    };
    let group = GroupRollout { trajectories, rewards, advantages, log_probs, excluded };
    let (l_rl, l_bc, gradient) =
        loss_and_grad(params, reference, &group, &anchor, cfg.lambda_bc)?;
    Ok(GradReport { gradient, loss_rl: l_rl, loss_bc: l_bc, group })
}

/// One training iteration's record. `mean_reward` and the severity fields
/// score the deterministic mean trajectory of the pre-update parameters;
/// `group_mean_reward` is the average over the iteration's finite rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub mean_reward: f64,
    pub group_mean_reward: f64,
    pub loss_rl: f64,
    pub loss_bc: f64,
    pub coll: f64,
    pub offroad: f64,
    pub clearance: f64,
    pub stability: f64,
    pub progress: f64,
    pub velocity: f64,
    pub excluded: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub log: Vec<IterLog>,
}

/// Gradient-descent refinement loop. Deterministic given the config seed.
///
/// Divergence guard: the mean-trajectory reward must not stay more than ten
/// initial group spreads below its starting value for 20 consecutive
/// iterations. The scenario and model are only ever read.
pub fn train<M>(
    scenario: &Scenario,
    model: &M,
    reward_cfg: &RewardConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, GrpoError>
where
    M: WorldModel + Sync + ?Sized,
{
    cfg.validate()?;
    reward_cfg
        .validate()
        .map_err(|e| GrpoError::InvalidConfig(e.to_string()))?;
    if reward_cfg.route.is_empty() {
        return Err(GrpoError::InvalidConfig("reward config has an empty route".into()));
    }
    let reference = scenario.original_traj.clone();
    let mut params = PolicyParams::new(reference.horizon(), cfg.sigma_init);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut floor = f64::NEG_INFINITY;
    let mut streak = 0usize;

    for iter in 0..cfg.iterations {
        let report = grad(&params, scenario, model, reward_cfg, cfg, &mut rng)?;
        let mean_breakdown = score_mean(&params, scenario, model, reward_cfg)?;
        let finite: Vec<f64> =
            report.group.rewards.iter().copied().filter(|r| r.is_finite()).collect();
        let group_mean = finite.iter().sum::<f64>() / finite.len() as f64;
        if iter == 0 {
            let n = finite.len() as f64;
            let var =
                finite.iter().map(|r| (r - group_mean) * (r - group_mean)).sum::<f64>() / n;
            floor = mean_breakdown.total - 10.0 * var.sqrt().max(1e-6);
        }
        log.push(IterLog {
            iter,
            mean_reward: mean_breakdown.total,
            group_mean_reward: group_mean,
            loss_rl: report.loss_rl,
            loss_bc: report.loss_bc,
            coll: mean_breakdown.coll,
            offroad: mean_breakdown.offroad,
            clearance: mean_breakdown.clearance,
            stability: mean_breakdown.stability,
            progress: mean_breakdown.progress,
            velocity: mean_breakdown.velocity,
            excluded: report.group.excluded,
        });
        if mean_breakdown.total < floor {
            streak += 1;
            if streak >= 20 {
                return Err(GrpoError::Diverged {
                    iter,
                    mean_reward: mean_breakdown.total,
                    floor,
                });
            }
        } else {
            streak = 0;
        }
        for k in 0..params.horizon() {
            for a in 0..2 {
                params.mu[k][a] -= cfg.learning_rate * report.gradient.mu[k][a];
                params.log_sigma[k][a] -= cfg.learning_rate * report.gradient.log_sigma[k][a];
            }
        }
        if !params.is_finite() {
            return Err(GrpoError::NonFiniteParams { iter });
        }
    }
    Ok(TrainOutcome { params, log })
}

/// Score the deterministic mean trajectory of the current parameters.
pub fn score_mean<M>(
    params: &PolicyParams,
    scenario: &Scenario,
    model: &M,
    reward_cfg: &RewardConfig,
) -> Result<RewardBreakdown, GrpoError>
where
    M: WorldModel + Sync + ?Sized,
{
    let traj = mean_trajectory(params, &scenario.original_traj);
    let forecast = model
        .forecast(scenario, &traj)
        .map_err(|e| GrpoError::Rollout(e.to_string()))?;
    total_reward(&forecast, &traj, reward_cfg).map_err(|e| GrpoError::Rollout(e.to_string()))
}
