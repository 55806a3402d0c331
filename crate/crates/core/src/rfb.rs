//! Forecast-quality metrics and the benchmark runner: semantic grid IoU,
//! occupancy IoU restricted to the volume around the probe trajectory, and
//! per-instance agent fidelity, aggregated over a scenario suite.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{Pose2D, RigidTransform, Trajectory};
use crate::grid::{voxelset, SemanticGrid};
use crate::oracle::WorldModel;
use crate::scene::Scenario;

#[derive(Debug, Error)]
pub enum RfbError {
    #[error("grid shape mismatch: pred {pred:?} vs gt {gt:?}")]
    ShapeMismatch { pred: [usize; 4], gt: [usize; 4] },
    #[error("critical-volume metric undefined: {0}")]
    UndefinedCritical(&'static str),
    #[error("benchmark suite is empty")]
    EmptySuite,
}

/// Mean per-class voxel IoU between two grid sequences.
///
/// Inner average runs over frames where the class appears in either grid,
/// outer over classes that appear at all; a class (or frame, for that class)
/// absent from both sides carries no signal and is skipped rather than
/// scored 0/0. Two entirely free sequences agree perfectly: 1.0.
pub fn g_iou(pred: &[SemanticGrid], gt: &[SemanticGrid]) -> Result<f64, RfbError> {
    check_shapes(pred, gt)?;
    let mut score = [0.0f64; 10];
    let mut frames = [0usize; 10];
    for (p, g) in pred.iter().zip(gt) {
        let mut inter = [0usize; 10];
        let mut union = [0usize; 10];
        for (pm, gm) in p.data().iter().zip(g.data()) {
            let both = pm.0 & gm.0;
            let any = pm.0 | gm.0;
            if any == 0 {
                continue;
            }
            for c in 1..10 {
                let bit = 1u16 << c;
                inter[c] += usize::from(both & bit != 0);
                union[c] += usize::from(any & bit != 0);
            }
        }
        for c in 1..10 {
            if union[c] > 0 {
                score[c] += inter[c] as f64 / union[c] as f64;
                frames[c] += 1;
            }
        }
    }
    let (mut sum, mut n) = (0.0, 0);
    for c in 1..10 {
        if frames[c] > 0 {
            sum += score[c] / frames[c] as f64;
            n += 1;
        }
    }
    Ok(if n == 0 { 1.0 } else { sum / n as f64 })
}

/// Occupancy IoU restricted to the critical volume: all voxel columns within
/// `crit_radius` of the trajectory polyline, re-expressed in each frame's
/// coordinates, every z level included. Counts are pooled over frames into a
/// single ratio.
pub fn f_iou(
    pred: &[SemanticGrid],
    gt: &[SemanticGrid],
    future_traj: &Trajectory,
    crit_radius: f64,
) -> Result<f64, RfbError> {
    check_shapes(pred, gt)?;
    let r2 = crit_radius * crit_radius;
    let (mut inter, mut union, mut volume) = (0usize, 0usize, 0usize);
    for (k, (p, g)) in pred.iter().zip(gt).enumerate().map(|(i, pg)| (i + 1, pg)) {
        let k = k.min(future_traj.horizon());
        let to_frame = RigidTransform::relative(future_traj.pose(k), &Pose2D::origin());
        let pts: Vec<[f64; 2]> = future_traj
            .poses()
            .iter()
            .map(|q| to_frame.apply2([q.x, q.y]))
            .collect();
        let [nx, ny, _] = g.dims();
        let plane = g.plane();
        let mut crit = vec![false; plane];
        let mut any = false;
        for iy in 0..ny {
            for ix in 0..nx {
                let c = g.voxel_center(ix, iy, 0);
                if polyline_dist2([c[0], c[1]], &pts) <= r2 {
                    crit[iy * nx + ix] = true;
                    any = true;
                }
            }
        }
        if !any {
            continue;
        }
        volume += 1;
        for (i, (pm, gm)) in p.data().iter().zip(g.data()).enumerate() {
            if !crit[i % plane] {
                continue;
            }
            let po = pm.is_occupied();
            let go = gm.is_occupied();
            inter += usize::from(po && go);
            union += usize::from(po || go);
        }
    }
    if volume == 0 {
        return Err(RfbError::UndefinedCritical("no voxel columns within the critical radius"));
    }
    if union == 0 {
        return Err(RfbError::UndefinedCritical("critical volume holds no occupied voxels"));
    }
    Ok(inter as f64 / union as f64)
}

/// Squared 2D distance from a point to a polyline.
fn polyline_dist2(p: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    if pts.len() == 1 {
        let (dx, dy) = (p[0] - pts[0][0], p[1] - pts[0][1]);
        return dx * dx + dy * dy;
    }
    for w in pts.windows(2) {
        let (ax, ay) = (w[0][0], w[0][1]);
        let (dx, dy) = (w[1][0] - ax, w[1][1] - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((p[0] - ax) * dx + (p[1] - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (cx, cy) = (ax + t * dx, ay + t * dy);
        let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
        if d2 < best {
            best = d2;
        }
    }
    best
}

/// Dynamic-agent fidelity: per reference instance, the mean IoU between its
/// mask and the matched predicted instance over the frames where the
/// reference mask is nonempty, averaged over instances.
///
/// Matching prefers identical ids; leftovers pair greedily by total voxel
/// overlap. Reference instances with no predicted counterpart score 0 —
/// deleting an agent is punished, hallucinating one is not (it shows up in
/// [`g_iou`] instead). No reference agents at all scores a vacuous 1.0.
pub fn daf(
    pred_agents: &[BTreeMap<u32, Vec<u32>>],
    gt_agents: &[BTreeMap<u32, Vec<u32>>],
) -> f64 {
    let gt_ids: BTreeSet<u32> = gt_agents.iter().flat_map(|m| m.keys().copied()).collect();
    let pred_ids: BTreeSet<u32> = pred_agents.iter().flat_map(|m| m.keys().copied()).collect();

    let mut matched: BTreeMap<u32, u32> = BTreeMap::new();
    let mut free_pred: BTreeSet<u32> = pred_ids.clone();
    for &g in &gt_ids {
        if free_pred.remove(&g) {
            matched.insert(g, g);
        }
    }
    // greedy by total cross-frame overlap, deterministic tie order
    let mut pairs: Vec<(usize, u32, u32)> = Vec::new();
    for &g in gt_ids.iter().filter(|g| !matched.contains_key(g)) {
        for &p in &free_pred {
            let overlap: usize = gt_agents
                .iter()
                .zip(pred_agents)
                .map(|(gm, pm)| match (gm.get(&g), pm.get(&p)) {
                    (Some(a), Some(b)) => voxelset::intersection_count(a, b),
                    _ => 0,
                })
                .sum();
            if overlap > 0 {
                pairs.push((overlap, g, p));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, g, p) in pairs {
        if !matched.contains_key(&g) && free_pred.contains(&p) {
            matched.insert(g, p);
            free_pred.remove(&p);
        }
    }

    let empty: Vec<u32> = Vec::new();
    let (mut sum, mut n) = (0.0, 0usize);
    for &g in &gt_ids {
        let (mut s, mut frames) = (0.0, 0usize);
        for (t, gm) in gt_agents.iter().enumerate() {
            let Some(gt_mask) = gm.get(&g) else { continue };
            if gt_mask.is_empty() {
                continue;
            }
            let pred_mask = matched
                .get(&g)
                .and_then(|p| pred_agents.get(t).and_then(|pm| pm.get(p)))
                .unwrap_or(&empty);
            s += voxelset::iou(pred_mask, gt_mask);
            frames += 1;
        }
        if frames > 0 {
            sum += s / frames as f64;
            n += 1;
        }
    }
    if n == 0 {
        1.0
    } else {
        sum / n as f64
    }
}

fn check_shapes(pred: &[SemanticGrid], gt: &[SemanticGrid]) -> Result<(), RfbError> {
    let sig = |gs: &[SemanticGrid]| {
        let d = gs.first().map_or([0; 3], |g| g.dims());
        [d[0], d[1], d[2], gs.len()]
    };
    if pred.len() != gt.len()
        || pred.iter().zip(gt).any(|(p, g)| p.dims() != g.dims())
    {
        return Err(RfbError::ShapeMismatch { pred: sig(pred), gt: sig(gt) });
    }
    Ok(())
}

/// One benchmark input: a decomposed scene, the probe trajectory, and the
/// synthesized reference futures to score against.
#[derive(Debug, Clone)]
pub struct SuiteScenario {
    pub id: String,
    pub scenario: Scenario,
    pub trajectory: Trajectory,
    pub gt_frames: Vec<SemanticGrid>,
    pub gt_agent_masks: Vec<BTreeMap<u32, Vec<u32>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub g_iou: f64,
    pub f_iou: f64,
    pub daf: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScore {
    pub id: String,
    #[serde(flatten)]
    pub metrics: MetricTriple,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFailure {
    pub id: String,
    pub error: String,
}

/// Aggregate benchmark outcome; `aggregate` is the unweighted mean over the
/// scenarios that scored (zeros if none did — see `errors`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RFBReport {
    pub model: String,
    pub seed: u64,
    pub scenario_count: usize,
    pub aggregate: MetricTriple,
    pub scenarios: Vec<ScenarioScore>,
    pub errors: Vec<ScenarioFailure>,
}

impl RFBReport {
    /// Flat one-row-per-scenario table; the header matches the JSON names.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,g_iou,f_iou,daf\n");
        for s in &self.scenarios {
            out.push_str(&format!(
                "{},{},{},{}\n",
                s.id, s.metrics.g_iou, s.metrics.f_iou, s.metrics.daf
            ));
        }
        out
    }
}

/// Run a world model over the suite and score every scenario against its
/// synthesized reference. Scenarios evaluate in parallel; failures are
/// recorded per scenario and never abort the run. Deterministic for a given
/// (model, suite): results are reduced in suite order.
pub fn run_benchmark<M>(
    model: &M,
    suite: &[SuiteScenario],
    crit_radius: f64,
    seed: u64,
) -> Result<RFBReport, RfbError>
where
    M: WorldModel + Sync + ?Sized,
{
    if suite.is_empty() {
        return Err(RfbError::EmptySuite);
    }
    let results: Vec<Result<ScenarioScore, ScenarioFailure>> = suite
        .par_iter()
        .map(|item| {
            let fail = |e: String| ScenarioFailure { id: item.id.clone(), error: e };
            let forecast = model
                .forecast(&item.scenario, &item.trajectory)
                .map_err(|e| fail(e.to_string()))?;
            let g = g_iou(&forecast.frames, &item.gt_frames).map_err(|e| fail(e.to_string()))?;
            let f = f_iou(&forecast.frames, &item.gt_frames, &item.trajectory, crit_radius)
                .map_err(|e| fail(e.to_string()))?;
            let d = daf(&forecast.agent_masks, &item.gt_agent_masks);
            Ok(ScenarioScore {
                id: item.id.clone(),
                metrics: MetricTriple { g_iou: g, f_iou: f, daf: d },
            })
        })
        .collect();

    let mut scenarios = Vec::new();
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(s) => scenarios.push(s),
            Err(e) => errors.push(e),
        }
    }
    let n = scenarios.len();
    let mean = |f: fn(&MetricTriple) -> f64| {
        if n == 0 {
            0.0
        } else {
            scenarios.iter().map(|s| f(&s.metrics)).sum::<f64>() / n as f64
        }
    };
    Ok(RFBReport {
        model: model.tag().to_string(),
        seed,
        scenario_count: n,
        aggregate: MetricTriple {
            g_iou: mean(|m| m.g_iou),
            f_iou: mean(|m| m.f_iou),
            daf: mean(|m| m.daf),
        },
        scenarios,
        errors,
    })
}
