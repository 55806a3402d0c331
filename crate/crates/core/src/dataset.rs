//! On-disk scenario bundles and counterfactual curriculum generation.
//!
//! A scenario is stored as one JSON document plus binary grid blobs it
//! references by relative path, so a bundle can be moved as a directory.
//! Counterfactual items reuse the same format: the stored trajectory is the
//! synthesized one and the stored futures are its ground-truth frames, which
//! makes every curriculum item a self-contained scenario again.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::Trajectory;
use crate::grid::io::{read_grid_file, write_grid_file, GridIoError};
use crate::rfb::SuiteScenario;
use crate::scene::{
    select_target, stamp_rollout, synthesize_future_grids, synthesize_trajectory, AgentBox,
    EgoState, FailureMode, Scenario, SynthError, SynthParams,
};
use crate::seed;

pub const SCENARIO_VERSION: u32 = 1;

/// Intended real:synthetic training mix recorded alongside a curriculum.
pub const DEFAULT_MIX: [u32; 2] = [80, 20];

/// Counterfactual mode shares, in quota precedence order.
const MODE_SHARE: [(FailureMode, f64); 3] = [
    (FailureMode::DynamicCollision, 0.4),
    (FailureMode::StaticPenetration, 0.3),
    (FailureMode::OffRoad, 0.3),
];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Grid {
        path: PathBuf,
        #[source]
        source: GridIoError,
    },
    #[error("unsupported scenario file version {got}, expected {SCENARIO_VERSION}")]
    Version { got: u32 },
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("{path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("source dataset is empty")]
    EmptySources,
    #[error(transparent)]
    Synth(#[from] SynthError),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.to_path_buf(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> DatasetError {
    DatasetError::Json { path: path.to_path_buf(), source }
}

fn grid_err(path: &Path, source: GridIoError) -> DatasetError {
    DatasetError::Grid { path: path.to_path_buf(), source }
}

// The JSON half of a stored scenario; grids live in sibling blob files.
#[derive(Debug, Serialize, Deserialize)]
struct ScenarioFile {
    version: u32,
    horizon_k: usize,
    dt: f64,
    ego: EgoState,
    agents: Vec<AgentBox>,
    static_grid_path: String,
    future_grid_paths: Vec<String>,
    trajectory: Trajectory,
}

/// Write `scenario` under `dir` as `{id}.json` plus one `.iocc` blob per
/// grid, and return the path of the JSON document. Blob references are
/// relative, so the whole directory can be relocated.
pub fn write_scenario(
    dir: &Path,
    id: &str,
    scenario: &Scenario,
) -> Result<PathBuf, DatasetError> {
    debug_assert!(
        !id.contains(['/', '\\']),
        "scenario ids must be bare file stems"
    );
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

    let static_name = format!("{id}.static.iocc");
    let static_path = dir.join(&static_name);
    write_grid_file(&static_path, &scenario.static_grid)
        .map_err(|e| grid_err(&static_path, e))?;

    let mut future_names = Vec::with_capacity(scenario.original_futures.len());
    for (k, frame) in scenario.original_futures.iter().enumerate() {
        let name = format!("{id}.f{k:02}.iocc");
        let path = dir.join(&name);
        write_grid_file(&path, frame).map_err(|e| grid_err(&path, e))?;
        future_names.push(name);
    }

    let doc = ScenarioFile {
        version: SCENARIO_VERSION,
        horizon_k: scenario.horizon(),
        dt: scenario.dt(),
        ego: scenario.ego.clone(),
        agents: scenario.agents.clone(),
        static_grid_path: static_name,
        future_grid_paths: future_names,
        trajectory: scenario.original_traj.clone(),
    };
    let json_path = dir.join(format!("{id}.json"));
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| json_err(&json_path, e))?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;
    Ok(json_path)
}

/// Load a scenario document and its grid blobs, then re-validate the result.
pub fn read_scenario(path: &Path) -> Result<Scenario, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: ScenarioFile = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
    if doc.version != SCENARIO_VERSION {
        return Err(DatasetError::Version { got: doc.version });
    }
    let invalid = |reason: String| DatasetError::Invalid { path: path.to_path_buf(), reason };
    if doc.trajectory.horizon() != doc.horizon_k {
        return Err(invalid(format!(
            "trajectory horizon {} does not match horizon_k {}",
            doc.trajectory.horizon(),
            doc.horizon_k
        )));
    }
    if (doc.trajectory.dt() - doc.dt).abs() > 1e-9 {
        return Err(invalid(format!(
            "trajectory dt {} does not match dt {}",
            doc.trajectory.dt(),
            doc.dt
        )));
    }
    if doc.future_grid_paths.len() != doc.horizon_k {
        return Err(invalid(format!(
            "{} future grid paths for a horizon of {}",
            doc.future_grid_paths.len(),
            doc.horizon_k
        )));
    }

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let static_path = base.join(&doc.static_grid_path);
    let static_grid = read_grid_file(&static_path).map_err(|e| grid_err(&static_path, e))?;
    let mut original_futures = Vec::with_capacity(doc.future_grid_paths.len());
    for name in &doc.future_grid_paths {
        let p = base.join(name);
        original_futures.push(read_grid_file(&p).map_err(|e| grid_err(&p, e))?);
    }

    let scenario = Scenario {
        static_grid,
        agents: doc.agents,
        ego: doc.ego,
        original_traj: doc.trajectory,
        original_futures,
    };
    scenario.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(scenario)
}

/// Ground-truth voxel ownership for one future frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMasks {
    /// Sorted voxel indices of the ego box.
    pub ego: Vec<u32>,
    /// Agent id → sorted owned voxel indices.
    pub agents: BTreeMap<u32, Vec<u32>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MasksFile {
    version: u32,
    frames: Vec<FrameMasks>,
}

pub fn write_masks(path: &Path, frames: &[FrameMasks]) -> Result<(), DatasetError> {
    let doc = MasksFile { version: SCENARIO_VERSION, frames: frames.to_vec() };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| json_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_masks(path: &Path) -> Result<Vec<FrameMasks>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let doc: MasksFile = serde_json::from_str(&text).map_err(|e| json_err(path, e))?;
    if doc.version != SCENARIO_VERSION {
        return Err(DatasetError::Version { got: doc.version });
    }
    Ok(doc.frames)
}

/// Knobs for one curriculum run. `synth.horizon`, `synth.dt`, and
/// `synth.seed` are overridden per item from the source scenario and the
/// derived item seed; the remaining synthesis fields pass through.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumSpec {
    pub counts: usize,
    pub seed: u64,
    /// Intended real:synthetic training mix, recorded in the summary.
    pub mix_real_synthetic: [u32; 2],
    pub synth: SynthParams,
}

impl CurriculumSpec {
    pub fn new(counts: usize, seed: u64) -> Self {
        CurriculumSpec {
            counts,
            seed,
            mix_real_synthetic: DEFAULT_MIX,
            synth: SynthParams::default(),
        }
    }
}

/// One manifest line. Written items carry `paths`; infeasible items carry
/// `skipped` with the reason instead, so no request vanishes silently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mode: FailureMode,
    pub seed: u64,
    /// Source scenario document this item was synthesized from.
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<RecordPaths>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordPaths {
    pub scenario: String,
    pub masks: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCount {
    pub mode: FailureMode,
    pub requested: usize,
    pub written: usize,
    pub skipped: usize,
}

/// Contents of `curriculum.json`, also returned by [`generate_curriculum`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSummary {
    pub version: u32,
    pub seed: u64,
    pub mix_real_synthetic: [u32; 2],
    pub requested: usize,
    pub written: usize,
    pub skipped: usize,
    pub modes: Vec<ModeCount>,
}

/// Largest-remainder split of `counts` over the 40/30/30 mode shares; ties
/// go to the earlier entry in `MODE_SHARE`. Off by at most one per mode.
fn mode_quota(counts: usize) -> [(FailureMode, usize); 3] {
    let mut rows: Vec<(FailureMode, usize, f64)> = MODE_SHARE
        .iter()
        .map(|&(mode, share)| {
            let exact = share * counts as f64;
            (mode, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = rows.iter().map(|r| r.1).sum();
    while assigned < counts {
        let mut best = 0;
        for i in 1..rows.len() {
            if rows[i].2 > rows[best].2 {
                best = i;
            }
        }
        rows[best].1 += 1;
        rows[best].2 = -1.0;
        assigned += 1;
    }
    [
        (rows[0].0, rows[0].1),
        (rows[1].0, rows[1].1),
        (rows[2].0, rows[2].1),
    ]
}

/// Scenario documents under `dir`, sorted by file name. Mask sidecars and
/// curriculum bookkeeping files are excluded.
pub fn list_scenarios(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let entry = entry.map_err(|e| io_err(dir, e))?;
        let path = entry.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) => n,
            None => continue,
        };
        if name.ends_with(".json")
            && !name.ends_with(".masks.json")
            && !name.ends_with(".reward.json")
            && name != "curriculum.json"
            && name != "resolved_config.json"
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Synthesize `spec.counts` counterfactual scenarios into `out_dir`.
///
/// Item `i` draws everything from `seed::derive(spec.seed, i)`: the source
/// scenario pick, target selection, and waypoint noise. Output bytes are a
/// pure function of (sources, spec), so reruns reproduce the directory
/// exactly. Infeasible (scene, mode) pairs become skip records in the
/// manifest rather than disappearing. With `counts == 0` the manifest and
/// summary are still written, just empty.
pub fn generate_curriculum(
    sources: &[PathBuf],
    out_dir: &Path,
    spec: &CurriculumSpec,
) -> Result<CurriculumSummary, DatasetError> {
    if sources.is_empty() {
        return Err(DatasetError::EmptySources);
    }
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    let mut loaded: Vec<Scenario> = Vec::with_capacity(sources.len());
    for path in sources {
        loaded.push(read_scenario(path)?);
    }

    let quota = mode_quota(spec.counts);
    let mut mode_seq = Vec::with_capacity(spec.counts);
    for &(mode, n) in &quota {
        mode_seq.extend(std::iter::repeat_n(mode, n));
    }

    let mut modes: Vec<ModeCount> = quota
        .iter()
        .map(|&(mode, requested)| ModeCount { mode, requested, written: 0, skipped: 0 })
        .collect();
    let mut records = Vec::with_capacity(spec.counts);

    for (i, &mode) in mode_seq.iter().enumerate() {
        let id = format!("cf_{i:04}");
        let item_seed = seed::derive(spec.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let src_idx = rng.random_range(0..loaded.len());
        let source = sources[src_idx].to_string_lossy().into_owned();
        let scenario = &loaded[src_idx];

        let row = modes.iter_mut().find(|m| m.mode == mode).unwrap();
        let mut skip = |reason: String, records: &mut Vec<ManifestRecord>| {
            row.skipped += 1;
            records.push(ManifestRecord {
                id: id.clone(),
                mode,
                seed: item_seed,
                source: source.clone(),
                paths: None,
                skipped: Some(reason),
            });
        };

        let target = match select_target(scenario, mode, &mut rng) {
            Ok(t) => t,
            Err(e) => {
                skip(e.to_string(), &mut records);
                continue;
            }
        };
        let params = SynthParams {
            horizon: scenario.horizon(),
            dt: scenario.dt(),
            seed: item_seed,
            ..spec.synth.clone()
        };
        let cf_traj = match synthesize_trajectory(&scenario.ego, target, &params) {
            Ok(t) => t,
            Err(e) => {
                skip(e.to_string(), &mut records);
                continue;
            }
        };
        let gt_frames = synthesize_future_grids(scenario, &cf_traj)?;

        // DAF ground truth: exact stamped ownership along the counterfactual,
        // same dynamics the impartial model replays.
        let rollout = stamp_rollout(
            &scenario.static_grid,
            &scenario.agents,
            &[],
            &scenario.ego,
            &cf_traj,
        );
        let masks: Vec<FrameMasks> = rollout
            .ego_masks
            .into_iter()
            .zip(rollout.agent_masks)
            .map(|(ego, agents)| FrameMasks { ego, agents })
            .collect();

        let cf_scenario = Scenario {
            static_grid: scenario.static_grid.clone(),
            agents: scenario.agents.clone(),
            ego: scenario.ego.clone(),
            original_traj: cf_traj,
            original_futures: gt_frames,
        };
        write_scenario(out_dir, &id, &cf_scenario)?;
        let masks_name = format!("{id}.masks.json");
        write_masks(&out_dir.join(&masks_name), &masks)?;

        row.written += 1;
        records.push(ManifestRecord {
            id: id.clone(),
            mode,
            seed: item_seed,
            source,
            paths: Some(RecordPaths {
                scenario: format!("{id}.json"),
                masks: masks_name,
            }),
            skipped: None,
        });
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    for record in &records {
        let line = serde_json::to_string(record).map_err(|e| json_err(&manifest_path, e))?;
        writeln!(manifest, "{line}").map_err(|e| io_err(&manifest_path, e))?;
    }

    let summary = CurriculumSummary {
        version: SCENARIO_VERSION,
        seed: spec.seed,
        mix_real_synthetic: spec.mix_real_synthetic,
        requested: spec.counts,
        written: modes.iter().map(|m| m.written).sum(),
        skipped: modes.iter().map(|m| m.skipped).sum(),
        modes,
    };
    let summary_path = out_dir.join("curriculum.json");
    let mut text =
        serde_json::to_string_pretty(&summary).map_err(|e| json_err(&summary_path, e))?;
    text.push('\n');
    fs::write(&summary_path, text).map_err(|e| io_err(&summary_path, e))?;
    Ok(summary)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| DatasetError::Manifest {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Load every written item of a curriculum manifest as a benchmark suite.
/// Skip records are passed over; missing referenced files are hard errors.
pub fn load_suite(manifest_path: &Path) -> Result<Vec<SuiteScenario>, DatasetError> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut suite = Vec::new();
    for record in read_manifest(manifest_path)? {
        let paths = match record.paths {
            Some(p) => p,
            None => continue,
        };
        let scenario = read_scenario(&base.join(&paths.scenario))?;
        let masks = read_masks(&base.join(&paths.masks))?;
        if masks.len() != scenario.horizon() {
            return Err(DatasetError::Invalid {
                path: base.join(&paths.masks),
                reason: format!(
                    "{} mask frames for a horizon of {}",
                    masks.len(),
                    scenario.horizon()
                ),
            });
        }
        suite.push(SuiteScenario {
            id: record.id,
            trajectory: scenario.original_traj.clone(),
            gt_frames: scenario.original_futures.clone(),
            gt_agent_masks: masks.into_iter().map(|f| f.agents).collect(),
            scenario,
        });
    }
    Ok(suite)
}

/// Write `count` procedurally generated street scenes under `dir` as
/// `scene_{i:04}` bundles; per-scene seeds derive from `master_seed`.
pub fn write_random_scenes(
    dir: &Path,
    count: usize,
    master_seed: u64,
) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let scenario = crate::samples::random_scene(seed::derive(master_seed, i as u64));
        out.push(write_scenario(dir, &format!("scene_{i:04}"), &scenario)?);
    }
    Ok(out)
}
