//! Command-line surface over the scenario toolkit.
//!
//! Every command writes its fully resolved configuration into the output
//! directory, prints a one-line summary to stdout, and reports failures as a
//! JSON record on stderr. Exit codes: 0 success, 1 usage, 2 input error,
//! 3 runtime error.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use occsynth_core::dataset::{self, CurriculumSpec, FrameMasks};
use occsynth_core::grid::io::{read_grid_file, write_grid_file};
use occsynth_core::grid::SemanticGrid;
use occsynth_core::oracle::{OptimisticOracle, VeridicalOracle, WorldModel};
use occsynth_core::reward::total_reward;
use occsynth_core::rfb::run_benchmark;
use occsynth_core::scene::Scenario;
use occsynth_core::{grpo, samples, RewardConfig, TrainConfig, Trajectory};

#[derive(Parser)]
#[command(
    name = "occsynth",
    version,
    about = "Semantic occupancy scenario synthesis, forecasting, and policy refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelTag {
    Veridical,
    Optimistic,
}

impl ModelTag {
    fn as_model(self) -> &'static dyn WorldModel {
        match self {
            ModelTag::Veridical => &VeridicalOracle,
            ModelTag::Optimistic => &OptimisticOracle,
        }
    }

    fn name(self) -> &'static str {
        self.as_model().tag()
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Ply,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedurally generated street scenes as a source dataset.
    GenScenes {
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes to generate.
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the fixed hazard-ahead scenario and its reward config.
        #[arg(long)]
        hazard: bool,
    },
    /// Synthesize a counterfactual failure curriculum from a scene dataset.
    Synth {
        /// Directory of source scenario documents.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total scenarios to synthesize (40/30/30 over the failure modes).
        #[arg(long)]
        counts: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Curriculum spec JSON; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Forecast future occupancy for a scenario under a world model.
    Forecast {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        model: ModelTag,
        #[arg(long)]
        out: PathBuf,
        /// Trajectory JSON to condition on; defaults to the stored one.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Score a trajectory against a world model's forecast.
    Reward {
        #[arg(long)]
        scenario: PathBuf,
        /// Reward config JSON; must carry a non-empty route.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "veridical")]
        model: ModelTag,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Evaluate a world model on a curriculum suite.
    Rfb {
        /// Manifest written by `synth`.
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, value_enum)]
        model: ModelTag,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        /// Critical-volume radius around the ego path, meters.
        #[arg(long, default_value_t = 3.0)]
        crit_radius: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Refine a waypoint policy on a scenario with group-relative updates.
    Train {
        /// Scenario document; defaults to the bundled hazard-ahead scene.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Reward config JSON; required with --scenario, defaults otherwise.
        #[arg(long)]
        reward_config: Option<PathBuf>,
        /// Train config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Export an occupancy grid as a PLY point cloud or CSV table.
    Export {
        /// A grid blob (.iocc) or a scenario document (.json).
        #[arg(long)]
        input: PathBuf,
        /// For scenario inputs: future frame index; omitted = static grid.
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long, value_enum)]
        format: ExportFormat,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CmdError {
    Input(String),
    Runtime(String),
}

fn input<E: Display>(e: E) -> CmdError {
    CmdError::Input(e.to_string())
}

fn runtime<E: Display>(e: E) -> CmdError {
    CmdError::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, message, code) = match e {
                CmdError::Input(m) => ("input", m, 2),
                CmdError::Runtime(m) => ("runtime", m, 3),
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": kind, "message": message } })
            );
            ExitCode::from(code)
        }
    }
}

fn run(command: Command) -> Result<(), CmdError> {
    match command {
        Command::GenScenes { out, count, seed, hazard } => cmd_gen_scenes(&out, count, seed, hazard),
        Command::Synth { dataset, out, counts, seed, config } => {
            cmd_synth(&dataset, &out, counts, seed, config.as_deref())
        }
        Command::Forecast { scenario, model, out, trajectory } => {
            cmd_forecast(&scenario, model, &out, trajectory.as_deref())
        }
        Command::Reward { scenario, config, model, out, trajectory } => {
            cmd_reward(&scenario, &config, model, &out, trajectory.as_deref())
        }
        Command::Rfb { suite, model, out, jobs, crit_radius, seed } => {
            configure_jobs(jobs)?;
            cmd_rfb(&suite, model, &out, jobs, crit_radius, seed)
        }
        Command::Train { scenario, reward_config, config, seed, out, jobs } => {
            configure_jobs(jobs)?;
            cmd_train(
                scenario.as_deref(),
                reward_config.as_deref(),
                config.as_deref(),
                seed,
                &out,
                jobs,
            )
        }
        Command::Export { input, frame, format, out } => cmd_export(&input, frame, format, &out),
    }
}

fn configure_jobs(jobs: Option<usize>) -> Result<(), CmdError> {
    let Some(n) = jobs else { return Ok(()) };
    if n == 0 {
        return Err(CmdError::Input("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(runtime)
}

fn ensure_out(out: &Path) -> Result<(), CmdError> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))
}

/// Every command records what actually ran, next to its outputs.
fn echo_config(out: &Path, resolved: &serde_json::Value) -> Result<(), CmdError> {
    let path = out.join("resolved_config.json");
    let mut text = serde_json::to_string_pretty(resolved).map_err(runtime)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CmdError> {
    let text =
        fs::read_to_string(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn load_scenario(path: &Path) -> Result<Scenario, CmdError> {
    dataset::read_scenario(path).map_err(input)
}

fn cmd_gen_scenes(out: &Path, count: usize, seed: u64, hazard: bool) -> Result<(), CmdError> {
    ensure_out(out)?;
    echo_config(
        out,
        &serde_json::json!({
            "command": "gen-scenes",
            "out": out,
            "count": count,
            "seed": seed,
            "hazard": hazard,
        }),
    )?;
    let paths = dataset::write_random_scenes(out, count, seed).map_err(runtime)?;
    if hazard {
        let (scenario, reward_cfg) = samples::hazard_ahead(0);
        dataset::write_scenario(out, "hazard", &scenario).map_err(runtime)?;
        let mut text = serde_json::to_string_pretty(&reward_cfg).map_err(runtime)?;
        text.push('\n');
        fs::write(out.join("hazard.reward.json"), text).map_err(runtime)?;
    }
    println!(
        "wrote {} scenes{} to {}",
        paths.len(),
        if hazard { " + hazard bundle" } else { "" },
        out.display()
    );
    Ok(())
}

/// Write failures land on out-dir paths; everything else the curriculum
/// generator reports concerns the inputs.
fn classify_dataset_err(e: dataset::DatasetError, out: &Path) -> CmdError {
    use dataset::DatasetError::*;
    let on_output = match &e {
        Io { path, .. } | Json { path, .. } | Grid { path, .. } => path.starts_with(out),
        _ => false,
    };
    if on_output {
        runtime(e)
    } else {
        input(e)
    }
}

fn cmd_synth(
    dataset_dir: &Path,
    out: &Path,
    counts: Option<usize>,
    seed: Option<u64>,
    config: Option<&Path>,
) -> Result<(), CmdError> {
    if !dataset_dir.is_dir() {
        return Err(input(format!("dataset not found: {}", dataset_dir.display())));
    }
    let mut spec = match config {
        Some(path) => read_json::<CurriculumSpec>(path)?,
        None => CurriculumSpec::new(0, 0),
    };
    if let Some(n) = counts {
        spec.counts = n;
    } else if config.is_none() {
        return Err(input("no counts given: pass --counts or --config"));
    }
    if let Some(s) = seed {
        spec.seed = s;
    }
    let sources = dataset::list_scenarios(dataset_dir).map_err(input)?;

    ensure_out(out)?;
    echo_config(
        out,
        &serde_json::json!({
            "command": "synth",
            "dataset": dataset_dir,
            "out": out,
            "spec": spec,
        }),
    )?;
    let summary = dataset::generate_curriculum(&sources, out, &spec)
        .map_err(|e| classify_dataset_err(e, out))?;
    let modes: Vec<String> = summary
        .modes
        .iter()
        .map(|m| format!("{:?}={}", m.mode, m.written))
        .collect();
    println!(
        "wrote {} scenarios ({} skipped) [{}] -> {}",
        summary.written,
        summary.skipped,
        modes.join(" "),
        out.join("manifest.jsonl").display()
    );
    Ok(())
}

fn load_trajectory(
    scenario: &Scenario,
    path: Option<&Path>,
) -> Result<(Trajectory, String), CmdError> {
    match path {
        Some(p) => Ok((read_json::<Trajectory>(p)?, p.display().to_string())),
        None => Ok((scenario.original_traj.clone(), "stored".into())),
    }
}

fn cmd_forecast(
    scenario_path: &Path,
    model: ModelTag,
    out: &Path,
    trajectory: Option<&Path>,
) -> Result<(), CmdError> {
    let scenario = load_scenario(scenario_path)?;
    let (traj, traj_src) = load_trajectory(&scenario, trajectory)?;

    ensure_out(out)?;
    echo_config(
        out,
        &serde_json::json!({
            "command": "forecast",
            "scenario": scenario_path,
            "model": model.name(),
            "trajectory": traj_src,
            "out": out,
        }),
    )?;
    let result = model.as_model().forecast(&scenario, &traj).map_err(input)?;
    for (k, frame) in result.frames.iter().enumerate() {
        let path = out.join(format!("forecast.f{k:02}.iocc"));
        write_grid_file(&path, frame).map_err(runtime)?;
    }
    let masks: Vec<FrameMasks> = result
        .ego_masks
        .iter()
        .zip(&result.agent_masks)
        .map(|(ego, agents)| FrameMasks { ego: ego.clone(), agents: agents.clone() })
        .collect();
    dataset::write_masks(&out.join("forecast.masks.json"), &masks).map_err(runtime)?;
    println!(
        "forecast model={} steps={} -> {}",
        model.name(),
        result.frames.len(),
        out.display()
    );
    Ok(())
}

fn cmd_reward(
    scenario_path: &Path,
    config: &Path,
    model: ModelTag,
    out: &Path,
    trajectory: Option<&Path>,
) -> Result<(), CmdError> {
    let scenario = load_scenario(scenario_path)?;
    let reward_cfg: RewardConfig = read_json(config)?;
    reward_cfg.validate().map_err(input)?;
    let (traj, traj_src) = load_trajectory(&scenario, trajectory)?;

    ensure_out(out)?;
    echo_config(
        out,
        &serde_json::json!({
            "command": "reward",
            "scenario": scenario_path,
            "model": model.name(),
            "trajectory": traj_src,
            "reward": reward_cfg,
            "out": out,
        }),
    )?;
    let forecast = model.as_model().forecast(&scenario, &traj).map_err(input)?;
    let breakdown = total_reward(&forecast, &traj, &reward_cfg).map_err(runtime)?;
    let line = serde_json::to_string(&breakdown).map_err(runtime)?;
    fs::write(out.join("reward.json"), format!("{line}\n")).map_err(runtime)?;
    println!("{line}");
    Ok(())
}

fn cmd_rfb(
    suite: &Path,
    model: ModelTag,
    out: &Path,
    jobs: Option<usize>,
    crit_radius: f64,
    seed: u64,
) -> Result<(), CmdError> {
    let scenarios = dataset::load_suite(suite).map_err(input)?;

    ensure_out(out)?;
    echo_config(
        out,
        &serde_json::json!({
            "command": "rfb",
            "suite": suite,
            "model": model.name(),
            "jobs": jobs,
            "crit_radius": crit_radius,
            "seed": seed,
            "out": out,
        }),
    )?;
    let report = run_benchmark(model.as_model(), &scenarios, crit_radius, seed).map_err(input)?;
    let mut text = serde_json::to_string_pretty(&report).map_err(runtime)?;
    text.push('\n');
    fs::write(out.join("report.json"), text).map_err(runtime)?;
    fs::write(out.join("report.csv"), report.to_csv()).map_err(runtime)?;
    println!(
        "model={} scenarios={} errors={} g_iou={:.4} f_iou={:.4} daf={:.4}",
        report.model,
        report.scenario_count,
        report.errors.len(),
        report.aggregate.g_iou,
        report.aggregate.f_iou,
        report.aggregate.daf
    );
    Ok(())
}

fn cmd_train(
    scenario_path: Option<&Path>,
    reward_config: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    jobs: Option<usize>,
) -> Result<(), CmdError> {
    let (scenario, default_reward, scenario_src) = match scenario_path {
        Some(p) => (load_scenario(p)?, None, p.display().to_string()),
        None => {
            let (scenario, reward_cfg) = samples::hazard_ahead(0);
            (scenario, Some(reward_cfg), "bundled-hazard".to_string())
        }
    };
    let reward_cfg = match (reward_config, default_reward) {
        (Some(p), _) => read_json::<RewardConfig>(p)?,
        (None, Some(cfg)) => cfg,
        (None, None) => {
            return Err(input("--reward-config is required with a custom --scenario"));
        }
    };
    reward_cfg.validate().map_err(input)?;
    let mut train_cfg = match config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    train_cfg.validate().map_err(input)?;

    ensure_out(out)?;
    echo_config(
        out,
        &serde_json::json!({
            "command": "train",
            "scenario": scenario_src,
            "reward": reward_cfg,
            "train": train_cfg,
            "jobs": jobs,
            "out": out,
        }),
    )?;
    let outcome =
        grpo::train(&scenario, &VeridicalOracle, &reward_cfg, &train_cfg).map_err(|e| match e {
            grpo::GrpoError::InvalidConfig(_) | grpo::GrpoError::InvalidParams(_) => input(e),
            other => runtime(other),
        })?;

    let mut log_text = String::new();
    for entry in &outcome.log {
        log_text.push_str(&serde_json::to_string(entry).map_err(runtime)?);
        log_text.push('\n');
    }
    fs::write(out.join("train_log.jsonl"), log_text).map_err(runtime)?;
    let mut policy = serde_json::to_string_pretty(&outcome.params).map_err(runtime)?;
    policy.push('\n');
    fs::write(out.join("policy.json"), policy).map_err(runtime)?;

    let final_score = grpo::score_mean(&outcome.params, &scenario, &VeridicalOracle, &reward_cfg)
        .map_err(runtime)?;
    println!(
        "trained {} iterations; mean-trajectory reward {:.3} (coll {:.3}, offroad {:.3}) -> {}",
        outcome.log.len(),
        final_score.total,
        final_score.coll,
        final_score.offroad,
        out.display()
    );
    Ok(())
}

/// Label-code color table for flattened exports, indexed by label code.
const PALETTE: [[u8; 3]; 10] = [
    [128, 128, 128], // free (never exported)
    [70, 70, 70],    // drivable
    [170, 170, 170], // sidewalk
    [60, 160, 60],   // vegetation
    [150, 110, 80],  // building
    [200, 160, 60],  // barrier
    [60, 120, 220],  // vehicle
    [220, 60, 60],   // pedestrian
    [255, 220, 40],  // ego
    [140, 80, 180],  // other
];

fn export_ply(grid: &SemanticGrid) -> String {
    let indices = grid.occupied_indices();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", indices.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    out.push_str("end_header\n");
    for &i in &indices {
        let [ix, iy, iz] = grid.coords(i);
        let [x, y, z] = grid.voxel_center(ix, iy, iz);
        let [r, g, b] = PALETTE[grid.get_linear(i).dominant().code() as usize];
        out.push_str(&format!("{x} {y} {z} {r} {g} {b}\n"));
    }
    out
}

fn export_csv(grid: &SemanticGrid) -> String {
    let mut out = String::from("x,y,z,label\n");
    for &i in &grid.occupied_indices() {
        let [ix, iy, iz] = grid.coords(i);
        let [x, y, z] = grid.voxel_center(ix, iy, iz);
        out.push_str(&format!("{x},{y},{z},{}\n", grid.get_linear(i).dominant().name()));
    }
    out
}

fn cmd_export(
    input_path: &Path,
    frame: Option<usize>,
    format: ExportFormat,
    out: &Path,
) -> Result<(), CmdError> {
    let is_blob = input_path.extension().is_some_and(|e| e == "iocc");
    let grid = if is_blob {
        if frame.is_some() {
            return Err(input("--frame only applies to scenario documents"));
        }
        read_grid_file(input_path).map_err(|e| input(format!("{}: {e}", input_path.display())))?
    } else {
        let scenario = load_scenario(input_path)?;
        match frame {
            None => scenario.static_grid,
            Some(k) => match scenario.original_futures.into_iter().nth(k) {
                Some(g) => g,
                None => {
                    return Err(input(format!(
                        "frame {k} out of range for a horizon of {}",
                        scenario.original_traj.horizon()
                    )));
                }
            },
        }
    };

    ensure_out(out)?;
    echo_config(
        out,
        &serde_json::json!({
            "command": "export",
            "input": input_path,
            "frame": frame,
            "format": match format { ExportFormat::Ply => "ply", ExportFormat::Csv => "csv" },
            "out": out,
        }),
    )?;
    let (name, text) = match format {
        ExportFormat::Ply => ("export.ply", export_ply(&grid)),
        ExportFormat::Csv => ("export.csv", export_csv(&grid)),
    };
    let path = out.join(name);
    fs::write(&path, text).map_err(runtime)?;
    println!("wrote {} occupied voxels -> {}", grid.occupied_count(), path.display());
    Ok(())
}
