//! Pipeline CLI: each reconstruction stage is a subcommand reading one TOML
//! config. Stages communicate only through files under `output_dir`, so any
//! stage can be rerun in isolation and per-block work can run in separate
//! worker processes.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use blocksplat::config::{load_config, PipelineConfig};
use blocksplat::gaussians::{init_block_gaussians, read_ply, write_ply, GaussianSet};
use blocksplat::merge::{evaluate, generate_synthetic_scene, merge_blocks, EvalReport};
use blocksplat::partition::{assign_views, partition, BlockPlan};
use blocksplat::render::{render, Pose};
use blocksplat::sfm::{
    load_depth_prior, load_image_rgb, parse_sparse_model, save_image_png, write_pfm,
    write_sparse_model, SparseFormat, SparseModel,
};
use blocksplat::train::{optimize_block, TrainView};
use blocksplat::ImageRgb;

#[derive(Parser)]
#[command(name = "blocksplat", version, about = "Block-based Gaussian splatting pipeline")]
struct Cli {
    /// Pipeline configuration file (TOML).
    #[arg(short, long, global = true, default_value = "blocksplat.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark scene into the configured inputs.
    Synth,
    /// Partition the sparse model and assign supervising views.
    Partition,
    /// Optimize one block or all blocks.
    Optimize {
        /// Optimize only this block id.
        #[arg(long, conflicts_with = "all")]
        block: Option<u32>,
        /// Optimize every trainable block.
        #[arg(long)]
        all: bool,
        /// Number of parallel worker processes (overrides the config).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Merge trained blocks into the scene model.
    Merge,
    /// Render the evaluation split (or an explicit pose file) to PNGs.
    Render {
        /// JSON pose file; defaults to the evaluation split.
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Score the merged model on the evaluation split.
    Eval,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match load_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Partition => cmd_partition(&cfg),
        Command::Optimize { block, all, workers } => {
            cmd_optimize(&cfg, &cli.config, block, all, workers)
        }
        Command::Merge => cmd_merge(&cfg),
        Command::Render { poses } => cmd_render(&cfg, poses.as_deref()),
        Command::Eval => cmd_eval(&cfg),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn verbose() -> bool {
    !matches!(std::env::var("BLOCKSPLAT_LOG").as_deref(), Ok("quiet"))
}

macro_rules! info {
    ($($t:tt)*) => { if verbose() { eprintln!($($t)*); } };
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &PipelineConfig) -> anyhow::Result<ExitCode> {
    let scene = generate_synthetic_scene(&cfg.synth);
    write_sparse_model(&scene.model, &cfg.sparse_dir, SparseFormat::Binary)?;
    std::fs::create_dir_all(&cfg.images_dir)?;
    if let Some(depth_dir) = &cfg.depth_dir {
        std::fs::create_dir_all(depth_dir)?;
    }
    for view in &scene.views {
        let name = &scene.model.views[&view.view_id].image_path;
        save_image_png(&view.image, &cfg.images_dir.join(name))?;
        if let (Some(depth_dir), Some(prior)) = (&cfg.depth_dir, &view.depth_prior) {
            let stem = Path::new(name).file_stem().unwrap().to_string_lossy();
            write_pfm(prior, &depth_dir.join(format!("{stem}.pfm")))?;
        }
    }
    info!(
        "synth: {} gaussians, {} views at {}x{}",
        scene.ground_truth.len(),
        scene.views.len(),
        cfg.synth.width,
        cfg.synth.height
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// partition
// ---------------------------------------------------------------------------

fn cmd_partition(cfg: &PipelineConfig) -> anyhow::Result<ExitCode> {
    let model = parse_sparse_model(&cfg.sparse_dir, SparseFormat::Auto)?;
    let plan = partition(&model, &cfg.partition)?;
    let (plan, _scores) = assign_views(&model, &plan, &cfg.partition);
    std::fs::create_dir_all(&cfg.output_dir)?;
    let json = serde_json::to_string_pretty(&plan)?;
    std::fs::write(cfg.blockplan_path(), json)?;

    let n = plan.blocks.len();
    let views: Vec<usize> = plan.blocks.iter().map(|b| b.assigned_view_ids.len()).collect();
    let pts: Vec<usize> = plan.blocks.iter().map(|b| b.point_count).collect();
    info!(
        "partition: {} blocks | views mean {:.1} max {} | points mean {:.1} max {}",
        n,
        views.iter().sum::<usize>() as f64 / n as f64,
        views.iter().max().unwrap_or(&0),
        pts.iter().sum::<usize>() as f64 / n as f64,
        pts.iter().max().unwrap_or(&0),
    );
    for id in blocksplat::partition::zero_view_blocks(&plan) {
        info!("partition: block {id} has no supervising views and will be skipped");
    }
    Ok(ExitCode::SUCCESS)
}

fn load_plan(cfg: &PipelineConfig) -> anyhow::Result<BlockPlan> {
    let text = std::fs::read_to_string(cfg.blockplan_path())
        .map_err(|e| anyhow::anyhow!("cannot read {:?} (run partition first): {e}", cfg.blockplan_path()))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// optimize
// ---------------------------------------------------------------------------

fn trainable_block_ids(plan: &BlockPlan) -> Vec<u32> {
    plan.blocks
        .iter()
        .filter(|b| !b.assigned_view_ids.is_empty())
        .map(|b| b.block_id)
        .collect()
}

/// Loads the training views for one block: its assigned views minus the
/// evaluation split, with images and optional depth priors.
fn load_block_views(
    cfg: &PipelineConfig,
    model: &SparseModel,
    assigned: &[u32],
) -> anyhow::Result<Vec<TrainView>> {
    let all_ids: Vec<u32> = model.views.keys().copied().collect();
    let (train_ids, _) = blocksplat::config::split_views(&all_ids, cfg.eval_every_kth);
    let mut views = Vec::new();
    for &id in assigned {
        if !train_ids.contains(&id) {
            continue;
        }
        let view = &model.views[&id];
        let cam = &model.cameras[&view.intrinsics_id];
        let image = load_image_rgb(&cfg.images_dir.join(&view.image_path))?;
        let depth_prior = match &cfg.depth_dir {
            Some(dir) => {
                let stem = Path::new(&view.image_path)
                    .file_stem()
                    .unwrap()
                    .to_string_lossy()
                    .to_string();
                let pfm = dir.join(format!("{stem}.pfm"));
                let png = dir.join(format!("{stem}.png"));
                let path = if pfm.exists() {
                    Some(pfm)
                } else if png.exists() {
                    Some(png)
                } else {
                    None
                };
                match path {
                    Some(p) => Some(load_depth_prior(&p, view, cam)?.depth),
                    None => None,
                }
            }
            None => None,
        };
        views.push(TrainView {
            view_id: id,
            cam: cam.clone(),
            pose: Pose { rotation: view.rotation, translation: view.translation },
            image,
            depth_prior,
        });
    }
    Ok(views)
}

fn optimize_single(cfg: &PipelineConfig, plan: &BlockPlan, block_id: u32) -> anyhow::Result<()> {
    let model = parse_sparse_model(&cfg.sparse_dir, SparseFormat::Auto)?;
    let block = plan
        .blocks
        .iter()
        .find(|b| b.block_id == block_id)
        .ok_or_else(|| anyhow::anyhow!("block {block_id} not in plan"))?;
    let views = load_block_views(cfg, &model, &block.assigned_view_ids)?;
    let mut state = init_block_gaussians(&model, block, plan)?;

    let mut train_cfg = cfg.train.clone();
    // per-block seed: blocks must be reproducible independently of sibling
    // order and worker layout
    train_cfg.rng_seed = cfg.train.rng_seed ^ u64::from(block_id);

    let start = std::time::Instant::now();
    let outcome = optimize_block(&mut state, &views, &train_cfg)?;
    let wall = start.elapsed();

    let dir = cfg.block_dir(block_id);
    std::fs::create_dir_all(&dir)?;
    write_ply(&state.block, &dir.join("point_cloud.ply"))?;
    let mut log = String::new();
    for rec in &outcome.records {
        log.push_str(&serde_json::to_string(rec)?);
        log.push('\n');
    }
    log.push_str(&serde_json::to_string(
        &serde_json::json!({"wall_time_ms": wall.as_millis() as u64}),
    )?);
    log.push('\n');
    std::fs::write(dir.join("train_log.jsonl"), log)?;
    info!(
        "optimize: block {block_id} -> {} gaussians, final loss {:.5}, {:.1}s",
        state.block.len(),
        outcome.final_loss,
        wall.as_secs_f64()
    );
    Ok(())
}

fn cmd_optimize(
    cfg: &PipelineConfig,
    config_path: &Path,
    block: Option<u32>,
    all: bool,
    workers: Option<usize>,
) -> anyhow::Result<ExitCode> {
    let plan = load_plan(cfg)?;
    let trainable = trainable_block_ids(&plan);

    if let Some(id) = block {
        if !trainable.contains(&id) {
            eprintln!("block {id} is not a trainable block (available: {trainable:?})");
            return Ok(ExitCode::from(2));
        }
        optimize_single(cfg, &plan, id)?;
        return Ok(ExitCode::SUCCESS);
    }
    if !all {
        eprintln!("optimize requires --block <id> or --all");
        return Ok(ExitCode::from(2));
    }

    let workers = workers.unwrap_or(cfg.parallel_workers).max(1);
    if workers == 1 {
        for &id in &trainable {
            optimize_single(cfg, &plan, id)?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    // worker processes: each block runs in its own isolated process; a
    // failure is reported per block and the whole run exits nonzero
    let exe = std::env::current_exe()?;
    let mut pending: std::collections::VecDeque<u32> = trainable.iter().copied().collect();
    let mut running: Vec<(u32, std::process::Child)> = Vec::new();
    let mut failed: Vec<u32> = Vec::new();
    loop {
        while running.len() < workers {
            let Some(id) = pending.pop_front() else { break };
            let child = std::process::Command::new(&exe)
                .arg("--config")
                .arg(config_path)
                .arg("optimize")
                .arg("--block")
                .arg(id.to_string())
                .spawn()?;
            running.push((id, child));
        }
        if running.is_empty() {
            break;
        }
        let (id, mut child) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            eprintln!("optimize: block {id} worker failed with {status}");
            failed.push(id);
        }
    }
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("optimize: {} block(s) failed: {failed:?}", failed.len());
        Ok(ExitCode::from(1))
    }
}

// ---------------------------------------------------------------------------
// merge
// ---------------------------------------------------------------------------

fn cmd_merge(cfg: &PipelineConfig) -> anyhow::Result<ExitCode> {
    let plan = load_plan(cfg)?;
    let mut results: Vec<(u32, GaussianSet)> = Vec::new();
    for id in trainable_block_ids(&plan) {
        let path = cfg.block_dir(id).join("point_cloud.ply");
        let set = read_ply(&path)
            .map_err(|e| anyhow::anyhow!("cannot read {path:?} (run optimize first): {e}"))?;
        results.push((id, set));
    }
    let merged = merge_blocks(&plan, &results)?;
    let scene_path = cfg.scene_ply_path();
    std::fs::create_dir_all(scene_path.parent().unwrap())?;
    write_ply(&merged, &scene_path)?;
    info!("merge: {} blocks -> {} gaussians", results.len(), merged.len());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// render / eval
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct PoseRecord {
    name: String,
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
    camera_id: u32,
}

fn eval_views(
    cfg: &PipelineConfig,
    model: &SparseModel,
) -> anyhow::Result<Vec<(u32, blocksplat::sfm::CameraIntrinsics, Pose, ImageRgb)>> {
    let all_ids: Vec<u32> = model.views.keys().copied().collect();
    let (_, eval_ids) = blocksplat::config::split_views(&all_ids, cfg.eval_every_kth);
    let mut out = Vec::new();
    for id in eval_ids {
        let view = &model.views[&id];
        let cam = model.cameras[&view.intrinsics_id].clone();
        let gt = load_image_rgb(&cfg.images_dir.join(&view.image_path))?;
        let pose = Pose { rotation: view.rotation, translation: view.translation };
        out.push((id, cam, pose, gt));
    }
    Ok(out)
}

fn cmd_render(cfg: &PipelineConfig, poses: Option<&Path>) -> anyhow::Result<ExitCode> {
    let scene = read_ply(&cfg.scene_ply_path())
        .map_err(|e| anyhow::anyhow!("cannot read merged scene (run merge first): {e}"))?;
    let model = parse_sparse_model(&cfg.sparse_dir, SparseFormat::Auto)?;
    let bg = Vector3::new(cfg.train.background[0], cfg.train.background[1], cfg.train.background[2]);
    let out_dir = cfg.output_dir.join("renders");
    std::fs::create_dir_all(&out_dir)?;

    let jobs: Vec<(String, blocksplat::sfm::CameraIntrinsics, Pose)> = match poses {
        None => eval_views(cfg, &model)?
            .into_iter()
            .map(|(id, cam, pose, _)| (format!("view_{id:03}"), cam, pose))
            .collect(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("cannot read pose file {path:?}: {e}"))?;
            let records: Vec<PoseRecord> = match serde_json::from_str(&text) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("malformed pose file {path:?}: {e}");
                    return Ok(ExitCode::from(2));
                }
            };
            let mut jobs = Vec::new();
            for r in records {
                let Some(cam) = model.cameras.get(&r.camera_id) else {
                    eprintln!("pose file references unknown camera {}", r.camera_id);
                    return Ok(ExitCode::from(2));
                };
                let rotation = Matrix3::from_fn(|i, j| r.rotation[i][j]);
                let translation = Vector3::from_column_slice(&r.translation);
                jobs.push((r.name, cam.clone(), Pose { rotation, translation }));
            }
            jobs
        }
    };

    for (name, cam, pose) in jobs {
        let img = render(&[&scene], &cam, &pose, bg).color_image();
        save_image_png(&img, &out_dir.join(format!("{name}.png")))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cfg: &PipelineConfig) -> anyhow::Result<ExitCode> {
    let scene = read_ply(&cfg.scene_ply_path())
        .map_err(|e| anyhow::anyhow!("cannot read merged scene (run merge first): {e}"))?;
    let model = parse_sparse_model(&cfg.sparse_dir, SparseFormat::Auto)?;
    let views = eval_views(cfg, &model)?;
    let bg = Vector3::new(cfg.train.background[0], cfg.train.background[1], cfg.train.background[2]);

    let start = std::time::Instant::now();
    let report: EvalReport = evaluate(&scene, &views, bg);
    let wall = start.elapsed();

    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.eval_report_path(), serde_json::to_string_pretty(&report)?)?;
    // wall time is nondeterministic by nature, so it lives in a sidecar to
    // keep eval_report.json byte-stable across reruns
    std::fs::write(
        cfg.output_dir.join("eval_timing.json"),
        serde_json::to_string_pretty(
            &serde_json::json!({"render_wall_time_ms": wall.as_millis() as u64}),
        )?,
    )?;
    info!(
        "eval: {} views | PSNR {:.2} dB | SSIM {:.4}",
        report.views.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(ExitCode::SUCCESS)
}
