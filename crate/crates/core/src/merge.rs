//! Scene assembly and evaluation: merging trained blocks back into one
//! model, image quality metrics, and a synthetic scene generator used for
//! self-contained end-to-end runs.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffers::{DepthMap, ImageRgb};
use crate::gaussians::{concat, crop_to_bounds, GaussianSet};
use crate::losses::ssim;
use crate::partition::BlockPlan;
use crate::render::{render, render_oracle, Pose};
use crate::sfm::{CameraIntrinsics, SparseModel, SparsePoint, ViewRecord};
use crate::train::TrainView;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("trained blocks {got:?} do not match the plan's trainable blocks {expected:?}")]
    PlanMismatch { expected: Vec<u32>, got: Vec<u32> },
    #[error("duplicate result for block {0}")]
    DuplicateBlock(u32),
}

/// Merges per-block results into a single scene set.
///
/// Auxiliary Gaussians must already be excluded (each entry is a block's
/// own set). Every primitive is re-cropped to its block's ground-plane
/// bounds so that anything that drifted across a block border during
/// optimization is dropped rather than duplicated; blocks are concatenated
/// in ascending block id. The set of supplied ids must match the plan's
/// trainable (view-assigned) blocks exactly.
pub fn merge_blocks(
    plan: &BlockPlan,
    results: &[(u32, GaussianSet)],
) -> Result<GaussianSet, MergeError> {
    let expected: Vec<u32> = plan
        .blocks
        .iter()
        .filter(|b| !b.assigned_view_ids.is_empty())
        .map(|b| b.block_id)
        .collect();
    let mut got: Vec<u32> = Vec::new();
    let mut seen = BTreeSet::new();
    for (id, _) in results {
        if !seen.insert(*id) {
            return Err(MergeError::DuplicateBlock(*id));
        }
        got.push(*id);
    }
    got.sort_unstable();
    if got != expected {
        return Err(MergeError::PlanMismatch { expected, got });
    }

    let mut sorted: Vec<&(u32, GaussianSet)> = results.iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    let cropped: Vec<GaussianSet> = sorted
        .iter()
        .map(|(id, set)| {
            let block = plan.blocks.iter().find(|b| b.block_id == *id).unwrap();
            crop_to_bounds(set, &block.bounds, &plan.alignment)
        })
        .collect();
    let refs: Vec<&GaussianSet> = cropped.iter().collect();
    Ok(concat(&refs))
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB over all pixel channels, capped at 100.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> f64 {
    assert_eq!(a.width, b.width);
    assert_eq!(a.height, b.height);
    let n = a.data.len() as f64 * 3.0;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(p, q)| (p - q).norm_squared())
        .sum::<f64>()
        / n;
    if mse <= 1e-10 {
        100.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(100.0)
    }
}

/// Mean SSIM metric (same windowing as the training loss).
pub fn ssim_metric(a: &ImageRgb, b: &ImageRgb) -> f64 {
    ssim(a, b).expect("dimension mismatch").value
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalViewReport {
    pub view_id: u32,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub views: Vec<EvalViewReport>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Renders the model from each evaluation view and scores it against the
/// ground truth.
pub fn evaluate(
    gaussians: &GaussianSet,
    views: &[(u32, CameraIntrinsics, Pose, ImageRgb)],
    background: Vector3<f64>,
) -> EvalReport {
    let mut reports = Vec::new();
    for (view_id, cam, pose, gt) in views {
        let rendered = render(&[gaussians], cam, pose, background).color_image();
        reports.push(EvalViewReport {
            view_id: *view_id,
            psnr: psnr(&rendered, gt),
            ssim: ssim_metric(&rendered, gt),
        });
    }
    let n = reports.len().max(1) as f64;
    let mean_psnr = reports.iter().map(|r| r.psnr).sum::<f64>() / n;
    let mean_ssim = reports.iter().map(|r| r.ssim).sum::<f64>() / n;
    EvalReport { views: reports, mean_psnr, mean_ssim }
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_gaussians: usize,
    pub n_views: usize,
    pub width: u32,
    pub height: u32,
    /// Fraction of Gaussians placed in the denser (x > 0) half.
    pub dense_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 150,
            n_views: 24,
            width: 64,
            height: 64,
            dense_fraction: 0.75,
            seed: 7,
        }
    }
}

pub struct SyntheticScene {
    /// Ground-truth Gaussian soup the images were rendered from.
    pub ground_truth: GaussianSet,
    /// Derived structure-from-motion model (points at the Gaussian centers).
    pub model: SparseModel,
    /// Per-view ground truth: image plus an exact depth prior.
    pub views: Vec<TrainView>,
}

/// Builds a deterministic boxed Gaussian soup with a density asymmetry
/// between the two x halves, a camera ring looking at its center, rendered
/// ground-truth images/depths, and a matching sparse model whose points are
/// the Gaussian centers.
pub fn generate_synthetic_scene(cfg: &SyntheticConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gt = GaussianSet::default();
    let n_dense = (cfg.n_gaussians as f64 * cfg.dense_fraction).round() as usize;
    for i in 0..cfg.n_gaussians {
        let x = if i < n_dense { rng.gen_range(0.0..1.0) } else { rng.gen_range(-1.0..0.0) };
        let pos = Vector3::new(x, rng.gen_range(0.05..0.6), rng.gen_range(-0.7..0.7));
        let q = [
            rng.gen_range(-1.0..1.0f64),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        ];
        let log_s = Vector3::new(
            rng.gen_range(0.03f64..0.09).ln(),
            rng.gen_range(0.03f64..0.09).ln(),
            rng.gen_range(0.03f64..0.09).ln(),
        );
        let opacity = crate::gaussians::logit(rng.gen_range(0.6..0.95));
        let color = Vector3::new(rng.gen(), rng.gen(), rng.gen());
        gt.push(pos, q, log_s, opacity, color);
    }
    gt.normalize_rotations();

    let cam = CameraIntrinsics {
        width: cfg.width,
        height: cfg.height,
        fx: cfg.width as f64,
        fy: cfg.width as f64,
        cx: (cfg.width as f64 - 1.0) / 2.0,
        cy: (cfg.height as f64 - 1.0) / 2.0,
    };
    let mut views = Vec::new();
    let mut model = SparseModel::default();
    model.cameras.insert(1, cam.clone());

    // Two interleaved camera rings, one sweeping each x half, so views
    // specialize spatially the way block-based capture does: even indices
    // orbit the denser (x > 0) half, odd indices the sparser one.
    for v in 0..cfg.n_views {
        let half = if v % 2 == 0 { 1.0 } else { -1.0 };
        let ring_size = (cfg.n_views / 2 + cfg.n_views % 2).max(1);
        let angle = 2.0 * std::f64::consts::PI * (v / 2) as f64 / ring_size as f64;
        let target = Vector3::new(0.5 * half, 0.2, 0.0);
        let center = target + Vector3::new(0.9 * angle.cos(), 1.6, 0.9 * angle.sin());
        let pose = look_at(center, target);
        let view_id = v as u32 + 1;

        // ground truth comes from the reference renderer on purpose: the
        // pipeline under test never touches these pixels
        let rendered = render_oracle(&[&gt], &cam, &pose, Vector3::zeros());
        let image = rendered.color_image();
        let depth_data: Vec<f64> = rendered
            .depth
            .iter()
            .zip(&rendered.accum_alpha)
            .map(|(&d, &a)| if a >= 0.5 && d > 0.0 { d / a } else { f64::NAN })
            .collect();
        let prior =
            DepthMap { width: cfg.width as usize, height: cfg.height as usize, data: depth_data };

        views.push(TrainView {
            view_id,
            cam: cam.clone(),
            pose: pose.clone(),
            image,
            depth_prior: Some(prior),
        });
        model.views.insert(
            view_id,
            ViewRecord {
                view_id,
                rotation: pose.rotation,
                translation: pose.translation,
                intrinsics_id: 1,
                image_path: format!("view_{view_id:03}.png"),
                visible_point_ids: BTreeSet::new(),
            },
        );
    }

    // sparse points at the Gaussian centers, visible wherever they project
    // inside the image
    for (i, pos) in gt.positions.iter().enumerate() {
        let pid = i as u64 + 1;
        let mut observing = BTreeSet::new();
        for (vid, view) in &model.views {
            let pc = view.rotation * pos + view.translation;
            if pc.z <= crate::render::NEAR_PLANE {
                continue;
            }
            let u = cam.fx * pc.x / pc.z + cam.cx;
            let vpx = cam.fy * pc.y / pc.z + cam.cy;
            if u >= 0.0 && vpx >= 0.0 && u <= (cam.width - 1) as f64 && vpx <= (cam.height - 1) as f64
            {
                observing.insert(*vid);
            }
        }
        for vid in &observing {
            model.views.get_mut(vid).unwrap().visible_point_ids.insert(pid);
        }
        model.points.insert(
            pid,
            SparsePoint {
                point_id: pid,
                position: *pos,
                color: gt.colors[i].into(),
                observing_view_ids: observing,
            },
        );
    }

    SyntheticScene { ground_truth: gt, model, views }
}

/// Camera pose at `eye` looking toward `target`, with image "up" chosen so
/// the world +y axis points up in the image (y grows downward in pixels).
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> Pose {
    let fwd = (target - eye).normalize();
    let world_up = Vector3::y();
    let right = fwd.cross(&world_up).normalize();
    let down = fwd.cross(&right);
    let rotation =
        Matrix3::from_rows(&[right.transpose(), down.transpose(), fwd.transpose()]);
    Pose { rotation, translation: -rotation * eye }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::logit;
    use crate::partition::{assign_views, partition, PartitionConfig, UpAxis};

    fn demo_plan() -> BlockPlan {
        let scene = generate_synthetic_scene(&SyntheticConfig {
            n_gaussians: 120,
            n_views: 8,
            width: 32,
            height: 32,
            ..SyntheticConfig::default()
        });
        let cfg = PartitionConfig {
            block_point_threshold: 60,
            up_axis: UpAxis::PosY,
            ..PartitionConfig::default()
        };
        let plan = partition(&scene.model, &cfg).unwrap();
        let (plan, _) = assign_views(&scene.model, &plan, &cfg);
        plan
    }

    #[test]
    fn psnr_basics() {
        let a = ImageRgb::filled(4, 4, Vector3::repeat(0.5));
        assert_eq!(psnr(&a, &a.clone()), 100.0);
        let b = ImageRgb::filled(4, 4, Vector3::repeat(0.6));
        let expected = 10.0 * (1.0 / 0.01f64).log10();
        assert!((psnr(&a, &b) - expected).abs() < 1e-9);
    }

    #[test]
    fn merge_requires_exact_block_cover() {
        let plan = demo_plan();
        let trainable: Vec<u32> = plan
            .blocks
            .iter()
            .filter(|b| !b.assigned_view_ids.is_empty())
            .map(|b| b.block_id)
            .collect();
        assert!(trainable.len() >= 2, "expected a multi-block plan");
        let partial: Vec<(u32, GaussianSet)> =
            trainable.iter().skip(1).map(|&id| (id, GaussianSet::default())).collect();
        assert!(matches!(
            merge_blocks(&plan, &partial),
            Err(MergeError::PlanMismatch { .. })
        ));
        let dup: Vec<(u32, GaussianSet)> = trainable
            .iter()
            .chain(std::iter::once(&trainable[0]))
            .map(|&id| (id, GaussianSet::default()))
            .collect();
        assert!(matches!(merge_blocks(&plan, &dup), Err(MergeError::DuplicateBlock(_))));
    }

    #[test]
    fn merge_crops_drifted_primitives() {
        let plan = demo_plan();
        let trainable: Vec<u32> = plan
            .blocks
            .iter()
            .filter(|b| !b.assigned_view_ids.is_empty())
            .map(|b| b.block_id)
            .collect();
        let mut results: Vec<(u32, GaussianSet)> = Vec::new();
        for &id in &trainable {
            let block = plan.blocks.iter().find(|b| b.block_id == id).unwrap();
            let cx = 0.5 * (block.bounds.min[0] + block.bounds.max[0]);
            let cz = 0.5 * (block.bounds.min[1] + block.bounds.max[1]);
            let mut set = GaussianSet::default();
            // one primitive inside the block, one far outside every block
            set.push(
                Vector3::new(cx, 0.2, cz),
                [1.0, 0.0, 0.0, 0.0],
                Vector3::repeat(-3.0),
                logit(0.5),
                Vector3::x(),
            );
            set.push(
                Vector3::new(100.0, 0.2, 100.0),
                [1.0, 0.0, 0.0, 0.0],
                Vector3::repeat(-3.0),
                logit(0.5),
                Vector3::x(),
            );
            results.push((id, set));
        }
        let merged = merge_blocks(&plan, &results).unwrap();
        assert_eq!(merged.len(), trainable.len());
    }

    #[test]
    fn synthetic_scene_is_deterministic_and_asymmetric() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic_scene(&cfg);
        let b = generate_synthetic_scene(&cfg);
        assert_eq!(a.ground_truth.positions, b.ground_truth.positions);
        assert_eq!(a.views[0].image.data, b.views[0].image.data);
        let dense = a.ground_truth.positions.iter().filter(|p| p.x > 0.0).count();
        let sparse = a.ground_truth.positions.len() - dense;
        assert!(dense > 2 * sparse, "dense {dense} sparse {sparse}");
        a.model.check_visibility_symmetry().unwrap();
        assert_eq!(a.views.len(), 24);
        assert!(a.views.iter().all(|v| v.depth_prior.is_some()));
    }

    #[test]
    fn look_at_faces_target() {
        let eye = Vector3::new(2.0, 1.0, -1.5);
        let target = Vector3::new(0.0, 0.3, 0.0);
        let pose = look_at(eye, target);
        let pc = pose.rotation * target + pose.translation;
        assert!(pc.x.abs() < 1e-12 && pc.y.abs() < 1e-12);
        assert!((pc.z - (target - eye).norm()).abs() < 1e-12);
        // rotation is orthonormal
        let should_eye = pose.camera_center();
        assert!((should_eye - eye).norm() < 1e-12);
    }

    #[test]
    fn evaluate_scores_ground_truth_perfectly() {
        let scene = generate_synthetic_scene(&SyntheticConfig {
            n_gaussians: 40,
            n_views: 4,
            width: 24,
            height: 24,
            ..SyntheticConfig::default()
        });
        let views: Vec<(u32, CameraIntrinsics, Pose, ImageRgb)> = scene
            .views
            .iter()
            .map(|v| (v.view_id, v.cam.clone(), v.pose.clone(), v.image.clone()))
            .collect();
        let report = evaluate(&scene.ground_truth, &views, Vector3::zeros());
        assert_eq!(report.mean_psnr, 100.0);
        assert!((report.mean_ssim - 1.0).abs() < 1e-9);
    }
}
