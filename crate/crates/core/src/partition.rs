//! Content-aware scene partitioning: ground-plane alignment, region of
//! interest, recursive binary splitting by sparse-point count, and
//! view-to-block assignment.
//!
//! All coordinates below the alignment step live in the aligned frame where
//! +y is up and blocks are rectangles on the x-z ground plane.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sfm::SparseModel;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("empty region of interest")]
    EmptyRoi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpAxis {
    Auto,
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoiSpec {
    Auto,
    Manual(Rect),
}

/// Axis-aligned rectangle on the ground plane, axes (x, z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn extent(&self) -> [f64; 2] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    pub fn area(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1]
    }

    pub fn diagonal(&self) -> f64 {
        let e = self.extent();
        (e[0] * e[0] + e[1] * e[1]).sqrt()
    }

    /// Inclusive containment on all edges.
    pub fn contains(&self, xz: [f64; 2]) -> bool {
        xz[0] >= self.min[0] && xz[0] <= self.max[0] && xz[1] >= self.min[1] && xz[1] <= self.max[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub max_depth: u32,
    pub block_point_threshold: usize,
    pub assign_ratio_threshold: f64,
    pub roi: RoiSpec,
    pub up_axis: UpAxis,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            max_depth: 8,
            block_point_threshold: 300,
            assign_ratio_threshold: 0.3,
            roi: RoiSpec::Auto,
            up_axis: UpAxis::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub block_id: u32,
    pub bounds: Rect,
    pub depth: u32,
    pub point_count: usize,
    /// Supervising views, sorted by id. Empty means the block is flagged.
    pub assigned_view_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    X,
    Z,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split { axis: Axis, coord: f64, lo: usize, hi: usize },
    Leaf { block_index: usize },
}

/// Output of the partitioning stage; the contract between CLI stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub alignment: Matrix3<f64>,
    pub roi: Rect,
    pub blocks: Vec<Block>,
    pub tree: Vec<TreeNode>,
}

impl BlockPlan {
    /// Resolves the unique leaf owning a ground-plane position. Points on an
    /// internal split boundary belong to the lower-coordinate child.
    pub fn leaf_for(&self, xz: [f64; 2]) -> Option<usize> {
        if !self.roi.contains(xz) {
            return None;
        }
        let mut node = 0usize;
        loop {
            match &self.tree[node] {
                TreeNode::Leaf { block_index } => return Some(*block_index),
                TreeNode::Split { axis, coord, lo, hi } => {
                    let c = match axis {
                        Axis::X => xz[0],
                        Axis::Z => xz[1],
                    };
                    node = if c <= *coord { *lo } else { *hi };
                }
            }
        }
    }

    pub fn aligned_xz(&self, position: &Vector3<f64>) -> [f64; 2] {
        let p = self.alignment * position;
        [p.x, p.z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewBlockScore {
    pub view_id: u32,
    pub block_id: u32,
    pub in_block_count: usize,
    pub total_visible: usize,
    pub ratio: f64,
}

fn axis_rotation(axis: UpAxis) -> Option<Matrix3<f64>> {
    // Fixed permutation rotations mapping the chosen up axis onto +y.
    let m = match axis {
        UpAxis::Auto => return None,
        UpAxis::PosY => Matrix3::identity(),
        UpAxis::NegY => Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
        UpAxis::PosZ => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0),
        UpAxis::NegZ => Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0),
        UpAxis::PosX => Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
        UpAxis::NegX => Matrix3::new(0.0, 0.0, -1.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0),
    };
    Some(m)
}

/// RANSAC plane fit; returns the plane normal with its largest-magnitude
/// component made positive (canonical orientation).
fn ransac_plane_normal(
    points: &[Vector3<f64>],
    threshold: f64,
    iterations: u32,
    rng: &mut ChaCha8Rng,
) -> Option<Vector3<f64>> {
    if points.len() < 3 {
        return None;
    }
    let mut best_inliers = 0usize;
    let mut best_normal: Option<Vector3<f64>> = None;
    for _ in 0..iterations {
        let i = rng.gen_range(0..points.len());
        let j = rng.gen_range(0..points.len());
        let k = rng.gen_range(0..points.len());
        let n = (points[j] - points[i]).cross(&(points[k] - points[i]));
        let norm = n.norm();
        if norm < 1e-12 {
            continue;
        }
        let n = n / norm;
        let d = n.dot(&points[i]);
        let inliers = points.iter().filter(|p| (n.dot(p) - d).abs() <= threshold).count();
        if inliers > best_inliers {
            best_inliers = inliers;
            best_normal = Some(n);
        }
    }
    best_normal.map(|mut n| {
        let amax = (0..3).max_by(|&a, &b| n[a].abs().partial_cmp(&n[b].abs()).unwrap()).unwrap();
        if n[amax] < 0.0 {
            n = -n;
        }
        n
    })
}

/// Estimates the rotation aligning the ground-plane normal with +y.
///
/// Explicit `up_axis` picks the exact axis permutation; auto mode fits a
/// plane with seeded RANSAC (two passes, the second restricted to the
/// lowest-elevation 30% of points along the first normal estimate).
pub fn estimate_alignment(
    model: &SparseModel,
    cfg: &PartitionConfig,
) -> Result<Matrix3<f64>, PartitionError> {
    if let Some(m) = axis_rotation(cfg.up_axis) {
        return Ok(m);
    }
    let points: Vec<Vector3<f64>> = model.points.values().map(|p| p.position).collect();
    if points.len() < 3 {
        return Err(PartitionError::DegenerateGeometry("fewer than 3 points".into()));
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in &points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let diag = (hi - lo).norm();
    if diag < 1e-12 {
        return Err(PartitionError::DegenerateGeometry("all points coincident".into()));
    }
    let threshold = 0.01 * diag;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9a17);
    let coarse = ransac_plane_normal(&points, threshold, 256, &mut rng)
        .ok_or_else(|| PartitionError::DegenerateGeometry("plane fit failed (collinear points)".into()))?;
    // Ground refinement: keep the lowest 30% of elevations along the coarse
    // normal and refit.
    let mut elevations: Vec<f64> = points.iter().map(|p| coarse.dot(p)).collect();
    elevations.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let cutoff = elevations[((points.len() as f64 * 0.3).ceil() as usize).clamp(2, points.len() - 1)];
    let low: Vec<Vector3<f64>> =
        points.iter().filter(|p| coarse.dot(p) <= cutoff).copied().collect();
    let normal = ransac_plane_normal(&low, threshold, 256, &mut rng).unwrap_or(coarse);
    let rot = Rotation3::rotation_between(&normal, &Vector3::y())
        .unwrap_or_else(Rotation3::identity);
    Ok(*rot.matrix())
}

/// Computes the ground-plane region of interest in the aligned frame.
/// Auto mode takes per-axis 2%..98% quantiles of the projected points.
pub fn compute_roi(
    model: &SparseModel,
    alignment: &Matrix3<f64>,
    cfg: &PartitionConfig,
) -> Result<Rect, PartitionError> {
    match &cfg.roi {
        RoiSpec::Manual(rect) => {
            if rect.area() <= 0.0 {
                return Err(PartitionError::EmptyRoi);
            }
            let inside = model
                .points
                .values()
                .any(|p| rect.contains({ let a = alignment * p.position; [a.x, a.z] }));
            if !inside {
                return Err(PartitionError::EmptyRoi);
            }
            Ok(*rect)
        }
        RoiSpec::Auto => {
            if model.points.is_empty() {
                return Err(PartitionError::EmptyRoi);
            }
            let mut xs = Vec::with_capacity(model.points.len());
            let mut zs = Vec::with_capacity(model.points.len());
            for p in model.points.values() {
                let a = alignment * p.position;
                xs.push(a.x);
                zs.push(a.z);
            }
            xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = xs.len();
            let lo_idx = ((0.02 * (n - 1) as f64).floor() as usize).min(n - 1);
            let hi_idx = ((0.98 * (n - 1) as f64).ceil() as usize).min(n - 1);
            let rect = Rect {
                min: [xs[lo_idx], zs[lo_idx]],
                max: [xs[hi_idx], zs[hi_idx]],
            };
            if rect.area() <= 0.0 {
                return Err(PartitionError::DegenerateGeometry("zero-area roi".into()));
            }
            Ok(rect)
        }
    }
}

/// Recursively partitions the region of interest into leaf blocks.
///
/// A node splits iff its point count exceeds the threshold and its depth is
/// below the cap; splits bisect the longer rectangle edge at its midpoint
/// (ties split along x). View assignment is performed by [`assign_views`].
pub fn partition(model: &SparseModel, cfg: &PartitionConfig) -> Result<BlockPlan, PartitionError> {
    let alignment = estimate_alignment(model, cfg)?;
    let roi = compute_roi(model, &alignment, cfg)?;
    if roi.area() <= 0.0 {
        return Err(PartitionError::EmptyRoi);
    }

    // In-roi points, ids sorted for determinism.
    let in_roi: Vec<[f64; 2]> = model
        .points
        .values()
        .map(|p| { let a = alignment * p.position; [a.x, a.z] })
        .filter(|xz| roi.contains(*xz))
        .collect();

    let mut tree = Vec::new();
    let mut blocks = Vec::new();
    build_tree(&mut tree, &mut blocks, roi, in_roi, 0, cfg);
    let mut plan = BlockPlan { alignment, roi, blocks, tree };
    // Stable block ids in tree (left-to-right) order.
    for (i, b) in plan.blocks.iter_mut().enumerate() {
        b.block_id = i as u32;
    }
    Ok(plan)
}

fn build_tree(
    tree: &mut Vec<TreeNode>,
    blocks: &mut Vec<Block>,
    bounds: Rect,
    points: Vec<[f64; 2]>,
    depth: u32,
    cfg: &PartitionConfig,
) -> usize {
    let node_index = tree.len();
    let n = points.len();
    if n > cfg.block_point_threshold && depth < cfg.max_depth {
        let ext = bounds.extent();
        // Longer edge wins; ties split along x.
        let axis = if ext[0] >= ext[1] { Axis::X } else { Axis::Z };
        let a = match axis {
            Axis::X => 0,
            Axis::Z => 1,
        };
        let mid = 0.5 * (bounds.min[a] + bounds.max[a]);
        let mut lo_bounds = bounds;
        lo_bounds.max[a] = mid;
        let mut hi_bounds = bounds;
        hi_bounds.min[a] = mid;
        // Boundary points go to the lower-coordinate child.
        let (lo_pts, hi_pts): (Vec<_>, Vec<_>) = points.into_iter().partition(|p| p[a] <= mid);
        tree.push(TreeNode::Split { axis, coord: mid, lo: 0, hi: 0 });
        let lo_child = build_tree(tree, blocks, lo_bounds, lo_pts, depth + 1, cfg);
        let hi_child = build_tree(tree, blocks, hi_bounds, hi_pts, depth + 1, cfg);
        if let TreeNode::Split { lo, hi, .. } = &mut tree[node_index] {
            *lo = lo_child;
            *hi = hi_child;
        }
    } else {
        let block_index = blocks.len();
        blocks.push(Block {
            block_id: block_index as u32,
            bounds,
            depth,
            point_count: n,
            assigned_view_ids: Vec::new(),
        });
        tree.push(TreeNode::Leaf { block_index });
    }
    node_index
}

/// Assigns supervising views to each leaf: a view joins a block when the
/// fraction of its visible track points inside the block reaches the ratio
/// threshold. Returns the filled plan plus the full score table.
pub fn assign_views(
    model: &SparseModel,
    plan: &BlockPlan,
    cfg: &PartitionConfig,
) -> (BlockPlan, Vec<ViewBlockScore>) {
    let mut plan = plan.clone();
    let mut scores = Vec::new();
    for block in plan.blocks.iter_mut() {
        block.assigned_view_ids.clear();
    }
    for view in model.views.values() {
        let total = view.visible_point_ids.len();
        if total == 0 {
            continue;
        }
        let mut counts = vec![0usize; plan.blocks.len()];
        for pid in &view.visible_point_ids {
            if let Some(point) = model.points.get(pid) {
                if let Some(leaf) = plan.leaf_for(plan.aligned_xz(&point.position)) {
                    counts[leaf] += 1;
                }
            }
        }
        for (leaf, &count) in counts.iter().enumerate() {
            let ratio = count as f64 / total as f64;
            scores.push(ViewBlockScore {
                view_id: view.view_id,
                block_id: plan.blocks[leaf].block_id,
                in_block_count: count,
                total_visible: total,
                ratio,
            });
            if ratio >= cfg.assign_ratio_threshold {
                plan.blocks[leaf].assigned_view_ids.push(view.view_id);
            }
        }
    }
    for block in plan.blocks.iter_mut() {
        block.assigned_view_ids.sort_unstable();
    }
    (plan, scores)
}

/// Blocks without any supervising view; flagged, not fatal.
pub fn zero_view_blocks(plan: &BlockPlan) -> Vec<u32> {
    plan.blocks
        .iter()
        .filter(|b| b.assigned_view_ids.is_empty())
        .map(|b| b.block_id)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sfm::{CameraIntrinsics, SparsePoint, ViewRecord};
    use std::collections::BTreeSet;

    fn model_from_points(points: Vec<Vector3<f64>>) -> SparseModel {
        let mut model = SparseModel::default();
        model.cameras.insert(
            0,
            CameraIntrinsics { width: 64, height: 64, fx: 50.0, fy: 50.0, cx: 32.0, cy: 32.0 },
        );
        let all_ids: BTreeSet<u64> = (0..points.len() as u64).collect();
        model.views.insert(
            0,
            ViewRecord {
                view_id: 0,
                intrinsics_id: 0,
                rotation: Matrix3::identity(),
                translation: Vector3::zeros(),
                image_path: "v0.png".into(),
                visible_point_ids: all_ids,
            },
        );
        for (i, p) in points.into_iter().enumerate() {
            model.points.insert(
                i as u64,
                SparsePoint {
                    point_id: i as u64,
                    position: p,
                    color: [0.5; 3],
                    observing_view_ids: [0].into_iter().collect(),
                },
            );
        }
        model
    }

    /// 32x32 grid of cell centers over [0,4]x[0,4] on the ground plane.
    fn grid_model() -> SparseModel {
        let mut pts = Vec::new();
        for i in 0..32 {
            for j in 0..32 {
                let x = (i as f64 + 0.5) * 4.0 / 32.0;
                let z = (j as f64 + 0.5) * 4.0 / 32.0;
                pts.push(Vector3::new(x, 0.0, z));
            }
        }
        model_from_points(pts)
    }

    fn grid_cfg() -> PartitionConfig {
        PartitionConfig {
            max_depth: 8,
            block_point_threshold: 300,
            assign_ratio_threshold: 0.3,
            roi: RoiSpec::Manual(Rect { min: [0.0, 0.0], max: [4.0, 4.0] }),
            up_axis: UpAxis::PosY,
        }
    }

    #[test]
    fn explicit_up_axis_rotations_are_exact() {
        let model = grid_model();
        let mut cfg = grid_cfg();
        cfg.up_axis = UpAxis::PosY;
        assert_eq!(estimate_alignment(&model, &cfg).unwrap(), Matrix3::identity());

        cfg.up_axis = UpAxis::PosZ;
        let rot = estimate_alignment(&model, &cfg).unwrap();
        // z maps to y
        assert!((rot * Vector3::z() - Vector3::y()).norm() < 1e-12);
        // proper rotation
        assert!((rot.determinant() - 1.0).abs() < 1e-12);
        for axis in [UpAxis::PosX, UpAxis::NegX, UpAxis::NegY, UpAxis::NegZ] {
            cfg.up_axis = axis;
            let rot = estimate_alignment(&model, &cfg).unwrap();
            assert!((rot.determinant() - 1.0).abs() < 1e-12);
            assert!((rot * rot.transpose() - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn auto_alignment_recovers_plane_normal() {
        // Points on z = 0 with tiny noise; +z should map to +y.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut pts = Vec::new();
        for _ in 0..200 {
            let x: f64 = rng.gen_range(-1.0..1.0);
            let y: f64 = rng.gen_range(-1.0..1.0);
            let noise: f64 = rng.gen_range(-1e-6..1e-6);
            pts.push(Vector3::new(x, y, noise));
        }
        let model = model_from_points(pts);
        let cfg = PartitionConfig { up_axis: UpAxis::Auto, ..grid_cfg() };
        let rot = estimate_alignment(&model, &cfg).unwrap();
        let mapped = rot * Vector3::z();
        let angle = mapped.dot(&Vector3::y()).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-3, "angle to +y was {angle}");
    }

    #[test]
    fn degenerate_geometry_is_detected() {
        let pts = (0..10).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        let model = model_from_points(pts);
        let cfg = PartitionConfig { up_axis: UpAxis::Auto, ..grid_cfg() };
        assert!(matches!(
            estimate_alignment(&model, &cfg),
            Err(PartitionError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn manual_roi_passes_through() {
        let model = grid_model();
        let cfg = grid_cfg();
        let roi = compute_roi(&model, &Matrix3::identity(), &cfg).unwrap();
        assert_eq!(roi, Rect { min: [0.0, 0.0], max: [4.0, 4.0] });
    }

    #[test]
    fn auto_roi_discards_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<Vector3<f64>> = (0..100)
            .map(|_| Vector3::new(rng.gen_range(0.0..1.0), 0.0, rng.gen_range(0.0..1.0)))
            .collect();
        pts.push(Vector3::new(1000.0, 0.0, 1000.0));
        let model = model_from_points(pts);
        let cfg = PartitionConfig { roi: RoiSpec::Auto, up_axis: UpAxis::PosY, ..grid_cfg() };
        let roi = compute_roi(&model, &Matrix3::identity(), &cfg).unwrap();
        assert!(roi.max[0] <= 1.0 && roi.max[1] <= 1.0);
        assert!(roi.min[0] >= 0.0 && roi.min[1] >= 0.0);
    }

    #[test]
    fn auto_roi_identical_points_degenerate() {
        let pts = vec![Vector3::new(1.0, 0.0, 1.0); 20];
        let model = model_from_points(pts);
        let cfg = PartitionConfig { roi: RoiSpec::Auto, up_axis: UpAxis::PosY, ..grid_cfg() };
        assert!(compute_roi(&model, &Matrix3::identity(), &cfg).is_err());
    }

    #[test]
    fn grid_partitions_into_four_equal_leaves() {
        let model = grid_model();
        let plan = partition(&model, &grid_cfg()).unwrap();
        assert_eq!(plan.blocks.len(), 4);
        for block in &plan.blocks {
            assert_eq!(block.point_count, 256);
            assert_eq!(block.depth, 2);
        }
    }

    #[test]
    fn small_cloud_stays_single_leaf() {
        let pts = (0..10).map(|i| Vector3::new(i as f64 * 0.3 + 0.1, 0.0, 1.0)).collect();
        let model = model_from_points(pts);
        let plan = partition(&model, &grid_cfg()).unwrap();
        assert_eq!(plan.blocks.len(), 1);
        assert_eq!(plan.blocks[0].depth, 0);
        assert_eq!(plan.blocks[0].point_count, 10);
    }

    #[test]
    fn depth_cap_governs_over_threshold() {
        let model = grid_model();
        let cfg = PartitionConfig { block_point_threshold: 1, max_depth: 1, ..grid_cfg() };
        let plan = partition(&model, &cfg).unwrap();
        assert_eq!(plan.blocks.len(), 2);
        for block in &plan.blocks {
            assert_eq!(block.point_count, 512);
            assert_eq!(block.depth, 1);
        }
    }

    #[test]
    fn assignment_threshold_rule() {
        // Single-leaf plan; every point visible in the view => ratio 1.0.
        let model = grid_model();
        let plan = partition(&model, &grid_cfg()).unwrap();
        let cfg = grid_cfg();
        let (filled, scores) = assign_views(&model, &plan, &cfg);
        // the one view lands in all four blocks at ratio 0.25 < 0.3
        assert!(filled.blocks.iter().all(|b| b.assigned_view_ids.is_empty()));
        assert_eq!(zero_view_blocks(&filled).len(), 4);
        assert!(scores.iter().all(|s| (s.ratio - 0.25).abs() < 1e-12));

        // lowering the threshold to 0.25 assigns it everywhere
        let cfg = PartitionConfig { assign_ratio_threshold: 0.25, ..grid_cfg() };
        let (filled, _) = assign_views(&model, &plan, &cfg);
        assert!(filled.blocks.iter().all(|b| b.assigned_view_ids == vec![0]));
    }

    #[test]
    fn plan_is_deterministic_and_conserves_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| Vector3::new(rng.gen_range(0.0..4.0), 0.0, rng.gen_range(0.0..4.0)))
            .collect();
        let model = model_from_points(pts);
        let cfg = PartitionConfig { block_point_threshold: 60, ..grid_cfg() };
        let plan_a = partition(&model, &cfg).unwrap();
        let plan_b = partition(&model, &cfg).unwrap();
        assert_eq!(plan_a, plan_b);
        let total: usize = plan_a.blocks.iter().map(|b| b.point_count).sum();
        assert_eq!(total, 500);
        assert!(plan_a.blocks.len() <= 1 << cfg.max_depth);
    }

    #[test]
    fn raising_threshold_never_adds_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pts: Vec<Vector3<f64>> = (0..800)
            .map(|_| Vector3::new(rng.gen_range(0.0..4.0), 0.0, rng.gen_range(0.0..4.0)))
            .collect();
        let model = model_from_points(pts);
        let mut last = usize::MAX;
        for threshold in [50, 100, 200, 400, 800] {
            let cfg = PartitionConfig { block_point_threshold: threshold, ..grid_cfg() };
            let n = partition(&model, &cfg).unwrap().blocks.len();
            assert!(n <= last);
            last = n;
        }
    }
}
