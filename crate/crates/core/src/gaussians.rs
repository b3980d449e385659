//! Gaussian primitive data model: columnar storage, initialization from
//! sparse points, spatial cropping/concatenation and splat-layout PLY IO.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::partition::{Block, BlockPlan, Rect};
use crate::sfm::SparseModel;

#[derive(Debug, Error)]
pub enum GaussianError {
    #[error("block {0} contains no in-bounds points")]
    EmptyBlock(u32),
    #[error("block {0} has no assigned views")]
    NoAssignedViews(u32),
}

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("unknown or missing attribute: {0}")]
    UnknownAttribute(String),
    #[error("truncated file")]
    TruncatedFile,
    #[error("malformed ply: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Columnar collection of Gaussian primitives.
///
/// Parameters are stored in the pre-activation domain: `log_scales` are the
/// per-axis log scales, `opacity_logits` the pre-sigmoid opacities.
/// Quaternions are `[w, x, y, z]` and kept unit-norm.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<Vector3<f64>>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<Vector3<f64>>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<Vector3<f64>>,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl GaussianSet {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            positions: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        rotation: [f64; 4],
        log_scale: Vector3<f64>,
        opacity_logit: f64,
        color: Vector3<f64>,
    ) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.colors.push(color);
    }

    /// Opacity after sigmoid activation.
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Rotation matrix of the (normalized) stored quaternion.
    pub fn rotation_matrix(&self, i: usize) -> Matrix3<f64> {
        let [w, x, y, z] = self.rotations[i];
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    pub fn normalize_rotations(&mut self) {
        for q in self.rotations.iter_mut() {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// Retains the primitives selected by `keep`, preserving order.
    pub fn retain_by(&mut self, keep: &[bool]) {
        let mut idx = 0;
        self.positions.retain(|_| { let k = keep[idx]; idx += 1; k });
        idx = 0;
        self.rotations.retain(|_| { let k = keep[idx]; idx += 1; k });
        idx = 0;
        self.log_scales.retain(|_| { let k = keep[idx]; idx += 1; k });
        idx = 0;
        self.opacity_logits.retain(|_| { let k = keep[idx]; idx += 1; k });
        idx = 0;
        self.colors.retain(|_| { let k = keep[idx]; idx += 1; k });
    }
}

/// Retains primitives whose center projects inside `bounds` on the ground
/// plane (aligned frame given by `alignment`); order preserved.
pub fn crop_to_bounds(set: &GaussianSet, bounds: &Rect, alignment: &Matrix3<f64>) -> GaussianSet {
    let mut out = GaussianSet::default();
    for i in 0..set.len() {
        let a = alignment * set.positions[i];
        if bounds.contains([a.x, a.z]) {
            out.push(
                set.positions[i],
                set.rotations[i],
                set.log_scales[i],
                set.opacity_logits[i],
                set.colors[i],
            );
        }
    }
    out
}

/// Column-wise concatenation in list order.
pub fn concat(sets: &[&GaussianSet]) -> GaussianSet {
    let n: usize = sets.iter().map(|s| s.len()).sum();
    let mut out = GaussianSet::with_capacity(n);
    for set in sets {
        out.positions.extend_from_slice(&set.positions);
        out.rotations.extend_from_slice(&set.rotations);
        out.log_scales.extend_from_slice(&set.log_scales);
        out.opacity_logits.extend_from_slice(&set.opacity_logits);
        out.colors.extend_from_slice(&set.colors);
    }
    out
}

/// The trainable pair for one block: block Gaussians initialized from
/// in-bounds points and auxiliary Gaussians covering out-of-block content
/// seen by the block's supervising views.
#[derive(Debug, Clone)]
pub struct BlockGaussianState {
    pub block_id: u32,
    pub block: GaussianSet,
    pub auxiliary: GaussianSet,
    pub block_bounds: Rect,
    /// Ground-plane alignment rotation of the owning plan.
    pub alignment: Matrix3<f64>,
}

const INIT_OPACITY: f64 = 0.1;

/// Initializes the block/auxiliary split for one leaf.
///
/// Initial scale is the log of the mean distance to the 3 nearest
/// initialization neighbors (isotropic); isolated points fall back to 1% of
/// the block diagonal.
pub fn init_block_gaussians(
    model: &SparseModel,
    block: &Block,
    plan: &BlockPlan,
) -> Result<BlockGaussianState, GaussianError> {
    if block.assigned_view_ids.is_empty() {
        return Err(GaussianError::NoAssignedViews(block.block_id));
    }
    let assigned: std::collections::BTreeSet<u32> =
        block.assigned_view_ids.iter().copied().collect();

    let mut block_pts = Vec::new();
    let mut aux_pts = Vec::new();
    for point in model.points.values() {
        let inside = block.bounds.contains(plan.aligned_xz(&point.position));
        if inside {
            block_pts.push(point);
        } else if point.observing_view_ids.iter().any(|v| assigned.contains(v)) {
            aux_pts.push(point);
        }
    }
    if block_pts.is_empty() {
        return Err(GaussianError::EmptyBlock(block.block_id));
    }

    let all_positions: Vec<Vector3<f64>> =
        block_pts.iter().chain(aux_pts.iter()).map(|p| p.position).collect();
    let fallback = 0.01 * block.bounds.diagonal();
    let opacity_logit = logit(INIT_OPACITY);

    let build = |points: &[&crate::sfm::SparsePoint]| {
        let mut set = GaussianSet::with_capacity(points.len());
        for p in points {
            let scale = mean_knn_distance(&p.position, &all_positions, 3).unwrap_or(fallback);
            let scale = if scale > 0.0 { scale } else { fallback };
            set.push(
                p.position,
                [1.0, 0.0, 0.0, 0.0],
                Vector3::repeat(scale.ln()),
                opacity_logit,
                Vector3::new(p.color[0], p.color[1], p.color[2]),
            );
        }
        set
    };
    let block_set = build(&block_pts);
    let aux_set = build(&aux_pts);
    Ok(BlockGaussianState {
        block_id: block.block_id,
        block: block_set,
        auxiliary: aux_set,
        block_bounds: block.bounds,
        alignment: plan.alignment,
    })
}

/// Mean distance to the k nearest strictly-distinct neighbors, or None when
/// no other point exists.
fn mean_knn_distance(p: &Vector3<f64>, all: &[Vector3<f64>], k: usize) -> Option<f64> {
    let mut dists: Vec<f64> = all
        .iter()
        .map(|q| (q - p).norm())
        .filter(|d| *d > 0.0)
        .collect();
    if dists.is_empty() {
        return None;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = k.min(dists.len());
    Some(dists[..k].iter().sum::<f64>() / k as f64)
}

// ---------------------------------------------------------------------------
// PLY persistence (de facto splat layout, binary little-endian, f32 columns)
// ---------------------------------------------------------------------------

const ATTR_ORDER: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

pub fn write_ply(set: &GaussianSet, path: &Path) -> Result<(), PlyError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n",
        set.len()
    )?;
    for name in ATTR_ORDER {
        writeln!(w, "property float {name}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..set.len() {
        let p = set.positions[i];
        let c = set.colors[i];
        let s = set.log_scales[i];
        let q = set.rotations[i];
        let values: [f64; 14] = [
            p.x, p.y, p.z, c.x, c.y, c.z, set.opacity_logits[i], s.x, s.y, s.z, q[0], q[1], q[2],
            q[3],
        ];
        for v in values {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<GaussianSet, PlyError> {
    let file = File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let mut read_line = |r: &mut BufReader<File>| -> Result<String, PlyError> {
        line.clear();
        let n = r.read_line(&mut line)?;
        if n == 0 {
            return Err(PlyError::TruncatedFile);
        }
        Ok(line.trim_end().to_string())
    };

    if read_line(&mut reader)? != "ply" {
        return Err(PlyError::Malformed("missing ply magic".into()));
    }
    if read_line(&mut reader)? != "format binary_little_endian 1.0" {
        return Err(PlyError::Malformed("expected binary little-endian 1.0".into()));
    }
    let mut n_vertices: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    loop {
        let l = read_line(&mut reader)?;
        if l == "end_header" {
            break;
        }
        if l.starts_with("comment") {
            continue;
        }
        if let Some(rest) = l.strip_prefix("element vertex ") {
            n_vertices =
                Some(rest.trim().parse().map_err(|_| PlyError::Malformed("bad vertex count".into()))?);
        } else if l.starts_with("element ") {
            return Err(PlyError::Malformed(format!("unexpected element: {l}")));
        } else if let Some(rest) = l.strip_prefix("property float ") {
            properties.push(rest.trim().to_string());
        } else if l.starts_with("property ") {
            return Err(PlyError::Malformed(format!("only float properties supported: {l}")));
        }
    }
    let n = n_vertices.ok_or_else(|| PlyError::Malformed("missing vertex element".into()))?;

    // Attribute schema must match the splat layout exactly.
    for p in &properties {
        if !ATTR_ORDER.contains(&p.as_str()) {
            return Err(PlyError::UnknownAttribute(p.clone()));
        }
    }
    for required in ATTR_ORDER {
        if !properties.iter().any(|p| p == required) {
            return Err(PlyError::UnknownAttribute(required.to_string()));
        }
    }
    let column_of: Vec<usize> = properties
        .iter()
        .map(|p| ATTR_ORDER.iter().position(|a| a == p).unwrap())
        .collect();

    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() < n * ATTR_ORDER.len() * 4 {
        return Err(PlyError::TruncatedFile);
    }

    let mut set = GaussianSet::with_capacity(n);
    for i in 0..n {
        let mut values = [0.0f64; 14];
        for (j, &col) in column_of.iter().enumerate() {
            let off = (i * ATTR_ORDER.len() + j) * 4;
            let raw: [u8; 4] = payload[off..off + 4].try_into().unwrap();
            values[col] = f32::from_le_bytes(raw) as f64;
        }
        set.push(
            Vector3::new(values[0], values[1], values[2]),
            [values[10], values[11], values[12], values[13]],
            Vector3::new(values[7], values[8], values[9]),
            values[6],
            Vector3::new(values[3], values[4], values[5]),
        );
    }
    Ok(set)
}
