//! SfM sparse-model ingestion: COLMAP text/binary layouts, ground-truth
//! images and optional per-view depth priors.
//!
//! Only PINHOLE and SIMPLE_PINHOLE camera models are accepted; the renderer
//! assumes an undistorted pinhole projection throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffers::{DepthMap, ImageRgb};

#[derive(Debug, Error)]
pub enum SfmError {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("malformed record in {file} at {offset}: {reason}")]
    MalformedRecord { file: String, offset: u64, reason: String },
    #[error("unsupported camera model: {0}")]
    UnsupportedCameraModel(String),
    #[error("visibility asymmetry between view {view_id} and point {point_id}")]
    VisibilityAsymmetry { view_id: u32, point_id: u64 },
    #[error("depth map size {got_w}x{got_h} does not match view {expect_w}x{expect_h}")]
    DimensionMismatch { got_w: usize, got_h: usize, expect_w: usize, expect_h: usize },
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Pinhole intrinsics; distortion must be zero (or pre-undistorted upstream).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), String> {
        if self.width < 1 || self.height < 1 {
            return Err("image size must be at least 1x1".into());
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err("focal lengths must be positive".into());
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err("cx out of range".into());
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err("cy out of range".into());
        }
        Ok(())
    }

    /// Uniform downsampling of the image plane by `factor`.
    pub fn downsample(&self, factor: u32) -> CameraIntrinsics {
        let f = factor.max(1) as f64;
        CameraIntrinsics {
            width: (self.width / factor.max(1)).max(1),
            height: (self.height / factor.max(1)).max(1),
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
        }
    }
}

/// One posed training view. `rotation`/`translation` map world to camera:
/// `p_cam = R * p_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub view_id: u32,
    pub intrinsics_id: u32,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub image_path: String,
    pub visible_point_ids: BTreeSet<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePoint {
    pub point_id: u64,
    pub position: Vector3<f64>,
    pub color: [f64; 3],
    pub observing_view_ids: BTreeSet<u32>,
}

/// Parsed sparse reconstruction. View/point visibility is symmetric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseModel {
    pub cameras: BTreeMap<u32, CameraIntrinsics>,
    pub views: BTreeMap<u32, ViewRecord>,
    pub points: BTreeMap<u64, SparsePoint>,
}

impl SparseModel {
    /// Checks that `v` observes `p` iff `p` lists `v`, and that every
    /// referenced id exists.
    pub fn check_visibility_symmetry(&self) -> Result<(), SfmError> {
        for view in self.views.values() {
            for &pid in &view.visible_point_ids {
                let ok = self
                    .points
                    .get(&pid)
                    .is_some_and(|p| p.observing_view_ids.contains(&view.view_id));
                if !ok {
                    return Err(SfmError::VisibilityAsymmetry { view_id: view.view_id, point_id: pid });
                }
            }
        }
        for point in self.points.values() {
            for &vid in &point.observing_view_ids {
                let ok = self
                    .views
                    .get(&vid)
                    .is_some_and(|v| v.visible_point_ids.contains(&point.point_id));
                if !ok {
                    return Err(SfmError::VisibilityAsymmetry { view_id: vid, point_id: point.point_id });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparseFormat {
    Auto,
    Text,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthSource {
    File,
    None,
}

/// Per-view estimated depth map used as an optimization prior.
#[derive(Debug, Clone)]
pub struct DepthPrior {
    pub view_id: u32,
    pub depth: DepthMap,
    pub source: DepthSource,
}

// COLMAP camera model ids, used to reject everything non-pinhole by name.
fn camera_model_name(id: u32) -> &'static str {
    match id {
        0 => "SIMPLE_PINHOLE",
        1 => "PINHOLE",
        2 => "SIMPLE_RADIAL",
        3 => "RADIAL",
        4 => "OPENCV",
        5 => "OPENCV_FISHEYE",
        6 => "FULL_OPENCV",
        7 => "FOV",
        8 => "SIMPLE_RADIAL_FISHEYE",
        9 => "RADIAL_FISHEYE",
        10 => "THIN_PRISM_FISHEYE",
        _ => "UNKNOWN",
    }
}

fn malformed(file: &Path, offset: u64, reason: impl Into<String>) -> SfmError {
    SfmError::MalformedRecord {
        file: file.display().to_string(),
        offset,
        reason: reason.into(),
    }
}

/// Parses a COLMAP sparse reconstruction directory
/// (`cameras.{txt,bin}`, `images.{txt,bin}`, `points3D.{txt,bin}`).
pub fn parse_sparse_model(dir: &Path, format: SparseFormat) -> Result<SparseModel, SfmError> {
    let format = match format {
        SparseFormat::Auto => {
            if dir.join("cameras.bin").exists() {
                SparseFormat::Binary
            } else if dir.join("cameras.txt").exists() {
                SparseFormat::Text
            } else {
                return Err(SfmError::MissingFile(dir.join("cameras.{txt,bin}")));
            }
        }
        f => f,
    };
    let ext = if format == SparseFormat::Binary { "bin" } else { "txt" };
    let cam_path = dir.join(format!("cameras.{ext}"));
    let img_path = dir.join(format!("images.{ext}"));
    let pts_path = dir.join(format!("points3D.{ext}"));
    for p in [&cam_path, &img_path, &pts_path] {
        if !p.exists() {
            return Err(SfmError::MissingFile(p.clone()));
        }
    }

    let mut model = SparseModel::default();
    if format == SparseFormat::Binary {
        parse_cameras_bin(&cam_path, &mut model)?;
        parse_images_bin(&img_path, &mut model)?;
        parse_points_bin(&pts_path, &mut model)?;
    } else {
        parse_cameras_txt(&cam_path, &mut model)?;
        parse_images_txt(&img_path, &mut model)?;
        parse_points_txt(&pts_path, &mut model)?;
    }

    for view in model.views.values() {
        if !model.cameras.contains_key(&view.intrinsics_id) {
            return Err(malformed(
                &img_path,
                view.view_id as u64,
                format!("image {} references unknown camera {}", view.view_id, view.intrinsics_id),
            ));
        }
    }
    model.check_visibility_symmetry()?;
    Ok(model)
}

fn intrinsics_from_params(
    model_id: u32,
    width: u64,
    height: u64,
    params: &[f64],
) -> Result<CameraIntrinsics, SfmError> {
    let cam = match model_id {
        0 => CameraIntrinsics {
            width: width as u32,
            height: height as u32,
            fx: params[0],
            fy: params[0],
            cx: params[1],
            cy: params[2],
        },
        1 => CameraIntrinsics {
            width: width as u32,
            height: height as u32,
            fx: params[0],
            fy: params[1],
            cx: params[2],
            cy: params[3],
        },
        other => return Err(SfmError::UnsupportedCameraModel(camera_model_name(other).to_string())),
    };
    Ok(cam)
}

fn rotation_from_quat(qw: f64, qx: f64, qy: f64, qz: f64) -> Option<Matrix3<f64>> {
    let norm = (qw * qw + qx * qx + qy * qy + qz * qz).sqrt();
    if !(norm.is_finite() && norm > 0.0) {
        return None;
    }
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(qw, qx, qy, qz));
    Some(*q.to_rotation_matrix().matrix())
}

fn quat_from_rotation(r: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(*r));
    let c = q.into_inner();
    // COLMAP convention: positive scalar part.
    if c.w < 0.0 {
        [-c.w, -c.i, -c.j, -c.k]
    } else {
        [c.w, c.i, c.j, c.k]
    }
}

// ---------------------------------------------------------------------------
// Text layout
// ---------------------------------------------------------------------------

fn data_lines(path: &Path) -> Result<Vec<(u64, String)>, SfmError> {
    let file = File::open(path).map_err(|_| SfmError::MissingFile(path.to_path_buf()))?;
    let mut lines = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        lines.push((i as u64 + 1, trimmed.to_string()));
    }
    Ok(lines)
}

fn parse_cameras_txt(path: &Path, model: &mut SparseModel) -> Result<(), SfmError> {
    for (lineno, line) in data_lines(path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 4 {
            return Err(malformed(path, lineno, "camera line too short"));
        }
        let id: u32 = tok[0].parse().map_err(|_| malformed(path, lineno, "bad camera id"))?;
        let model_id = match tok[1] {
            "SIMPLE_PINHOLE" => 0,
            "PINHOLE" => 1,
            other => return Err(SfmError::UnsupportedCameraModel(other.to_string())),
        };
        let width: u64 = tok[2].parse().map_err(|_| malformed(path, lineno, "bad width"))?;
        let height: u64 = tok[3].parse().map_err(|_| malformed(path, lineno, "bad height"))?;
        let n_params = if model_id == 0 { 3 } else { 4 };
        if tok.len() != 4 + n_params {
            return Err(malformed(path, lineno, "wrong parameter count"));
        }
        let params: Vec<f64> = tok[4..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(path, lineno, "bad camera parameter"))?;
        let cam = intrinsics_from_params(model_id, width, height, &params)?;
        cam.validate().map_err(|e| malformed(path, lineno, e))?;
        model.cameras.insert(id, cam);
    }
    Ok(())
}

fn parse_images_txt(path: &Path, model: &mut SparseModel) -> Result<(), SfmError> {
    // The observation line of a pair may be legitimately empty (an image
    // with no triangulated points), so blank lines are only skipped while
    // looking for the next header.
    let file = File::open(path).map_err(|_| SfmError::MissingFile(path.to_path_buf()))?;
    let mut raw = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().starts_with('#') {
            continue;
        }
        raw.push((i as u64 + 1, line.trim().to_string()));
    }
    let mut pairs: Vec<((u64, String), (u64, String))> = Vec::new();
    let mut iter = raw.into_iter();
    while let Some((lineno, header)) = iter.next() {
        if header.is_empty() {
            continue;
        }
        let obs = iter
            .next()
            .ok_or_else(|| malformed(path, lineno, "image header without points2D line"))?;
        pairs.push(((lineno, header), obs));
    }
    for ((lineno, header), (obs_lineno, obs_line)) in &pairs {
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.len() < 10 {
            return Err(malformed(path, *lineno, "image header too short"));
        }
        let view_id: u32 = tok[0].parse().map_err(|_| malformed(path, *lineno, "bad image id"))?;
        let q: Vec<f64> = tok[1..8]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(path, *lineno, "bad pose value"))?;
        let cam_id: u32 = tok[8].parse().map_err(|_| malformed(path, *lineno, "bad camera id"))?;
        let name = tok[9..].join(" ");
        let rotation = rotation_from_quat(q[0], q[1], q[2], q[3])
            .ok_or_else(|| malformed(path, *lineno, "degenerate quaternion"))?;

        let obs_tok: Vec<&str> = obs_line.split_whitespace().collect();
        if obs_tok.len() % 3 != 0 {
            return Err(malformed(path, *obs_lineno, "points2D not in triplets"));
        }
        let mut visible = BTreeSet::new();
        for triplet in obs_tok.chunks(3) {
            let pid: i64 =
                triplet[2].parse().map_err(|_| malformed(path, *obs_lineno, "bad point3D id"))?;
            if pid >= 0 {
                visible.insert(pid as u64);
            }
        }
        model.views.insert(
            view_id,
            ViewRecord {
                view_id,
                intrinsics_id: cam_id,
                rotation,
                translation: Vector3::new(q[4], q[5], q[6]),
                image_path: name,
                visible_point_ids: visible,
            },
        );
    }
    Ok(())
}

fn parse_points_txt(path: &Path, model: &mut SparseModel) -> Result<(), SfmError> {
    for (lineno, line) in data_lines(path)? {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() < 8 || (tok.len() - 8) % 2 != 0 {
            return Err(malformed(path, lineno, "point3D line malformed"));
        }
        let pid: u64 = tok[0].parse().map_err(|_| malformed(path, lineno, "bad point id"))?;
        let coords: Vec<f64> = tok[1..4]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(path, lineno, "bad coordinate"))?;
        let rgb: Vec<u8> = tok[4..7]
            .iter()
            .map(|t| t.parse::<u8>())
            .collect::<Result<_, _>>()
            .map_err(|_| malformed(path, lineno, "bad color"))?;
        let position = Vector3::new(coords[0], coords[1], coords[2]);
        if !position.iter().all(|v| v.is_finite()) {
            return Err(malformed(path, lineno, "non-finite position"));
        }
        let mut observing = BTreeSet::new();
        for pair in tok[8..].chunks(2) {
            let vid: u32 = pair[0].parse().map_err(|_| malformed(path, lineno, "bad track image id"))?;
            observing.insert(vid);
        }
        if observing.is_empty() {
            return Err(malformed(path, lineno, "point with empty track"));
        }
        model.points.insert(
            pid,
            SparsePoint {
                point_id: pid,
                position,
                color: [rgb[0] as f64 / 255.0, rgb[1] as f64 / 255.0, rgb[2] as f64 / 255.0],
                observing_view_ids: observing,
            },
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary layout
// ---------------------------------------------------------------------------

fn open_bin(path: &Path) -> Result<BufReader<File>, SfmError> {
    Ok(BufReader::new(File::open(path).map_err(|_| SfmError::MissingFile(path.to_path_buf()))?))
}

fn parse_cameras_bin(path: &Path, model: &mut SparseModel) -> Result<(), SfmError> {
    let mut r = open_bin(path)?;
    let n = r.read_u64::<LittleEndian>()?;
    for i in 0..n {
        let id = r.read_i32::<LittleEndian>()? as u32;
        let model_id = r.read_i32::<LittleEndian>()? as u32;
        let width = r.read_u64::<LittleEndian>()?;
        let height = r.read_u64::<LittleEndian>()?;
        let n_params = match model_id {
            0 => 3,
            1 => 4,
            other => return Err(SfmError::UnsupportedCameraModel(camera_model_name(other).to_string())),
        };
        let mut params = vec![0.0; n_params];
        for p in params.iter_mut() {
            *p = r.read_f64::<LittleEndian>()?;
        }
        let cam = intrinsics_from_params(model_id, width, height, &params)?;
        cam.validate().map_err(|e| malformed(path, i, e))?;
        model.cameras.insert(id, cam);
    }
    Ok(())
}

fn read_null_terminated(r: &mut impl Read) -> std::io::Result<String> {
    let mut bytes = Vec::new();
    loop {
        let b = r.read_u8()?;
        if b == 0 {
            break;
        }
        bytes.push(b);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn parse_images_bin(path: &Path, model: &mut SparseModel) -> Result<(), SfmError> {
    let mut r = open_bin(path)?;
    let n = r.read_u64::<LittleEndian>()?;
    for i in 0..n {
        let view_id = r.read_i32::<LittleEndian>()? as u32;
        let qw = r.read_f64::<LittleEndian>()?;
        let qx = r.read_f64::<LittleEndian>()?;
        let qy = r.read_f64::<LittleEndian>()?;
        let qz = r.read_f64::<LittleEndian>()?;
        let tx = r.read_f64::<LittleEndian>()?;
        let ty = r.read_f64::<LittleEndian>()?;
        let tz = r.read_f64::<LittleEndian>()?;
        let cam_id = r.read_i32::<LittleEndian>()? as u32;
        let name = read_null_terminated(&mut r)?;
        let rotation =
            rotation_from_quat(qw, qx, qy, qz).ok_or_else(|| malformed(path, i, "degenerate quaternion"))?;
        let n_obs = r.read_u64::<LittleEndian>()?;
        let mut visible = BTreeSet::new();
        for _ in 0..n_obs {
            let _x = r.read_f64::<LittleEndian>()?;
            let _y = r.read_f64::<LittleEndian>()?;
            let pid = r.read_i64::<LittleEndian>()?;
            if pid >= 0 {
                visible.insert(pid as u64);
            }
        }
        model.views.insert(
            view_id,
            ViewRecord {
                view_id,
                intrinsics_id: cam_id,
                rotation,
                translation: Vector3::new(tx, ty, tz),
                image_path: name,
                visible_point_ids: visible,
            },
        );
    }
    Ok(())
}

fn parse_points_bin(path: &Path, model: &mut SparseModel) -> Result<(), SfmError> {
    let mut r = open_bin(path)?;
    let n = r.read_u64::<LittleEndian>()?;
    for i in 0..n {
        let pid = r.read_u64::<LittleEndian>()?;
        let x = r.read_f64::<LittleEndian>()?;
        let y = r.read_f64::<LittleEndian>()?;
        let z = r.read_f64::<LittleEndian>()?;
        let rgb = [r.read_u8()?, r.read_u8()?, r.read_u8()?];
        let _error = r.read_f64::<LittleEndian>()?;
        let track_len = r.read_u64::<LittleEndian>()?;
        let mut observing = BTreeSet::new();
        for _ in 0..track_len {
            let vid = r.read_i32::<LittleEndian>()? as u32;
            let _idx = r.read_i32::<LittleEndian>()?;
            observing.insert(vid);
        }
        let position = Vector3::new(x, y, z);
        if !position.iter().all(|v| v.is_finite()) {
            return Err(malformed(path, i, "non-finite position"));
        }
        if observing.is_empty() {
            return Err(malformed(path, i, "point with empty track"));
        }
        model.points.insert(
            pid,
            SparsePoint {
                point_id: pid,
                position,
                color: [rgb[0] as f64 / 255.0, rgb[1] as f64 / 255.0, rgb[2] as f64 / 255.0],
                observing_view_ids: observing,
            },
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reference exporter (both layouts). Observation coordinates are synthesized
// by projecting the observed points; parsing ignores them.
// ---------------------------------------------------------------------------

/// Per-image ordered observation lists, shared by images and points3D export.
fn observation_tables(model: &SparseModel) -> BTreeMap<u32, Vec<u64>> {
    model
        .views
        .iter()
        .map(|(&vid, view)| (vid, view.visible_point_ids.iter().copied().collect()))
        .collect()
}

fn project_observation(model: &SparseModel, view: &ViewRecord, pid: u64) -> (f64, f64) {
    let cam = &model.cameras[&view.intrinsics_id];
    let p = model.points[&pid].position;
    let pc = view.rotation * p + view.translation;
    if pc.z.abs() < 1e-12 {
        return (0.0, 0.0);
    }
    (cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy)
}

pub fn write_sparse_model(model: &SparseModel, dir: &Path, format: SparseFormat) -> Result<(), SfmError> {
    std::fs::create_dir_all(dir)?;
    let obs = observation_tables(model);
    match format {
        SparseFormat::Text => {
            write_cameras_txt(model, &dir.join("cameras.txt"))?;
            write_images_txt(model, &obs, &dir.join("images.txt"))?;
            write_points_txt(model, &obs, &dir.join("points3D.txt"))?;
        }
        SparseFormat::Binary | SparseFormat::Auto => {
            write_cameras_bin(model, &dir.join("cameras.bin"))?;
            write_images_bin(model, &obs, &dir.join("images.bin"))?;
            write_points_bin(model, &obs, &dir.join("points3D.bin"))?;
        }
    }
    Ok(())
}

fn write_cameras_txt(model: &SparseModel, path: &Path) -> Result<(), SfmError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]")?;
    for (id, cam) in &model.cameras {
        writeln!(
            w,
            "{} PINHOLE {} {} {:.17} {:.17} {:.17} {:.17}",
            id, cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy
        )?;
    }
    Ok(())
}

fn write_images_txt(
    model: &SparseModel,
    obs: &BTreeMap<u32, Vec<u64>>,
    path: &Path,
) -> Result<(), SfmError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")?;
    for (id, view) in &model.views {
        let q = quat_from_rotation(&view.rotation);
        let t = view.translation;
        writeln!(
            w,
            "{} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {:.17} {} {}",
            id, q[0], q[1], q[2], q[3], t.x, t.y, t.z, view.intrinsics_id, view.image_path
        )?;
        let parts: Vec<String> = obs[id]
            .iter()
            .map(|&pid| {
                let (x, y) = project_observation(model, view, pid);
                format!("{:.6} {:.6} {}", x, y, pid)
            })
            .collect();
        writeln!(w, "{}", parts.join(" "))?;
    }
    Ok(())
}

fn write_points_txt(
    model: &SparseModel,
    obs: &BTreeMap<u32, Vec<u64>>,
    path: &Path,
) -> Result<(), SfmError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]")?;
    for (id, point) in &model.points {
        let rgb: Vec<u8> =
            point.color.iter().map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8).collect();
        let mut line = format!(
            "{} {:.17} {:.17} {:.17} {} {} {} 0.0",
            id, point.position.x, point.position.y, point.position.z, rgb[0], rgb[1], rgb[2]
        );
        for &vid in &point.observing_view_ids {
            // Tolerate inconsistent models here; the parser is what rejects
            // asymmetric visibility.
            let idx = obs
                .get(&vid)
                .and_then(|list| list.iter().position(|&p| p == *id))
                .unwrap_or(0);
            line.push_str(&format!(" {} {}", vid, idx));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

fn write_cameras_bin(model: &SparseModel, path: &Path) -> Result<(), SfmError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u64::<LittleEndian>(model.cameras.len() as u64)?;
    for (id, cam) in &model.cameras {
        w.write_i32::<LittleEndian>(*id as i32)?;
        w.write_i32::<LittleEndian>(1)?; // PINHOLE
        w.write_u64::<LittleEndian>(cam.width as u64)?;
        w.write_u64::<LittleEndian>(cam.height as u64)?;
        for p in [cam.fx, cam.fy, cam.cx, cam.cy] {
            w.write_f64::<LittleEndian>(p)?;
        }
    }
    Ok(())
}

fn write_images_bin(
    model: &SparseModel,
    obs: &BTreeMap<u32, Vec<u64>>,
    path: &Path,
) -> Result<(), SfmError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u64::<LittleEndian>(model.views.len() as u64)?;
    for (id, view) in &model.views {
        w.write_i32::<LittleEndian>(*id as i32)?;
        let q = quat_from_rotation(&view.rotation);
        for v in q {
            w.write_f64::<LittleEndian>(v)?;
        }
        for v in [view.translation.x, view.translation.y, view.translation.z] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_i32::<LittleEndian>(view.intrinsics_id as i32)?;
        w.write_all(view.image_path.as_bytes())?;
        w.write_u8(0)?;
        w.write_u64::<LittleEndian>(obs[id].len() as u64)?;
        for &pid in &obs[id] {
            let (x, y) = project_observation(model, view, pid);
            w.write_f64::<LittleEndian>(x)?;
            w.write_f64::<LittleEndian>(y)?;
            w.write_i64::<LittleEndian>(pid as i64)?;
        }
    }
    Ok(())
}

fn write_points_bin(
    model: &SparseModel,
    obs: &BTreeMap<u32, Vec<u64>>,
    path: &Path,
) -> Result<(), SfmError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u64::<LittleEndian>(model.points.len() as u64)?;
    for (id, point) in &model.points {
        w.write_u64::<LittleEndian>(*id)?;
        for v in [point.position.x, point.position.y, point.position.z] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for c in point.color {
            w.write_u8((c * 255.0).round().clamp(0.0, 255.0) as u8)?;
        }
        w.write_f64::<LittleEndian>(0.0)?;
        w.write_u64::<LittleEndian>(point.observing_view_ids.len() as u64)?;
        for &vid in &point.observing_view_ids {
            let idx = obs
                .get(&vid)
                .and_then(|list| list.iter().position(|&p| p == *id))
                .unwrap_or(0);
            w.write_i32::<LittleEndian>(vid as i32)?;
            w.write_i32::<LittleEndian>(idx as i32)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Images and depth priors
// ---------------------------------------------------------------------------

/// Loads an 8-bit PNG/JPEG into `[0,1]` floats (no gamma conversion).
pub fn load_image_rgb(path: &Path) -> Result<ImageRgb, SfmError> {
    let img = image::open(path)
        .map_err(|e| SfmError::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = ImageRgb::new(w, h);
    for (i, px) in img.pixels().enumerate() {
        out.data[i] = Vector3::new(
            px.0[0] as f64 / 255.0,
            px.0[1] as f64 / 255.0,
            px.0[2] as f64 / 255.0,
        );
    }
    Ok(out)
}

/// Saves an `[0,1]` image as 8-bit PNG (values clamped).
pub fn save_image_png(img: &ImageRgb, path: &Path) -> Result<(), SfmError> {
    let mut buf = image::RgbImage::new(img.width as u32, img.height as u32);
    for (i, px) in buf.pixels_mut().enumerate() {
        let c = img.data[i];
        for (ch, v) in px.0.iter_mut().zip(c.iter()) {
            *ch = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    buf.save(path)
        .map_err(|e| SfmError::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() })
}

/// Loads a depth prior from PFM or 16-bit PNG (+ JSON sidecar `{"scale": s}`).
/// Non-positive or non-finite samples become invalid (NaN) markers.
pub fn load_depth_prior(
    path: &Path,
    view: &ViewRecord,
    cam: &CameraIntrinsics,
) -> Result<DepthPrior, SfmError> {
    let mut depth = match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm(path)?,
        Some("png") => read_depth_png16(path)?,
        _ => {
            return Err(SfmError::UnreadableFile {
                path: path.to_path_buf(),
                reason: "expected .pfm or .png".into(),
            })
        }
    };
    if depth.width != cam.width as usize || depth.height != cam.height as usize {
        return Err(SfmError::DimensionMismatch {
            got_w: depth.width,
            got_h: depth.height,
            expect_w: cam.width as usize,
            expect_h: cam.height as usize,
        });
    }
    for d in depth.data.iter_mut() {
        if !(d.is_finite() && *d > 0.0) {
            *d = f64::NAN;
        }
    }
    Ok(DepthPrior { view_id: view.view_id, depth, source: DepthSource::File })
}

/// Single-channel PFM ("Pf"), rows stored bottom-to-top.
pub fn read_pfm(path: &Path) -> Result<DepthMap, SfmError> {
    let unreadable = |reason: &str| SfmError::UnreadableFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|_| SfmError::MissingFile(path.to_path_buf()))?
        .read_to_end(&mut bytes)?;
    // Header: three whitespace-separated tokens.
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens.len() < 4 {
        return Err(unreadable("truncated PFM header"));
    }
    if tokens[0] != "Pf" {
        return Err(unreadable("not a single-channel PFM"));
    }
    let width: usize = tokens[1].parse().map_err(|_| unreadable("bad PFM width"))?;
    let height: usize = tokens[2].parse().map_err(|_| unreadable("bad PFM height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| unreadable("bad PFM scale"))?;
    pos += 1; // single whitespace after the scale token
    let needed = width * height * 4;
    if bytes.len() < pos + needed {
        return Err(unreadable("truncated PFM payload"));
    }
    let little_endian = scale < 0.0;
    let mut map = DepthMap::new(width, height);
    for row in 0..height {
        // PFM rows run bottom-to-top.
        let out_row = height - 1 - row;
        for col in 0..width {
            let off = pos + (row * width + col) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            map.data[out_row * width + col] = v as f64;
        }
    }
    Ok(map)
}

/// Writes a little-endian single-channel PFM. Invalid samples are written as 0.
pub fn write_pfm(map: &DepthMap, path: &Path) -> Result<(), SfmError> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "Pf\n{} {}\n-1.0\n", map.width, map.height)?;
    for row in (0..map.height).rev() {
        for col in 0..map.width {
            let v = map.data[row * map.width + col];
            let v = if v.is_finite() && v > 0.0 { v as f32 } else { 0.0f32 };
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct DepthSidecar {
    scale: f64,
}

fn read_depth_png16(path: &Path) -> Result<DepthMap, SfmError> {
    let img = image::open(path)
        .map_err(|e| SfmError::UnreadableFile { path: path.to_path_buf(), reason: e.to_string() })?
        .to_luma16();
    let sidecar_path = path.with_extension("json");
    let sidecar: DepthSidecar = serde_json::from_reader(
        File::open(&sidecar_path).map_err(|_| SfmError::MissingFile(sidecar_path.clone()))?,
    )
    .map_err(|e| SfmError::UnreadableFile { path: sidecar_path, reason: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut map = DepthMap::new(w, h);
    for (i, px) in img.pixels().enumerate() {
        map.data[i] = px.0[0] as f64 * sidecar.scale;
    }
    Ok(map)
}
