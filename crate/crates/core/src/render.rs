//! Deterministic CPU rasterizer for Gaussian sets: forward alpha compositing
//! to color/depth/alpha buffers, the analytic backward pass, and a naive
//! full-loop oracle renderer used for equivalence testing.
//!
//! Compositing follows front-to-back alpha blending with a global per-view
//! depth sort. The optimized path culls primitives to a conservative
//! screen-space radius chosen so that every skipped contribution falls below
//! the alpha skip threshold, which keeps it exactly equivalent to the
//! oracle's full per-pixel loop.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussians::GaussianSet;
use crate::sfm::CameraIntrinsics;

pub const NEAR_PLANE: f64 = 0.01;
pub const ALPHA_CLAMP: f64 = 0.99;
pub const ALPHA_SKIP: f64 = 1.0 / 255.0;
pub const TRANSMITTANCE_STOP: f64 = 1e-4;
pub const COV_DILATION: f64 = 0.3;

/// Number of row bands processed independently. Fixed (not tied to the
/// thread count) so results are bit-identical under any parallelism.
const BAND_COUNT: usize = 16;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("forward state missing; render must precede render_backward")]
    MissingForwardState,
    #[error("gradient buffer size mismatch")]
    GradientShapeMismatch,
}

/// World-to-camera rigid transform: `p_cam = rotation * p_world + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }
}

/// A 3D Gaussian after projection to the image plane.
#[derive(Debug, Clone)]
pub struct ProjectedGaussian {
    pub set_index: usize,
    pub prim_index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth_cam: f64,
    pub color: Vector3<f64>,
    pub base_opacity: f64,
    /// Conservative pixel radius outside of which alpha < 1/255.
    pub radius: f64,
}

struct ForwardState {
    projected: Vec<ProjectedGaussian>,
    background: Vector3<f64>,
    /// Exclusive end index into `projected` of the last applied contribution.
    last_contrib: Vec<u32>,
}

/// Per-pixel render buffers plus the retained compositing state needed by
/// the backward pass.
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vector3<f64>>,
    pub depth: Vec<f64>,
    pub accum_alpha: Vec<f64>,
    state: Option<ForwardState>,
}

impl RenderedView {
    pub fn color_image(&self) -> crate::ImageRgb {
        crate::ImageRgb { width: self.width, height: self.height, data: self.color.clone() }
    }

    pub fn depth_map(&self) -> crate::DepthMap {
        crate::DepthMap { width: self.width, height: self.height, data: self.depth.clone() }
    }
}

/// Gradients of a scalar objective w.r.t. one input set's parameter columns,
/// plus densification statistics.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub d_positions: Vec<Vector3<f64>>,
    pub d_rotations: Vec<[f64; 4]>,
    pub d_log_scales: Vec<Vector3<f64>>,
    pub d_opacity_logits: Vec<f64>,
    pub d_colors: Vec<Vector3<f64>>,
    /// Screen-space position gradient in NDC units, for densification.
    pub pos2d_grad_ndc: Vec<Vector2<f64>>,
    /// Number of pixels the primitive contributed to.
    pub hit_pixels: Vec<u32>,
}

impl GradientSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_positions: vec![Vector3::zeros(); n],
            d_rotations: vec![[0.0; 4]; n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_opacity_logits: vec![0.0; n],
            d_colors: vec![Vector3::zeros(); n],
            pos2d_grad_ndc: vec![Vector2::zeros(); n],
            hit_pixels: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_positions.is_empty()
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        debug_assert_eq!(self.len(), other.len());
        for i in 0..self.len() {
            self.d_positions[i] += other.d_positions[i];
            for k in 0..4 {
                self.d_rotations[i][k] += other.d_rotations[i][k];
            }
            self.d_log_scales[i] += other.d_log_scales[i];
            self.d_opacity_logits[i] += other.d_opacity_logits[i];
            self.d_colors[i] += other.d_colors[i];
            self.pos2d_grad_ndc[i] += other.pos2d_grad_ndc[i];
            self.hit_pixels[i] += other.hit_pixels[i];
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for i in 0..self.len() {
            self.d_positions[i] *= factor;
            for k in 0..4 {
                self.d_rotations[i][k] *= factor;
            }
            self.d_log_scales[i] *= factor;
            self.d_opacity_logits[i] *= factor;
            self.d_colors[i] *= factor;
        }
    }
}

fn normalized_quat(q: [f64; 4]) -> ([f64; 4], f64) {
    let norm = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    ([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm], norm)
}

fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
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

/// Pinhole projection Jacobian at camera-space point (x, y, z).
fn projection_jacobian(cam: &CameraIntrinsics, pc: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let z2 = pc.z * pc.z;
    nalgebra::Matrix2x3::new(
        cam.fx / pc.z,
        0.0,
        -cam.fx * pc.x / z2,
        0.0,
        cam.fy / pc.z,
        -cam.fy * pc.y / z2,
    )
}

fn project_one(
    set: &GaussianSet,
    i: usize,
    set_index: usize,
    cam: &CameraIntrinsics,
    pose: &Pose,
) -> Option<ProjectedGaussian> {
    let pc = pose.rotation * set.positions[i] + pose.translation;
    if pc.z < NEAR_PLANE {
        return None;
    }
    let mean2d = Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
    let (q, _) = normalized_quat(set.rotations[i]);
    let rot = quat_to_matrix(q);
    let scales = set.log_scales[i].map(f64::exp);
    let l = rot * Matrix3::from_diagonal(&scales);
    let sigma = l * l.transpose();
    let m = projection_jacobian(cam, &pc) * pose.rotation;
    let cov2d = m * sigma * m.transpose() + Matrix2::identity() * COV_DILATION;
    let det = cov2d.determinant();
    if !(det > 0.0 && det.is_finite()) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let opacity = crate::gaussians::sigmoid(set.opacity_logits[i]);
    // Largest covariance eigenvalue bounds the footprint.
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = if opacity * 255.0 > 1.0 {
        (2.0 * lambda_max * (opacity * 255.0).ln()).sqrt() + 1e-6
    } else {
        0.0
    };
    Some(ProjectedGaussian {
        set_index,
        prim_index: i,
        mean2d,
        cov2d,
        conic,
        depth_cam: pc.z,
        color: set.colors[i],
        base_opacity: opacity,
        radius,
    })
}

/// Projects every primitive of `set`, culling those behind the near plane.
pub fn project(set: &GaussianSet, cam: &CameraIntrinsics, pose: &Pose) -> Vec<ProjectedGaussian> {
    (0..set.len()).filter_map(|i| project_one(set, i, 0, cam, pose)).collect()
}

fn sorted_projections(
    sets: &[&GaussianSet],
    cam: &CameraIntrinsics,
    pose: &Pose,
) -> Vec<ProjectedGaussian> {
    let mut projected = Vec::new();
    for (si, set) in sets.iter().enumerate() {
        for i in 0..set.len() {
            if let Some(p) = project_one(set, i, si, cam, pose) {
                projected.push(p);
            }
        }
    }
    // Increasing camera depth; ties broken by set order then insertion order.
    projected.sort_by(|a, b| {
        a.depth_cam
            .partial_cmp(&b.depth_cam)
            .unwrap()
            .then(a.set_index.cmp(&b.set_index))
            .then(a.prim_index.cmp(&b.prim_index))
    });
    projected
}

#[inline]
fn gaussian_alpha(g: &ProjectedGaussian, px: f64, py: f64) -> f64 {
    let dx = px - g.mean2d.x;
    let dy = py - g.mean2d.y;
    let q = g.conic[(0, 0)] * dx * dx
        + (g.conic[(0, 1)] + g.conic[(1, 0)]) * dx * dy
        + g.conic[(1, 1)] * dy * dy;
    if q < 0.0 {
        return 0.0;
    }
    (g.base_opacity * (-0.5 * q).exp()).min(ALPHA_CLAMP)
}

/// Renders the union of `sets` front-to-back into color, depth and
/// accumulated-alpha buffers. The depth buffer is the alpha-weighted
/// expectation without normalization by accumulated alpha.
pub fn render(
    sets: &[&GaussianSet],
    cam: &CameraIntrinsics,
    pose: &Pose,
    background: Vector3<f64>,
) -> RenderedView {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let projected = sorted_projections(sets, cam, pose);

    let mut color = vec![Vector3::zeros(); w * h];
    let mut depth = vec![0.0f64; w * h];
    let mut transmittance = vec![1.0f64; w * h];
    let mut last_contrib = vec![0u32; w * h];

    let band_rows = h.div_ceil(BAND_COUNT).max(1);
    let bands: Vec<(usize, &mut [Vector3<f64>], &mut [f64], &mut [f64], &mut [u32])> = {
        let mut out = Vec::new();
        let mut cs = color.chunks_mut(band_rows * w);
        let mut ds = depth.chunks_mut(band_rows * w);
        let mut ts = transmittance.chunks_mut(band_rows * w);
        let mut ls = last_contrib.chunks_mut(band_rows * w);
        let mut row0 = 0;
        while let (Some(c), Some(d), Some(t), Some(l)) = (cs.next(), ds.next(), ts.next(), ls.next())
        {
            out.push((row0, c, d, t, l));
            row0 += band_rows;
        }
        out
    };

    bands.into_par_iter().for_each(|(row0, c, d, t, l)| {
        let rows = c.len() / w;
        for (k, g) in projected.iter().enumerate() {
            if g.radius <= 0.0 {
                continue;
            }
            let y_lo = ((g.mean2d.y - g.radius).floor().max(row0 as f64)) as usize;
            let y_hi_f = (g.mean2d.y + g.radius).ceil();
            if y_hi_f < row0 as f64 || (g.mean2d.y - g.radius) > (row0 + rows - 1) as f64 {
                continue;
            }
            let y_hi = (y_hi_f.min((row0 + rows - 1) as f64)) as usize;
            let x_lo = (g.mean2d.x - g.radius).floor().max(0.0) as usize;
            let x_hi_f = (g.mean2d.x + g.radius).ceil();
            if x_hi_f < 0.0 || (g.mean2d.x - g.radius) > (w - 1) as f64 {
                continue;
            }
            let x_hi = x_hi_f.min((w - 1) as f64) as usize;
            for y in y_lo..=y_hi {
                let base = (y - row0) * w;
                for x in x_lo..=x_hi {
                    let idx = base + x;
                    if t[idx] < TRANSMITTANCE_STOP {
                        continue;
                    }
                    let alpha = gaussian_alpha(g, x as f64, y as f64);
                    if alpha < ALPHA_SKIP {
                        continue;
                    }
                    let weight = t[idx] * alpha;
                    c[idx] += g.color * weight;
                    d[idx] += g.depth_cam * weight;
                    t[idx] *= 1.0 - alpha;
                    l[idx] = k as u32 + 1;
                }
            }
        }
    });

    let accum_alpha: Vec<f64> = transmittance.iter().map(|t| 1.0 - t).collect();
    for (c, t) in color.iter_mut().zip(transmittance.iter()) {
        *c += background * *t;
    }

    RenderedView {
        width: w,
        height: h,
        color,
        depth,
        accum_alpha,
        state: Some(ForwardState { projected, background, last_contrib }),
    }
}

/// Per-primitive partial gradients accumulated over pixels before the chain
/// back to the raw parameters.
#[derive(Clone)]
struct PartialGrad {
    d_color: Vector3<f64>,
    d_depth: f64,
    d_opacity: f64,
    d_mean2d: Vector2<f64>,
    d_conic: Matrix2<f64>,
    hits: u32,
}

impl PartialGrad {
    fn zero() -> Self {
        Self {
            d_color: Vector3::zeros(),
            d_depth: 0.0,
            d_opacity: 0.0,
            d_mean2d: Vector2::zeros(),
            d_conic: Matrix2::zeros(),
            hits: 0,
        }
    }

    fn add(&mut self, o: &PartialGrad) {
        self.d_color += o.d_color;
        self.d_depth += o.d_depth;
        self.d_opacity += o.d_opacity;
        self.d_mean2d += o.d_mean2d;
        self.d_conic += o.d_conic;
        self.hits += o.hits;
    }
}

/// Analytic backward pass for [`render`].
///
/// Computes the gradients of `sum(d_color ⊙ C) + sum(d_depth ⊙ D)` w.r.t.
/// every parameter column of every input set, using the retained forward
/// compositing state. `d_depth` may be omitted for color-only objectives.
pub fn render_backward(
    view: &RenderedView,
    d_color: &[Vector3<f64>],
    d_depth: Option<&[f64]>,
    sets: &[&GaussianSet],
    cam: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vec<GradientSet>, RenderError> {
    let state = view.state.as_ref().ok_or(RenderError::MissingForwardState)?;
    let (w, h) = (view.width, view.height);
    if d_color.len() != w * h || d_depth.is_some_and(|d| d.len() != w * h) {
        return Err(RenderError::GradientShapeMismatch);
    }

    let n_proj = state.projected.len();
    let band_rows = h.div_ceil(BAND_COUNT).max(1);
    let n_bands = h.div_ceil(band_rows);

    // Per-band partial gradients, reduced in band order afterwards.
    let band_partials: Vec<Vec<PartialGrad>> = (0..n_bands)
        .into_par_iter()
        .map(|band| {
            let mut partials = vec![PartialGrad::zero(); n_proj];
            let y0 = band * band_rows;
            let y1 = ((band + 1) * band_rows).min(h);
            for y in y0..y1 {
                for x in 0..w {
                    let idx = y * w + x;
                    let last = state.last_contrib[idx] as usize;
                    if last == 0 && state.background == Vector3::zeros() {
                        // nothing contributed and no background gradient flows
                    }
                    let dc = d_color[idx];
                    let dd = d_depth.map_or(0.0, |d| d[idx]);
                    if dc == Vector3::zeros() && dd == 0.0 {
                        continue;
                    }
                    let b_term = dc.dot(&state.background);
                    let final_t = 1.0 - view.accum_alpha[idx];
                    let mut t_run = final_t;
                    let mut suffix = 0.0;
                    let (px, py) = (x as f64, y as f64);
                    for k in (0..last).rev() {
                        let g = &state.projected[k];
                        let dx = px - g.mean2d.x;
                        let dy = py - g.mean2d.y;
                        if dx.abs() > g.radius || dy.abs() > g.radius {
                            continue;
                        }
                        let q = g.conic[(0, 0)] * dx * dx
                            + (g.conic[(0, 1)] + g.conic[(1, 0)]) * dx * dy
                            + g.conic[(1, 1)] * dy * dy;
                        if q < 0.0 {
                            continue;
                        }
                        let gauss = (-0.5 * q).exp();
                        let alpha_raw = g.base_opacity * gauss;
                        let alpha = alpha_raw.min(ALPHA_CLAMP);
                        if alpha < ALPHA_SKIP {
                            continue;
                        }
                        let t_i = t_run / (1.0 - alpha);
                        let wgt = dc.dot(&g.color) + dd * g.depth_cam;
                        let p = &mut partials[k];
                        p.d_color += dc * (t_i * alpha);
                        p.d_depth += dd * t_i * alpha;
                        p.hits += 1;
                        let g_alpha = t_i * wgt - (suffix + final_t * b_term) / (1.0 - alpha);
                        if alpha_raw < ALPHA_CLAMP {
                            p.d_opacity += g_alpha * gauss;
                            let d_gauss = g_alpha * g.base_opacity * gauss;
                            let conic_delta = Vector2::new(
                                g.conic[(0, 0)] * dx + 0.5 * (g.conic[(0, 1)] + g.conic[(1, 0)]) * dy,
                                g.conic[(1, 1)] * dy + 0.5 * (g.conic[(0, 1)] + g.conic[(1, 0)]) * dx,
                            );
                            p.d_mean2d += d_gauss * conic_delta;
                            let delta = Vector2::new(dx, dy);
                            p.d_conic += (delta * delta.transpose()) * (-0.5 * d_gauss);
                        }
                        suffix += t_i * alpha * wgt;
                        t_run = t_i;
                    }
                }
            }
            partials
        })
        .collect();

    let mut partials = vec![PartialGrad::zero(); n_proj];
    for band in band_partials {
        for (acc, p) in partials.iter_mut().zip(band.iter()) {
            acc.add(p);
        }
    }

    // Chain each projected primitive's partials back to raw parameters.
    let mut grads: Vec<GradientSet> = sets.iter().map(|s| GradientSet::zeros(s.len())).collect();
    for (g, p) in state.projected.iter().zip(partials.iter()) {
        if p.hits == 0 {
            continue;
        }
        let set = sets[g.set_index];
        let i = g.prim_index;
        let out = &mut grads[g.set_index];

        out.d_colors[i] += p.d_color;
        out.hit_pixels[i] += p.hits;
        out.pos2d_grad_ndc[i] +=
            Vector2::new(p.d_mean2d.x * w as f64 * 0.5, p.d_mean2d.y * h as f64 * 0.5);

        // opacity logit
        let o = g.base_opacity;
        out.d_opacity_logits[i] += p.d_opacity * o * (1.0 - o);

        // conic -> covariance: A = V^{-1}, dV = -A dA A
        let d_cov = -(g.conic * p.d_conic * g.conic);

        // recompute projection intermediates
        let pc = pose.rotation * set.positions[i] + pose.translation;
        let jac = projection_jacobian(cam, &pc);
        let m = jac * pose.rotation;
        let (q, q_norm) = normalized_quat(set.rotations[i]);
        let rot = quat_to_matrix(q);
        let scales = set.log_scales[i].map(f64::exp);
        let l_mat = rot * Matrix3::from_diagonal(&scales);
        let sigma = l_mat * l_mat.transpose();

        let d_sigma = m.transpose() * d_cov * m;
        let d_m = (d_cov + d_cov.transpose()) * m * sigma;
        let d_jac = d_m * pose.rotation.transpose();

        // position: through the projected mean, the depth value and the
        // position-dependent Jacobian
        let mut d_pc = jac.transpose() * p.d_mean2d;
        d_pc.z += p.d_depth;
        let z2 = pc.z * pc.z;
        let z3 = z2 * pc.z;
        d_pc.x += d_jac[(0, 2)] * (-cam.fx / z2);
        d_pc.y += d_jac[(1, 2)] * (-cam.fy / z2);
        d_pc.z += d_jac[(0, 0)] * (-cam.fx / z2)
            + d_jac[(0, 2)] * (2.0 * cam.fx * pc.x / z3)
            + d_jac[(1, 1)] * (-cam.fy / z2)
            + d_jac[(1, 2)] * (2.0 * cam.fy * pc.y / z3);
        out.d_positions[i] += pose.rotation.transpose() * d_pc;

        // scale and rotation through sigma = (R S)(R S)^T
        let d_l = (d_sigma + d_sigma.transpose()) * l_mat;
        let rt_dl = rot.transpose() * d_l;
        out.d_log_scales[i] += Vector3::new(
            rt_dl[(0, 0)] * scales.x,
            rt_dl[(1, 1)] * scales.y,
            rt_dl[(2, 2)] * scales.z,
        );
        let d_rot = d_l * Matrix3::from_diagonal(&scales);
        let dq_unit = quat_backward(q, &d_rot);
        // through quaternion normalization
        let dot = dq_unit[0] * q[0] + dq_unit[1] * q[1] + dq_unit[2] * q[2] + dq_unit[3] * q[3];
        for k in 0..4 {
            out.d_rotations[i][k] += (dq_unit[k] - dot * q[k]) / q_norm;
        }
    }
    Ok(grads)
}

/// Gradient of `sum(d_rot ⊙ R(q))` w.r.t. the unit quaternion components.
fn quat_backward(q: [f64; 4], d_rot: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dr_dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dr_dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dr_dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dr_dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    [
        d_rot.component_mul(&dr_dw).sum(),
        d_rot.component_mul(&dr_dx).sum(),
        d_rot.component_mul(&dr_dy).sum(),
        d_rot.component_mul(&dr_dz).sum(),
    ]
}

/// Accumulated alpha along a single world-space ray, computed by rendering a
/// 1x1 image whose optical axis is the ray. Used as a floater probe.
pub fn accum_alpha_along_ray(
    sets: &[&GaussianSet],
    origin: Vector3<f64>,
    direction: Vector3<f64>,
) -> f64 {
    let dir = direction.normalize();
    // orthonormal camera basis with z = dir
    let helper = if dir.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let cam_x = dir.cross(&helper).normalize();
    let cam_y = dir.cross(&cam_x);
    let rotation = Matrix3::from_rows(&[cam_x.transpose(), cam_y.transpose(), dir.transpose()]);
    let pose = Pose { rotation, translation: -rotation * origin };
    // Long focal length keeps the fixed screen-space dilation angularly
    // negligible, so the probe measures the ray itself rather than a cone.
    let cam = CameraIntrinsics { width: 1, height: 1, fx: 1024.0, fy: 1024.0, cx: 0.0, cy: 0.0 };
    let view = render(sets, &cam, &pose, Vector3::zeros());
    view.accum_alpha[0]
}

pub mod oracle {
    //! Naive reference renderer: identical mathematical contract to
    //! [`super::render`], implemented as a per-pixel full-sort loop with no
    //! culling shortcuts beyond the shared alpha-skip and transmittance
    //! rules. Kept free of the optimized path's internals on purpose.

    use super::{RenderedView, ALPHA_CLAMP, ALPHA_SKIP, COV_DILATION, NEAR_PLANE, TRANSMITTANCE_STOP};
    use crate::gaussians::GaussianSet;
    use crate::sfm::CameraIntrinsics;
    use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

    struct Splat {
        mean: Vector2<f64>,
        conic: Matrix2<f64>,
        depth: f64,
        color: Vector3<f64>,
        opacity: f64,
    }

    /// Renders with a plain per-pixel loop over all depth-sorted primitives.
    pub fn render_oracle(
        sets: &[&GaussianSet],
        cam: &CameraIntrinsics,
        pose: &super::Pose,
        background: Vector3<f64>,
    ) -> RenderedView {
        let mut splats = Vec::new();
        let mut order = Vec::new();
        for (si, set) in sets.iter().enumerate() {
            for i in 0..set.len() {
                let pc = pose.rotation * set.positions[i] + pose.translation;
                if pc.z < NEAR_PLANE {
                    continue;
                }
                let rot = set.rotation_matrix(i);
                let s = set.log_scales[i].map(f64::exp);
                let sigma3 =
                    rot * Matrix3::from_diagonal(&s.component_mul(&s)) * rot.transpose();
                let jac = nalgebra::Matrix2x3::new(
                    cam.fx / pc.z,
                    0.0,
                    -cam.fx * pc.x / (pc.z * pc.z),
                    0.0,
                    cam.fy / pc.z,
                    -cam.fy * pc.y / (pc.z * pc.z),
                );
                let m = jac * pose.rotation;
                let cov = m * sigma3 * m.transpose() + Matrix2::identity() * COV_DILATION;
                let det = cov.determinant();
                if !(det > 0.0 && det.is_finite()) {
                    continue;
                }
                let conic =
                    Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
                splats.push(Splat {
                    mean: Vector2::new(
                        cam.fx * pc.x / pc.z + cam.cx,
                        cam.fy * pc.y / pc.z + cam.cy,
                    ),
                    conic,
                    depth: pc.z,
                    color: set.colors[i],
                    opacity: crate::gaussians::sigmoid(set.opacity_logits[i]),
                });
                order.push((pc.z, si, i));
            }
        }
        let mut indices: Vec<usize> = (0..splats.len()).collect();
        indices.sort_by(|&a, &b| {
            order[a]
                .0
                .partial_cmp(&order[b].0)
                .unwrap()
                .then(order[a].1.cmp(&order[b].1))
                .then(order[a].2.cmp(&order[b].2))
        });

        let (w, h) = (cam.width as usize, cam.height as usize);
        let mut color = vec![Vector3::zeros(); w * h];
        let mut depth = vec![0.0; w * h];
        let mut accum = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                let mut t = 1.0;
                for &k in &indices {
                    if t < TRANSMITTANCE_STOP {
                        break;
                    }
                    let sp = &splats[k];
                    let dx = x as f64 - sp.mean.x;
                    let dy = y as f64 - sp.mean.y;
                    let q = sp.conic[(0, 0)] * dx * dx
                        + (sp.conic[(0, 1)] + sp.conic[(1, 0)]) * dx * dy
                        + sp.conic[(1, 1)] * dy * dy;
                    if q < 0.0 {
                        continue;
                    }
                    let alpha = (sp.opacity * (-0.5 * q).exp()).min(ALPHA_CLAMP);
                    if alpha < ALPHA_SKIP {
                        continue;
                    }
                    color[idx] += sp.color * (t * alpha);
                    depth[idx] += sp.depth * (t * alpha);
                    t *= 1.0 - alpha;
                }
                accum[idx] = 1.0 - t;
                color[idx] += background * t;
            }
        }
        RenderedView { width: w, height: h, color, depth, accum_alpha: accum, state: None }
    }
}

pub use oracle::render_oracle;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::logit;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cam(w: u32, h: u32) -> CameraIntrinsics {
        CameraIntrinsics {
            width: w,
            height: h,
            fx: w as f64,
            fy: w as f64,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    fn single(pos: Vector3<f64>, log_s: f64, opacity: f64, color: Vector3<f64>) -> GaussianSet {
        let mut set = GaussianSet::default();
        set.push(pos, [1.0, 0.0, 0.0, 0.0], Vector3::repeat(log_s), logit(opacity), color);
        set
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> GaussianSet {
        let mut set = GaussianSet::default();
        for _ in 0..n {
            let pos = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(2.0..6.0),
            );
            let q = [
                rng.gen_range(-1.0..1.0f64),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let s = Vector3::new(
                rng.gen_range(-3.0..-1.0),
                rng.gen_range(-3.0..-1.0),
                rng.gen_range(-3.0..-1.0),
            );
            let col = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            set.push(pos, q, s, rng.gen_range(-2.0..2.0), col);
        }
        set
    }

    #[test]
    fn empty_scene_is_background() {
        let set = GaussianSet::default();
        let bg = Vector3::new(0.2, 0.4, 0.6);
        let view = render(&[&set], &cam(8, 8), &Pose::identity(), bg);
        for p in 0..64 {
            assert_eq!(view.color[p], bg);
            assert_eq!(view.depth[p], 0.0);
            assert_eq!(view.accum_alpha[p], 0.0);
        }
    }

    #[test]
    fn on_axis_cov2d_closed_form() {
        // Isotropic gaussian on the optical axis: cov2d = (f*s/z)^2 I + 0.3 I.
        let s = 0.05f64;
        let z = 4.0f64;
        let set = single(Vector3::new(0.0, 0.0, z), s.ln(), 0.5, Vector3::x());
        let c = cam(16, 16);
        let proj = project(&set, &c, &Pose::identity());
        assert_eq!(proj.len(), 1);
        let expected = (c.fx * s / z).powi(2) + COV_DILATION;
        assert!((proj[0].cov2d[(0, 0)] - expected).abs() < 1e-12);
        assert!((proj[0].cov2d[(1, 1)] - expected).abs() < 1e-12);
        assert!(proj[0].cov2d[(0, 1)].abs() < 1e-12);
        assert!((proj[0].mean2d.x - c.cx).abs() < 1e-12);
        assert!((proj[0].mean2d.y - c.cy).abs() < 1e-12);
        assert!((proj[0].depth_cam - z).abs() < 1e-12);
    }

    #[test]
    fn off_axis_projection_matches_pinhole() {
        let set = single(Vector3::new(0.5, -0.25, 2.0), -3.0, 0.5, Vector3::x());
        let c = cam(32, 32);
        let proj = project(&set, &c, &Pose::identity());
        assert!((proj[0].mean2d.x - (c.fx * 0.25 + c.cx)).abs() < 1e-12);
        assert!((proj[0].mean2d.y - (c.fy * -0.125 + c.cy)).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_culled() {
        let set = single(Vector3::new(0.0, 0.0, -1.0), -2.0, 0.9, Vector3::x());
        assert!(project(&set, &cam(8, 8), &Pose::identity()).is_empty());
        let at_plane = single(Vector3::new(0.0, 0.0, 0.005), -2.0, 0.9, Vector3::x());
        assert!(project(&at_plane, &cam(8, 8), &Pose::identity()).is_empty());
    }

    #[test]
    fn single_gaussian_center_pixel_composites() {
        // Odd-sized image with centered principal point: the center pixel sits
        // exactly on the mean so G = 1 and alpha equals the base opacity.
        let c = CameraIntrinsics { width: 9, height: 9, fx: 9.0, fy: 9.0, cx: 4.0, cy: 4.0 };
        let bg = Vector3::new(0.0, 0.0, 1.0);
        let set = single(Vector3::new(0.0, 0.0, 4.0), -2.0, 0.5, Vector3::x());
        let view = render(&[&set], &c, &Pose::identity(), bg);
        let p = 4 * 9 + 4;
        let expect = Vector3::x() * 0.5 + bg * 0.5;
        assert!((view.color[p] - expect).norm() < 1e-12);
        assert!((view.depth[p] - 0.5 * 4.0).abs() < 1e-12);
        assert!((view.accum_alpha[p] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn two_gaussian_hand_compositing() {
        let c = CameraIntrinsics { width: 9, height: 9, fx: 9.0, fy: 9.0, cx: 4.0, cy: 4.0 };
        let bg = Vector3::new(0.1, 0.1, 0.1);
        let mut set = single(Vector3::new(0.0, 0.0, 5.0), -2.0, 0.5, Vector3::z());
        set.push(
            Vector3::new(0.0, 0.0, 3.0),
            [1.0, 0.0, 0.0, 0.0],
            Vector3::repeat(-2.0),
            logit(0.5),
            Vector3::x(),
        );
        let view = render(&[&set], &c, &Pose::identity(), bg);
        let p = 4 * 9 + 4;
        // front (z=3, red, a=0.5) then back (z=5, blue, a=0.5)
        let expect = Vector3::x() * 0.5 + Vector3::z() * 0.25 + bg * 0.25;
        assert!((view.color[p] - expect).norm() < 1e-12);
        assert!((view.depth[p] - (0.5 * 3.0 + 0.25 * 5.0)).abs() < 1e-12);
        assert!((view.accum_alpha[p] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn equal_depth_ties_break_by_set_then_index() {
        let c = CameraIntrinsics { width: 9, height: 9, fx: 9.0, fy: 9.0, cx: 4.0, cy: 4.0 };
        let a = single(Vector3::new(0.0, 0.0, 4.0), -2.0, 0.5, Vector3::x());
        let b = single(Vector3::new(0.0, 0.0, 4.0), -2.0, 0.5, Vector3::z());
        let p = 4 * 9 + 4;
        let v1 = render(&[&a, &b], &c, &Pose::identity(), Vector3::zeros());
        let expect = Vector3::x() * 0.5 + Vector3::z() * 0.25;
        assert!((v1.color[p] - expect).norm() < 1e-12);
        let v2 = render(&[&b, &a], &c, &Pose::identity(), Vector3::zeros());
        let expect2 = Vector3::z() * 0.5 + Vector3::x() * 0.25;
        assert!((v2.color[p] - expect2).norm() < 1e-12);
    }

    #[test]
    fn matches_oracle_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = random_set(&mut rng, 12);
            let b = random_set(&mut rng, 5);
            let bg = Vector3::new(rng.gen(), rng.gen(), rng.gen());
            let c = cam(24, 24);
            let fast = render(&[&a, &b], &c, &Pose::identity(), bg);
            let slow = render_oracle(&[&a, &b], &c, &Pose::identity(), bg);
            for p in 0..fast.color.len() {
                assert!((fast.color[p] - slow.color[p]).norm() < 1e-12);
                assert!((fast.depth[p] - slow.depth[p]).abs() < 1e-12);
                assert!((fast.accum_alpha[p] - slow.accum_alpha[p]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng, 40);
        let c = cam(32, 32);
        let v1 = render(&[&set], &c, &Pose::identity(), Vector3::repeat(0.5));
        let v2 = render(&[&set], &c, &Pose::identity(), Vector3::repeat(0.5));
        assert_eq!(v1.color, v2.color);
        assert_eq!(v1.depth, v2.depth);
        assert_eq!(v1.accum_alpha, v2.accum_alpha);
    }

    #[test]
    fn accum_alpha_bounded_and_color_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let set = random_set(&mut rng, 30);
        let view = render(&[&set], &cam(16, 16), &Pose::identity(), Vector3::zeros());
        for p in 0..view.color.len() {
            assert!(view.accum_alpha[p] >= 0.0 && view.accum_alpha[p] <= 1.0);
            for ch in 0..3 {
                assert!(view.color[p][ch] >= -1e-12 && view.color[p][ch] <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn ray_probe_sees_gaussian() {
        let set = single(Vector3::new(0.0, 0.0, 0.0), (0.1f64).ln(), 0.8, Vector3::x());
        let hit = accum_alpha_along_ray(
            &[&set],
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::new(0.0, 0.0, 1.0),
        );
        assert!(hit > 0.5, "hit alpha {hit}");
        let miss = accum_alpha_along_ray(
            &[&set],
            Vector3::new(10.0, 0.0, -3.0),
            Vector3::new(0.0, 0.0, 1.0),
        );
        assert!(miss < 1e-3, "miss alpha {miss}");
    }

    /// Scalar objective used by the finite-difference checks.
    fn fd_loss(
        sets: &[&GaussianSet],
        c: &CameraIntrinsics,
        pose: &Pose,
        bg: Vector3<f64>,
        wc: &[Vector3<f64>],
        wd: &[f64],
    ) -> f64 {
        let view = render(sets, c, pose, bg);
        let mut loss = 0.0;
        for p in 0..view.color.len() {
            loss += wc[p].dot(&view.color[p]) + wd[p] * view.depth[p];
        }
        loss
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = cam(16, 16);
        let pose = Pose::identity();
        for scene in 0..4 {
            let set = random_set(&mut rng, 6);
            let bg = Vector3::new(0.3, 0.2, 0.1);
            let wc: Vec<Vector3<f64>> =
                (0..256).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
            let wd: Vec<f64> = (0..256).map(|_| rng.gen::<f64>() * 0.2).collect();

            let view = render(&[&set], &c, &pose, bg);
            let grads =
                render_backward(&view, &wc, Some(&wd), &[&set], &c, &pose).unwrap();
            let g = &grads[0];

            let h = 1e-5;
            let check = |get: &dyn Fn(&GaussianSet) -> f64,
                             set_p: &dyn Fn(&mut GaussianSet, f64),
                             analytic: f64,
                             label: &str| {
                let base = get(&set);
                let mut sp = set.clone();
                set_p(&mut sp, base + h);
                let lp = fd_loss(&[&sp], &c, &pose, bg, &wc, &wd);
                set_p(&mut sp, base - h);
                let lm = fd_loss(&[&sp], &c, &pose, bg, &wc, &wd);
                let fd = (lp - lm) / (2.0 * h);
                let denom = fd.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    (fd - analytic).abs() / denom < 1e-3,
                    "scene {scene} {label}: fd={fd} analytic={analytic}"
                );
            };

            for i in 0..set.len() {
                for ax in 0..3 {
                    check(
                        &|s| s.positions[i][ax],
                        &|s, v| s.positions[i][ax] = v,
                        g.d_positions[i][ax],
                        &format!("pos[{i}][{ax}]"),
                    );
                    check(
                        &|s| s.log_scales[i][ax],
                        &|s, v| s.log_scales[i][ax] = v,
                        g.d_log_scales[i][ax],
                        &format!("scale[{i}][{ax}]"),
                    );
                    check(
                        &|s| s.colors[i][ax],
                        &|s, v| s.colors[i][ax] = v,
                        g.d_colors[i][ax],
                        &format!("color[{i}][{ax}]"),
                    );
                }
                for k in 0..4 {
                    check(
                        &|s| s.rotations[i][k],
                        &|s, v| s.rotations[i][k] = v,
                        g.d_rotations[i][k],
                        &format!("rot[{i}][{k}]"),
                    );
                }
                check(
                    &|s| s.opacity_logits[i],
                    &|s, v| s.opacity_logits[i] = v,
                    g.d_opacity_logits[i],
                    &format!("opacity[{i}]"),
                );
            }
        }
    }

    #[test]
    fn backward_requires_forward_state() {
        let set = GaussianSet::default();
        let c = cam(4, 4);
        let view = render_oracle(&[&set], &c, &Pose::identity(), Vector3::zeros());
        let wc = vec![Vector3::zeros(); 16];
        let err = render_backward(&view, &wc, None, &[&set], &c, &Pose::identity());
        assert!(matches!(err, Err(RenderError::MissingForwardState)));
    }

    #[test]
    fn backward_gradients_split_per_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = random_set(&mut rng, 4);
        let b = random_set(&mut rng, 3);
        let c = cam(16, 16);
        let wc: Vec<Vector3<f64>> = (0..256).map(|_| Vector3::repeat(1.0)).collect();
        let view = render(&[&a, &b], &c, &Pose::identity(), Vector3::zeros());
        let grads = render_backward(&view, &wc, None, &[&a, &b], &c, &Pose::identity()).unwrap();
        assert_eq!(grads.len(), 2);
        assert_eq!(grads[0].len(), 4);
        assert_eq!(grads[1].len(), 3);
        assert!(grads[0].hit_pixels.iter().any(|&n| n > 0));
        assert!(grads[1].hit_pixels.iter().any(|&n| n > 0));
    }
}
