//! Training objectives: photometric L1 + SSIM with analytic gradients, a
//! scale-aligned inverse-depth prior loss, and the pseudo-view warp used for
//! unobserved-region supervision.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::buffers::{DepthMap, ImageRgb};
use crate::render::{Pose, NEAR_PLANE};
use crate::sfm::CameraIntrinsics;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
}

// ---------------------------------------------------------------------------
// SSIM
// ---------------------------------------------------------------------------

const SSIM_RADIUS: i64 = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; 11] {
    let mut k = [0.0; 11];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    k
}

/// Separable unnormalized Gaussian correlation; the window is clipped at the
/// image border (normalization is handled by dividing by the same filter
/// applied to a constant-one image).
fn filter_raw(input: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for t in -SSIM_RADIUS..=SSIM_RADIUS {
                let xx = x as i64 + t;
                if xx >= 0 && (xx as usize) < w {
                    acc += k[(t + SSIM_RADIUS) as usize] * input[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for t in -SSIM_RADIUS..=SSIM_RADIUS {
                let yy = y as i64 + t;
                if yy >= 0 && (yy as usize) < h {
                    acc += k[(t + SSIM_RADIUS) as usize] * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over pixels and channels, with its gradient w.r.t. the first
/// image. Uses an 11x11 Gaussian window (sigma 1.5) clipped and renormalized
/// at the borders.
pub struct SsimOutput {
    pub value: f64,
    pub d_first: Vec<Vector3<f64>>,
}

pub fn ssim(first: &ImageRgb, second: &ImageRgb) -> Result<SsimOutput, LossError> {
    if first.width != second.width || first.height != second.height {
        return Err(LossError::DimensionMismatch(
            first.width,
            first.height,
            second.width,
            second.height,
        ));
    }
    let (w, h) = (first.width, first.height);
    let n = w * h;
    let z = filter_raw(&vec![1.0; n], w, h);
    let mut total = 0.0;
    let mut d_first = vec![Vector3::zeros(); n];

    for ch in 0..3 {
        let x: Vec<f64> = first.data.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = second.data.iter().map(|p| p[ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();

        let mx = filter_raw(&x, w, h);
        let my = filter_raw(&y, w, h);
        let mxx = filter_raw(&xx, w, h);
        let myy = filter_raw(&yy, w, h);
        let mxy = filter_raw(&xy, w, h);

        // per-pixel coefficient maps, pre-divided by the local window mass so
        // the gradient is a plain unnormalized correlation of these maps
        let mut u_mu = vec![0.0; n];
        let mut u_xx = vec![0.0; n];
        let mut u_xy = vec![0.0; n];
        for p in 0..n {
            let zp = z[p];
            let mu_x = mx[p] / zp;
            let mu_y = my[p] / zp;
            let sxx = mxx[p] / zp - mu_x * mu_x;
            let syy = myy[p] / zp - mu_y * mu_y;
            let sxy = mxy[p] / zp - mu_x * mu_y;
            let a1 = 2.0 * mu_x * mu_y + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            total += s;
            // partials with (mu_x, E[x^2], E[xy]) as independent moments
            let ds_dmu = (2.0 * mu_y * a2 - 2.0 * mu_y * a1) / (b1 * b2)
                - s * (2.0 * mu_x / b1 - 2.0 * mu_x / b2);
            let ds_dmxx = -s / b2;
            let ds_dmxy = 2.0 * a1 / (b1 * b2);
            u_mu[p] = ds_dmu / zp;
            u_xx[p] = ds_dmxx / zp;
            u_xy[p] = ds_dmxy / zp;
        }
        let g_mu = filter_raw(&u_mu, w, h);
        let g_xx = filter_raw(&u_xx, w, h);
        let g_xy = filter_raw(&u_xy, w, h);
        let scale = 1.0 / (3.0 * n as f64);
        for p in 0..n {
            d_first[p][ch] = scale * (g_mu[p] + 2.0 * x[p] * g_xx[p] + y[p] * g_xy[p]);
        }
    }

    Ok(SsimOutput { value: total / (3.0 * n as f64), d_first })
}

// ---------------------------------------------------------------------------
// Photometric loss
// ---------------------------------------------------------------------------

/// `(1 - lambda) * L1 + lambda * (1 - SSIM)` with gradient w.r.t. the
/// rendered image. Both terms average over pixels and channels.
pub fn photometric_loss(
    rendered: &ImageRgb,
    target: &ImageRgb,
    lambda: f64,
) -> Result<(f64, Vec<Vector3<f64>>), LossError> {
    let ssim_out = ssim(rendered, target)?;
    let n = rendered.data.len();
    let scale = 1.0 / (3.0 * n as f64);
    let mut l1 = 0.0;
    let mut grad = vec![Vector3::zeros(); n];
    for p in 0..n {
        for ch in 0..3 {
            let diff = rendered.data[p][ch] - target.data[p][ch];
            l1 += diff.abs() * scale;
            grad[p][ch] = (1.0 - lambda) * scale * sign(diff) - lambda * ssim_out.d_first[p][ch];
        }
    }
    Ok(((1.0 - lambda) * l1 + lambda * (1.0 - ssim_out.value), grad))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Lower median: for even counts, the smaller of the two central order
/// statistics. Returns the value and the index (into `values`) it came from.
fn lower_median_indexed(values: &[(f64, usize)]) -> Option<(f64, usize)> {
    if values.is_empty() {
        return None;
    }
    let mut sorted: Vec<(f64, usize)> = values.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Some(sorted[(sorted.len() - 1) / 2])
}

pub fn lower_median(values: &[f64]) -> Option<f64> {
    let indexed: Vec<(f64, usize)> = values.iter().copied().zip(0..).map(|(v, i)| (v, i)).collect();
    lower_median_indexed(&indexed).map(|(v, _)| v)
}

// ---------------------------------------------------------------------------
// Depth prior loss
// ---------------------------------------------------------------------------

pub struct DepthLossOutput {
    pub loss: f64,
    /// Gradient w.r.t. the rendered depth buffer (zero at invalid pixels).
    pub d_depth: Vec<f64>,
    pub valid_count: usize,
}

/// Scale-aligned inverse-depth L1 against a monocular prior.
///
/// A pixel participates when the prior is valid, the rendered depth is
/// positive and the accumulated alpha is at least 0.5. The prior's unknown
/// global scale is resolved with the (lower) median of per-pixel ratios
/// `prior / rendered`; the residual is measured in inverse-depth space:
/// `|s* / prior - 1 / rendered|`. Returns `None` when no pixel qualifies.
pub fn depth_prior_loss(
    rendered_depth: &[f64],
    accum_alpha: &[f64],
    prior: &DepthMap,
) -> Option<DepthLossOutput> {
    let n = rendered_depth.len();
    let mut ratios: Vec<(f64, usize)> = Vec::new();
    for p in 0..n {
        let e = prior.data[p];
        let r = rendered_depth[p];
        if e.is_finite() && e > 0.0 && r > 0.0 && accum_alpha[p] >= 0.5 {
            ratios.push((e / r, p));
        }
    }
    let (s_star, median_pixel) = lower_median_indexed(&ratios)?;
    let count = ratios.len();
    let inv_count = 1.0 / count as f64;

    let mut loss = 0.0;
    let mut d_depth = vec![0.0; n];
    let mut d_s = 0.0;
    for &(_, p) in &ratios {
        let e = prior.data[p];
        let r = rendered_depth[p];
        let resid = s_star / e - 1.0 / r;
        loss += resid.abs() * inv_count;
        let sgn = sign(resid);
        d_depth[p] += sgn * inv_count / (r * r);
        d_s += sgn * inv_count / e;
    }
    // median path: s* = prior_m / rendered_m
    let rm = rendered_depth[median_pixel];
    d_depth[median_pixel] += d_s * (-prior.data[median_pixel] / (rm * rm));

    Some(DepthLossOutput { loss, d_depth, valid_count: count })
}

// ---------------------------------------------------------------------------
// Pseudo views
// ---------------------------------------------------------------------------

/// Builds the laterally displaced pseudo camera for a reference view.
///
/// The camera shifts along its own x-axis by `median_depth * delta_px / fx`,
/// i.e. a disparity of roughly `delta_px` pixels at the median scene depth.
pub fn make_pseudo_pose(
    reference: &Pose,
    cam: &CameraIntrinsics,
    median_depth: f64,
    delta_px: f64,
) -> Pose {
    let shift = median_depth * delta_px / cam.fx;
    Pose {
        rotation: reference.rotation,
        translation: reference.translation + Vector3::new(shift, 0.0, 0.0),
    }
}

pub struct WarpResult {
    pub warped: ImageRgb,
    pub valid: Vec<bool>,
    /// For each target pixel, the source pixel whose color landed there.
    pub correspondence: Vec<Option<usize>>,
}

/// Forward-warps a rendered image between two cameras sharing intrinsics:
/// each source pixel with valid (finite, positive) depth is unprojected,
/// transformed, reprojected and scattered to the nearest target pixel with a
/// z-buffer (smaller target-frame depth wins; ties keep the first writer in
/// row-major source order). Records which source pixel supplied each target
/// pixel so loss gradients can be routed back.
pub fn warp_forward(
    source_image: &ImageRgb,
    source_depth: &[f64],
    cam: &CameraIntrinsics,
    source_pose: &Pose,
    target_pose: &Pose,
) -> WarpResult {
    let (w, h) = (source_image.width, source_image.height);
    let mut warped = ImageRgb::new(w, h);
    let mut valid = vec![false; w * h];
    let mut correspondence = vec![None; w * h];
    let mut zbuf = vec![f64::INFINITY; w * h];
    // relative transform source-cam -> target-cam
    let rel_rot = target_pose.rotation * source_pose.rotation.transpose();
    let rel_t = target_pose.translation - rel_rot * source_pose.translation;
    for v in 0..h {
        for u in 0..w {
            let idx = v * w + u;
            let d = source_depth[idx];
            if !(d.is_finite() && d > 0.0) {
                continue;
            }
            let pc_src = Vector3::new(
                (u as f64 - cam.cx) / cam.fx * d,
                (v as f64 - cam.cy) / cam.fy * d,
                d,
            );
            let pc = rel_rot * pc_src + rel_t;
            if pc.z < NEAR_PLANE {
                continue;
            }
            let proj = Vector2::new(cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy);
            let (ui, vi) = (proj.x.round(), proj.y.round());
            if ui < 0.0 || vi < 0.0 || ui >= w as f64 || vi >= h as f64 {
                continue;
            }
            let tgt = vi as usize * w + ui as usize;
            if pc.z < zbuf[tgt] {
                zbuf[tgt] = pc.z;
                warped.data[tgt] = source_image.data[idx];
                valid[tgt] = true;
                correspondence[tgt] = Some(idx);
            }
        }
    }
    WarpResult { warped, valid, correspondence }
}

/// Warps the pseudo-view rendering into the reference frame using the
/// pseudo-view's own rendered depth.
pub fn warp_pseudo_to_ref(
    pse_color: &ImageRgb,
    pse_depth: &[f64],
    cam: &CameraIntrinsics,
    pse_pose: &Pose,
    ref_pose: &Pose,
) -> WarpResult {
    warp_forward(pse_color, pse_depth, cam, pse_pose, ref_pose)
}

/// Masked L1 between the reference ground truth and the warped pseudo
/// rendering, averaged over mask-true pixels. The gradient is routed through
/// the stored correspondence back to the pseudo rendering's pixels; the warp
/// geometry itself is treated as constant. `None` when the mask is empty.
pub fn pseudo_view_loss(
    gt_ref: &ImageRgb,
    warp: &WarpResult,
) -> Option<(f64, Vec<Vector3<f64>>)> {
    let count = warp.valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return None;
    }
    let scale = 1.0 / (3.0 * count as f64);
    let mut loss = 0.0;
    let mut grad = vec![Vector3::zeros(); gt_ref.data.len()];
    for p in 0..gt_ref.data.len() {
        if !warp.valid[p] {
            continue;
        }
        let src = warp.correspondence[p].expect("valid pixels carry a correspondence");
        for ch in 0..3 {
            let diff = warp.warped.data[p][ch] - gt_ref.data[p][ch];
            loss += diff.abs() * scale;
            grad[src][ch] += scale * sign(diff);
        }
    }
    Some((loss, grad))
}
