//! Per-block optimization: Adam over the five parameter groups, loss
//! scheduling, mini-batch view sampling and block-only densification.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffers::{DepthMap, ImageRgb};
use crate::gaussians::{BlockGaussianState, GaussianSet};
use crate::losses::{
    depth_prior_loss, lower_median, make_pseudo_pose, photometric_loss, pseudo_view_loss,
    warp_pseudo_to_ref,
};
use crate::render::{render, render_backward, GradientSet, Pose};
use crate::sfm::CameraIntrinsics;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("block {0} has no training views")]
    NoTrainingViews(u32),
    #[error("loss diverged to a non-finite value at iteration {0}")]
    DivergedLoss(usize),
    #[error("render error: {0}")]
    Render(#[from] crate::render::RenderError),
    #[error("loss error: {0}")]
    Loss(#[from] crate::losses::LossError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// SSIM mixing weight in the photometric term.
    pub lambda_ssim: f64,
    /// Fraction of the run after which pseudo-view supervision switches on.
    pub pseudo_start_fraction: f64,
    /// Pseudo-camera disparity, in pixels at the median scene depth.
    pub pseudo_delta_px: f64,
    pub use_aux: bool,
    pub use_pseudo: bool,
    pub use_depth_prior: bool,
    pub densify_start: usize,
    pub densify_interval: usize,
    /// Densification stops after this fraction of the run.
    pub densify_stop_fraction: f64,
    /// Mean screen-space (NDC) gradient-norm threshold for densification.
    pub densify_grad_threshold: f64,
    /// Gaussians larger than this fraction of the block diagonal are split;
    /// smaller candidates are cloned.
    pub densify_split_extent_fraction: f64,
    /// Factor the split children's scales are divided by.
    pub split_scale_shrink: f64,
    pub prune_opacity: f64,
    /// Gaussians whose largest world-space scale exceeds this fraction of
    /// the block diagonal are pruned at densification events. Oversized
    /// primitives are invisible junk in practice (background-colored or
    /// hidden behind content) yet blanket the scene's free space with
    /// low-grade opacity.
    pub prune_scale_fraction: f64,
    pub lr_position: f64,
    pub lr_position_final: f64,
    pub lr_color: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub background: [f64; 3],
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 4,
            lambda_ssim: 0.2,
            pseudo_start_fraction: 0.25,
            pseudo_delta_px: 2.0,
            use_aux: true,
            use_pseudo: true,
            use_depth_prior: true,
            densify_start: 500,
            densify_interval: 200,
            densify_stop_fraction: 0.5,
            densify_grad_threshold: 2e-4,
            densify_split_extent_fraction: 0.01,
            split_scale_shrink: 1.6,
            prune_opacity: 0.005,
            prune_scale_fraction: 0.25,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_color: 2.5e-3,
            lr_opacity: 5e-2,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            background: [0.0, 0.0, 0.0],
            rng_seed: 0,
        }
    }
}

/// Loss-term weights at iteration `t` of `total`.
///
/// The depth weight decays geometrically from 1 to 0.1 over the run. The
/// pseudo weight is 0 until `pseudo_start`, then rises geometrically from
/// 0.1 to 1 over the remainder.
pub fn schedule_weights(t: usize, total: usize, pseudo_start: usize) -> (f64, f64) {
    let total = total.max(1) as f64;
    let depth = 0.1f64.powf(t as f64 / total);
    let pseudo = if t < pseudo_start {
        0.0
    } else {
        let span = (total - pseudo_start as f64).max(1.0);
        0.1f64.powf(1.0 - (t - pseudo_start) as f64 / span)
    };
    (depth, pseudo)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-15;

/// Flat first/second-moment buffers for one parameter group.
#[derive(Debug, Clone, Default)]
struct AdamGroup {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamGroup {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, t: u64) {
        debug_assert_eq!(params.len(), grads.len());
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }

    /// Keeps rows selected by `keep` (stride `width` scalars per row).
    fn prune(&mut self, keep: &[bool], width: usize) {
        let filter = |buf: &mut Vec<f64>| {
            let mut out = Vec::with_capacity(buf.len());
            for (row, &k) in keep.iter().enumerate() {
                if k {
                    out.extend_from_slice(&buf[row * width..(row + 1) * width]);
                }
            }
            *buf = out;
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }

    /// Appends `rows` fresh zero-state rows.
    fn grow(&mut self, rows: usize, width: usize) {
        self.m.extend(std::iter::repeat(0.0).take(rows * width));
        self.v.extend(std::iter::repeat(0.0).take(rows * width));
    }
}

/// Adam state for one Gaussian set, with one group per parameter column.
#[derive(Debug, Clone)]
pub struct Adam {
    positions: AdamGroup,
    rotations: AdamGroup,
    log_scales: AdamGroup,
    opacity_logits: AdamGroup,
    colors: AdamGroup,
    step_count: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            positions: AdamGroup::new(3 * n),
            rotations: AdamGroup::new(4 * n),
            log_scales: AdamGroup::new(3 * n),
            opacity_logits: AdamGroup::new(n),
            colors: AdamGroup::new(3 * n),
            step_count: 0,
        }
    }

    pub fn step(&mut self, set: &mut GaussianSet, grads: &GradientSet, lrs: &GroupLearningRates) {
        self.step_count += 1;
        let t = self.step_count;
        step_vec3(&mut self.positions, &mut set.positions, &grads.d_positions, lrs.position, t);
        {
            let mut flat_p: Vec<f64> = set.rotations.iter().flatten().copied().collect();
            let flat_g: Vec<f64> = grads.d_rotations.iter().flatten().copied().collect();
            self.rotations.step(&mut flat_p, &flat_g, lrs.rotation, t);
            for (i, q) in set.rotations.iter_mut().enumerate() {
                q.copy_from_slice(&flat_p[4 * i..4 * i + 4]);
            }
        }
        step_vec3(&mut self.log_scales, &mut set.log_scales, &grads.d_log_scales, lrs.scale, t);
        self.opacity_logits.step(
            &mut set.opacity_logits,
            &grads.d_opacity_logits,
            lrs.opacity,
            t,
        );
        step_vec3(&mut self.colors, &mut set.colors, &grads.d_colors, lrs.color, t);
        set.normalize_rotations();
    }

    pub fn prune(&mut self, keep: &[bool]) {
        self.positions.prune(keep, 3);
        self.rotations.prune(keep, 4);
        self.log_scales.prune(keep, 3);
        self.opacity_logits.prune(keep, 1);
        self.colors.prune(keep, 3);
    }

    pub fn grow(&mut self, rows: usize) {
        self.positions.grow(rows, 3);
        self.rotations.grow(rows, 4);
        self.log_scales.grow(rows, 3);
        self.opacity_logits.grow(rows, 1);
        self.colors.grow(rows, 3);
    }
}

fn step_vec3(group: &mut AdamGroup, params: &mut [Vector3<f64>], grads: &[Vector3<f64>], lr: f64, t: u64) {
    let flat_p: Vec<f64> = params.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let flat_g: Vec<f64> = grads.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
    let mut flat_p = flat_p;
    group.step(&mut flat_p, &flat_g, lr, t);
    for (i, p) in params.iter_mut().enumerate() {
        *p = Vector3::new(flat_p[3 * i], flat_p[3 * i + 1], flat_p[3 * i + 2]);
    }
}

pub struct GroupLearningRates {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl TrainConfig {
    /// Per-iteration learning rates; the position rate decays geometrically
    /// and is expressed in units of the block's spatial scale.
    pub fn learning_rates(&self, t: usize, spatial_scale: f64) -> GroupLearningRates {
        let frac = t as f64 / self.iterations.max(1) as f64;
        let position =
            self.lr_position * (self.lr_position_final / self.lr_position).powf(frac) * spatial_scale;
        GroupLearningRates {
            position,
            rotation: self.lr_rotation,
            scale: self.lr_scale,
            opacity: self.lr_opacity,
            color: self.lr_color,
        }
    }
}

// ---------------------------------------------------------------------------
// Densification
// ---------------------------------------------------------------------------

/// Screen-space gradient statistics accumulated between densification
/// events, tracking the block set only.
#[derive(Debug, Clone)]
pub struct DensifyTracker {
    grad_accum: Vec<f64>,
    hit_iters: Vec<u32>,
}

impl DensifyTracker {
    pub fn new(n: usize) -> Self {
        Self { grad_accum: vec![0.0; n], hit_iters: vec![0; n] }
    }

    pub fn record(&mut self, grads: &GradientSet) {
        for i in 0..self.grad_accum.len() {
            if grads.hit_pixels[i] > 0 {
                self.grad_accum[i] += grads.pos2d_grad_ndc[i].norm();
                self.hit_iters[i] += 1;
            }
        }
    }

    fn reset(&mut self, n: usize) {
        self.grad_accum = vec![0.0; n];
        self.hit_iters = vec![0; n];
    }
}

/// One densify-and-prune event over the block set. Splits large
/// high-gradient Gaussians (sampling the children inside the parent),
/// clones small ones, prunes near-transparent primitives, and keeps the
/// Adam state aligned with the surviving rows. The auxiliary set is never
/// densified or pruned.
pub fn densify_and_prune(
    state: &mut BlockGaussianState,
    tracker: &mut DensifyTracker,
    adam: &mut Adam,
    cfg: &TrainConfig,
    spatial_scale: f64,
    rng: &mut ChaCha8Rng,
) {
    let bounds = state.block_bounds;
    let alignment = state.alignment;
    let set = &mut state.block;
    let n = set.len();
    let mut clones: Vec<usize> = Vec::new();
    let mut splits: Vec<usize> = Vec::new();
    for i in 0..n {
        if tracker.hit_iters[i] == 0 {
            continue;
        }
        let avg = tracker.grad_accum[i] / tracker.hit_iters[i] as f64;
        if avg <= cfg.densify_grad_threshold {
            continue;
        }
        let max_scale = set.log_scales[i].map(f64::exp).max();
        if max_scale > cfg.densify_split_extent_fraction * spatial_scale {
            splits.push(i);
        } else {
            clones.push(i);
        }
    }

    // clones: duplicate in place
    for &i in &clones {
        set.push(
            set.positions[i],
            set.rotations[i],
            set.log_scales[i],
            set.opacity_logits[i],
            set.colors[i],
        );
    }
    adam.grow(clones.len());

    // splits: two children sampled from the parent's own distribution with
    // shrunk scales, clamped into the block bounds so new capacity stays
    // mergeable; the parent is pruned afterwards
    let mut split_parent = vec![false; set.len()];
    for &i in &splits {
        split_parent[i] = true;
        let rot = set.rotation_matrix(i);
        let scales = set.log_scales[i].map(f64::exp);
        let child_log_scales = set.log_scales[i].map(|s| s - cfg.split_scale_shrink.ln());
        for _ in 0..2 {
            let local = Vector3::new(
                gauss_sample(rng) * scales.x,
                gauss_sample(rng) * scales.y,
                gauss_sample(rng) * scales.z,
            );
            let position =
                clamp_to_bounds(set.positions[i] + rot * local, &bounds, &alignment);
            set.push(
                position,
                set.rotations[i],
                child_log_scales,
                set.opacity_logits[i],
                set.colors[i],
            );
        }
    }
    adam.grow(2 * splits.len());

    // prune split parents, near-transparent, oversized and drifted-out
    // primitives (out-of-bounds centers would be cropped at merge anyway;
    // dropping them early lets in-bounds capacity take over)
    let scale_cap = cfg.prune_scale_fraction * spatial_scale;
    let keep: Vec<bool> = (0..set.len())
        .map(|i| {
            let parent_split = i < split_parent.len() && split_parent[i];
            let aligned = alignment * set.positions[i];
            !parent_split
                && set.opacity(i) >= cfg.prune_opacity
                && set.log_scales[i].map(f64::exp).max() <= scale_cap
                && bounds.contains([aligned.x, aligned.z])
        })
        .collect();
    set.retain_by(&keep);
    adam.prune(&keep);
    tracker.reset(set.len());
}

/// Clamps a world position so its aligned ground-plane coordinates fall
/// inside the block rectangle.
fn clamp_to_bounds(
    position: Vector3<f64>,
    bounds: &crate::partition::Rect,
    alignment: &nalgebra::Matrix3<f64>,
) -> Vector3<f64> {
    let mut aligned = alignment * position;
    aligned.x = aligned.x.clamp(bounds.min[0], bounds.max[0]);
    aligned.z = aligned.z.clamp(bounds.min[1], bounds.max[1]);
    alignment.transpose() * aligned
}

/// Box-Muller standard normal draw (two uniforms per sample, one discarded
/// branch kept for determinism simplicity).
fn gauss_sample(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One supervising view: ground-truth image, camera, and optional prior.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub view_id: u32,
    pub cam: CameraIntrinsics,
    pub pose: Pose,
    pub image: ImageRgb,
    pub depth_prior: Option<DepthMap>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub photometric: f64,
    pub depth: f64,
    pub pseudo: f64,
    pub block_count: usize,
    pub aux_count: usize,
}

pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub final_loss: f64,
}

/// Optimizes one block's Gaussians in place against its assigned views.
///
/// Each iteration samples a mini-batch of views without replacement,
/// accumulates averaged gradients from the photometric, depth-prior and
/// pseudo-view terms, then applies one Adam step per set. Densification
/// runs on the block set only, inside its configured window. The whole loop
/// is driven by a single seeded RNG, so results are reproducible for a
/// given `(config, views, initialization)` triple.
pub fn optimize_block(
    state: &mut BlockGaussianState,
    views: &[TrainView],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if views.is_empty() {
        return Err(TrainError::NoTrainingViews(state.block_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let spatial_scale = state.block_bounds.diagonal();
    let pseudo_start = (cfg.pseudo_start_fraction * cfg.iterations as f64).round() as usize;
    let densify_stop = (cfg.densify_stop_fraction * cfg.iterations as f64).round() as usize;
    let background = Vector3::new(cfg.background[0], cfg.background[1], cfg.background[2]);

    let mut adam_block = Adam::new(state.block.len());
    let mut adam_aux = Adam::new(state.auxiliary.len());
    let mut tracker = DensifyTracker::new(state.block.len());
    let mut records = Vec::new();
    let mut final_loss = 0.0;

    let mut view_order: Vec<usize> = (0..views.len()).collect();

    for t in 0..cfg.iterations {
        let (depth_w, pseudo_w) = schedule_weights(t, cfg.iterations, pseudo_start);
        let batch_len = cfg.batch_size.min(views.len());
        // partial Fisher-Yates: first `batch_len` entries form the batch
        for k in 0..batch_len {
            let j = rng.gen_range(k..view_order.len());
            view_order.swap(k, j);
        }
        let batch: Vec<usize> = view_order[..batch_len].to_vec();
        let inv_batch = 1.0 / batch_len as f64;

        let mut g_block = GradientSet::zeros(state.block.len());
        let mut g_aux = GradientSet::zeros(state.auxiliary.len());
        let mut loss_photo = 0.0;
        let mut loss_depth = 0.0;
        let mut loss_pseudo = 0.0;

        for (bi, &vi) in batch.iter().enumerate() {
            let view = &views[vi];
            let sets: Vec<&GaussianSet> = if cfg.use_aux {
                vec![&state.block, &state.auxiliary]
            } else {
                vec![&state.block]
            };
            let rendered = render(&sets, &view.cam, &view.pose, background);
            let (photo, mut d_color) =
                photometric_loss(&rendered.color_image(), &view.image, cfg.lambda_ssim)?;
            loss_photo += photo * inv_batch;

            let mut d_depth: Option<Vec<f64>> = None;
            if cfg.use_depth_prior && depth_w > 0.0 {
                if let Some(prior) = &view.depth_prior {
                    if let Some(out) =
                        depth_prior_loss(&rendered.depth, &rendered.accum_alpha, prior)
                    {
                        loss_depth += depth_w * out.loss * inv_batch;
                        d_depth =
                            Some(out.d_depth.iter().map(|g| g * depth_w * inv_batch).collect());
                    }
                }
            }
            for g in d_color.iter_mut() {
                *g *= inv_batch;
            }
            let grads = render_backward(
                &rendered,
                &d_color,
                d_depth.as_deref(),
                &sets,
                &view.cam,
                &view.pose,
            )?;
            g_block.add_assign(&grads[0]);
            if cfg.use_aux {
                g_aux.add_assign(&grads[1]);
            }

            // pseudo-view supervision on the first view of the batch: render
            // from a laterally shifted camera, warp that rendering into the
            // reference frame via its own depth, and compare against the
            // reference ground truth
            if bi == 0 && cfg.use_pseudo && pseudo_w > 0.0 {
                let positive: Vec<f64> =
                    rendered.depth.iter().copied().filter(|&d| d > 0.0).collect();
                if let Some(median_depth) = lower_median(&positive) {
                    let pse_pose = make_pseudo_pose(
                        &view.pose,
                        &view.cam,
                        median_depth,
                        cfg.pseudo_delta_px,
                    );
                    let pse_render = render(&sets, &view.cam, &pse_pose, background);
                    // the warp correspondence is a constant of the step;
                    // gradients flow only into the warped colors
                    let warp = warp_pseudo_to_ref(
                        &pse_render.color_image(),
                        &pse_render.depth,
                        &view.cam,
                        &pse_pose,
                        &view.pose,
                    );
                    if let Some((pl, mut pg)) = pseudo_view_loss(&view.image, &warp) {
                        loss_pseudo += pseudo_w * pl * inv_batch;
                        for g in pg.iter_mut() {
                            *g *= pseudo_w * inv_batch;
                        }
                        let pse_grads = render_backward(
                            &pse_render,
                            &pg,
                            None,
                            &sets,
                            &view.cam,
                            &pse_pose,
                        )?;
                        g_block.add_assign(&pse_grads[0]);
                        if cfg.use_aux {
                            g_aux.add_assign(&pse_grads[1]);
                        }
                    }
                }
            }
        }

        let total_loss = loss_photo + loss_depth + loss_pseudo;
        if !total_loss.is_finite() {
            return Err(TrainError::DivergedLoss(t));
        }
        final_loss = total_loss;

        tracker.record(&g_block);
        let lrs = cfg.learning_rates(t, spatial_scale);
        adam_block.step(&mut state.block, &g_block, &lrs);
        if cfg.use_aux && !state.auxiliary.is_empty() {
            adam_aux.step(&mut state.auxiliary, &g_aux, &lrs);
        }

        let in_window = t + 1 >= cfg.densify_start && t + 1 <= densify_stop;
        if in_window && (t + 1 - cfg.densify_start) % cfg.densify_interval == 0 {
            densify_and_prune(state, &mut tracker, &mut adam_block, cfg, spatial_scale, &mut rng);
        }

        if t % 50 == 0 || t + 1 == cfg.iterations {
            records.push(TrainRecord {
                iteration: t,
                loss: total_loss,
                photometric: loss_photo,
                depth: loss_depth,
                pseudo: loss_pseudo,
                block_count: state.block.len(),
                aux_count: state.auxiliary.len(),
            });
        }
    }

    Ok(TrainOutcome { records, final_loss })
}

/// Convenience wrapper used by the densification statistics: NDC gradient
/// scale for an image of the given size.
pub fn ndc_scale(width: usize, height: usize) -> Vector2<f64> {
    Vector2::new(width as f64 * 0.5, height as f64 * 0.5)
}
