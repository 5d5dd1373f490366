//! Training: the range-view losses and their hand-written gradients, a
//! bias-corrected adaptive-moment optimizer with per-group learning
//! rates, anchor densification (grow/split/prune/cap), and the driver
//! loop that jointly fits the background field and dynamic instances.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DVector, Matrix3, Vector3};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::dynamics::{boxes_for_frame, decompose_frame, transform_primitives};
use crate::field::{
    init_from_points, spawn_conditioned, Anchor, Checkpoint, Field, GaussianPrimitive,
    InstanceField, Mlp, MlpWeights, OptimBlob, SpawnResult,
};
use crate::grad::{
    rasterize_backward, spawn_backward, untransform_prim_grads, ChannelGrads, GradientBundle,
};
use crate::metrics::{blur11, SSIM_C1, SSIM_C2};
use crate::oracle::Dataset;
use crate::pose::Pose;
use crate::rangeview::{rangeimage_to_points, RangeImage, SensorSpec};
use crate::splat::{
    project_all, rasterize, ContributionTape, ProjectedGaussian, ProjectionMode, RenderOptions,
};
use crate::{Error, Result};

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Smallest base-scale component kept after a step.
const BASE_SCALE_EPS: f64 = 1e-4;
/// Instances observed with fewer points than this never get a field.
const MIN_INSTANCE_POINTS: usize = 30;
/// Consecutive bad iterations (non-finite or 10x-initial loss) tolerated
/// before the loop aborts.
const DIVERGENCE_PATIENCE: usize = 100;

/// Run hyperparameters. Everything numeric lives here, not in code; the
/// plain-text config file overrides field by field.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Structural-similarity share of the intensity loss.
    pub lambda_rho: f64,
    pub densify_until: usize,
    pub densify_window: usize,
    /// Mean absolute pixel-space positional gradient that marks an anchor
    /// for growth or splitting.
    pub grad_threshold: f64,
    pub prune_opacity: f64,
    /// Anchors wider than this split; narrower ones grow.
    pub voxel_size: f64,
    pub max_anchors: usize,
    pub init_anchors: usize,
    pub instance_anchors: usize,
    pub lr_position: f64,
    /// Position rate decays exponentially to this value at the last
    /// iteration.
    pub lr_position_final: f64,
    pub lr_feature: f64,
    pub lr_base_scale: f64,
    pub lr_mlp: f64,
    pub lr_latent: f64,
    pub w_rho: f64,
    pub w_depth: f64,
    pub w_raydrop: f64,
    pub w_alpha: f64,
    pub w_scale: f64,
    /// Beam scattering half-angle used by the differentiable renderer.
    /// The physical default of a sensor spec is far below the angular
    /// pixel pitch of any practical scan pattern, so training overrides
    /// it with a value near the pitch.
    pub divergence: f64,
    pub seed: u64,
    /// 0 disables interval checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub pseudo_projection: bool,
    pub disable_aabb: bool,
    pub disable_view_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 7000,
            lambda_rho: 0.2,
            densify_until: 3000,
            densify_window: 100,
            grad_threshold: 0.006,
            prune_opacity: 0.005,
            voxel_size: 0.5,
            max_anchors: 50_000,
            init_anchors: 2000,
            instance_anchors: 256,
            lr_position: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_feature: 2.5e-3,
            lr_base_scale: 7e-3,
            lr_mlp: 2e-3,
            lr_latent: 1e-3,
            w_rho: 1.0,
            w_depth: 1.0,
            w_raydrop: 1.0,
            w_alpha: 1.0,
            w_scale: 1.0,
            divergence: 0.03,
            seed: 0,
            checkpoint_every: 0,
            pseudo_projection: false,
            disable_aabb: false,
            disable_view_inputs: false,
        }
    }
}

impl TrainConfig {
    /// Parse `key = value` lines; `#` starts a comment; unknown keys and
    /// malformed values are parse errors carrying the line number.
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::Parse {
                line: line_no,
                msg: format!("{key}: expected {what}, got {value:?}"),
            };
            macro_rules! num {
                ($field:ident, $ty:ty, $what:expr) => {
                    cfg.$field = value.parse::<$ty>().map_err(|_| bad($what))?
                };
            }
            match key {
                "iterations" => num!(iterations, usize, "a nonnegative integer"),
                "lambda_rho" => num!(lambda_rho, f64, "a real"),
                "densify_until" => num!(densify_until, usize, "a nonnegative integer"),
                "densify_window" => num!(densify_window, usize, "a positive integer"),
                "grad_threshold" => num!(grad_threshold, f64, "a real"),
                "prune_opacity" => num!(prune_opacity, f64, "a real"),
                "voxel_size" => num!(voxel_size, f64, "a real"),
                "max_anchors" => num!(max_anchors, usize, "a positive integer"),
                "init_anchors" => num!(init_anchors, usize, "a positive integer"),
                "instance_anchors" => num!(instance_anchors, usize, "a positive integer"),
                "lr_position" => num!(lr_position, f64, "a real"),
                "lr_position_final" => num!(lr_position_final, f64, "a real"),
                "lr_feature" => num!(lr_feature, f64, "a real"),
                "lr_base_scale" => num!(lr_base_scale, f64, "a real"),
                "lr_mlp" => num!(lr_mlp, f64, "a real"),
                "lr_latent" => num!(lr_latent, f64, "a real"),
                "w_rho" => num!(w_rho, f64, "a real"),
                "w_depth" => num!(w_depth, f64, "a real"),
                "w_raydrop" => num!(w_raydrop, f64, "a real"),
                "w_alpha" => num!(w_alpha, f64, "a real"),
                "w_scale" => num!(w_scale, f64, "a real"),
                "divergence" => num!(divergence, f64, "a real"),
                "seed" => num!(seed, u64, "a nonnegative integer"),
                "checkpoint_every" => num!(checkpoint_every, usize, "a nonnegative integer"),
                "pseudo_projection" => cfg.pseudo_projection = parse_bool(value).ok_or_else(|| bad("a boolean"))?,
                "disable_aabb" => cfg.disable_aabb = parse_bool(value).ok_or_else(|| bad("a boolean"))?,
                "disable_view_inputs" => {
                    cfg.disable_view_inputs = parse_bool(value).ok_or_else(|| bad("a boolean"))?
                }
                _ => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("unknown key {key:?}"),
                    })
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_str(&std::fs::read_to_string(path)?)
    }

    /// Serialize every hyperparameter as `key = value` lines; parsing the
    /// result reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "iterations = {}\nlambda_rho = {}\ndensify_until = {}\ndensify_window = {}\n\
             grad_threshold = {}\nprune_opacity = {}\nvoxel_size = {}\nmax_anchors = {}\n\
             init_anchors = {}\ninstance_anchors = {}\nlr_position = {}\nlr_position_final = {}\n\
             lr_feature = {}\nlr_base_scale = {}\nlr_mlp = {}\nlr_latent = {}\nw_rho = {}\n\
             w_depth = {}\nw_raydrop = {}\nw_alpha = {}\nw_scale = {}\ndivergence = {}\n\
             seed = {}\ncheckpoint_every = {}\npseudo_projection = {}\ndisable_aabb = {}\n\
             disable_view_inputs = {}\n",
            self.iterations,
            self.lambda_rho,
            self.densify_until,
            self.densify_window,
            self.grad_threshold,
            self.prune_opacity,
            self.voxel_size,
            self.max_anchors,
            self.init_anchors,
            self.instance_anchors,
            self.lr_position,
            self.lr_position_final,
            self.lr_feature,
            self.lr_base_scale,
            self.lr_mlp,
            self.lr_latent,
            self.w_rho,
            self.w_depth,
            self.w_raydrop,
            self.w_alpha,
            self.w_scale,
            self.divergence,
            self.seed,
            self.checkpoint_every,
            self.pseudo_projection,
            self.disable_aabb,
            self.disable_view_inputs,
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.densify_until > self.iterations {
            return Err(Error::domain(
                "densify_until must not exceed iterations",
            ));
        }
        if self.densify_window == 0 {
            return Err(Error::domain("densify_window must be positive"));
        }
        for (name, lr) in [
            ("lr_position", self.lr_position),
            ("lr_position_final", self.lr_position_final),
            ("lr_feature", self.lr_feature),
            ("lr_base_scale", self.lr_base_scale),
            ("lr_mlp", self.lr_mlp),
            ("lr_latent", self.lr_latent),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::domain(format!("{name} must be a positive real")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda_rho) {
            return Err(Error::domain("lambda_rho must lie in [0, 1]"));
        }
        for (name, w) in [
            ("w_rho", self.w_rho),
            ("w_depth", self.w_depth),
            ("w_raydrop", self.w_raydrop),
            ("w_alpha", self.w_alpha),
            ("w_scale", self.w_scale),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::domain(format!("{name} must be nonnegative")));
            }
        }
        if self.max_anchors == 0 || self.init_anchors == 0 || self.instance_anchors == 0 {
            return Err(Error::domain("anchor counts must be positive"));
        }
        if !(self.grad_threshold >= 0.0) {
            return Err(Error::domain("grad_threshold must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.prune_opacity) {
            return Err(Error::domain("prune_opacity must lie in [0, 1)"));
        }
        if !(self.voxel_size > 0.0) {
            return Err(Error::domain("voxel_size must be positive"));
        }
        if !(self.divergence > 0.0 && self.divergence < std::f64::consts::PI) {
            return Err(Error::domain("divergence must be a positive angle"));
        }
        Ok(())
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            mode: if self.pseudo_projection {
                ProjectionMode::PseudoPlane
            } else {
                ProjectionMode::MicroPlane
            },
            disable_aabb: self.disable_aabb,
        }
    }

    /// The dataset spec with the renderer's divergence bound substituted.
    pub fn render_spec(&self, spec: &SensorSpec) -> Result<SensorSpec> {
        (*spec).with_divergence(self.divergence)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" => Some(true),
        "false" | "0" => Some(false),
        _ => None,
    }
}

/// Weighted loss components; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub rho: f64,
    pub depth: f64,
    pub raydrop: f64,
    pub alpha: f64,
    pub scale: f64,
}

/// Loss value plus everything the backward pass needs: per-pixel channel
/// gradients and the per-primitive scale-regularizer gradients.
pub struct LossOutput {
    pub report: LossReport,
    pub channels: ChannelGrads,
    /// Aligned with the primitive list handed in.
    pub scale_grads: Vec<Vector3<f64>>,
}

/// All losses over one rendered frame against its ground truth:
/// masked L1 on depth, masked L1 + windowed structural dissimilarity on
/// intensity, L2 on the drop channel over all pixels, binary entropy of
/// the accumulated alpha, and the mean scale-volume of the Gaussians that
/// actually contributed. Channels are the raw composited sums, before
/// any drop thresholding.
pub fn loss_total(
    render: &RangeImage,
    tape: &ContributionTape,
    projected: &[ProjectedGaussian],
    primitives: &[GaussianPrimitive],
    gt: &RangeImage,
    cfg: &TrainConfig,
) -> Result<LossOutput> {
    let spec = &render.spec;
    if spec.beams != gt.spec.beams || spec.width != gt.spec.width {
        return Err(Error::domain("render and ground truth grids differ"));
    }
    let n_px = spec.pixel_count();
    if tape.per_pixel.len() != n_px {
        return Err(Error::domain("tape does not match the image grid"));
    }
    let (h, w) = (spec.beams, spec.width);
    let mut channels = ChannelGrads::zeros(spec);
    let mut report = LossReport::default();
    let nv = gt.valid.iter().filter(|v| **v).count();

    // Depth: L1 over pixels the sensor actually measured.
    if cfg.w_depth > 0.0 && nv > 0 {
        let gain = cfg.w_depth / nv as f64;
        let mut sum = 0.0;
        for i in 0..n_px {
            if !gt.valid[i] {
                continue;
            }
            let e = render.depth[i] - gt.depth[i];
            sum += e.abs();
            channels.depth[i] = gain * sign(e);
        }
        report.depth = gain * sum;
    }

    // Intensity: masked L1 blended with masked structural dissimilarity.
    if cfg.w_rho > 0.0 && nv > 0 {
        let l1_gain = cfg.w_rho * (1.0 - cfg.lambda_rho) / nv as f64;
        let mut sum = 0.0;
        for i in 0..n_px {
            if !gt.valid[i] {
                continue;
            }
            let e = render.intensity[i] - gt.intensity[i];
            sum += e.abs();
            channels.intensity[i] = l1_gain * sign(e);
        }
        report.rho = l1_gain * sum;
        if cfg.lambda_rho > 0.0 {
            let (dssim, g) = masked_dssim_backward(
                &render.intensity,
                &gt.intensity,
                &gt.valid,
                h,
                w,
                nv,
            );
            report.rho += cfg.w_rho * cfg.lambda_rho * dssim;
            let gain = cfg.w_rho * cfg.lambda_rho;
            for i in 0..n_px {
                channels.intensity[i] += gain * g[i];
            }
        }
    }

    // Drop channel: squared error against the binary mask, all pixels.
    if cfg.w_raydrop > 0.0 {
        let gain = cfg.w_raydrop / n_px as f64;
        let mut sum = 0.0;
        for i in 0..n_px {
            let e = render.raydrop[i] - gt.raydrop[i];
            sum += e * e;
            channels.raydrop[i] = gain * 2.0 * e;
        }
        report.raydrop = gain * sum;
    }

    // Accumulated alpha: binary entropy, exactly zero at saturation.
    if cfg.w_alpha > 0.0 {
        let gain = cfg.w_alpha / n_px as f64;
        let mut sum = 0.0;
        for i in 0..n_px {
            let a = render.accum_alpha[i];
            if a > 0.0 && a < 1.0 {
                sum -= a * a.ln() + (1.0 - a) * (1.0 - a).ln();
            }
            let ac = a.clamp(1e-12, 1.0 - 1e-12);
            channels.accum_alpha[i] = gain * ((1.0 - ac) / ac).ln();
        }
        report.alpha = gain * sum;
    }

    // Scale regularizer: mean volume proxy over contributing Gaussians.
    let mut scale_grads = vec![Vector3::zeros(); primitives.len()];
    if cfg.w_scale > 0.0 {
        let mut contributing = vec![false; primitives.len()];
        for px in &tape.per_pixel {
            for c in px {
                let pg = projected
                    .get(c.splat as usize)
                    .ok_or_else(|| Error::domain("tape does not match the projected list"))?;
                contributing[pg.source] = true;
            }
        }
        let count = contributing.iter().filter(|c| **c).count();
        if count > 0 {
            let gain = cfg.w_scale / count as f64;
            let mut sum = 0.0;
            for (i, p) in primitives.iter().enumerate() {
                if !contributing[i] {
                    continue;
                }
                let s = &p.scale;
                sum += s.x * s.y * s.z;
                scale_grads[i] = gain * Vector3::new(s.y * s.z, s.x * s.z, s.x * s.y);
            }
            report.scale = gain * sum;
        }
    }

    report.total = report.rho + report.depth + report.raydrop + report.alpha + report.scale;
    Ok(LossOutput {
        report,
        channels,
        scale_grads,
    })
}

fn sign(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean structural dissimilarity over valid pixels of the pre-masked
/// images, and its gradient with respect to `x`. Both images are
/// multiplied by the mask first, so invalid regions read as zeros inside
/// every 11x11 window; the blur's zero padding makes it self-adjoint,
/// which the reverse accumulation below relies on.
fn masked_dssim_backward(
    x: &[f64],
    y: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    nv: usize,
) -> (f64, Vec<f64>) {
    let n = h * w;
    let m = |i: usize| if mask[i] { 1.0 } else { 0.0 };
    let xm: Vec<f64> = (0..n).map(|i| x[i] * m(i)).collect();
    let ym: Vec<f64> = (0..n).map(|i| y[i] * m(i)).collect();
    let mu_x = blur11(&xm, h, w);
    let mu_y = blur11(&ym, h, w);
    let xx: Vec<f64> = xm.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ym.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xm.iter().zip(&ym).map(|(a, b)| a * b).collect();
    let g_xx = blur11(&xx, h, w);
    let g_yy = blur11(&yy, h, w);
    let g_xy = blur11(&xy, h, w);

    let mut sum_map = 0.0;
    let mut gmu = vec![0.0; n];
    let mut ggxx = vec![0.0; n];
    let mut ggxy = vec![0.0; n];
    let upstream = -1.0 / nv as f64;
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = g_xx[i] - mx * mx;
        let var_y = g_yy[i] - my * my;
        let cov = g_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = var_x + var_y + SSIM_C2;
        let map = (a1 * a2) / (b1 * b2);
        if mask[i] {
            sum_map += map;
            gmu[i] = upstream
                * (2.0 * my * (a2 - a1) / (b1 * b2) - 2.0 * mx * map * (1.0 / b1 - 1.0 / b2));
            ggxx[i] = upstream * (-map / b2);
            ggxy[i] = upstream * (2.0 * a1 / (b1 * b2));
        }
    }
    let bmu = blur11(&gmu, h, w);
    let bxx = blur11(&ggxx, h, w);
    let bxy = blur11(&ggxy, h, w);
    let mut grad = vec![0.0; n];
    for i in 0..n {
        grad[i] = m(i) * (bmu[i] + 2.0 * xm[i] * bxx[i] + ym[i] * bxy[i]);
    }
    (1.0 - sum_map / nv as f64, grad)
}

/// First and second moment estimates for one anchor group (one field).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMoments {
    pub pos_m: Vec<Vector3<f64>>,
    pub pos_v: Vec<Vector3<f64>>,
    pub feat_m: Vec<DVector<f64>>,
    pub feat_v: Vec<DVector<f64>>,
    pub bs_m: Vec<Vector3<f64>>,
    pub bs_v: Vec<Vector3<f64>>,
    pub lat_m: Vec<DVector<f64>>,
    pub lat_v: Vec<DVector<f64>>,
}

impl GroupMoments {
    fn new(anchors: &[Anchor], latents: usize) -> Self {
        let n = anchors.len();
        let fd = anchors.first().map_or(0, |a| a.feature.len());
        let ld = crate::field::LATENT_DIM;
        Self {
            pos_m: vec![Vector3::zeros(); n],
            pos_v: vec![Vector3::zeros(); n],
            feat_m: vec![DVector::zeros(fd); n],
            feat_v: vec![DVector::zeros(fd); n],
            bs_m: vec![Vector3::zeros(); n],
            bs_v: vec![Vector3::zeros(); n],
            lat_m: vec![DVector::zeros(ld); latents],
            lat_v: vec![DVector::zeros(ld); latents],
        }
    }

    /// Re-index the anchor moments after densification: `remap[new]` is
    /// the old slot to carry over, `None` starts a fresh child at zero.
    fn remap_anchors(&mut self, remap: &[Option<usize>]) {
        let fd = self.feat_m.first().map_or(0, |f| f.len());
        let take3 = |src: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
            remap
                .iter()
                .map(|r| r.map_or_else(Vector3::zeros, |i| src[i]))
                .collect()
        };
        let taked = |src: &[DVector<f64>]| -> Vec<DVector<f64>> {
            remap
                .iter()
                .map(|r| r.map_or_else(|| DVector::zeros(fd), |i| src[i].clone()))
                .collect()
        };
        self.pos_m = take3(&self.pos_m);
        self.pos_v = take3(&self.pos_v);
        self.bs_m = take3(&self.bs_m);
        self.bs_v = take3(&self.bs_v);
        self.feat_m = taked(&self.feat_m);
        self.feat_v = taked(&self.feat_v);
    }

    fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let push3 = |out: &mut Vec<f64>, v: &[Vector3<f64>]| {
            for x in v {
                out.extend_from_slice(&[x.x, x.y, x.z]);
            }
        };
        let pushd = |out: &mut Vec<f64>, v: &[DVector<f64>]| {
            for x in v {
                out.extend(x.iter().copied());
            }
        };
        push3(&mut out, &self.pos_m);
        push3(&mut out, &self.pos_v);
        pushd(&mut out, &self.feat_m);
        pushd(&mut out, &self.feat_v);
        push3(&mut out, &self.bs_m);
        push3(&mut out, &self.bs_v);
        pushd(&mut out, &self.lat_m);
        pushd(&mut out, &self.lat_v);
        out
    }
}

/// Optimizer state: global step plus moments shaped like every parameter
/// group (networks, background anchors and latents, instance groups).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub mlp_m: MlpWeights,
    pub mlp_v: MlpWeights,
    pub background: GroupMoments,
    pub instances: Vec<GroupMoments>,
}

impl AdamState {
    pub fn new(field: &Field, instances: &[InstanceField]) -> Self {
        Self {
            step: 0,
            mlp_m: MlpWeights::zeros(),
            mlp_v: MlpWeights::zeros(),
            background: GroupMoments::new(&field.anchors, field.latents.len()),
            instances: instances
                .iter()
                .map(|i| GroupMoments::new(&i.anchors, i.latents.len()))
                .collect(),
        }
    }

    /// Flatten into named slots for the checkpoint container.
    pub fn to_blob(&self) -> OptimBlob {
        let mut slots = Vec::new();
        let mlp_flat = |w: &MlpWeights| -> Vec<f64> {
            let mut v = Vec::new();
            for net in [&w.sigma, &w.rho, &w.ray, &w.alpha] {
                v.extend(crate::grad::mlp_param_vector(net));
            }
            v
        };
        slots.push(("mlp_m".to_string(), mlp_flat(&self.mlp_m)));
        slots.push(("mlp_v".to_string(), mlp_flat(&self.mlp_v)));
        slots.push(("background".to_string(), self.background.flat()));
        for (i, g) in self.instances.iter().enumerate() {
            slots.push((format!("instance_{i}"), g.flat()));
        }
        OptimBlob {
            step: self.step,
            slots,
        }
    }
}

fn adam_axis(x: &mut f64, m: &mut f64, v: &mut f64, g: f64, lr: f64, bc1: f64, bc2: f64) {
    *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * g;
    *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * g * g;
    *x -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
}

fn adam_vec3(
    x: &mut Vector3<f64>,
    m: &mut Vector3<f64>,
    v: &mut Vector3<f64>,
    g: &Vector3<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..3 {
        adam_axis(&mut x[i], &mut m[i], &mut v[i], g[i], lr, bc1, bc2);
    }
}

fn adam_dvec(
    x: &mut DVector<f64>,
    m: &mut DVector<f64>,
    v: &mut DVector<f64>,
    g: &DVector<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..x.len() {
        adam_axis(&mut x[i], &mut m[i], &mut v[i], g[i], lr, bc1, bc2);
    }
}

fn adam_mlp(x: &mut Mlp, m: &mut Mlp, v: &mut Mlp, g: &Mlp, lr: f64, bc1: f64, bc2: f64) {
    for (((xw, xb), (mw, mb)), ((vw, vb), (gw, gb))) in x
        .layers
        .iter_mut()
        .zip(m.layers.iter_mut())
        .zip(v.layers.iter_mut().zip(&g.layers))
    {
        for ((x, m), (v, g)) in xw
            .iter_mut()
            .zip(mw.iter_mut())
            .zip(vw.iter_mut().zip(gw.iter()))
        {
            adam_axis(x, m, v, *g, lr, bc1, bc2);
        }
        for ((x, m), (v, g)) in xb
            .iter_mut()
            .zip(mb.iter_mut())
            .zip(vb.iter_mut().zip(gb.iter()))
        {
            adam_axis(x, m, v, *g, lr, bc1, bc2);
        }
    }
}

fn add_mlp_weights(into: &mut MlpWeights, from: &MlpWeights) {
    for (a, b) in [
        (&mut into.sigma, &from.sigma),
        (&mut into.rho, &from.rho),
        (&mut into.ray, &from.ray),
        (&mut into.alpha, &from.alpha),
    ] {
        for ((w, bias), (fw, fb)) in a.layers.iter_mut().zip(&b.layers) {
            *w += fw;
            *bias += fb;
        }
    }
}

/// Position rate decays exponentially from `lr_position` to
/// `lr_position_final` across the run.
pub fn position_lr(cfg: &TrainConfig, iteration: u64) -> f64 {
    if cfg.iterations == 0 {
        return cfg.lr_position;
    }
    let t = (iteration as f64 / cfg.iterations as f64).clamp(0.0, 1.0);
    cfg.lr_position * (cfg.lr_position_final / cfg.lr_position).powf(t)
}

/// One iteration's gradients: the background bundle, one bundle per
/// instance that was rendered, and the frame whose latent codes they
/// touch.
pub struct StepGrads {
    pub background: GradientBundle,
    pub instances: Vec<Option<GradientBundle>>,
    pub frame: usize,
}

/// Mutable training state: both fields, the optimizer, and counters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Rendering spec: the dataset's geometry with the configured
    /// divergence bound.
    pub spec: SensorSpec,
    pub field: Field,
    pub instances: Vec<InstanceField>,
    pub optim: AdamState,
    pub iteration: u64,
    pub rejected: usize,
}

impl TrainState {
    /// Decompose the training frames into background and per-instance
    /// canonical clouds, then initialize a field for each.
    pub fn init(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let spec = cfg.render_spec(&dataset.spec)?;
        let n_frames = dataset.frames.len();
        let mut static_pts: Vec<(Vector3<f64>, f64)> = Vec::new();
        let mut canonical: BTreeMap<u64, Vec<(Vector3<f64>, f64)>> = BTreeMap::new();
        for &f in &dataset.train_idx {
            let world = rangeimage_to_points(&dataset.frames[f], &dataset.poses[f]);
            let boxes = boxes_for_frame(&dataset.tracks, f);
            let (stat, per) = decompose_frame(&world, &boxes);
            static_pts.extend(stat);
            for (id, pts) in per {
                canonical.entry(id).or_default().extend(pts);
            }
        }
        let field = init_from_points(&static_pts, cfg.init_anchors, n_frames, cfg.seed)?;
        let mut instances = Vec::new();
        for (id, pts) in &canonical {
            if pts.len() < MIN_INSTANCE_POINTS {
                continue;
            }
            let sub = init_from_points(
                pts,
                cfg.instance_anchors,
                n_frames,
                cfg.seed ^ id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            )?;
            let mut poses: Vec<(usize, Pose)> = dataset
                .tracks
                .iter()
                .filter(|t| t.id == *id)
                .map(|t| {
                    (
                        t.frame,
                        Pose::from_yaw_translation(
                            t.yaw,
                            Vector3::new(t.center[0], t.center[1], t.center[2]),
                        ),
                    )
                })
                .collect();
            poses.sort_by_key(|(f, _)| *f);
            instances.push(InstanceField {
                id: *id,
                anchors: sub.anchors,
                latents: sub.latents,
                poses,
            });
        }
        let optim = AdamState::new(&field, &instances);
        Ok(Self {
            spec,
            field,
            instances,
            optim,
            iteration: 0,
            rejected: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec,
            field: self.field.clone(),
            instances: self.instances.clone(),
            iteration: self.iteration,
            optim: Some(self.optim.to_blob()),
        }
    }
}

/// Apply one bias-corrected adaptive-moment step over every parameter
/// group that received gradients. A non-finite bundle rejects the whole
/// step and leaves the state untouched (except the rejection counter).
/// Returns whether the step was applied.
pub fn optimizer_step(
    state: &mut TrainState,
    grads: &StepGrads,
    cfg: &TrainConfig,
) -> Result<bool> {
    if grads.background.anchors.len() != state.field.anchors.len() {
        return Err(Error::domain("background gradient shape mismatch"));
    }
    if grads.instances.len() != state.instances.len() {
        return Err(Error::domain("instance gradient list shape mismatch"));
    }
    for (b, inst) in grads.instances.iter().zip(&state.instances) {
        if let Some(b) = b {
            if b.anchors.len() != inst.anchors.len() {
                return Err(Error::domain("instance gradient shape mismatch"));
            }
        }
    }
    let finite = grads.background.is_finite()
        && grads.instances.iter().flatten().all(|b| b.is_finite());
    if !finite {
        state.rejected += 1;
        return Ok(false);
    }

    state.optim.step += 1;
    let t = state.optim.step as f64;
    let bc1 = 1.0 - ADAM_B1.powf(t);
    let bc2 = 1.0 - ADAM_B2.powf(t);
    let lr_pos = position_lr(cfg, state.iteration);

    // Networks are shared: sum the weight gradients across groups.
    let mut wg = grads.background.weights.clone();
    for b in grads.instances.iter().flatten() {
        add_mlp_weights(&mut wg, &b.weights);
    }
    let om = &mut state.optim;
    for (x, m, v, g) in [
        (
            &mut state.field.weights.sigma,
            &mut om.mlp_m.sigma,
            &mut om.mlp_v.sigma,
            &wg.sigma,
        ),
        (
            &mut state.field.weights.rho,
            &mut om.mlp_m.rho,
            &mut om.mlp_v.rho,
            &wg.rho,
        ),
        (
            &mut state.field.weights.ray,
            &mut om.mlp_m.ray,
            &mut om.mlp_v.ray,
            &wg.ray,
        ),
        (
            &mut state.field.weights.alpha,
            &mut om.mlp_m.alpha,
            &mut om.mlp_v.alpha,
            &wg.alpha,
        ),
    ] {
        adam_mlp(x, m, v, g, cfg.lr_mlp, bc1, bc2);
    }

    let apply_group = |anchors: &mut [Anchor],
                       latents: &mut [crate::field::FrameLatent],
                       mom: &mut GroupMoments,
                       bundle: &GradientBundle,
                       frame: usize|
     -> Result<()> {
        for (j, (a, g)) in anchors.iter_mut().zip(&bundle.anchors).enumerate() {
            adam_vec3(
                &mut a.position,
                &mut mom.pos_m[j],
                &mut mom.pos_v[j],
                &g.position,
                lr_pos,
                bc1,
                bc2,
            );
            adam_dvec(
                &mut a.feature,
                &mut mom.feat_m[j],
                &mut mom.feat_v[j],
                &g.feature,
                cfg.lr_feature,
                bc1,
                bc2,
            );
            adam_vec3(
                &mut a.base_scale,
                &mut mom.bs_m[j],
                &mut mom.bs_v[j],
                &g.base_scale,
                cfg.lr_base_scale,
                bc1,
                bc2,
            );
            a.base_scale = a.base_scale.map(|s| s.max(BASE_SCALE_EPS));
        }
        let li = latents
            .iter()
            .position(|l| l.frame_id == frame)
            .ok_or_else(|| Error::domain(format!("no latent code for frame {frame}")))?;
        adam_dvec(
            &mut latents[li].code,
            &mut mom.lat_m[li],
            &mut mom.lat_v[li],
            &bundle.latent,
            cfg.lr_latent,
            bc1,
            bc2,
        );
        Ok(())
    };

    apply_group(
        &mut state.field.anchors,
        &mut state.field.latents,
        &mut om.background,
        &grads.background,
        grads.frame,
    )?;
    for (i, b) in grads.instances.iter().enumerate() {
        if let Some(b) = b {
            let inst = &mut state.instances[i];
            apply_group(
                &mut inst.anchors,
                &mut inst.latents,
                &mut om.instances[i],
                b,
                grads.frame,
            )?;
        }
    }
    Ok(true)
}

/// Densification statistics accumulated over one window, one slot per
/// background anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    /// Sum of absolute pixel-space positional gradient magnitudes.
    pub sum_abs: Vec<f64>,
    /// Iterations in which the anchor's primitive actually contributed.
    pub hits: Vec<u32>,
    pub sum_opacity: Vec<f64>,
    pub spawns: Vec<u32>,
    /// Offset of the last spawned primitive from its anchor, the growth
    /// direction.
    pub last_offset: Vec<Vector3<f64>>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self {
            sum_abs: vec![0.0; n],
            hits: vec![0; n],
            sum_opacity: vec![0.0; n],
            spawns: vec![0; n],
            last_offset: vec![Vector3::zeros(); n],
        }
    }

    /// Record one iteration. `primitives` must be in the anchors' own
    /// frame and aligned with `anchor_index`; `densify_abs` likewise.
    pub fn record(
        &mut self,
        anchor_index: &[usize],
        primitives: &[GaussianPrimitive],
        anchors: &[Anchor],
        densify_abs: &[f64],
    ) {
        for (j, &a) in anchor_index.iter().enumerate() {
            if densify_abs[j] > 0.0 {
                self.sum_abs[a] += densify_abs[j];
                self.hits[a] += 1;
            }
            self.sum_opacity[a] += primitives[j].opacity;
            self.spawns[a] += 1;
            self.last_offset[a] = primitives[j].mean - anchors[a].position;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DensifyOutcome {
    pub split: usize,
    pub grown: usize,
    pub pruned: usize,
    pub capped: usize,
}

/// One densification event: anchors whose windowed mean absolute
/// positional gradient exceeds the threshold are split (wide ones) or
/// grown (narrow ones); anchors with low mean opacity are pruned; the
/// population is capped by keeping the highest-gradient candidates
/// (ties broken by lower index). Surviving anchors never move. Returns
/// the moment remap: `remap[new] = Some(old)` for survivors, `None` for
/// fresh children.
pub fn densify_anchors(
    anchors: &mut Vec<Anchor>,
    stats: &DensifyStats,
    cfg: &TrainConfig,
) -> (Vec<Option<usize>>, DensifyOutcome) {
    let n = anchors.len();
    let avg: Vec<f64> = (0..n)
        .map(|a| {
            if stats.hits[a] > 0 {
                stats.sum_abs[a] / stats.hits[a] as f64
            } else {
                0.0
            }
        })
        .collect();
    // Anchors never spawned this window cannot be judged; keep them.
    let mean_op: Vec<f64> = (0..n)
        .map(|a| {
            if stats.spawns[a] > 0 {
                stats.sum_opacity[a] / stats.spawns[a] as f64
            } else {
                1.0
            }
        })
        .collect();
    let mut outcome = DensifyOutcome::default();

    let prune: Vec<bool> = {
        let mut p: Vec<bool> = mean_op.iter().map(|&o| o < cfg.prune_opacity).collect();
        if p.iter().all(|&x| x) && n > 0 {
            // Never empty the field: spare the most opaque anchor.
            let keep = (0..n)
                .max_by(|&a, &b| mean_op[a].total_cmp(&mean_op[b]))
                .unwrap();
            p[keep] = false;
        }
        p
    };

    // (anchor, moment source, cap priority)
    let mut kept: Vec<(Anchor, Option<usize>, f64)> = Vec::with_capacity(n + 8);
    let mut tail: Vec<(Anchor, Option<usize>, f64)> = Vec::new();
    for a in 0..n {
        if prune[a] {
            outcome.pruned += 1;
            continue;
        }
        let anchor = &anchors[a];
        if avg[a] >= cfg.grad_threshold && cfg.grad_threshold > 0.0 {
            let bs = anchor.base_scale;
            let widest = bs.imax();
            if bs[widest] > cfg.voxel_size {
                // Split: two children straddling the parent along its
                // widest axis, shrunk.
                outcome.split += 1;
                let mut off = Vector3::zeros();
                off[widest] = 0.5 * bs[widest];
                for dir in [-1.0, 1.0] {
                    let mut child = anchor.clone();
                    child.position += dir * off;
                    child.base_scale *= 0.6;
                    kept.push((child, None, avg[a]));
                }
            } else {
                // Grow: keep the parent, add a child where the spawned
                // primitive last landed.
                outcome.grown += 1;
                kept.push((anchor.clone(), Some(a), avg[a]));
                let mut child = anchor.clone();
                child.position += stats.last_offset[a];
                tail.push((child, None, avg[a]));
            }
        } else {
            kept.push((anchor.clone(), Some(a), avg[a]));
        }
    }
    kept.extend(tail);

    if kept.len() > cfg.max_anchors {
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| kept[b].2.total_cmp(&kept[a].2).then(a.cmp(&b)));
        let mut keep_flag = vec![false; kept.len()];
        for &i in order.iter().take(cfg.max_anchors) {
            keep_flag[i] = true;
        }
        outcome.capped = kept.len() - cfg.max_anchors;
        let mut filtered = Vec::with_capacity(cfg.max_anchors);
        for (i, item) in kept.into_iter().enumerate() {
            if keep_flag[i] {
                filtered.push(item);
            }
        }
        kept = filtered;
    }

    let mut remap = Vec::with_capacity(kept.len());
    *anchors = kept
        .into_iter()
        .map(|(a, src, _)| {
            remap.push(src);
            a
        })
        .collect();
    (remap, outcome)
}

/// Abort brake for the training loop: remembers the first finite loss
/// and errs once the loss has been non-finite or above ten times that
/// baseline for too many consecutive iterations.
#[derive(Debug, Clone, Default)]
pub struct DivergenceGuard {
    baseline: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn observe(&mut self, total: f64, iteration: usize) -> Result<()> {
        let baseline = *self.baseline.get_or_insert(if total.is_finite() {
            total.max(1e-12)
        } else {
            1.0
        });
        let bad = !total.is_finite() || total > 10.0 * baseline;
        self.streak = if bad { self.streak + 1 } else { 0 };
        if self.streak >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged(format!(
                "loss {total:.6e} stayed non-finite or above 10x the initial \
                 {baseline:.6e} for {DIVERGENCE_PATIENCE} consecutive iterations \
                 (at iteration {iteration})"
            )));
        }
        Ok(())
    }
}

/// One curve sample; wall time is excluded from determinism comparisons.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub iteration: u64,
    pub report: LossReport,
    pub wall_ms: f64,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub curves: Vec<CurveRow>,
}

struct InstanceRun {
    index: usize,
    spawn: SpawnResult,
    /// Rotation applied when moving this group's primitives into the
    /// sensor frame (for gradient un-transformation).
    applied_rot: Matrix3<f64>,
    start: usize,
    len: usize,
}

/// The training loop. Per iteration: sample a training frame, spawn the
/// background at the sensor position and each posed instance at its
/// canonical viewpoint, compose everything in the sensor frame, render,
/// evaluate the losses, push gradients back to every parameter group,
/// and step. Densification runs on its window schedule; checkpoints and
/// loss curves are written under `out_dir` when given.
pub fn train_scene(
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train_idx.is_empty() {
        return Err(Error::domain("dataset has no training frames"));
    }
    let mut state = TrainState::init(dataset, cfg)?;
    let spec = state.spec;
    let opts = cfg.render_options();
    let view_inputs = !cfg.disable_view_inputs;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut curves: Vec<CurveRow> = Vec::with_capacity(cfg.iterations);
    let mut stats = DensifyStats::new(state.field.anchors.len());
    let mut guard = DivergenceGuard::default();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for it in 0..cfg.iterations {
        let t0 = Instant::now();
        state.iteration = it as u64;
        let frame = dataset.train_idx[rng.gen_range(0..dataset.train_idx.len())];
        let pose = &dataset.poses[frame];
        let sensor_from_world = pose.inverse();

        // Background: spawned in world coordinates at the sensor origin.
        let bg = spawn_conditioned(
            &state.field.anchors,
            pose.translation(),
            state.field.latent(frame)?,
            &state.field.weights,
            spec.range_max,
            view_inputs,
        )?;
        let mut render_prims = bg.primitives.clone();
        transform_primitives(&mut render_prims, &sensor_from_world);
        let bg_len = render_prims.len();

        // Instances: spawned in their canonical frames, placed by pose.
        let mut runs: Vec<InstanceRun> = Vec::new();
        for (ii, inst) in state.instances.iter().enumerate() {
            let Ok(p_f) = inst.pose_for(frame) else {
                continue;
            };
            let canon_vp = p_f.inverse().transform_point(pose.translation());
            let latent = inst
                .latents
                .iter()
                .find(|l| l.frame_id == frame)
                .ok_or_else(|| {
                    Error::domain(format!("instance {} lacks a latent for frame {frame}", inst.id))
                })?;
            let isp = spawn_conditioned(
                &inst.anchors,
                &canon_vp,
                latent,
                &state.field.weights,
                spec.range_max,
                view_inputs,
            )?;
            let to_sensor = sensor_from_world.compose(p_f);
            let mut moved = isp.primitives.clone();
            transform_primitives(&mut moved, &to_sensor);
            let start = render_prims.len();
            let len = moved.len();
            render_prims.extend(moved);
            runs.push(InstanceRun {
                index: ii,
                spawn: isp,
                applied_rot: *to_sensor.rotation(),
                start,
                len,
            });
        }

        let (projected, _cull) = project_all(&render_prims, &Vector3::zeros(), &spec, &opts);
        let (render, tape) = rasterize(&projected, &render_prims, &Vector3::zeros(), &spec);
        let gt = &dataset.frames[frame];
        let loss = loss_total(&render, &tape, &projected, &render_prims, gt, cfg)?;
        guard.observe(loss.report.total, it)?;

        let (mut prim_grads, densify_abs) =
            rasterize_backward(&projected, &render_prims, &tape, &spec, &loss.channels)?;
        for (g, s) in prim_grads.iter_mut().zip(&loss.scale_grads) {
            g.scale += s;
        }

        let mut bg_grads = prim_grads[..bg_len].to_vec();
        untransform_prim_grads(sensor_from_world.rotation(), &mut bg_grads);
        let background = spawn_backward(
            &state.field.anchors,
            &bg.cache,
            &state.field.weights,
            &bg_grads,
            &densify_abs[..bg_len],
            view_inputs,
        )?;

        let mut inst_bundles: Vec<Option<GradientBundle>> = vec![None; state.instances.len()];
        for run in &runs {
            let seg = run.start..run.start + run.len;
            let mut g = prim_grads[seg.clone()].to_vec();
            untransform_prim_grads(&run.applied_rot, &mut g);
            let bundle = spawn_backward(
                &state.instances[run.index].anchors,
                &run.spawn.cache,
                &state.field.weights,
                &g,
                &densify_abs[seg],
                view_inputs,
            )?;
            inst_bundles[run.index] = Some(bundle);
        }

        stats.record(
            &bg.cache.anchor_index,
            &bg.primitives,
            &state.field.anchors,
            &densify_abs[..bg_len],
        );

        let step = StepGrads {
            background,
            instances: inst_bundles,
            frame,
        };
        optimizer_step(&mut state, &step, cfg)?;
        state.iteration = (it + 1) as u64;

        if (it + 1) % cfg.densify_window == 0 && (it + 1) <= cfg.densify_until {
            let (remap, _outcome) = densify_anchors(&mut state.field.anchors, &stats, cfg);
            state.optim.background.remap_anchors(&remap);
            stats = DensifyStats::new(state.field.anchors.len());
        }

        curves.push(CurveRow {
            iteration: it as u64,
            report: loss.report,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });

        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                state
                    .checkpoint()
                    .save(&dir.join(format!("checkpoint_{:06}.bsck", it + 1)))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        state.checkpoint().save(&dir.join("checkpoint.bsck"))?;
        std::fs::write(dir.join("curves.csv"), curves_csv(&curves))?;
    }
    Ok(TrainOutcome { state, curves })
}

/// Render the composed scene (background plus any instances posed at
/// `frame`) from a sensor pose, exactly as the training loop does:
/// spawn, move into the sensor frame, project, rasterize. Instances
/// without a pose at `frame` are left out. The returned channels are the
/// raw composited sums; apply the drop decision separately for
/// measurement-style output.
pub fn render_pose(
    field: &Field,
    instances: &[InstanceField],
    spec: &SensorSpec,
    opts: &RenderOptions,
    pose: &Pose,
    frame: usize,
    view_inputs: bool,
) -> Result<(RangeImage, ContributionTape)> {
    let sensor_from_world = pose.inverse();
    let bg = spawn_conditioned(
        &field.anchors,
        pose.translation(),
        field.latent(frame)?,
        &field.weights,
        spec.range_max,
        view_inputs,
    )?;
    let mut prims = bg.primitives;
    transform_primitives(&mut prims, &sensor_from_world);
    for inst in instances {
        let Ok(p_f) = inst.pose_for(frame) else {
            continue;
        };
        let canon_vp = p_f.inverse().transform_point(pose.translation());
        let latent = inst
            .latents
            .iter()
            .find(|l| l.frame_id == frame)
            .ok_or_else(|| {
                Error::domain(format!("instance {} lacks a latent for frame {frame}", inst.id))
            })?;
        let isp = spawn_conditioned(
            &inst.anchors,
            &canon_vp,
            latent,
            &field.weights,
            spec.range_max,
            view_inputs,
        )?;
        let mut moved = isp.primitives;
        transform_primitives(&mut moved, &sensor_from_world.compose(p_f));
        prims.extend(moved);
    }
    let (projected, _) = project_all(&prims, &Vector3::zeros(), spec, opts);
    let (img, tape) = rasterize(&projected, &prims, &Vector3::zeros(), spec);
    Ok((img, tape))
}

/// CSV serialization of the loss curves.
pub fn curves_csv(curves: &[CurveRow]) -> String {
    let mut out = String::from("iteration,total,rho,depth,raydrop,alpha,scale,wall_ms\n");
    for c in curves {
        let r = &c.report;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.3}",
            c.iteration, r.total, r.rho, r.depth, r.raydrop, r.alpha, r.scale, c.wall_ms
        );
    }
    out
}
