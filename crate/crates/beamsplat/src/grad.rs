//! Reverse-mode differentiation of the full rendering pipeline, written by
//! hand stage by stage: compositing weights, the Gaussian kernel, the
//! footprint back-projection, the projected covariance, the spawn
//! squashings, and the attribute networks. A finite-difference oracle
//! verifies any scalar loss against its claimed gradient.
//!
//! Hard branches (ray-drop decisions, early compositing termination, AABB
//! and gate tests, integer binning) are stop-gradients: losses are defined
//! on pre-threshold channel images, so the recorded contribution tape
//! replays exactly.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use crate::field::{
    sigmoid, softplus, Anchor, GaussianPrimitive, Mlp, MlpTrace, MlpWeights, SpawnCache, BASE_IN,
    DIR_FREQS, FEATURE_DIM, LATENT_DIM, OFFSET_BOUND_FACTOR, SCALE_FLOOR,
};
use crate::rangeview::{pixel_ray, SensorSpec};
use crate::splat::{
    back_project_offset, input_fingerprint, plane_up, sector_axes, ContributionTape,
    FootprintFrame, ProjectedGaussian, COV2D_FLOOR,
};
use crate::{Error, Result};

const TILE: usize = 16;

/// Per-pixel loss gradients with respect to the four rendered channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelGrads {
    pub depth: Vec<f64>,
    pub intensity: Vec<f64>,
    pub raydrop: Vec<f64>,
    pub accum_alpha: Vec<f64>,
}

impl ChannelGrads {
    pub fn zeros(spec: &SensorSpec) -> Self {
        let n = spec.pixel_count();
        Self {
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            raydrop: vec![0.0; n],
            accum_alpha: vec![0.0; n],
        }
    }

    fn len_matches(&self, n: usize) -> bool {
        self.depth.len() == n
            && self.intensity.len() == n
            && self.raydrop.len() == n
            && self.accum_alpha.len() == n
    }
}

/// Loss gradient with respect to one primitive's fields. `rotation` holds
/// the raw per-entry gradient of the rotation matrix; the spawn backward
/// chains it through the quaternion that produced the matrix.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrimGrad {
    pub mean: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub scale: Vector3<f64>,
    pub intensity: f64,
    pub raydrop: f64,
    pub opacity: f64,
}

/// Loss gradient with respect to one anchor's learnable fields.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrad {
    pub position: Vector3<f64>,
    pub feature: DVector<f64>,
    pub base_scale: Vector3<f64>,
}

impl AnchorGrad {
    fn zeros() -> Self {
        Self {
            position: Vector3::zeros(),
            feature: DVector::zeros(FEATURE_DIM),
            base_scale: Vector3::zeros(),
        }
    }
}

/// Gradients for everything one spawn group learns, plus the per-primitive
/// absolute screen-space positional gradient used by densification.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Aligned with the anchor slice passed to the backward pass.
    pub anchors: Vec<AnchorGrad>,
    /// Weight gradients, shaped exactly like the networks.
    pub weights: MlpWeights,
    pub latent: DVector<f64>,
    /// Aligned with the spawned primitive list; absolute values, never
    /// signed-cancelled.
    pub densify_abs: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(n_anchors: usize, n_primitives: usize) -> Self {
        Self {
            anchors: (0..n_anchors).map(|_| AnchorGrad::zeros()).collect(),
            weights: MlpWeights::zeros(),
            latent: DVector::zeros(LATENT_DIM),
            densify_abs: vec![0.0; n_primitives],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite()
            && self.latent.iter().all(|v| v.is_finite())
            && self.densify_abs.iter().all(|v| v.is_finite())
            && self.anchors.iter().all(|a| {
                a.position.iter().all(|v| v.is_finite())
                    && a.feature.iter().all(|v| v.is_finite())
                    && a.base_scale.iter().all(|v| v.is_finite())
            })
    }

    /// Add another bundle over the same parameter set (for batching
    /// several views of one group).
    pub fn accumulate(&mut self, other: &GradientBundle) -> Result<()> {
        if self.anchors.len() != other.anchors.len()
            || self.densify_abs.len() != other.densify_abs.len()
        {
            return Err(Error::domain("gradient bundles cover different shapes"));
        }
        for (a, b) in self.anchors.iter_mut().zip(&other.anchors) {
            a.position += b.position;
            a.feature += &b.feature;
            a.base_scale += b.base_scale;
        }
        add_mlp(&mut self.weights.sigma, &other.weights.sigma);
        add_mlp(&mut self.weights.rho, &other.weights.rho);
        add_mlp(&mut self.weights.ray, &other.weights.ray);
        add_mlp(&mut self.weights.alpha, &other.weights.alpha);
        self.latent += &other.latent;
        for (d, o) in self.densify_abs.iter_mut().zip(&other.densify_abs) {
            *d += o;
        }
        Ok(())
    }
}

fn add_mlp(into: &mut Mlp, from: &Mlp) {
    for ((w, b), (fw, fb)) in into.layers.iter_mut().zip(&from.layers) {
        *w += fw;
        *b += fb;
    }
}

/// Flatten a network's parameters into one vector (weights row-major, then
/// bias, layer by layer).
pub fn mlp_param_vector(m: &Mlp) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.param_count());
    for (w, b) in &m.layers {
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                out.push(w[(r, c)]);
            }
        }
        out.extend(b.iter().copied());
    }
    out
}

/// Rebuild a network with `proto`'s shape from a flat parameter vector.
pub fn mlp_from_params(proto: &Mlp, vals: &[f64]) -> Result<Mlp> {
    if vals.len() != proto.param_count() {
        return Err(Error::domain("parameter vector length mismatch"));
    }
    let mut at = 0;
    let mut layers = Vec::with_capacity(proto.layers.len());
    for (w, b) in &proto.layers {
        let mut nw = DMatrix::zeros(w.nrows(), w.ncols());
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                nw[(r, c)] = vals[at];
                at += 1;
            }
        }
        let nb = DVector::from_iterator(b.nrows(), vals[at..at + b.nrows()].iter().copied());
        at += b.nrows();
        layers.push((nw, nb));
    }
    Ok(Mlp { layers })
}

/// Backward pass through one network. Returns the parameter gradients
/// (shaped like the network) and the gradient with respect to the input
/// columns.
pub fn mlp_backward(
    mlp: &Mlp,
    trace: &MlpTrace,
    input: &DMatrix<f64>,
    g_out: &DMatrix<f64>,
) -> (Mlp, DMatrix<f64>) {
    let depth = mlp.layers.len();
    let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(depth);
    let mut g = g_out.clone();
    for i in (0..depth).rev() {
        let a_prev: &DMatrix<f64> = if i == 0 { input } else { &trace.hidden[i - 1] };
        let gw = &g * a_prev.transpose();
        let gb = DVector::from_fn(g.nrows(), |r, _| g.row(r).sum());
        let mut g_prev = mlp.layers[i].0.transpose() * &g;
        if i > 0 {
            // ReLU: zero where the stored activation was clamped.
            g_prev.zip_apply(&trace.hidden[i - 1], |gp, a| {
                if a <= 0.0 {
                    *gp = 0.0;
                }
            });
        }
        grads.push((gw, gb));
        g = g_prev;
    }
    grads.reverse();
    (Mlp { layers: grads }, g)
}

/// Running sums one splat collects over the pixels it touched.
#[derive(Clone)]
struct SplatAccum {
    d: f64,
    dprime: Vector3<f64>,
    n1: Vector3<f64>,
    n2: Vector3<f64>,
    center_u: f64,
    center_v: f64,
    prec: Matrix2<f64>,
    intensity: f64,
    raydrop: f64,
    opacity: f64,
    abs_center: f64,
}

impl Default for SplatAccum {
    fn default() -> Self {
        Self {
            d: 0.0,
            dprime: Vector3::zeros(),
            n1: Vector3::zeros(),
            n2: Vector3::zeros(),
            center_u: 0.0,
            center_v: 0.0,
            prec: Matrix2::zeros(),
            intensity: 0.0,
            raydrop: 0.0,
            opacity: 0.0,
            abs_center: 0.0,
        }
    }
}

impl SplatAccum {
    fn merge(&mut self, o: &SplatAccum) {
        self.d += o.d;
        self.dprime += o.dprime;
        self.n1 += o.n1;
        self.n2 += o.n2;
        self.center_u += o.center_u;
        self.center_v += o.center_v;
        self.prec += o.prec;
        self.intensity += o.intensity;
        self.raydrop += o.raydrop;
        self.opacity += o.opacity;
        self.abs_center += o.abs_center;
    }
}

/// Replay one pixel's tape in reverse, pushing channel gradients down to
/// the splats that contributed.
#[allow(clippy::too_many_arguments)]
fn pixel_backward(
    list: &[crate::splat::Contribution],
    ray: &Vector3<f64>,
    g_d_px: f64,
    g_i_px: f64,
    g_r_px: f64,
    g_a_px: f64,
    projected: &[ProjectedGaussian],
    primitives: &[GaussianPrimitive],
    spec: &SensorSpec,
    accum: &mut HashMap<u32, SplatAccum>,
) {
    // suffix = sum over later contributions of dL/dweight * weight, the
    // shared factor in dL/dalpha_i for all i before them.
    let mut suffix = 0.0;
    for c in list.iter().rev() {
        let pg = &projected[c.splat as usize];
        let prim = &primitives[pg.source];
        let omega = c.alpha * c.transmittance;
        let g_omega = g_d_px * c.depth + g_i_px * prim.intensity + g_r_px * prim.raydrop + g_a_px;
        let acc = accum.entry(c.splat).or_default();
        acc.d += g_d_px * omega;
        acc.intensity += g_i_px * omega;
        acc.raydrop += g_r_px * omega;
        // weight_j = alpha_j * prod_{k<j}(1 - alpha_k), so every later
        // weight scales by -1/(1 - alpha_i). A fully opaque contribution
        // ends the tape, leaving suffix zero.
        let g_alpha = c.transmittance * g_omega
            - if suffix == 0.0 {
                0.0
            } else {
                suffix / (1.0 - c.alpha)
            };
        suffix += g_omega * omega;

        let (v1, v2) =
            back_project_offset(ray, pg).expect("tape contribution matches its projection");
        let q = pg.prec2d[(0, 0)] * v1 * v1
            + 2.0 * pg.prec2d[(0, 1)] * v1 * v2
            + pg.prec2d[(1, 1)] * v2 * v2;
        let kernel = (-0.5 * q).exp();
        acc.opacity += g_alpha * kernel;
        let g_q = -0.5 * kernel * (g_alpha * prim.opacity);
        let gv1 = g_q * 2.0 * (pg.prec2d[(0, 0)] * v1 + pg.prec2d[(0, 1)] * v2);
        let gv2 = g_q * 2.0 * (pg.prec2d[(0, 1)] * v1 + pg.prec2d[(1, 1)] * v2);
        acc.prec[(0, 0)] += g_q * v1 * v1;
        acc.prec[(0, 1)] += g_q * v1 * v2;
        acc.prec[(1, 0)] += g_q * v1 * v2;
        acc.prec[(1, 1)] += g_q * v2 * v2;
        let gv_norm = (gv1 * gv1 + gv2 * gv2).sqrt();
        match pg.frame {
            FootprintFrame::Micro { n1, n2 } => {
                let cos_eps = ray.dot(&pg.dprime);
                let r1 = ray.dot(&n1);
                let r2 = ray.dot(&n2);
                let dx = (ray * cos_eps - pg.dprime) * pg.d;
                // v_k = dx . n_k with dx = d * (cos_eps * ray - dprime).
                acc.d += (gv1 * v1 + gv2 * v2) / pg.d;
                acc.dprime += ray * (pg.d * (gv1 * r1 + gv2 * r2)) - (n1 * gv1 + n2 * gv2) * pg.d;
                acc.n1 += dx * gv1;
                acc.n2 += dx * gv2;
                acc.abs_center += gv_norm * pg.d * spec.delta_phi();
            }
            FootprintFrame::Pseudo { .. } => {
                // v = (u - center_u, v - center_v) in sector coordinates.
                acc.center_u -= gv1;
                acc.center_v -= gv2;
                acc.abs_center += gv_norm * spec.delta_phi();
            }
        }
    }
}

/// Chain one splat's accumulated footprint gradients down to its source
/// primitive's mean, rotation, scale and attributes.
fn splat_to_primitive(
    acc: &SplatAccum,
    pg: &ProjectedGaussian,
    prim: &GaussianPrimitive,
) -> Result<PrimGrad> {
    // q = v' P v with P = cov2d^-1.
    let g_cov = -(pg.prec2d * acc.prec * pg.prec2d);
    let (g_mean, g_sigma3);
    match pg.frame {
        FootprintFrame::Micro { n1, n2 } => {
            // cov2d = (B' Q B)^-1 + floor I, Q the 3D precision.
            let ainv = Matrix2::new(
                pg.cov2d[(0, 0)] - COV2D_FLOOR,
                pg.cov2d[(0, 1)],
                pg.cov2d[(1, 0)],
                pg.cov2d[(1, 1)] - COV2D_FLOOR,
            );
            let g_a = -(ainv * g_cov * ainv);
            let q3 = prim
                .covariance()
                .try_inverse()
                .ok_or_else(|| Error::Degenerate("covariance no longer invertible".into()))?;
            let ns = [n1, n2];
            let qn = [q3 * n1, q3 * n2];
            let mut g_q3 = Matrix3::zeros();
            for k in 0..2 {
                for l in 0..2 {
                    g_q3 += ns[k] * ns[l].transpose() * g_a[(k, l)];
                }
            }
            let mut g_n1 = acc.n1 + qn[0] * (2.0 * g_a[(0, 0)]) + qn[1] * (g_a[(0, 1)] + g_a[(1, 0)]);
            let g_n2 = acc.n2 + qn[1] * (2.0 * g_a[(1, 1)]) + qn[0] * (g_a[(0, 1)] + g_a[(1, 0)]);
            g_sigma3 = -(q3 * g_q3 * q3);
            // Basis chain: n2 = dprime x n1, n1 = normalize(up x dprime).
            let mut g_dp = acc.dprime;
            g_dp += n1.cross(&g_n2);
            g_n1 += g_n2.cross(&pg.dprime);
            let up = plane_up(&pg.dprime);
            let w = up.cross(&pg.dprime);
            let g_w = (g_n1 - n1 * n1.dot(&g_n1)) / w.norm();
            g_dp += g_w.cross(&up);
            // d = |mean|, dprime = mean / d (sensor at the origin).
            g_mean = pg.dprime * acc.d + (g_dp - pg.dprime * pg.dprime.dot(&g_dp)) / pg.d;
        }
        FootprintFrame::Pseudo {
            sector,
            center_u,
            center_v,
        } => {
            // cov2d = J Sigma J' + (floor / d^2) I with J = (ju, jv) the
            // pinhole Jacobian rows, themselves functions of the mean.
            let (axis, side) = sector_axes(sector);
            let up = Vector3::new(0.0, 0.0, 1.0);
            let depth_a = (pg.dprime * pg.d).dot(&axis);
            let ju = (side - axis * center_u) / depth_a;
            let jv = (up - axis * center_v) / depth_a;
            let js = [ju, jv];
            let mut g_sigma = Matrix3::zeros();
            for k in 0..2 {
                for l in 0..2 {
                    g_sigma += js[k] * js[l].transpose() * g_cov[(k, l)];
                }
            }
            g_sigma3 = g_sigma;
            let g_d = acc.d
                + (g_cov[(0, 0)] + g_cov[(1, 1)]) * (-2.0 * COV2D_FLOOR / (pg.d * pg.d * pg.d));
            // d(ju_i)/d(rel_m) = -(axis_i ju_m + ju_i axis_m) / depth_a,
            // using d(center_u)/d(rel) = ju and d(depth_a)/d(rel) = axis.
            let sigma3 = prim.covariance();
            let sju = sigma3 * ju;
            let sjv = sigma3 * jv;
            let g_ju = sju * (2.0 * g_cov[(0, 0)]) + sjv * (g_cov[(0, 1)] + g_cov[(1, 0)]);
            let g_jv = sjv * (2.0 * g_cov[(1, 1)]) + sju * (g_cov[(0, 1)] + g_cov[(1, 0)]);
            let g_jac = (ju * g_ju.dot(&axis)
                + axis * g_ju.dot(&ju)
                + jv * g_jv.dot(&axis)
                + axis * g_jv.dot(&jv))
                / -depth_a;
            g_mean = ju * acc.center_u + jv * acc.center_v + pg.dprime * g_d + g_jac;
        }
    }
    // Sigma = M M' with M = R diag(s).
    let s_diag = Matrix3::from_diagonal(&prim.scale);
    let m = prim.rotation * s_diag;
    let g_m = (g_sigma3 + g_sigma3.transpose()) * m;
    let g_rot = g_m * s_diag;
    let g_scale = Vector3::new(
        prim.rotation.column(0).dot(&g_m.column(0)),
        prim.rotation.column(1).dot(&g_m.column(1)),
        prim.rotation.column(2).dot(&g_m.column(2)),
    );
    Ok(PrimGrad {
        mean: g_mean,
        rotation: g_rot,
        scale: g_scale,
        intensity: acc.intensity,
        raydrop: acc.raydrop,
        opacity: acc.opacity,
    })
}

/// Reverse the rasterizer: push per-pixel channel gradients back to
/// per-primitive gradients by replaying the contribution tape. Also
/// returns the per-primitive absolute screen-space positional gradient
/// for densification.
///
/// Data-parallel over the same 16x16 tiles as the forward pass with
/// tile-local accumulators; the merge folds tiles in index order, so the
/// result is bitwise identical at any thread count.
pub fn rasterize_backward(
    projected: &[ProjectedGaussian],
    primitives: &[GaussianPrimitive],
    tape: &ContributionTape,
    spec: &SensorSpec,
    upstream: &ChannelGrads,
) -> Result<(Vec<PrimGrad>, Vec<f64>)> {
    let h = spec.beams;
    let w = spec.width;
    if tape.per_pixel.len() != spec.pixel_count() {
        return Err(Error::domain("tape does not match the image grid"));
    }
    if !upstream.len_matches(spec.pixel_count()) {
        return Err(Error::domain("upstream gradients do not match the grid"));
    }
    if tape.fingerprint != input_fingerprint(primitives, projected) {
        return Err(Error::domain(
            "stale contribution tape: inputs changed since the forward pass",
        ));
    }

    let tiles_r = h.div_ceil(TILE);
    let tiles_c = w.div_ceil(TILE);
    let tile_jobs: Vec<(usize, usize)> = (0..tiles_r)
        .flat_map(|tr| (0..tiles_c).map(move |tc| (tr, tc)))
        .collect();

    let run_tile = |&(tr, tc): &(usize, usize)| -> HashMap<u32, SplatAccum> {
        let r0 = tr * TILE;
        let c0 = tc * TILE;
        let rows = TILE.min(h - r0);
        let cols = TILE.min(w - c0);
        let mut local: HashMap<u32, SplatAccum> = HashMap::new();
        for lr in 0..rows {
            for lc in 0..cols {
                let row = r0 + lr;
                let col = c0 + lc;
                let idx = row * w + col;
                let list = &tape.per_pixel[idx];
                if list.is_empty() {
                    continue;
                }
                let (gd, gi, gr, ga) = (
                    upstream.depth[idx],
                    upstream.intensity[idx],
                    upstream.raydrop[idx],
                    upstream.accum_alpha[idx],
                );
                if gd == 0.0 && gi == 0.0 && gr == 0.0 && ga == 0.0 {
                    continue;
                }
                let ray = pixel_ray(row as f64 + 0.5, col as f64 + 0.5, spec);
                pixel_backward(
                    list, &ray, gd, gi, gr, ga, projected, primitives, spec, &mut local,
                );
            }
        }
        local
    };

    let tile_maps: Vec<HashMap<u32, SplatAccum>> = if rayon::current_num_threads() > 1 {
        tile_jobs.par_iter().map(run_tile).collect()
    } else {
        tile_jobs.iter().map(run_tile).collect()
    };

    // Ordered merge: within a tile each splat has exactly one partial sum,
    // so per-splat addition order is the tile order regardless of map
    // iteration order.
    let mut accum: Vec<Option<SplatAccum>> = vec![None; projected.len()];
    for local in tile_maps {
        for (splat, part) in local {
            match &mut accum[splat as usize] {
                Some(a) => a.merge(&part),
                slot => *slot = Some(part),
            }
        }
    }

    let mut prim_grads = vec![PrimGrad::default(); primitives.len()];
    let mut densify = vec![0.0; primitives.len()];
    for (i, acc) in accum.iter().enumerate() {
        let Some(acc) = acc else { continue };
        let pg = &projected[i];
        let g = splat_to_primitive(acc, pg, &primitives[pg.source])?;
        let out = &mut prim_grads[pg.source];
        out.mean += g.mean;
        out.rotation += g.rotation;
        out.scale += g.scale;
        out.intensity += g.intensity;
        out.raydrop += g.raydrop;
        out.opacity += g.opacity;
        densify[pg.source] += acc.abs_center;
    }
    Ok((prim_grads, densify))
}

/// Map primitive gradients taken in a transformed frame back to the frame
/// the primitives were spawned in. `rot` is the rotation that was applied
/// to the primitives before rendering (means and rotations transform,
/// scales and attributes do not).
pub fn untransform_prim_grads(rot: &Matrix3<f64>, grads: &mut [PrimGrad]) {
    let rt = rot.transpose();
    for g in grads {
        g.mean = rt * g.mean;
        g.rotation = rt * g.rotation;
    }
}

/// Gradient of the rotation matrix with respect to its unit quaternion
/// (w, x, y, z), contracted against a matrix-shaped upstream gradient.
fn quat_matrix_backward(q: &Vector4<f64>, g_r: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    Vector4::new(g_r.dot(&dw), g_r.dot(&dx), g_r.dot(&dy), g_r.dot(&dz))
}

/// Reverse the spawn: push per-primitive gradients through the squashings
/// and the four networks down to anchors, weights and the frame latent.
/// `prim_grads` and `densify_abs` are indexed like the spawned primitive
/// list; `view_inputs` must match the forward call (false when the
/// view-conditioning ablation zeroed those rows).
pub fn spawn_backward(
    anchors: &[Anchor],
    cache: &SpawnCache,
    weights: &MlpWeights,
    prim_grads: &[PrimGrad],
    densify_abs: &[f64],
    view_inputs: bool,
) -> Result<GradientBundle> {
    let n = cache.anchor_index.len();
    if prim_grads.len() != n || densify_abs.len() != n {
        return Err(Error::domain(
            "primitive gradients do not match the spawn cache",
        ));
    }
    if cache.base_in.ncols() != n || cache.sigma.out.ncols() != n {
        return Err(Error::domain("spawn cache is internally inconsistent"));
    }
    let mut bundle = GradientBundle::zeros(anchors.len(), n);
    bundle.densify_abs.copy_from_slice(densify_abs);

    let mut g_sigma_out = DMatrix::zeros(cache.sigma.out.nrows(), n);
    let mut g_rho_out = DMatrix::zeros(1, n);
    let mut g_ray_out = DMatrix::zeros(1, n);
    let mut g_alpha_out = DMatrix::zeros(1, n);

    for j in 0..n {
        let a = &anchors[cache.anchor_index[j]];
        let g = &prim_grads[j];
        let ga = &mut bundle.anchors[cache.anchor_index[j]];
        let y = cache.sigma.out.column(j);
        // mean = position + tanh(y) * bound, bound = base_scale * factor.
        for i in 0..3 {
            let t = y[i].tanh();
            g_sigma_out[(i, j)] = g.mean[i] * (1.0 - t * t) * a.base_scale[i] * OFFSET_BOUND_FACTOR;
            ga.base_scale[i] += g.mean[i] * t * OFFSET_BOUND_FACTOR;
        }
        ga.position += g.mean;
        // quat = normalize(y[3..7] + e0).
        let u = Vector4::new(y[3] + 1.0, y[4], y[5], y[6]);
        let nu = u.norm();
        let quat = u / nu;
        let g_quat = quat_matrix_backward(&quat, &g.rotation);
        let g_u = (g_quat - quat * quat.dot(&g_quat)) / nu;
        for i in 0..4 {
            g_sigma_out[(3 + i, j)] = g_u[i];
        }
        // scale = max(softplus(y) * base_scale, floor); the floor clamp is
        // a stop-gradient.
        for i in 0..3 {
            let sp = softplus(y[7 + i]);
            if sp * a.base_scale[i] > SCALE_FLOOR {
                g_sigma_out[(7 + i, j)] = g.scale[i] * sigmoid(y[7 + i]) * a.base_scale[i];
                ga.base_scale[i] += g.scale[i] * sp;
            }
        }
        let rho = sigmoid(cache.rho.out[(0, j)]);
        g_rho_out[(0, j)] = g.intensity * rho * (1.0 - rho);
        let ray = sigmoid(cache.ray.out[(0, j)]);
        g_ray_out[(0, j)] = g.raydrop * ray * (1.0 - ray);
        let al = sigmoid(cache.alpha.out[(0, j)]);
        g_alpha_out[(0, j)] = g.opacity * al * (1.0 - al);
    }

    let (gw_sigma, gx_sigma) = mlp_backward(&weights.sigma, &cache.sigma, &cache.base_in, &g_sigma_out);
    let (gw_alpha, gx_alpha) = mlp_backward(&weights.alpha, &cache.alpha, &cache.base_in, &g_alpha_out);
    let (gw_rho, gx_rho) = mlp_backward(&weights.rho, &cache.rho, &cache.lat_in, &g_rho_out);
    let (gw_ray, gx_ray) = mlp_backward(&weights.ray, &cache.ray, &cache.lat_in, &g_ray_out);
    bundle.weights = MlpWeights {
        sigma: gw_sigma,
        rho: gw_rho,
        ray: gw_ray,
        alpha: gw_alpha,
    };

    for j in 0..n {
        let ga = &mut bundle.anchors[cache.anchor_index[j]];
        let col_s = gx_sigma.column(j);
        let col_a = gx_alpha.column(j);
        let col_rho = gx_rho.column(j);
        let col_ray = gx_ray.column(j);
        let base = |k: usize| col_s[k] + col_a[k] + col_rho[k] + col_ray[k];
        for k in 0..FEATURE_DIM {
            ga.feature[k] += base(k);
        }
        for k in 0..LATENT_DIM {
            bundle.latent[k] += col_rho[BASE_IN + k] + col_ray[BASE_IN + k];
        }
        if !view_inputs {
            continue;
        }
        // View rows: dprime, its sin/cos octaves, then d / range_max.
        let dp = cache.dprime[j];
        let mut g_dp = Vector3::new(
            base(FEATURE_DIM),
            base(FEATURE_DIM + 1),
            base(FEATURE_DIM + 2),
        );
        let mut at = FEATURE_DIM + 3;
        for k in 0..DIR_FREQS {
            let s = (1u64 << k) as f64;
            for ax in 0..3 {
                let arg = s * dp[ax];
                g_dp[ax] += s * arg.cos() * base(at + ax) - s * arg.sin() * base(at + 3 + ax);
            }
            at += 6;
        }
        let g_d = base(BASE_IN - 1) / cache.range_max;
        // d = |p - viewpoint|, dprime = (p - viewpoint) / d.
        let d = cache.d[j];
        ga.position += dp * g_d + (g_dp - dp * dp.dot(&g_dp)) / d;
    }
    Ok(bundle)
}

/// One-call backward for a single spawn group rendered from its own frame
/// origin: rasterizer backward, then spawn backward. The primitive list
/// must be exactly the spawn output.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    tape: &ContributionTape,
    upstream: &ChannelGrads,
    primitives: &[GaussianPrimitive],
    projected: &[ProjectedGaussian],
    anchors: &[Anchor],
    cache: &SpawnCache,
    weights: &MlpWeights,
    spec: &SensorSpec,
) -> Result<GradientBundle> {
    if primitives.len() != cache.anchor_index.len() {
        return Err(Error::domain(
            "primitive list does not match the spawn cache",
        ));
    }
    let (prim_grads, densify) = rasterize_backward(projected, primitives, tape, spec, upstream)?;
    spawn_backward(anchors, cache, weights, &prim_grads, &densify, true)
}

/// Finite-difference verification report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdReport {
    pub max_rel: f64,
    pub mean_rel: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub checked: usize,
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max rel {:.3e} (coord {}), mean rel {:.3e} over {} coords",
            self.max_rel, self.worst, self.mean_rel, self.checked
        )
    }
}

/// Compare an analytic gradient against central finite differences of a
/// scalar loss, coordinate by coordinate. The step is `eps` scaled by each
/// coordinate's magnitude (at least 1). Relative error uses a floor of
/// 1e-4 times the largest analytic entry, so coordinates whose gradients
/// are negligible against the whole vector are compared absolutely at
/// that floor instead of amplifying rounding noise.
pub fn finite_diff_check(
    loss_fn: &mut dyn FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<FdReport> {
    if params.len() != analytic.len() {
        return Err(Error::domain("analytic gradient length mismatch"));
    }
    if !(eps > 0.0) {
        return Err(Error::domain("finite difference step must be positive"));
    }
    if params.is_empty() {
        return Err(Error::domain("nothing to check"));
    }
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4 * (1.0 + scale);
    let mut work = params.to_vec();
    let mut max_rel = 0.0;
    let mut sum_rel = 0.0;
    let mut worst = 0;
    for i in 0..params.len() {
        let step = eps * params[i].abs().max(1.0);
        work[i] = params[i] + step;
        let fp = loss_fn(&work)?;
        work[i] = params[i] - step;
        let fm = loss_fn(&work)?;
        work[i] = params[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::domain(format!(
                "non-finite loss while probing coordinate {i}"
            )));
        }
        let fd = (fp - fm) / (2.0 * step);
        let rel = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
        sum_rel += rel;
    }
    Ok(FdReport {
        max_rel,
        mean_rel: sum_rel / params.len() as f64,
        worst,
        checked: params.len(),
    })
}
