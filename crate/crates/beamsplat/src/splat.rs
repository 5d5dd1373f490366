//! Forward rendering: each Gaussian is projected onto the micro plane
//! through its mean perpendicular to its viewing ray, bounded by a compact
//! pixel AABB, and alpha-composited front to back into depth, intensity,
//! and ray-drop channels. A contribution tape records the compositing
//! order for the backward pass.

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;

use crate::field::GaussianPrimitive;
use crate::rangeview::{pixel_ray, project_point, RangeImage, SensorSpec};
use crate::{Error, Result};

/// Box radius in standard deviations. exp(-r^2/2) drops below 1e-6 at
/// r = 5.2565, so a box this wide cannot clip any contribution whose
/// compositing weight could exceed 1e-6.
pub const AABB_SIGMA: f64 = 5.26;
/// Transmittance below which compositing terminates.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
/// Contributions below this alpha are numerically irrelevant and skipped.
pub const ALPHA_EPS: f64 = 1e-12;
/// Diagonal floor added to the projected covariance.
pub const COV2D_FLOOR: f64 = 1e-7;
/// Ray-drop decision default: drop when blended probability reaches this.
pub const LAMBDA_R: f64 = 0.5;
/// Ray-drop decision default: drop when fewer contributors render nearby.
pub const LAMBDA_TAU: f64 = 2.0;
/// Contributors count toward local density within this distance of the
/// blended depth, meters.
pub const TAU_DEPTH_BAND: f64 = 0.3;
/// ... and only when at least this opaque.
pub const TAU_ALPHA_MIN: f64 = 0.01;

const TILE: usize = 16;

/// Projection backend. The pseudo-plane mode replaces the micro
/// cross-section with perspective splatting onto four 90-degree image
/// planes (an intentionally cruder baseline kept for ablations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProjectionMode {
    #[default]
    MicroPlane,
    PseudoPlane,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RenderOptions {
    pub mode: ProjectionMode,
    /// Cover the full image per Gaussian instead of its AABB.
    pub disable_aabb: bool,
}

/// Pixel rectangle. Rows are clipped to the image; the column range is
/// stored unwrapped (may run past the azimuth seam) with span < W and is
/// reduced modulo W at traversal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub row_min: i64,
    pub row_max: i64,
    pub col_min: i64,
    pub col_max: i64,
}

impl PixelRect {
    pub fn contains(&self, row: i64, col: i64, width: usize) -> bool {
        if row < self.row_min || row > self.row_max {
            return false;
        }
        let span = self.col_max - self.col_min;
        (col - self.col_min).rem_euclid(width as i64) <= span
    }

    fn intersects_cols(&self, c0: i64, c1: i64, width: usize) -> bool {
        let w = width as i64;
        for k in [-w, 0, w] {
            if self.col_min + k <= c1 && self.col_max + k >= c0 {
                return true;
            }
        }
        false
    }
}

/// Mode-specific footprint frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FootprintFrame {
    /// Cross-section plane through the mean: orthonormal in-plane basis.
    Micro {
        n1: Vector3<f64>,
        n2: Vector3<f64>,
    },
    /// Perspective sector plane: offsets are measured in the sector's
    /// normalized (u, v) image coordinates at the mean.
    Pseudo {
        sector: u8,
        center_u: f64,
        center_v: f64,
    },
}

/// Per-view splat record of one Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedGaussian {
    /// Index into the primitive list this was projected from.
    pub source: usize,
    /// Flight distance to the mean.
    pub d: f64,
    /// Unit viewing direction to the mean.
    pub dprime: Vector3<f64>,
    pub frame: FootprintFrame,
    /// Footprint covariance (floored) and its inverse.
    pub cov2d: Matrix2<f64>,
    pub prec2d: Matrix2<f64>,
    /// Continuous image coordinates of the mean.
    pub center_h: f64,
    pub center_w: f64,
    pub aabb: PixelRect,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CullStats {
    pub out_of_range: usize,
    pub empty_aabb: usize,
    pub degenerate: usize,
}

/// Right-handed orthonormal frame (n1, n2, d') for a unit direction.
/// n1 is horizontal (up x d'); near-vertical directions fall back to
/// up = (1, 0, 0).
pub fn micro_plane_basis(dprime: &Vector3<f64>) -> Result<(Vector3<f64>, Vector3<f64>)> {
    if (dprime.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::domain("micro plane basis needs a unit direction"));
    }
    Ok(micro_plane_basis_unchecked(dprime))
}

/// Reference up vector used to build the in-plane basis; near-vertical
/// directions fall back to +x.
pub(crate) fn plane_up(dprime: &Vector3<f64>) -> Vector3<f64> {
    let up = Vector3::new(0.0, 0.0, 1.0);
    if up.cross(dprime).norm() < 1e-6 {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        up
    }
}

fn micro_plane_basis_unchecked(dprime: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let up = plane_up(dprime);
    let n1 = up.cross(dprime).normalize();
    let n2 = dprime.cross(&n1);
    (n1, n2)
}

/// Sector axes for the pseudo-plane mode: forward, left, back, right.
pub(crate) fn sector_axes(sector: u8) -> (Vector3<f64>, Vector3<f64>) {
    // (view axis, side axis); up is global +z.
    match sector {
        0 => (Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0)),
        1 => (Vector3::new(0.0, 1.0, 0.0), Vector3::new(-1.0, 0.0, 0.0)),
        2 => (Vector3::new(-1.0, 0.0, 0.0), Vector3::new(0.0, -1.0, 0.0)),
        _ => (Vector3::new(0.0, -1.0, 0.0), Vector3::new(1.0, 0.0, 0.0)),
    }
}

fn sector_of(dprime: &Vector3<f64>) -> u8 {
    if dprime.x.abs() >= dprime.y.abs() {
        if dprime.x >= 0.0 {
            0
        } else {
            2
        }
    } else if dprime.y >= 0.0 {
        1
    } else {
        3
    }
}

/// Smallest cosine of elevation anywhere in the FOV (bounds the azimuth
/// step size of a pixel column).
fn min_cos_elevation(spec: &SensorSpec) -> f64 {
    spec.f_up.max(spec.f_down).cos()
}

fn invert_spd2(m: &Matrix2<f64>) -> Option<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det <= 0.0 || !det.is_finite() {
        return None;
    }
    Some(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// Project one Gaussian for a sensor at `o` (axes aligned with the sensor
/// frame). Returns None when culled, with the reason counted.
pub fn project_gaussian(
    g: &GaussianPrimitive,
    source: usize,
    o: &Vector3<f64>,
    spec: &SensorSpec,
    opts: &RenderOptions,
    stats: &mut CullStats,
) -> Option<ProjectedGaussian> {
    let rel = g.mean - o;
    let d = rel.norm();
    if !(d >= spec.range_min && d <= spec.range_max) {
        stats.out_of_range += 1;
        return None;
    }
    let dprime = rel / d;
    let (h_c, w_c, _) = project_point(&rel, spec).ok()?;

    let (frame, cov2d) = match opts.mode {
        ProjectionMode::MicroPlane => {
            let (n1, n2) = micro_plane_basis_unchecked(&dprime);
            // Cross-section covariance: restrict the 3D Gaussian to the
            // plane through the mean. The restriction's precision is the
            // plane-projected 3D precision.
            let sigma = g.covariance();
            let Some(prec3) = sigma.try_inverse() else {
                stats.degenerate += 1;
                return None;
            };
            let a = Matrix2::new(
                (n1.transpose() * prec3 * n1)[0],
                (n1.transpose() * prec3 * n2)[0],
                (n2.transpose() * prec3 * n1)[0],
                (n2.transpose() * prec3 * n2)[0],
            );
            let Some(mut cov) = invert_spd2(&a) else {
                stats.degenerate += 1;
                return None;
            };
            cov[(0, 0)] += COV2D_FLOOR;
            cov[(1, 1)] += COV2D_FLOOR;
            (FootprintFrame::Micro { n1, n2 }, cov)
        }
        ProjectionMode::PseudoPlane => {
            let sector = sector_of(&dprime);
            let (axis, side) = sector_axes(sector);
            let up = Vector3::new(0.0, 0.0, 1.0);
            let depth_a = rel.dot(&axis);
            if depth_a <= 1e-9 {
                stats.degenerate += 1;
                return None;
            }
            let center_u = rel.dot(&side) / depth_a;
            let center_v = rel.dot(&up) / depth_a;
            // Affine (pinhole) Jacobian of (u, v) at the mean.
            let ju = (side - axis * center_u) / depth_a;
            let jv = (up - axis * center_v) / depth_a;
            let sigma = g.covariance();
            let mut cov = Matrix2::new(
                (ju.transpose() * sigma * ju)[0],
                (ju.transpose() * sigma * jv)[0],
                (jv.transpose() * sigma * ju)[0],
                (jv.transpose() * sigma * jv)[0],
            );
            // Floor in angular units: the micro floor is metric, scale by
            // the footprint's distance so both modes floor comparably.
            let floor = COV2D_FLOOR / (d * d);
            cov[(0, 0)] += floor;
            cov[(1, 1)] += floor;
            (
                FootprintFrame::Pseudo {
                    sector,
                    center_u,
                    center_v,
                },
                cov,
            )
        }
    };
    let Some(prec2d) = invert_spd2(&cov2d) else {
        stats.degenerate += 1;
        return None;
    };

    let h = spec.beams;
    let w = spec.width;
    let aabb = if opts.disable_aabb {
        PixelRect {
            row_min: 0,
            row_max: h as i64 - 1,
            col_min: 0,
            col_max: w as i64 - 1,
        }
    } else {
        // Meters (micro) or angle units (pseudo) per pixel step. Steps are
        // saturated at one radian so tan stays finite and positive on
        // degenerate one-column grids; saturating shrinks the step and can
        // only enlarge the box.
        let c2 = (2.0 * spec.divergence.min(0.5)).cos();
        let cos_elev = min_cos_elevation(spec);
        let step_row = spec.delta_phi().min(1.0);
        let step_col = (spec.delta_theta() * cos_elev).min(1.0);
        let (per_row, per_col) = match opts.mode {
            ProjectionMode::MicroPlane => (d * step_row.tan() * c2, d * step_col.tan() * c2),
            ProjectionMode::PseudoPlane => (step_row.tan() * c2, step_col.tan() * c2),
        };
        let sig_col = cov2d[(0, 0)].sqrt();
        let sig_row = cov2d[(1, 1)].sqrt();
        let kernel_rows = (AABB_SIGMA * sig_row / per_row).ceil() as i64 + 1;
        let kernel_cols = (AABB_SIGMA * sig_col / per_col).ceil() as i64 + 1;
        // The divergence gate zeroes everything outside the beam cone, so
        // the box never needs to exceed the cone's pixel extent.
        let cone_rows = (spec.divergence / spec.delta_phi()).ceil() as i64 + 1;
        let cone_cols = (spec.divergence / (spec.delta_theta() * cos_elev)).ceil() as i64 + 1;
        let b_h = kernel_rows.min(cone_rows);
        let b_w = kernel_cols.min(cone_cols);
        let center_row = h_c.floor() as i64;
        let center_col = w_c.floor() as i64;
        let row_min = (center_row - b_h).max(0);
        let row_max = (center_row + b_h).min(h as i64 - 1);
        if row_min > row_max {
            stats.empty_aabb += 1;
            return None;
        }
        if 2 * b_w + 1 >= w as i64 {
            PixelRect {
                row_min,
                row_max,
                col_min: 0,
                col_max: w as i64 - 1,
            }
        } else {
            PixelRect {
                row_min,
                row_max,
                col_min: center_col - b_w,
                col_max: center_col + b_w,
            }
        }
    };

    Some(ProjectedGaussian {
        source,
        d,
        dprime,
        frame,
        cov2d,
        prec2d,
        center_h: h_c,
        center_w: w_c,
        aabb,
    })
}

pub fn project_all(
    primitives: &[GaussianPrimitive],
    o: &Vector3<f64>,
    spec: &SensorSpec,
    opts: &RenderOptions,
) -> (Vec<ProjectedGaussian>, CullStats) {
    let mut stats = CullStats::default();
    let mut out = Vec::with_capacity(primitives.len());
    for (i, g) in primitives.iter().enumerate() {
        if let Some(p) = project_gaussian(g, i, o, spec, opts, &mut stats) {
            out.push(p);
        }
    }
    (out, stats)
}

/// Footprint-plane offset of a ray relative to a projected Gaussian:
/// the vector from the mean to the ray's nearest point, expressed in the
/// footprint basis. None when the ray points away from the Gaussian.
pub fn back_project_offset(ray: &Vector3<f64>, pg: &ProjectedGaussian) -> Option<(f64, f64)> {
    match pg.frame {
        FootprintFrame::Micro { n1, n2 } => {
            let cos_eps = ray.dot(&pg.dprime);
            if cos_eps <= 0.0 {
                return None;
            }
            let dx = (ray * cos_eps - pg.dprime) * pg.d;
            Some((dx.dot(&n1), dx.dot(&n2)))
        }
        FootprintFrame::Pseudo {
            sector,
            center_u,
            center_v,
        } => {
            let (axis, side) = sector_axes(sector);
            let den = ray.dot(&axis);
            if den <= 1e-9 {
                return None;
            }
            let up = Vector3::new(0.0, 0.0, 1.0);
            let u = ray.dot(&side) / den;
            let v = ray.dot(&up) / den;
            Some((u - center_u, v - center_v))
        }
    }
}

/// One recorded compositing contribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Contribution {
    /// Index into the projected list (not the primitive list).
    pub splat: u32,
    pub alpha: f64,
    /// Transmittance before this contribution.
    pub transmittance: f64,
    /// Flight distance of the contributor.
    pub depth: f64,
}

/// Per-pixel ordered contributor lists plus a fingerprint of the inputs
/// that produced them, so a stale tape is detectable.
pub struct ContributionTape {
    pub per_pixel: Vec<Vec<Contribution>>,
    pub fingerprint: u64,
}

/// Order-sensitive fingerprint over the rendering inputs.
pub fn input_fingerprint(primitives: &[GaussianPrimitive], projected: &[ProjectedGaussian]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut mix = |v: f64| {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x100000001b3);
    };
    mix(primitives.len() as f64);
    mix(projected.len() as f64);
    for g in primitives {
        mix(g.mean.x + g.mean.y + g.mean.z);
        mix(g.opacity + 3.0 * g.intensity + 7.0 * g.raydrop);
        mix(g.scale.x * g.scale.y * g.scale.z);
    }
    for p in projected {
        mix(p.d);
        mix(p.center_h + p.center_w);
    }
    h
}

struct TileOut {
    r0: usize,
    c0: usize,
    rows: usize,
    cols: usize,
    depth: Vec<f64>,
    intensity: Vec<f64>,
    raydrop: Vec<f64>,
    alpha: Vec<f64>,
    tape: Vec<Vec<Contribution>>,
}

/// Front-to-back alpha compositing of the projected Gaussians over 16x16
/// pixel tiles. Per pixel, contributors inside the AABB and within the
/// divergence cone blend with weights w_i = a_i * prod_{j<i}(1 - a_j);
/// channel values are the weighted sums (unnormalized) and accum_alpha is
/// the weight total. Deterministic: per-tile contributor lists sort by
/// (distance, source) and tiles write disjoint pixels.
pub fn rasterize(
    projected: &[ProjectedGaussian],
    primitives: &[GaussianPrimitive],
    o: &Vector3<f64>,
    spec: &SensorSpec,
) -> (RangeImage, ContributionTape) {
    let h = spec.beams;
    let w = spec.width;
    let cos_div = spec.divergence.cos();
    let tiles_r = h.div_ceil(TILE);
    let tiles_c = w.div_ceil(TILE);

    let tile_jobs: Vec<(usize, usize)> = (0..tiles_r)
        .flat_map(|tr| (0..tiles_c).map(move |tc| (tr, tc)))
        .collect();

    let run_tile = |&(tr, tc): &(usize, usize)| -> TileOut {
        let r0 = tr * TILE;
        let c0 = tc * TILE;
        let rows = TILE.min(h - r0);
        let cols = TILE.min(w - c0);
        let mut list: Vec<u32> = Vec::new();
        for (i, pg) in projected.iter().enumerate() {
            let rect = &pg.aabb;
            if rect.row_min <= (r0 + rows - 1) as i64
                && rect.row_max >= r0 as i64
                && rect.intersects_cols(c0 as i64, (c0 + cols - 1) as i64, w)
            {
                list.push(i as u32);
            }
        }
        list.sort_by(|&a, &b| {
            let (pa, pb) = (&projected[a as usize], &projected[b as usize]);
            pa.d.total_cmp(&pb.d).then(pa.source.cmp(&pb.source))
        });
        let n = rows * cols;
        let mut out = TileOut {
            r0,
            c0,
            rows,
            cols,
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            raydrop: vec![0.0; n],
            alpha: vec![0.0; n],
            tape: vec![Vec::new(); n],
        };
        for lr in 0..rows {
            for lc in 0..cols {
                let row = r0 + lr;
                let col = c0 + lc;
                let ray = pixel_ray(row as f64 + 0.5, col as f64 + 0.5, spec);
                let at = lr * cols + lc;
                let mut t = 1.0f64;
                for &pi in &list {
                    if t < TRANSMITTANCE_EPS {
                        break;
                    }
                    let pg = &projected[pi as usize];
                    if !pg.aabb.contains(row as i64, col as i64, w) {
                        continue;
                    }
                    // Beam divergence gate: the laser at this pixel cannot
                    // scatter to a Gaussian farther off-axis than this.
                    if ray.dot(&pg.dprime) < cos_div {
                        continue;
                    }
                    let Some((v1, v2)) = back_project_offset(&ray, pg) else {
                        continue;
                    };
                    let q = pg.prec2d[(0, 0)] * v1 * v1
                        + 2.0 * pg.prec2d[(0, 1)] * v1 * v2
                        + pg.prec2d[(1, 1)] * v2 * v2;
                    if q > 60.0 {
                        continue;
                    }
                    let g = (-0.5 * q).exp();
                    let alpha = primitives[pg.source].opacity * g;
                    if alpha < ALPHA_EPS {
                        continue;
                    }
                    let weight = alpha * t;
                    out.depth[at] += weight * pg.d;
                    out.intensity[at] += weight * primitives[pg.source].intensity;
                    out.raydrop[at] += weight * primitives[pg.source].raydrop;
                    out.alpha[at] += weight;
                    out.tape[at].push(Contribution {
                        splat: pi,
                        alpha,
                        transmittance: t,
                        depth: pg.d,
                    });
                    t *= 1.0 - alpha;
                }
            }
        }
        out
    };

    let tile_outs: Vec<TileOut> = if rayon::current_num_threads() > 1 {
        tile_jobs.par_iter().map(run_tile).collect()
    } else {
        tile_jobs.iter().map(run_tile).collect()
    };

    let mut img = RangeImage::new_empty(*spec);
    let mut per_pixel = vec![Vec::new(); h * w];
    for mut tile in tile_outs {
        for lr in 0..tile.rows {
            for lc in 0..tile.cols {
                let at = lr * tile.cols + lc;
                let idx = (tile.r0 + lr) * w + (tile.c0 + lc);
                img.depth[idx] = tile.depth[at];
                img.intensity[idx] = tile.intensity[at];
                img.raydrop[idx] = tile.raydrop[at];
                img.accum_alpha[idx] = tile.alpha[at];
                img.valid[idx] = !tile.tape[at].is_empty();
                per_pixel[idx] = std::mem::take(&mut tile.tape[at]);
            }
        }
    }
    let _ = o;
    let fingerprint = input_fingerprint(primitives, projected);
    (
        img,
        ContributionTape {
            per_pixel,
            fingerprint,
        },
    )
}

/// The ray-drop decision: clear a pixel when its blended drop probability
/// reaches lambda_r, when fewer than lambda_tau contributors render within
/// the depth band around the blended depth, or when the blended depth
/// falls outside the measurable range. Returns the measurement-style
/// image (drop mask 1 on cleared pixels).
pub fn apply_raydrop(
    img: &RangeImage,
    tape: &ContributionTape,
    lambda_r: f64,
    lambda_tau: f64,
) -> Result<RangeImage> {
    if tape.per_pixel.len() != img.spec.pixel_count() {
        return Err(Error::domain("tape does not match the image"));
    }
    let mut out = img.clone();
    for i in 0..tape.per_pixel.len() {
        let keep = if !img.valid[i] {
            false
        } else {
            let tau = tape.per_pixel[i]
                .iter()
                .filter(|c| (c.depth - img.depth[i]).abs() <= TAU_DEPTH_BAND)
                .filter(|c| c.alpha > TAU_ALPHA_MIN)
                .count() as f64;
            img.raydrop[i] < lambda_r
                && tau >= lambda_tau
                && img.depth[i] >= img.spec.range_min
                && img.depth[i] <= img.spec.range_max
        };
        if keep {
            out.raydrop[i] = 0.0;
        } else {
            out.clear_pixel(i);
            out.raydrop[i] = 1.0;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// PNG inspection output
// ---------------------------------------------------------------------------

/// Polynomial fit of the turbo colormap.
fn turbo(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = 34.61 + t * (1172.33 + t * (-10793.56 + t * (33300.12 + t * (-38394.49 + t * 14825.05))));
    let g = 23.31 + t * (557.33 + t * (1225.33 + t * (-3574.96 + t * (1073.77 + t * 707.56))));
    let b = 27.2 + t * (3211.1 + t * (-15327.97 + t * (27814.0 + t * (-22569.18 + t * 6838.66))));
    [
        r.round().clamp(0.0, 255.0) as u8,
        g.round().clamp(0.0, 255.0) as u8,
        b.round().clamp(0.0, 255.0) as u8,
    ]
}

/// False-color depth (turbo, near = blue, far = red); invalid pixels black.
pub fn write_depth_png(img: &RangeImage, path: &std::path::Path) -> Result<()> {
    let (h, w) = (img.spec.beams, img.spec.width);
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    let span = img.spec.range_max - img.spec.range_min;
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let px = if img.valid[i] {
                turbo((img.depth[i] - img.spec.range_min) / span)
            } else {
                [0, 0, 0]
            };
            buf.put_pixel(col as u32, row as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::format(format!("png write failed: {e}")))
}

/// Grayscale intensity; invalid pixels black.
pub fn write_intensity_png(img: &RangeImage, path: &std::path::Path) -> Result<()> {
    let (h, w) = (img.spec.beams, img.spec.width);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let v = if img.valid[i] {
                (img.intensity[i].clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            };
            buf.put_pixel(col as u32, row as u32, image::Luma([v]));
        }
    }
    buf.save(path).map_err(|e| Error::format(format!("png write failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector4};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn gauss(
        mean: Vector3<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        intensity: f64,
        raydrop: f64,
    ) -> GaussianPrimitive {
        GaussianPrimitive {
            mean,
            quat: Vector4::new(1.0, 0.0, 0.0, 0.0),
            rotation: Matrix3::identity(),
            scale,
            intensity,
            raydrop,
            opacity,
        }
    }

    fn rotated_gauss(mean: Vector3<f64>, scale: Vector3<f64>, q: Vector4<f64>) -> GaussianPrimitive {
        let q = q / q.norm();
        GaussianPrimitive {
            mean,
            quat: q,
            rotation: crate::field::quat_to_matrix(&q),
            scale,
            intensity: 0.5,
            raydrop: 0.2,
            opacity: 0.8,
        }
    }

    fn toy_spec() -> SensorSpec {
        SensorSpec::new(32, 256, 0.26, 0.26, 1.0, 60.0)
            .unwrap()
            .with_divergence(0.05)
            .unwrap()
    }

    #[test]
    fn basis_axis_case() {
        let (n1, n2) = micro_plane_basis(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(n1, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(n2, Vector3::new(0.0, 0.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn basis_vertical_fallback() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        let (n1, n2) = micro_plane_basis(&d).unwrap();
        for (a, b) in [(n1, n2), (n1, d), (n2, d)] {
            assert!(a.dot(&b).abs() < 1e-12);
        }
        assert_relative_eq!(n1.cross(&n2), d, epsilon = 1e-12);
    }

    #[test]
    fn basis_rejects_non_unit() {
        assert!(micro_plane_basis(&Vector3::new(2.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn basis_orthonormality_sweep() {
        let mut rng = StdRng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..100_000 {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0f64),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            let d = v / v.norm();
            let (n1, n2) = micro_plane_basis(&d).unwrap();
            worst = worst
                .max(n1.dot(&n2).abs())
                .max(n1.dot(&d).abs())
                .max(n2.dot(&d).abs())
                .max((n1.norm() - 1.0).abs())
                .max((n2.norm() - 1.0).abs())
                .max((n1.cross(&n2) - d).norm());
        }
        assert!(worst < 1e-12, "worst violation {worst}");
    }

    #[test]
    fn isotropic_cov2d_is_scalar_identity() {
        let spec = toy_spec();
        let s = 0.4;
        let g = gauss(Vector3::new(12.0, 3.0, 1.0), Vector3::repeat(s), 0.9, 0.5, 0.1);
        let mut stats = CullStats::default();
        let pg = project_gaussian(
            &g,
            0,
            &Vector3::zeros(),
            &spec,
            &RenderOptions::default(),
            &mut stats,
        )
        .unwrap();
        assert_relative_eq!(pg.cov2d[(0, 0)], s * s + COV2D_FLOOR, epsilon = 1e-12);
        assert_relative_eq!(pg.cov2d[(1, 1)], s * s + COV2D_FLOOR, epsilon = 1e-12);
        assert!(pg.cov2d[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn anisotropic_cov2d_is_cross_section_not_marginal() {
        // Gaussian tilted 45 degrees against the view axis: the slice
        // through the mean is thinner than the shadow.
        let spec = SensorSpec::new(64, 1024, 0.3, 0.3, 1.0, 100.0).unwrap();
        // Rotation of 45 degrees about z: q = (cos 22.5, 0, 0, sin 22.5).
        let a = std::f64::consts::FRAC_PI_4 / 2.0;
        let g = rotated_gauss(
            Vector3::new(10.0, 0.0, 0.0),
            Vector3::new(1.0, 0.1, 0.1),
            Vector4::new(a.cos(), 0.0, 0.0, a.sin()),
        );
        let mut stats = CullStats::default();
        let pg = project_gaussian(
            &g,
            0,
            &Vector3::zeros(),
            &spec,
            &RenderOptions::default(),
            &mut stats,
        )
        .unwrap();
        let sigma = g.covariance();
        let (n1, _n2) = micro_plane_basis(&pg.dprime).unwrap();
        // Marginal (shadow) variance along n1.
        let marginal = (n1.transpose() * sigma * n1)[0];
        // The cross-section must be strictly thinner than the shadow for
        // a tilted anisotropic Gaussian.
        assert!(
            pg.cov2d[(0, 0)] < marginal - 1e-3,
            "cross-section {} vs marginal {}",
            pg.cov2d[(0, 0)],
            marginal
        );
    }

    #[test]
    fn aabb_halves_at_double_distance() {
        let spec = toy_spec();
        let opts = RenderOptions::default();
        let mut stats = CullStats::default();
        // Small scale so the kernel box, not the divergence cone, governs.
        let near = project_gaussian(
            &gauss(Vector3::new(10.0, 0.0, 0.0), Vector3::repeat(0.05), 0.9, 0.5, 0.1),
            0,
            &Vector3::zeros(),
            &spec,
            &opts,
            &mut stats,
        )
        .unwrap();
        let far = project_gaussian(
            &gauss(Vector3::new(20.0, 0.0, 0.0), Vector3::repeat(0.05), 0.9, 0.5, 0.1),
            0,
            &Vector3::zeros(),
            &spec,
            &opts,
            &mut stats,
        )
        .unwrap();
        let rows_near = near.aabb.row_max - near.aabb.row_min;
        let rows_far = far.aabb.row_max - far.aabb.row_min;
        assert!(
            (rows_far - rows_near / 2).abs() <= 2,
            "rows {rows_near} vs {rows_far}"
        );
    }

    #[test]
    fn out_of_range_is_culled() {
        let spec = toy_spec();
        let mut stats = CullStats::default();
        let g = gauss(Vector3::new(100.0, 0.0, 0.0), Vector3::repeat(0.3), 0.9, 0.5, 0.1);
        assert!(project_gaussian(
            &g,
            0,
            &Vector3::zeros(),
            &spec,
            &RenderOptions::default(),
            &mut stats
        )
        .is_none());
        assert_eq!(stats.out_of_range, 1);
    }

    #[test]
    fn center_ray_offset_is_zero() {
        let spec = toy_spec();
        let mut stats = CullStats::default();
        let g = gauss(Vector3::new(8.0, 2.0, -1.0), Vector3::repeat(0.3), 0.9, 0.5, 0.1);
        let pg = project_gaussian(
            &g,
            0,
            &Vector3::zeros(),
            &spec,
            &RenderOptions::default(),
            &mut stats,
        )
        .unwrap();
        let (v1, v2) = back_project_offset(&pg.dprime.clone(), &pg).unwrap();
        assert!(v1.abs() < 1e-12 && v2.abs() < 1e-12);
    }

    #[test]
    fn offset_magnitude_matches_closed_form() {
        // d' = +x, ray tilted by eps in the xy plane, flight distance d:
        // the nearest-point offset has length d*sin(eps), and its in-plane
        // part has length d*sin(eps)*cos(eps) = d*tan(eps)*cos^2(eps).
        let spec = toy_spec();
        let mut stats = CullStats::default();
        let d = 10.0;
        let g = gauss(Vector3::new(d, 0.0, 0.0), Vector3::repeat(0.3), 0.9, 0.5, 0.1);
        let pg = project_gaussian(
            &g,
            0,
            &Vector3::zeros(),
            &spec,
            &RenderOptions::default(),
            &mut stats,
        )
        .unwrap();
        let eps = 0.03f64;
        let ray = Vector3::new(eps.cos(), eps.sin(), 0.0);
        let (v1, v2) = back_project_offset(&ray, &pg).unwrap();
        let norm = (v1 * v1 + v2 * v2).sqrt();
        assert_relative_eq!(norm, d * eps.tan() * eps.cos().powi(2), epsilon = 1e-12);
    }

    #[test]
    fn offset_is_perpendicular_to_ray() {
        let mut rng = StdRng::seed_from_u64(2);
        let spec = toy_spec();
        let mut stats = CullStats::default();
        for _ in 0..1000 {
            let mean = Vector3::new(
                rng.gen_range(3.0..30.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-2.0..5.0),
            );
            let g = gauss(mean, Vector3::repeat(0.3), 0.9, 0.5, 0.1);
            let Some(pg) = project_gaussian(
                &g,
                0,
                &Vector3::zeros(),
                &spec,
                &RenderOptions::default(),
                &mut stats,
            ) else {
                continue;
            };
            let tilt = Vector3::new(
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
                rng.gen_range(-0.02..0.02),
            );
            let ray = (pg.dprime + tilt).normalize();
            if let FootprintFrame::Micro { n1, n2 } = pg.frame {
                let Some((v1, v2)) = back_project_offset(&ray, &pg) else {
                    continue;
                };
                // Reconstruct the 3D offset and check it against the ray.
                let cos_eps = ray.dot(&pg.dprime);
                let dx = (ray * cos_eps - pg.dprime) * pg.d;
                assert!(dx.dot(&ray).abs() < 1e-12);
                assert_relative_eq!(dx.dot(&n1), v1, epsilon = 1e-12);
                assert_relative_eq!(dx.dot(&n2), v2, epsilon = 1e-12);
            }
        }
    }

    /// The cross-section claim made testable: within the beam cone the
    /// footprint kernel equals the 3D Gaussian evaluated at the ray's
    /// nearest point to the mean. Physical-sensor regime (tiny divergence,
    /// moderate distances, centimeter scales) where the out-of-plane term
    /// is below tolerance.
    #[test]
    fn footprint_matches_direct_3d_evaluation() {
        let mut rng = StdRng::seed_from_u64(3);
        let spec = SensorSpec::new(64, 1024, 0.3, 0.3, 1.0, 60.0).unwrap();
        let mut stats = CullStats::default();
        let mut checked = 0usize;
        for _ in 0..300 {
            let mean = Vector3::new(
                rng.gen_range(2.0..10.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-1.0..2.0),
            );
            let scale = Vector3::new(
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
                rng.gen_range(0.05..0.5),
            );
            let q = Vector4::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0f64),
            );
            if q.norm() < 1e-2 {
                continue;
            }
            let g = rotated_gauss(mean, scale, q);
            let Some(pg) = project_gaussian(
                &g,
                0,
                &Vector3::zeros(),
                &spec,
                &RenderOptions::default(),
                &mut stats,
            ) else {
                continue;
            };
            let prec3 = g.covariance().try_inverse().unwrap();
            // Rays within the default divergence bound of the center.
            for _ in 0..10 {
                let eps: f64 = rng.gen_range(0.0..4.0e-5);
                let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (n1, n2) = match pg.frame {
                    FootprintFrame::Micro { n1, n2 } => (n1, n2),
                    _ => unreachable!(),
                };
                let tilt = n1 * (eps.sin() * phi.cos()) + n2 * (eps.sin() * phi.sin());
                let ray = (pg.dprime * eps.cos() + tilt).normalize();
                let (v1, v2) = back_project_offset(&ray, &pg).unwrap();
                let q2 = pg.prec2d[(0, 0)] * v1 * v1
                    + 2.0 * pg.prec2d[(0, 1)] * v1 * v2
                    + pg.prec2d[(1, 1)] * v2 * v2;
                let rendered = (-0.5 * q2).exp();
                // Direct evaluation at the nearest point on the ray.
                let near = ray * (mean.dot(&ray)) - mean;
                let direct = (-0.5 * (near.transpose() * prec3 * near)[0]).exp();
                assert!(
                    (rendered - direct).abs() < 1e-6,
                    "rendered {rendered} direct {direct}"
                );
                checked += 1;
            }
        }
        assert!(checked > 1000, "too few cases checked: {checked}");
    }

    #[test]
    fn single_opaque_gaussian_reproduces_attributes() {
        let spec = toy_spec();
        let d = 12.0;
        let ray = pixel_ray(10.5, 40.5, &spec);
        let g = gauss(ray * d, Vector3::repeat(1.0), 1.0, 0.7, 0.3);
        let prims = vec![g];
        let (projected, _) = project_all(&prims, &Vector3::zeros(), &spec, &RenderOptions::default());
        let (img, tape) = rasterize(&projected, &prims, &Vector3::zeros(), &spec);
        let idx = img.idx(10, 40);
        assert_relative_eq!(img.depth[idx], d, epsilon = 1e-9);
        assert_relative_eq!(img.intensity[idx], 0.7, epsilon = 1e-9);
        assert_relative_eq!(img.raydrop[idx], 0.3, epsilon = 1e-9);
        assert_relative_eq!(img.accum_alpha[idx], 1.0, epsilon = 1e-9);
        assert_eq!(tape.per_pixel[idx].len(), 1);
    }

    #[test]
    fn two_gaussian_compositing_hand_check() {
        // Both on the single pixel's ray with exact center hits, alpha 0.5:
        // rho = 0.5*1.0 + 0.25*0.4 = 0.6, d = 0.5*5 + 0.25*9 = 4.75,
        // accumulated alpha 0.75.
        let spec = SensorSpec::new(1, 1, 0.3, 0.3, 1.0, 30.0)
            .unwrap()
            .with_divergence(0.05)
            .unwrap();
        let prims = vec![
            gauss(Vector3::new(5.0, 0.0, 0.0), Vector3::repeat(2.0), 0.5, 1.0, 0.0),
            gauss(Vector3::new(9.0, 0.0, 0.0), Vector3::repeat(2.0), 0.5, 0.4, 0.0),
        ];
        let (projected, _) = project_all(&prims, &Vector3::zeros(), &spec, &RenderOptions::default());
        assert_eq!(projected.len(), 2);
        let (img, tape) = rasterize(&projected, &prims, &Vector3::zeros(), &spec);
        assert_relative_eq!(img.intensity[0], 0.6, epsilon = 1e-12);
        assert_relative_eq!(img.depth[0], 4.75, epsilon = 1e-12);
        assert_relative_eq!(img.accum_alpha[0], 0.75, epsilon = 1e-12);
        assert_eq!(tape.per_pixel[0].len(), 2);
        assert_eq!(tape.per_pixel[0][0].transmittance, 1.0);
        assert_eq!(tape.per_pixel[0][1].transmittance, 0.5);
    }

    #[test]
    fn empty_scene_renders_all_invalid() {
        let spec = toy_spec();
        let (img, _) = rasterize(&[], &[], &Vector3::zeros(), &spec);
        assert_eq!(img.valid_count(), 0);
    }

    fn random_scene(rng: &mut StdRng, n: usize) -> Vec<GaussianPrimitive> {
        (0..n)
            .map(|_| {
                let mean = Vector3::new(
                    rng.gen_range(4.0..40.0),
                    rng.gen_range(-15.0..15.0),
                    rng.gen_range(-2.0..6.0),
                );
                let scale = Vector3::new(
                    rng.gen_range(0.05..0.8),
                    rng.gen_range(0.05..0.8),
                    rng.gen_range(0.05..0.8),
                );
                let q = Vector4::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0f64),
                );
                let mut g = rotated_gauss(mean, scale, q);
                g.opacity = rng.gen_range(0.05..1.0);
                g.intensity = rng.gen_range(0.0..1.0);
                g.raydrop = rng.gen_range(0.0..1.0);
                g
            })
            .collect()
    }

    #[test]
    fn permutation_invariance_of_rendered_channels() {
        let mut rng = StdRng::seed_from_u64(4);
        let spec = toy_spec();
        let prims = random_scene(&mut rng, 60);
        let opts = RenderOptions::default();
        let (proj_a, _) = project_all(&prims, &Vector3::zeros(), &spec, &opts);
        let (img_a, _) = rasterize(&proj_a, &prims, &Vector3::zeros(), &spec);
        let mut order: Vec<usize> = (0..prims.len()).collect();
        // Deterministic shuffle.
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<GaussianPrimitive> = order.iter().map(|&i| prims[i].clone()).collect();
        let (proj_b, _) = project_all(&permuted, &Vector3::zeros(), &spec, &opts);
        let (img_b, _) = rasterize(&proj_b, &permuted, &Vector3::zeros(), &spec);
        assert_eq!(img_a.depth, img_b.depth);
        assert_eq!(img_a.intensity, img_b.intensity);
        assert_eq!(img_a.raydrop, img_b.raydrop);
        assert_eq!(img_a.accum_alpha, img_b.accum_alpha);
    }

    #[test]
    fn telescoping_weights_and_energy_bound() {
        let mut rng = StdRng::seed_from_u64(5);
        let spec = toy_spec();
        for _ in 0..20 {
            let prims = random_scene(&mut rng, 40);
            let (projected, _) =
                project_all(&prims, &Vector3::zeros(), &spec, &RenderOptions::default());
            let (img, tape) = rasterize(&projected, &prims, &Vector3::zeros(), &spec);
            for i in 0..img.accum_alpha.len() {
                let a = img.accum_alpha[i];
                assert!((0.0..=1.0 + 1e-12).contains(&a), "accum alpha {a}");
                // Recompute the telescoping product independently.
                let mut t = 1.0;
                let mut sum = 0.0;
                for c in &tape.per_pixel[i] {
                    assert!((c.transmittance - t).abs() < 1e-12);
                    sum += c.alpha * t;
                    t *= 1.0 - c.alpha;
                }
                assert!((sum - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn divergence_gate_bounds_every_contribution() {
        let mut rng = StdRng::seed_from_u64(6);
        let spec = toy_spec();
        let prims = random_scene(&mut rng, 50);
        let (projected, _) = project_all(&prims, &Vector3::zeros(), &spec, &RenderOptions::default());
        let (img, tape) = rasterize(&projected, &prims, &Vector3::zeros(), &spec);
        let cos_div = spec.divergence.cos();
        for row in 0..spec.beams {
            for col in 0..spec.width {
                let i = img.idx(row, col);
                let ray = pixel_ray(row as f64 + 0.5, col as f64 + 0.5, &spec);
                for c in &tape.per_pixel[i] {
                    let pg = &projected[c.splat as usize];
                    assert!(ray.dot(&pg.dprime) >= cos_div);
                }
            }
        }
    }

    #[test]
    fn aabb_soundness_no_weight_clipped() {
        // Render each Gaussian alone with full-image coverage; any pixel
        // taking weight above 1e-6 must fall inside the computed AABB.
        let mut rng = StdRng::seed_from_u64(7);
        let spec = toy_spec();
        let prims = random_scene(&mut rng, 30);
        for g in &prims {
            let single = vec![g.clone()];
            let mut stats = CullStats::default();
            let Some(pg) = project_gaussian(
                g,
                0,
                &Vector3::zeros(),
                &spec,
                &RenderOptions::default(),
                &mut stats,
            ) else {
                continue;
            };
            let (proj_full, _) = project_all(
                &single,
                &Vector3::zeros(),
                &spec,
                &RenderOptions {
                    disable_aabb: true,
                    ..Default::default()
                },
            );
            let (img, _) = rasterize(&proj_full, &single, &Vector3::zeros(), &spec);
            for row in 0..spec.beams {
                for col in 0..spec.width {
                    let i = img.idx(row, col);
                    if img.accum_alpha[i] > 1e-6 {
                        assert!(
                            pg.aabb.contains(row as i64, col as i64, spec.width),
                            "pixel ({row},{col}) weight {} outside AABB {:?}",
                            img.accum_alpha[i],
                            pg.aabb
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn azimuth_seam_wraps_contributions() {
        let spec = toy_spec();
        // Centered exactly behind the sensor: azimuth pi maps to column 0,
        // and the footprint must also lift pixels at the far column edge.
        let d = 6.0;
        let g = gauss(
            Vector3::new(-d, 0.0, 0.0),
            Vector3::repeat(0.6),
            0.9,
            0.5,
            0.1,
        );
        let prims = vec![g];
        let (projected, _) = project_all(&prims, &Vector3::zeros(), &spec, &RenderOptions::default());
        assert_eq!(projected.len(), 1);
        let (img, _) = rasterize(&projected, &prims, &Vector3::zeros(), &spec);
        let row = 15;
        let left = img.accum_alpha[img.idx(row, 0)];
        let right = img.accum_alpha[img.idx(row, spec.width - 1)];
        assert!(left > 1e-4, "left seam pixel dark: {left}");
        assert!(right > 1e-4, "right seam pixel dark: {right}");
    }

    fn manual_tape(entries: Vec<Vec<Contribution>>, fingerprint: u64) -> ContributionTape {
        ContributionTape {
            per_pixel: entries,
            fingerprint,
        }
    }

    #[test]
    fn raydrop_rule_examples() {
        let spec = SensorSpec::new(1, 1, 0.3, 0.3, 1.0, 30.0).unwrap();
        let mk_img = |rbar: f64| {
            let mut img = RangeImage::new_empty(spec);
            img.depth[0] = 10.0;
            img.intensity[0] = 0.5;
            img.raydrop[0] = rbar;
            img.accum_alpha[0] = 0.9;
            img.valid[0] = true;
            img
        };
        let contrib = |depth: f64, alpha: f64| Contribution {
            splat: 0,
            alpha,
            transmittance: 1.0,
            depth,
        };
        // High drop probability, plenty of density: dropped.
        let tape = manual_tape(vec![(0..5).map(|_| contrib(10.0, 0.5)).collect()], 0);
        let out = apply_raydrop(&mk_img(0.9), &tape, LAMBDA_R, LAMBDA_TAU).unwrap();
        assert!(!out.valid[0]);
        assert_eq!(out.raydrop[0], 1.0);
        assert_eq!(out.depth[0], 0.0);
        // Low probability, density 3: kept.
        let tape = manual_tape(vec![(0..3).map(|_| contrib(10.1, 0.5)).collect()], 0);
        let out = apply_raydrop(&mk_img(0.1), &tape, LAMBDA_R, LAMBDA_TAU).unwrap();
        assert!(out.valid[0]);
        assert_eq!(out.raydrop[0], 0.0);
        // Low probability but only one nearby contributor: dropped.
        let mut entries = vec![contrib(10.0, 0.5)];
        entries.push(contrib(20.0, 0.5)); // outside the depth band
        entries.push(contrib(10.05, 0.005)); // below the alpha floor
        let tape = manual_tape(vec![entries], 0);
        let out = apply_raydrop(&mk_img(0.1), &tape, LAMBDA_R, LAMBDA_TAU).unwrap();
        assert!(!out.valid[0]);
    }

    #[test]
    fn raydrop_rejects_mismatched_tape() {
        let spec = toy_spec();
        let img = RangeImage::new_empty(spec);
        let tape = manual_tape(vec![Vec::new(); 3], 0);
        assert!(apply_raydrop(&img, &tape, LAMBDA_R, LAMBDA_TAU).is_err());
    }

    #[test]
    fn pseudo_plane_mode_renders_and_differs_from_micro() {
        let mut rng = StdRng::seed_from_u64(8);
        let spec = toy_spec();
        let prims = random_scene(&mut rng, 40);
        let (proj_m, _) = project_all(
            &prims,
            &Vector3::zeros(),
            &spec,
            &RenderOptions::default(),
        );
        let (img_m, _) = rasterize(&proj_m, &prims, &Vector3::zeros(), &spec);
        let (proj_p, _) = project_all(
            &prims,
            &Vector3::zeros(),
            &spec,
            &RenderOptions {
                mode: ProjectionMode::PseudoPlane,
                ..Default::default()
            },
        );
        let (img_p, _) = rasterize(&proj_p, &prims, &Vector3::zeros(), &spec);
        assert!(img_p.valid_count() > 0);
        assert_ne!(img_m.depth, img_p.depth);
    }

    #[test]
    fn png_outputs_write() {
        let spec = toy_spec();
        let mut rng = StdRng::seed_from_u64(9);
        let prims = random_scene(&mut rng, 30);
        let (projected, _) = project_all(&prims, &Vector3::zeros(), &spec, &RenderOptions::default());
        let (img, _) = rasterize(&projected, &prims, &Vector3::zeros(), &spec);
        let dir = tempfile::tempdir().unwrap();
        let dpath = dir.path().join("d.png");
        let ipath = dir.path().join("i.png");
        write_depth_png(&img, &dpath).unwrap();
        write_intensity_png(&img, &ipath).unwrap();
        let back = image::open(&dpath).unwrap();
        assert_eq!(back.width() as usize, spec.width);
        assert_eq!(back.height() as usize, spec.beams);
    }
}
