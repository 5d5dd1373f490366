//! Point-cloud and image evaluation metrics: Chamfer distance, F-score,
//! depth RMSE/MAE/MedAE, intensity MAE/RMSE/PSNR/SSIM, plus the voxel-grid
//! nearest-neighbor index they share.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize, Serializer};

use crate::rangeview::RangeImage;
use crate::{Error, Result};

/// Default F-score distance threshold, meters.
pub const FSCORE_TAU: f64 = 0.05;

/// PSNR values at or above this are reported as the cap (a perfect match
/// has infinite PSNR, which JSON cannot carry).
pub const PSNR_CAP_DB: f64 = 99.0;

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(v.min(PSNR_CAP_DB))
}

/// One evaluation row. Point metrics are meters; intensity metrics are in
/// native [0, 1] units except PSNR (dB).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalReport {
    pub cd: f64,
    pub fscore: f64,
    pub fscore_tau: f64,
    pub depth_rmse: f64,
    pub depth_mae: f64,
    pub depth_medae: f64,
    pub int_mae: f64,
    pub int_rmse: f64,
    #[serde(serialize_with = "serialize_psnr")]
    pub psnr: f64,
    pub ssim: f64,
}

impl EvalReport {
    pub fn table_header() -> String {
        format!(
            "{:>10} {:>8} {:>8} {:>8} | {:>8} {:>8} {:>8} {:>8}",
            "CD", "F-score", "RMSE", "MAE", "MAE", "RMSE", "PSNR", "SSIM"
        )
    }

    pub fn table_row(&self) -> String {
        format!(
            "{:>10.4} {:>8.4} {:>8.4} {:>8.4} | {:>8.4} {:>8.4} {:>8.2} {:>8.4}",
            self.cd,
            self.fscore,
            self.depth_rmse,
            self.depth_mae,
            self.int_mae,
            self.int_rmse,
            self.psnr.min(PSNR_CAP_DB),
            self.ssim
        )
    }

    /// Arithmetic mean over per-frame reports.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport> {
        if reports.is_empty() {
            return Err(Error::domain("no reports to average"));
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            cd: sum(|r| r.cd),
            fscore: sum(|r| r.fscore),
            fscore_tau: reports[0].fscore_tau,
            depth_rmse: sum(|r| r.depth_rmse),
            depth_mae: sum(|r| r.depth_mae),
            depth_medae: sum(|r| r.depth_medae),
            int_mae: sum(|r| r.int_mae),
            int_rmse: sum(|r| r.int_rmse),
            psnr: sum(|r| r.psnr.min(PSNR_CAP_DB)),
            ssim: sum(|r| r.ssim),
        })
    }
}

// ---------------------------------------------------------------------------
// Nearest neighbors
// ---------------------------------------------------------------------------

/// Uniform voxel hash grid for nearest-neighbor queries over a fixed point
/// set. Queries run an expanding Chebyshev-shell search; a shell at cell
/// radius r cannot hold anything nearer than (r-1)·cell, which bounds the
/// search exactly.
pub struct VoxelGrid {
    cell: f64,
    map: HashMap<(i64, i64, i64), Vec<u32>>,
    points: Vec<Vector3<f64>>,
    key_lo: (i64, i64, i64),
    key_hi: (i64, i64, i64),
}

impl VoxelGrid {
    pub fn build(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::domain("cannot index an empty point set"));
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let diag = (hi - lo).norm();
        // Aim for O(1) points per cell on roughly uniform sets.
        let cell = (diag / (points.len() as f64).cbrt()).max(1e-3);
        let mut map: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut key_lo = (i64::MAX, i64::MAX, i64::MAX);
        let mut key_hi = (i64::MIN, i64::MIN, i64::MIN);
        for (i, p) in points.iter().enumerate() {
            let key = Self::key_at(p, cell);
            key_lo = (key_lo.0.min(key.0), key_lo.1.min(key.1), key_lo.2.min(key.2));
            key_hi = (key_hi.0.max(key.0), key_hi.1.max(key.1), key_hi.2.max(key.2));
            map.entry(key).or_default().push(i as u32);
        }
        Ok(Self {
            cell,
            map,
            points: points.to_vec(),
            key_lo,
            key_hi,
        })
    }

    fn key_at(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point to `q`, optionally skipping
    /// one index (self-queries).
    pub fn nearest(&self, q: &Vector3<f64>, skip: Option<usize>) -> (usize, f64) {
        let dists = self.knn_dists(q, 1, skip);
        dists[0]
    }

    /// The k nearest (index, distance) pairs sorted by distance. k is
    /// capped at the indexed count (minus the skipped point).
    pub fn knn_dists(&self, q: &Vector3<f64>, k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
        let avail = self.points.len() - usize::from(skip.is_some());
        let k = k.min(avail).max(1);
        let center = Self::key_at(q, self.cell);
        let consider = |best: &mut Vec<(usize, f64)>, i: usize| {
            if skip == Some(i) {
                return;
            }
            let d = (self.points[i] - q).norm();
            if best.len() < k {
                best.push((i, d));
                best.sort_by(|a, b| a.1.total_cmp(&b.1));
            } else if d < best[k - 1].1 {
                best[k - 1] = (i, d);
                best.sort_by(|a, b| a.1.total_cmp(&b.1));
            }
        };
        // Shells closer than the occupied key box are provably empty.
        let r0 = {
            let dx = (self.key_lo.0 - center.0).max(center.0 - self.key_hi.0).max(0);
            let dy = (self.key_lo.1 - center.1).max(center.1 - self.key_hi.1).max(0);
            let dz = (self.key_lo.2 - center.2).max(center.2 - self.key_hi.2).max(0);
            dx.max(dy).max(dz)
        };
        // Sorted ascending; worst kept at the back.
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        let mut r = r0;
        loop {
            // A point in an unscanned shell s >= r sits at least
            // (s - 1) * cell away, so the k found so far are final.
            if best.len() == k && (r - 1).max(0) as f64 * self.cell > best[k - 1].1 {
                break;
            }
            // Once the shell outgrows the whole index, one exact sweep
            // over the buckets is cheaper and always terminates.
            let shell_cells = if r == 0 { 1 } else { 24 * r * r + 2 };
            if shell_cells as usize > self.map.len() {
                best.clear();
                for i in 0..self.points.len() {
                    consider(&mut best, i);
                }
                break;
            }
            self.for_shell(center, r, |key| {
                if let Some(bucket) = self.map.get(&key) {
                    for &i in bucket {
                        consider(&mut best, i as usize);
                    }
                }
            });
            r += 1;
        }
        best
    }

    /// Visit every cell key at exactly Chebyshev radius r from center.
    fn for_shell(&self, c: (i64, i64, i64), r: i64, mut f: impl FnMut((i64, i64, i64))) {
        if r == 0 {
            f(c);
            return;
        }
        for dx in -r..=r {
            for dy in -r..=r {
                f((c.0 + dx, c.1 + dy, c.2 + r));
                f((c.0 + dx, c.1 + dy, c.2 - r));
            }
        }
        for dx in -r..=r {
            for dz in -(r - 1)..=(r - 1) {
                f((c.0 + dx, c.1 + r, c.2 + dz));
                f((c.0 + dx, c.1 - r, c.2 + dz));
            }
        }
        for dy in -(r - 1)..=(r - 1) {
            for dz in -(r - 1)..=(r - 1) {
                f((c.0 + r, c.1 + dy, c.2 + dz));
                f((c.0 - r, c.1 + dy, c.2 + dz));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Point metrics
// ---------------------------------------------------------------------------

/// Symmetric mean Chamfer distance in meters (unsquared):
/// half the mean nearest-neighbor distance from A to B plus half from B
/// to A. `squared` switches both means to squared distances.
pub fn chamfer_with(a: &[Vector3<f64>], b: &[Vector3<f64>], squared: bool) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("chamfer needs two nonempty point sets"));
    }
    let ga = VoxelGrid::build(a)?;
    let gb = VoxelGrid::build(b)?;
    let mean_to = |from: &[Vector3<f64>], to: &VoxelGrid| -> f64 {
        let mut acc = 0.0;
        for p in from {
            let (_, d) = to.nearest(p, None);
            acc += if squared { d * d } else { d };
        }
        acc / from.len() as f64
    };
    Ok(0.5 * mean_to(a, &gb) + 0.5 * mean_to(b, &ga))
}

pub fn chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    chamfer_with(a, b, false)
}

/// F-score at threshold tau: harmonic mean of precision (fraction of A
/// within tau of B) and recall (fraction of B within tau of A).
pub fn fscore(a: &[Vector3<f64>], b: &[Vector3<f64>], tau: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("fscore needs two nonempty point sets"));
    }
    if tau <= 0.0 {
        return Err(Error::domain("fscore threshold must be positive"));
    }
    let ga = VoxelGrid::build(a)?;
    let gb = VoxelGrid::build(b)?;
    let frac_within = |from: &[Vector3<f64>], to: &VoxelGrid| -> f64 {
        let hits = from.iter().filter(|p| to.nearest(p, None).1 <= tau).count();
        hits as f64 / from.len() as f64
    };
    let precision = frac_within(a, &gb);
    let recall = frac_within(b, &ga);
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

// ---------------------------------------------------------------------------
// Image metrics
// ---------------------------------------------------------------------------

/// 11-tap Gaussian window, sigma 1.5, normalized to sum 1.
pub(crate) fn gaussian_window11() -> [f64; 11] {
    let sigma = 1.5;
    let mut w = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable 11x11 Gaussian blur with zero padding at the borders.
pub(crate) fn blur11(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let win = gaussian_window11();
    let mut tmp = vec![0.0; h * w];
    // Horizontal pass.
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                let c = col as i64 + t as i64 - 5;
                if c >= 0 && (c as usize) < w {
                    acc += wt * img[row * w + c as usize];
                }
            }
            tmp[row * w + col] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (t, wt) in win.iter().enumerate() {
                let r = row as i64 + t as i64 - 5;
                if r >= 0 && (r as usize) < h {
                    acc += wt * tmp[r as usize * w + col];
                }
            }
            out[row * w + col] = acc;
        }
    }
    out
}

pub(crate) const SSIM_C1: f64 = 0.01 * 0.01;
pub(crate) const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-pixel SSIM map between two equally sized single-channel images with
/// peak value 1, using the 11x11 Gaussian window.
pub(crate) fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mu_x = blur11(x, h, w);
    let mu_y = blur11(y, h, w);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let g_xx = blur11(&xx, h, w);
    let g_yy = blur11(&yy, h, w);
    let g_xy = blur11(&xy, h, w);
    let mut map = vec![0.0; h * w];
    for i in 0..h * w {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = g_xx[i] - mx * mx;
        let var_y = g_yy[i] - my * my;
        let cov = g_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * cov + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = var_x + var_y + SSIM_C2;
        map[i] = (a1 * a2) / (b1 * b2);
    }
    map
}

/// Mean SSIM over the whole image.
pub fn ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let map = ssim_map(x, y, h, w);
    map.iter().sum::<f64>() / map.len() as f64
}

/// PSNR in dB for signals with peak 1. Infinite when mse = 0; the cap is
/// applied only at serialization and table printing.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn percentile50(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Full report between a rendered and a measured frame.
///
/// Depth errors are taken over pixels valid in the ground truth; intensity
/// metrics run over every pixel with dropped pixels contributing 0 (drops
/// clear all attributes). Point metrics compare the two back-projected
/// clouds in the sensor frame.
pub fn image_metrics(pred: &RangeImage, gt: &RangeImage) -> Result<EvalReport> {
    image_metrics_with(pred, gt, FSCORE_TAU, false)
}

pub fn image_metrics_with(
    pred: &RangeImage,
    gt: &RangeImage,
    tau: f64,
    squared_cd: bool,
) -> Result<EvalReport> {
    if !pred.spec.same_grid(&gt.spec) {
        return Err(Error::domain("pred and gt sensor grids differ"));
    }
    let n = gt.spec.pixel_count();
    let mut depth_abs: Vec<f64> = Vec::new();
    for i in 0..n {
        if gt.valid[i] {
            depth_abs.push((pred.depth[i] - gt.depth[i]).abs());
        }
    }
    if depth_abs.is_empty() {
        return Err(Error::domain("ground truth has no valid pixels"));
    }
    let depth_mae = depth_abs.iter().sum::<f64>() / depth_abs.len() as f64;
    let depth_rmse =
        (depth_abs.iter().map(|e| e * e).sum::<f64>() / depth_abs.len() as f64).sqrt();
    let depth_medae = percentile50(depth_abs);

    let mut int_se = 0.0;
    let mut int_ae = 0.0;
    for i in 0..n {
        let e = pred.intensity[i] - gt.intensity[i];
        int_se += e * e;
        int_ae += e.abs();
    }
    let int_mse = int_se / n as f64;
    let int_mae = int_ae / n as f64;
    let ssim_v = ssim(
        &pred.intensity,
        &gt.intensity,
        gt.spec.beams,
        gt.spec.width,
    );

    let pose = crate::pose::Pose::identity();
    let pa: Vec<Vector3<f64>> = crate::rangeview::rangeimage_to_points(pred, &pose)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let pb: Vec<Vector3<f64>> = crate::rangeview::rangeimage_to_points(gt, &pose)
        .into_iter()
        .map(|(p, _)| p)
        .collect();
    let (cd, fs) = if pa.is_empty() {
        // A fully dropped prediction has no cloud; report worst case.
        (f64::INFINITY, 0.0)
    } else {
        (chamfer_with(&pa, &pb, squared_cd)?, fscore(&pa, &pb, tau)?)
    };

    Ok(EvalReport {
        cd,
        fscore: fs,
        fscore_tau: tau,
        depth_rmse,
        depth_mae,
        depth_medae,
        int_mae,
        int_rmse: int_mse.sqrt(),
        psnr: psnr_from_mse(int_mse),
        ssim: ssim_v,
    })
}

#[cfg(test)]
pub(crate) mod test_oracles {
    //! Brute-force reference implementations the fast paths are checked
    //! against.
    use super::*;

    pub fn nearest_brute(q: &Vector3<f64>, set: &[Vector3<f64>]) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, p) in set.iter().enumerate() {
            let d = (p - q).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    pub fn chamfer_brute(a: &[Vector3<f64>], b: &[Vector3<f64>], squared: bool) -> f64 {
        let mean_to = |from: &[Vector3<f64>], to: &[Vector3<f64>]| -> f64 {
            let mut acc = 0.0;
            for p in from {
                let d = nearest_brute(p, to).1;
                acc += if squared { d * d } else { d };
            }
            acc / from.len() as f64
        };
        0.5 * mean_to(a, b) + 0.5 * mean_to(b, a)
    }

    pub fn fscore_brute(a: &[Vector3<f64>], b: &[Vector3<f64>], tau: f64) -> f64 {
        let frac = |from: &[Vector3<f64>], to: &[Vector3<f64>]| {
            from.iter()
                .filter(|p| nearest_brute(p, to).1 <= tau)
                .count() as f64
                / from.len() as f64
        };
        let (p, r) = (frac(a, b), frac(b, a));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    /// Dense (non-separable) SSIM evaluation, same window and border
    /// convention, as an independent reference.
    pub fn ssim_brute(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
        let win = gaussian_window11();
        let conv = |img: &[f64], row: usize, col: usize| -> f64 {
            let mut acc = 0.0;
            for (ti, wi) in win.iter().enumerate() {
                for (tj, wj) in win.iter().enumerate() {
                    let r = row as i64 + ti as i64 - 5;
                    let c = col as i64 + tj as i64 - 5;
                    if r >= 0 && (r as usize) < h && c >= 0 && (c as usize) < w {
                        acc += wi * wj * img[r as usize * w + c as usize];
                    }
                }
            }
            acc
        };
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let mut total = 0.0;
        for row in 0..h {
            for col in 0..w {
                let mx = conv(x, row, col);
                let my = conv(y, row, col);
                let var_x = conv(&xx, row, col) - mx * mx;
                let var_y = conv(&yy, row, col) - my * my;
                let cov = conv(&xy, row, col) - mx * my;
                let a1 = 2.0 * mx * my + SSIM_C1;
                let a2 = 2.0 * cov + SSIM_C2;
                let b1 = mx * mx + my * my + SSIM_C1;
                let b2 = var_x + var_y + SSIM_C2;
                total += (a1 * a2) / (b1 * b2);
            }
        }
        total / (h * w) as f64
    }
}
