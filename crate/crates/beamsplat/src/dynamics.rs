//! Moving-object handling: split labeled frames into a static remainder
//! and per-instance canonical point sets, estimate rigid poses from
//! corresponded points, and place canonically reconstructed instances
//! back into a frame for joint rendering.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};

use crate::field::GaussianPrimitive;
use crate::oracle::TrackEntry;
use crate::pose::Pose;
use crate::{Error, Result};

/// Points closer than this to a box face still count as inside, so box
/// labels with slightly tight extents do not leak returns into the
/// static set.
pub const BOX_MARGIN: f64 = 0.1;

/// One instance's oriented box in one frame: full extents, yaw about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObbFrame {
    pub center: Vector3<f64>,
    pub yaw: f64,
    pub extents: Vector3<f64>,
}

impl ObbFrame {
    pub fn from_track(t: &TrackEntry) -> Self {
        Self {
            center: Vector3::new(t.center[0], t.center[1], t.center[2]),
            yaw: t.yaw,
            extents: Vector3::new(t.extents[0], t.extents[1], t.extents[2]),
        }
    }

    /// Canonical-to-world rigid pose of the box.
    pub fn pose(&self) -> Pose {
        Pose::from_yaw_translation(self.yaw, self.center)
    }

    fn contains_canonical(&self, c: &Vector3<f64>, margin: f64) -> bool {
        c.x.abs() <= self.extents.x / 2.0 + margin
            && c.y.abs() <= self.extents.y / 2.0 + margin
            && c.z.abs() <= self.extents.z / 2.0 + margin
    }
}

/// Least-squares proper rigid alignment: the pose (R, t) minimizing
/// sum |R p_i + t - q_i|^2 over index-aligned correspondences, via the
/// SVD of the centered cross-covariance with a determinant sign
/// correction on the smallest singular direction.
pub fn kabsch(p: &[Vector3<f64>], q: &[Vector3<f64>]) -> Result<Pose> {
    if p.len() != q.len() {
        return Err(Error::domain("correspondence lists differ in length"));
    }
    if p.len() < 3 {
        return Err(Error::Degenerate(
            "rigid alignment needs at least 3 correspondences".into(),
        ));
    }
    let n = p.len() as f64;
    let pc: Vector3<f64> = p.iter().sum::<Vector3<f64>>() / n;
    let qc: Vector3<f64> = q.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in p.iter().zip(q) {
        h += (b - qc) * (a - pc).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let s = svd.singular_values;
    // Collinear clouds leave the rotation about the line unconstrained.
    if s[1] <= 1e-12 * s[0].max(1e-300) {
        return Err(Error::Degenerate(
            "correspondences are collinear, rotation not determined".into(),
        ));
    }
    let det = (u * v_t).determinant();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, det.signum()));
    let r = u * d * v_t;
    let t = qc - r * pc;
    Pose::new(r, t)
}

/// Split a labeled frame: every point inside a box (with `BOX_MARGIN`)
/// goes to that instance, mapped into the box's canonical frame;
/// everything else stays static. Overlapping boxes resolve to the
/// nearest box center.
pub fn decompose_frame(
    points: &[(Vector3<f64>, f64)],
    boxes: &[(u64, ObbFrame)],
) -> (Vec<(Vector3<f64>, f64)>, BTreeMap<u64, Vec<(Vector3<f64>, f64)>>) {
    let mut stat = Vec::new();
    let mut per: BTreeMap<u64, Vec<(Vector3<f64>, f64)>> = BTreeMap::new();
    let inv: Vec<(u64, Pose, ObbFrame)> = boxes
        .iter()
        .map(|(id, b)| (*id, b.pose().inverse(), *b))
        .collect();
    for &(p, refl) in points {
        let mut best: Option<(f64, u64, Vector3<f64>)> = None;
        for (id, inv_pose, b) in &inv {
            let c = inv_pose.transform_point(&p);
            if b.contains_canonical(&c, BOX_MARGIN) {
                let d2 = (p - b.center).norm_squared();
                if best.is_none_or(|(bd, _, _)| d2 < bd) {
                    best = Some((d2, *id, c));
                }
            }
        }
        match best {
            Some((_, id, c)) => per.entry(id).or_default().push((c, refl)),
            None => stat.push((p, refl)),
        }
    }
    (stat, per)
}

/// Boxes of one frame from a full track table, id-ascending.
pub fn boxes_for_frame(tracks: &[TrackEntry], frame: usize) -> Vec<(u64, ObbFrame)> {
    let mut out: Vec<(u64, ObbFrame)> = tracks
        .iter()
        .filter(|t| t.frame == frame)
        .map(|t| (t.id, ObbFrame::from_track(t)))
        .collect();
    out.sort_by_key(|(id, _)| *id);
    out
}

/// Apply a rigid pose to spawned primitives: means move, orientations
/// rotate, scales and appearance are pose-invariant.
pub fn transform_primitives(prims: &mut [GaussianPrimitive], pose: &Pose) {
    for p in prims.iter_mut() {
        p.mean = pose.transform_point(&p.mean);
        p.rotation = pose.rotation() * p.rotation;
    }
}

/// Joint scene assembly for one frame: static primitives unchanged, each
/// instance's canonical primitives placed by that instance's pose for
/// the frame. Requesting a frame an instance has no pose for is an
/// error; callers skip absent instances instead.
pub fn compose_scene(
    static_prims: &[GaussianPrimitive],
    instances: &[(&crate::field::InstanceField, &[GaussianPrimitive])],
    frame: usize,
) -> Result<Vec<GaussianPrimitive>> {
    let mut out = static_prims.to_vec();
    for (inst, prims) in instances {
        let pose = inst.pose_for(frame)?;
        let mut moved = prims.to_vec();
        transform_primitives(&mut moved, pose);
        out.extend(moved);
    }
    Ok(out)
}

/// Refine the relative pose between two canonical point sets of the same
/// instance (e.g. consecutive frames): nearest-neighbor correspondences
/// (they are already box-pose pre-aligned), then one rigid alignment.
/// Returns the pose mapping `a` onto `b`.
pub fn align_canonical(a: &[(Vector3<f64>, f64)], b: &[(Vector3<f64>, f64)]) -> Result<Pose> {
    if a.len() < 3 || b.len() < 3 {
        return Err(Error::Degenerate(
            "too few points to align instance observations".into(),
        ));
    }
    let mut pa = Vec::with_capacity(a.len());
    let mut pb = Vec::with_capacity(a.len());
    for (p, _) in a {
        // Brute-force nearest neighbor; instance clouds are small.
        let q = b
            .iter()
            .map(|(q, _)| q)
            .min_by(|x, y| (*x - p).norm_squared().total_cmp(&(*y - p).norm_squared()))
            .unwrap();
        pa.push(*p);
        pb.push(*q);
    }
    kabsch(&pa, &pb)
}
