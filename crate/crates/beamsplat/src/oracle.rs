//! Analytic ground truth: closed-form ray-cast LiDAR simulation over
//! scenes built from planes, rectangles, spheres, and boxes, with an
//! incident-angle intensity model and structured ray dropping. Everything
//! here is exact geometry, independent of the splatting renderer, so it
//! doubles as the verification oracle for the rest of the crate.

use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::pose::Pose;
use crate::rangeview::{pixel_ray, RangeImage, SensorSpec};
use crate::{Error, Result};

/// Static scene surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Primitive {
    /// Infinite plane normal . x = offset.
    Plane {
        normal: [f64; 3],
        offset: f64,
        reflectance: f64,
    },
    /// Finite rectangle spanned by two orthogonal half-axis vectors.
    Rect {
        center: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        reflectance: f64,
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
        reflectance: f64,
    },
    /// Axis-aligned box.
    Box {
        min: [f64; 3],
        max: [f64; 3],
        reflectance: f64,
    },
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// A rigid actor: an upright box with a per-frame (center, yaw) track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingInstance {
    pub id: u64,
    /// Full box sizes along the local axes.
    pub extents: [f64; 3],
    pub reflectance: f64,
    /// One entry per frame; the last entry persists beyond the track end.
    pub track: Vec<TrackPose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPose {
    pub center: [f64; 3],
    pub yaw: f64,
}

impl MovingInstance {
    pub fn pose_at(&self, frame: usize) -> TrackPose {
        self.track[frame.min(self.track.len() - 1)]
    }
}

/// Complete analytic scene: static surfaces, moving actors, and the
/// sensor-effects parameters of the simulated LiDAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    #[serde(default)]
    pub instances: Vec<MovingInstance>,
    /// Returns closer than this are blanked by the receiver, meters.
    pub near_blind: f64,
    /// Reference distance of the 1/d^2 intensity falloff, meters.
    pub d0: f64,
    /// Per-pixel stochastic drop probability.
    pub drop_p: f64,
    pub seed: u64,
}

impl AnalyticScene {
    pub fn validate(&self) -> Result<()> {
        let refl_ok = |r: f64| (0.0..=1.0).contains(&r);
        for p in &self.primitives {
            let (ok, named) = match p {
                Primitive::Plane {
                    normal, reflectance, ..
                } => (v3(normal).norm() > 1e-9 && refl_ok(*reflectance), "plane"),
                Primitive::Rect {
                    u, v, reflectance, ..
                } => {
                    let (u, v) = (v3(u), v3(v));
                    (
                        u.norm() > 1e-9
                            && v.norm() > 1e-9
                            && u.dot(&v).abs() < 1e-9 * u.norm() * v.norm()
                            && refl_ok(*reflectance),
                        "rect",
                    )
                }
                Primitive::Sphere {
                    radius, reflectance, ..
                } => (*radius > 0.0 && refl_ok(*reflectance), "sphere"),
                Primitive::Box {
                    min, max, reflectance,
                } => (
                    (0..3).all(|k| min[k] < max[k]) && refl_ok(*reflectance),
                    "box",
                ),
            };
            if !ok {
                return Err(Error::domain(format!("invalid {named} primitive")));
            }
        }
        for inst in &self.instances {
            if !(v3(&inst.extents).min() > 0.0 && refl_ok(inst.reflectance)) {
                return Err(Error::domain("invalid instance geometry"));
            }
            if inst.track.is_empty() {
                return Err(Error::domain("instance track must be nonempty"));
            }
        }
        if self.near_blind < 0.0 || self.d0 <= 0.0 || !(0.0..1.0).contains(&self.drop_p) {
            return Err(Error::domain("invalid sensor-effects parameters"));
        }
        Ok(())
    }

    /// Parse a JSON scene file. Malformed input reports the line it
    /// failed on.
    pub fn from_json(text: &str) -> Result<Self> {
        let scene: AnalyticScene = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("scene serialization failed: {e}")))?;
        Ok(std::fs::write(path, text)?)
    }
}

/// One analytic ray intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: Vector3<f64>,
    pub reflectance: f64,
}

fn plane_hit(o: &Vector3<f64>, dir: &Vector3<f64>, n: &Vector3<f64>, c: f64) -> Option<f64> {
    let den = n.dot(dir);
    if den.abs() < 1e-12 {
        return None;
    }
    let t = (c - n.dot(o)) / den;
    (t > 1e-9).then_some(t)
}

fn sphere_hit(o: &Vector3<f64>, dir: &Vector3<f64>, center: &Vector3<f64>, r: f64) -> Option<f64> {
    let oc = o - center;
    let b = oc.dot(dir);
    let disc = b * b - (oc.norm_squared() - r * r);
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    for t in [-b - s, -b + s] {
        if t > 1e-9 {
            return Some(t);
        }
    }
    None
}

/// Slab intersection with an axis-aligned box; returns (t, entering axis).
fn aabb_hit(
    o: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, usize)> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    let mut axis = 0usize;
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut b) = ((lo[k] - o[k]) / dir[k], (hi[k] - o[k]) / dir[k]);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        if a > t_enter {
            t_enter = a;
            axis = k;
        }
        t_exit = t_exit.min(b);
        if t_enter > t_exit {
            return None;
        }
    }
    (t_enter > 1e-9).then_some((t_enter, axis))
}

/// Nearest analytic intersection along a unit ray at the given frame.
pub fn cast_ray(
    scene: &AnalyticScene,
    o: &Vector3<f64>,
    dir: &Vector3<f64>,
    frame: usize,
) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut take = |t: f64, normal: Vector3<f64>, reflectance: f64| {
        if best.as_ref().is_none_or(|h| t < h.t) {
            best = Some(Hit {
                t,
                normal,
                reflectance,
            });
        }
    };
    for p in &scene.primitives {
        match p {
            Primitive::Plane {
                normal,
                offset,
                reflectance,
            } => {
                let n = v3(normal).normalize();
                let c = offset / v3(normal).norm();
                if let Some(t) = plane_hit(o, dir, &n, c) {
                    take(t, n, *reflectance);
                }
            }
            Primitive::Rect {
                center,
                u,
                v,
                reflectance,
            } => {
                let (center, u, v) = (v3(center), v3(u), v3(v));
                let n = u.cross(&v).normalize();
                if let Some(t) = plane_hit(o, dir, &n, n.dot(&center)) {
                    let rel = o + dir * t - center;
                    if rel.dot(&u).abs() <= u.norm_squared() && rel.dot(&v).abs() <= v.norm_squared()
                    {
                        take(t, n, *reflectance);
                    }
                }
            }
            Primitive::Sphere {
                center,
                radius,
                reflectance,
            } => {
                let center = v3(center);
                if let Some(t) = sphere_hit(o, dir, &center, *radius) {
                    let n = (o + dir * t - center).normalize();
                    take(t, n, *reflectance);
                }
            }
            Primitive::Box {
                min,
                max,
                reflectance,
            } => {
                if let Some((t, axis)) = aabb_hit(o, dir, &v3(min), &v3(max)) {
                    let mut n = Vector3::zeros();
                    n[axis] = -dir[axis].signum();
                    take(t, n, *reflectance);
                }
            }
        }
    }
    for inst in &scene.instances {
        let tp = inst.pose_at(frame);
        // Into the box's local frame (yaw about z).
        let (s, c) = tp.yaw.sin_cos();
        let rot = |p: &Vector3<f64>| Vector3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z);
        let lo_local = -v3(&inst.extents) / 2.0;
        let hi_local = v3(&inst.extents) / 2.0;
        let ol = rot(&(o - v3(&tp.center)));
        let dl = rot(dir);
        if let Some((t, axis)) = aabb_hit(&ol, &dl, &lo_local, &hi_local) {
            let mut nl = Vector3::zeros();
            nl[axis] = -dl[axis].signum();
            // Back to world (inverse yaw).
            let n = Vector3::new(c * nl.x - s * nl.y, s * nl.x + c * nl.y, nl.z);
            take(t, n, inst.reflectance);
        }
    }
    best
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Reproducible per-(frame, pixel) uniform sample in [0, 1).
fn drop_sample(seed: u64, frame: usize, pixel: usize) -> f64 {
    let h = mix64(seed ^ mix64(((frame as u64) << 32) ^ pixel as u64));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Exact LiDAR simulation of one frame. Per pixel: nearest intersection
/// distance, intensity = reflectance * cos(incidence) * (d0/d)^2 clamped
/// to [0,1], and the structured drop model (no hit, near-blind radius,
/// out of range, seeded stochastic drops).
pub fn raycast_frame(
    scene: &AnalyticScene,
    pose: &Pose,
    frame: usize,
    spec: &SensorSpec,
) -> RangeImage {
    let mut img = RangeImage::new_empty(*spec);
    let o = *pose.translation();
    let w = spec.width;
    let render_row = |row: usize, depth: &mut [f64], intensity: &mut [f64], keep: &mut [bool]| {
        for col in 0..w {
            let dir = pose.rotate_vector(&pixel_ray(row as f64 + 0.5, col as f64 + 0.5, spec));
            let Some(hit) = cast_ray(scene, &o, &dir, frame) else {
                continue;
            };
            let d = hit.t;
            if d < scene.near_blind || d < spec.range_min || d > spec.range_max {
                continue;
            }
            if drop_sample(scene.seed, frame, row * w + col) < scene.drop_p {
                continue;
            }
            let cos_inc = dir.dot(&hit.normal).abs();
            depth[col] = d;
            intensity[col] = (hit.reflectance * cos_inc * (scene.d0 / d).powi(2)).clamp(0.0, 1.0);
            keep[col] = true;
        }
    };

    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<bool>)> = if rayon::current_num_threads() > 1 {
        (0..spec.beams)
            .into_par_iter()
            .map(|row| {
                let (mut d, mut i, mut k) = (vec![0.0; w], vec![0.0; w], vec![false; w]);
                render_row(row, &mut d, &mut i, &mut k);
                (d, i, k)
            })
            .collect()
    } else {
        (0..spec.beams)
            .map(|row| {
                let (mut d, mut i, mut k) = (vec![0.0; w], vec![0.0; w], vec![false; w]);
                render_row(row, &mut d, &mut i, &mut k);
                (d, i, k)
            })
            .collect()
    };
    for (row, (d, inten, keep)) in rows.into_iter().enumerate() {
        for col in 0..w {
            if keep[col] {
                let idx = img.idx(row, col);
                img.depth[idx] = d[col];
                img.intensity[idx] = inten[col];
                img.raydrop[idx] = 0.0;
                img.accum_alpha[idx] = 1.0;
                img.valid[idx] = true;
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Sequence generation and the dataset directory layout
// ---------------------------------------------------------------------------

/// Ground-truth track row, one JSON object per line in tracks.jsonl.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub frame: usize,
    pub id: u64,
    pub center: [f64; 3],
    pub yaw: f64,
    pub extents: [f64; 3],
}

/// An in-memory frame sequence with poses, tracks, and a train/val split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SensorSpec,
    pub frames: Vec<RangeImage>,
    pub poses: Vec<Pose>,
    pub tracks: Vec<TrackEntry>,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<usize>,
    val: Vec<usize>,
}

impl Dataset {
    /// Directory layout: frames/NNNN.rv, poses.csv, tracks.jsonl,
    /// split.json.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("frames"))?;
        for (i, frame) in self.frames.iter().enumerate() {
            frame.save_rv(&dir.join("frames").join(format!("{i:04}.rv")))?;
        }
        let mut poses = String::from(
            "frame,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n",
        );
        for (i, pose) in self.poses.iter().enumerate() {
            let row = pose.to_row();
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            poses.push_str(&format!("{i},{}\n", cells.join(",")));
        }
        std::fs::write(dir.join("poses.csv"), poses)?;
        let mut tracks = std::fs::File::create(dir.join("tracks.jsonl"))?;
        for entry in &self.tracks {
            let line = serde_json::to_string(entry)
                .map_err(|e| Error::format(format!("track serialization failed: {e}")))?;
            writeln!(tracks, "{line}")?;
        }
        let split = serde_json::to_string_pretty(&SplitFile {
            train: self.train_idx.clone(),
            val: self.val_idx.clone(),
        })
        .map_err(|e| Error::format(format!("split serialization failed: {e}")))?;
        std::fs::write(dir.join("split.json"), split)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let poses_text = std::fs::read_to_string(dir.join("poses.csv"))?;
        let mut poses = Vec::new();
        for (lineno, line) in poses_text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 13 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    msg: format!("expected 13 cells, got {}", cells.len()),
                });
            }
            let mut row = [0.0; 12];
            for (k, cell) in cells[1..].iter().enumerate() {
                row[k] = cell.trim().parse().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad number {cell:?}: {e}"),
                })?;
            }
            poses.push(Pose::from_row(&row)?);
        }
        let mut frames = Vec::with_capacity(poses.len());
        for i in 0..poses.len() {
            frames.push(RangeImage::load_rv(&dir.join("frames").join(format!("{i:04}.rv")))?);
        }
        let spec = frames
            .first()
            .map(|f| f.spec)
            .ok_or_else(|| Error::domain("dataset has no frames"))?;
        if let Some(bad) = frames.iter().find(|f| !f.spec.same_grid(&spec)) {
            return Err(Error::domain(format!(
                "mixed sensor grids in dataset: {}x{} vs {}x{}",
                spec.beams, spec.width, bad.spec.beams, bad.spec.width
            )));
        }
        let mut tracks = Vec::new();
        let tracks_path = dir.join("tracks.jsonl");
        if tracks_path.exists() {
            let reader = BufReader::new(std::fs::File::open(&tracks_path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: TrackEntry = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: e.to_string(),
                })?;
                tracks.push(entry);
            }
        }
        let split_text = std::fs::read_to_string(dir.join("split.json"))?;
        let split: SplitFile = serde_json::from_str(&split_text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        Ok(Self {
            spec,
            frames,
            poses,
            tracks,
            train_idx: split.train,
            val_idx: split.val,
        })
    }
}

/// Simulate a whole trajectory. `val_idx` names the held-out frames; the
/// rest are the training split. Deterministic for a fixed scene seed.
pub fn generate_sequence(
    scene: &AnalyticScene,
    trajectory: &[Pose],
    spec: &SensorSpec,
    val_idx: &[usize],
) -> Result<Dataset> {
    if trajectory.is_empty() {
        return Err(Error::domain("trajectory must contain at least one pose"));
    }
    scene.validate()?;
    spec.validate()?;
    if let Some(&bad) = val_idx.iter().find(|&&i| i >= trajectory.len()) {
        return Err(Error::domain(format!(
            "validation index {bad} out of range for {} frames",
            trajectory.len()
        )));
    }
    let frames: Vec<RangeImage> = trajectory
        .iter()
        .enumerate()
        .map(|(f, pose)| raycast_frame(scene, pose, f, spec))
        .collect();
    let mut tracks = Vec::new();
    for (f, _) in trajectory.iter().enumerate() {
        for inst in &scene.instances {
            let tp = inst.pose_at(f);
            tracks.push(TrackEntry {
                frame: f,
                id: inst.id,
                center: tp.center,
                yaw: tp.yaw,
                extents: inst.extents,
            });
        }
    }
    let train_idx: Vec<usize> = (0..trajectory.len())
        .filter(|i| !val_idx.contains(i))
        .collect();
    Ok(Dataset {
        spec: *spec,
        frames,
        poses: trajectory.to_vec(),
        tracks,
        train_idx,
        val_idx: val_idx.to_vec(),
    })
}

// ---------------------------------------------------------------------------
// The urban-toy benchmark scene
// ---------------------------------------------------------------------------

/// Desk-scale benchmark: a ground plane, two long walls, three spheres of
/// different reflectance, and one car-sized box driving forward, scanned
/// by a 32 x 256 sensor moving down the corridor. 54 frames, 4 held out.
pub fn urban_toy() -> (AnalyticScene, Vec<Pose>, SensorSpec, Vec<usize>) {
    let scene = AnalyticScene {
        primitives: vec![
            Primitive::Plane {
                normal: [0.0, 0.0, 1.0],
                offset: 0.0,
                reflectance: 0.55,
            },
            Primitive::Rect {
                center: [0.0, 12.0, 3.0],
                u: [40.0, 0.0, 0.0],
                v: [0.0, 0.0, 3.0],
                reflectance: 0.7,
            },
            Primitive::Rect {
                center: [0.0, -12.0, 3.0],
                u: [40.0, 0.0, 0.0],
                v: [0.0, 0.0, 3.0],
                reflectance: 0.4,
            },
            Primitive::Sphere {
                center: [5.0, 4.0, 1.2],
                radius: 1.2,
                reflectance: 0.9,
            },
            Primitive::Sphere {
                center: [12.0, -5.0, 0.8],
                radius: 0.8,
                reflectance: 0.3,
            },
            Primitive::Sphere {
                center: [20.0, 6.0, 1.5],
                radius: 1.5,
                reflectance: 0.6,
            },
        ],
        instances: vec![MovingInstance {
            id: 1,
            extents: [4.2, 1.9, 1.6],
            reflectance: 0.8,
            track: (0..54)
                .map(|f| TrackPose {
                    center: [6.0 + 0.35 * f as f64, -3.0, 0.8],
                    yaw: 0.0,
                })
                .collect(),
        }],
        near_blind: 3.0,
        d0: 10.0,
        drop_p: 0.02,
        seed: 7,
    };
    let trajectory: Vec<Pose> = (0..54)
        .map(|f| Pose::from_translation(Vector3::new(-12.0 + 0.5 * f as f64, 0.0, 1.8)))
        .collect();
    let spec = SensorSpec::new(32, 256, 0.26, 0.26, 1.0, 60.0).unwrap();
    (scene, trajectory, spec, vec![12, 25, 38, 51])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rangeview::{points_to_rangeimage, rangeimage_to_points};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn single_plane(normal: [f64; 3], offset: f64, reflectance: f64) -> AnalyticScene {
        AnalyticScene {
            primitives: vec![Primitive::Plane {
                normal,
                offset,
                reflectance,
            }],
            instances: vec![],
            near_blind: 0.1,
            d0: 10.0,
            drop_p: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn ground_plane_at_minus_thirty_degrees() {
        // z = -2, beam elevation -30 degrees: d = 2 / sin(30) = 4.
        let scene = single_plane([0.0, 0.0, 1.0], -2.0, 0.5);
        let dir = Vector3::new((3.0f64).sqrt() / 2.0, 0.0, -0.5);
        let hit = cast_ray(&scene, &Vector3::zeros(), &dir, 0).unwrap();
        assert_relative_eq!(hit.t, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_sphere_ten_meters_ahead() {
        let scene = AnalyticScene {
            primitives: vec![Primitive::Sphere {
                center: [10.0, 0.0, 0.0],
                radius: 1.0,
                reflectance: 0.5,
            }],
            instances: vec![],
            near_blind: 0.1,
            d0: 10.0,
            drop_p: 0.0,
            seed: 0,
        };
        let hit = cast_ray(&scene, &Vector3::zeros(), &Vector3::x(), 0).unwrap();
        assert_relative_eq!(hit.t, 9.0, epsilon = 1e-12);
    }

    #[test]
    fn incidence_angle_halves_intensity_at_sixty_degrees() {
        let d = 5.0;
        // Normal incidence.
        let head_on = single_plane([-1.0, 0.0, 0.0], -d, 0.5);
        // Tilted so the beam meets the surface at 60 degrees off normal,
        // hitting at the same distance.
        let tilt: f64 = 60.0_f64.to_radians();
        let n = [-tilt.cos(), -tilt.sin(), 0.0];
        let hit_point = Vector3::new(d, 0.0, 0.0);
        let offset = v3(&n).dot(&hit_point);
        let slanted = single_plane(n, offset, 0.5);

        let intensity = |scene: &AnalyticScene| {
            let hit = cast_ray(scene, &Vector3::zeros(), &Vector3::x(), 0).unwrap();
            assert_relative_eq!(hit.t, d, epsilon = 1e-12);
            hit.reflectance * Vector3::x().dot(&hit.normal).abs() * (scene.d0 / hit.t).powi(2)
        };
        let ratio = intensity(&head_on) / intensity(&slanted);
        assert_relative_eq!(ratio, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn nearest_surface_wins() {
        let mut scene = single_plane([-1.0, 0.0, 0.0], -20.0, 0.5);
        scene.primitives.push(Primitive::Sphere {
            center: [10.0, 0.0, 0.0],
            radius: 2.0,
            reflectance: 0.9,
        });
        let hit = cast_ray(&scene, &Vector3::zeros(), &Vector3::x(), 0).unwrap();
        assert_relative_eq!(hit.t, 8.0, epsilon = 1e-12);
        assert_eq!(hit.reflectance, 0.9);
    }

    #[test]
    fn box_instance_intersection_respects_yaw() {
        let scene = AnalyticScene {
            primitives: vec![],
            instances: vec![MovingInstance {
                id: 3,
                extents: [2.0, 2.0, 2.0],
                reflectance: 0.6,
                track: vec![TrackPose {
                    center: [10.0, 0.0, 0.0],
                    yaw: std::f64::consts::FRAC_PI_4,
                }],
            }],
            near_blind: 0.1,
            d0: 10.0,
            drop_p: 0.0,
            seed: 0,
        };
        // A 45-degree yawed square of half-diagonal sqrt(2) presents its
        // corner to the beam: first hit at 10 - sqrt(2).
        let hit = cast_ray(&scene, &Vector3::zeros(), &Vector3::x(), 0).unwrap();
        assert_relative_eq!(hit.t, 10.0 - 2.0f64.sqrt(), epsilon = 1e-9);
    }

    /// Independent verification: march the ray in 1 mm steps watching the
    /// implicit surface functions for sign changes, which shares no code
    /// with the closed-form intersections.
    fn march_ray(
        scene: &AnalyticScene,
        o: &Vector3<f64>,
        dir: &Vector3<f64>,
        frame: usize,
        t_max: f64,
    ) -> Option<f64> {
        type Implicit = Box<dyn Fn(&Vector3<f64>) -> f64>;
        type Bounds = Option<Box<dyn Fn(&Vector3<f64>) -> bool>>;
        let step = 1e-3;
        // Each surface is a smooth implicit function whose sign flips only
        // at a true surface crossing, plus an optional membership predicate
        // evaluated at the crossing point (rectangle bounds).
        let surfaces: Vec<(Implicit, Bounds)> = scene
            .primitives
            .iter()
            .map(|p| -> (Implicit, Bounds) {
                match p.clone() {
                    Primitive::Plane { normal, offset, .. } => {
                        (Box::new(move |x| v3(&normal).dot(x) - offset), None)
                    }
                    Primitive::Rect { center, u, v, .. } => {
                        let (c, uu, vv) = (v3(&center), v3(&u), v3(&v));
                        let n = uu.cross(&vv).normalize();
                        (
                            Box::new(move |x| n.dot(&(x - c))),
                            Some(Box::new(move |x: &Vector3<f64>| {
                                let rel = x - c;
                                rel.dot(&uu).abs() <= uu.norm_squared()
                                    && rel.dot(&vv).abs() <= vv.norm_squared()
                            })),
                        )
                    }
                    Primitive::Sphere { center, radius, .. } => {
                        (Box::new(move |x| (x - v3(&center)).norm() - radius), None)
                    }
                    Primitive::Box { min, max, .. } => (
                        Box::new(move |x| {
                            let (lo, hi) = (v3(&min), v3(&max));
                            let mut worst = f64::NEG_INFINITY;
                            for k in 0..3 {
                                worst = worst.max(lo[k] - x[k]).max(x[k] - hi[k]);
                            }
                            worst
                        }),
                        None,
                    ),
                }
            })
            .chain(scene.instances.iter().map(|inst| {
                let tp = inst.pose_at(frame);
                let e = v3(&inst.extents) / 2.0;
                let f: Implicit = Box::new(move |x: &Vector3<f64>| {
                    let (s, c) = tp.yaw.sin_cos();
                    let rel = x - v3(&tp.center);
                    let local = Vector3::new(c * rel.x + s * rel.y, -s * rel.x + c * rel.y, rel.z);
                    let mut worst = f64::NEG_INFINITY;
                    for k in 0..3 {
                        worst = worst.max(local[k].abs() - e[k]);
                    }
                    worst
                });
                (f, None)
            }))
            .collect();
        let mut prev: Vec<f64> = surfaces.iter().map(|(f, _)| f(o)).collect();
        let mut t = step;
        while t <= t_max {
            let x = o + dir * t;
            for ((f, bounds), p) in surfaces.iter().zip(prev.iter_mut()) {
                let cur = f(&x);
                // |p| < 0.5 rejects flips where the previous sample was far
                // from the surface (box/instance implicits are only locally
                // distance-like).
                if cur.signum() != p.signum() && p.abs() < 0.5 {
                    let mid = o + dir * (t - step / 2.0);
                    if bounds.as_ref().is_none_or(|ok| ok(&mid)) {
                        return Some(t - step / 2.0);
                    }
                }
                *p = cur;
            }
            t += step;
        }
        None
    }

    #[test]
    fn raycast_matches_fine_march_on_random_rays() {
        let (scene, trajectory, spec, _) = urban_toy();
        let pose = &trajectory[20];
        let o = *pose.translation();
        let mut rng = StdRng::seed_from_u64(11);
        let mut hits = 0usize;
        for _ in 0..1000 {
            let h = rng.gen_range(0.0..spec.beams as f64);
            let w = rng.gen_range(0.0..spec.width as f64);
            let dir = pose.rotate_vector(&pixel_ray(h, w, &spec));
            let analytic = cast_ray(&scene, &o, &dir, 20);
            let marched = march_ray(&scene, &o, &dir, 20, spec.range_max);
            match (analytic, marched) {
                // The march stops at range_max; closed-form hits near or
                // past that horizon have no marched counterpart to compare.
                (Some(hit), _) if hit.t > spec.range_max - 0.01 => {}
                (Some(hit), Some(tm)) => {
                    assert!(
                        (hit.t - tm).abs() < 2e-3,
                        "analytic {} vs marched {tm}",
                        hit.t
                    );
                    hits += 1;
                }
                (None, None) => {}
                (a, m) => panic!("disagreement: analytic {a:?} marched {m:?}"),
            }
        }
        assert!(hits > 300, "too few hits to be meaningful: {hits}");
    }

    #[test]
    fn frame_round_trips_through_point_cloud() {
        let (scene, trajectory, spec, _) = urban_toy();
        let img = raycast_frame(&scene, &trajectory[5], 5, &spec);
        let points = rangeimage_to_points(&img, &Pose::identity());
        let (back, diag) = points_to_rangeimage(&points, &spec);
        assert_eq!(diag.dropped_fov + diag.dropped_range + diag.occluded, 0);
        // Pixel-center bijectivity: exactly the same pixels, depths and
        // intensities back within unit-norm rounding.
        assert_eq!(img.valid, back.valid);
        assert_eq!(img.raydrop, back.raydrop);
        for i in 0..img.depth.len() {
            assert!((img.depth[i] - back.depth[i]).abs() < 1e-9);
            assert!((img.intensity[i] - back.intensity[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn static_scene_identical_poses_identical_frames() {
        let (mut scene, trajectory, spec, _) = urban_toy();
        scene.instances.clear();
        scene.drop_p = 0.0;
        let a = raycast_frame(&scene, &trajectory[3], 0, &spec);
        let b = raycast_frame(&scene, &trajectory[3], 0, &spec);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.valid, b.valid);
    }

    #[test]
    fn generation_is_deterministic_under_seed() {
        let (scene, trajectory, spec, val) = urban_toy();
        let a = generate_sequence(&scene, &trajectory[..6], &spec, &[2]).unwrap();
        let b = generate_sequence(&scene, &trajectory[..6], &spec, &[2]).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.depth, fb.depth);
            assert_eq!(fa.valid, fb.valid);
        }
        let _ = val;
    }

    #[test]
    fn moving_box_track_advances_exactly() {
        let mut scene = single_plane([0.0, 0.0, 1.0], 0.0, 0.5);
        scene.instances.push(MovingInstance {
            id: 9,
            extents: [2.0, 1.0, 1.0],
            reflectance: 0.5,
            track: (0..5)
                .map(|f| TrackPose {
                    center: [f as f64, 0.0, 0.5],
                    yaw: 0.0,
                })
                .collect(),
        });
        let poses: Vec<Pose> =
            (0..5).map(|_| Pose::from_translation(Vector3::new(-5.0, 0.0, 1.0))).collect();
        let spec = SensorSpec::new(8, 32, 0.2, 0.2, 0.5, 30.0).unwrap();
        let ds = generate_sequence(&scene, &poses, &spec, &[]).unwrap();
        assert_eq!(ds.tracks.len(), 5);
        for pair in ds.tracks.windows(2) {
            assert_eq!(pair[1].center[0] - pair[0].center[0], 1.0);
            assert_eq!(pair[1].frame, pair[0].frame + 1);
        }
    }

    #[test]
    fn stochastic_drops_match_probability() {
        let (mut scene, trajectory, spec, _) = urban_toy();
        scene.drop_p = 0.2;
        let dropless = {
            let mut s = scene.clone();
            s.drop_p = 0.0;
            raycast_frame(&s, &trajectory[0], 0, &spec)
        };
        let dropped = raycast_frame(&scene, &trajectory[0], 0, &spec);
        let candidates = dropless.valid_count() as f64;
        let removed = (dropless.valid_count() - dropped.valid_count()) as f64;
        let rate = removed / candidates;
        assert!(
            (rate - 0.2).abs() < 0.03,
            "stochastic drop rate {rate} far from 0.2"
        );
    }

    #[test]
    fn urban_toy_exercises_the_scene() {
        let (scene, trajectory, spec, val) = urban_toy();
        scene.validate().unwrap();
        assert_eq!(trajectory.len(), 54);
        assert_eq!(val.len(), 4);
        let img = raycast_frame(&scene, &trajectory[0], 0, &spec);
        let frac = img.valid_count() as f64 / spec.pixel_count() as f64;
        assert!(
            (0.3..0.95).contains(&frac),
            "implausible valid fraction {frac}"
        );
        img.validate().unwrap();
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let (scene, trajectory, spec, _) = urban_toy();
        let ds = generate_sequence(&scene, &trajectory[..4], &spec, &[1]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds.poses.len(), back.poses.len());
        for (a, b) in ds.poses.iter().zip(&back.poses) {
            assert_eq!(a.to_row(), b.to_row());
        }
        assert_eq!(ds.tracks, back.tracks);
        assert_eq!(ds.train_idx, back.train_idx);
        assert_eq!(ds.val_idx, back.val_idx);
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.valid, b.valid);
            // Channels cross an f32 container.
            for i in 0..a.depth.len() {
                assert!((a.depth[i] - b.depth[i]).abs() <= a.depth[i].abs() * 1e-6 + 1e-6);
                assert!((a.intensity[i] - b.intensity[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn scene_json_round_trip_and_parse_errors() {
        let (scene, trajectory, spec, _) = urban_toy();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        scene.save(&path).unwrap();
        let back = AnalyticScene::load(&path).unwrap();
        assert_eq!(scene, back);
        let a = raycast_frame(&scene, &trajectory[0], 0, &spec);
        let b = raycast_frame(&back, &trajectory[0], 0, &spec);
        assert_eq!(a.depth, b.depth);

        let bad = "{\n  \"primitives\": [\n    {\"type\": \"plane\", \"normal\": oops}\n  ]\n}";
        match AnalyticScene::from_json(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_bad_scenes() {
        let mut scene = single_plane([0.0, 0.0, 0.0], 0.0, 0.5);
        assert!(scene.validate().is_err());
        scene = single_plane([0.0, 0.0, 1.0], 0.0, 1.5);
        assert!(scene.validate().is_err());
        scene = single_plane([0.0, 0.0, 1.0], 0.0, 0.5);
        scene.drop_p = 1.0;
        assert!(scene.validate().is_err());
        scene.drop_p = 0.5;
        scene.instances.push(MovingInstance {
            id: 0,
            extents: [1.0, 1.0, 1.0],
            reflectance: 0.5,
            track: vec![],
        });
        assert!(scene.validate().is_err());
    }
}
