//! Range-view geometry: the exact, invertible mapping between 3D points in
//! the sensor frame and continuous (row, column) coordinates on an H x W
//! raster, plus the multi-channel `RangeImage` container and its file
//! formats.
//!
//! Row coordinates run top (highest elevation, `f_up`) to bottom
//! (`-f_down`); column coordinates run from azimuth pi at w = 0 down to
//! -pi at w = W, wrapped into [0, W). Depth stores Euclidean flight
//! distance, not z.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::pose::Pose;
use crate::{Error, Result};

/// Default laser scattering half-angle bound, radians.
pub const DEFAULT_DIVERGENCE: f64 = 3.0e-5;

/// LiDAR intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorSpec {
    /// Number of laser beams = image height H.
    pub beams: usize,
    /// Image width W (azimuth bins over the full 360 degrees).
    pub width: usize,
    /// Vertical FOV above the horizontal, radians.
    pub f_up: f64,
    /// Vertical FOV below the horizontal, radians.
    pub f_down: f64,
    /// Minimum measurable range, meters.
    pub range_min: f64,
    /// Maximum measurable range, meters.
    pub range_max: f64,
    /// Beam scattering half-angle bound, radians. Gates which pixels a
    /// splatted Gaussian may influence.
    pub divergence: f64,
}

impl SensorSpec {
    pub fn new(
        beams: usize,
        width: usize,
        f_up: f64,
        f_down: f64,
        range_min: f64,
        range_max: f64,
    ) -> Result<Self> {
        let spec = Self {
            beams,
            width,
            f_up,
            f_down,
            range_min,
            range_max,
            divergence: DEFAULT_DIVERGENCE,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_divergence(mut self, divergence: f64) -> Result<Self> {
        self.divergence = divergence;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 || self.width == 0 {
            return Err(Error::domain("sensor image must be non-empty"));
        }
        if self.f_up < 0.0 || self.f_down < 0.0 || self.f_up + self.f_down <= 0.0 {
            return Err(Error::domain("vertical FOV must be positive"));
        }
        if self.f_up >= PI / 2.0 || self.f_down >= PI / 2.0 {
            return Err(Error::domain("vertical FOV half-angles must stay below pi/2"));
        }
        if !(self.range_min > 0.0 && self.range_min < self.range_max) {
            return Err(Error::domain("need 0 < range_min < range_max"));
        }
        if !(self.divergence > 0.0 && self.divergence < PI) {
            return Err(Error::domain("divergence must be a positive angle"));
        }
        Ok(())
    }

    /// Total vertical FOV f_v = f_up + f_down.
    pub fn f_v(&self) -> f64 {
        self.f_up + self.f_down
    }

    /// Vertical angular resolution per pixel row.
    pub fn delta_phi(&self) -> f64 {
        self.f_v() / self.beams as f64
    }

    /// Horizontal angular resolution per pixel column.
    pub fn delta_theta(&self) -> f64 {
        2.0 * PI / self.width as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.beams * self.width
    }

    /// Same raster geometry (ignores range limits and divergence).
    pub fn same_grid(&self, other: &SensorSpec) -> bool {
        self.beams == other.beams
            && self.width == other.width
            && self.f_up == other.f_up
            && self.f_down == other.f_down
    }
}

/// Elevation/azimuth of a sensor-frame point: phi = arcsin(z/|p|),
/// theta = atan2(y, x).
pub fn point_angles(p: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    let d = p.norm();
    if d == 0.0 || !d.is_finite() {
        return Err(Error::domain("cannot project a zero-norm or non-finite point"));
    }
    let phi = (p.z / d).asin();
    let theta = p.y.atan2(p.x);
    Ok((phi, theta, d))
}

/// Map a sensor-frame point to continuous image coordinates (h, w) and
/// flight distance d. Callers bin by flooring.
pub fn project_point(p: &Vector3<f64>, spec: &SensorSpec) -> Result<(f64, f64, f64)> {
    let (phi, theta, d) = point_angles(p)?;
    let h = (1.0 - (phi + spec.f_down) / spec.f_v()) * spec.beams as f64;
    let mut w = 0.5 * (1.0 - theta / PI) * spec.width as f64;
    // atan2 returns -pi for y = -0; wrap so w lives in [0, W).
    if w >= spec.width as f64 {
        w -= spec.width as f64;
    }
    Ok((h, w, d))
}

/// Unit ray direction for continuous image coordinates (h, w).
///
/// Inverse of [`project_point`]: the elevation/azimuth recovered from
/// (h, w) feed the spherical direction
/// (cos(theta)cos(phi), sin(theta)cos(phi), sin(phi)).
pub fn pixel_ray(h: f64, w: f64, spec: &SensorSpec) -> Vector3<f64> {
    let phi = spec.f_up - spec.f_v() * h / spec.beams as f64;
    let theta = PI - 2.0 * PI * w / spec.width as f64;
    let (sin_phi, cos_phi) = phi.sin_cos();
    let (sin_theta, cos_theta) = theta.sin_cos();
    Vector3::new(cos_theta * cos_phi, sin_theta * cos_phi, sin_phi)
}

/// Channel ids in the binary container.
const CHANNEL_DEPTH: u32 = 0;
const CHANNEL_INTENSITY: u32 = 1;
const CHANNEL_RAYDROP: u32 = 2;
const CHANNEL_ACCUM_ALPHA: u32 = 3;
const CHANNEL_VALID: u32 = 4;

const RV_MAGIC: &[u8; 4] = b"RVIM";
const RV_VERSION: u32 = 1;

/// H x W multi-channel range-view raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub spec: SensorSpec,
    /// Flight distance in meters; 0 = no return.
    pub depth: Vec<f64>,
    /// Reflectance in [0, 1].
    pub intensity: Vec<f64>,
    /// Ray-drop probability (rendered) or binary drop mask (measured).
    pub raydrop: Vec<f64>,
    /// Accumulated compositing weight in [0, 1].
    pub accum_alpha: Vec<f64>,
    pub valid: Vec<bool>,
}

impl RangeImage {
    /// All-invalid image: depth and intensity 0, drop mask 1.
    pub fn new_empty(spec: SensorSpec) -> Self {
        let n = spec.pixel_count();
        Self {
            spec,
            depth: vec![0.0; n],
            intensity: vec![0.0; n],
            raydrop: vec![1.0; n],
            accum_alpha: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize) -> usize {
        row * self.spec.width + col
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Clear one pixel back to the no-return state.
    pub fn clear_pixel(&mut self, idx: usize) {
        self.depth[idx] = 0.0;
        self.intensity[idx] = 0.0;
        self.accum_alpha[idx] = 0.0;
        self.valid[idx] = false;
    }

    /// Check the container invariants for measured images.
    pub fn validate(&self) -> Result<()> {
        let n = self.spec.pixel_count();
        if self.depth.len() != n
            || self.intensity.len() != n
            || self.raydrop.len() != n
            || self.accum_alpha.len() != n
            || self.valid.len() != n
        {
            return Err(Error::domain("channel length mismatch"));
        }
        for i in 0..n {
            if !self.valid[i] && (self.depth[i] != 0.0 || self.intensity[i] != 0.0) {
                return Err(Error::domain(format!(
                    "invalid pixel {i} carries depth/intensity"
                )));
            }
            if self.depth[i] > 0.0
                && (self.depth[i] < self.spec.range_min || self.depth[i] > self.spec.range_max)
            {
                return Err(Error::domain(format!(
                    "pixel {i} depth {} outside sensor range",
                    self.depth[i]
                )));
            }
        }
        Ok(())
    }
}

/// Counters from binning a point cloud.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BinDiagnostics {
    pub binned: usize,
    /// Points whose elevation fell outside the vertical FOV.
    pub dropped_fov: usize,
    /// Points nearer than range_min or farther than range_max.
    pub dropped_range: usize,
    /// Points that lost the nearest-return contest for their pixel.
    pub occluded: usize,
}

/// Bin a point cloud into a range image, keeping the nearest return per
/// pixel. Out-of-FOV points are dropped and counted, never an error.
pub fn points_to_rangeimage(
    points: &[(Vector3<f64>, f64)],
    spec: &SensorSpec,
) -> (RangeImage, BinDiagnostics) {
    let mut img = RangeImage::new_empty(*spec);
    let mut diag = BinDiagnostics::default();
    for (p, intensity) in points {
        let Ok((h, w, d)) = project_point(p, spec) else {
            diag.dropped_fov += 1;
            continue;
        };
        if d < spec.range_min || d > spec.range_max {
            diag.dropped_range += 1;
            continue;
        }
        let row = h.floor();
        if row < 0.0 || row >= spec.beams as f64 {
            diag.dropped_fov += 1;
            continue;
        }
        let idx = img.idx(row as usize, (w.floor() as usize).min(spec.width - 1));
        if img.valid[idx] && img.depth[idx] <= d {
            diag.occluded += 1;
            continue;
        }
        if img.valid[idx] {
            diag.occluded += 1;
        } else {
            diag.binned += 1;
        }
        img.depth[idx] = d;
        img.intensity[idx] = intensity.clamp(0.0, 1.0);
        img.raydrop[idx] = 0.0;
        img.accum_alpha[idx] = 1.0;
        img.valid[idx] = true;
    }
    (img, diag)
}

/// Back-project every valid pixel at its center ray, transformed by
/// `pose` (sensor to world). Returns (point, intensity) pairs in row-major
/// pixel order.
pub fn rangeimage_to_points(img: &RangeImage, pose: &Pose) -> Vec<(Vector3<f64>, f64)> {
    let mut out = Vec::with_capacity(img.valid_count());
    for row in 0..img.spec.beams {
        for col in 0..img.spec.width {
            let idx = img.idx(row, col);
            if !img.valid[idx] {
                continue;
            }
            let ray = pixel_ray(row as f64 + 0.5, col as f64 + 0.5, &img.spec);
            let p = pose.transform_point(&(ray * img.depth[idx]));
            out.push((p, img.intensity[idx]));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Binary container (.rv)
// ---------------------------------------------------------------------------

impl RangeImage {
    /// Write the fixed little-endian container: magic, version, H, W,
    /// FOV/range/divergence header, channel list, then row-major f32
    /// planes (validity stored as 0.0/1.0).
    pub fn write_rv<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(RV_MAGIC)?;
        w.write_u32::<LittleEndian>(RV_VERSION)?;
        w.write_u32::<LittleEndian>(self.spec.beams as u32)?;
        w.write_u32::<LittleEndian>(self.spec.width as u32)?;
        w.write_f64::<LittleEndian>(self.spec.f_up)?;
        w.write_f64::<LittleEndian>(self.spec.f_down)?;
        w.write_f64::<LittleEndian>(self.spec.range_min)?;
        w.write_f64::<LittleEndian>(self.spec.range_max)?;
        w.write_f64::<LittleEndian>(self.spec.divergence)?;
        let channels = [
            CHANNEL_DEPTH,
            CHANNEL_INTENSITY,
            CHANNEL_RAYDROP,
            CHANNEL_ACCUM_ALPHA,
            CHANNEL_VALID,
        ];
        w.write_u32::<LittleEndian>(channels.len() as u32)?;
        for c in channels {
            w.write_u32::<LittleEndian>(c)?;
        }
        let planes: [&dyn Fn(usize) -> f64; 5] = [
            &|i| self.depth[i],
            &|i| self.intensity[i],
            &|i| self.raydrop[i],
            &|i| self.accum_alpha[i],
            &|i| if self.valid[i] { 1.0 } else { 0.0 },
        ];
        for plane in planes {
            for i in 0..self.spec.pixel_count() {
                w.write_f32::<LittleEndian>(plane(i) as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_rv<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != RV_MAGIC {
            return Err(Error::format("bad magic, not a range-view container"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != RV_VERSION {
            return Err(Error::format(format!("unsupported version {version}")));
        }
        let beams = r.read_u32::<LittleEndian>()? as usize;
        let width = r.read_u32::<LittleEndian>()? as usize;
        let f_up = r.read_f64::<LittleEndian>()?;
        let f_down = r.read_f64::<LittleEndian>()?;
        let range_min = r.read_f64::<LittleEndian>()?;
        let range_max = r.read_f64::<LittleEndian>()?;
        let divergence = r.read_f64::<LittleEndian>()?;
        let spec =
            SensorSpec::new(beams, width, f_up, f_down, range_min, range_max)?
                .with_divergence(divergence)?;
        let n_channels = r.read_u32::<LittleEndian>()? as usize;
        let mut ids = Vec::with_capacity(n_channels);
        for _ in 0..n_channels {
            ids.push(r.read_u32::<LittleEndian>()?);
        }
        let mut img = RangeImage::new_empty(spec);
        let n = spec.pixel_count();
        for id in ids {
            let mut plane = vec![0.0f64; n];
            for v in plane.iter_mut() {
                *v = r.read_f32::<LittleEndian>()? as f64;
            }
            match id {
                CHANNEL_DEPTH => img.depth = plane,
                CHANNEL_INTENSITY => img.intensity = plane,
                CHANNEL_RAYDROP => img.raydrop = plane,
                CHANNEL_ACCUM_ALPHA => img.accum_alpha = plane,
                CHANNEL_VALID => img.valid = plane.iter().map(|v| *v != 0.0).collect(),
                other => return Err(Error::format(format!("unknown channel id {other}"))),
            }
        }
        Ok(img)
    }

    pub fn save_rv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_rv(std::io::BufWriter::new(file))
    }

    pub fn load_rv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_rv(std::io::BufReader::new(file))
    }
}

// ---------------------------------------------------------------------------
// ASCII PLY point clouds with an intensity property
// ---------------------------------------------------------------------------

/// Write points as ASCII PLY. f64 `Display` prints the shortest digit
/// string that round-trips, so the text form is lossless.
pub fn write_ply<W: Write>(points: &[(Vector3<f64>, f64)], mut w: W) -> Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", points.len())?;
    writeln!(w, "property double x")?;
    writeln!(w, "property double y")?;
    writeln!(w, "property double z")?;
    writeln!(w, "property double intensity")?;
    writeln!(w, "end_header")?;
    for (p, i) in points {
        writeln!(w, "{} {} {} {}", p.x, p.y, p.z, i)?;
    }
    Ok(())
}

pub fn read_ply<R: Read>(r: R) -> Result<Vec<(Vector3<f64>, f64)>> {
    let content = {
        let mut buf = String::new();
        let mut r = r;
        r.read_to_string(&mut buf)?;
        buf
    };
    let mut lines = content.lines().enumerate();
    let mut vertex_count: Option<usize> = None;
    let mut properties: Vec<String> = Vec::new();
    for (lineno, line) in lines.by_ref() {
        let line = line.trim();
        match lineno {
            0 if line != "ply" => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing 'ply' magic".into(),
                })
            }
            1 if line != "format ascii 1.0" => {
                return Err(Error::Parse {
                    line: 2,
                    msg: format!("unsupported format '{line}'"),
                })
            }
            _ => {}
        }
        if let Some(rest) = line.strip_prefix("element vertex ") {
            vertex_count = Some(rest.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: "bad vertex count".into(),
            })?);
        } else if let Some(rest) = line.strip_prefix("property ") {
            let name = rest.split_whitespace().last().unwrap_or("");
            properties.push(name.to_string());
        } else if line == "end_header" {
            break;
        }
    }
    let count = vertex_count.ok_or(Error::Parse {
        line: 0,
        msg: "header missing 'element vertex'".into(),
    })?;
    let need = ["x", "y", "z", "intensity"];
    let cols: Vec<usize> = need
        .iter()
        .map(|n| {
            properties
                .iter()
                .position(|p| p == n)
                .ok_or_else(|| Error::format(format!("PLY missing property '{n}'")))
        })
        .collect::<Result<_>>()?;
    let mut points = Vec::with_capacity(count);
    for (lineno, line) in lines.take(count) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < properties.len() {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: "short vertex row".into(),
            });
        }
        let mut vals = [0.0f64; 4];
        for (slot, col) in cols.iter().enumerate() {
            vals[slot] = fields[*col].parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad float '{}'", fields[*col]),
            })?;
        }
        points.push((Vector3::new(vals[0], vals[1], vals[2]), vals[3]));
    }
    if points.len() != count {
        return Err(Error::format(format!(
            "PLY declared {count} vertices but carried {}",
            points.len()
        )));
    }
    Ok(points)
}
