//! The learnable scene representation: anchors carrying feature vectors,
//! per-frame latent codes, and four small attribute networks that spawn
//! view-conditioned Gaussian primitives.
//!
//! Networks are evaluated batched: inputs for all anchors are packed
//! column-wise into one matrix per network so each layer is a single gemm.
//! The forward pass records every activation needed by the hand-written
//! backward pass.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::metrics::VoxelGrid;
use crate::pose::Pose;
use crate::rangeview::SensorSpec;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 32;
pub const LATENT_DIM: usize = 16;
/// Octave count of the sinusoidal direction encoding.
pub const DIR_FREQS: usize = 4;
/// Raw direction plus sin/cos at each octave.
pub const DIR_ENC_DIM: usize = 3 + 6 * DIR_FREQS;
/// feature + encoded direction + normalized distance.
pub const BASE_IN: usize = FEATURE_DIM + DIR_ENC_DIM + 1;
/// Base input plus the frame latent (intensity and ray-drop networks).
pub const LATENT_IN: usize = BASE_IN + LATENT_DIM;
pub const HIDDEN: usize = 64;
/// Covariance head output: offset 3 + quaternion 4 + scale 3.
pub const SIGMA_OUT: usize = 10;
/// Neighbor rank used for the initial anchor footprint.
pub const INIT_KNN: usize = 3;
pub const BASE_SCALE_MIN: f64 = 0.01;
pub const BASE_SCALE_MAX: f64 = 2.0;
/// Positional offset bound as a multiple of base_scale.
pub const OFFSET_BOUND_FACTOR: f64 = 2.0;
/// Smallest spawnable per-axis standard deviation, meters.
pub const SCALE_FLOOR: f64 = 1e-9;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails.
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Learnable spatial carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub position: Vector3<f64>,
    pub feature: DVector<f64>,
    /// Per-axis footprint scale, meters, positive.
    pub base_scale: Vector3<f64>,
}

impl Anchor {
    pub fn validate(&self) -> Result<()> {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.feature.iter().all(|v| v.is_finite())
            && self.base_scale.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("anchor holds non-finite values"));
        }
        if self.base_scale.min() <= 0.0 {
            return Err(Error::domain("anchor base_scale must be positive"));
        }
        Ok(())
    }
}

/// Per-frame learnable code fed to the intensity and ray-drop networks.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLatent {
    pub frame_id: usize,
    pub code: DVector<f64>,
}

/// Fully-connected network: ReLU hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// (weight out x in, bias out) per layer.
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

/// Activations recorded by a batched forward pass.
pub struct MlpTrace {
    /// Post-ReLU activation of each hidden layer, out_dim x n.
    pub hidden: Vec<DMatrix<f64>>,
    /// Linear output of the last layer, out_dim x n.
    pub out: DMatrix<f64>,
}

impl Mlp {
    /// Fan-in-scaled uniform init over the layer dimension chain.
    pub fn init(dims: &[usize], rng: &mut StdRng) -> Self {
        let mut layers = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound));
            let b = DVector::from_fn(fan_out, |_, _| rng.gen_range(-bound..bound));
            layers.push((w, b));
        }
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| {
                    (
                        DMatrix::zeros(w.nrows(), w.ncols()),
                        DVector::zeros(b.nrows()),
                    )
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|(w, b)| w.len() + b.len()).sum()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].0.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().0.nrows()
    }

    /// Batched forward over columns of `input` (in_dim x n).
    pub fn forward(&self, input: &DMatrix<f64>) -> MlpTrace {
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut cur = input.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let mut z = w * &cur;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if i + 1 < self.layers.len() {
                z.apply(|v| *v = v.max(0.0));
                hidden.push(z.clone());
                cur = z;
            } else {
                return MlpTrace { hidden, out: z };
            }
        }
        // Single-layer network: loop returned above unless layers is empty.
        unreachable!("Mlp has at least one layer");
    }

    fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().all(|v| v.is_finite()) && b.iter().all(|v| v.is_finite()))
    }
}

/// The four attribute networks.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    /// Covariance head: offset, rotation, scale.
    pub sigma: Mlp,
    /// Intensity head (takes the frame latent).
    pub rho: Mlp,
    /// Ray-drop head (takes the frame latent).
    pub ray: Mlp,
    /// Opacity head.
    pub alpha: Mlp,
}

impl MlpWeights {
    pub fn init(rng: &mut StdRng) -> Self {
        Self {
            sigma: Mlp::init(&[BASE_IN, HIDDEN, HIDDEN, SIGMA_OUT], rng),
            rho: Mlp::init(&[LATENT_IN, HIDDEN, HIDDEN, 1], rng),
            ray: Mlp::init(&[LATENT_IN, HIDDEN, HIDDEN, 1], rng),
            alpha: Mlp::init(&[BASE_IN, HIDDEN, HIDDEN, 1], rng),
        }
    }

    pub fn zeros() -> Self {
        let zero = |dims: &[usize]| Mlp {
            layers: dims
                .windows(2)
                .map(|p| (DMatrix::zeros(p[1], p[0]), DVector::zeros(p[1])))
                .collect(),
        };
        Self {
            sigma: zero(&[BASE_IN, HIDDEN, HIDDEN, SIGMA_OUT]),
            rho: zero(&[LATENT_IN, HIDDEN, HIDDEN, 1]),
            ray: zero(&[LATENT_IN, HIDDEN, HIDDEN, 1]),
            alpha: zero(&[BASE_IN, HIDDEN, HIDDEN, 1]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.sigma.param_count()
            + self.rho.param_count()
            + self.ray.param_count()
            + self.alpha.param_count()
    }

    pub fn is_finite(&self) -> bool {
        self.sigma.is_finite() && self.rho.is_finite() && self.ray.is_finite() && self.alpha.is_finite()
    }
}

/// View-conditioned primitive spawned from one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    /// Unit quaternion (w, x, y, z).
    pub quat: Vector4<f64>,
    pub rotation: Matrix3<f64>,
    /// Per-axis standard deviations, meters.
    pub scale: Vector3<f64>,
    pub intensity: f64,
    pub raydrop: f64,
    pub opacity: f64,
}

impl GaussianPrimitive {
    /// World-frame covariance R S S^T R^T.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = self.rotation * Matrix3::from_diagonal(&self.scale);
        m * m.transpose()
    }
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
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

/// Everything the backward pass needs to re-trace one spawn call.
pub struct SpawnCache {
    pub viewpoint: Vector3<f64>,
    pub range_max: f64,
    /// Column j of every matrix belongs to anchor `anchor_index[j]`.
    pub anchor_index: Vec<usize>,
    pub d: Vec<f64>,
    pub dprime: Vec<Vector3<f64>>,
    pub base_in: DMatrix<f64>,
    pub lat_in: DMatrix<f64>,
    pub sigma: MlpTrace,
    pub rho: MlpTrace,
    pub ray: MlpTrace,
    pub alpha: MlpTrace,
}

pub struct SpawnResult {
    pub primitives: Vec<GaussianPrimitive>,
    pub cache: SpawnCache,
    /// Anchors coincident with the viewpoint, skipped.
    pub skipped: usize,
}

/// Encode a unit direction and normalized distance into the shared input
/// rows [FEATURE_DIM..BASE_IN) of an input column.
fn write_view_rows(col: &mut [f64], dprime: &Vector3<f64>, d: f64, range_max: f64) {
    col[0] = dprime.x;
    col[1] = dprime.y;
    col[2] = dprime.z;
    let mut at = 3;
    for k in 0..DIR_FREQS {
        let s = (1u64 << k) as f64;
        for a in 0..3 {
            col[at + a] = (s * dprime[a]).sin();
            col[at + 3 + a] = (s * dprime[a]).cos();
        }
        at += 6;
    }
    col[at] = d / range_max;
}

/// Spawn one primitive per anchor for the given viewpoint and frame
/// latent. Deterministic and pure.
pub fn spawn(
    anchors: &[Anchor],
    viewpoint: &Vector3<f64>,
    latent: &FrameLatent,
    weights: &MlpWeights,
    range_max: f64,
) -> Result<SpawnResult> {
    spawn_conditioned(anchors, viewpoint, latent, weights, range_max, true)
}

/// `spawn` with the view conditioning switchable: when `view_inputs` is
/// false the direction and distance input rows stay zero, so attributes
/// depend only on anchor features (and the frame latent). Kept for the
/// ablation that removes view dependence.
pub fn spawn_conditioned(
    anchors: &[Anchor],
    viewpoint: &Vector3<f64>,
    latent: &FrameLatent,
    weights: &MlpWeights,
    range_max: f64,
    view_inputs: bool,
) -> Result<SpawnResult> {
    if anchors.is_empty() {
        return Err(Error::domain("spawn needs at least one anchor"));
    }
    if latent.code.len() != LATENT_DIM {
        return Err(Error::domain("latent code has the wrong width"));
    }
    let mut anchor_index = Vec::with_capacity(anchors.len());
    let mut d_all = Vec::with_capacity(anchors.len());
    let mut dp_all = Vec::with_capacity(anchors.len());
    let mut skipped = 0usize;
    for (i, a) in anchors.iter().enumerate() {
        let diff = a.position - viewpoint;
        let d = diff.norm();
        if d < 1e-12 || !d.is_finite() {
            skipped += 1;
            continue;
        }
        anchor_index.push(i);
        d_all.push(d);
        dp_all.push(diff / d);
    }
    let n = anchor_index.len();
    if n == 0 {
        return Err(Error::domain("every anchor coincides with the viewpoint"));
    }
    let mut base_in = DMatrix::zeros(BASE_IN, n);
    let mut lat_in = DMatrix::zeros(LATENT_IN, n);
    for j in 0..n {
        let a = &anchors[anchor_index[j]];
        let mut col = base_in.column_mut(j);
        for k in 0..FEATURE_DIM {
            col[k] = a.feature[k];
        }
        if view_inputs {
            write_view_rows(
                &mut col.as_mut_slice()[FEATURE_DIM..],
                &dp_all[j],
                d_all[j],
                range_max,
            );
        }
    }
    for j in 0..n {
        let mut col = lat_in.column_mut(j);
        for k in 0..BASE_IN {
            col[k] = base_in[(k, j)];
        }
        for k in 0..LATENT_DIM {
            col[BASE_IN + k] = latent.code[k];
        }
    }
    let sigma = weights.sigma.forward(&base_in);
    let rho = weights.rho.forward(&lat_in);
    let ray = weights.ray.forward(&lat_in);
    let alpha = weights.alpha.forward(&base_in);

    let mut primitives = Vec::with_capacity(n);
    for j in 0..n {
        let a = &anchors[anchor_index[j]];
        let out = sigma.out.column(j);
        let bound = a.base_scale * OFFSET_BOUND_FACTOR;
        let dx = Vector3::new(
            out[0].tanh() * bound.x,
            out[1].tanh() * bound.y,
            out[2].tanh() * bound.z,
        );
        // Identity bias keeps the zero-weight network at the identity
        // rotation instead of normalize(0).
        let q_raw = Vector4::new(out[3] + 1.0, out[4], out[5], out[6]);
        let quat = q_raw / q_raw.norm();
        // Softplus underflows to exactly zero around -745; keep scales
        // strictly positive so covariances stay invertible.
        let scale = Vector3::new(
            (softplus(out[7]) * a.base_scale.x).max(SCALE_FLOOR),
            (softplus(out[8]) * a.base_scale.y).max(SCALE_FLOOR),
            (softplus(out[9]) * a.base_scale.z).max(SCALE_FLOOR),
        );
        primitives.push(GaussianPrimitive {
            mean: a.position + dx,
            quat,
            rotation: quat_to_matrix(&quat),
            scale,
            intensity: sigmoid(rho.out[(0, j)]),
            raydrop: sigmoid(ray.out[(0, j)]),
            opacity: sigmoid(alpha.out[(0, j)]),
        });
    }
    Ok(SpawnResult {
        primitives,
        skipped,
        cache: SpawnCache {
            viewpoint: *viewpoint,
            range_max,
            anchor_index,
            d: d_all,
            dprime: dp_all,
            base_in,
            lat_in,
            sigma,
            rho,
            ray,
            alpha,
        },
    })
}

/// Background field: anchors, shared networks, per-frame latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub anchors: Vec<Anchor>,
    pub weights: MlpWeights,
    pub latents: Vec<FrameLatent>,
}

impl Field {
    pub fn latent(&self, frame_id: usize) -> Result<&FrameLatent> {
        self.latents
            .iter()
            .find(|l| l.frame_id == frame_id)
            .ok_or_else(|| Error::domain(format!("no latent code for frame {frame_id}")))
    }
}

/// A dynamic instance: its own anchors and latents in a canonical frame,
/// shared networks, and a rigid canonical-to-world pose per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceField {
    pub id: u64,
    pub anchors: Vec<Anchor>,
    pub latents: Vec<FrameLatent>,
    pub poses: Vec<(usize, Pose)>,
}

impl InstanceField {
    pub fn pose_for(&self, frame_id: usize) -> Result<&Pose> {
        self.poses
            .iter()
            .find(|(f, _)| *f == frame_id)
            .map(|(_, p)| p)
            .ok_or_else(|| {
                Error::domain(format!("instance {} has no pose for frame {frame_id}", self.id))
            })
    }
}

/// Sample anchors from a point cloud and initialize networks and latents.
///
/// Positions are the sampled points; base_scale is the distance to the
/// third-nearest sampled neighbor clamped to [1 cm, 2 m]; features and
/// latents draw from a centered uniform of width 1e-2.
pub fn init_from_points(
    points: &[(Vector3<f64>, f64)],
    count: usize,
    n_frames: usize,
    seed: u64,
) -> Result<Field> {
    if points.is_empty() {
        return Err(Error::domain("cannot initialize from an empty cloud"));
    }
    if count == 0 {
        return Err(Error::domain("anchor count must be positive"));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let positions: Vec<Vector3<f64>> = if count <= points.len() {
        rand::seq::index::sample(&mut rng, points.len(), count)
            .into_iter()
            .map(|i| points[i].0)
            .collect()
    } else {
        (0..count)
            .map(|_| points[rng.gen_range(0..points.len())].0)
            .collect()
    };
    let grid = VoxelGrid::build(&positions)?;
    let mut anchors = Vec::with_capacity(count);
    for (i, p) in positions.iter().enumerate() {
        let s = if positions.len() > 1 {
            let knn = grid.knn_dists(p, INIT_KNN, Some(i));
            knn.last().unwrap().1
        } else {
            1.0
        };
        let s = s.clamp(BASE_SCALE_MIN, BASE_SCALE_MAX);
        anchors.push(Anchor {
            position: *p,
            feature: DVector::from_fn(FEATURE_DIM, |_, _| rng.gen_range(-0.005..0.005)),
            base_scale: Vector3::repeat(s),
        });
    }
    let weights = MlpWeights::init(&mut rng);
    let latents = (0..n_frames)
        .map(|frame_id| FrameLatent {
            frame_id,
            code: DVector::from_fn(LATENT_DIM, |_, _| rng.gen_range(-0.005..0.005)),
        })
        .collect();
    Ok(Field {
        anchors,
        weights,
        latents,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

/// Optimizer state snapshot: named flat slots, decoupled from the
/// optimizer's in-memory layout.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimBlob {
    pub step: u64,
    pub slots: Vec<(String, Vec<f64>)>,
}

/// Versioned training snapshot, readable without the training loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: SensorSpec,
    pub field: Field,
    pub instances: Vec<InstanceField>,
    pub iteration: u64,
    pub optim: Option<OptimBlob>,
}

const CK_MAGIC: &[u8; 4] = b"BSCK";
const CK_VERSION: u32 = 1;

fn write_anchors<W: Write>(w: &mut W, anchors: &[Anchor]) -> Result<()> {
    w.write_u64::<LittleEndian>(anchors.len() as u64)?;
    for a in anchors {
        for v in a.position.iter().chain(a.base_scale.iter()) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in a.feature.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_anchors<R: Read>(r: &mut R) -> Result<Vec<Anchor>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pos = Vector3::zeros();
        let mut bs = Vector3::zeros();
        for v in pos.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        for v in bs.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let mut feat = DVector::zeros(FEATURE_DIM);
        for v in feat.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        anchors.push(Anchor {
            position: pos,
            feature: feat,
            base_scale: bs,
        });
    }
    Ok(anchors)
}

fn write_latents<W: Write>(w: &mut W, latents: &[FrameLatent]) -> Result<()> {
    w.write_u64::<LittleEndian>(latents.len() as u64)?;
    for l in latents {
        w.write_u64::<LittleEndian>(l.frame_id as u64)?;
        for v in l.code.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_latents<R: Read>(r: &mut R) -> Result<Vec<FrameLatent>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut latents = Vec::with_capacity(n);
    for _ in 0..n {
        let frame_id = r.read_u64::<LittleEndian>()? as usize;
        let mut code = DVector::zeros(LATENT_DIM);
        for v in code.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        latents.push(FrameLatent { frame_id, code });
    }
    Ok(latents)
}

fn write_mlp<W: Write>(w: &mut W, mlp: &Mlp) -> Result<()> {
    w.write_u32::<LittleEndian>(mlp.layers.len() as u32)?;
    for (wm, b) in &mlp.layers {
        w.write_u32::<LittleEndian>(wm.nrows() as u32)?;
        w.write_u32::<LittleEndian>(wm.ncols() as u32)?;
        for i in 0..wm.nrows() {
            for j in 0..wm.ncols() {
                w.write_f64::<LittleEndian>(wm[(i, j)])?;
            }
        }
        for v in b.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_mlp<R: Read>(r: &mut R) -> Result<Mlp> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let mut wm = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                wm[(i, j)] = r.read_f64::<LittleEndian>()?;
            }
        }
        let mut b = DVector::zeros(rows);
        for v in b.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        layers.push((wm, b));
    }
    Ok(Mlp { layers })
}

impl Checkpoint {
    /// Layout (all little-endian): magic "BSCK", version u32, sensor spec
    /// (beams u32, width u32, f_up/f_down/range_min/range_max/divergence
    /// f64), feature/latent widths u32, background anchors, background
    /// latents, the four networks (covariance, intensity, ray-drop,
    /// opacity), instance list (id u64, anchors, latents, poses as frame
    /// u64 + row-major 3x4 rigid transform), iteration u64, optional
    /// optimizer blob (step u64 + named f64 slots).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let w = &mut w;
        w.write_all(CK_MAGIC)?;
        w.write_u32::<LittleEndian>(CK_VERSION)?;
        w.write_u32::<LittleEndian>(self.spec.beams as u32)?;
        w.write_u32::<LittleEndian>(self.spec.width as u32)?;
        for v in [
            self.spec.f_up,
            self.spec.f_down,
            self.spec.range_min,
            self.spec.range_max,
            self.spec.divergence,
        ] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(FEATURE_DIM as u32)?;
        w.write_u32::<LittleEndian>(LATENT_DIM as u32)?;
        write_anchors(w, &self.field.anchors)?;
        write_latents(w, &self.field.latents)?;
        for mlp in [
            &self.field.weights.sigma,
            &self.field.weights.rho,
            &self.field.weights.ray,
            &self.field.weights.alpha,
        ] {
            write_mlp(w, mlp)?;
        }
        w.write_u32::<LittleEndian>(self.instances.len() as u32)?;
        for inst in &self.instances {
            w.write_u64::<LittleEndian>(inst.id)?;
            write_anchors(w, &inst.anchors)?;
            write_latents(w, &inst.latents)?;
            w.write_u32::<LittleEndian>(inst.poses.len() as u32)?;
            for (frame, pose) in &inst.poses {
                w.write_u64::<LittleEndian>(*frame as u64)?;
                for v in pose.to_row() {
                    w.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        w.write_u64::<LittleEndian>(self.iteration)?;
        match &self.optim {
            None => w.write_u8(0)?,
            Some(blob) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(blob.step)?;
                w.write_u32::<LittleEndian>(blob.slots.len() as u32)?;
                for (name, data) in &blob.slots {
                    let bytes = name.as_bytes();
                    w.write_u32::<LittleEndian>(bytes.len() as u32)?;
                    w.write_all(bytes)?;
                    w.write_u64::<LittleEndian>(data.len() as u64)?;
                    for v in data {
                        w.write_f64::<LittleEndian>(*v)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let r = &mut r;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CK_MAGIC {
            return Err(Error::format("bad magic, not a checkpoint"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CK_VERSION {
            return Err(Error::format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let beams = r.read_u32::<LittleEndian>()? as usize;
        let width = r.read_u32::<LittleEndian>()? as usize;
        let f_up = r.read_f64::<LittleEndian>()?;
        let f_down = r.read_f64::<LittleEndian>()?;
        let range_min = r.read_f64::<LittleEndian>()?;
        let range_max = r.read_f64::<LittleEndian>()?;
        let divergence = r.read_f64::<LittleEndian>()?;
        let spec = SensorSpec::new(beams, width, f_up, f_down, range_min, range_max)?
            .with_divergence(divergence)?;
        let fdim = r.read_u32::<LittleEndian>()? as usize;
        let ldim = r.read_u32::<LittleEndian>()? as usize;
        if fdim != FEATURE_DIM || ldim != LATENT_DIM {
            return Err(Error::format(format!(
                "checkpoint widths {fdim}/{ldim} do not match this build"
            )));
        }
        let anchors = read_anchors(r)?;
        let latents = read_latents(r)?;
        let sigma = read_mlp(r)?;
        let rho = read_mlp(r)?;
        let ray = read_mlp(r)?;
        let alpha = read_mlp(r)?;
        let n_inst = r.read_u32::<LittleEndian>()? as usize;
        let mut instances = Vec::with_capacity(n_inst);
        for _ in 0..n_inst {
            let id = r.read_u64::<LittleEndian>()?;
            let anchors = read_anchors(r)?;
            let latents = read_latents(r)?;
            let n_poses = r.read_u32::<LittleEndian>()? as usize;
            let mut poses = Vec::with_capacity(n_poses);
            for _ in 0..n_poses {
                let frame = r.read_u64::<LittleEndian>()? as usize;
                let mut row = [0.0; 12];
                for v in row.iter_mut() {
                    *v = r.read_f64::<LittleEndian>()?;
                }
                poses.push((frame, Pose::from_row(&row)?));
            }
            instances.push(InstanceField {
                id,
                anchors,
                latents,
                poses,
            });
        }
        let iteration = r.read_u64::<LittleEndian>()?;
        let optim = match r.read_u8()? {
            0 => None,
            1 => {
                let step = r.read_u64::<LittleEndian>()?;
                let n_slots = r.read_u32::<LittleEndian>()? as usize;
                let mut slots = Vec::with_capacity(n_slots);
                for _ in 0..n_slots {
                    let len = r.read_u32::<LittleEndian>()? as usize;
                    let mut buf = vec![0u8; len];
                    r.read_exact(&mut buf)?;
                    let name = String::from_utf8(buf)
                        .map_err(|_| Error::format("non-utf8 slot name"))?;
                    let dlen = r.read_u64::<LittleEndian>()? as usize;
                    let mut data = vec![0.0; dlen];
                    for v in data.iter_mut() {
                        *v = r.read_f64::<LittleEndian>()?;
                    }
                    slots.push((name, data));
                }
                Some(OptimBlob { step, slots })
            }
            other => return Err(Error::format(format!("bad optimizer flag {other}"))),
        };
        Ok(Checkpoint {
            spec,
            field: Field {
                anchors,
                weights: MlpWeights {
                    sigma,
                    rho,
                    ray,
                    alpha,
                },
                latents,
            },
            instances,
            iteration,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
