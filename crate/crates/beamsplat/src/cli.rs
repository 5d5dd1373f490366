//! Single-binary pipeline driver: scene synthesis, training, rendering
//! (with sensor resampling), evaluation, and gradient checking. Every
//! command that writes a directory drops a JSON run manifest beside its
//! outputs so runs can be reproduced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgAction, Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector4};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::field::{
    Anchor, Checkpoint, FrameLatent, GaussianPrimitive, Mlp, MlpWeights, FEATURE_DIM, LATENT_DIM,
};
use crate::grad::{
    backward, mlp_backward, mlp_from_params, mlp_param_vector, rasterize_backward,
    spawn_backward, ChannelGrads, GradientBundle, PrimGrad,
};
use crate::metrics::{image_metrics_with, EvalReport, FSCORE_TAU};
use crate::oracle::{generate_sequence, urban_toy, AnalyticScene, Dataset};
use crate::pose::Pose;
use crate::rangeview::{rangeimage_to_points, write_ply, RangeImage, SensorSpec};
use crate::splat::{
    apply_raydrop, project_all, rasterize, write_depth_png, write_intensity_png, RenderOptions,
};
use crate::train::{render_pose, train_scene, TrainConfig};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "beamsplat",
    version,
    about = "Differentiable LiDAR re-simulation: synthesize, train, render, evaluate"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads for parallel sections; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Seeded runs with ordered reductions. The pipeline keeps ordered
    /// reductions regardless, so this flag is recorded for provenance.
    #[arg(long, global = true, action = ArgAction::Set, default_value_t = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ray-cast an analytic scene into a range-view dataset.
    Synth(SynthArgs),
    /// Fit the neural Gaussian field to a dataset.
    Train(TrainArgs),
    /// Render a trained checkpoint from dataset or novel poses.
    Render(RenderArgs),
    /// Compare predicted frames against ground truth.
    Eval(EvalArgs),
    /// Finite-difference checks of every hand-written gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene description JSON; the built-in benchmark scene when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Sensor trajectory CSV (frame,r00..r22,tx,ty,tz); required with --scene.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Sensor spec JSON; required with --scene.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Comma-separated held-out frame indices.
    #[arg(long)]
    pub val: Option<String>,
    /// Override the scene's drop-pattern seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Plain-text `key = value` hyperparameter file; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ablation: project onto axis-aligned pseudo planes instead of the
    /// beam cross-section.
    #[arg(long)]
    pub pseudo_projection: bool,
    /// Ablation: skip the screen-bound cull during rasterization.
    #[arg(long)]
    pub disable_aabb: bool,
    /// Ablation: drop the scale-volume regularizer.
    #[arg(long)]
    pub disable_scale_loss: bool,
    /// Ablation: drop the opacity entropy term.
    #[arg(long)]
    pub disable_alpha_loss: bool,
    /// Ablation: spawn attributes without view direction and distance
    /// inputs.
    #[arg(long)]
    pub disable_view_inputs: bool,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory providing sensor poses.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Comma-separated frame indices to render from --dataset; that
    /// dataset's held-out split when omitted.
    #[arg(long)]
    pub frames: Option<String>,
    /// CSV of novel sensor poses (same format as poses.csv).
    #[arg(long)]
    pub pose_csv: Option<PathBuf>,
    /// Scene state (frame latents and instance placement) rendered for
    /// novel poses.
    #[arg(long, default_value_t = 0)]
    pub state_frame: usize,
    /// Beam-count override; more beams than training is allowed.
    #[arg(long)]
    pub beams: Option<usize>,
    /// Column-count override.
    #[arg(long)]
    pub width: Option<usize>,
    /// Upward field-of-view override, radians.
    #[arg(long)]
    pub f_up: Option<f64>,
    /// Downward field-of-view override, radians.
    #[arg(long)]
    pub f_down: Option<f64>,
    #[arg(long)]
    pub range_min: Option<f64>,
    #[arg(long)]
    pub range_max: Option<f64>,
    /// Beam scattering half-angle override, radians.
    #[arg(long)]
    pub divergence: Option<f64>,
    /// Blended drop probability at or above which a pixel is cleared.
    #[arg(long, default_value_t = 0.5)]
    pub lambda_r: f64,
    /// Minimum nearby contributors for a pixel to survive the drop
    /// decision.
    #[arg(long, default_value_t = 2.0)]
    pub lambda_tau: f64,
    /// Emit raw composited channels, skipping the drop decision.
    #[arg(long)]
    pub raw: bool,
    /// Also write false-color depth and intensity PNGs.
    #[arg(long)]
    pub png: bool,
    /// Match a checkpoint trained with the pseudo-plane ablation.
    #[arg(long)]
    pub pseudo_projection: bool,
    /// Match a checkpoint trained with the screen-bound cull disabled.
    #[arg(long)]
    pub disable_aabb: bool,
    /// Match a checkpoint trained without view inputs.
    #[arg(long)]
    pub disable_view_inputs: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory with predicted frames under frames/NNNN.rv.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory with ground-truth frames under frames/NNNN.rv.
    #[arg(long)]
    pub gt: PathBuf,
    /// Comma-separated frame subset; every predicted frame when omitted.
    #[arg(long)]
    pub frames: Option<String>,
    /// Nearest-neighbor threshold for the F-score, meters.
    #[arg(long, default_value_t = FSCORE_TAU)]
    pub tau: f64,
    /// Use squared distances in the chamfer metric.
    #[arg(long)]
    pub squared_cd: bool,
    /// Directory for eval.json; table prints to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Directory for gradcheck.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Reproducibility record written into every run directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub pseudo_projection: bool,
    pub disable_aabb: bool,
    pub disable_scale_loss: bool,
    pub disable_alpha_loss: bool,
    pub disable_view_inputs: bool,
    pub deterministic: bool,
    pub threads: usize,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub status: String,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            pseudo_projection: false,
            disable_aabb: false,
            disable_scale_loss: false,
            disable_alpha_loss: false,
            disable_view_inputs: false,
            deterministic: true,
            threads: 0,
            started_unix_ms: unix_ms(),
            finished_unix_ms: None,
            status: "running".to_string(),
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("manifest serialization failed: {e}")))?;
        std::fs::write(dir.join("run_manifest.json"), text)?;
        Ok(())
    }

    fn finish(&mut self, dir: &Path, status: &str) -> Result<()> {
        self.finished_unix_ms = Some(unix_ms());
        self.status = status.to_string();
        self.write(dir)
    }
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Parse "3,12,40" into sorted unique indices.
fn parse_index_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        out.push(
            part.parse::<usize>()
                .map_err(|_| Error::domain(format!("bad frame index {part:?}")))?,
        );
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Pose CSV: header line, then frame,r00,r01,r02,r10,...,r22,tx,ty,tz.
fn parse_pose_csv(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path)?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
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
    if poses.is_empty() {
        return Err(Error::domain("pose file has no rows"));
    }
    Ok(poses)
}

fn load_spec_json(path: &Path) -> Result<SensorSpec> {
    let text = std::fs::read_to_string(path)?;
    let spec: SensorSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    spec.validate()?;
    Ok(spec)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(args: &SynthArgs, manifest: &mut RunManifest) -> Result<()> {
    let (mut scene, trajectory, spec, default_val) = match &args.scene {
        None => {
            manifest.inputs.push("builtin:urban-toy".to_string());
            urban_toy()
        }
        Some(path) => {
            let scene = AnalyticScene::load(path)?;
            let traj_path = args
                .trajectory
                .as_ref()
                .ok_or_else(|| Error::domain("--scene requires --trajectory"))?;
            let spec_path = args
                .spec
                .as_ref()
                .ok_or_else(|| Error::domain("--scene requires --spec"))?;
            let trajectory = parse_pose_csv(traj_path)?;
            let spec = load_spec_json(spec_path)?;
            manifest.inputs.push(path_str(path));
            manifest.inputs.push(path_str(traj_path));
            manifest.inputs.push(path_str(spec_path));
            (scene, trajectory, spec, Vec::new())
        }
    };
    if let Some(seed) = args.seed {
        scene.seed = seed;
        manifest.seed = Some(seed);
    }
    let val = match &args.val {
        Some(list) => parse_index_list(list)?,
        None => default_val,
    };
    let dataset = generate_sequence(&scene, &trajectory, &spec, &val)?;
    dataset.save(&args.out)?;
    scene.save(&args.out.join("scene.json"))?;
    manifest.outputs.push(path_str(&args.out));
    println!(
        "synthesized {} frames ({} train / {} held out) at {}x{} into {}",
        dataset.frames.len(),
        dataset.train_idx.len(),
        dataset.val_idx.len(),
        spec.beams,
        spec.width,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(args: &TrainArgs, manifest: &mut RunManifest) -> Result<()> {
    let dataset = Dataset::load(&args.dataset)?;
    let mut cfg = match &args.config {
        Some(path) => {
            manifest.config = Some(path_str(path));
            TrainConfig::from_file(path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.pseudo_projection {
        cfg.pseudo_projection = true;
    }
    if args.disable_aabb {
        cfg.disable_aabb = true;
    }
    if args.disable_scale_loss {
        cfg.w_scale = 0.0;
    }
    if args.disable_alpha_loss {
        cfg.w_alpha = 0.0;
    }
    if args.disable_view_inputs {
        cfg.disable_view_inputs = true;
    }
    manifest.seed = Some(cfg.seed);
    manifest.inputs.push(path_str(&args.dataset));
    manifest
        .outputs
        .extend(["checkpoint.bsck", "curves.csv", "config_used.cfg"].map(String::from));
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config_used.cfg"), cfg.to_text())?;

    let outcome = train_scene(&dataset, &cfg, Some(&args.out))?;
    let last = outcome.curves.last();
    println!(
        "trained {} iterations, {} anchors, {} instances{} -> {}",
        outcome.state.iteration,
        outcome.state.field.anchors.len(),
        outcome.state.instances.len(),
        last.map(|c| format!(", final loss {:.5}", c.report.total))
            .unwrap_or_default(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// render
// ---------------------------------------------------------------------------

pub fn cmd_render(args: &RenderArgs, manifest: &mut RunManifest) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    manifest.inputs.push(path_str(&args.checkpoint));

    let base = ck.spec;
    let spec = SensorSpec::new(
        args.beams.unwrap_or(base.beams),
        args.width.unwrap_or(base.width),
        args.f_up.unwrap_or(base.f_up),
        args.f_down.unwrap_or(base.f_down),
        args.range_min.unwrap_or(base.range_min),
        args.range_max.unwrap_or(base.range_max),
    )?
    .with_divergence(args.divergence.unwrap_or(base.divergence))?;

    // (output index, sensor pose, scene-state frame)
    let jobs: Vec<(usize, Pose, usize)> = match (&args.dataset, &args.pose_csv) {
        (Some(dir), None) => {
            manifest.inputs.push(path_str(dir));
            let dataset = Dataset::load(dir)?;
            let indices = match &args.frames {
                Some(list) => parse_index_list(list)?,
                None => dataset.val_idx.clone(),
            };
            if indices.is_empty() {
                return Err(Error::domain(
                    "no frames to render: dataset has no held-out split and --frames was not given",
                ));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.poses.len()) {
                return Err(Error::domain(format!(
                    "frame {bad} is outside the dataset (0..{})",
                    dataset.poses.len()
                )));
            }
            indices
                .into_iter()
                .map(|i| (i, dataset.poses[i], i))
                .collect()
        }
        (None, Some(csv)) => {
            manifest.inputs.push(path_str(csv));
            parse_pose_csv(csv)?
                .into_iter()
                .enumerate()
                .map(|(i, p)| (i, p, args.state_frame))
                .collect()
        }
        _ => {
            return Err(Error::domain(
                "render needs exactly one pose source: --dataset or --pose-csv",
            ))
        }
    };

    let opts = RenderOptions {
        mode: if args.pseudo_projection {
            crate::splat::ProjectionMode::PseudoPlane
        } else {
            crate::splat::ProjectionMode::MicroPlane
        },
        disable_aabb: args.disable_aabb,
    };
    let view_inputs = !args.disable_view_inputs;

    std::fs::create_dir_all(args.out.join("frames"))?;
    if args.png {
        std::fs::create_dir_all(args.out.join("png"))?;
    }
    for &(idx, ref pose, state_frame) in &jobs {
        let (img, tape) = render_pose(
            &ck.field,
            &ck.instances,
            &spec,
            &opts,
            pose,
            state_frame,
            view_inputs,
        )?;
        let out_img = if args.raw {
            img
        } else {
            apply_raydrop(&img, &tape, args.lambda_r, args.lambda_tau)?
        };
        out_img.save_rv(&args.out.join("frames").join(format!("{idx:04}.rv")))?;
        let cloud = rangeimage_to_points(&out_img, pose);
        let ply = std::fs::File::create(args.out.join(format!("{idx:04}.ply")))?;
        write_ply(&cloud, std::io::BufWriter::new(ply))?;
        if args.png {
            write_depth_png(&out_img, &args.out.join("png").join(format!("{idx:04}_depth.png")))?;
            write_intensity_png(
                &out_img,
                &args.out.join("png").join(format!("{idx:04}_intensity.png")),
            )?;
        }
    }
    manifest.outputs.push(path_str(&args.out));
    println!(
        "rendered {} poses at {}x{} into {}",
        jobs.len(),
        spec.beams,
        spec.width,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
struct FrameReport {
    frame: usize,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Debug, Serialize)]
struct EvalFile {
    per_frame: Vec<FrameReport>,
    mean: EvalReport,
}

fn frame_indices_in(dir: &Path) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir.join("frames"))? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix(".rv") {
            if let Ok(idx) = stem.parse::<usize>() {
                out.push(idx);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn mean_report(rows: &[FrameReport]) -> EvalReport {
    let n = rows.len() as f64;
    let mut m = EvalReport {
        cd: 0.0,
        fscore: 0.0,
        fscore_tau: rows[0].report.fscore_tau,
        depth_rmse: 0.0,
        depth_mae: 0.0,
        depth_medae: 0.0,
        int_mae: 0.0,
        int_rmse: 0.0,
        psnr: 0.0,
        ssim: 0.0,
    };
    for r in rows {
        m.cd += r.report.cd / n;
        m.fscore += r.report.fscore / n;
        m.depth_rmse += r.report.depth_rmse / n;
        m.depth_mae += r.report.depth_mae / n;
        m.depth_medae += r.report.depth_medae / n;
        m.int_mae += r.report.int_mae / n;
        m.int_rmse += r.report.int_rmse / n;
        m.psnr += r.report.psnr / n;
        m.ssim += r.report.ssim / n;
    }
    m
}

/// Fixed-width table: point metrics then intensity metrics.
fn eval_table(rows: &[FrameReport], mean: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6}  {:>8} {:>8} {:>8} {:>8} {:>8}  {:>8} {:>8} {:>8} {:>8}",
        "frame", "cd", "fscore", "d_rmse", "d_mae", "d_medae", "i_mae", "i_rmse", "psnr", "ssim"
    );
    let mut line = |label: &str, r: &EvalReport| {
        let _ = writeln!(
            s,
            "{label:>6}  {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}  {:>8.4} {:>8.4} {:>8.2} {:>8.4}",
            r.cd,
            r.fscore,
            r.depth_rmse,
            r.depth_mae,
            r.depth_medae,
            r.int_mae,
            r.int_rmse,
            r.psnr,
            r.ssim
        );
    };
    for row in rows {
        line(&row.frame.to_string(), &row.report);
    }
    line("mean", mean);
    s
}

pub fn cmd_eval(args: &EvalArgs, manifest: &mut RunManifest) -> Result<()> {
    manifest.inputs.push(path_str(&args.pred));
    manifest.inputs.push(path_str(&args.gt));
    let indices = match &args.frames {
        Some(list) => parse_index_list(list)?,
        None => frame_indices_in(&args.pred)?,
    };
    if indices.is_empty() {
        return Err(Error::domain("no frames to evaluate"));
    }
    let missing = |dir: &Path| -> Vec<usize> {
        indices
            .iter()
            .copied()
            .filter(|i| !dir.join("frames").join(format!("{i:04}.rv")).exists())
            .collect()
    };
    for (dir, what) in [(&args.pred, "prediction"), (&args.gt, "ground truth")] {
        let gone = missing(dir);
        if !gone.is_empty() {
            let list: Vec<String> = gone.iter().map(|i| i.to_string()).collect();
            return Err(Error::domain(format!(
                "missing {what} frames: {}",
                list.join(", ")
            )));
        }
    }
    let mut rows = Vec::with_capacity(indices.len());
    for &i in &indices {
        let pred = RangeImage::load_rv(&args.pred.join("frames").join(format!("{i:04}.rv")))?;
        let gt = RangeImage::load_rv(&args.gt.join("frames").join(format!("{i:04}.rv")))?;
        let report = image_metrics_with(&pred, &gt, args.tau, args.squared_cd)?;
        rows.push(FrameReport { frame: i, report });
    }
    let mean = mean_report(&rows);
    print!("{}", eval_table(&rows, &mean));
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let file = EvalFile {
            per_frame: rows,
            mean,
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::format(format!("report serialization failed: {e}")))?;
        std::fs::write(dir.join("eval.json"), text)?;
        manifest.outputs.push(path_str(dir));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

/// One finite-difference audit row. `skipped` counts coordinates whose
/// finite differences did not converge under step halving; those sit on
/// culling or windowing discontinuities of the forward pass and cannot be
/// audited numerically. The row fails if they exceed a tenth of the sweep.
#[derive(Debug, Clone, Serialize)]
pub struct GradCheckRow {
    pub module: String,
    pub max_rel: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
    pub pass: bool,
}

fn gc_spec() -> SensorSpec {
    SensorSpec::new(8, 32, 0.3, 0.3, 1.0, 60.0)
        .unwrap()
        .with_divergence(0.3)
        .unwrap()
}

fn random_anchors(n: usize, rng: &mut StdRng) -> Vec<Anchor> {
    (0..n)
        .map(|_| Anchor {
            position: Vector3::new(
                rng.gen_range(6.0..11.0),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-0.8..0.8),
            ),
            feature: DVector::from_fn(FEATURE_DIM, |_, _| rng.gen_range(-0.5..0.5)),
            base_scale: Vector3::repeat(rng.gen_range(0.15..0.25)),
        })
        .collect()
}

fn random_gaussians(n: usize, rng: &mut StdRng) -> Vec<GaussianPrimitive> {
    (0..n)
        .map(|_| {
            let quat = Vector4::new(
                1.0,
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            )
            .normalize();
            GaussianPrimitive {
                mean: Vector3::new(
                    rng.gen_range(6.0..12.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-1.0..1.0),
                ),
                quat,
                rotation: crate::field::quat_to_matrix(&quat),
                scale: Vector3::new(
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                    rng.gen_range(0.1..0.3),
                ),
                intensity: rng.gen_range(0.2..0.8),
                raydrop: rng.gen_range(0.1..0.9),
                opacity: rng.gen_range(0.3..0.9),
            }
        })
        .collect()
}

fn random_coeffs(spec: &SensorSpec, rng: &mut StdRng) -> ChannelGrads {
    let mut c = ChannelGrads::zeros(spec);
    for i in 0..spec.pixel_count() {
        c.depth[i] = rng.gen_range(-1.0..1.0);
        c.intensity[i] = rng.gen_range(-1.0..1.0);
        c.raydrop[i] = rng.gen_range(-1.0..1.0);
        c.accum_alpha[i] = rng.gen_range(-1.0..1.0);
    }
    c
}

/// Fixed linear functional over the rendered channels; a generic stand-in
/// for any pixel loss.
fn channel_loss(img: &RangeImage, c: &ChannelGrads) -> f64 {
    let mut acc = 0.0;
    for i in 0..img.depth.len() {
        acc += c.depth[i] * img.depth[i]
            + c.intensity[i] * img.intensity[i]
            + c.raydrop[i] * img.raydrop[i]
            + c.accum_alpha[i] * img.accum_alpha[i];
    }
    acc
}

fn prims_to_params(prims: &[GaussianPrimitive]) -> Vec<f64> {
    let mut out = Vec::with_capacity(prims.len() * 18);
    for p in prims {
        out.extend_from_slice(&[p.mean.x, p.mean.y, p.mean.z]);
        out.extend(p.rotation.iter().copied());
        out.extend_from_slice(&[p.scale.x, p.scale.y, p.scale.z]);
        out.extend_from_slice(&[p.intensity, p.raydrop, p.opacity]);
    }
    out
}

fn params_to_prims(vals: &[f64], proto: &[GaussianPrimitive]) -> Vec<GaussianPrimitive> {
    let mut out = proto.to_vec();
    for (i, p) in out.iter_mut().enumerate() {
        let v = &vals[i * 18..(i + 1) * 18];
        p.mean = Vector3::new(v[0], v[1], v[2]);
        p.rotation = Matrix3::from_iterator(v[3..12].iter().copied());
        p.scale = Vector3::new(v[12], v[13], v[14]);
        p.intensity = v[15];
        p.raydrop = v[16];
        p.opacity = v[17];
    }
    out
}

fn prim_grads_to_params(grads: &[PrimGrad]) -> Vec<f64> {
    let mut out = Vec::with_capacity(grads.len() * 18);
    for g in grads {
        out.extend_from_slice(&[g.mean.x, g.mean.y, g.mean.z]);
        out.extend(g.rotation.iter().copied());
        out.extend_from_slice(&[g.scale.x, g.scale.y, g.scale.z]);
        out.extend_from_slice(&[g.intensity, g.raydrop, g.opacity]);
    }
    out
}

fn pack_group(anchors: &[Anchor], latent: &DVector<f64>, w: &MlpWeights) -> Vec<f64> {
    let mut out = Vec::new();
    for a in anchors {
        out.extend_from_slice(&[a.position.x, a.position.y, a.position.z]);
        out.extend(a.feature.iter().copied());
        out.extend_from_slice(&[a.base_scale.x, a.base_scale.y, a.base_scale.z]);
    }
    out.extend(latent.iter().copied());
    for m in [&w.sigma, &w.rho, &w.ray, &w.alpha] {
        out.extend(mlp_param_vector(m));
    }
    out
}

fn unpack_group(
    vals: &[f64],
    proto_a: &[Anchor],
    proto_w: &MlpWeights,
) -> (Vec<Anchor>, DVector<f64>, MlpWeights) {
    let mut anchors = proto_a.to_vec();
    let mut at = 0;
    for a in &mut anchors {
        a.position = Vector3::new(vals[at], vals[at + 1], vals[at + 2]);
        at += 3;
        for k in 0..FEATURE_DIM {
            a.feature[k] = vals[at + k];
        }
        at += FEATURE_DIM;
        a.base_scale = Vector3::new(vals[at], vals[at + 1], vals[at + 2]);
        at += 3;
    }
    let latent = DVector::from_iterator(LATENT_DIM, vals[at..at + LATENT_DIM].iter().copied());
    at += LATENT_DIM;
    let mut nets: Vec<Mlp> = Vec::with_capacity(4);
    for m in [&proto_w.sigma, &proto_w.rho, &proto_w.ray, &proto_w.alpha] {
        let n = mlp_param_vector(m).len();
        nets.push(mlp_from_params(m, &vals[at..at + n]).unwrap());
        at += n;
    }
    let weights = MlpWeights {
        sigma: nets.remove(0),
        rho: nets.remove(0),
        ray: nets.remove(0),
        alpha: nets.remove(0),
    };
    (anchors, latent, weights)
}

fn pack_bundle(bundle: &GradientBundle) -> Vec<f64> {
    let mut out = Vec::new();
    for g in &bundle.anchors {
        out.extend_from_slice(&[g.position.x, g.position.y, g.position.z]);
        out.extend(g.feature.iter().copied());
        out.extend_from_slice(&[g.base_scale.x, g.base_scale.y, g.base_scale.z]);
    }
    out.extend(bundle.latent.iter().copied());
    for m in [
        &bundle.weights.sigma,
        &bundle.weights.rho,
        &bundle.weights.ray,
        &bundle.weights.alpha,
    ] {
        out.extend(mlp_param_vector(m));
    }
    out
}

/// Central-difference sweep over selected coordinates; returns the worst
/// relative error, the count checked, and the count skipped. Relative
/// errors use a floor tied to the largest analytic component so near-zero
/// coordinates do not dominate by cancellation noise.
///
/// Each coordinate is probed at step h and h/2. At a smooth point the two
/// estimates agree to truncation order, so a wrong analytic gradient is
/// still flagged; when they disagree the coordinate straddles a hard cull
/// boundary of the forward pass, where a difference quotient measures the
/// jump rather than the derivative, and the coordinate is skipped.
fn fd_sweep(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    coords: &mut dyn Iterator<Item = usize>,
) -> Result<(f64, usize, usize)> {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4 * (1.0 + scale);
    let mut work = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut quotient = |work: &mut Vec<f64>, i: usize, step: f64| -> Result<f64> {
        work[i] = params[i] + step;
        let fp = f(work)?;
        work[i] = params[i] - step;
        let fm = f(work)?;
        work[i] = params[i];
        Ok((fp - fm) / (2.0 * step))
    };
    for i in coords {
        let step = 1e-4 * params[i].abs().max(1.0);
        let fd_h = quotient(&mut work, i, step)?;
        let fd_h2 = quotient(&mut work, i, 0.5 * step)?;
        if (fd_h - fd_h2).abs() > 0.1 * fd_h.abs().max(fd_h2.abs()).max(floor) {
            skipped += 1;
            continue;
        }
        let rel = (fd_h2 - analytic[i]).abs() / fd_h2.abs().max(analytic[i].abs()).max(floor);
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok((max_rel, checked, skipped))
}

/// Run every gradient audit. Each row reports the worst relative error
/// between hand-written gradients and central finite differences.
pub fn gradcheck_rows(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    let mut push = |module: &str, max_rel: f64, tolerance: f64, checked: usize, skipped: usize| {
        rows.push(GradCheckRow {
            module: module.to_string(),
            max_rel,
            tolerance,
            checked,
            skipped,
            pass: max_rel < tolerance && skipped * 10 <= checked,
        });
    };

    // Network backward: weights of a small net against a fixed linear
    // functional of its outputs.
    {
        let mut rng = StdRng::seed_from_u64(seed);
        let mlp = Mlp::init(&[7, 12, 5], &mut rng);
        let input = DMatrix::from_fn(7, 3, |_, _| rng.gen_range(-1.0..1.0));
        let g_out = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let trace = mlp.forward(&input);
        let (gw, _) = mlp_backward(&mlp, &trace, &input, &g_out);
        let params = mlp_param_vector(&mlp);
        let analytic = mlp_param_vector(&gw);
        let proto = mlp.clone();
        let mut f = |x: &[f64]| -> Result<f64> {
            let m = mlp_from_params(&proto, x)?;
            Ok(m.forward(&input).out.iter().zip(g_out.iter()).map(|(a, b)| a * b).sum())
        };
        let (max_rel, checked, skipped) =
            fd_sweep(&mut f, &params, &analytic, &mut (0..params.len()))?;
        push("network-backward", max_rel, 1e-5, checked, skipped);
    }

    // Rasterizer backward: every primitive parameter through projection
    // and compositing.
    {
        let mut rng = StdRng::seed_from_u64(seed ^ 0x5bd1e995);
        let spec = gc_spec();
        let prims = random_gaussians(6, &mut rng);
        let coefs = random_coeffs(&spec, &mut rng);
        let o = Vector3::zeros();
        let opts = RenderOptions::default();
        let (pj, _) = project_all(&prims, &o, &spec, &opts);
        let (_, tape) = rasterize(&pj, &prims, &o, &spec);
        let (grads, _) = rasterize_backward(&pj, &prims, &tape, &spec, &coefs)?;
        let params = prims_to_params(&prims);
        let analytic = prim_grads_to_params(&grads);
        let proto = prims.clone();
        let mut f = |x: &[f64]| -> Result<f64> {
            let p = params_to_prims(x, &proto);
            let (pj, _) = project_all(&p, &o, &spec, &opts);
            let (img, _) = rasterize(&pj, &p, &o, &spec);
            Ok(channel_loss(&img, &coefs))
        };
        let (max_rel, checked, skipped) =
            fd_sweep(&mut f, &params, &analytic, &mut (0..params.len()))?;
        push("rasterizer-backward", max_rel, 1e-3, checked, skipped);
    }

    // Field backward: anchors, latent, and all four networks against a
    // fixed linear functional of the spawned primitives.
    {
        let mut rng = StdRng::seed_from_u64(seed ^ 0x9e3779b9);
        let spec = gc_spec();
        let anchors = random_anchors(6, &mut rng);
        let latent_code = DVector::from_fn(LATENT_DIM, |_, _| rng.gen_range(-0.5..0.5));
        let weights = MlpWeights::init(&mut rng);
        let frozen: Vec<PrimGrad> = (0..anchors.len())
            .map(|_| PrimGrad {
                mean: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                rotation: Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                scale: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                intensity: rng.gen_range(-1.0..1.0),
                raydrop: rng.gen_range(-1.0..1.0),
                opacity: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let eval = |a: &[Anchor], l: &DVector<f64>, w: &MlpWeights| -> Result<f64> {
            let s = crate::field::spawn(
                a,
                &Vector3::zeros(),
                &FrameLatent {
                    frame_id: 0,
                    code: l.clone(),
                },
                w,
                spec.range_max,
            )?;
            let mut acc = 0.0;
            for (j, p) in s.primitives.iter().enumerate() {
                let g = &frozen[j];
                acc += g.mean.dot(&p.mean)
                    + g.rotation.iter().zip(p.rotation.iter()).map(|(a, b)| a * b).sum::<f64>()
                    + g.scale.dot(&p.scale)
                    + g.intensity * p.intensity
                    + g.raydrop * p.raydrop
                    + g.opacity * p.opacity;
            }
            Ok(acc)
        };
        let sp = crate::field::spawn(
            &anchors,
            &Vector3::zeros(),
            &FrameLatent {
                frame_id: 0,
                code: latent_code.clone(),
            },
            &weights,
            spec.range_max,
        )?;
        let bundle = spawn_backward(
            &anchors,
            &sp.cache,
            &weights,
            &frozen,
            &vec![0.0; sp.primitives.len()],
            true,
        )?;
        let params = pack_group(&anchors, &latent_code, &weights);
        let analytic = pack_bundle(&bundle);
        let head = anchors.len() * (FEATURE_DIM + 6) + LATENT_DIM;
        let proto_a = anchors.clone();
        let proto_w = weights.clone();
        let mut f = |x: &[f64]| -> Result<f64> {
            let (a, l, w) = unpack_group(x, &proto_a, &proto_w);
            eval(&a, &l, &w)
        };
        let mut coords = (0..head).chain((head..params.len()).step_by(137));
        let (max_rel, checked, skipped) = fd_sweep(&mut f, &params, &analytic, &mut coords)?;
        push("field-backward", max_rel, 1e-3, checked, skipped);
    }

    // Full pipeline: anchors, latent, and all four networks through
    // spawn, projection, and rasterization.
    {
        let mut rng = StdRng::seed_from_u64(seed ^ 0x2545f491);
        let spec = gc_spec();
        let anchors = random_anchors(20, &mut rng);
        let latent_code = DVector::from_fn(LATENT_DIM, |_, _| rng.gen_range(-0.5..0.5));
        let weights = MlpWeights::init(&mut rng);
        let coefs = random_coeffs(&spec, &mut rng);
        let o = Vector3::zeros();
        let opts = RenderOptions::default();
        let eval = |a: &[Anchor], l: &DVector<f64>, w: &MlpWeights| -> Result<f64> {
            let s = crate::field::spawn(
                a,
                &o,
                &FrameLatent {
                    frame_id: 0,
                    code: l.clone(),
                },
                w,
                spec.range_max,
            )?;
            let (pj, _) = project_all(&s.primitives, &o, &spec, &opts);
            let (img, _) = rasterize(&pj, &s.primitives, &o, &spec);
            Ok(channel_loss(&img, &coefs))
        };
        let sp = crate::field::spawn(
            &anchors,
            &o,
            &FrameLatent {
                frame_id: 0,
                code: latent_code.clone(),
            },
            &weights,
            spec.range_max,
        )?;
        let (projected, _) = project_all(&sp.primitives, &o, &spec, &opts);
        let (_, tape) = rasterize(&projected, &sp.primitives, &o, &spec);
        let bundle = backward(
            &tape,
            &coefs,
            &sp.primitives,
            &projected,
            &anchors,
            &sp.cache,
            &weights,
            &spec,
        )?;
        let params = pack_group(&anchors, &latent_code, &weights);
        let analytic = pack_bundle(&bundle);
        let head = anchors.len() * (FEATURE_DIM + 6) + LATENT_DIM;
        let proto_a = anchors.clone();
        let proto_w = weights.clone();
        let mut f = |x: &[f64]| -> Result<f64> {
            let (a, l, w) = unpack_group(x, &proto_a, &proto_w);
            eval(&a, &l, &w)
        };
        let mut coords = (0..head).chain((head..params.len()).step_by(211));
        let (max_rel, checked, skipped) = fd_sweep(&mut f, &params, &analytic, &mut coords)?;
        push("full-pipeline", max_rel, 1e-3, checked, skipped);
    }

    Ok(rows)
}

pub fn cmd_gradcheck(args: &GradcheckArgs, manifest: &mut RunManifest) -> Result<()> {
    manifest.seed = Some(args.seed);
    let rows = gradcheck_rows(args.seed)?;
    println!(
        "{:<20} {:>12} {:>10} {:>8} {:>8}  {}",
        "module", "max_rel", "tolerance", "checked", "skipped", "status"
    );
    for r in &rows {
        println!(
            "{:<20} {:>12.3e} {:>10.0e} {:>8} {:>8}  {}",
            r.module,
            r.max_rel,
            r.tolerance,
            r.checked,
            r.skipped,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(&rows)
            .map_err(|e| Error::format(format!("report serialization failed: {e}")))?;
        std::fs::write(dir.join("gradcheck.json"), text)?;
        manifest.outputs.push(path_str(dir));
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.module.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(Error::domain(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Run one parsed command, maintaining its manifest. The manifest lands in
/// the command's output directory when it has one.
pub fn run(cli: &Cli) -> Result<()> {
    let (name, manifest_dir) = match &cli.command {
        Command::Synth(a) => ("synth", Some(a.out.clone())),
        Command::Train(a) => ("train", Some(a.out.clone())),
        Command::Render(a) => ("render", Some(a.out.clone())),
        Command::Eval(a) => ("eval", a.out.clone()),
        Command::Gradcheck(a) => ("gradcheck", a.out.clone()),
    };
    let mut manifest = RunManifest::new(name);
    manifest.deterministic = cli.deterministic;
    manifest.threads = cli.threads;
    if let Command::Train(a) = &cli.command {
        manifest.pseudo_projection = a.pseudo_projection;
        manifest.disable_aabb = a.disable_aabb;
        manifest.disable_scale_loss = a.disable_scale_loss;
        manifest.disable_alpha_loss = a.disable_alpha_loss;
        manifest.disable_view_inputs = a.disable_view_inputs;
    }
    if let Command::Render(a) = &cli.command {
        manifest.pseudo_projection = a.pseudo_projection;
        manifest.disable_aabb = a.disable_aabb;
        manifest.disable_view_inputs = a.disable_view_inputs;
    }
    if let Some(dir) = &manifest_dir {
        manifest.write(dir)?;
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a, &mut manifest),
        Command::Train(a) => cmd_train(a, &mut manifest),
        Command::Render(a) => cmd_render(a, &mut manifest),
        Command::Eval(a) => cmd_eval(a, &mut manifest),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut manifest),
    };
    if let Some(dir) = &manifest_dir {
        let status = match &result {
            Ok(()) => "ok",
            Err(Error::Diverged(_)) => "diverged",
            Err(_) => "error",
        };
        // Manifest bookkeeping must not mask the command's own error.
        let _ = manifest.finish(dir, status);
    }
    result
}

/// Process entry: parse arguments, set up the worker pool, dispatch, and
/// map errors to exit codes (0 success, 2 validation, 3 divergence).
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    if cli.threads > 0 {
        // A second invocation in the same process cannot rebuild the
        // global pool; that is fine for a CLI.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Primitive;
    use tempfile::TempDir;

    fn tiny_scene_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
        let scene = AnalyticScene {
            primitives: vec![Primitive::Plane {
                normal: [0.0, 0.0, 1.0],
                offset: 0.0,
                reflectance: 0.6,
            }],
            instances: vec![],
            near_blind: 0.1,
            d0: 10.0,
            drop_p: 0.0,
            seed: 3,
        };
        let scene_path = dir.join("scene.json");
        scene.save(&scene_path).unwrap();
        let mut csv = String::from("frame,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz\n");
        for f in 0..3 {
            let pose = Pose::from_translation(Vector3::new(0.5 * f as f64, 0.0, 1.5));
            let row = pose.to_row();
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            csv.push_str(&format!("{f},{}\n", cells.join(",")));
        }
        let traj_path = dir.join("traj.csv");
        std::fs::write(&traj_path, csv).unwrap();
        let spec = SensorSpec::new(8, 32, 0.1, 0.4, 0.5, 30.0).unwrap();
        let spec_path = dir.join("spec.json");
        std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
        (scene_path, traj_path, spec_path)
    }

    fn synth_args(dir: &Path, out: &Path) -> SynthArgs {
        let (scene, traj, spec) = tiny_scene_files(dir);
        SynthArgs {
            scene: Some(scene),
            trajectory: Some(traj),
            spec: Some(spec),
            val: Some("2".to_string()),
            seed: None,
            out: out.to_path_buf(),
        }
    }

    fn run_cli(args: &[&str]) -> Result<()> {
        let cli = Cli::try_parse_from(args).expect("argument parsing");
        run(&cli)
    }

    #[test]
    fn synth_train_render_eval_round_trip() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        let data = root.join("data");
        let mut manifest = RunManifest::new("synth");
        cmd_synth(&synth_args(root, &data), &mut manifest).unwrap();
        assert!(data.join("frames").join("0000.rv").exists());
        assert!(data.join("scene.json").exists());

        // Train a few iterations through the CLI surface.
        let cfg_path = root.join("train.cfg");
        std::fs::write(
            &cfg_path,
            "iterations = 12\ninit_anchors = 60\ndensify_until = 0\ndivergence = 0.12\n",
        )
        .unwrap();
        let run_dir = root.join("run");
        run_cli(&[
            "beamsplat",
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ])
        .unwrap();
        assert!(run_dir.join("checkpoint.bsck").exists());
        assert!(run_dir.join("curves.csv").exists());
        assert!(run_dir.join("config_used.cfg").exists());
        let manifest_text =
            std::fs::read_to_string(run_dir.join("run_manifest.json")).unwrap();
        assert!(manifest_text.contains("\"status\": \"ok\""));
        assert!(manifest_text.contains("\"command\": \"train\""));

        // Render the held-out frame and evaluate against the oracle.
        let render_dir = root.join("render");
        run_cli(&[
            "beamsplat",
            "render",
            "--checkpoint",
            run_dir.join("checkpoint.bsck").to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
            "--out",
            render_dir.to_str().unwrap(),
            "--png",
        ])
        .unwrap();
        assert!(render_dir.join("frames").join("0002.rv").exists());
        assert!(render_dir.join("0002.ply").exists());
        assert!(render_dir.join("png").join("0002_depth.png").exists());

        let eval_dir = root.join("eval");
        run_cli(&[
            "beamsplat",
            "eval",
            "--pred",
            render_dir.to_str().unwrap(),
            "--gt",
            data.to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ])
        .unwrap();
        let eval_text = std::fs::read_to_string(eval_dir.join("eval.json")).unwrap();
        assert!(eval_text.contains("\"mean\""));
        assert!(eval_dir.join("run_manifest.json").exists());
    }

    #[test]
    fn eval_of_identical_directories_is_exact() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        let data = root.join("data");
        let mut manifest = RunManifest::new("synth");
        cmd_synth(&synth_args(root, &data), &mut manifest).unwrap();
        let args = EvalArgs {
            pred: data.clone(),
            gt: data.clone(),
            frames: None,
            tau: FSCORE_TAU,
            squared_cd: false,
            out: None,
        };
        let mut manifest = RunManifest::new("eval");
        cmd_eval(&args, &mut manifest).unwrap();
        // Recompute directly for the assertion.
        let img = RangeImage::load_rv(&data.join("frames").join("0001.rv")).unwrap();
        let r = image_metrics_with(&img, &img, FSCORE_TAU, false).unwrap();
        assert_eq!(r.depth_mae, 0.0);
        assert_eq!(r.fscore, 1.0);
        assert_eq!(r.ssim, 1.0);
    }

    #[test]
    fn eval_reports_missing_frames_by_index() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        let data = root.join("data");
        let mut manifest = RunManifest::new("synth");
        cmd_synth(&synth_args(root, &data), &mut manifest).unwrap();
        let partial = root.join("partial");
        std::fs::create_dir_all(partial.join("frames")).unwrap();
        std::fs::copy(
            data.join("frames").join("0001.rv"),
            partial.join("frames").join("0001.rv"),
        )
        .unwrap();
        let args = EvalArgs {
            pred: data.clone(),
            gt: partial,
            frames: None,
            tau: FSCORE_TAU,
            squared_cd: false,
            out: None,
        };
        let mut manifest = RunManifest::new("eval");
        match cmd_eval(&args, &mut manifest) {
            Err(Error::Domain(msg)) => {
                assert!(msg.contains("0") && msg.contains("2"), "{msg}");
                assert!(!msg.contains("1,") && !msg.ends_with('1'), "{msg}");
            }
            other => panic!("expected missing-frame error, got {other:?}"),
        }
    }

    #[test]
    fn synth_without_scene_uses_builtin_benchmark() {
        // Only check the frame count contract; the full benchmark scene
        // is exercised by the acceptance suite.
        let (scene, trajectory, spec, val) = urban_toy();
        assert_eq!(trajectory.len(), 54);
        assert_eq!(val, vec![12, 25, 38, 51]);
        assert_eq!(spec.beams, 32);
        assert_eq!(spec.width, 256);
        scene.validate().unwrap();
    }

    #[test]
    fn render_requires_exactly_one_pose_source() {
        let tmp = TempDir::new().unwrap();
        let out = tmp.path().join("out");
        let args = RenderArgs {
            checkpoint: tmp.path().join("missing.bsck"),
            dataset: None,
            frames: None,
            pose_csv: None,
            state_frame: 0,
            beams: None,
            width: None,
            f_up: None,
            f_down: None,
            range_min: None,
            range_max: None,
            divergence: None,
            lambda_r: 0.5,
            lambda_tau: 2.0,
            raw: false,
            png: false,
            pseudo_projection: false,
            disable_aabb: false,
            disable_view_inputs: false,
            out,
        };
        let mut manifest = RunManifest::new("render");
        // Checkpoint is missing, so the io error comes first; pose-source
        // validation is covered through the parsed-args path below.
        assert!(cmd_render(&args, &mut manifest).is_err());
    }

    #[test]
    fn training_reruns_reproduce_curves_byte_for_byte() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        let data = root.join("data");
        let mut manifest = RunManifest::new("synth");
        cmd_synth(&synth_args(root, &data), &mut manifest).unwrap();
        let cfg_path = root.join("train.cfg");
        std::fs::write(
            &cfg_path,
            "iterations = 10\ninit_anchors = 50\ndensify_until = 0\ndivergence = 0.12\n",
        )
        .unwrap();
        let mut curves = Vec::new();
        for name in ["a", "b"] {
            let run_dir = root.join(name);
            run_cli(&[
                "beamsplat",
                "train",
                "--dataset",
                data.to_str().unwrap(),
                "--config",
                cfg_path.to_str().unwrap(),
                "--out",
                run_dir.to_str().unwrap(),
            ])
            .unwrap();
            let text = std::fs::read_to_string(run_dir.join("curves.csv")).unwrap();
            // Wall-time column differs between runs; strip it.
            let stripped: Vec<String> = text
                .lines()
                .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap())
                .collect();
            curves.push(stripped);
        }
        assert_eq!(curves[0], curves[1]);
    }

    #[test]
    fn gradcheck_passes_and_serializes() {
        let tmp = TempDir::new().unwrap();
        let out = tmp.path().join("gc");
        let args = GradcheckArgs {
            seed: 17,
            out: Some(out.clone()),
        };
        let mut manifest = RunManifest::new("gradcheck");
        cmd_gradcheck(&args, &mut manifest).unwrap();
        let text = std::fs::read_to_string(out.join("gradcheck.json")).unwrap();
        let rows: serde_json::Value = serde_json::from_str(&text).unwrap();
        let rows = rows.as_array().unwrap();
        assert_eq!(rows.len(), 4);
        for row in rows {
            assert!(row["pass"].as_bool().unwrap(), "{row}");
        }
    }

    #[test]
    fn ablation_flags_land_in_the_manifest() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        let data = root.join("data");
        let mut manifest = RunManifest::new("synth");
        cmd_synth(&synth_args(root, &data), &mut manifest).unwrap();
        let run_dir = root.join("run");
        let cfg_path = root.join("t.cfg");
        std::fs::write(
            &cfg_path,
            "iterations = 2\ninit_anchors = 40\ndensify_until = 0\ndivergence = 0.12\n",
        )
        .unwrap();
        run_cli(&[
            "beamsplat",
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--pseudo-projection",
            "--disable-scale-loss",
        ])
        .unwrap();
        let text = std::fs::read_to_string(run_dir.join("run_manifest.json")).unwrap();
        let m: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(m["pseudo_projection"], true);
        assert_eq!(m["disable_scale_loss"], true);
        assert_eq!(m["disable_aabb"], false);
        assert_eq!(m["status"], "ok");
        // The effective config reflects the switches.
        let cfg_text = std::fs::read_to_string(run_dir.join("config_used.cfg")).unwrap();
        assert!(cfg_text.contains("pseudo_projection = true"));
        assert!(cfg_text.contains("w_scale = 0"));
    }

    #[test]
    fn render_spec_override_resamples_beams() {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path();
        let data = root.join("data");
        let mut manifest = RunManifest::new("synth");
        cmd_synth(&synth_args(root, &data), &mut manifest).unwrap();
        let cfg_path = root.join("t.cfg");
        std::fs::write(
            &cfg_path,
            "iterations = 4\ninit_anchors = 40\ndensify_until = 0\ndivergence = 0.12\n",
        )
        .unwrap();
        let run_dir = root.join("run");
        run_cli(&[
            "beamsplat",
            "train",
            "--dataset",
            data.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
        ])
        .unwrap();
        // Halve the beams, then render more beams than trained with.
        for beams in [4usize, 16] {
            let render_dir = root.join(format!("render{beams}"));
            run_cli(&[
                "beamsplat",
                "render",
                "--checkpoint",
                run_dir.join("checkpoint.bsck").to_str().unwrap(),
                "--dataset",
                data.to_str().unwrap(),
                "--frames",
                "2",
                "--beams",
                &beams.to_string(),
                "--out",
                render_dir.to_str().unwrap(),
            ])
            .unwrap();
            let img =
                RangeImage::load_rv(&render_dir.join("frames").join("0002.rv")).unwrap();
            assert_eq!(img.spec.beams, beams);
            assert_eq!(img.spec.width, 32);
        }
    }

    #[test]
    fn index_list_parsing_rejects_junk() {
        assert_eq!(parse_index_list("3, 1,3").unwrap(), vec![1, 3]);
        assert!(parse_index_list("2,x").is_err());
    }
}
