//! The compute stages behind the commands, independent of the filesystem:
//! dataset construction, scene fitting, refiner training, and the shifted
//! evaluation protocol. Commands wrap these with IO; tests call them
//! directly.

use freegen_core::camera::{build_eval_trajectories, Intrinsics, Trajectory};
use freegen_core::cotrain::{recon_loss, DepthTarget, LossBreakdown, DEPTH_VALID_MAX};
use freegen_core::gsplat::{
    apply_gradients, unproject_init, GaussianScene, LrTable, ParamGradients, PARAMS_PER_GAUSSIAN,
};
use freegen_core::metrics::{evaluate_protocol, psnr, EvalFrame, MetricReport};
use freegen_core::optim::AdamState;
use freegen_core::rasterizer::{rasterize, rasterize_backward, RenderOutput, TileConfig};
use freegen_core::refiner::{refine, train_step, DenoiserParams, NoiseSchedule};
use freegen_core::scenegen::{generate_scene, raytrace, GroundTruthFrame, SceneSpec};
use freegen_core::{rng, ImageRgb, Vec3};
use rand::Rng as _;

use crate::config::RunConfig;
use crate::{PipelineError, Result};

/// Camera height above the ground plane in meters (+y points down).
pub const CAMERA_HEIGHT_M: f64 = 1.5;
/// Forward distance between consecutive frames.
pub const FRAME_STEP_M: f64 = 0.5;
/// Downward camera tilt.
pub const PITCH_DOWN_DEG: f64 = 12.0;

fn focal_for(width: u32, height: u32) -> f64 {
    1.6 * width.max(height) as f64
}

/// The recording rig: `cameras` parallel forward sweeps, laterally spaced,
/// concatenated camera-major with globally unique frame indices. Camera 0
/// (frames `0..video_length`) is the base trajectory for evaluation.
pub fn build_rig_trajectory(cfg: &RunConfig) -> Trajectory {
    let intr = Intrinsics::centered(focal_for(cfg.width, cfg.height), cfg.width, cfg.height);
    let mut views = Vec::new();
    for cam in 0..cfg.cameras {
        let offset = (cam as f64 - (cfg.cameras - 1) as f64 / 2.0) * cfg.rig_spacing_m;
        let sweep = Trajectory::forward_sweep(
            intr,
            cfg.video_length,
            Vec3::new(offset, -CAMERA_HEIGHT_M, 0.0),
            FRAME_STEP_M,
            PITCH_DOWN_DEG,
        );
        for (k, mut view) in sweep.views.into_iter().enumerate() {
            view.frame_idx = cam * cfg.video_length + k as u32;
            views.push(view);
        }
    }
    Trajectory { views }
}

/// The evaluation base: camera 0's sweep with frame indices 0..video_length.
pub fn base_trajectory(full: &Trajectory, video_length: u32) -> Trajectory {
    Trajectory { views: full.views.iter().take(video_length as usize).copied().collect() }
}

pub struct Dataset {
    pub spec: SceneSpec,
    pub trajectory: Trajectory,
    pub frames: Vec<GroundTruthFrame>,
    pub cameras: u32,
    pub frames_per_camera: u32,
}

impl Dataset {
    /// Camera 0's sweep — the base trajectory for evaluation.
    pub fn base_trajectory(&self) -> Trajectory {
        base_trajectory(&self.trajectory, self.frames_per_camera)
    }
}

/// Ray-traces the ground-truth dataset for the configured preset and rig.
pub fn build_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let spec = generate_scene(cfg.seed, &cfg.preset)
        .map_err(|e| PipelineError::BadArgs(e.to_string()))?;
    let trajectory = build_rig_trajectory(cfg);
    let frames = freegen_core::scenegen::render_dataset(&spec, &trajectory);
    Ok(Dataset {
        spec,
        trajectory,
        frames,
        cameras: cfg.cameras,
        frames_per_camera: cfg.video_length,
    })
}

fn psnr_or_err(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    psnr(a, b).map_err(|e| PipelineError::Io(format!("internal metric shape error: {e}")))
}

/// Mean PSNR of the scene's renders against the given frames.
pub fn mean_train_psnr(
    scene: &GaussianScene,
    frames: &[GroundTruthFrame],
    tile: &TileConfig,
) -> Result<f64> {
    let mut acc = 0.0;
    for f in frames {
        let out = rasterize(scene, &f.view, tile);
        acc += psnr_or_err(&out.image, &f.image)?;
    }
    Ok(acc / frames.len() as f64)
}

/// Forward render, loss, and backward pass for a single frame.
fn frame_gradient(
    scene: &GaussianScene,
    frame: &GroundTruthFrame,
    target: &DepthTarget,
    tile: &TileConfig,
    lambda1: f64,
    lambda2: f64,
) -> Result<(LossBreakdown, ParamGradients)> {
    let out = rasterize(scene, &frame.view, tile);
    let (b, grads) = recon_loss(&out, &frame.image, Some(target), lambda1, lambda2)
        .map_err(|e| PipelineError::Io(format!("internal loss shape error: {e}")))?;
    let pg = rasterize_backward(scene, &frame.view, tile, &grads)
        .map_err(|e| PipelineError::Io(format!("internal backward error: {e}")))?;
    Ok((b, pg))
}

/// One reconstruction step over all frames: per-view losses backpropagated
/// to scene parameters, gradients averaged, one Adam update. Frames are
/// processed on parallel threads; the reduction always runs in frame order,
/// so results are independent of scheduling.
fn fit_step(
    scene: &mut GaussianScene,
    frames: &[GroundTruthFrame],
    targets: &[DepthTarget],
    opt: &mut AdamState,
    tile: &TileConfig,
    lr: &LrTable,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    let count = frames.len();
    let workers = std::thread::available_parallelism()
        .map(|v| v.get())
        .unwrap_or(1)
        .clamp(1, count.max(1));
    let chunk_len = count.div_ceil(workers);
    let mut per_frame: Vec<Option<Result<(LossBreakdown, ParamGradients)>>> =
        (0..count).map(|_| None).collect();
    {
        let scene = &*scene;
        std::thread::scope(|s| {
            for (w, chunk) in per_frame.chunks_mut(chunk_len).enumerate() {
                let base = w * chunk_len;
                s.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        let i = base + j;
                        *slot =
                            Some(frame_gradient(scene, &frames[i], &targets[i], tile, lambda1, lambda2));
                    }
                });
            }
        });
    }

    let mut total = ParamGradients::zeros(scene.len());
    let mut sum = LossBreakdown { mse: 0.0, perceptual: 0.0, depth_l1: 0.0, total: 0.0 };
    for slot in per_frame {
        let (b, pg) = slot.expect("every frame slot is filled before the scope ends")?;
        sum.mse += b.mse;
        sum.perceptual += b.perceptual;
        sum.depth_l1 += b.depth_l1;
        sum.total += b.total;
        total.add(&pg);
    }
    let n = frames.len() as f64;
    total.scale(1.0 / n);
    *scene = apply_gradients(scene, &total, opt, lr)
        .map_err(|e| PipelineError::Io(format!("internal optimizer error: {e}")))?;
    sum.mse /= n;
    sum.perceptual /= n;
    sum.depth_l1 /= n;
    sum.total /= n;
    Ok(sum)
}

pub struct FitOutcome {
    pub scene: GaussianScene,
    pub curve: Vec<LossBreakdown>,
    pub psnr_init: f64,
    pub psnr_final: f64,
}

/// Unprojection initialization followed by `steps` optimization steps on the
/// given frames. `steps == 0` returns the initializer output untouched.
pub fn fit_scene(
    frames: &[GroundTruthFrame],
    tile: &TileConfig,
    steps: usize,
    init_stride: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<FitOutcome> {
    if frames.is_empty() {
        return Err(PipelineError::BadArgs("cannot fit a scene to zero frames".to_string()));
    }
    let mut scene = unproject_init(frames, init_stride)
        .map_err(|e| PipelineError::Numerical(e.to_string()))?;
    let psnr_init = mean_train_psnr(&scene, frames, tile)?;
    let targets: Vec<DepthTarget> =
        frames.iter().map(|f| DepthTarget::from_depth(&f.depth, DEPTH_VALID_MAX)).collect();
    let lr = LrTable::default();
    let mut opt = AdamState::new(scene.len() * PARAMS_PER_GAUSSIAN);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let b = fit_step(&mut scene, frames, &targets, &mut opt, tile, &lr, lambda1, lambda2)?;
        if !b.total.is_finite() {
            return Err(PipelineError::Numerical(format!(
                "reconstruction loss became non-finite at step {step}"
            )));
        }
        curve.push(b);
    }
    let psnr_final = mean_train_psnr(&scene, frames, tile)?;
    Ok(FitOutcome { scene, curve, psnr_init, psnr_final })
}

/// (degraded render, clean image) training pairs for the refiner: scenes are
/// fit for each requested step count (ascending, shared optimizer state so
/// the work is incremental) and rendered at every dataset view.
pub fn build_degraded_pairs(
    frames: &[GroundTruthFrame],
    tile: &TileConfig,
    degrade_fit_steps: &[usize],
    init_stride: usize,
    lambda1: f64,
    lambda2: f64,
) -> Result<Vec<(RenderOutput, ImageRgb)>> {
    if frames.is_empty() {
        return Err(PipelineError::BadArgs("cannot build pairs from zero frames".to_string()));
    }
    let mut ks: Vec<usize> = degrade_fit_steps.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let mut scene = unproject_init(frames, init_stride)
        .map_err(|e| PipelineError::Numerical(e.to_string()))?;
    let targets: Vec<DepthTarget> =
        frames.iter().map(|f| DepthTarget::from_depth(&f.depth, DEPTH_VALID_MAX)).collect();
    let lr = LrTable::default();
    let mut opt = AdamState::new(scene.len() * PARAMS_PER_GAUSSIAN);
    let mut pairs = Vec::with_capacity(ks.len() * frames.len());
    let mut step = 0usize;
    for &k in &ks {
        while step < k {
            let b = fit_step(&mut scene, frames, &targets, &mut opt, tile, &lr, lambda1, lambda2)?;
            if !b.total.is_finite() {
                return Err(PipelineError::Numerical(format!(
                    "reconstruction loss became non-finite at step {step}"
                )));
            }
            step += 1;
        }
        for f in frames {
            pairs.push((rasterize(&scene, &f.view, tile), f.image.clone()));
        }
    }
    Ok(pairs)
}

pub struct RefinerTrainOutcome {
    pub params: DenoiserParams,
    pub losses: Vec<f64>,
}

/// Trains the denoiser on the given pairs with minibatches drawn with
/// replacement. Fully determined by `seed`.
pub fn train_refiner(
    pairs: &[(RenderOutput, ImageRgb)],
    train_steps: usize,
    timesteps: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<RefinerTrainOutcome> {
    if pairs.is_empty() {
        return Err(PipelineError::BadArgs("refiner training needs at least one pair".to_string()));
    }
    let sched = NoiseSchedule::new(timesteps);
    let mut params = DenoiserParams::init(seed);
    let mut opt = AdamState::new(params.param_count());
    let mut batch_rng = rng::stream(seed, "refiner-minibatches");
    let mut losses = Vec::with_capacity(train_steps);
    for step in 0..train_steps {
        let picks: Vec<usize> =
            (0..batch).map(|_| batch_rng.random_range(0..pairs.len())).collect();
        let refs: Vec<(&RenderOutput, &ImageRgb)> =
            picks.iter().map(|&i| (&pairs[i].0, &pairs[i].1)).collect();
        let loss = train_step(&refs, &mut params, &sched, &mut opt, lr, &mut batch_rng)
            .map_err(|e| PipelineError::Io(format!("internal train-step error: {e}")))?;
        if !loss.is_finite() {
            return Err(PipelineError::Numerical(format!(
                "denoising loss became non-finite at step {step}"
            )));
        }
        losses.push(loss);
    }
    Ok(RefinerTrainOutcome { params, losses })
}

pub struct EvalOutcome {
    pub raw: Vec<MetricReport>,
    pub refined: Option<Vec<MetricReport>>,
    /// Rendered frames per shift, aligned with `raw` (kept so callers can
    /// dump them to disk).
    pub raw_frames: Vec<Vec<EvalFrame>>,
    pub refined_frames: Option<Vec<Vec<EvalFrame>>>,
}

/// The lateral-shift protocol: renders the scene along shifted copies of the
/// base trajectory (every `stride`-th frame), ray-traces reference frames at
/// identical poses, and scores raw renders — and refined renders when a
/// denoiser is supplied — against the reference.
#[allow(clippy::too_many_arguments)]
pub fn eval_scene(
    spec: &SceneSpec,
    base: &Trajectory,
    scene: &GaussianScene,
    refiner: Option<(&DenoiserParams, usize, usize)>, // (params, timesteps, sample_steps)
    signed_shifts: &[f64],
    stride: usize,
    tile: &TileConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    let trajs = build_eval_trajectories(base, signed_shifts, stride)
        .map_err(|e| PipelineError::BadArgs(format!("evaluation trajectories: {e}")))?;
    let sched = refiner.map(|(_, timesteps, _)| NoiseSchedule::new(timesteps));

    let mut raw_frames = Vec::with_capacity(trajs.len());
    let mut refined_frames = Vec::with_capacity(trajs.len());
    let mut oracle_frames = Vec::with_capacity(trajs.len());
    for (si, (_, traj)) in trajs.iter().enumerate() {
        let mut raw = Vec::with_capacity(traj.views.len());
        let mut refined = Vec::with_capacity(traj.views.len());
        let mut oracle = Vec::with_capacity(traj.views.len());
        for view in &traj.views {
            let out = rasterize(scene, view, tile);
            if let (Some((params, _, sample_steps)), Some(sched)) = (refiner, sched.as_ref()) {
                let noise_seed =
                    rng::derive_seed(seed, &format!("refine-shift{si}-frame{}", view.frame_idx));
                let image = refine(&out, params, sched, sample_steps, noise_seed)
                    .map_err(|e| PipelineError::Io(format!("internal refiner error: {e}")))?;
                refined.push(EvalFrame { frame_idx: view.frame_idx, image, depth: None });
            }
            let gt = raytrace(spec, view);
            oracle.push(EvalFrame {
                frame_idx: view.frame_idx,
                image: gt.image,
                depth: Some(gt.depth),
            });
            raw.push(EvalFrame {
                frame_idx: view.frame_idx,
                image: out.image,
                depth: Some(out.depth),
            });
        }
        raw_frames.push(raw);
        refined_frames.push(refined);
        oracle_frames.push(oracle);
    }

    let map_err = |e: freegen_core::metrics::MetricsError| match e {
        freegen_core::metrics::MetricsError::ImageTooSmall => PipelineError::BadArgs(
            "resolution too small for the 11x11 structural-similarity window".to_string(),
        ),
        other => PipelineError::Io(format!("internal metric error: {other}")),
    };
    let raw = evaluate_protocol(&raw_frames, &oracle_frames, signed_shifts, stride)
        .map_err(map_err)?;
    let refined = if refiner.is_some() {
        Some(
            evaluate_protocol(&refined_frames, &oracle_frames, signed_shifts, stride)
                .map_err(map_err)?,
        )
    } else {
        None
    };
    let outcome = EvalOutcome {
        raw,
        refined,
        raw_frames,
        refined_frames: refiner.is_some().then_some(refined_frames),
    };
    nan_scan(&outcome)?;
    Ok(outcome)
}

/// Rejects NaN anywhere in the reports. +inf PSNR is legitimate (identical
/// images); NaN is always a defect.
fn nan_scan(outcome: &EvalOutcome) -> Result<()> {
    let scan = |reports: &[MetricReport]| -> Result<()> {
        for r in reports {
            let mut vals = vec![r.mean_psnr, r.mean_ssim, r.median_psnr, r.median_ssim];
            if let Some(d) = r.depth_mae {
                vals.push(d);
            }
            for f in &r.frames {
                vals.push(f.psnr);
                vals.push(f.ssim);
            }
            if vals.iter().any(|v| v.is_nan()) {
                return Err(PipelineError::Numerical(format!(
                    "NaN metric at shift {} m",
                    r.shift_m
                )));
            }
        }
        Ok(())
    };
    scan(&outcome.raw)?;
    if let Some(refined) = &outcome.refined {
        scan(refined)?;
    }
    Ok(())
}
