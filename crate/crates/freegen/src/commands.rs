//! The six commands. Each one reads documented files from the workdir,
//! verifies the manifests of whatever it consumes, does its work through
//! `pipeline`, and writes its outputs plus a manifest of its own. Commands
//! share no state beyond these files.

use std::fs;
use std::path::{Path, PathBuf};

use freegen_core::cotrain::run_cotraining;
use freegen_core::refiner::DEFAULT_TIMESTEPS;
use freegen_core::rng;

use crate::config::RunConfig;
use crate::formats::{
    self, FitCurveJson, FitCurvePoint, Manifest, MetricReportJson, MetricValue, RefineCurveJson,
    RefineCurvePoint, RoundReportJson, SceneSpecJson, TrajectoryJson,
};
use crate::pipeline::{self, Dataset};
use crate::{PipelineError, Result};

pub const SCENE_JSON: &str = "scene.json";
pub const TRAJECTORY_JSON: &str = "trajectory.json";
pub const DATASET_DIR: &str = "dataset";
pub const DATASET_MANIFEST: &str = "dataset_manifest.json";
pub const SCENE_CKPT: &str = "scene.fggs";
pub const FIT_CURVE: &str = "fit_curve.json";
pub const FIT_MANIFEST: &str = "fit_manifest.json";
pub const REFINER_CKPT: &str = "refiner.fgdn";
pub const REFINE_CURVE: &str = "refine_curve.json";
pub const REFINE_MANIFEST: &str = "refine_manifest.json";
pub const COTRAIN_SCENE_CKPT: &str = "scene_cotrained.fggs";
pub const COTRAIN_REFINER_CKPT: &str = "refiner_cotrained.fgdn";
pub const ROUND_REPORTS: &str = "round_reports.jsonl";
pub const COTRAIN_MANIFEST: &str = "cotrain_manifest.json";
pub const METRICS_RAW: &str = "metrics_raw.json";
pub const METRICS_REFINED: &str = "metrics_refined.json";
pub const EVAL_DIR: &str = "eval";
pub const EVAL_MANIFEST: &str = "eval_manifest.json";

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| PipelineError::io(path, e))
}

/// Loads and integrity-checks the dataset written by `scenegen`.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let root = &cfg.workdir;
    let manifest: Manifest = formats::read_json(&root.join(DATASET_MANIFEST))?;
    manifest.verify(root)?;
    let spec_js: SceneSpecJson = formats::read_json(&root.join(SCENE_JSON))?;
    let traj_js: TrajectoryJson = formats::read_json(&root.join(TRAJECTORY_JSON))?;
    let (cameras, frames_per_camera) = (traj_js.cameras, traj_js.frames_per_camera);
    let trajectory = traj_js.to_trajectory();
    let expected = (cameras as usize) * (frames_per_camera as usize);
    if cameras == 0 || frames_per_camera == 0 || trajectory.views.len() != expected {
        return Err(PipelineError::Io(format!(
            "trajectory file is inconsistent: {} views recorded but it declares \
             {} cameras x {} frames; regenerate the dataset",
            trajectory.views.len(),
            cameras,
            frames_per_camera
        )));
    }
    let dir = root.join(DATASET_DIR);
    let mut frames = Vec::with_capacity(trajectory.views.len());
    for (i, view) in trajectory.views.iter().enumerate() {
        frames.push(formats::read_frame(&dir, i, *view)?);
    }
    Ok(Dataset { spec: spec_js.to_spec(), trajectory, frames, cameras, frames_per_camera })
}

// ---------------------------------------------------------------------------
// scenegen
// ---------------------------------------------------------------------------

pub fn cmd_scenegen(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = &cfg.workdir;
    ensure_dir(root)?;
    ensure_dir(&root.join(DATASET_DIR))?;

    let ds = pipeline::build_dataset(cfg)?;
    formats::write_json(&root.join(SCENE_JSON), &SceneSpecJson::from_spec(&ds.spec))?;
    formats::write_json(
        &root.join(TRAJECTORY_JSON),
        &TrajectoryJson::from_trajectory(&ds.trajectory, ds.cameras, ds.frames_per_camera),
    )?;
    for (i, frame) in ds.frames.iter().enumerate() {
        formats::write_frame(&root.join(DATASET_DIR), i, frame)?;
    }

    let mut manifest = Manifest::new("scenegen", cfg.seed);
    manifest.derived_seeds.insert("scenegen".to_string(), rng::derive_seed(cfg.seed, "scenegen"));
    manifest.record_file(root, SCENE_JSON)?;
    manifest.record_file(root, TRAJECTORY_JSON)?;
    for i in 0..ds.frames.len() {
        let (img, dep) = formats::frame_basenames(i);
        manifest.record_file(root, &format!("{DATASET_DIR}/{img}"))?;
        manifest.record_file(root, &format!("{DATASET_DIR}/{dep}"))?;
    }
    formats::write_json(&root.join(DATASET_MANIFEST), &manifest)?;

    println!(
        "scenegen: preset {}, seed {}, {} frames ({} cameras x {}) at {}x{} -> {}",
        cfg.preset,
        cfg.seed,
        ds.frames.len(),
        cfg.cameras,
        cfg.video_length,
        cfg.width,
        cfg.height,
        root.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = &cfg.workdir;
    let ds = load_dataset(cfg)?;
    let outcome = pipeline::fit_scene(
        &ds.frames,
        &cfg.tile_config(),
        cfg.fit.steps,
        cfg.fit.init_stride,
        cfg.fit.lambda1,
        cfg.fit.lambda2,
    )?;

    formats::write_scene(&root.join(SCENE_CKPT), &outcome.scene)?;
    let curve = FitCurveJson {
        points: outcome
            .curve
            .iter()
            .enumerate()
            .map(|(i, b)| FitCurvePoint::new(i, b))
            .collect(),
        train_psnr_init: MetricValue(outcome.psnr_init),
        train_psnr_final: MetricValue(outcome.psnr_final),
    };
    formats::write_json(&root.join(FIT_CURVE), &curve)?;

    let mut manifest = Manifest::new("fit", cfg.seed);
    manifest.record_file(root, SCENE_CKPT)?;
    manifest.record_file(root, FIT_CURVE)?;
    formats::write_json(&root.join(FIT_MANIFEST), &manifest)?;

    println!(
        "fit: {} steps over {} frames, {} Gaussians, train-view PSNR {:.2} -> {:.2} dB",
        cfg.fit.steps,
        ds.frames.len(),
        outcome.scene.len(),
        outcome.psnr_init,
        outcome.psnr_final
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// refine-train
// ---------------------------------------------------------------------------

pub fn cmd_refine_train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = &cfg.workdir;
    let ds = load_dataset(cfg)?;

    // Verify and load the fitted checkpoint; its renders join the training
    // pairs as the least-degraded tier.
    let fit_manifest: Manifest = formats::read_json(&root.join(FIT_MANIFEST))?;
    fit_manifest.verify(root)?;
    let fitted = formats::read_scene(&root.join(SCENE_CKPT))?;

    let tile = cfg.tile_config();
    let mut pairs = pipeline::build_degraded_pairs(
        &ds.frames,
        &tile,
        &cfg.refiner.degrade_fit_steps,
        cfg.fit.init_stride,
        cfg.fit.lambda1,
        cfg.fit.lambda2,
    )?;
    for f in &ds.frames {
        pairs.push((
            freegen_core::rasterizer::rasterize(&fitted, &f.view, &tile),
            f.image.clone(),
        ));
    }

    let stage_seed = rng::derive_seed(cfg.seed, "refine-train");
    let outcome = pipeline::train_refiner(
        &pairs,
        cfg.refiner.train_steps,
        cfg.refiner.timesteps,
        cfg.refiner.batch,
        cfg.refiner.lr,
        stage_seed,
    )?;

    formats::write_denoiser(&root.join(REFINER_CKPT), &outcome.params, cfg.refiner.timesteps)?;
    let curve = RefineCurveJson {
        points: outcome
            .losses
            .iter()
            .enumerate()
            .map(|(step, &loss)| RefineCurvePoint { step, loss })
            .collect(),
    };
    formats::write_json(&root.join(REFINE_CURVE), &curve)?;

    let mut manifest = Manifest::new("refine-train", cfg.seed);
    manifest.derived_seeds.insert("refine-train".to_string(), stage_seed);
    manifest.record_file(root, REFINER_CKPT)?;
    manifest.record_file(root, REFINE_CURVE)?;
    formats::write_json(&root.join(REFINE_MANIFEST), &manifest)?;

    let first = outcome.losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "refine-train: {} steps on {} pairs, denoising loss {:.4} -> {:.4}",
        cfg.refiner.train_steps,
        pairs.len(),
        first,
        last
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// cotrain
// ---------------------------------------------------------------------------

pub fn cmd_cotrain(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = &cfg.workdir;
    let ds = load_dataset(cfg)?;

    let fit_manifest: Manifest = formats::read_json(&root.join(FIT_MANIFEST))?;
    fit_manifest.verify(root)?;
    let refine_manifest: Manifest = formats::read_json(&root.join(REFINE_MANIFEST))?;
    refine_manifest.verify(root)?;

    let mut scene = formats::read_scene(&root.join(SCENE_CKPT))?;
    let (mut refiner, timesteps) = formats::read_denoiser(&root.join(REFINER_CKPT))?;
    if timesteps != DEFAULT_TIMESTEPS {
        return Err(PipelineError::BadArgs(format!(
            "co-training runs on the default {DEFAULT_TIMESTEPS}-step schedule but the \
             checkpoint was trained with {timesteps}; retrain with refiner.timesteps = \
             {DEFAULT_TIMESTEPS}"
        )));
    }

    let cotrain_cfg = cfg.cotrain_config();
    let reports = run_cotraining(
        &mut scene,
        &mut refiner,
        &ds.trajectory,
        &ds.frames,
        &ds.spec,
        &cotrain_cfg,
        &cfg.tile_config(),
        None,
    )
    .map_err(|e| PipelineError::Io(format!("co-training failed: {e}")))?;

    for r in &reports {
        for (name, v) in [
            ("psnr_0m", r.psnr_0m),
            ("psnr_1m", r.psnr_1m),
            ("psnr_2m", r.psnr_2m),
            ("recon_loss", r.recon_loss.total),
            ("gen_loss", r.gen_loss),
        ] {
            if v.is_nan() {
                return Err(PipelineError::Numerical(format!(
                    "round {}: {name} is NaN",
                    r.round
                )));
            }
        }
    }

    formats::write_scene(&root.join(COTRAIN_SCENE_CKPT), &scene)?;
    formats::write_denoiser(&root.join(COTRAIN_REFINER_CKPT), &refiner, timesteps)?;
    let rows: Vec<RoundReportJson> = reports.iter().map(RoundReportJson::from_report).collect();
    formats::write_jsonl(&root.join(ROUND_REPORTS), &rows)?;

    let mut manifest = Manifest::new("cotrain", cfg.seed);
    manifest.derived_seeds.insert("cotrain".to_string(), cotrain_cfg.seed);
    manifest.record_file(root, COTRAIN_SCENE_CKPT)?;
    manifest.record_file(root, COTRAIN_REFINER_CKPT)?;
    manifest.record_file(root, ROUND_REPORTS)?;
    formats::write_json(&root.join(COTRAIN_MANIFEST), &manifest)?;

    if reports.is_empty() {
        println!("cotrain: 0 rounds requested; checkpoints copied through unchanged");
    }
    for r in &reports {
        println!(
            "cotrain round {}: PSNR 0m {:.2} / 1m {:.2} / 2m {:.2} dB, recon loss {:.5}, gen loss {:.5}",
            r.round, r.psnr_0m, r.psnr_1m, r.psnr_2m, r.recon_loss.total, r.gen_loss
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn shift_dirname(shift: f64) -> String {
    format!("shift{shift:+}m")
}

/// `scene_ckpt` / `refiner_ckpt` default to the stage-one checkpoints in the
/// workdir; pass e.g. the co-trained ones to score those instead. Relative
/// paths resolve against the workdir.
pub fn cmd_eval(
    cfg: &RunConfig,
    scene_ckpt: Option<&Path>,
    refiner_ckpt: Option<&Path>,
) -> Result<()> {
    cfg.validate()?;
    let root = &cfg.workdir;
    let ds = load_dataset(cfg)?;

    let resolve = |p: Option<&Path>, default: &str| -> PathBuf {
        match p {
            Some(p) if p.is_absolute() => p.to_path_buf(),
            Some(p) => root.join(p),
            None => root.join(default),
        }
    };
    let scene = formats::read_scene(&resolve(scene_ckpt, SCENE_CKPT))?;
    let (refiner, timesteps) = formats::read_denoiser(&resolve(refiner_ckpt, REFINER_CKPT))?;

    let base = ds.base_trajectory();
    let shifts = cfg.signed_shifts();
    let outcome = pipeline::eval_scene(
        &ds.spec,
        &base,
        &scene,
        Some((&refiner, timesteps, cfg.eval.refine_sample_steps)),
        &shifts,
        cfg.eval.stride,
        &cfg.tile_config(),
        rng::derive_seed(cfg.seed, "eval"),
    )?;

    let raw_json: Vec<MetricReportJson> =
        outcome.raw.iter().map(MetricReportJson::from_report).collect();
    formats::write_json(&root.join(METRICS_RAW), &raw_json)?;
    let refined_reports = outcome.refined.as_ref().expect("refiner was supplied");
    let refined_json: Vec<MetricReportJson> =
        refined_reports.iter().map(MetricReportJson::from_report).collect();
    formats::write_json(&root.join(METRICS_REFINED), &refined_json)?;

    // Frame dumps: eval/raw/shift+1m/frame_0002.ppm and the refined twins.
    let mut manifest = Manifest::new("eval", cfg.seed);
    manifest.derived_seeds.insert("eval".to_string(), rng::derive_seed(cfg.seed, "eval"));
    manifest.record_file(root, METRICS_RAW)?;
    manifest.record_file(root, METRICS_REFINED)?;
    let refined_frames = outcome.refined_frames.as_ref().expect("refiner was supplied");
    for (kind, per_shift) in [("raw", &outcome.raw_frames), ("refined", refined_frames)] {
        for (shift, frames) in shifts.iter().zip(per_shift) {
            let rel_dir = format!("{EVAL_DIR}/{kind}/{}", shift_dirname(*shift));
            ensure_dir(&root.join(&rel_dir))?;
            for f in frames {
                let rel = format!("{rel_dir}/frame_{:04}.ppm", f.frame_idx);
                formats::write_ppm(&root.join(&rel), &f.image)?;
                manifest.record_file(root, &rel)?;
            }
        }
    }
    formats::write_json(&root.join(EVAL_MANIFEST), &manifest)?;

    for (r, f) in outcome.raw.iter().zip(refined_reports) {
        println!(
            "eval shift {:+.1} m: raw {:.2} dB / ssim {:.3}   refined {:.2} dB / ssim {:.3}",
            r.shift_m, r.mean_psnr, r.mean_ssim, f.mean_psnr, f.mean_ssim
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn fmt_metric(v: MetricValue) -> String {
    if v.0.is_infinite() && v.0 > 0.0 {
        "inf".to_string()
    } else {
        format!("{:.2}", v.0)
    }
}

/// Prints a human-readable summary of whatever result files the workdir
/// holds. Fails only if none of them exist.
pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let root = &cfg.workdir;
    let mut found = false;

    if let Ok(curve) = formats::read_json::<FitCurveJson>(&root.join(FIT_CURVE)) {
        found = true;
        println!("== scene fit ==");
        println!(
            "steps {}, train-view PSNR {} -> {} dB",
            curve.points.len(),
            fmt_metric(curve.train_psnr_init),
            fmt_metric(curve.train_psnr_final)
        );
        println!();
    }

    if let Ok(curve) = formats::read_json::<RefineCurveJson>(&root.join(REFINE_CURVE)) {
        found = true;
        println!("== denoiser training ==");
        if let (Some(first), Some(last)) = (curve.points.first(), curve.points.last()) {
            println!("steps {}, loss {:.4} -> {:.4}", curve.points.len(), first.loss, last.loss);
        } else {
            println!("steps 0");
        }
        println!();
    }

    if let Ok(rows) = formats::read_jsonl::<RoundReportJson>(&root.join(ROUND_REPORTS)) {
        found = true;
        println!("== co-training rounds ==");
        println!("{:>5} {:>9} {:>9} {:>9} {:>12} {:>10}", "round", "psnr@0m", "psnr@1m", "psnr@2m", "recon_total", "gen_loss");
        for r in &rows {
            println!(
                "{:>5} {:>9} {:>9} {:>9} {:>12.5} {:>10.5}",
                r.round,
                fmt_metric(r.psnr_0m),
                fmt_metric(r.psnr_1m),
                fmt_metric(r.psnr_2m),
                r.recon_loss.total,
                r.gen_loss
            );
        }
        println!();
    }

    let print_metrics = |title: &str, file: &str| -> Result<bool> {
        let path = root.join(file);
        if !path.exists() {
            return Ok(false);
        }
        let reports: Vec<MetricReportJson> = formats::read_json(&path)?;
        println!("== {title} ==");
        println!(
            "{:>8} {:>10} {:>8} {:>12} {:>10} {:>7}",
            "shift_m", "mean_psnr", "ssim", "median_psnr", "depth_mae", "frames"
        );
        for r in &reports {
            let mae = r.depth_mae.map_or("-".to_string(), |d| format!("{d:.3}"));
            println!(
                "{:>8.1} {:>10} {:>8.3} {:>12} {:>10} {:>7}",
                r.shift_m,
                fmt_metric(r.mean.psnr),
                r.mean.ssim,
                fmt_metric(r.median.psnr),
                mae,
                r.frames.len()
            );
        }
        println!();
        Ok(true)
    };
    found |= print_metrics("raw renders vs reference", METRICS_RAW)?;
    found |= print_metrics("refined renders vs reference", METRICS_REFINED)?;

    if !found {
        return Err(PipelineError::Io(format!(
            "{}: no result files found (run fit/refine-train/cotrain/eval first)",
            root.display()
        )));
    }
    Ok(())
}
