//! End-to-end runs of the command pipeline through the library API:
//! artifact layout, manifest integrity, rerun determinism, and the
//! documented failure modes.

use std::fs;
use std::path::{Path, PathBuf};

use freegen::commands::{self, cmd_cotrain, cmd_eval, cmd_fit, cmd_refine_train, cmd_report, cmd_scenegen};
use freegen::config::RunConfig;
use freegen::formats::{self, MetricReportJson};
use freegen_core::gsplat::unproject_init;

/// A fresh workdir under the cargo-managed temp root.
fn workdir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

/// A configuration small enough that the whole chain runs in seconds.
fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.workdir = dir.to_path_buf();
    cfg.seed = 11;
    cfg.width = 16;
    cfg.height = 16;
    cfg.video_length = 3;
    cfg.fit.steps = 25;
    cfg.refiner.train_steps = 20;
    cfg.refiner.sample_steps = 3;
    cfg.refiner.degrade_fit_steps = vec![0, 5];
    cfg.cotrain.rounds = 1;
    cfg.cotrain.viewpoints_per_round = 2;
    cfg.cotrain.recon_steps_per_round = 4;
    cfg.cotrain.gen_steps_per_round = 4;
    cfg.cotrain.refine_sample_steps = 3;
    cfg.cotrain.gen_batch = 2;
    cfg.eval.shifts = vec![1.0];
    cfg.eval.stride = 2;
    cfg.eval.refine_sample_steps = 3;
    cfg
}

fn run_chain(cfg: &RunConfig) {
    cmd_scenegen(cfg).unwrap();
    cmd_fit(cfg).unwrap();
    cmd_refine_train(cfg).unwrap();
    cmd_cotrain(cfg).unwrap();
    cmd_eval(cfg, None, None).unwrap();
}

#[test]
fn full_chain_writes_consistent_artifacts() {
    let dir = workdir("chain_artifacts");
    let cfg = tiny_config(&dir);
    run_chain(&cfg);

    for name in [
        commands::SCENE_JSON,
        commands::TRAJECTORY_JSON,
        commands::DATASET_MANIFEST,
        commands::SCENE_CKPT,
        commands::FIT_CURVE,
        commands::FIT_MANIFEST,
        commands::REFINER_CKPT,
        commands::REFINE_CURVE,
        commands::REFINE_MANIFEST,
        commands::COTRAIN_SCENE_CKPT,
        commands::COTRAIN_REFINER_CKPT,
        commands::ROUND_REPORTS,
        commands::COTRAIN_MANIFEST,
        commands::METRICS_RAW,
        commands::METRICS_REFINED,
        commands::EVAL_MANIFEST,
    ] {
        assert!(dir.join(name).is_file(), "missing artifact {name}");
    }

    // Every manifest must verify against the files it recorded.
    for name in [
        commands::DATASET_MANIFEST,
        commands::FIT_MANIFEST,
        commands::REFINE_MANIFEST,
        commands::COTRAIN_MANIFEST,
        commands::EVAL_MANIFEST,
    ] {
        let m: formats::Manifest = formats::read_json(&dir.join(name)).unwrap();
        m.verify(&dir).unwrap();
    }

    // Frame dumps exist for both arms of the one requested shift pair.
    for arm in ["raw", "refined"] {
        for shift in ["shift-1m", "shift+1m"] {
            let frame = dir.join(commands::EVAL_DIR).join(arm).join(shift).join("frame_0000.ppm");
            assert!(frame.is_file(), "missing eval dump {}", frame.display());
        }
    }

    // The report command renders from the same artifacts without error.
    cmd_report(&cfg).unwrap();

    // Evaluating the co-trained checkpoints through the override flags works
    // and overwrites the metric files in place.
    cmd_eval(
        &cfg,
        Some(Path::new(commands::COTRAIN_SCENE_CKPT)),
        Some(Path::new(commands::COTRAIN_REFINER_CKPT)),
    )
    .unwrap();
}

#[test]
fn rerun_is_bit_identical() {
    let dir_a = workdir("rerun_a");
    let dir_b = workdir("rerun_b");
    let cfg_a = tiny_config(&dir_a);
    let cfg_b = tiny_config(&dir_b);
    run_chain(&cfg_a);
    run_chain(&cfg_b);

    for name in [
        commands::SCENE_CKPT,
        commands::FIT_CURVE,
        commands::REFINER_CKPT,
        commands::REFINE_CURVE,
        commands::COTRAIN_SCENE_CKPT,
        commands::COTRAIN_REFINER_CKPT,
        commands::ROUND_REPORTS,
        commands::METRICS_RAW,
        commands::METRICS_REFINED,
    ] {
        let a = fs::read(dir_a.join(name)).unwrap();
        let b = fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical reruns");
    }
}

#[test]
fn fit_zero_steps_checkpoint_equals_initializer() {
    let dir = workdir("fit_zero");
    let mut cfg = tiny_config(&dir);
    cfg.fit.steps = 0;
    cmd_scenegen(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();

    let ds = commands::load_dataset(&cfg).unwrap();
    let expected = unproject_init(&ds.frames, cfg.fit.init_stride).unwrap();
    let on_disk = formats::encode_scene(&formats::read_scene(&dir.join(commands::SCENE_CKPT)).unwrap());
    assert_eq!(on_disk, formats::encode_scene(&expected), "zero-step fit must write the initializer");
}

#[test]
fn default_shift_magnitudes_expand_to_six_reports() {
    let dir = workdir("six_reports");
    let mut cfg = tiny_config(&dir);
    cfg.eval.shifts = vec![1.0, 2.0, 4.0]; // the built-in default
    run_chain(&cfg);
    let reports: Vec<MetricReportJson> = formats::read_json(&dir.join(commands::METRICS_RAW)).unwrap();
    let shifts: Vec<f64> = reports.iter().map(|r| r.shift_m).collect();
    assert_eq!(shifts, vec![-1.0, 1.0, -2.0, 2.0, -4.0, 4.0]);
    let refined: Vec<MetricReportJson> =
        formats::read_json(&dir.join(commands::METRICS_REFINED)).unwrap();
    assert_eq!(refined.len(), 6);
}

#[test]
fn zero_shift_evaluates_on_trajectory() {
    let dir = workdir("zero_shift");
    let mut cfg = tiny_config(&dir);
    cfg.eval.shifts = vec![0.0];
    run_chain(&cfg);
    let reports: Vec<MetricReportJson> = formats::read_json(&dir.join(commands::METRICS_RAW)).unwrap();
    assert_eq!(reports.len(), 1, "zero shift must not be mirrored");
    assert_eq!(reports[0].shift_m, 0.0);

    // Independently rebuild the on-trajectory comparison: rasterize the
    // fitted scene at the strided base views and compare against a fresh
    // ray trace of the same poses.
    let ds = commands::load_dataset(&cfg).unwrap();
    let scene = formats::read_scene(&dir.join(commands::SCENE_CKPT)).unwrap();
    let base = ds.base_trajectory();
    let tile = cfg.tile_config();
    let mut psnrs = Vec::new();
    for view in base.views.iter().step_by(cfg.eval.stride) {
        let render = freegen_core::rasterizer::rasterize(&scene, view, &tile);
        let truth = freegen_core::scenegen::raytrace(&ds.spec, view);
        psnrs.push(freegen_core::metrics::psnr(&render.image, &truth.image).unwrap());
    }
    let mean = psnrs.iter().sum::<f64>() / psnrs.len() as f64;
    assert!(
        (reports[0].mean.psnr.0 - mean).abs() < 1e-12,
        "zero-shift eval ({}) must equal the direct on-trajectory comparison ({mean})",
        reports[0].mean.psnr.0
    );
}

#[test]
fn corrupted_artifacts_fail_closed() {
    let dir = workdir("corrupt");
    let cfg = tiny_config(&dir);
    cmd_scenegen(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();

    // Flip one byte of the scene checkpoint: the refiner stage must refuse.
    let ckpt = dir.join(commands::SCENE_CKPT);
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0xff;
    fs::write(&ckpt, &bytes).unwrap();
    let err = cmd_refine_train(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3, "tampered checkpoint must be an I/O failure: {err}");
    let msg = err.to_string();
    assert!(msg.contains("integrity check failed"), "unexpected message: {msg}");
    assert!(msg.contains(commands::SCENE_CKPT), "message must name the file: {msg}");

    // A missing dataset frame is also an I/O failure.
    let dir2 = workdir("corrupt2");
    let cfg2 = tiny_config(&dir2);
    cmd_scenegen(&cfg2).unwrap();
    fs::remove_file(dir2.join(commands::DATASET_DIR).join("frame_0001.ppm")).unwrap();
    let err2 = cmd_fit(&cfg2).unwrap_err();
    assert_eq!(err2.exit_code(), 3, "missing frame must be an I/O failure: {err2}");
}

#[test]
fn cotrain_rejects_offschedule_refiner_checkpoint() {
    let dir = workdir("offschedule");
    let mut cfg = tiny_config(&dir);
    cfg.refiner.timesteps = 100;
    cmd_scenegen(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();
    cmd_refine_train(&cfg).unwrap();
    let err = cmd_cotrain(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2, "schedule mismatch is an argument error: {err}");
    assert!(err.to_string().contains("200"), "message should name the pinned schedule: {err}");

    // Evaluation, by contrast, honors whatever schedule the checkpoint
    // declares, so the off-schedule refiner still evaluates cleanly.
    cmd_eval(&cfg, None, None).unwrap();
}

#[test]
fn multi_camera_rig_is_camera_major_and_self_describing() {
    let dir = workdir("rig");
    let mut cfg = tiny_config(&dir);
    cfg.cameras = 2;
    cfg.rig_spacing_m = 0.5;
    cmd_scenegen(&cfg).unwrap();

    let ds = commands::load_dataset(&cfg).unwrap();
    assert_eq!(ds.cameras, 2);
    assert_eq!(ds.frames_per_camera, 3);
    assert_eq!(ds.trajectory.views.len(), 6);
    for (i, v) in ds.trajectory.views.iter().enumerate() {
        assert_eq!(v.frame_idx as usize, i, "views must be stored camera-major");
    }
    // The two sweeps are laterally separated by the rig spacing at every
    // frame index.
    for k in 0..3 {
        let a = ds.trajectory.views[k].pose.translation;
        let b = ds.trajectory.views[3 + k].pose.translation;
        let gap = b - a;
        let dist = (gap.x * gap.x + gap.y * gap.y + gap.z * gap.z).sqrt();
        assert!((dist - 0.5).abs() < 1e-12, "rig spacing off at frame {k}: {dist}");
    }

    // Downstream commands read the rig shape from the trajectory file, not
    // from flags: a config that disagrees must still work.
    let mut stale = cfg.clone();
    stale.cameras = 1;
    stale.video_length = 99;
    let ds2 = commands::load_dataset(&stale).unwrap();
    assert_eq!(ds2.cameras, 2);
    assert_eq!(ds2.frames_per_camera, 3);
    assert_eq!(ds2.base_trajectory().views.len(), 3);
}
