//! Scene-fitting quality: unprojection initialization must already resemble
//! the data, and a short optimization run must measurably improve it.

use freegen_core::camera::{Intrinsics, Trajectory};
use freegen_core::cotrain::{recon_loss, DepthTarget, DEPTH_VALID_MAX};
use freegen_core::gsplat::{apply_gradients, unproject_init, LrTable, PARAMS_PER_GAUSSIAN};
use freegen_core::gsplat::{GaussianScene, ParamGradients};
use freegen_core::metrics::psnr;
use freegen_core::optim::AdamState;
use freegen_core::rasterizer::{rasterize, rasterize_backward, TileConfig};
use freegen_core::scenegen::{generate_scene, render_dataset, GroundTruthFrame};
use freegen_core::Vec3;

fn street_frames(seed: u64, n: u32, size: u32) -> Vec<GroundTruthFrame> {
    let spec = generate_scene(seed, "street").expect("street preset");
    let traj = Trajectory::forward_sweep(
        Intrinsics::centered(1.5 * size as f64, size, size),
        n,
        Vec3::new(0.0, -1.5, 0.0),
        0.5,
        12.0,
    );
    render_dataset(&spec, &traj)
}

fn mean_train_psnr(scene: &GaussianScene, frames: &[GroundTruthFrame], cfg: &TileConfig) -> f64 {
    let mut acc = 0.0;
    for f in frames {
        let out = rasterize(scene, &f.view, cfg);
        acc += psnr(&out.image, &f.image).expect("matching shapes");
    }
    acc / frames.len() as f64
}

/// One optimization step over all frames: averaged gradients, Adam update.
fn fit_step(
    scene: &mut GaussianScene,
    frames: &[GroundTruthFrame],
    targets: &[DepthTarget],
    opt: &mut AdamState,
    cfg: &TileConfig,
    lr: &LrTable,
) -> f64 {
    let mut total = ParamGradients::zeros(scene.len());
    let mut loss_acc = 0.0;
    for (f, dt) in frames.iter().zip(targets) {
        let out = rasterize(scene, &f.view, cfg);
        let (breakdown, grads) =
            recon_loss(&out, &f.image, Some(dt), 0.05, 0.01).expect("loss shapes match");
        loss_acc += breakdown.total;
        let pg = rasterize_backward(scene, &f.view, cfg, &grads).expect("backward");
        total.add(&pg);
    }
    total.scale(1.0 / frames.len() as f64);
    *scene = apply_gradients(scene, &total, opt, lr).expect("cardinality matches");
    loss_acc / frames.len() as f64
}

#[test]
fn unprojection_already_resembles_the_training_views() {
    let frames = street_frames(2, 6, 32);
    let scene = unproject_init(&frames, 2).expect("init");
    assert_eq!(scene.len(), 6 * 16 * 16, "one Gaussian per strided pixel");

    let cfg = TileConfig::default();
    let p = mean_train_psnr(&scene, &frames, &cfg);
    assert!(p >= 18.0, "fresh unprojection should sit near the data, got {p:.2} dB");
}

#[test]
fn short_fit_improves_train_view_psnr() {
    let frames = street_frames(4, 4, 24);
    let mut scene = unproject_init(&frames, 3).expect("init");
    let cfg = TileConfig::default();
    let lr = LrTable::default();
    let targets: Vec<DepthTarget> =
        frames.iter().map(|f| DepthTarget::from_depth(&f.depth, DEPTH_VALID_MAX)).collect();

    let before = mean_train_psnr(&scene, &frames, &cfg);
    let mut opt = AdamState::new(scene.len() * PARAMS_PER_GAUSSIAN);
    let mut first_loss = f64::NAN;
    let mut last_loss = f64::NAN;
    for step in 0..60 {
        let l = fit_step(&mut scene, &frames, &targets, &mut opt, &cfg, &lr);
        if step == 0 {
            first_loss = l;
        }
        last_loss = l;
    }
    let after = mean_train_psnr(&scene, &frames, &cfg);

    assert!(
        after >= before + 1.0,
        "60 steps should add at least 1 dB: before {before:.2}, after {after:.2}"
    );
    assert!(last_loss < first_loss, "loss should fall: {first_loss:.5} -> {last_loss:.5}");
}
