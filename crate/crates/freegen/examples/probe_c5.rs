//! Scratch probe: stage-one fit quality/timing at full resolution.

use freegen::config::RunConfig;
use freegen::pipeline::{build_dataset, fit_scene};
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.width = 64;
    cfg.height = 64;
    cfg.video_length = 4;
    cfg.seed = 7;
    let t0 = Instant::now();
    let ds = build_dataset(&cfg).unwrap();
    let tile = cfg.tile_config();
    let out = fit_scene(&ds.frames, &tile, 1000, cfg.fit.init_stride, 0.05, 0.01).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "frames={} gaussians={} psnr_init={:.2} psnr_final={:.2} elapsed={:.1}s",
        ds.frames.len(),
        out.scene.len(),
        out.psnr_init,
        out.psnr_final,
        dt
    );
    // Curve milestones to see convergence shape.
    for s in [0, 49, 99, 199, 399, 699, 999] {
        if s < out.curve.len() {
            println!("  step {:>4}: total={:.6}", s + 1, out.curve[s].total);
        }
    }
}
