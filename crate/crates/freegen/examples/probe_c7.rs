//! Scratch probe: does closed-loop co-training lift off-trajectory PSNR over
//! a reconstruction-only baseline with matched reconstruction compute?

use freegen::config::RunConfig;
use freegen::pipeline::{build_dataset, build_degraded_pairs, fit_scene, train_refiner};
use freegen_core::camera::build_eval_trajectories;
use freegen_core::cotrain::{run_cotraining, CoTrainConfig};
use freegen_core::gsplat::GaussianScene;
use freegen_core::metrics::psnr;
use freegen_core::rasterizer::{rasterize, TileConfig};
use freegen_core::scenegen::{raytrace, SceneSpec};
use std::time::Instant;

fn shifted_psnr(
    spec: &SceneSpec,
    scene: &GaussianScene,
    base: &freegen_core::camera::Trajectory,
    shifts: &[f64],
    tile: &TileConfig,
) -> f64 {
    let sets = build_eval_trajectories(base, shifts, 2).unwrap();
    let mut acc = 0.0;
    let mut n = 0usize;
    for (_, traj) in &sets {
        for view in &traj.views {
            let gt = raytrace(spec, view);
            let render = rasterize(scene, view, tile);
            acc += psnr(&render.image, &gt.image).unwrap();
            n += 1;
        }
    }
    acc / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(24);
    let s_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(150);
    let r_steps: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(40);
    let g_steps: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(30);
    let pretrain: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(150);
    let seed: u64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(100);

    let mut cfg = RunConfig::default();
    cfg.width = size;
    cfg.height = size;
    cfg.video_length = 4;
    cfg.seed = seed;
    let t0 = Instant::now();
    let ds = build_dataset(&cfg).unwrap();
    let tile = cfg.tile_config();
    let base = ds.base_trajectory();

    // Arm A: reconstruction-only with the same total GT-recon step count.
    let arm_a = fit_scene(&ds.frames, &tile, s_steps + 3 * r_steps, 2, 0.05, 0.01).unwrap();
    let a_on = shifted_psnr(&ds.spec, &arm_a.scene, &base, &[0.0], &tile);
    let a_off = shifted_psnr(&ds.spec, &arm_a.scene, &base, &[2.0, -2.0], &tile);
    println!(
        "[{}s] arm A (fit {}): on={a_on:.2} off2m={a_off:.2}",
        t0.elapsed().as_secs(),
        s_steps + 3 * r_steps
    );

    // Arm B: initial fit, refiner pretrain, then 3 co-training rounds.
    let arm_b = fit_scene(&ds.frames, &tile, s_steps, 2, 0.05, 0.01).unwrap();
    let b0_on = shifted_psnr(&ds.spec, &arm_b.scene, &base, &[0.0], &tile);
    let b0_off = shifted_psnr(&ds.spec, &arm_b.scene, &base, &[2.0, -2.0], &tile);
    println!("[{}s] arm B pre-cotrain (fit {s_steps}): on={b0_on:.2} off2m={b0_off:.2}", t0.elapsed().as_secs());

    let pairs =
        build_degraded_pairs(&ds.frames, &tile, &[0, r_steps, s_steps], 2, 0.05, 0.01).unwrap();
    let tr = train_refiner(&pairs, pretrain, 200, 4, 1e-3, 77).unwrap();
    println!(
        "[{}s] refiner pretrained on {} pairs: first10={:.4} last10={:.4}",
        t0.elapsed().as_secs(),
        pairs.len(),
        tr.losses[..10.min(tr.losses.len())].iter().sum::<f64>() / 10f64.min(tr.losses.len() as f64),
        tr.losses[tr.losses.len().saturating_sub(10)..].iter().sum::<f64>()
            / 10f64.min(tr.losses.len() as f64)
    );

    let mut scene = arm_b.scene;
    let mut params = tr.params;
    let cc = CoTrainConfig {
        rounds: 3,
        step1_viewpoints_per_round: 8,
        lateral_range: 4.0,
        yaw_jitter_deg: 5.0,
        lambda1: 0.05,
        lambda2: 0.01,
        recon_steps_per_round: r_steps,
        gen_steps_per_round: g_steps,
        refine_sample_steps: 10,
        gen_batch: 4,
        use_oracle_depth: true,
        seed: 3,
    };
    let reports =
        run_cotraining(&mut scene, &mut params, &base, &ds.frames, &ds.spec, &cc, &tile, None)
            .unwrap();
    for r in &reports {
        println!(
            "  round {}: psnr0={:.2} psnr1={:.2} psnr2={:.2} recon={:.4} gen={:.4}",
            r.round, r.psnr_0m, r.psnr_1m, r.psnr_2m, r.recon_loss.total, r.gen_loss
        );
    }
    let b_on = shifted_psnr(&ds.spec, &scene, &base, &[0.0], &tile);
    let b_off = shifted_psnr(&ds.spec, &scene, &base, &[2.0, -2.0], &tile);
    println!(
        "[{}s] arm B post-cotrain: on={b_on:.2} off2m={b_off:.2}  | delta_off={:+.2} on_degrade={:+.2}",
        t0.elapsed().as_secs(),
        b_off - a_off,
        a_on - b_on
    );
}
