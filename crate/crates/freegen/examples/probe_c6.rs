//! Scratch probe: does the trained refiner cut MSE on held-out views?

use freegen::pipeline::train_refiner;
use freegen_core::camera::{Intrinsics, Trajectory};
use freegen_core::gsplat::unproject_init;
use freegen_core::rasterizer::{rasterize, RenderOutput, TileConfig};
use freegen_core::refiner::{refine, NoiseSchedule};
use freegen_core::scenegen::{generate_scene, render_dataset};
use freegen_core::{ImageRgb, Vec3};
use std::time::Instant;

fn mse(a: &ImageRgb, b: &ImageRgb) -> f64 {
    let n = a.data.len() as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

fn stats(img: &ImageRgb) -> (f64, f64, f64) {
    let n = img.data.len() as f64;
    let mean = img.data.iter().sum::<f64>() / n;
    let var = img.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sat = img.data.iter().filter(|v| **v <= 0.001 || **v >= 0.999).count() as f64 / n;
    (mean, var.sqrt(), sat)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let size: u32 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(16);
    let train_steps: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(500);
    let init_frames: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let samples: Vec<usize> = args
        .get(5)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![10, 50, 199]);

    let spec = generate_scene(5, "street").unwrap();
    let traj = Trajectory::forward_sweep(
        Intrinsics::centered(1.6 * size as f64, size, size),
        20,
        Vec3::new(0.0, -1.5, 0.0),
        0.4,
        12.0,
    );
    let frames = render_dataset(&spec, &traj);
    let scene = unproject_init(&frames[..init_frames], 2).unwrap();
    let tile = TileConfig::default();
    let pairs: Vec<(RenderOutput, ImageRgb)> = frames
        .iter()
        .map(|f| (rasterize(&scene, &f.view, &tile), f.image.clone()))
        .collect();

    let train: Vec<(RenderOutput, ImageRgb)> =
        pairs.iter().step_by(2).map(|(r, i)| (r.clone(), i.clone())).collect();
    let held: Vec<&(RenderOutput, ImageRgb)> = pairs.iter().skip(1).step_by(2).collect();
    println!("size={size} train={} held={} steps={train_steps} lr={lr}", train.len(), held.len());
    let per_view: Vec<f64> = held.iter().map(|(r, g)| mse(&r.image, g)).collect();
    println!("  raw per-view mse: {:?}", per_view.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());

    let t0 = Instant::now();
    let out = train_refiner(&train, train_steps, 200, 4, lr, 33).unwrap();
    println!(
        "train {:.1}s first10={:.4} last10={:.4}",
        t0.elapsed().as_secs_f64(),
        out.losses[..10].iter().sum::<f64>() / 10.0,
        out.losses[out.losses.len() - 10..].iter().sum::<f64>() / 10.0
    );

    let sched = NoiseSchedule::new(200);
    for &sample_steps in &samples {
        let t1 = Instant::now();
        let mut raw_acc = 0.0;
        let mut ref_acc = 0.0;
        let mut m_acc = 0.0;
        let mut s_acc = 0.0;
        let mut sat_acc = 0.0;
        for (k, (render, gt)) in held.iter().enumerate() {
            let refined = refine(render, &out.params, &sched, sample_steps, 900 + k as u64).unwrap();
            let (m, s, sat) = stats(&refined);
            m_acc += m;
            s_acc += s;
            sat_acc += sat;
            raw_acc += mse(&render.image, gt);
            ref_acc += mse(&refined, gt);
        }
        let n = held.len() as f64;
        println!(
            "  steps={sample_steps:>3}: raw={:.5} refined={:.5} ratio={:.3} | out mean={:.2} std={:.2} sat={:.2} ({:.1}s)",
            raw_acc / n,
            ref_acc / n,
            (ref_acc / n) / (raw_acc / n),
            m_acc / n,
            s_acc / n,
            sat_acc / n,
            t1.elapsed().as_secs_f64()
        );
    }
}
