//! Slow reference implementations used only by tests (feature `oracles`).
//!
//! The renderer here composites every projected splat at every pixel with no
//! tiling and no spatial cutoff, using matrix math written independently of
//! the production rasterizer. The finite-difference helpers probe the real
//! renderer one raw parameter at a time. None of this is compiled into
//! normal builds.

use alloc::vec::Vec;

use crate::camera::View;
use crate::fmath;
use crate::gsplat::{Gaussian3D, GaussianGrad, GaussianScene};
use crate::rasterizer::{rasterize, RenderGrads, RenderOutput, TileConfig};

/// Same visibility thresholds as the production path, restated here so a
/// semantic drift in either copy shows up as a disagreement.
const SKIP: f64 = 1.0 / 255.0;
const CLAMP: f64 = 0.99;
const LOW_PASS: f64 = 0.3;

type M3 = [[f64; 3]; 3];

fn matmul3(a: &M3, b: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[r][k] * b[k][c]).sum();
        }
    }
    out
}

fn transpose3(a: &M3) -> M3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[c][r];
        }
    }
    out
}

/// A splat projected by the reference path.
pub struct OracleSplat {
    pub mean2d: [f64; 2],
    /// Row-major 2x2 screen covariance (low-pass added).
    pub cov2d: [[f64; 2]; 2],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    pub source_index: usize,
}

/// Projects one Gaussian by composing the pinhole Jacobian, the camera
/// rotation, and the world covariance with plain array arithmetic. Returns
/// None behind (or on) the near plane.
pub fn oracle_project(
    g: &Gaussian3D,
    view: &View,
    near_clip: f64,
    source_index: usize,
) -> Option<OracleSplat> {
    let rot_c2w = view.pose.rotation.rotation_matrix();
    let mut r = [[0.0; 3]; 3];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rot_c2w.m[i][j];
        }
    }
    let w = transpose3(&r); // world -> view

    let d = g.position - view.pose.translation;
    let da = d.to_array();
    let p = [
        w[0][0] * da[0] + w[0][1] * da[1] + w[0][2] * da[2],
        w[1][0] * da[0] + w[1][1] * da[1] + w[1][2] * da[2],
        w[2][0] * da[0] + w[2][1] * da[1] + w[2][2] * da[2],
    ];
    if p[2] <= near_clip {
        return None;
    }

    // World covariance R diag(exp(2 ls)) R^T from the raw parameters.
    let grot = g.rotation.rotation_matrix();
    let mut gr = [[0.0; 3]; 3];
    for (i, row) in gr.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = grot.m[i][j];
        }
    }
    let ls = g.log_scale.to_array();
    let mut diag = [[0.0; 3]; 3];
    for k in 0..3 {
        diag[k][k] = fmath::exp(2.0 * ls[k]);
    }
    let sigma3 = matmul3(&matmul3(&gr, &diag), &transpose3(&gr));
    let sigma_view = matmul3(&matmul3(&w, &sigma3), &transpose3(&w));

    let intr = view.intrinsics;
    let inv_z = 1.0 / p[2];
    let j = [
        [intr.fx * inv_z, 0.0, -intr.fx * p[0] * inv_z * inv_z],
        [0.0, intr.fy * inv_z, -intr.fy * p[1] * inv_z * inv_z],
    ];
    let mut jv = [[0.0; 3]; 2];
    for (r_, row) in jv.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| j[r_][k] * sigma_view[k][c]).sum();
        }
    }
    let mut cov = [[0.0; 2]; 2];
    for (r_, row) in cov.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| jv[r_][k] * j[c][k]).sum();
        }
    }
    cov[0][0] += LOW_PASS;
    cov[1][1] += LOW_PASS;

    Some(OracleSplat {
        mean2d: [intr.fx * p[0] * inv_z + intr.cx, intr.fy * p[1] * inv_z + intr.cy],
        cov2d: cov,
        depth: p[2],
        opacity: g.opacity(),
        color: g.color(),
        source_index,
    })
}

/// Untiled reference renderer: every pixel walks the full depth-sorted splat
/// list with the same opacity skip and clamp rules as the production path.
/// `tile_size`, `sigma_cutoff` and `early_stop` are ignored by design;
/// `normalize_depth` and `near_clip` are honored.
pub fn reference_render(scene: &GaussianScene, view: &View, cfg: &TileConfig) -> RenderOutput {
    let mut splats: Vec<OracleSplat> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| oracle_project(g, view, cfg.near_clip, i))
        .collect();
    splats.sort_by(|a, b| {
        a.depth.partial_cmp(&b.depth).unwrap().then(a.source_index.cmp(&b.source_index))
    });

    let (w, h) = (view.intrinsics.width as usize, view.intrinsics.height as usize);
    let mut out = RenderOutput::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            let mut trans = 1.0;
            let mut acc = [0.0f64; 5];
            for s in &splats {
                let det = s.cov2d[0][0] * s.cov2d[1][1] - s.cov2d[0][1] * s.cov2d[1][0];
                let dx = px - s.mean2d[0];
                let dy = py - s.mean2d[1];
                let q = (s.cov2d[1][1] * dx * dx - 2.0 * s.cov2d[0][1] * dx * dy
                    + s.cov2d[0][0] * dy * dy)
                    / det;
                let mut alpha = s.opacity * fmath::exp(-0.5 * q);
                if alpha > CLAMP {
                    alpha = CLAMP;
                }
                if alpha < SKIP {
                    continue;
                }
                let wgt = alpha * trans;
                acc[0] += s.color[0] * wgt;
                acc[1] += s.color[1] * wgt;
                acc[2] += s.color[2] * wgt;
                acc[3] += s.depth * wgt;
                acc[4] += wgt;
                trans *= 1.0 - alpha;
            }
            if cfg.normalize_depth {
                acc[3] = if acc[4] > 1e-12 { acc[3] / acc[4] } else { 0.0 };
            }
            for c in 0..3 {
                out.image.data[(c * h + y) * w + x] = acc[c];
            }
            out.depth.data[y * w + x] = acc[3];
            out.alpha.data[y * w + x] = acc[4];
        }
    }
    out
}

/// Largest absolute difference across all three output channels.
pub fn max_abs_diff(a: &RenderOutput, b: &RenderOutput) -> f64 {
    let chan = |x: &[f64], y: &[f64]| {
        x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0f64, f64::max)
    };
    chan(&a.image.data, &b.image.data)
        .max(chan(&a.depth.data, &b.depth.data))
        .max(chan(&a.alpha.data, &b.alpha.data))
}

/// Raw parameters per Gaussian in the optimizer's flat order.
pub const PARAMS: usize = 14;

/// Reads raw parameter `idx` (flat order: position xyz, opacity logit,
/// log-scale xyz, quaternion wxyz, color logits) from one Gaussian.
pub fn get_param(g: &Gaussian3D, idx: usize) -> f64 {
    let q = g.rotation.to_array();
    match idx {
        0 => g.position.x,
        1 => g.position.y,
        2 => g.position.z,
        3 => g.opacity_logit,
        4 => g.log_scale.x,
        5 => g.log_scale.y,
        6 => g.log_scale.z,
        7 => q[0],
        8 => q[1],
        9 => q[2],
        10 => q[3],
        11 => g.color_logit[0],
        12 => g.color_logit[1],
        13 => g.color_logit[2],
        _ => panic!("parameter index {idx} out of range"),
    }
}

/// Matching read from an analytic gradient record.
pub fn grad_component(g: &GaussianGrad, idx: usize) -> f64 {
    match idx {
        0 => g.position.x,
        1 => g.position.y,
        2 => g.position.z,
        3 => g.opacity_logit,
        4 => g.log_scale.x,
        5 => g.log_scale.y,
        6 => g.log_scale.z,
        7 => g.rotation[0],
        8 => g.rotation[1],
        9 => g.rotation[2],
        10 => g.rotation[3],
        11 => g.color_logit[0],
        12 => g.color_logit[1],
        13 => g.color_logit[2],
        _ => panic!("parameter index {idx} out of range"),
    }
}

/// Copy of the scene with raw parameter `idx` of Gaussian `gi` shifted by
/// `delta`. No renormalization or clamping happens here: the renderer itself
/// defines the function of the raw values.
pub fn perturbed(scene: &GaussianScene, gi: usize, idx: usize, delta: f64) -> GaussianScene {
    let mut out = scene.clone();
    let g = &mut out.gaussians[gi];
    let mut q = g.rotation.to_array();
    match idx {
        0 => g.position.x += delta,
        1 => g.position.y += delta,
        2 => g.position.z += delta,
        3 => g.opacity_logit += delta,
        4 => g.log_scale.x += delta,
        5 => g.log_scale.y += delta,
        6 => g.log_scale.z += delta,
        7..=10 => {
            q[idx - 7] += delta;
            g.rotation = crate::vecmath::Quat::new(q[0], q[1], q[2], q[3]);
        }
        11 => g.color_logit[0] += delta,
        12 => g.color_logit[1] += delta,
        13 => g.color_logit[2] += delta,
        _ => panic!("parameter index {idx} out of range"),
    }
    out
}

/// The scalar the backward pass differentiates: the dot product of fixed
/// per-pixel weights with the rendered outputs.
pub fn render_dot(
    scene: &GaussianScene,
    view: &View,
    cfg: &TileConfig,
    weights: &RenderGrads,
) -> f64 {
    let out = rasterize(scene, view, cfg);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.image.data, &weights.image.data)
        + dot(&out.depth.data, &weights.depth.data)
        + dot(&out.alpha.data, &weights.alpha.data)
}

/// Central finite difference of [`render_dot`] along one raw parameter.
pub fn fd_param_gradient(
    scene: &GaussianScene,
    view: &View,
    cfg: &TileConfig,
    weights: &RenderGrads,
    gi: usize,
    idx: usize,
    h: f64,
) -> f64 {
    let plus = render_dot(&perturbed(scene, gi, idx, h), view, cfg, weights);
    let minus = render_dot(&perturbed(scene, gi, idx, -h), view, cfg, weights);
    (plus - minus) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{Intrinsics, Pose};
    use crate::vecmath::{Quat, Vec3};

    fn single_splat_scene() -> (GaussianScene, View) {
        let scene = GaussianScene {
            gaussians: alloc::vec![Gaussian3D {
                position: Vec3::new(0.0, 0.0, 4.0),
                opacity_logit: 0.0,
                log_scale: Vec3::new(-1.0, -1.0, -1.0),
                rotation: Quat::IDENTITY,
                color_logit: [1.0, -1.0, 0.5],
            }],
        };
        let view = View {
            intrinsics: Intrinsics::centered(30.0, 17, 17),
            pose: Pose::new(Quat::IDENTITY, Vec3::new(0.0, 0.0, 0.0)),
            frame_idx: 0,
        };
        (scene, view)
    }

    #[test]
    fn reference_matches_isotropic_closed_form_at_center() {
        let (scene, view) = single_splat_scene();
        let cfg = TileConfig::default();
        let out = reference_render(&scene, &view, &cfg);
        // Center pixel (8, 8) has its center exactly on the optical axis,
        // where the falloff is exactly 1.
        let g = &scene.gaussians[0];
        let alpha = g.opacity();
        let a = out.alpha.data[8 * 17 + 8];
        assert!((a - alpha).abs() < 1e-12, "{a} vs {alpha}");
        let red = out.image.data[8 * 17 + 8];
        assert!((red - g.color()[0] * alpha).abs() < 1e-12);
        let d = out.depth.data[8 * 17 + 8];
        assert!((d - 4.0 * alpha).abs() < 1e-12);
    }

    #[test]
    fn perturbed_changes_exactly_one_value() {
        let (scene, _) = single_splat_scene();
        for idx in 0..PARAMS {
            let p = perturbed(&scene, 0, idx, 0.125);
            for j in 0..PARAMS {
                let base = get_param(&scene.gaussians[0], j);
                let got = get_param(&p.gaussians[0], j);
                if j == idx {
                    assert_eq!(got, base + 0.125);
                } else {
                    assert_eq!(got.to_bits(), base.to_bits());
                }
            }
        }
    }

    #[test]
    fn oracle_projection_depth_and_mean() {
        let (scene, view) = single_splat_scene();
        let s = oracle_project(&scene.gaussians[0], &view, 0.01, 0).unwrap();
        assert_eq!(s.depth, 4.0);
        assert!((s.mean2d[0] - 8.5).abs() < 1e-12);
        assert!((s.mean2d[1] - 8.5).abs() < 1e-12);
        // Isotropic world covariance on-axis: cov2d = (fx/z)^2 e^{2 ls} + lp.
        let expect = (30.0 / 4.0) * (30.0 / 4.0) * fmath::exp(-2.0) + 0.3;
        assert!((s.cov2d[0][0] - expect).abs() < 1e-10);
        assert!((s.cov2d[1][1] - expect).abs() < 1e-10);
        assert!(s.cov2d[0][1].abs() < 1e-12);
    }
}
