//! The Gaussian scene representation: parameters, covariance construction,
//! the pixel-unprojection initializer, and gradient application. The count is
//! fixed after initialization — there is no densify/prune pass; the
//! feed-forward setting predicts one set of Gaussians and refines it.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath::{self, logit, sigmoid};
use crate::optim::{Adam, AdamState};
use crate::scenegen::GroundTruthFrame;
use crate::vecmath::{Mat3, Quat, Vec3};

/// Scale clamp bounds (meters): exp(log_scale) stays in [1e-4, 1e3].
pub const LOG_SCALE_MIN: f64 = -9.210340371976182; // ln(1e-4)
pub const LOG_SCALE_MAX: f64 = 6.907755278982137; // ln(1e3)

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian3D {
    /// World-space center (meters).
    pub position: Vec3,
    /// Opacity stored pre-sigmoid: alpha = sigmoid(opacity_logit).
    pub opacity_logit: f64,
    /// Per-axis scale stored as log: scale_k = exp(log_scale_k).
    pub log_scale: Vec3,
    /// Orientation; unit length after every update.
    pub rotation: Quat,
    /// RGB stored pre-sigmoid.
    pub color_logit: [f64; 3],
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn color(&self) -> [f64; 3] {
        self.color_logit.map(sigmoid)
    }

    pub fn scales(&self) -> Vec3 {
        Vec3::new(
            fmath::exp(self.log_scale.x),
            fmath::exp(self.log_scale.y),
            fmath::exp(self.log_scale.z),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianScene {
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianScene {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Stable digest of every raw parameter bit; used by the co-training loop
    /// to prove a stage left the scene untouched.
    pub fn param_hash(&self) -> u64 {
        let mut h = crate::hash::Fnv1a::new();
        for g in &self.gaussians {
            h.write_f64_slice(&g.position.to_array());
            h.write_f64(g.opacity_logit);
            h.write_f64_slice(&g.log_scale.to_array());
            h.write_f64_slice(&g.rotation.to_array());
            h.write_f64_slice(&g.color_logit);
        }
        h.finish()
    }
}

/// Partials of a scalar loss w.r.t. all 14 raw parameters of one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub position: Vec3,
    pub opacity_logit: f64,
    pub log_scale: Vec3,
    pub rotation: [f64; 4],
    pub color_logit: [f64; 3],
}

impl GaussianGrad {
    pub fn add(&mut self, o: &GaussianGrad) {
        self.position += o.position;
        self.opacity_logit += o.opacity_logit;
        self.log_scale += o.log_scale;
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        for k in 0..3 {
            self.color_logit[k] += o.color_logit[k];
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.position = self.position * s;
        self.opacity_logit *= s;
        self.log_scale = self.log_scale * s;
        for k in 0..4 {
            self.rotation[k] *= s;
        }
        for k in 0..3 {
            self.color_logit[k] *= s;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGradients {
    pub per_gaussian: Vec<GaussianGrad>,
}

impl ParamGradients {
    pub fn zeros(k: usize) -> ParamGradients {
        ParamGradients { per_gaussian: vec![GaussianGrad::default(); k] }
    }

    pub fn len(&self) -> usize {
        self.per_gaussian.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_gaussian.is_empty()
    }

    /// Accumulates `o` into self (same cardinality).
    pub fn add(&mut self, o: &ParamGradients) {
        assert_eq!(self.len(), o.len());
        for (a, b) in self.per_gaussian.iter_mut().zip(&o.per_gaussian) {
            a.add(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.per_gaussian {
            g.scale(s);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GsplatError {
    /// Every sampled pixel had infinite depth; nothing to unproject.
    NoValidPixels,
    /// Gradient/state cardinality does not match the scene.
    ShapeMismatch,
}

impl fmt::Display for GsplatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GsplatError::NoValidPixels => write!(f, "no finite-depth pixels to initialize from"),
            GsplatError::ShapeMismatch => write!(f, "gradient shape does not match scene"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GsplatError {}

/// World-space covariance: Sigma = R(q) diag(exp(2 log_scale)) R(q)^T.
pub fn covariance(g: &Gaussian3D) -> Mat3 {
    let r = g.rotation.rotation_matrix();
    let s = g.scales();
    let d = Mat3::diag(Vec3::new(s.x * s.x, s.y * s.y, s.z * s.z));
    r.mul_mat(&d).mul_mat(&r.transpose())
}

/// Builds a scene by unprojecting every stride-th finite-depth pixel of every
/// frame: position at the pixel's exact depth, color the pixel color, opacity
/// 0.5, isotropic scale equal to the pixel footprint (depth * stride / fx),
/// identity rotation.
pub fn unproject_init(frames: &[GroundTruthFrame], stride: usize) -> Result<GaussianScene, GsplatError> {
    assert!(stride >= 1, "stride must be at least 1");
    let mut gaussians = Vec::new();
    for frame in frames {
        let intr = frame.view.intrinsics;
        let (w, h) = (intr.width as usize, intr.height as usize);
        for py in (0..h).step_by(stride) {
            for px in (0..w).step_by(stride) {
                let depth = frame.depth.get(px, py);
                if !depth.is_finite() {
                    continue;
                }
                let dir_cam = Vec3::new(
                    (px as f64 + 0.5 - intr.cx) / intr.fx,
                    (py as f64 + 0.5 - intr.cy) / intr.fy,
                    1.0,
                );
                let position = frame.view.pose.view_to_world(dir_cam * depth);
                let rgb = frame.image.pixel(px, py);
                let scale = depth * stride as f64 / intr.fx;
                gaussians.push(Gaussian3D {
                    position,
                    opacity_logit: 0.0,
                    log_scale: Vec3::new(1.0, 1.0, 1.0) * fmath::ln(scale).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
                    rotation: Quat::IDENTITY,
                    color_logit: rgb.map(|c| logit(c.clamp(1e-3, 1.0 - 1e-3))),
                });
            }
        }
    }
    if gaussians.is_empty() {
        return Err(GsplatError::NoValidPixels);
    }
    Ok(GaussianScene { gaussians })
}

/// Per-parameter-group learning rates.
#[derive(Clone, Copy, Debug)]
pub struct LrTable {
    pub position: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
}

impl Default for LrTable {
    fn default() -> LrTable {
        LrTable { position: 1.6e-3, opacity: 5e-2, scale: 5e-3, rotation: 1e-3, color: 2.5e-2 }
    }
}

pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// One Adam step over the whole scene. State has one slot per raw parameter
/// (14 per Gaussian, in field order). Quaternions are renormalized and log
/// scales clamped after the update; a Gaussian whose 14 deltas are all
/// exactly zero is left bit-identical.
pub fn apply_gradients(
    scene: &GaussianScene,
    grads: &ParamGradients,
    state: &mut AdamState,
    lr: &LrTable,
) -> Result<GaussianScene, GsplatError> {
    if grads.len() != scene.len() || state.len() != scene.len() * PARAMS_PER_GAUSSIAN {
        return Err(GsplatError::ShapeMismatch);
    }
    let adam = Adam::default();
    let bc = adam.begin_step(state);
    let mut out = scene.clone();
    for (gi, (g, grad)) in out.gaussians.iter_mut().zip(&grads.per_gaussian).enumerate() {
        let base = gi * PARAMS_PER_GAUSSIAN;
        let mut deltas = [0.0f64; PARAMS_PER_GAUSSIAN];
        let flat_grads = [
            grad.position.x,
            grad.position.y,
            grad.position.z,
            grad.opacity_logit,
            grad.log_scale.x,
            grad.log_scale.y,
            grad.log_scale.z,
            grad.rotation[0],
            grad.rotation[1],
            grad.rotation[2],
            grad.rotation[3],
            grad.color_logit[0],
            grad.color_logit[1],
            grad.color_logit[2],
        ];
        let lrs = [
            lr.position,
            lr.position,
            lr.position,
            lr.opacity,
            lr.scale,
            lr.scale,
            lr.scale,
            lr.rotation,
            lr.rotation,
            lr.rotation,
            lr.rotation,
            lr.color,
            lr.color,
            lr.color,
        ];
        for k in 0..PARAMS_PER_GAUSSIAN {
            deltas[k] = adam.delta(state, base + k, flat_grads[k], lrs[k], bc);
        }
        if deltas.iter().all(|d| *d == 0.0) {
            // Nothing moved: skip write-back so the parameters (including a
            // possibly-unnormalized stored quaternion) keep their exact bits.
            continue;
        }
        g.position = g.position - Vec3::new(deltas[0], deltas[1], deltas[2]);
        g.opacity_logit -= deltas[3];
        g.log_scale = Vec3::new(
            (g.log_scale.x - deltas[4]).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
            (g.log_scale.y - deltas[5]).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
            (g.log_scale.z - deltas[6]).clamp(LOG_SCALE_MIN, LOG_SCALE_MAX),
        );
        g.rotation = Quat::new(
            g.rotation.w - deltas[7],
            g.rotation.x - deltas[8],
            g.rotation.y - deltas[9],
            g.rotation.z - deltas[10],
        )
        .normalized();
        for c in 0..3 {
            g.color_logit[c] -= deltas[11 + c];
        }
    }
    Ok(out)
}

/// Renders a scene's colors without geometry — handy for tests that only care
/// about color decoding.
pub fn decode_colors(scene: &GaussianScene) -> Vec<[f64; 3]> {
    scene.gaussians.iter().map(|g| g.color()).collect()
}

/// Flattens a frame list into (sampled, finite) pixel counts; used by callers
/// that want to size things before running unproject_init.
pub fn count_finite_samples(frames: &[GroundTruthFrame], stride: usize) -> usize {
    frames
        .iter()
        .map(|f| {
            let (w, h) = (f.view.intrinsics.width as usize, f.view.intrinsics.height as usize);
            (0..h)
                .step_by(stride)
                .map(|y| (0..w).step_by(stride).filter(|&x| f.depth.get(x, y).is_finite()).count())
                .sum::<usize>()
        })
        .sum()
}
