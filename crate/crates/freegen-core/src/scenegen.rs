//! Procedural driving-like scenes and a ray-traced reference renderer. The
//! tracer is the trusted oracle of the whole project: it supplies ground-truth
//! images and exact per-pixel depth, so it is kept deliberately dumb —
//! Lambertian shading, one directional light, no shadows, no interior hits.

use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng as _;

use crate::camera::{Trajectory, View};
use crate::image::{ImageGray, ImageRgb};
use crate::vecmath::Vec3;
use crate::{fmath, par, rng};

/// Direction the sunlight travels (world frame, +y is down). Normalized in
/// `shade`. Chosen off-axis so box faces get distinct brightness.
const LIGHT_TRAVEL: Vec3 = Vec3 { x: 0.35, y: 0.9, z: 0.2 };
const AMBIENT: f64 = 0.25;
const SKY_COLOR: [f64; 3] = [0.55, 0.7, 0.9];

/// Hit-acceptance epsilon; rays starting on a surface don't re-hit it.
const T_MIN: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Infinite horizontal ground plane at height `y` (normal points up, -y).
    Plane { y: f64, albedo: [f64; 3] },
    /// Axis-aligned box.
    Box { center: Vec3, half: Vec3, albedo: [f64; 3] },
    /// Vertical (y-axis) cylinder without caps, spanning y_min..y_max.
    Cylinder { x: f64, z: f64, radius: f64, y_min: f64, y_max: f64, albedo: [f64; 3] },
    Sphere { center: Vec3, radius: f64, albedo: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub preset: String,
    pub primitives: Vec<Primitive>,
    pub background_color: [f64; 3],
}

/// A rendered reference view: image in [0,1], exact view-space depth in
/// meters with +inf on background pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthFrame {
    pub image: ImageRgb,
    pub depth: ImageGray,
    pub view: View,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SceneError {
    UnknownPreset(String),
}

impl fmt::Display for SceneError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SceneError::UnknownPreset(name) => write!(f, "unknown scene preset '{name}'"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SceneError {}

/// Builds a deterministic scene for (seed, preset).
///
/// Presets:
/// - `street`: ground plane, 4-12 box buildings (one of them a tall backdrop
///   wall closing off the horizon so forward-facing cameras see no sky),
///   2-6 thin cylinder poles.
/// - `corridor`: ground plane, two long walls plus an end cap, and a few box
///   obstacles between them.
/// - `open`: ground plane plus scattered spheres; the sky stays visible,
///   which makes it the preset of choice for infinite-depth handling tests.
pub fn generate_scene(seed: u64, preset: &str) -> Result<SceneSpec, SceneError> {
    let mut rng = rng::stream(seed, "scenegen");
    let mut prims = Vec::new();
    match preset {
        "street" => {
            prims.push(Primitive::Plane { y: 0.0, albedo: gray(&mut rng, 0.35, 0.5) });
            // Backdrop building: keeps the upper image filled for any
            // near-level trajectory in front of it.
            prims.push(Primitive::Box {
                center: Vec3::new(0.0, -15.0, 57.0),
                half: Vec3::new(30.0, 15.0, 2.0),
                albedo: tinted(&mut rng, [0.45, 0.5, 0.6], 0.1),
            });
            let n_boxes = rng.random_range(4..=11usize);
            for k in 0..n_boxes {
                let side = if k % 2 == 0 { -1.0 } else { 1.0 };
                let z = 3.0 + 44.0 * k as f64 / n_boxes as f64 + rng.random_range(0.0..2.0);
                let hw = rng.random_range(1.0..2.5);
                let hh = rng.random_range(1.5..5.0);
                let hd = rng.random_range(1.0..3.0);
                let x = side * rng.random_range(4.0..8.0);
                prims.push(Primitive::Box {
                    center: Vec3::new(x, -hh, z),
                    half: Vec3::new(hw, hh, hd),
                    albedo: bright(&mut rng),
                });
            }
            let n_poles = rng.random_range(2..=6usize);
            for k in 0..n_poles {
                let side = if k % 2 == 0 { 1.0 } else { -1.0 };
                prims.push(Primitive::Cylinder {
                    x: side * rng.random_range(2.5..4.0),
                    z: 2.0 + 38.0 * k as f64 / n_poles as f64 + rng.random_range(0.0..3.0),
                    radius: rng.random_range(0.06..0.15),
                    y_min: -rng.random_range(3.0..6.0),
                    y_max: 0.0,
                    albedo: gray(&mut rng, 0.15, 0.3),
                });
            }
        }
        "corridor" => {
            prims.push(Primitive::Plane { y: 0.0, albedo: gray(&mut rng, 0.4, 0.55) });
            for side in [-1.0, 1.0] {
                prims.push(Primitive::Box {
                    center: Vec3::new(side * 6.0, -5.0, 25.0),
                    half: Vec3::new(1.0, 5.0, 25.0),
                    albedo: tinted(&mut rng, [0.55, 0.45, 0.4], 0.12),
                });
            }
            prims.push(Primitive::Box {
                center: Vec3::new(0.0, -5.0, 51.0),
                half: Vec3::new(7.0, 5.0, 1.0),
                albedo: tinted(&mut rng, [0.5, 0.5, 0.45], 0.1),
            });
            let n = rng.random_range(2..=6usize);
            for k in 0..n {
                let hh = rng.random_range(0.4..1.2);
                prims.push(Primitive::Box {
                    center: Vec3::new(
                        rng.random_range(-2.5..2.5),
                        -hh,
                        4.0 + 40.0 * k as f64 / n as f64 + rng.random_range(0.0..2.0),
                    ),
                    half: Vec3::new(rng.random_range(0.3..0.9), hh, rng.random_range(0.3..0.9)),
                    albedo: bright(&mut rng),
                });
            }
        }
        "open" => {
            prims.push(Primitive::Plane { y: 0.0, albedo: gray(&mut rng, 0.35, 0.5) });
            let n = rng.random_range(5..=10usize);
            for k in 0..n {
                let r = rng.random_range(0.5..2.0);
                prims.push(Primitive::Sphere {
                    center: Vec3::new(
                        rng.random_range(-8.0..8.0),
                        -r,
                        4.0 + 30.0 * k as f64 / n as f64 + rng.random_range(0.0..2.5),
                    ),
                    radius: r,
                    albedo: bright(&mut rng),
                });
            }
        }
        other => return Err(SceneError::UnknownPreset(other.to_string())),
    }
    Ok(SceneSpec {
        seed,
        preset: preset.to_string(),
        primitives: prims,
        background_color: SKY_COLOR,
    })
}

fn gray(rng: &mut rng::Rng, lo: f64, hi: f64) -> [f64; 3] {
    let v = rng.random_range(lo..hi);
    [v, v, v]
}

fn tinted(rng: &mut rng::Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    let mut out = base;
    for v in &mut out {
        *v = (*v + rng.random_range(-spread..spread)).clamp(0.05, 0.95);
    }
    out
}

fn bright(rng: &mut rng::Rng) -> [f64; 3] {
    [
        rng.random_range(0.2..0.9),
        rng.random_range(0.2..0.9),
        rng.random_range(0.2..0.9),
    ]
}

/// Nearest-hit result: ray parameter and outward surface normal.
struct Hit {
    t: f64,
    normal: Vec3,
    albedo: [f64; 3],
}

fn intersect(prim: &Primitive, origin: Vec3, dir: Vec3) -> Option<Hit> {
    match *prim {
        Primitive::Plane { y, albedo } => {
            if dir.y.abs() < 1e-12 {
                return None;
            }
            let t = (y - origin.y) / dir.y;
            (t > T_MIN).then(|| Hit { t, normal: Vec3::new(0.0, -1.0, 0.0), albedo })
        }
        Primitive::Box { center, half, albedo } => {
            // Slab test; interior origins don't count as hits.
            let mut t_enter = f64::NEG_INFINITY;
            let mut t_exit = f64::INFINITY;
            let mut axis = 0usize;
            let o = origin - center;
            let (ov, dv, hv) = (o.to_array(), dir.to_array(), half.to_array());
            for k in 0..3 {
                if dv[k].abs() < 1e-12 {
                    if ov[k].abs() > hv[k] {
                        return None;
                    }
                    continue;
                }
                let inv = 1.0 / dv[k];
                let (mut t0, mut t1) = ((-hv[k] - ov[k]) * inv, (hv[k] - ov[k]) * inv);
                if t0 > t1 {
                    core::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_enter {
                    t_enter = t0;
                    axis = k;
                }
                t_exit = t_exit.min(t1);
            }
            if t_enter > t_exit || t_enter <= T_MIN {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -dv[axis].signum();
            Some(Hit { t: t_enter, normal: Vec3::new(n[0], n[1], n[2]), albedo })
        }
        Primitive::Cylinder { x, z, radius, y_min, y_max, albedo } => {
            let ox = origin.x - x;
            let oz = origin.z - z;
            let a = dir.x * dir.x + dir.z * dir.z;
            if a < 1e-16 {
                return None;
            }
            let b = ox * dir.x + oz * dir.z;
            let c = ox * ox + oz * oz - radius * radius;
            let disc = b * b - a * c;
            if disc < 0.0 {
                return None;
            }
            let sq = fmath::sqrt(disc);
            for t in [(-b - sq) / a, (-b + sq) / a] {
                if t > T_MIN {
                    let y = origin.y + t * dir.y;
                    if y >= y_min && y <= y_max {
                        let n = Vec3::new(ox + t * dir.x, 0.0, oz + t * dir.z) * (1.0 / radius);
                        return Some(Hit { t, normal: n, albedo });
                    }
                }
            }
            None
        }
        Primitive::Sphere { center, radius, albedo } => {
            let o = origin - center;
            let b = o.dot(dir);
            let c = o.dot(o) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = fmath::sqrt(disc);
            for t in [-b - sq, -b + sq] {
                if t > T_MIN {
                    let n = (o + dir * t) * (1.0 / radius);
                    return Some(Hit { t, normal: n, albedo });
                }
            }
            None
        }
    }
}

fn shade(hit: &Hit, dir: Vec3) -> [f64; 3] {
    let to_light = -LIGHT_TRAVEL.normalized();
    // Orient the normal toward the viewer so back faces shade sensibly.
    let n = if hit.normal.dot(dir) > 0.0 { -hit.normal } else { hit.normal };
    let diffuse = n.dot(to_light).max(0.0);
    let k = AMBIENT + (1.0 - AMBIENT) * diffuse;
    [hit.albedo[0] * k, hit.albedo[1] * k, hit.albedo[2] * k]
}

/// Renders one reference view. Depth is view-space z (not ray length), +inf
/// where the ray escapes to the background.
pub fn raytrace(scene: &SceneSpec, view: &View) -> GroundTruthFrame {
    let intr = view.intrinsics;
    let (w, h) = (intr.width as usize, intr.height as usize);
    let rot = view.pose.rotation.rotation_matrix();
    let origin = view.pose.translation;

    // Per-pixel results in (r, g, b, depth) order, scattered to planar buffers
    // afterwards so the parallel loop writes disjoint slots.
    let mut buf = vec![[0.0f64; 4]; w * h];
    par::for_each_mut(&mut buf, |i, out| {
        let (px, py) = (i % w, i / w);
        let dir_cam = Vec3::new(
            (px as f64 + 0.5 - intr.cx) / intr.fx,
            (py as f64 + 0.5 - intr.cy) / intr.fy,
            1.0,
        )
        .normalized();
        let dir = rot.mul_vec(dir_cam);
        let mut best: Option<Hit> = None;
        for prim in &scene.primitives {
            if let Some(hit) = intersect(prim, origin, dir) {
                if best.as_ref().is_none_or(|b| hit.t < b.t) {
                    best = Some(hit);
                }
            }
        }
        match best {
            Some(hit) => {
                let rgb = shade(&hit, dir);
                *out = [rgb[0], rgb[1], rgb[2], hit.t * dir_cam.z];
            }
            None => {
                let bg = scene.background_color;
                *out = [bg[0], bg[1], bg[2], f64::INFINITY];
            }
        }
    });

    let mut image = ImageRgb::zeros(w, h);
    let mut depth = ImageGray::zeros(w, h);
    for (i, px) in buf.iter().enumerate() {
        for c in 0..3 {
            image.data[c * w * h + i] = px[c];
        }
        depth.data[i] = px[3];
    }
    GroundTruthFrame { image, depth, view: *view }
}

/// One frame per view, order preserved.
pub fn render_dataset(scene: &SceneSpec, traj: &Trajectory) -> Vec<GroundTruthFrame> {
    traj.views.iter().map(|v| raytrace(scene, v)).collect()
}

/// Optional emulation of an imperfect depth estimator: adds N(0, sigma^2)
/// meters to every finite depth sample. sigma = 0 is a no-op; background
/// pixels stay infinite.
pub fn corrupt_depth(depth: &mut ImageGray, sigma_m: f64, rng: &mut rng::Rng) {
    if sigma_m == 0.0 {
        return;
    }
    for d in &mut depth.data {
        if d.is_finite() {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *d = (*d + sigma_m * n).max(0.01);
        }
    }
}
