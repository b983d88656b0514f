//! On-disk formats. Binary formats are little-endian with a 4-byte magic and
//! a u32 version; metadata is JSON (pretty-printed, trailing newline) so runs
//! diff cleanly. Every format here round-trips exactly except where noted
//! (images quantize to 8-bit, checkpoints to f32).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use freegen_core::camera::{Intrinsics, Pose, Trajectory, View};
use freegen_core::cotrain::{LossBreakdown, RoundReport};
use freegen_core::gsplat::Gaussian3D;
use freegen_core::hash::fnv1a_bytes;
use freegen_core::metrics::MetricReport;
use freegen_core::refiner::DenoiserParams;
use freegen_core::scenegen::{GroundTruthFrame, Primitive, SceneSpec};
use freegen_core::{GaussianScene, ImageGray, ImageRgb, Quat, Vec3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{PipelineError, Result};

/// Gamma used by the 8-bit image codec (sRGB-like single exponent).
pub const PPM_GAMMA: f64 = 2.2;

// ---------------------------------------------------------------------------
// Small binary helpers
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &'a Path) -> Reader<'a> {
        Reader { buf, pos: 0, path }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PipelineError::io(self.path, "truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let got = self.bytes(4)?;
        if got != expect {
            return Err(PipelineError::io(
                self.path,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    String::from_utf8_lossy(expect),
                    String::from_utf8_lossy(got)
                ),
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        let b = self.bytes(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(PipelineError::io(
                self.path,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn push_f32(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&(v as f32).to_le_bytes());
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PipelineError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

// ---------------------------------------------------------------------------
// PPM (P6, 8-bit, gamma-encoded)
// ---------------------------------------------------------------------------

/// Encodes a linear [0,1] image as binary PPM with gamma 1/2.2.
pub fn encode_ppm(img: &ImageRgb) -> Vec<u8> {
    let (w, h) = (img.width, img.height);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    let n = w * h;
    for i in 0..n {
        for c in 0..3 {
            let v = img.data[c * n + i].clamp(0.0, 1.0);
            out.push((v.powf(1.0 / PPM_GAMMA) * 255.0).round() as u8);
        }
    }
    out
}

/// Decodes binary PPM back to a linear image. Only the exact dialect written
/// by [`encode_ppm`] is supported: maxval 255, no comment lines.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<ImageRgb> {
    let bad = |m: &str| PipelineError::io(path, m);
    // Header: "P6" then three whitespace-separated integers.
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<&[u8]> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(PipelineError::io(path, "truncated ppm header"));
        }
        Ok(&bytes[start..*pos])
    };
    if token(&mut pos)? != b"P6" {
        return Err(bad("not a P6 ppm"));
    }
    let dim = |t: &[u8]| -> Result<usize> {
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| PipelineError::io(path, "bad ppm dimension"))
    };
    let w = dim(token(&mut pos)?)?;
    let h = dim(token(&mut pos)?)?;
    if token(&mut pos)? != b"255" {
        return Err(bad("unsupported ppm maxval"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() != pos + 3 * w * h {
        return Err(bad("ppm payload size mismatch"));
    }
    let mut img = ImageRgb::zeros(w, h);
    let n = w * h;
    for i in 0..n {
        for c in 0..3 {
            let b = bytes[pos + 3 * i + c] as f64 / 255.0;
            img.data[c * n + i] = b.powf(PPM_GAMMA);
        }
    }
    Ok(img)
}

pub fn write_ppm(path: &Path, img: &ImageRgb) -> Result<()> {
    write_file(path, &encode_ppm(img))
}

pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    decode_ppm(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// FGDP — depth maps
// ---------------------------------------------------------------------------

/// Depth map: magic "FGDP", version, width, height, then width*height f32
/// row-major meters. Valid depths are strictly positive, so 0.0 is free to
/// stand in for "no surface" (stored for +inf / non-finite samples).
pub fn encode_depth(depth: &ImageGray) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * depth.data.len());
    out.extend_from_slice(b"FGDP");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for &d in &depth.data {
        push_f32(&mut out, if d.is_finite() { d } else { 0.0 });
    }
    out
}

pub fn decode_depth(bytes: &[u8], path: &Path) -> Result<ImageGray> {
    let mut r = Reader::new(bytes, path);
    r.magic(b"FGDP")?;
    let version = r.u32()?;
    if version != 1 {
        return Err(PipelineError::io(path, format!("unsupported FGDP version {version}")));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let mut img = ImageGray::zeros(w, h);
    for d in img.data.iter_mut() {
        let v = r.f32()? as f64;
        *d = if v == 0.0 { f64::INFINITY } else { v };
    }
    r.done()?;
    Ok(img)
}

pub fn write_depth(path: &Path, depth: &ImageGray) -> Result<()> {
    write_file(path, &encode_depth(depth))
}

pub fn read_depth(path: &Path) -> Result<ImageGray> {
    decode_depth(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// FGGS — Gaussian scene checkpoints
// ---------------------------------------------------------------------------

/// Scene checkpoint: magic "FGGS", version, count, then 14 f32 per Gaussian
/// in the order position xyz, opacity logit, log-scale xyz, rotation wxyz,
/// color logits rgb.
pub fn encode_scene(scene: &GaussianScene) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 56 * scene.len());
    out.extend_from_slice(b"FGGS");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(scene.len() as u32).to_le_bytes());
    for g in &scene.gaussians {
        for v in [g.position.x, g.position.y, g.position.z, g.opacity_logit] {
            push_f32(&mut out, v);
        }
        for v in [g.log_scale.x, g.log_scale.y, g.log_scale.z] {
            push_f32(&mut out, v);
        }
        for v in g.rotation.to_array() {
            push_f32(&mut out, v);
        }
        for v in g.color_logit {
            push_f32(&mut out, v);
        }
    }
    out
}

pub fn decode_scene(bytes: &[u8], path: &Path) -> Result<GaussianScene> {
    let mut r = Reader::new(bytes, path);
    r.magic(b"FGGS")?;
    let version = r.u32()?;
    if version != 1 {
        return Err(PipelineError::io(path, format!("unsupported FGGS version {version}")));
    }
    let count = r.u32()? as usize;
    let mut gaussians = Vec::with_capacity(count);
    for _ in 0..count {
        let mut p = [0.0f64; 14];
        for v in p.iter_mut() {
            *v = r.f32()? as f64;
        }
        gaussians.push(Gaussian3D {
            position: Vec3::new(p[0], p[1], p[2]),
            opacity_logit: p[3],
            log_scale: Vec3::new(p[4], p[5], p[6]),
            rotation: Quat::new(p[7], p[8], p[9], p[10]),
            color_logit: [p[11], p[12], p[13]],
        });
    }
    r.done()?;
    Ok(GaussianScene { gaussians })
}

pub fn write_scene(path: &Path, scene: &GaussianScene) -> Result<()> {
    write_file(path, &encode_scene(scene))
}

pub fn read_scene(path: &Path) -> Result<GaussianScene> {
    decode_scene(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// FGDN — denoiser checkpoints
// ---------------------------------------------------------------------------

/// Denoiser checkpoint: magic "FGDN", version, architecture hash (u64),
/// schedule length (u32), parameter count (u32), then the flat f32
/// parameter vector. The architecture hash pins the layer layout so a
/// checkpoint can never silently load into a different network, and the
/// stored schedule length keeps sampling consistent with training.
pub fn encode_denoiser(params: &DenoiserParams, timesteps: usize) -> Vec<u8> {
    let flat = params.flatten();
    let mut out = Vec::with_capacity(24 + 4 * flat.len());
    out.extend_from_slice(b"FGDN");
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&DenoiserParams::architecture_hash().to_le_bytes());
    out.extend_from_slice(&(timesteps as u32).to_le_bytes());
    out.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    for v in flat {
        push_f32(&mut out, v);
    }
    out
}

pub fn decode_denoiser(bytes: &[u8], path: &Path) -> Result<(DenoiserParams, usize)> {
    let mut r = Reader::new(bytes, path);
    r.magic(b"FGDN")?;
    let version = r.u32()?;
    if version != 1 {
        return Err(PipelineError::io(path, format!("unsupported FGDN version {version}")));
    }
    let arch = r.u64()?;
    if arch != DenoiserParams::architecture_hash() {
        return Err(PipelineError::io(
            path,
            format!(
                "architecture hash mismatch: checkpoint {arch:016x}, this build {:016x}",
                DenoiserParams::architecture_hash()
            ),
        ));
    }
    let timesteps = r.u32()? as usize;
    if timesteps == 0 {
        return Err(PipelineError::io(path, "schedule length must be at least 1"));
    }
    let count = r.u32()? as usize;
    let mut params = DenoiserParams::zeros();
    if count != params.param_count() {
        return Err(PipelineError::io(
            path,
            format!("parameter count mismatch: checkpoint {count}, expected {}", params.param_count()),
        ));
    }
    let mut flat = Vec::with_capacity(count);
    for _ in 0..count {
        flat.push(r.f32()? as f64);
    }
    r.done()?;
    params.load_flat(&flat);
    Ok((params, timesteps))
}

pub fn write_denoiser(path: &Path, params: &DenoiserParams, timesteps: usize) -> Result<()> {
    write_file(path, &encode_denoiser(params, timesteps))
}

pub fn read_denoiser(path: &Path) -> Result<(DenoiserParams, usize)> {
    decode_denoiser(&read_file(path)?, path)
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| PipelineError::io(path, format!("serialize: {e}")))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::io(path, format!("parse: {e}")))
}

/// f64 wrapper whose JSON form survives non-finite values: +inf serializes
/// as the string "inf" (and -inf / NaN as "-inf" / "nan", though the
/// pipeline refuses to write NaN anywhere).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue(pub f64);

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_nan() {
            s.serialize_str("nan")
        } else if self.0.is_infinite() {
            s.serialize_str(if self.0 > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<MetricValue, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = MetricValue;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or \"inf\"/\"-inf\"/\"nan\"")
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue(v))
            }
            fn visit_u64<E: serde::de::Error>(self, v: u64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue(v as f64))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<MetricValue, E> {
                Ok(MetricValue(v as f64))
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<MetricValue, E> {
                match v {
                    "inf" => Ok(MetricValue(f64::INFINITY)),
                    "-inf" => Ok(MetricValue(f64::NEG_INFINITY)),
                    "nan" => Ok(MetricValue(f64::NAN)),
                    _ => Err(E::custom(format!("unknown metric string '{v}'"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

// ---------------------------------------------------------------------------
// Trajectory JSON
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewJson {
    pub frame_idx: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Unit quaternion, w x y z.
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl ViewJson {
    pub fn from_view(v: &View) -> ViewJson {
        ViewJson {
            frame_idx: v.frame_idx,
            fx: v.intrinsics.fx,
            fy: v.intrinsics.fy,
            cx: v.intrinsics.cx,
            cy: v.intrinsics.cy,
            width: v.intrinsics.width,
            height: v.intrinsics.height,
            rotation: v.pose.rotation.to_array(),
            translation: v.pose.translation.to_array(),
        }
    }

    pub fn to_view(&self) -> View {
        View {
            intrinsics: Intrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            },
            // Field-wise construction keeps the stored rotation bits; the
            // writer only ever stores unit quaternions.
            pose: Pose {
                rotation: Quat::new(
                    self.rotation[0],
                    self.rotation[1],
                    self.rotation[2],
                    self.rotation[3],
                ),
                translation: Vec3::new(
                    self.translation[0],
                    self.translation[1],
                    self.translation[2],
                ),
            },
            frame_idx: self.frame_idx,
        }
    }
}

/// The dataset's recording rig: all views camera-major, plus the rig shape
/// so downstream commands need no scenegen-time flags to interpret it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryJson {
    pub cameras: u32,
    pub frames_per_camera: u32,
    pub views: Vec<ViewJson>,
}

impl TrajectoryJson {
    pub fn from_trajectory(t: &Trajectory, cameras: u32, frames_per_camera: u32) -> TrajectoryJson {
        TrajectoryJson {
            cameras,
            frames_per_camera,
            views: t.views.iter().map(ViewJson::from_view).collect(),
        }
    }

    pub fn to_trajectory(&self) -> Trajectory {
        Trajectory { views: self.views.iter().map(ViewJson::to_view).collect() }
    }
}

// ---------------------------------------------------------------------------
// Scene description JSON
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PrimitiveJson {
    Plane { y: f64, albedo: [f64; 3] },
    Box { center: [f64; 3], half: [f64; 3], albedo: [f64; 3] },
    Cylinder { x: f64, z: f64, radius: f64, y_min: f64, y_max: f64, albedo: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64, albedo: [f64; 3] },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpecJson {
    pub seed: u64,
    pub preset: String,
    pub background_color: [f64; 3],
    pub primitives: Vec<PrimitiveJson>,
}

impl SceneSpecJson {
    pub fn from_spec(s: &SceneSpec) -> SceneSpecJson {
        let primitives = s
            .primitives
            .iter()
            .map(|p| match *p {
                Primitive::Plane { y, albedo } => PrimitiveJson::Plane { y, albedo },
                Primitive::Box { center, half, albedo } => PrimitiveJson::Box {
                    center: center.to_array(),
                    half: half.to_array(),
                    albedo,
                },
                Primitive::Cylinder { x, z, radius, y_min, y_max, albedo } => {
                    PrimitiveJson::Cylinder { x, z, radius, y_min, y_max, albedo }
                }
                Primitive::Sphere { center, radius, albedo } => {
                    PrimitiveJson::Sphere { center: center.to_array(), radius, albedo }
                }
            })
            .collect();
        SceneSpecJson {
            seed: s.seed,
            preset: s.preset.clone(),
            background_color: s.background_color,
            primitives,
        }
    }

    pub fn to_spec(&self) -> SceneSpec {
        let v3 = |a: [f64; 3]| Vec3::new(a[0], a[1], a[2]);
        let primitives = self
            .primitives
            .iter()
            .map(|p| match *p {
                PrimitiveJson::Plane { y, albedo } => Primitive::Plane { y, albedo },
                PrimitiveJson::Box { center, half, albedo } => {
                    Primitive::Box { center: v3(center), half: v3(half), albedo }
                }
                PrimitiveJson::Cylinder { x, z, radius, y_min, y_max, albedo } => {
                    Primitive::Cylinder { x, z, radius, y_min, y_max, albedo }
                }
                PrimitiveJson::Sphere { center, radius, albedo } => {
                    Primitive::Sphere { center: v3(center), radius, albedo }
                }
            })
            .collect();
        SceneSpec {
            seed: self.seed,
            preset: self.preset.clone(),
            primitives,
            background_color: self.background_color,
        }
    }
}

// ---------------------------------------------------------------------------
// Metric reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMetricsJson {
    pub idx: u32,
    pub psnr: MetricValue,
    pub ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeanMetricsJson {
    pub psnr: MetricValue,
    pub ssim: f64,
}

/// One per-shift evaluation summary. `fid`/`fvd` are reserved for external
/// tools that can compute them; this pipeline always writes null.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReportJson {
    pub shift_m: f64,
    pub frames: Vec<FrameMetricsJson>,
    pub mean: MeanMetricsJson,
    pub median: MeanMetricsJson,
    pub depth_mae: Option<f64>,
    pub fid: Option<f64>,
    pub fvd: Option<f64>,
}

impl MetricReportJson {
    pub fn from_report(r: &MetricReport) -> MetricReportJson {
        MetricReportJson {
            shift_m: r.shift_m,
            frames: r
                .frames
                .iter()
                .map(|f| FrameMetricsJson {
                    idx: f.frame_idx,
                    psnr: MetricValue(f.psnr),
                    ssim: f.ssim,
                })
                .collect(),
            mean: MeanMetricsJson { psnr: MetricValue(r.mean_psnr), ssim: r.mean_ssim },
            median: MeanMetricsJson { psnr: MetricValue(r.median_psnr), ssim: r.median_ssim },
            depth_mae: r.depth_mae,
            fid: None,
            fvd: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Loss curves and round reports
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCurvePoint {
    pub step: usize,
    pub mse: f64,
    pub perceptual: f64,
    pub depth_l1: f64,
    pub total: f64,
}

impl FitCurvePoint {
    pub fn new(step: usize, b: &LossBreakdown) -> FitCurvePoint {
        FitCurvePoint {
            step,
            mse: b.mse,
            perceptual: b.perceptual,
            depth_l1: b.depth_l1,
            total: b.total,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCurveJson {
    pub points: Vec<FitCurvePoint>,
    /// Mean PSNR over the training views right after initialization.
    pub train_psnr_init: MetricValue,
    /// Mean PSNR over the training views after the last step.
    pub train_psnr_final: MetricValue,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineCurvePoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineCurveJson {
    pub points: Vec<RefineCurvePoint>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossBreakdownJson {
    pub mse: f64,
    pub perceptual: f64,
    pub depth: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundReportJson {
    pub round: usize,
    pub psnr_0m: MetricValue,
    pub psnr_1m: MetricValue,
    pub psnr_2m: MetricValue,
    pub recon_loss: LossBreakdownJson,
    pub gen_loss: f64,
}

impl RoundReportJson {
    pub fn from_report(r: &RoundReport) -> RoundReportJson {
        RoundReportJson {
            round: r.round,
            psnr_0m: MetricValue(r.psnr_0m),
            psnr_1m: MetricValue(r.psnr_1m),
            psnr_2m: MetricValue(r.psnr_2m),
            recon_loss: LossBreakdownJson {
                mse: r.recon_loss.mse,
                perceptual: r.recon_loss.perceptual,
                depth: r.recon_loss.depth_l1,
                total: r.recon_loss.total,
            },
            gen_loss: r.gen_loss,
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        let line = serde_json::to_string(row)
            .map_err(|e| PipelineError::io(path, format!("serialize: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| PipelineError::io(path, format!("not utf-8: {e}")))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| PipelineError::io(path, format!("parse: {e}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    /// Path relative to the workdir, forward slashes.
    pub path: String,
    /// FNV-1a 64 of the file bytes, zero-padded hex.
    pub fnv64: String,
}

/// Every command writes a manifest naming its outputs with content hashes
/// and the seeds it derived from the global seed, so a rerun can be checked
/// byte-for-byte and downstream commands can verify their inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub files: Vec<FileEntry>,
}

pub fn hash_bytes_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a_bytes(bytes))
}

pub fn hash_file_hex(root: &Path, rel: &str) -> Result<String> {
    Ok(hash_bytes_hex(&read_file(&root.join(rel))?))
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Manifest {
        Manifest {
            command: command.to_string(),
            seed,
            derived_seeds: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn record_file(&mut self, root: &Path, rel: &str) -> Result<()> {
        let fnv64 = hash_file_hex(root, rel)?;
        self.files.push(FileEntry { path: rel.to_string(), fnv64 });
        Ok(())
    }

    /// Recomputes every recorded hash; the first mismatch fails with the
    /// offending path and both hashes in the message.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for entry in &self.files {
            let actual = hash_file_hex(root, &entry.path)?;
            if actual != entry.fnv64 {
                return Err(PipelineError::Io(format!(
                    "integrity check failed for '{}': manifest records fnv64 {}, file hashes {}",
                    entry.path, entry.fnv64, actual
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ground-truth frames (image + depth pair)
// ---------------------------------------------------------------------------

pub fn frame_basenames(idx: usize) -> (String, String) {
    (format!("frame_{idx:04}.ppm"), format!("frame_{idx:04}.fgdp"))
}

pub fn write_frame(dir: &Path, idx: usize, frame: &GroundTruthFrame) -> Result<()> {
    let (img, dep) = frame_basenames(idx);
    write_ppm(&dir.join(img), &frame.image)?;
    write_depth(&dir.join(dep), &frame.depth)
}

pub fn read_frame(dir: &Path, idx: usize, view: View) -> Result<GroundTruthFrame> {
    let (img, dep) = frame_basenames(idx);
    let image = read_ppm(&dir.join(img))?;
    let depth = read_depth(&dir.join(dep))?;
    if image.width != view.intrinsics.width as usize
        || image.height != view.intrinsics.height as usize
        || depth.width != image.width
        || depth.height != image.height
    {
        return Err(PipelineError::Io(format!(
            "frame {idx}: image/depth dimensions disagree with the trajectory"
        )));
    }
    Ok(GroundTruthFrame { image, depth, view })
}
