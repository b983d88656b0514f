//! Run configuration: defaults, TOML file, environment, and flag overrides.
//! Precedence (lowest to highest): built-in defaults, `FREEGEN_WORKDIR`
//! environment variable (workdir only), config file, command-line flags.

use std::path::{Path, PathBuf};

use freegen_core::cotrain::CoTrainConfig;
use freegen_core::rasterizer::TileConfig;
use freegen_core::rng;
use serde::Deserialize;

use crate::{PipelineError, Result};

pub const ENV_WORKDIR: &str = "FREEGEN_WORKDIR";
pub const KNOWN_PRESETS: [&str; 3] = ["street", "corridor", "open"];

#[derive(Clone, Debug, PartialEq)]
pub struct FitSection {
    /// Optimization steps after unprojection initialization.
    pub steps: usize,
    /// Pixel stride of the unprojection initializer.
    pub init_stride: usize,
    /// Structural-similarity loss weight.
    pub lambda1: f64,
    /// Depth L1 loss weight.
    pub lambda2: f64,
}

impl Default for FitSection {
    fn default() -> FitSection {
        FitSection { steps: 1000, init_stride: 2, lambda1: 0.05, lambda2: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerSection {
    pub train_steps: usize,
    /// Diffusion schedule length.
    pub timesteps: usize,
    /// Sampling steps used when refining images.
    pub sample_steps: usize,
    /// Training minibatch size.
    pub batch: usize,
    pub lr: f64,
    /// The degraded side of each training pair comes from scenes fit for
    /// this many steps (0 = raw unprojection), one pass over the dataset per
    /// entry.
    pub degrade_fit_steps: Vec<usize>,
}

impl Default for RefinerSection {
    fn default() -> RefinerSection {
        RefinerSection {
            train_steps: 500,
            timesteps: 200,
            sample_steps: 10,
            batch: 4,
            lr: 1e-3,
            degrade_fit_steps: vec![0, 50, 200],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CotrainSection {
    pub rounds: usize,
    pub viewpoints_per_round: usize,
    pub lateral_range_m: f64,
    pub yaw_jitter_deg: f64,
    pub recon_steps_per_round: usize,
    pub gen_steps_per_round: usize,
    pub refine_sample_steps: usize,
    pub gen_batch: usize,
    pub use_oracle_depth: bool,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for CotrainSection {
    fn default() -> CotrainSection {
        let d = CoTrainConfig::default();
        CotrainSection {
            rounds: d.rounds,
            viewpoints_per_round: d.step1_viewpoints_per_round,
            lateral_range_m: d.lateral_range,
            yaw_jitter_deg: d.yaw_jitter_deg,
            recon_steps_per_round: d.recon_steps_per_round,
            gen_steps_per_round: d.gen_steps_per_round,
            refine_sample_steps: d.refine_sample_steps,
            gen_batch: d.gen_batch,
            use_oracle_depth: d.use_oracle_depth,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    /// Lateral shift magnitudes in meters; each nonzero value is evaluated
    /// at both signs, zero only once.
    pub shifts: Vec<f64>,
    /// Evaluate every `stride`-th frame of the base trajectory.
    pub stride: usize,
    pub refine_sample_steps: usize,
}

impl Default for EvalSection {
    fn default() -> EvalSection {
        EvalSection { shifts: vec![1.0, 2.0, 4.0], stride: 2, refine_sample_steps: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Root of all inputs and outputs for this run. Must be set via flag,
    /// config key, or the environment variable.
    pub workdir: PathBuf,
    pub preset: String,
    /// Global seed; each stage derives its own stream from it.
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    /// Cameras in the recording rig, laterally spaced by `rig_spacing_m`.
    pub cameras: u32,
    pub rig_spacing_m: f64,
    /// Frames per camera.
    pub video_length: u32,
    pub tile_size: usize,
    pub fit: FitSection,
    pub refiner: RefinerSection,
    pub cotrain: CotrainSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            workdir: PathBuf::new(),
            preset: "street".to_string(),
            seed: 0,
            width: 64,
            height: 64,
            cameras: 1,
            rig_spacing_m: 0.4,
            video_length: 6,
            tile_size: 16,
            fit: FitSection::default(),
            refiner: RefinerSection::default(),
            cotrain: CotrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    /// Defaults, with the workdir taken from the environment when present.
    pub fn from_env() -> RunConfig {
        let mut cfg = RunConfig::default();
        if let Ok(dir) = std::env::var(ENV_WORKDIR) {
            if !dir.is_empty() {
                cfg.workdir = PathBuf::from(dir);
            }
        }
        cfg
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let partial: PartialConfig = toml::from_str(&text)
            .map_err(|e| PipelineError::BadArgs(format!("{}: {e}", path.display())))?;
        partial.apply_to(self);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::BadArgs(m));
        if self.workdir.as_os_str().is_empty() {
            return bad(format!(
                "no workdir set; pass --workdir, a config file key, or {ENV_WORKDIR}"
            ));
        }
        if !KNOWN_PRESETS.contains(&self.preset.as_str()) {
            return bad(format!(
                "unknown preset '{}' (known: {})",
                self.preset,
                KNOWN_PRESETS.join(", ")
            ));
        }
        if ![8usize, 16, 32].contains(&self.tile_size) {
            return bad(format!("tile_size must be 8, 16, or 32, got {}", self.tile_size));
        }
        if self.width == 0 || self.height == 0 {
            return bad("resolution must be positive".to_string());
        }
        if self.width as usize % self.tile_size != 0 || self.height as usize % self.tile_size != 0
        {
            return bad(format!(
                "resolution {}x{} must be a multiple of tile_size {}",
                self.width, self.height, self.tile_size
            ));
        }
        if self.cameras == 0 || self.video_length == 0 {
            return bad("cameras and video_length must be at least 1".to_string());
        }
        if self.fit.init_stride == 0 {
            return bad("fit.init_stride must be at least 1".to_string());
        }
        for (name, v) in [
            ("fit.lambda1", self.fit.lambda1),
            ("fit.lambda2", self.fit.lambda2),
            ("cotrain.lambda1", self.cotrain.lambda1),
            ("cotrain.lambda2", self.cotrain.lambda2),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.refiner.timesteps == 0
            || self.refiner.sample_steps == 0
            || self.refiner.batch == 0
        {
            return bad("refiner timesteps/sample_steps/batch must be at least 1".to_string());
        }
        if !(self.refiner.lr.is_finite() && self.refiner.lr > 0.0) {
            return bad(format!("refiner.lr must be finite and positive, got {}", self.refiner.lr));
        }
        if self.refiner.degrade_fit_steps.is_empty() {
            return bad("refiner.degrade_fit_steps must list at least one entry".to_string());
        }
        if self.cotrain.refine_sample_steps == 0 || self.cotrain.gen_batch == 0 {
            return bad("cotrain refine_sample_steps/gen_batch must be at least 1".to_string());
        }
        if self.eval.stride == 0 || self.eval.refine_sample_steps == 0 {
            return bad("eval stride/refine_sample_steps must be at least 1".to_string());
        }
        if self.eval.shifts.is_empty() {
            return bad("eval.shifts must list at least one magnitude".to_string());
        }
        for &s in &self.eval.shifts {
            if !s.is_finite() || s < 0.0 {
                return bad(format!("eval shift magnitudes must be finite and >= 0, got {s}"));
            }
        }
        if !(self.rig_spacing_m.is_finite() && self.rig_spacing_m >= 0.0) {
            return bad(format!("rig_spacing_m must be finite and >= 0, got {}", self.rig_spacing_m));
        }
        Ok(())
    }

    pub fn tile_config(&self) -> TileConfig {
        TileConfig { tile_size: self.tile_size, ..TileConfig::default() }
    }

    /// Co-training parameters with the stage seed already derived from the
    /// global one.
    pub fn cotrain_config(&self) -> CoTrainConfig {
        CoTrainConfig {
            rounds: self.cotrain.rounds,
            step1_viewpoints_per_round: self.cotrain.viewpoints_per_round,
            lateral_range: self.cotrain.lateral_range_m,
            yaw_jitter_deg: self.cotrain.yaw_jitter_deg,
            lambda1: self.cotrain.lambda1,
            lambda2: self.cotrain.lambda2,
            recon_steps_per_round: self.cotrain.recon_steps_per_round,
            gen_steps_per_round: self.cotrain.gen_steps_per_round,
            refine_sample_steps: self.cotrain.refine_sample_steps,
            gen_batch: self.cotrain.gen_batch,
            use_oracle_depth: self.cotrain.use_oracle_depth,
            seed: rng::derive_seed(self.seed, "cotrain"),
        }
    }

    /// The signed shift list evaluated by `eval`: each nonzero magnitude at
    /// both signs (negative first), zero once.
    pub fn signed_shifts(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for &m in &self.eval.shifts {
            if m == 0.0 {
                out.push(0.0);
            } else {
                out.push(-m);
                out.push(m);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// TOML layer: every key optional, unknown keys rejected.
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialFit {
    steps: Option<usize>,
    init_stride: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialRefiner {
    train_steps: Option<usize>,
    timesteps: Option<usize>,
    sample_steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    degrade_fit_steps: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialCotrain {
    rounds: Option<usize>,
    viewpoints_per_round: Option<usize>,
    lateral_range_m: Option<f64>,
    yaw_jitter_deg: Option<f64>,
    recon_steps_per_round: Option<usize>,
    gen_steps_per_round: Option<usize>,
    refine_sample_steps: Option<usize>,
    gen_batch: Option<usize>,
    use_oracle_depth: Option<bool>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialEval {
    shifts: Option<Vec<f64>>,
    stride: Option<usize>,
    refine_sample_steps: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialConfig {
    workdir: Option<String>,
    preset: Option<String>,
    seed: Option<u64>,
    width: Option<u32>,
    height: Option<u32>,
    cameras: Option<u32>,
    rig_spacing_m: Option<f64>,
    video_length: Option<u32>,
    tile_size: Option<usize>,
    fit: Option<PartialFit>,
    refiner: Option<PartialRefiner>,
    cotrain: Option<PartialCotrain>,
    eval: Option<PartialEval>,
}

fn set<T>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

impl PartialConfig {
    fn apply_to(self, cfg: &mut RunConfig) {
        if let Some(w) = self.workdir {
            cfg.workdir = PathBuf::from(w);
        }
        set(&mut cfg.preset, self.preset);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.width, self.width);
        set(&mut cfg.height, self.height);
        set(&mut cfg.cameras, self.cameras);
        set(&mut cfg.rig_spacing_m, self.rig_spacing_m);
        set(&mut cfg.video_length, self.video_length);
        set(&mut cfg.tile_size, self.tile_size);
        if let Some(f) = self.fit {
            set(&mut cfg.fit.steps, f.steps);
            set(&mut cfg.fit.init_stride, f.init_stride);
            set(&mut cfg.fit.lambda1, f.lambda1);
            set(&mut cfg.fit.lambda2, f.lambda2);
        }
        if let Some(r) = self.refiner {
            set(&mut cfg.refiner.train_steps, r.train_steps);
            set(&mut cfg.refiner.timesteps, r.timesteps);
            set(&mut cfg.refiner.sample_steps, r.sample_steps);
            set(&mut cfg.refiner.batch, r.batch);
            set(&mut cfg.refiner.lr, r.lr);
            set(&mut cfg.refiner.degrade_fit_steps, r.degrade_fit_steps);
        }
        if let Some(c) = self.cotrain {
            set(&mut cfg.cotrain.rounds, c.rounds);
            set(&mut cfg.cotrain.viewpoints_per_round, c.viewpoints_per_round);
            set(&mut cfg.cotrain.lateral_range_m, c.lateral_range_m);
            set(&mut cfg.cotrain.yaw_jitter_deg, c.yaw_jitter_deg);
            set(&mut cfg.cotrain.recon_steps_per_round, c.recon_steps_per_round);
            set(&mut cfg.cotrain.gen_steps_per_round, c.gen_steps_per_round);
            set(&mut cfg.cotrain.refine_sample_steps, c.refine_sample_steps);
            set(&mut cfg.cotrain.gen_batch, c.gen_batch);
            set(&mut cfg.cotrain.use_oracle_depth, c.use_oracle_depth);
            set(&mut cfg.cotrain.lambda1, c.lambda1);
            set(&mut cfg.cotrain.lambda2, c.lambda2);
        }
        if let Some(e) = self.eval {
            set(&mut cfg.eval.shifts, e.shifts);
            set(&mut cfg.eval.stride, e.stride);
            set(&mut cfg.eval.refine_sample_steps, e.refine_sample_steps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_once_workdir_is_set() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_err(), "workdir must be required");
        cfg.workdir = PathBuf::from("/tmp/x");
        cfg.validate().unwrap();
    }

    #[test]
    fn file_overrides_defaults_and_flags_would_override_file() {
        let dir = std::env::temp_dir().join("freegen-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(
            &path,
            "workdir = \"/tmp/run\"\nseed = 9\n[fit]\nsteps = 77\n[eval]\nshifts = [2.0]\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.workdir, PathBuf::from("/tmp/run"));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.fit.steps, 77);
        assert_eq!(cfg.eval.shifts, vec![2.0]);
        // untouched keys keep defaults
        assert_eq!(cfg.video_length, 6);
        assert_eq!(cfg.fit.lambda1, 0.05);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_keys_are_bad_args() {
        let dir = std::env::temp_dir().join("freegen-config-test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        std::fs::write(&path, "wrokdir = \"/tmp/run\"\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn validation_rejects_offgrid_resolution_and_bad_preset() {
        let mut cfg = RunConfig::default();
        cfg.workdir = PathBuf::from("/tmp/x");
        cfg.width = 60;
        assert!(matches!(cfg.validate(), Err(PipelineError::BadArgs(_))));
        cfg.width = 64;
        cfg.preset = "moon".to_string();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("moon"));
    }

    #[test]
    fn signed_shifts_expand_magnitudes() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.signed_shifts(), vec![-1.0, 1.0, -2.0, 2.0, -4.0, 4.0]);
        cfg.eval.shifts = vec![0.0];
        assert_eq!(cfg.signed_shifts(), vec![0.0]);
    }
}
