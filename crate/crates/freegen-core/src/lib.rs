//! Feed-forward Gaussian scene construction, differentiable splatting, a
//! small convolutional diffusion refiner, and the closed-loop co-training
//! procedure that couples the two. Everything numeric lives here; file
//! formats and the CLI live in the companion `freegen` crate.
//!
//! The crate is `no_std`-compatible (alloc required). All internal math is
//! f64; narrower types appear only at serialization boundaries upstream.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod camera;
pub mod cotrain;
mod fmath;
mod par;
pub mod gsplat;
pub mod hash;
pub mod image;
pub mod metrics;
pub mod optim;
#[cfg(feature = "oracles")]
pub mod oracles;
pub mod rasterizer;
pub mod refiner;
pub mod rng;
pub mod scenegen;

mod vecmath;

pub use camera::{Intrinsics, Pose, Trajectory, View};
pub use gsplat::{Gaussian3D, GaussianScene, ParamGradients};
pub use image::{ImageGray, ImageRgb};
pub use rasterizer::{RenderOutput, TileConfig};
pub use vecmath::{Mat3, Quat, Sym2, Vec3};
