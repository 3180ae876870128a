//! Continuous level-of-detail Gaussian splatting.
//!
//! A scene is a set of anisotropic 3D Gaussians. Each primitive also carries a
//! learnable distance scale `sigma_d`; at render time a single scalar `s_v`
//! attenuates far primitives and culls those whose attenuated opacity falls
//! below `tau * s_v`, trading quality for primitive count continuously.

// `!(x > 0.0)` style checks are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod clod;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod ply;
pub mod project;
pub mod raster;
pub mod sh;
pub mod synth;
pub mod train;

pub use camera::{look_at, Camera, CameraSetFile, Orbit};
pub use clod::{LodMode, LodQuery};
pub use dataset::{CameraSet, View};
pub use error::{Error, Result};
pub use image::Image;
pub use model::{GaussianPrimitive, GaussianScene};
pub use raster::{render, render_backward, RenderArtifacts, RenderSummary};
