//! Single-view textured human reconstruction with 3D Gaussian splatting.
//!
//! One front RGB image plus its Plücker ray map is turned into per-pixel
//! Gaussians by a U-Net. Four orthogonal normal maps rendered from a body
//! prior mesh steer those Gaussians (normal-map guidance), and an auxiliary
//! head predicts direction-feature Gaussians that are supervised against the
//! non-front prior normal maps (normal-map constraint).
//!
//! Everything runs on the CPU: a small reverse-mode autodiff engine
//! ([`autodiff`]), a differentiable tile rasterizer ([`render`]), a z-buffer
//! mesh rasterizer and procedural humanoids ([`mesh`]), the network
//! ([`net`]), the loss stack and AdamW ([`loss`], [`optim`]), mesh metrics
//! ([`metrics`]) and the end-to-end commands ([`pipeline`]).

pub mod autodiff;
pub mod camera;
pub mod error;
pub mod gaussian;
pub mod geom;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod render;

pub use error::{Error, Result};
