//! Channel-knowledge-map construction from octree-anchored Gaussian
//! primitives: model, differentiable renderer, ray-traced supervision oracle
//! and the training/evaluation machinery.

pub mod config;
pub mod dataset;
pub mod error;
pub mod forward;
pub mod gradtools;
pub mod loss;
pub mod attention;
pub mod model;
pub mod octree;
pub mod oracle;
pub mod params;
pub mod propagation;
pub mod renderer;
pub mod ssim;
pub mod state;
pub mod vec3;

pub use config::RunConfig;
pub use error::{CkmError, Result};
