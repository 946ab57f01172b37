//! Dynamic-scene reconstruction with a deformable anchor grid.
//!
//! The scene is a canonical set of anchors (position, feature, scaling,
//! rotation, learnable offsets). A six-plane spatio-temporal grid encoder
//! plus small MLP heads deform each anchor to a timestamp, generation
//! networks decode renderable Gaussians from the deformed anchors, and a
//! reference CPU splatting rasterizer renders them with full reverse-mode
//! gradients back to every parameter. Densification reallocates anchors
//! toward dynamic, under-reconstructed regions by weighting image-space
//! gradients with per-anchor deformation magnitude.
//!
//! Everything numerical is generic over [`scalar::Real`] (f32 or f64);
//! concrete aliases for the f32 pipeline live at the crate root.

pub mod densify;
pub mod error;
pub mod field;
pub mod gen;
pub mod loss;
pub mod math;
pub mod nn;
pub mod render;
pub mod scalar;
pub mod scene;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{real, Real};

/// f32 aliases: the concrete types the CLI pipeline runs on.
pub type Camera32 = math::Camera<f32>;

/// f64 twins, used where finite-difference accuracy matters.
pub type Camera64 = math::Camera<f64>;
