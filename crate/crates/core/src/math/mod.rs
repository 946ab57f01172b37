//! Deterministic geometric primitives: quaternions, covariance construction,
//! the pinhole camera model and the screen-space projection of 3D Gaussians.

mod camera;
mod covariance;
mod quaternion;

pub use camera::Camera;
pub use covariance::{
    covariance_backward, covariance_from_scale_rotation, gaussian_density, invert_sym2,
    jacobian_partials, perspective_jacobian, project_covariance, COV2D_FLOOR, NEAR_PLANE,
};
pub use quaternion::{normalize4, normalize4_backward, quaternion_angle, Quaternion};
