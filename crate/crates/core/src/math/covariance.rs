use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::math::{Camera, Quaternion};
use crate::scalar::{real, Real};

/// Low-pass floor added to the diagonal of every projected 2D covariance,
/// in pixel units squared. Keeps sub-pixel splats at least ~one pixel wide
/// and guarantees invertibility.
pub const COV2D_FLOOR: f64 = 0.3;

/// Near-plane depth below which points are culled, in world units.
pub const NEAR_PLANE: f64 = 0.01;

/// Build a 3D covariance from positive scales and a unit rotation:
/// Sigma = R diag(s)² Rᵀ, symmetric PSD by construction.
pub fn covariance_from_scale_rotation<T: Real>(
    scale: &Vector3<T>,
    q: &Quaternion<T>,
) -> Result<Matrix3<T>> {
    if scale.iter().any(|s| *s <= T::zero()) {
        return Err(Error::invalid(format!(
            "scales must be positive, got ({:?}, {:?}, {:?})",
            scale.x.to_f64_lossy(),
            scale.y.to_f64_lossy(),
            scale.z.to_f64_lossy()
        )));
    }
    let r = q.rotation_matrix();
    let d = Matrix3::from_diagonal(&scale.map(|s| s * s));
    Ok(r * d * r.transpose())
}

/// Backward of [`covariance_from_scale_rotation`].
///
/// `grad_cov` is dL/dSigma with independent entries. Returns
/// (dL/dscale, dL/dq) where dL/dq is w.r.t. the unit quaternion components;
/// chain through `normalize4_backward` if the source was raw.
pub fn covariance_backward<T: Real>(
    grad_cov: &Matrix3<T>,
    scale: &Vector3<T>,
    q: &Quaternion<T>,
) -> (Vector3<T>, nalgebra::Vector4<T>) {
    let r = q.rotation_matrix();
    let d = Matrix3::from_diagonal(&scale.map(|s| s * s));
    // Sigma = R D Rᵀ:
    //   dL/dD = Rᵀ G R (diagonal part), dL/ds_j = (Rᵀ G R)_jj * 2 s_j
    //   dL/dR = (G + Gᵀ) R D
    let rt_g_r = r.transpose() * grad_cov * r;
    let two = real::<T>(2.0);
    let d_scale = Vector3::new(
        rt_g_r[(0, 0)] * two * scale.x,
        rt_g_r[(1, 1)] * two * scale.y,
        rt_g_r[(2, 2)] * two * scale.z,
    );
    let d_r = (grad_cov + grad_cov.transpose()) * r * d;
    let partials = q.rotation_matrix_partials();
    let mut d_q = nalgebra::Vector4::zeros();
    for k in 0..4 {
        d_q[k] = d_r.component_mul(&partials[k]).sum();
    }
    (d_scale, d_q)
}

/// Jacobian of the pinhole projection at a camera-space point:
///
/// J = | fx/z   0     -fx x/z² |
///     | 0      fy/z  -fy y/z² |
pub fn perspective_jacobian<T: Real>(p_cam: &Vector3<T>, fx: T, fy: T) -> Matrix2x3<T> {
    let zi = T::one() / p_cam.z;
    let zi2 = zi * zi;
    Matrix2x3::new(
        fx * zi,
        T::zero(),
        -fx * p_cam.x * zi2,
        T::zero(),
        fy * zi,
        -fy * p_cam.y * zi2,
    )
}

/// Partial derivatives of the perspective Jacobian w.r.t. the camera-space
/// point, needed to route covariance gradients back into the mean.
pub fn jacobian_partials<T: Real>(p_cam: &Vector3<T>, fx: T, fy: T) -> [Matrix2x3<T>; 3] {
    let zi = T::one() / p_cam.z;
    let zi2 = zi * zi;
    let zi3 = zi2 * zi;
    let zero = T::zero();
    let two = real::<T>(2.0);
    let d_x = Matrix2x3::new(zero, zero, -fx * zi2, zero, zero, zero);
    let d_y = Matrix2x3::new(zero, zero, zero, zero, zero, -fy * zi2);
    let d_z = Matrix2x3::new(
        -fx * zi2,
        zero,
        two * fx * p_cam.x * zi3,
        zero,
        -fy * zi2,
        two * fy * p_cam.y * zi3,
    );
    [d_x, d_y, d_z]
}

/// Project a 3D covariance into pixel space:
/// Sigma' = J W Sigma Wᵀ Jᵀ + floor·I, with J evaluated at the mean.
///
/// Errors when the mean is at or behind the near plane; the caller culls.
pub fn project_covariance<T: Real>(
    cov3: &Matrix3<T>,
    mean_world: &Vector3<T>,
    cam: &Camera<T>,
) -> Result<Matrix2<T>> {
    let p_cam = cam.world_to_camera(mean_world);
    if p_cam.z <= real(NEAR_PLANE) {
        return Err(Error::BehindCamera {
            depth: p_cam.z.to_f64_lossy(),
            near: NEAR_PLANE,
        });
    }
    let j = perspective_jacobian(&p_cam, cam.fx, cam.fy);
    let m = cam.rotation * cov3 * cam.rotation.transpose();
    let mut cov2 = j * m * j.transpose();
    let floor = real::<T>(COV2D_FLOOR);
    cov2[(0, 0)] += floor;
    cov2[(1, 1)] += floor;
    Ok(cov2)
}

/// Inverse of a symmetric 2x2; `None` when the determinant is not positive.
pub fn invert_sym2<T: Real>(m: &Matrix2<T>) -> Option<Matrix2<T>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if det <= T::zero() {
        return None;
    }
    Some(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// Unnormalized Gaussian falloff at a pixel:
/// G(x) = exp(-1/2 (x-mu)ᵀ Sigma'⁻¹ (x-mu)), in (0, 1], = 1 iff x = mu.
pub fn gaussian_density<T: Real>(x: &Vector2<T>, mean: &Vector2<T>, cov2: &Matrix2<T>) -> T {
    let inv = invert_sym2(cov2).expect("projected covariance must be invertible (floored)");
    let d = x - mean;
    let e = d.dot(&(inv * d));
    (-e * real::<T>(0.5)).exp()
}
