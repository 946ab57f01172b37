use nalgebra::{Matrix3, Vector2, Vector3};

use crate::scalar::{real, Real};

/// Pinhole camera with a world-to-camera rigid transform.
///
/// Camera space is x right, y down, z forward; a point is visible when its
/// camera-space z is positive. The rotation block is orthonormal to 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera<T> {
    /// World-to-camera rotation.
    pub rotation: Matrix3<T>,
    /// World-to-camera translation.
    pub translation: Vector3<T>,
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> Camera<T> {
    pub fn new(
        rotation: Matrix3<T>,
        translation: Vector3<T>,
        fx: T,
        fy: T,
        cx: T,
        cy: T,
        width: u32,
        height: u32,
    ) -> Self {
        let cam = Camera {
            rotation,
            translation,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        debug_assert!(
            cam.orthonormality_error() <= real(1e-6),
            "camera rotation is not orthonormal"
        );
        cam
    }

    /// Camera looking from `eye` toward `target`, `up` approximately up.
    pub fn look_at(
        eye: Vector3<T>,
        target: Vector3<T>,
        up: Vector3<T>,
        fx: T,
        fy: T,
        width: u32,
        height: u32,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right).normalize();
        // Rows of the world-to-camera rotation are the camera basis vectors.
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        let half = real::<T>(0.5);
        Camera::new(
            rotation,
            translation,
            fx,
            fy,
            real::<T>(width as f64) * half,
            real::<T>(height as f64) * half,
            width,
            height,
        )
    }

    /// Max absolute deviation of R Rᵀ from the identity.
    pub fn orthonormality_error(&self) -> T {
        let e = self.rotation * self.rotation.transpose() - Matrix3::identity();
        e.iter().fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Camera center in world coordinates: -Rᵀ t.
    pub fn position(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Pinhole projection of a camera-space point (caller checks z > 0).
    pub fn project_cam(&self, p_cam: &Vector3<T>) -> Vector2<T> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }
}
