use nalgebra::{Matrix3, Vector3, Vector4};

use crate::scalar::{real, Real};

/// Unit quaternion, stored in (w, x, y, z) order.
///
/// Every constructor normalizes, so a stored value always satisfies
/// |norm - 1| <= 1e-6. Conversions below are written against this component
/// order; q and -q map to the same rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quaternion<T> {
    pub fn identity() -> Self {
        Quaternion {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    /// Construct from components, normalizing. Panics on a near-zero norm.
    pub fn new(w: T, x: T, y: T, z: T) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        assert!(
            n > real(1e-12),
            "cannot normalize a near-zero quaternion"
        );
        Quaternion {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<T>, angle: T) -> Self {
        let half = angle * real(0.5);
        let (s, c) = (half.sin(), half.cos());
        let a = axis.normalize();
        Quaternion::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(&self, other: &Self) -> T {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn components(&self) -> Vector4<T> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    /// Rotation matrix of a unit quaternion (w, x, y, z):
    ///
    /// R = | 1-2(y²+z²)   2(xy-wz)    2(xz+wy)  |
    ///     | 2(xy+wz)     1-2(x²+z²)  2(yz-wx)  |
    ///     | 2(xz-wy)     2(yz+wx)    1-2(x²+y²)|
    pub fn rotation_matrix(&self) -> Matrix3<T> {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let two = real::<T>(2.0);
        Matrix3::new(
            T::one() - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
            two * (x * y + w * z),
            T::one() - two * (x * x + z * z),
            two * (y * z - w * x),
            two * (x * z - w * y),
            two * (y * z + w * x),
            T::one() - two * (x * x + y * y),
        )
    }

    /// Partial derivatives of the rotation matrix w.r.t. each component,
    /// treating (w, x, y, z) as free parameters. Callers chain these through
    /// [`normalize4_backward`] when the source was a raw 4-vector.
    pub fn rotation_matrix_partials(&self) -> [Matrix3<T>; 4] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let two = real::<T>(2.0);
        let zero = T::zero();
        let dw = Matrix3::new(zero, -z, y, z, zero, -x, -y, x, zero) * two;
        let dx = Matrix3::new(
            zero,
            y,
            z,
            y,
            -two * x,
            -w,
            z,
            w,
            -two * x,
        ) * two;
        let dy = Matrix3::new(
            -two * y,
            x,
            w,
            x,
            zero,
            z,
            -w,
            z,
            -two * y,
        ) * two;
        let dz = Matrix3::new(
            -two * z,
            -w,
            x,
            w,
            -two * z,
            y,
            x,
            y,
            zero,
        ) * two;
        [dw, dx, dy, dz]
    }
}

impl<T: Real> std::ops::Neg for Quaternion<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Quaternion {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// Rotation angle between two unit quaternions:
/// 2 * arccos(clip(|<a, b>|, 0, 1)), in [0, pi].
///
/// The absolute value collapses the double cover and the clip absorbs
/// floating-point drift.
pub fn quaternion_angle<T: Real>(a: &Quaternion<T>, b: &Quaternion<T>) -> T {
    let d = a.dot(b).abs().clamp(T::zero(), T::one());
    real::<T>(2.0) * d.acos()
}

/// Normalize a raw 4-vector (w, x, y, z layout) into a unit quaternion;
/// returns the norm too.
pub fn normalize4<T: Real>(raw: &Vector4<T>) -> (Quaternion<T>, T) {
    let n = raw.norm();
    assert!(n > real(1e-12), "cannot normalize a near-zero quaternion");
    (
        Quaternion {
            w: raw[0] / n,
            x: raw[1] / n,
            y: raw[2] / n,
            z: raw[3] / n,
        },
        n,
    )
}

/// Backward of [`normalize4`]: given dL/d(unit) return dL/d(raw).
///
/// u = r / |r|  =>  du/dr = (I - u uᵀ) / |r|.
pub fn normalize4_backward<T: Real>(
    unit: &Quaternion<T>,
    norm: T,
    grad_unit: &Vector4<T>,
) -> Vector4<T> {
    let u = unit.components();
    (grad_unit - u * u.dot(grad_unit)) / norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;

    #[test]
    fn identity_rotation_is_identity_matrix() {
        let q = Quaternion::<f64>::identity();
        assert_relative_eq!(q.rotation_matrix(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn construction_normalizes() {
        let q = Quaternion::new(2.0f64, 0.0, 0.0, 0.0);
        assert!((q.norm() - 1.0).abs() <= 1e-6);
        let q = Quaternion::new(1.0f64, 2.0, 3.0, 4.0);
        assert!((q.norm() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn double_cover_same_matrix() {
        let q = Quaternion::new(0.3f64, -0.4, 0.5, 0.7);
        assert_relative_eq!(
            q.rotation_matrix(),
            (-q).rotation_matrix(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn angle_identical_is_zero() {
        let q = Quaternion::new(0.3f64, -0.4, 0.5, 0.7);
        assert!(quaternion_angle(&q, &q) < 1e-7);
        assert!(quaternion_angle(&q, &-q) < 1e-7);
    }

    #[test]
    fn angle_quarter_turn() {
        // identity vs 90 deg about z: dot = sqrt(2)/2, 2*acos -> pi/2.
        let a = Quaternion::<f64>::identity();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let b = Quaternion::new(h, 0.0, 0.0, h);
        assert!((quaternion_angle(&a, &b) - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn angle_symmetric_and_bounded() {
        let a = Quaternion::new(0.9f64, 0.1, -0.2, 0.3);
        let b = Quaternion::new(-0.2f64, 0.8, 0.4, -0.1);
        assert_relative_eq!(quaternion_angle(&a, &b), quaternion_angle(&b, &a));
        let ang = quaternion_angle(&a, &b);
        assert!((0.0..=std::f64::consts::PI).contains(&ang));
    }

    #[test]
    fn axis_angle_matches_matrix() {
        let q = Quaternion::from_axis_angle(&Vector3::new(0.0f64, 0.0, 1.0), 0.5);
        let r = q.rotation_matrix();
        assert_relative_eq!(r[(0, 0)], 0.5f64.cos(), epsilon = 1e-12);
        assert_relative_eq!(r[(1, 0)], 0.5f64.sin(), epsilon = 1e-12);
    }

    #[test]
    fn rotation_partials_match_finite_differences() {
        let q = Quaternion::new(0.5f64, -0.3, 0.6, 0.2);
        let parts = q.rotation_matrix_partials();
        let h = 1e-6;
        let comps = [q.w, q.x, q.y, q.z];
        for k in 0..4 {
            let mut plus = comps;
            plus[k] += h;
            let mut minus = comps;
            minus[k] -= h;
            // Evaluate the (unnormalized) matrix formula at perturbed components.
            let rp = Quaternion {
                w: plus[0],
                x: plus[1],
                y: plus[2],
                z: plus[3],
            }
            .rotation_matrix();
            let rm = Quaternion {
                w: minus[0],
                x: minus[1],
                y: minus[2],
                z: minus[3],
            }
            .rotation_matrix();
            let fd = (rp - rm) / (2.0 * h);
            assert_relative_eq!(parts[k], fd, epsilon = 1e-6);
        }
    }

    #[test]
    fn normalize4_backward_matches_finite_differences() {
        let raw = Vector4::new(0.7f64, -0.2, 0.4, 1.1);
        let (unit, norm) = normalize4(&raw);
        // L = <g, u> for a fixed g.
        let g = Vector4::new(0.3, -1.2, 0.5, 0.9);
        let grad = normalize4_backward(&unit, norm, &g);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = raw;
            p[k] += h;
            let mut m = raw;
            m[k] -= h;
            let lp = g.dot(&(p / p.norm()));
            let lm = g.dot(&(m / m.norm()));
            let fd = (lp - lm) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-8);
        }
    }
}
