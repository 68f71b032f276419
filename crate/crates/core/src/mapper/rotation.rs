//! Axis-angle, quaternion and intrinsic x-y-z Euler conversions.
//!
//! Intrinsic x-y-z means `R = Rx(a) * Ry(b) * Rz(c)`.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Quaternion<T> {
    pub fn identity() -> Self {
        Self {
            w: T::one(),
            x: T::zero(),
            y: T::zero(),
            z: T::zero(),
        }
    }

    pub fn norm(&self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Hamilton product `self * rhs`; as rotations, `rhs` is applied first.
    pub fn mul(&self, rhs: &Self) -> Self {
        Self {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            z: self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        }
    }

    /// Rotation matrix of a unit quaternion.
    pub fn to_matrix(&self) -> [[T; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        let two = T::lit(2.0);
        [
            [
                one - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                one - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                one - two * (x * x + y * y),
            ],
        ]
    }
}

/// `q = (cos(θ/2), sin(θ/2) * aa/θ)` with `θ = |aa|`; the identity below `θ = 1e-12`.
/// The scalar part is kept non-negative.
pub fn axis_angle_to_quaternion<T: Real>(aa: [T; 3]) -> Result<Quaternion<T>> {
    if aa.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite axis-angle {aa:?}")));
    }
    let theta = (aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2]).sqrt();
    if theta < T::lit(1e-12) {
        return Ok(Quaternion::identity());
    }
    let half = theta / T::lit(2.0);
    let s = half.sin() / theta;
    let q = Quaternion {
        w: half.cos(),
        x: aa[0] * s,
        y: aa[1] * s,
        z: aa[2] * s,
    };
    Ok(if q.w < T::zero() {
        Quaternion {
            w: -q.w,
            x: -q.x,
            y: -q.y,
            z: -q.z,
        }
    } else {
        q
    })
}

fn wrap_half_open<T: Real>(angle: T) -> T {
    let pi = T::lit(std::f64::consts::PI);
    if angle <= -pi {
        angle + T::lit(2.0) * pi
    } else if angle > pi {
        angle - T::lit(2.0) * pi
    } else {
        angle
    }
}

/// Intrinsic x-y-z Euler angles `[a, b, c]`, each in `(-π, π]`.
///
/// The middle angle uses `atan2(r02, hypot(r12, r22))`, which is the clamped `asin(r02)`
/// without its loss of precision near ±π/2. Within 1e-7 of gimbal lock the third angle is
/// pinned to zero and the first absorbs the combined rotation.
pub fn quaternion_to_xyz_euler<T: Real>(q: Quaternion<T>) -> Result<[T; 3]> {
    let n = q.norm();
    if !n.is_finite() || (n - T::one()).abs() > T::lit(1e-6) {
        return Err(Error::Contract(format!("quaternion norm {n} is not 1")));
    }
    let m = q.to_matrix();
    let sin_b = m[0][2].max(-T::one()).min(T::one());
    let cos_b = (m[1][2] * m[1][2] + m[2][2] * m[2][2]).sqrt();
    let b = sin_b.atan2(cos_b);
    let half_pi = T::lit(std::f64::consts::FRAC_PI_2);
    let (a, c) = if (b.abs() - half_pi).abs() <= T::lit(1e-7) {
        // r10 = sin(a ± c), r11 = cos(a ± c) with sign(sin b); c := 0.
        let sign = if sin_b >= T::zero() {
            T::one()
        } else {
            -T::one()
        };
        ((sign * m[1][0]).atan2(m[1][1]), T::zero())
    } else {
        ((-m[1][2]).atan2(m[2][2]), (-m[0][1]).atan2(m[0][0]))
    };
    Ok([wrap_half_open(a), wrap_half_open(b), wrap_half_open(c)])
}

/// `Rx(a) * Ry(b) * Rz(c)`.
pub fn xyz_euler_to_matrix<T: Real>(e: [T; 3]) -> [[T; 3]; 3] {
    let (sa, ca) = e[0].sin_cos();
    let (sb, cb) = e[1].sin_cos();
    let (sc, cc) = e[2].sin_cos();
    [
        [cb * cc, -cb * sc, sb],
        [sa * sb * cc + ca * sc, -sa * sb * sc + ca * cc, -sa * cb],
        [-ca * sb * cc + sa * sc, ca * sb * sc + sa * cc, ca * cb],
    ]
}

/// Axis-angle straight to x-y-z Euler angles via the unit quaternion.
pub fn axis_angle_to_xyz_euler<T: Real>(aa: [T; 3]) -> Result<[T; 3]> {
    quaternion_to_xyz_euler(axis_angle_to_quaternion(aa)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    #[test]
    fn zero_is_identity() {
        assert_eq!(
            axis_angle_to_quaternion([0.0f64; 3]).unwrap(),
            Quaternion::identity()
        );
        assert_eq!(
            quaternion_to_xyz_euler(Quaternion::<f64>::identity()).unwrap(),
            [0.0; 3]
        );
    }

    #[test]
    fn quarter_turn_about_x() {
        let q = axis_angle_to_quaternion([FRAC_PI_2, 0.0, 0.0]).unwrap();
        assert!((q.w - FRAC_PI_4.cos()).abs() < 1e-15);
        assert!((q.x - FRAC_PI_4.sin()).abs() < 1e-15);
        assert_eq!((q.y, q.z), (0.0, 0.0));
        let e = quaternion_to_xyz_euler(q).unwrap();
        assert!((e[0] - FRAC_PI_2).abs() < 1e-12 && e[1].abs() < 1e-12 && e[2].abs() < 1e-12);
    }

    #[test]
    fn single_axis_y_and_z() {
        let e = axis_angle_to_xyz_euler([0.0f64, 0.7, 0.0]).unwrap();
        assert!((e[1] - 0.7).abs() < 1e-12);
        let e = axis_angle_to_xyz_euler([0.0f64, 0.0, -1.2]).unwrap();
        assert!((e[2] + 1.2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            axis_angle_to_quaternion([f64::NAN, 0.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn non_unit_rejected() {
        let q = Quaternion {
            w: 1.0,
            x: 0.1,
            y: 0.0,
            z: 0.0,
        };
        assert!(matches!(
            quaternion_to_xyz_euler(q),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gimbal_lock_pins_third_angle() {
        for sign in [1.0, -1.0] {
            let e_in = [0.3, sign * FRAC_PI_2, 0.0];
            let m = xyz_euler_to_matrix(e_in);
            // Quaternion from the matrix via the y-rotation composition.
            let qx = axis_angle_to_quaternion([0.3, 0.0, 0.0]).unwrap();
            let qy = axis_angle_to_quaternion([0.0, sign * FRAC_PI_2, 0.0]).unwrap();
            let q = qx.mul(&qy);
            let e = quaternion_to_xyz_euler(q).unwrap();
            assert_eq!(e[2], 0.0);
            let back = xyz_euler_to_matrix(e);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((back[i][j] - m[i][j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn works_in_f32() {
        let e = axis_angle_to_xyz_euler([0.4f32, -0.2, 0.1]).unwrap();
        let m = xyz_euler_to_matrix(e);
        let q = axis_angle_to_quaternion([0.4f32, -0.2, 0.1])
            .unwrap()
            .to_matrix();
        for i in 0..3 {
            for j in 0..3 {
                assert!((m[i][j] - q[i][j]).abs() < 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn unit_norm_and_ranges(x in -1.5f64..1.5, y in -1.5f64..1.5, z in -1.5f64..1.5) {
            let q = axis_angle_to_quaternion([x, y, z]).unwrap();
            prop_assert!((q.norm() - 1.0).abs() < 1e-9);
            prop_assert!(q.w >= 0.0);
            let e = quaternion_to_xyz_euler(q).unwrap();
            for v in e {
                prop_assert!(v > -PI && v <= PI);
            }
        }
    }
}
